#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "nlaf/dense.hpp"

// Transformer forward semantics on prompt matrices:
//
//   Attn(P) = P + sum_i W_V^(i) P softmax(P^T W_K^(i)T W_Q^(i) P)
//   FFN(P)  = W_2 ReLU(W_1 P + b_1 1^T) + b_2 1^T        (column-wise)
//   TF(P)   = Attn(P) + FFN(Attn(P))
//
// softmax normalizes each column (the denominator sums over the row index).
// Prompts are h x m: rows are feature bands, columns are tokens.

namespace nlaf {

struct AttentionHead {
    DenseMatrix w_q;  // d_head x h
    DenseMatrix w_k;  // d_head x h
    DenseMatrix w_v;  // h x h
};

// One hidden layer, evaluated as w2 * relu(w1 * u + b1) + b2 per column.
struct ReluNetwork {
    DenseMatrix w1;
    DenseVector b1;
    DenseMatrix w2;
    DenseVector b2;
};

// Short stack of hidden layers with ReLU between and an affine output layer.
// Used only where a single hidden layer cannot express the map (PWL division).
struct ReluMlp {
    struct Layer {
        DenseMatrix w;
        DenseVector b;
    };
    std::vector<Layer> layers;  // last layer is affine, earlier ones feed ReLU
};

// Deterministic column function: fn(input column, output column). The output is
// the FFN value for that column (the delta the layer adds), not input+delta.
struct ExactOracle {
    std::string name;
    std::function<void(const std::vector<double>&, std::vector<double>&)> fn;
};

struct ColumnMap {
    std::variant<ReluNetwork, ReluMlp, ExactOracle> kind;
    // Optional per-column domain guard, run before evaluation (used by div to
    // reject |b| below the build-declared threshold).
    std::function<void(const std::vector<double>&)> domain_check;

    bool is_exact_oracle() const { return std::holds_alternative<ExactOracle>(kind); }
    const char* variant_name() const;
};

struct Band {
    std::size_t start = 0;
    std::size_t len = 0;
    std::size_t end() const { return start + len; }
};

// Named row bands of a prompt. Band names follow the construction vocabulary:
// operand_a, operand_b, result, b_row, d_band, x_band, r_band, scratch,
// positional.
struct RowLayout {
    std::map<std::string, Band> bands;

    void add(const std::string& name, std::size_t start, std::size_t len);
    bool has(const std::string& name) const { return bands.count(name) != 0; }
    Band band(const std::string& name) const;  // throws if missing
    void validate(std::size_t height) const;   // disjoint and in range
};

struct PromptMatrix {
    DenseMatrix p;
    RowLayout layout;
};

struct TransformerLayer {
    std::vector<AttentionHead> heads;
    ColumnMap ffn;
};

// pre runs once, loop runs loop_count-1 times followed by post (or loop_count
// times when post is empty; see nlaf_run).
struct NlafPipeline {
    std::vector<TransformerLayer> pre;
    std::vector<TransformerLayer> loop;
    std::vector<TransformerLayer> post;
    std::size_t loop_count = 0;  // T
};

// Probe bands are read from the last prompt column. in = (r, d) concatenated.
struct ProbeSpec {
    Band x;
    Band r;
    Band d;
};

struct NlafTrajectory {
    std::vector<DenseMatrix> prompts;   // T+1 states (index t = 0..T)
    std::vector<DenseVector> x;         // probe reads per t
    std::vector<DenseVector> in_rd;     // (r, d) probe reads per t
};

// Recording hooks for reverse-mode autodiff. When a record pointer is passed,
// the forward pass stores its intermediates; arithmetic is identical either way.
struct HeadRecord {
    DenseMatrix qp, kp, z, s, vp;  // W_Q P, W_K P, Z, softmax(Z), W_V P
};
struct LayerRecord {
    DenseMatrix p_in;
    std::vector<HeadRecord> heads;
    DenseMatrix attn_out;
    DenseMatrix hidden_pre;  // W_1 U + b_1 1^T (ReluNetwork only)
    DenseMatrix out;
};

DenseMatrix attn(const DenseMatrix& p, const std::vector<AttentionHead>& heads,
                 LayerRecord* rec = nullptr);
DenseMatrix ffn_apply(const DenseMatrix& p, const ColumnMap& f, LayerRecord* rec = nullptr);
DenseMatrix tf_layer(const DenseMatrix& p, const TransformerLayer& layer,
                     LayerRecord* rec = nullptr);

PromptMatrix tf_layer(const PromptMatrix& p, const TransformerLayer& layer);

NlafTrajectory nlaf_run(const PromptMatrix& p0, const NlafPipeline& pipe,
                        const ProbeSpec& probes);

// Reads band rows of the last column.
DenseVector read_band_last_col(const DenseMatrix& p, const Band& band);

}  // namespace nlaf
