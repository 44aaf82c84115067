#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nlaf/engine.hpp"
#include "nlaf/solvers.hpp"

// Explicit weight constructions. Each builder returns a transformer layer stack
// whose forward pass executes one linear-algebra operation on a structured
// prompt, built from the (C, c) softmax-linearization mechanism:
//
//   Z = C e_1 1^T + c_eff * (key payload)^T (selector payload)
//   e^C softmax(Z)_(l,j) ~= 1 + Z_(l,j)   for rows l below the C row
//
// Every linearized head comes with a constant-cancelling clone (selector rows
// zeroed in W_Q, W_V negated); the pair leaves untargeted columns bitwise
// untouched. A following FFN rescales by 1/c_eff and eliminates consumed bands.
//
// c_eff is c divided by the worst-case payload accumulation (1, n, or n^2), so
// the recovered error stays <= c/2 for [-1,1] payloads regardless of n.

namespace nlaf {

struct LinearizationParams {
    double C = 15.0;
    double c = 1e-3;
    void validate() const;  // 0 < C <= 30, 0 < c <= 1
};

struct PwlFfnParams {
    double domain_bound = 4.0;  // B: operands live in [-B, B]
    std::size_t knots = 256;    // K: knots per interpolated square
    double div_guard = 1e-2;    // delta: division requires |b| >= delta
};

struct ConstructionReport {
    std::string op;
    std::size_t n = 0;
    std::size_t layers = 0;
    std::size_t heads = 0;  // per layer
    double C = 0.0;
    double c = 0.0;
    std::string ffn_variant;
    double max_error = 0.0;
    std::size_t prompt_rows = 0;
    std::size_t prompt_cols = 0;
    std::string note;  // e.g. "linear ffn swap, no attention" for row shift
};

struct BuiltOp {
    std::string name;               // op_name(kind), or "cg_pre" / "cg_loop"
    std::optional<OpKind> kind;     // unset for the CG blocks
    std::size_t n = 0;
    std::vector<TransformerLayer> layers;
    RowLayout layout;
    std::size_t prompt_rows = 0;
    std::size_t prompt_cols = 0;
    std::string ffn_variant;
    std::string note;
    LinearizationParams lin;
    PwlFfnParams pwl;
};

struct OpBudget {
    std::size_t layers = 0;
    std::size_t heads = 0;  // per layer
};

OpBudget budget_for(OpKind kind);
std::pair<std::size_t, std::size_t> expected_prompt_shape(OpKind kind, std::size_t n);

BuiltOp build_pointwise(OpKind op, std::size_t n, const PwlFfnParams& pwl);
BuiltOp build_column_shift(std::size_t n, const LinearizationParams& lin);
BuiltOp build_row_shift(std::size_t n);
BuiltOp build_vector_transpose(std::size_t n, const LinearizationParams& lin);
BuiltOp build_inner_product(std::size_t n, const LinearizationParams& lin);
BuiltOp build_outer_product(std::size_t n, const LinearizationParams& lin);
BuiltOp build_matrix_transpose(std::size_t n, const LinearizationParams& lin);
BuiltOp build_atb(std::size_t n, const LinearizationParams& lin);
BuiltOp build_ab(std::size_t n, const LinearizationParams& lin);
BuiltOp build_ab_vec(std::size_t n, const LinearizationParams& lin);

// Uniform entry point for the ten table operations.
BuiltOp build_op(OpKind kind, std::size_t n, const LinearizationParams& lin,
                 const PwlFfnParams& pwl);

// Conjugate-gradient blocks. The shared prompt layout stacks, top to bottom:
// operand_a (rows of A as columns), b_row, d_band, x_band, r_band, scratch,
// positional; height 6n+2, width n+1.
struct CgBlocks {
    BuiltOp pre;   // 1 layer, 4 heads; FFN forms d_0 = r_0 = b - A x_0
    BuiltOp loop;  // 1 layer, 2 heads; ExactOracle FFN performs one CG step
};
BuiltOp build_cg_pre(std::size_t n, const LinearizationParams& lin);
BuiltOp build_cg_loop(std::size_t n, const LinearizationParams& lin);
CgBlocks build_cg_blocks(std::size_t n, const LinearizationParams& lin);

// The shared 7-band CG prompt frame (height 6n+2, width n+1), also used by the
// trainable pipeline so that constructed and learned models see identical
// prompts.
RowLayout cg_prompt_layout(std::size_t n);
PromptMatrix make_cg_prompt(std::size_t n, const DenseMatrix& a, const DenseVector& b,
                            const DenseVector& x0);
PromptMatrix make_cg_prompt(const BuiltOp& built, const DenseMatrix& a,
                            const DenseVector& b, const DenseVector& x0);
NlafPipeline make_cg_pipeline(const CgBlocks& blocks, std::size_t t_steps,
                              bool post_is_loop = true);
ProbeSpec cg_probes(const RowLayout& layout);
ProbeSpec cg_probes(const BuiltOp& built);

// Prompt encoding/decoding for the table ops. Inputs follow the op_oracle
// convention (vectors as n x 1 columns, except row_shift / vector_transpose
// which take 1 x n rows).
PromptMatrix make_prompt(const BuiltOp& built, const std::vector<DenseMatrix>& inputs);
DenseMatrix run_built(const BuiltOp& built, const PromptMatrix& prompt);
DenseMatrix read_result(const BuiltOp& built, const DenseMatrix& out_prompt);

// Seeded payloads in [-1,1] (division denominators in +-[div_guard, 1]).
std::vector<DenseMatrix> draw_inputs(OpKind kind, std::size_t n, Rng& rng,
                                     double div_guard);

// Builds, runs `draws` seeded payloads, returns max |result - oracle| entry.
double measure_op_error(const BuiltOp& built, Rng& rng, int draws);

struct SweepGrid {
    std::vector<double> C = {5.0, 10.0, 15.0, 20.0};
    std::vector<double> c = {1e-1, 1e-2, 1e-3, 1e-4};
};

// One report per grid point; payload draws are identical across grid points so
// errors are comparable. Large errors at coarse points are recorded, not fatal.
std::vector<ConstructionReport> sweep_linearization(OpKind kind, std::size_t n,
                                                    const SweepGrid& grid,
                                                    const PwlFfnParams& pwl,
                                                    std::uint64_t seed);

ConstructionReport report_for(const BuiltOp& built, double max_error);
std::string report_csv_header();
std::string report_csv_row(const ConstructionReport& r);

// Exact one-hidden-layer ReLU realization of a column-wise linear map u -> L u
// via x = relu(x) - relu(-x); zero rows of L are dropped from the hidden layer.
ReluNetwork linear_ffn(const DenseMatrix& l);

// Analytic worst-case interpolation bounds for the PWL FFNs, used to check that
// measured errors are consistent with theory.
double pwl_mul_bound(const PwlFfnParams& pwl);
double pwl_div_bound(const PwlFfnParams& pwl, double a_max);

}  // namespace nlaf
