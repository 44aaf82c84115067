#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nlaf/dense.hpp"
#include "nlaf/engine.hpp"
#include "nlaf/solvers.hpp"

// Trainable counterpart of the constructed pipelines: a linear embedding into a
// d_embed-dimensional stream, a stack of transformer layers with ReluNetwork
// FFNs (hidden width ffn_mult * d_embed), and a linear map back to prompt rows,
// where the usual probe bands are read. The forward pass can record a tape;
// backward replays it in exact reverse mode (softmax Jacobian included), so
// finite differences agree to first order everywhere ReLU is differentiable.

namespace nlaf {

enum class LossKind { result, joint, step_solution };

const char* loss_kind_name(LossKind k);
std::optional<LossKind> loss_kind_from_name(const std::string& name);

enum class TeacherKind { cg, pcg };

const char* teacher_kind_name(TeacherKind k);
std::optional<TeacherKind> teacher_kind_from_name(const std::string& name);

// Piecewise-constant learning rate: run `steps` optimizer steps at `lr`, then
// move to the next phase. steps == 0 marks the final open-ended phase.
struct LrPhase {
    std::size_t steps = 0;
    double lr = 0.0;
};

struct TrainConfig {
    std::size_t n = 4;
    double sigma = 1.2;
    std::size_t d_embed = 32;
    std::size_t t_steps = 4;  // loop applications T; probes are read at t = 0..T
    std::size_t k_last = 5;   // learning-window length K for step_solution
    double eta = 5e-4;        // weight on the (r, d) channel in the joint loss
    double lambda = 10.0;     // weight on the solution term in step_solution
    std::size_t batch = 16;
    std::size_t steps = 2000;
    std::uint64_t seed = 1234;
    LossKind supervision = LossKind::joint;
    TeacherKind teacher = TeacherKind::cg;
    std::vector<LrPhase> lr_schedule = {{1000, 1e-3}, {500, 3e-4}, {0, 1e-4}};
    std::size_t eval_every = 100;  // held-out metric cadence (also at step 0 and the end)
    std::size_t eval_count = 64;   // held-out problem count
    std::size_t pre_heads = 4;     // mirrors the constructed block budgets
    std::size_t loop_heads = 2;
    std::size_t ffn_mult = 4;
    double init_scale = 0.02;
    bool normalize = true;  // scale (A, b) by 1/max(1, |A|_max, |b|_max) per problem

    // eta, lambda >= 0; 1 <= k_last <= t_steps + 1; t_steps >= n (the
    // discrepancy metric sums t = 2..n); positive sizes; nonempty schedule.
    void validate() const;

    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

// The toy run the acceptance gate trains: n = 4, d_embed = 32, T = 4, K = 5,
// batch 16, 2000 steps, joint supervision.
TrainConfig toy_joint_preset();

// Same shape under step_solution supervision with a 2-step learning window.
TrainConfig toy_step_solution_preset();

// Sweep grids for the two supervision weights (no figure-level claims attached;
// they bound desk-scale experiments).
std::vector<double> eta_grid();     // {0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001}
std::vector<double> lambda_grid();  // {13, 10, 7, 4, 1, 0.5}

struct TrainablePipeline {
    std::size_t h_prompt = 0;
    std::size_t d_embed = 0;
    std::size_t t_steps = 0;
    DenseMatrix embed;                   // d_embed x h_prompt
    std::vector<TransformerLayer> pre;   // run once on the embedded prompt
    std::vector<TransformerLayer> loop;  // run t_steps times, weights shared
    DenseMatrix out_map;                 // h_prompt x d_embed
    ProbeSpec probes;                    // prompt-space bands, read from decoded states
};

// Random initialization from rng: embed/out_map at 1/sqrt(fan_in), attention
// weights at init_scale, FFN first layer at sqrt(2/d_embed), biases zero.
TrainablePipeline make_trainable(const TrainConfig& cfg, Rng& rng);

// Same tensors, zero values. Used for gradients and Adam moments so that one
// traversal order covers weights, gradients, and optimizer state.
TrainablePipeline zero_like(const TrainablePipeline& tp);

// Flat named views of every trainable tensor, in a fixed order: embed, pre
// layers (per head w_q, w_k, w_v, then ffn w1, b1, w2, b2), loop layers, out_map.
struct ParamRef {
    std::string name;
    double* data = nullptr;
    std::size_t len = 0;
};
std::vector<ParamRef> param_refs(TrainablePipeline& tp);

struct BlockTape {
    std::vector<LayerRecord> layers;
};

// states[t] and decoded[t] for t = 0..t_steps; states[0] follows the pre block.
// x[t] and in_rd[t] = (r, d) are probe reads of decoded[t]'s last column, the
// same convention nlaf_run uses on prompt trajectories.
struct ForwardTape {
    DenseMatrix p0;
    DenseMatrix s_embed;
    BlockTape pre;
    std::vector<BlockTape> steps;
    std::vector<DenseMatrix> states;
    std::vector<DenseMatrix> decoded;
    std::vector<DenseVector> x;
    std::vector<DenseVector> in_rd;
};

// Throws if any FFN is not a ReluNetwork (exact oracles are not differentiable).
ForwardTape forward_tape(const TrainablePipeline& tp, const DenseMatrix& p0);

// Accumulates d(loss)/d(weights) into grads given d(loss)/d(decoded[t]) seeds.
// Loop-block gradients sum over all t_steps applications.
void backward(const TrainablePipeline& tp, const ForwardTape& tape,
              const std::vector<DenseMatrix>& decoded_grads, TrainablePipeline& grads);

struct AdamState {
    TrainablePipeline m;
    TrainablePipeline v;
    std::size_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};
AdamState make_adam(const TrainablePipeline& tp);
void adam_step(TrainablePipeline& tp, TrainablePipeline& grads, AdamState& st, double lr);

// Trajectory losses for one problem (batch averaging is the caller's job).
// x_hat/in_hat are indexed t = 0..T and must match the teacher's length.
//   result:        (1/(n(T+1))) sum_t |x_hat_t - x_t|^2
//   joint:         adds eta |in_hat_t - (r_t, d_t)|^2 inside the sum; eta = 0
//                  reduces to result bitwise
//   step_solution: (1/((T-T0+1) n)) sum_{t=T0..T} |x_hat_t - x_t|^2
//                  + lambda |x_hat_t - x_true|^2, T0 = max(T-K+1, 0); lambda = 0
//                  with K = T+1 reduces to result bitwise
double loss_result(const std::vector<DenseVector>& x_hat, const CgTrajectory& teacher);
double loss_joint(const std::vector<DenseVector>& x_hat,
                  const std::vector<DenseVector>& in_hat, const CgTrajectory& teacher,
                  double eta);
double loss_step_solution(const std::vector<DenseVector>& x_hat, const CgTrajectory& teacher,
                          const DenseVector& x_true, double lambda, std::size_t k);

double loss_value(const ForwardTape& tape, const CgTrajectory& teacher,
                  const DenseVector& x_true, const TrainConfig& cfg);

// d(loss)/d(decoded[t]) for one problem, scaled by w (1/batch for batch means).
// Nonzero only in the probe bands of the last column.
std::vector<DenseMatrix> loss_seed(const ForwardTape& tape, const ProbeSpec& probes,
                                   const CgTrajectory& teacher, const DenseVector& x_true,
                                   const TrainConfig& cfg, double w);

// Per-problem normalization: gamma = 1/max(1, |A|_max, max_i |b_i|). The x
// iterates of conjugate gradient are invariant under (A, b) -> (gamma A,
// gamma b); r and d scale by gamma, so teachers come from the scaled system.
struct ScaledProblem {
    double gamma = 1.0;
    DenseMatrix a;
    DenseVector b;
};
ScaledProblem scale_problem(const Problem& p, bool normalize);

CgTrajectory teacher_trajectory(const ScaledProblem& sp, TeacherKind kind,
                                std::size_t t_steps);

// Held-out metrics, averaged over problems:
//   rel_err[t]   = |x_hat_t - x_true|^2 / |x_true|^2
//   int_err[t]   = (1/n) |in_hat_t - (r_t, d_t)|^2
//   discrepancy  = (1/n) sum_{t=2..n} (1/(n-1)) |in_hat_t - (r_t, d_t)|^2
// The discrepancy sum runs t = 2..n (not 2..T); t_steps >= n makes it defined.
struct MetricSet {
    std::vector<double> rel_err;
    std::vector<double> int_err;
    double discrepancy = 0.0;
};

struct MetricRow {
    std::size_t step = 0;
    double loss = 0.0;
    MetricSet metrics;
};

MetricRow evaluate(const TrainablePipeline& tp, const std::vector<Problem>& problems,
                   const TrainConfig& cfg, std::size_t step);

// CSV schema: step,loss,rel_err_t0..tT,int_err_t0..tT,discrepancy (%.17g).
std::string metric_csv_header(std::size_t t_steps);
std::string metric_csv_row(const MetricRow& row);

struct TrainResult {
    TrainablePipeline pipeline;
    std::vector<MetricRow> history;
};

// Deterministic given cfg.seed: init, batches, and the held-out set all derive
// from split streams of one root generator; gradient reductions run in a fixed
// serial order. A non-finite loss aborts, naming the first non-finite tensor.
TrainResult train(const TrainConfig& cfg);

}  // namespace nlaf
