#include "nlaf/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>

#include <json.hpp>

#include "nlaf/constructions.hpp"

namespace nlaf {

const char* loss_kind_name(LossKind k) {
    switch (k) {
        case LossKind::result: return "result";
        case LossKind::joint: return "joint";
        case LossKind::step_solution: return "step_solution";
    }
    return "?";
}

std::optional<LossKind> loss_kind_from_name(const std::string& name) {
    if (name == "result") return LossKind::result;
    if (name == "joint") return LossKind::joint;
    if (name == "step_solution") return LossKind::step_solution;
    return std::nullopt;
}

const char* teacher_kind_name(TeacherKind k) {
    return k == TeacherKind::cg ? "cg" : "pcg";
}

std::optional<TeacherKind> teacher_kind_from_name(const std::string& name) {
    if (name == "cg") return TeacherKind::cg;
    if (name == "pcg") return TeacherKind::pcg;
    return std::nullopt;
}

// ---- config ---------------------------------------------------------------------

namespace {

void cfg_want(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("train config: " + msg);
}

}  // namespace

void TrainConfig::validate() const {
    cfg_want(n >= 1, "n must be >= 1");
    cfg_want(sigma >= 0.0, "sigma must be >= 0 (got " + std::to_string(sigma) + ")");
    cfg_want(d_embed >= 1, "d_embed must be >= 1");
    cfg_want(t_steps >= 1, "t_steps must be >= 1");
    cfg_want(t_steps >= n,
             "t_steps must be >= n so the discrepancy sum over t = 2..n is defined (got "
             "t_steps = " + std::to_string(t_steps) + ", n = " + std::to_string(n) + ")");
    cfg_want(eta >= 0.0, "eta must be >= 0 (got " + std::to_string(eta) + ")");
    cfg_want(lambda >= 0.0, "lambda must be >= 0 (got " + std::to_string(lambda) + ")");
    cfg_want(k_last >= 1 && k_last <= t_steps + 1,
             "k_last must be in [1, t_steps + 1] (got " + std::to_string(k_last) + ")");
    cfg_want(batch >= 1, "batch must be >= 1");
    cfg_want(eval_every >= 1, "eval_every must be >= 1");
    cfg_want(eval_count >= 1, "eval_count must be >= 1");
    cfg_want(pre_heads >= 1 && loop_heads >= 1, "head counts must be >= 1");
    cfg_want(ffn_mult >= 1, "ffn_mult must be >= 1");
    cfg_want(init_scale > 0.0, "init_scale must be > 0");
    cfg_want(!lr_schedule.empty(), "lr_schedule must not be empty");
    for (const auto& ph : lr_schedule)
        cfg_want(ph.lr >= 0.0, "learning rates must be >= 0");
}

std::string TrainConfig::to_json() const {
    nlohmann::json j;
    j["n"] = n;
    j["sigma"] = sigma;
    j["d_embed"] = d_embed;
    j["t_steps"] = t_steps;
    j["k_last"] = k_last;
    j["eta"] = eta;
    j["lambda"] = lambda;
    j["batch"] = batch;
    j["steps"] = steps;
    j["seed"] = seed;
    j["supervision"] = loss_kind_name(supervision);
    j["teacher"] = teacher_kind_name(teacher);
    nlohmann::json sched = nlohmann::json::array();
    for (const auto& ph : lr_schedule) sched.push_back({{"steps", ph.steps}, {"lr", ph.lr}});
    j["lr_schedule"] = sched;
    j["eval_every"] = eval_every;
    j["eval_count"] = eval_count;
    j["pre_heads"] = pre_heads;
    j["loop_heads"] = loop_heads;
    j["ffn_mult"] = ffn_mult;
    j["init_scale"] = init_scale;
    j["normalize"] = normalize;
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    TrainConfig c;
    c.n = j.at("n").get<std::size_t>();
    c.sigma = j.at("sigma").get<double>();
    c.d_embed = j.at("d_embed").get<std::size_t>();
    c.t_steps = j.at("t_steps").get<std::size_t>();
    c.k_last = j.at("k_last").get<std::size_t>();
    c.eta = j.at("eta").get<double>();
    c.lambda = j.at("lambda").get<double>();
    c.batch = j.at("batch").get<std::size_t>();
    c.steps = j.at("steps").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    const std::string sup = j.at("supervision").get<std::string>();
    auto kind = loss_kind_from_name(sup);
    if (!kind) throw std::invalid_argument("train config: unknown supervision '" + sup + "'");
    c.supervision = *kind;
    const std::string tea = j.at("teacher").get<std::string>();
    auto tk = teacher_kind_from_name(tea);
    if (!tk) throw std::invalid_argument("train config: unknown teacher '" + tea + "'");
    c.teacher = *tk;
    c.lr_schedule.clear();
    for (const auto& ph : j.at("lr_schedule"))
        c.lr_schedule.push_back(
            {ph.at("steps").get<std::size_t>(), ph.at("lr").get<double>()});
    c.eval_every = j.at("eval_every").get<std::size_t>();
    c.eval_count = j.at("eval_count").get<std::size_t>();
    c.pre_heads = j.at("pre_heads").get<std::size_t>();
    c.loop_heads = j.at("loop_heads").get<std::size_t>();
    c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
    c.init_scale = j.at("init_scale").get<double>();
    c.normalize = j.at("normalize").get<bool>();
    c.validate();
    return c;
}

TrainConfig toy_joint_preset() {
    TrainConfig c;
    c.n = 4;
    c.sigma = 1.2;
    c.d_embed = 32;
    c.t_steps = 4;
    c.k_last = 5;
    c.eta = 0.01;
    c.lambda = 10.0;
    c.batch = 16;
    c.steps = 2000;
    c.seed = 1234;
    c.supervision = LossKind::joint;
    c.teacher = TeacherKind::cg;
    return c;
}

TrainConfig toy_step_solution_preset() {
    TrainConfig c = toy_joint_preset();
    c.supervision = LossKind::step_solution;
    c.k_last = 2;
    c.lambda = 10.0;
    return c;
}

std::vector<double> eta_grid() { return {0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001}; }

std::vector<double> lambda_grid() { return {13.0, 10.0, 7.0, 4.0, 1.0, 0.5}; }

// ---- pipeline construction ------------------------------------------------------

namespace {

DenseMatrix gauss(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
    DenseMatrix m(rows, cols);
    for (double& v : m.data) v = rng.normal() * scale;
    return m;
}

TransformerLayer make_layer(std::size_t d, std::size_t heads, std::size_t hidden,
                            double init_scale, Rng& rng) {
    TransformerLayer layer;
    for (std::size_t h = 0; h < heads; ++h) {
        AttentionHead head;
        head.w_q = gauss(d, d, init_scale, rng);
        head.w_k = gauss(d, d, init_scale, rng);
        head.w_v = gauss(d, d, init_scale, rng);
        layer.heads.push_back(std::move(head));
    }
    ReluNetwork f;
    f.w1 = gauss(hidden, d, std::sqrt(2.0 / static_cast<double>(d)), rng);
    f.b1 = DenseVector(hidden);
    f.w2 = gauss(d, hidden, init_scale, rng);
    f.b2 = DenseVector(d);
    layer.ffn.kind = std::move(f);
    return layer;
}

ReluNetwork& trainable_ffn(TransformerLayer& layer) {
    ReluNetwork* f = std::get_if<ReluNetwork>(&layer.ffn.kind);
    if (!f)
        throw std::invalid_argument(
            std::string("trainable pipeline: FFN '") + layer.ffn.variant_name() +
            "' is not differentiable; only relu_network is supported");
    return *f;
}

const ReluNetwork& trainable_ffn(const TransformerLayer& layer) {
    return trainable_ffn(const_cast<TransformerLayer&>(layer));
}

}  // namespace

TrainablePipeline make_trainable(const TrainConfig& cfg, Rng& rng) {
    cfg.validate();
    TrainablePipeline tp;
    tp.h_prompt = 6 * cfg.n + 2;
    tp.d_embed = cfg.d_embed;
    tp.t_steps = cfg.t_steps;
    const std::size_t hidden = cfg.ffn_mult * cfg.d_embed;
    tp.embed = gauss(cfg.d_embed, tp.h_prompt,
                     1.0 / std::sqrt(static_cast<double>(tp.h_prompt)), rng);
    tp.pre.push_back(make_layer(cfg.d_embed, cfg.pre_heads, hidden, cfg.init_scale, rng));
    tp.loop.push_back(make_layer(cfg.d_embed, cfg.loop_heads, hidden, cfg.init_scale, rng));
    tp.out_map = gauss(tp.h_prompt, cfg.d_embed,
                       1.0 / std::sqrt(static_cast<double>(cfg.d_embed)), rng);
    tp.probes = cg_probes(cg_prompt_layout(cfg.n));
    return tp;
}

namespace {

void push_ref(std::vector<ParamRef>& out, std::string name, DenseMatrix& m) {
    out.push_back({std::move(name), m.data.data(), m.data.size()});
}

void push_ref(std::vector<ParamRef>& out, std::string name, DenseVector& v) {
    out.push_back({std::move(name), v.data.data(), v.data.size()});
}

void layer_refs(std::vector<ParamRef>& out, const std::string& prefix,
                std::vector<TransformerLayer>& layers) {
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const std::string base = prefix + std::to_string(li);
        TransformerLayer& layer = layers[li];
        for (std::size_t hi = 0; hi < layer.heads.size(); ++hi) {
            const std::string hb = base + ".h" + std::to_string(hi);
            push_ref(out, hb + ".wq", layer.heads[hi].w_q);
            push_ref(out, hb + ".wk", layer.heads[hi].w_k);
            push_ref(out, hb + ".wv", layer.heads[hi].w_v);
        }
        ReluNetwork& f = trainable_ffn(layer);
        push_ref(out, base + ".ffn.w1", f.w1);
        push_ref(out, base + ".ffn.b1", f.b1);
        push_ref(out, base + ".ffn.w2", f.w2);
        push_ref(out, base + ".ffn.b2", f.b2);
    }
}

}  // namespace

std::vector<ParamRef> param_refs(TrainablePipeline& tp) {
    std::vector<ParamRef> out;
    push_ref(out, "embed", tp.embed);
    layer_refs(out, "pre", tp.pre);
    layer_refs(out, "loop", tp.loop);
    push_ref(out, "out_map", tp.out_map);
    return out;
}

TrainablePipeline zero_like(const TrainablePipeline& tp) {
    TrainablePipeline z = tp;
    for (auto& r : param_refs(z)) std::fill(r.data, r.data + r.len, 0.0);
    return z;
}

// ---- forward with tape ----------------------------------------------------------

namespace {

DenseVector read_rd(const DenseMatrix& p, const ProbeSpec& probes) {
    DenseVector r = read_band_last_col(p, probes.r);
    DenseVector d = read_band_last_col(p, probes.d);
    DenseVector out(r.size() + d.size());
    for (std::size_t i = 0; i < r.size(); ++i) out[i] = r[i];
    for (std::size_t i = 0; i < d.size(); ++i) out[r.size() + i] = d[i];
    return out;
}

void push_state(const TrainablePipeline& tp, ForwardTape& tape, const DenseMatrix& s) {
    tape.states.push_back(s);
    tape.decoded.push_back(matmul(tp.out_map, s));
    tape.x.push_back(read_band_last_col(tape.decoded.back(), tp.probes.x));
    tape.in_rd.push_back(read_rd(tape.decoded.back(), tp.probes));
}

}  // namespace

ForwardTape forward_tape(const TrainablePipeline& tp, const DenseMatrix& p0) {
    if (p0.rows != tp.h_prompt)
        throw std::invalid_argument("forward_tape: prompt " + p0.shape_str() +
                                    ", want height " + std::to_string(tp.h_prompt));
    for (const auto& layer : tp.pre) trainable_ffn(layer);
    for (const auto& layer : tp.loop) trainable_ffn(layer);

    ForwardTape tape;
    tape.p0 = p0;
    tape.s_embed = matmul(tp.embed, p0);
    DenseMatrix s = tape.s_embed;
    for (const auto& layer : tp.pre) {
        LayerRecord rec;
        s = tf_layer(s, layer, &rec);
        tape.pre.layers.push_back(std::move(rec));
    }
    push_state(tp, tape, s);
    for (std::size_t t = 1; t <= tp.t_steps; ++t) {
        BlockTape bt;
        for (const auto& layer : tp.loop) {
            LayerRecord rec;
            s = tf_layer(s, layer, &rec);
            bt.layers.push_back(std::move(rec));
        }
        tape.steps.push_back(std::move(bt));
        push_state(tp, tape, s);
    }
    return tape;
}

// ---- reverse mode ---------------------------------------------------------------

namespace {

void acc_add(DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw std::invalid_argument("acc_add: " + a.shape_str() + " vs " + b.shape_str());
    for (std::size_t k = 0; k < a.data.size(); ++k) a.data[k] += b.data[k];
}

void acc_rowsum(DenseVector& v, const DenseMatrix& m) {
    if (v.size() != m.rows)
        throw std::invalid_argument("acc_rowsum: " + std::to_string(v.size()) + " vs " +
                                    m.shape_str());
    for (std::size_t i = 0; i < m.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) s += m.at(i, j);
        v[i] += s;
    }
}

// d/dZ of softmax per column: gZ = S o (gS - 1 (S o gS column sums)).
DenseMatrix softmax_backward(const DenseMatrix& s, const DenseMatrix& gs) {
    DenseMatrix gz(s.rows, s.cols);
    for (std::size_t j = 0; j < s.cols; ++j) {
        double dotc = 0.0;
        for (std::size_t l = 0; l < s.rows; ++l) dotc += s.at(l, j) * gs.at(l, j);
        for (std::size_t l = 0; l < s.rows; ++l)
            gz.at(l, j) = s.at(l, j) * (gs.at(l, j) - dotc);
    }
    return gz;
}

DenseMatrix backward_layer(const TransformerLayer& lw, const LayerRecord& rec,
                           const DenseMatrix& g_out, TransformerLayer& gl) {
    const ReluNetwork& fw = trainable_ffn(lw);
    ReluNetwork& gf = trainable_ffn(gl);

    // FFN half: out = u + w2 relu(w1 u + b1) + b2, u = rec.attn_out.
    DenseMatrix hidden = relu(rec.hidden_pre);
    acc_add(gf.w2, matmul(g_out, transpose(hidden)));
    acc_rowsum(gf.b2, g_out);
    DenseMatrix gh = matmul(transpose(fw.w2), g_out);
    for (std::size_t k = 0; k < gh.data.size(); ++k)
        if (rec.hidden_pre.data[k] <= 0.0) gh.data[k] = 0.0;  // ReLU subgradient 0 at 0
    acc_add(gf.w1, matmul(gh, transpose(rec.attn_out)));
    acc_rowsum(gf.b1, gh);
    DenseMatrix gu = add(g_out, matmul(transpose(fw.w1), gh));

    // Attention half: u = p + sum_i vp_i s_i with s_i = softmax((kp_i)^T qp_i).
    DenseMatrix gp = gu;
    for (std::size_t i = 0; i < lw.heads.size(); ++i) {
        const HeadRecord& hr = rec.heads[i];
        const AttentionHead& hw = lw.heads[i];
        AttentionHead& gw = gl.heads[i];
        DenseMatrix gvp = matmul(gu, transpose(hr.s));
        DenseMatrix gs = matmul(transpose(hr.vp), gu);
        DenseMatrix gz = softmax_backward(hr.s, gs);
        DenseMatrix gqp = matmul(hr.kp, gz);
        DenseMatrix gkp = matmul(hr.qp, transpose(gz));
        acc_add(gw.w_q, matmul(gqp, transpose(rec.p_in)));
        acc_add(gw.w_k, matmul(gkp, transpose(rec.p_in)));
        acc_add(gw.w_v, matmul(gvp, transpose(rec.p_in)));
        gp = add(gp, matmul(transpose(hw.w_q), gqp));
        gp = add(gp, matmul(transpose(hw.w_k), gkp));
        gp = add(gp, matmul(transpose(hw.w_v), gvp));
    }
    return gp;
}

DenseMatrix backward_block(const std::vector<TransformerLayer>& lw,
                           std::vector<TransformerLayer>& gl, const BlockTape& bt,
                           DenseMatrix g) {
    if (bt.layers.size() != lw.size())
        throw std::logic_error("backward: tape has " + std::to_string(bt.layers.size()) +
                               " layer records, block has " + std::to_string(lw.size()));
    for (std::size_t i = lw.size(); i >= 1; --i)
        g = backward_layer(lw[i - 1], bt.layers[i - 1], g, gl[i - 1]);
    return g;
}

}  // namespace

void backward(const TrainablePipeline& tp, const ForwardTape& tape,
              const std::vector<DenseMatrix>& decoded_grads, TrainablePipeline& grads) {
    if (decoded_grads.size() != tape.states.size())
        throw std::invalid_argument("backward: " + std::to_string(decoded_grads.size()) +
                                    " seed matrices for " +
                                    std::to_string(tape.states.size()) + " states");
    if (tape.steps.size() != tp.t_steps)
        throw std::logic_error("backward: tape has " + std::to_string(tape.steps.size()) +
                               " loop applications, pipeline wants " +
                               std::to_string(tp.t_steps));
    const DenseMatrix out_t = transpose(tp.out_map);
    std::vector<DenseMatrix> g_state;
    g_state.reserve(tape.states.size());
    for (std::size_t t = 0; t < tape.states.size(); ++t) {
        acc_add(grads.out_map, matmul(decoded_grads[t], transpose(tape.states[t])));
        g_state.push_back(matmul(out_t, decoded_grads[t]));
    }
    DenseMatrix carry = g_state.back();
    for (std::size_t t = tape.steps.size(); t >= 1; --t) {
        carry = backward_block(tp.loop, grads.loop, tape.steps[t - 1], carry);
        carry = add(carry, g_state[t - 1]);
    }
    carry = backward_block(tp.pre, grads.pre, tape.pre, carry);
    acc_add(grads.embed, matmul(carry, transpose(tape.p0)));
}

// ---- optimizer ------------------------------------------------------------------

AdamState make_adam(const TrainablePipeline& tp) {
    AdamState st;
    st.m = zero_like(tp);
    st.v = zero_like(tp);
    return st;
}

void adam_step(TrainablePipeline& tp, TrainablePipeline& grads, AdamState& st, double lr) {
    auto pw = param_refs(tp);
    auto pg = param_refs(grads);
    auto pm = param_refs(st.m);
    auto pv = param_refs(st.v);
    if (pw.size() != pg.size() || pw.size() != pm.size() || pw.size() != pv.size())
        throw std::logic_error("adam_step: parameter registries disagree");
    st.t += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (std::size_t r = 0; r < pw.size(); ++r) {
        if (pw[r].len != pg[r].len)
            throw std::logic_error("adam_step: shape mismatch at " + pw[r].name);
        for (std::size_t k = 0; k < pw[r].len; ++k) {
            const double g = pg[r].data[k];
            double& m = pm[r].data[k];
            double& v = pv[r].data[k];
            m = st.beta1 * m + (1.0 - st.beta1) * g;
            v = st.beta2 * v + (1.0 - st.beta2) * g * g;
            pw[r].data[k] -= lr * (m / bc1) / (std::sqrt(v / bc2) + st.eps);
        }
    }
}

// ---- losses ---------------------------------------------------------------------

namespace {

double sq_dist(const DenseVector& a, const DenseVector& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("loss: vector sizes " + std::to_string(a.size()) +
                                    " vs " + std::to_string(b.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double e = a[i] - b[i];
        s += e * e;
    }
    return s;
}

// |in_hat - (r, d)|^2 with in_hat laid out as r rows then d rows.
double sq_dist_rd(const DenseVector& in_hat, const DenseVector& r, const DenseVector& d) {
    if (in_hat.size() != r.size() + d.size())
        throw std::invalid_argument("loss: in channel size " +
                                    std::to_string(in_hat.size()) + " vs (r, d) size " +
                                    std::to_string(r.size() + d.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
        const double e = in_hat[i] - r[i];
        s += e * e;
    }
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double e = in_hat[r.size() + i] - d[i];
        s += e * e;
    }
    return s;
}

void check_traj(std::size_t got, std::size_t want, const char* who) {
    if (got != want)
        throw std::invalid_argument(std::string(who) + ": trajectory length " +
                                    std::to_string(got) + ", teacher has " +
                                    std::to_string(want));
}

}  // namespace

double loss_joint(const std::vector<DenseVector>& x_hat,
                  const std::vector<DenseVector>& in_hat, const CgTrajectory& teacher,
                  double eta) {
    if (eta < 0.0) throw std::invalid_argument("loss_joint: eta must be >= 0");
    const std::size_t tt = teacher.x.size();
    check_traj(x_hat.size(), tt, "loss_joint");
    if (eta != 0.0) check_traj(in_hat.size(), tt, "loss_joint");
    const std::size_t n = teacher.x.front().size();
    double acc = 0.0;
    for (std::size_t t = 0; t < tt; ++t) {
        acc += sq_dist(x_hat[t], teacher.x[t]);
        if (eta != 0.0) acc += eta * sq_dist_rd(in_hat[t], teacher.r[t], teacher.d[t]);
    }
    return acc / (static_cast<double>(n) * static_cast<double>(tt));
}

double loss_result(const std::vector<DenseVector>& x_hat, const CgTrajectory& teacher) {
    return loss_joint(x_hat, {}, teacher, 0.0);
}

double loss_step_solution(const std::vector<DenseVector>& x_hat, const CgTrajectory& teacher,
                          const DenseVector& x_true, double lambda, std::size_t k) {
    if (lambda < 0.0) throw std::invalid_argument("loss_step_solution: lambda must be >= 0");
    const std::size_t tt = teacher.x.size();
    check_traj(x_hat.size(), tt, "loss_step_solution");
    if (k < 1 || k > tt)
        throw std::invalid_argument("loss_step_solution: K = " + std::to_string(k) +
                                    " outside [1, " + std::to_string(tt) + "]");
    const std::size_t big_t = tt - 1;
    const std::size_t t0 = (k - 1 >= big_t) ? 0 : big_t - (k - 1);
    const std::size_t n = teacher.x.front().size();
    double acc = 0.0;
    for (std::size_t t = t0; t <= big_t; ++t) {
        acc += sq_dist(x_hat[t], teacher.x[t]);
        if (lambda != 0.0) acc += lambda * sq_dist(x_hat[t], x_true);
    }
    return acc / (static_cast<double>(n) * static_cast<double>(big_t - t0 + 1));
}

double loss_value(const ForwardTape& tape, const CgTrajectory& teacher,
                  const DenseVector& x_true, const TrainConfig& cfg) {
    switch (cfg.supervision) {
        case LossKind::result: return loss_result(tape.x, teacher);
        case LossKind::joint: return loss_joint(tape.x, tape.in_rd, teacher, cfg.eta);
        case LossKind::step_solution:
            return loss_step_solution(tape.x, teacher, x_true, cfg.lambda, cfg.k_last);
    }
    throw std::logic_error("loss_value: unknown supervision");
}

std::vector<DenseMatrix> loss_seed(const ForwardTape& tape, const ProbeSpec& probes,
                                   const CgTrajectory& teacher, const DenseVector& x_true,
                                   const TrainConfig& cfg, double w) {
    const std::size_t tt = tape.decoded.size();
    check_traj(teacher.x.size(), tt, "loss_seed");
    const std::size_t n = probes.x.len;
    const std::size_t rows = tape.decoded.front().rows;
    const std::size_t cols = tape.decoded.front().cols;
    const std::size_t last = cols - 1;
    std::vector<DenseMatrix> g(tt, DenseMatrix(rows, cols));

    if (cfg.supervision == LossKind::result || cfg.supervision == LossKind::joint) {
        const double coef = 2.0 * w / (static_cast<double>(n) * static_cast<double>(tt));
        const double eta = cfg.supervision == LossKind::joint ? cfg.eta : 0.0;
        for (std::size_t t = 0; t < tt; ++t) {
            for (std::size_t i = 0; i < n; ++i)
                g[t].at(probes.x.start + i, last) =
                    coef * (tape.x[t][i] - teacher.x[t][i]);
            if (eta != 0.0) {
                for (std::size_t i = 0; i < n; ++i) {
                    g[t].at(probes.r.start + i, last) =
                        coef * eta * (tape.in_rd[t][i] - teacher.r[t][i]);
                    g[t].at(probes.d.start + i, last) =
                        coef * eta * (tape.in_rd[t][n + i] - teacher.d[t][i]);
                }
            }
        }
        return g;
    }

    const std::size_t big_t = tt - 1;
    const std::size_t t0 = (cfg.k_last - 1 >= big_t) ? 0 : big_t - (cfg.k_last - 1);
    const double coef =
        2.0 * w / (static_cast<double>(n) * static_cast<double>(big_t - t0 + 1));
    for (std::size_t t = t0; t <= big_t; ++t)
        for (std::size_t i = 0; i < n; ++i)
            g[t].at(probes.x.start + i, last) =
                coef * ((tape.x[t][i] - teacher.x[t][i]) +
                        cfg.lambda * (tape.x[t][i] - x_true[i]));
    return g;
}

// ---- problems, teachers, metrics ------------------------------------------------

ScaledProblem scale_problem(const Problem& p, bool normalize) {
    ScaledProblem sp;
    double mag = 1.0;
    if (normalize) {
        mag = std::max(mag, max_abs(p.a));
        for (std::size_t i = 0; i < p.b.size(); ++i) mag = std::max(mag, std::abs(p.b[i]));
    }
    sp.gamma = 1.0 / mag;
    sp.a = scale(p.a, sp.gamma);
    sp.b = vec_scale(p.b, sp.gamma);
    return sp;
}

CgTrajectory teacher_trajectory(const ScaledProblem& sp, TeacherKind kind,
                                std::size_t t_steps) {
    const DenseVector x0(sp.b.size());
    return kind == TeacherKind::cg ? cg_solve(sp.a, sp.b, x0, t_steps)
                                   : pcg_jacobi(sp.a, sp.b, x0, t_steps);
}

MetricRow evaluate(const TrainablePipeline& tp, const std::vector<Problem>& problems,
                   const TrainConfig& cfg, std::size_t step) {
    if (problems.empty()) throw std::invalid_argument("evaluate: no problems");
    const std::size_t tt = cfg.t_steps + 1;
    MetricRow row;
    row.step = step;
    row.metrics.rel_err.assign(tt, 0.0);
    row.metrics.int_err.assign(tt, 0.0);
    double loss = 0.0;
    double disc = 0.0;
    const double dn = static_cast<double>(cfg.n);
    for (const Problem& pr : problems) {
        const ScaledProblem sp = scale_problem(pr, cfg.normalize);
        const CgTrajectory teacher = teacher_trajectory(sp, cfg.teacher, cfg.t_steps);
        const PromptMatrix pm = make_cg_prompt(cfg.n, sp.a, sp.b, DenseVector(cfg.n));
        const ForwardTape tape = forward_tape(tp, pm.p);
        loss += loss_value(tape, teacher, pr.x_true, cfg);
        double xt2 = 0.0;
        for (std::size_t i = 0; i < pr.x_true.size(); ++i) xt2 += pr.x_true[i] * pr.x_true[i];
        for (std::size_t t = 0; t < tt; ++t) {
            row.metrics.rel_err[t] += sq_dist(tape.x[t], pr.x_true) / xt2;
            row.metrics.int_err[t] +=
                sq_dist_rd(tape.in_rd[t], teacher.r[t], teacher.d[t]) / dn;
        }
        for (std::size_t t = 2; t <= cfg.n; ++t)
            disc += sq_dist_rd(tape.in_rd[t], teacher.r[t], teacher.d[t]) /
                    (dn - 1.0);
    }
    const double cnt = static_cast<double>(problems.size());
    row.loss = loss / cnt;
    for (std::size_t t = 0; t < tt; ++t) {
        row.metrics.rel_err[t] /= cnt;
        row.metrics.int_err[t] /= cnt;
    }
    row.metrics.discrepancy = disc / (dn * cnt);
    return row;
}

std::string metric_csv_header(std::size_t t_steps) {
    std::string s = "step,loss";
    for (std::size_t t = 0; t <= t_steps; ++t) s += ",rel_err_t" + std::to_string(t);
    for (std::size_t t = 0; t <= t_steps; ++t) s += ",int_err_t" + std::to_string(t);
    s += ",discrepancy";
    return s;
}

std::string metric_csv_row(const MetricRow& row) {
    char buf[40];
    std::string s = std::to_string(row.step);
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        s += ',';
        s += buf;
    };
    put(row.loss);
    for (double v : row.metrics.rel_err) put(v);
    for (double v : row.metrics.int_err) put(v);
    put(row.metrics.discrepancy);
    return s;
}

// ---- training loop --------------------------------------------------------------

namespace {

double lr_at(const std::vector<LrPhase>& sched, std::size_t step) {
    std::size_t idx = step - 1;
    for (const auto& ph : sched) {
        if (ph.steps == 0 || idx < ph.steps) return ph.lr;
        idx -= ph.steps;
    }
    return sched.back().lr;
}

std::string first_nonfinite(TrainablePipeline& grads, TrainablePipeline& tp) {
    for (const auto& r : param_refs(grads))
        for (std::size_t k = 0; k < r.len; ++k)
            if (!std::isfinite(r.data[k])) return "grad(" + r.name + ")";
    for (const auto& r : param_refs(tp))
        for (std::size_t k = 0; k < r.len; ++k)
            if (!std::isfinite(r.data[k])) return r.name;
    return "loss (all weight and gradient tensors finite)";
}

}  // namespace

TrainResult train(const TrainConfig& cfg) {
    cfg.validate();
    Rng root(cfg.seed);
    Rng init_rng = root.split();
    Rng eval_rng = root.split();
    Rng batch_rng = root.split();

    TrainablePipeline tp = make_trainable(cfg, init_rng);
    AdamState adam = make_adam(tp);

    std::vector<Problem> held;
    held.reserve(cfg.eval_count);
    for (std::size_t i = 0; i < cfg.eval_count; ++i)
        held.push_back(gen_problem({cfg.n, cfg.sigma, eval_rng.next_u64()}));

    TrainResult res;
    res.history.push_back(evaluate(tp, held, cfg, 0));

    const DenseVector x0(cfg.n);
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        TrainablePipeline grads = zero_like(tp);
        double batch_loss = 0.0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const Problem pr = gen_problem({cfg.n, cfg.sigma, batch_rng.next_u64()});
            const ScaledProblem sp = scale_problem(pr, cfg.normalize);
            const CgTrajectory teacher = teacher_trajectory(sp, cfg.teacher, cfg.t_steps);
            const PromptMatrix pm = make_cg_prompt(cfg.n, sp.a, sp.b, x0);
            const ForwardTape tape = forward_tape(tp, pm.p);
            batch_loss += loss_value(tape, teacher, pr.x_true, cfg);
            const auto seeds = loss_seed(tape, tp.probes, teacher, pr.x_true, cfg,
                                         1.0 / static_cast<double>(cfg.batch));
            backward(tp, tape, seeds, grads);
        }
        batch_loss /= static_cast<double>(cfg.batch);
        if (!std::isfinite(batch_loss))
            throw std::runtime_error("train: non-finite loss at step " +
                                     std::to_string(step) + "; first non-finite tensor: " +
                                     first_nonfinite(grads, tp));
        adam_step(tp, grads, adam, lr_at(cfg.lr_schedule, step));
        if (step % cfg.eval_every == 0 || step == cfg.steps)
            res.history.push_back(evaluate(tp, held, cfg, step));
    }
    res.pipeline = std::move(tp);
    return res;
}

}  // namespace nlaf
