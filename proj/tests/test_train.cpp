#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlaf/constructions.hpp"
#include "nlaf/dense.hpp"
#include "nlaf/train.hpp"

using namespace nlaf;

namespace {

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.n = 2;
    cfg.t_steps = 2;
    cfg.k_last = 2;
    cfg.d_embed = 4;
    cfg.pre_heads = 1;
    cfg.loop_heads = 1;
    cfg.ffn_mult = 1;
    cfg.batch = 2;
    cfg.steps = 4;
    cfg.seed = 77;
    cfg.eval_every = 2;
    cfg.eval_count = 2;
    cfg.init_scale = 0.05;
    cfg.lr_schedule = {{0, 1e-3}};
    return cfg;
}

DenseVector random_vec(std::size_t n, Rng& rng) {
    DenseVector v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = rng.uniform(-1.0, 1.0);
    return v;
}

// Synthetic trajectories for exercising the loss functions in isolation.
struct LossFixture {
    std::size_t n = 3;
    std::size_t t_steps = 4;
    std::vector<DenseVector> x_hat, in_hat;
    CgTrajectory teacher;
    DenseVector x_true;

    explicit LossFixture(std::uint64_t seed) {
        Rng rng(seed);
        for (std::size_t t = 0; t <= t_steps; ++t) {
            x_hat.push_back(random_vec(n, rng));
            in_hat.push_back(random_vec(2 * n, rng));
            teacher.x.push_back(random_vec(n, rng));
            teacher.r.push_back(random_vec(n, rng));
            teacher.d.push_back(random_vec(n, rng));
        }
        teacher.alpha.assign(t_steps, 0.0);
        teacher.beta.assign(t_steps, 1.0);
        teacher.rel_residual.assign(t_steps + 1, 1.0);
        x_true = random_vec(n, rng);
    }
};

double brute_result(const LossFixture& f) {
    double total = 0.0;
    for (std::size_t t = 0; t <= f.t_steps; ++t)
        for (std::size_t i = 0; i < f.n; ++i) {
            double d = f.x_hat[t][i] - f.teacher.x[t][i];
            total += d * d;
        }
    return total / (static_cast<double>(f.n) * static_cast<double>(f.t_steps + 1));
}

double brute_joint(const LossFixture& f, double eta) {
    double total = 0.0;
    for (std::size_t t = 0; t <= f.t_steps; ++t) {
        for (std::size_t i = 0; i < f.n; ++i) {
            double d = f.x_hat[t][i] - f.teacher.x[t][i];
            total += d * d;
        }
        for (std::size_t i = 0; i < f.n; ++i) {
            double d = f.in_hat[t][i] - f.teacher.r[t][i];
            total += eta * d * d;
        }
        for (std::size_t i = 0; i < f.n; ++i) {
            double d = f.in_hat[t][f.n + i] - f.teacher.d[t][i];
            total += eta * d * d;
        }
    }
    return total / (static_cast<double>(f.n) * static_cast<double>(f.t_steps + 1));
}

double brute_step_solution(const LossFixture& f, double lambda, std::size_t k) {
    std::size_t t0 = (k - 1 >= f.t_steps) ? 0 : f.t_steps - (k - 1);
    double total = 0.0;
    for (std::size_t t = t0; t <= f.t_steps; ++t)
        for (std::size_t i = 0; i < f.n; ++i) {
            double ds = f.x_hat[t][i] - f.teacher.x[t][i];
            double dt = f.x_hat[t][i] - f.x_true[i];
            total += ds * ds + lambda * dt * dt;
        }
    return total / (static_cast<double>(f.n) * static_cast<double>(f.t_steps - t0 + 1));
}

double rel_diff(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

}  // namespace

TEST_CASE("config validation rejects inconsistent settings") {
    CHECK_NOTHROW(tiny_config().validate());
    CHECK_NOTHROW(toy_joint_preset().validate());
    CHECK_NOTHROW(toy_step_solution_preset().validate());

    TrainConfig bad = tiny_config();
    bad.eta = -1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = tiny_config();
    bad.k_last = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = tiny_config();
    bad.k_last = bad.t_steps + 2;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = tiny_config();
    bad.t_steps = bad.n - 1;  // discrepancy metric needs t_steps >= n
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = tiny_config();
    bad.lr_schedule.clear();
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = tiny_config();
    bad.d_embed = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = tiny_config();
    bad.batch = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("config json round trips byte for byte") {
    TrainConfig cfg = tiny_config();
    cfg.supervision = LossKind::step_solution;
    cfg.teacher = TeacherKind::pcg;
    cfg.lr_schedule = {{3, 1e-3}, {0, 1e-4}};
    std::string text = cfg.to_json();
    TrainConfig back = TrainConfig::from_json(text);
    CHECK(back.to_json() == text);
    CHECK(back.n == cfg.n);
    CHECK(back.supervision == LossKind::step_solution);
    CHECK(back.teacher == TeacherKind::pcg);
    REQUIRE(back.lr_schedule.size() == 2);
    CHECK(back.lr_schedule[0].steps == 3);
    CHECK(back.lr_schedule[0].lr == 1e-3);

    CHECK_THROWS_AS(TrainConfig::from_json("{}"), std::exception);
    CHECK_THROWS_AS(TrainConfig::from_json("not json"), std::exception);

    // Unknown enum names are rejected.
    std::string mangled = text;
    auto pos = mangled.find("step_solution");
    REQUIRE(pos != std::string::npos);
    mangled.replace(pos, 13, "made_up_kind!");
    CHECK_THROWS_AS(TrainConfig::from_json(mangled), std::exception);
}

TEST_CASE("enum names round trip") {
    for (LossKind k : {LossKind::result, LossKind::joint, LossKind::step_solution}) {
        auto back = loss_kind_from_name(loss_kind_name(k));
        REQUIRE(back.has_value());
        CHECK(*back == k);
    }
    CHECK(!loss_kind_from_name("nope").has_value());
    for (TeacherKind k : {TeacherKind::cg, TeacherKind::pcg}) {
        auto back = teacher_kind_from_name(teacher_kind_name(k));
        REQUIRE(back.has_value());
        CHECK(*back == k);
    }
    CHECK(!teacher_kind_from_name("sor").has_value());
}

TEST_CASE("loss functions match brute force double loops") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        LossFixture f(seed);
        CHECK(rel_diff(loss_result(f.x_hat, f.teacher), brute_result(f)) <= 1e-12);
        CHECK(rel_diff(loss_joint(f.x_hat, f.in_hat, f.teacher, 0.37),
                       brute_joint(f, 0.37)) <= 1e-12);
        for (std::size_t k : {std::size_t{1}, std::size_t{2}, std::size_t{5}}) {
            CHECK(rel_diff(loss_step_solution(f.x_hat, f.teacher, f.x_true, 2.5, k),
                           brute_step_solution(f, 2.5, k)) <= 1e-12);
        }
    }
}

TEST_CASE("loss reductions collapse bitwise when their extra weights vanish") {
    LossFixture f(9);
    double base = loss_result(f.x_hat, f.teacher);
    CHECK(loss_joint(f.x_hat, f.in_hat, f.teacher, 0.0) == base);
    CHECK(loss_step_solution(f.x_hat, f.teacher, f.x_true, 0.0, f.t_steps + 1) == base);
}

TEST_CASE("loss size mismatches are rejected") {
    LossFixture f(4);
    std::vector<DenseVector> short_hat(f.x_hat.begin(), f.x_hat.end() - 1);
    CHECK_THROWS_AS(loss_result(short_hat, f.teacher), std::invalid_argument);
}

TEST_CASE("trainable pipelines have the documented shapes and deterministic init") {
    TrainConfig cfg = tiny_config();
    Rng r1(5), r2(5);
    TrainablePipeline a = make_trainable(cfg, r1);
    TrainablePipeline b = make_trainable(cfg, r2);

    CHECK(a.h_prompt == 6 * cfg.n + 2);
    CHECK(a.embed.rows == cfg.d_embed);
    CHECK(a.embed.cols == a.h_prompt);
    CHECK(a.out_map.rows == a.h_prompt);
    CHECK(a.out_map.cols == cfg.d_embed);
    REQUIRE(a.pre.size() == 1);
    REQUIRE(a.loop.size() == 1);
    CHECK(a.pre[0].heads.size() == cfg.pre_heads);
    CHECK(a.loop[0].heads.size() == cfg.loop_heads);
    CHECK(a.probes.x.len == cfg.n);

    auto ra = param_refs(a);
    auto rb = param_refs(b);
    REQUIRE(ra.size() == rb.size());
    CHECK(ra.front().name == "embed");
    CHECK(ra.back().name == "out_map");
    for (std::size_t i = 0; i < ra.size(); ++i) {
        REQUIRE(ra[i].len == rb[i].len);
        for (std::size_t k = 0; k < ra[i].len; ++k) CHECK(ra[i].data[k] == rb[i].data[k]);
    }

    // Biases start at zero.
    for (const auto& ref : ra)
        if (ref.name.find(".b") != std::string::npos)
            for (std::size_t k = 0; k < ref.len; ++k) CHECK(ref.data[k] == 0.0);

    TrainablePipeline z = zero_like(a);
    for (const auto& ref : param_refs(z))
        for (std::size_t k = 0; k < ref.len; ++k) CHECK(ref.data[k] == 0.0);
}

TEST_CASE("the tape forward pass reproduces the engine trajectory bitwise") {
    // Identity embed and decode make the trainable forward pass a plain
    // pipeline run, so both paths must agree to the last bit.
    TrainConfig cfg = tiny_config();
    const std::size_t h = 6 * cfg.n + 2;
    Rng rng(3);
    TrainablePipeline tp = make_trainable(cfg, rng);
    tp.d_embed = h;
    tp.embed = DenseMatrix::identity(h);
    tp.out_map = DenseMatrix::identity(h);
    // Rebuild the blocks at prompt width so shapes match the identity maps.
    TrainConfig wide = cfg;
    wide.d_embed = h;
    wide.ffn_mult = 1;
    Rng wr(13);
    TrainablePipeline wtp = make_trainable(wide, wr);
    tp.pre = wtp.pre;
    tp.loop = wtp.loop;

    Problem prob = gen_problem({cfg.n, cfg.sigma, 19});
    ScaledProblem sp = scale_problem(prob, true);
    PromptMatrix pm = make_cg_prompt(cfg.n, sp.a, sp.b, DenseVector(cfg.n));

    ForwardTape tape = forward_tape(tp, pm.p);
    REQUIRE(tape.states.size() == cfg.t_steps + 1);
    REQUIRE(tape.decoded.size() == cfg.t_steps + 1);
    REQUIRE(tape.x.size() == cfg.t_steps + 1);

    NlafPipeline pipe;
    pipe.pre = tp.pre;
    pipe.loop = tp.loop;
    pipe.loop_count = cfg.t_steps;
    NlafTrajectory traj = nlaf_run(pm, pipe, tp.probes);

    for (std::size_t t = 0; t <= cfg.t_steps; ++t) {
        CHECK(max_abs(sub(tape.states[t], traj.prompts[t])) == 0.0);
        CHECK(max_abs(sub(tape.decoded[t], traj.prompts[t])) == 0.0);
        for (std::size_t i = 0; i < cfg.n; ++i) CHECK(tape.x[t][i] == traj.x[t][i]);
        for (std::size_t i = 0; i < 2 * cfg.n; ++i)
            CHECK(tape.in_rd[t][i] == traj.in_rd[t][i]);
    }
}

TEST_CASE("the tape refuses non-differentiable ffns") {
    TrainConfig cfg = tiny_config();
    Rng rng(4);
    TrainablePipeline tp = make_trainable(cfg, rng);
    ExactOracle oracle;
    oracle.name = "opaque";
    oracle.fn = [](const std::vector<double>&, std::vector<double>& out) {
        std::fill(out.begin(), out.end(), 0.0);
    };
    tp.loop[0].ffn.kind = std::move(oracle);
    DenseMatrix p0(6 * cfg.n + 2, cfg.n + 1);
    CHECK_THROWS_AS(forward_tape(tp, p0), std::invalid_argument);
}

TEST_CASE("analytic gradients agree with central differences") {
    TrainConfig cfg;
    cfg.n = 3;
    cfg.t_steps = 3;
    cfg.k_last = 3;
    cfg.d_embed = 12;
    cfg.pre_heads = 2;
    cfg.loop_heads = 2;
    cfg.ffn_mult = 2;
    cfg.init_scale = 0.1;
    cfg.eta = 0.5;
    cfg.lambda = 3.0;
    cfg.seed = 11;

    for (LossKind kind : {LossKind::joint, LossKind::step_solution}) {
        cfg.supervision = kind;
        Rng init(cfg.seed + 7);
        TrainablePipeline tp = make_trainable(cfg, init);
        Problem prob = gen_problem({cfg.n, cfg.sigma, 42});
        ScaledProblem sp = scale_problem(prob, cfg.normalize);
        CgTrajectory teacher = teacher_trajectory(sp, cfg.teacher, cfg.t_steps);
        PromptMatrix pm = make_cg_prompt(cfg.n, sp.a, sp.b, DenseVector(cfg.n));

        ForwardTape tape = forward_tape(tp, pm.p);
        TrainablePipeline grads = zero_like(tp);
        auto seeds = loss_seed(tape, tp.probes, teacher, prob.x_true, cfg, 1.0);
        backward(tp, tape, seeds, grads);

        auto pw = param_refs(tp);
        auto pg = param_refs(grads);
        REQUIRE(pw.size() == pg.size());

        Rng pick(999);
        double worst = 0.0;
        for (std::size_t r = 0; r < pw.size(); ++r) {
            for (int rep = 0; rep < 8; ++rep) {
                std::size_t k = pick.next_u64() % pw[r].len;
                const double h = 1e-5;
                const double save = pw[r].data[k];
                pw[r].data[k] = save + h;
                ForwardTape tp_plus = forward_tape(tp, pm.p);
                double lp = loss_value(tp_plus, teacher, prob.x_true, cfg);
                pw[r].data[k] = save - h;
                ForwardTape tp_minus = forward_tape(tp, pm.p);
                double lm = loss_value(tp_minus, teacher, prob.x_true, cfg);
                pw[r].data[k] = save;
                double fd = (lp - lm) / (2.0 * h);
                double an = pg[r].data[k];
                double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-12});
                INFO(loss_kind_name(kind), " at ", pw[r].name, "[", k, "]");
                CHECK(rel < 1e-5);
                worst = std::max(worst, rel);
            }
        }
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("loss seeds touch only the probe rows of the last column") {
    TrainConfig cfg = tiny_config();
    Rng rng(6);
    TrainablePipeline tp = make_trainable(cfg, rng);
    Problem prob = gen_problem({cfg.n, cfg.sigma, 23});
    ScaledProblem sp = scale_problem(prob, true);
    CgTrajectory teacher = teacher_trajectory(sp, cfg.teacher, cfg.t_steps);
    PromptMatrix pm = make_cg_prompt(cfg.n, sp.a, sp.b, DenseVector(cfg.n));
    ForwardTape tape = forward_tape(tp, pm.p);

    auto seeds = loss_seed(tape, tp.probes, teacher, prob.x_true, cfg, 0.5);
    REQUIRE(seeds.size() == cfg.t_steps + 1);
    const Band x = tp.probes.x, r = tp.probes.r, d = tp.probes.d;
    bool any_nonzero = false;
    for (const DenseMatrix& g : seeds) {
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j) {
                bool in_probe = (i >= x.start && i < x.end()) ||
                                (i >= r.start && i < r.end()) ||
                                (i >= d.start && i < d.end());
                if (j + 1 != g.cols || !in_probe) {
                    CHECK(g.at(i, j) == 0.0);
                } else if (g.at(i, j) != 0.0) {
                    any_nonzero = true;
                }
            }
    }
    CHECK(any_nonzero);
}

TEST_CASE("adam takes the documented bias-corrected first step") {
    TrainConfig cfg = tiny_config();
    Rng rng(8);
    TrainablePipeline tp = make_trainable(cfg, rng);
    TrainablePipeline grads = zero_like(tp);
    AdamState st = make_adam(tp);

    auto pw = param_refs(tp);
    auto pg = param_refs(grads);
    std::vector<double> before(pw[0].data, pw[0].data + pw[0].len);
    const double g = 0.25;
    pg[0].data[0] = g;

    const double lr = 1e-2;
    adam_step(tp, grads, st, lr);
    CHECK(st.t == 1);
    // First step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
    double expect = before[0] - lr * g / (std::abs(g) + st.eps);
    CHECK(pw[0].data[0] == doctest::Approx(expect).epsilon(1e-12));
    // Zero-gradient coordinates stay bitwise identical: their update is
    // exactly lr * 0 / (0 + eps) = 0.
    for (std::size_t k = 1; k < pw[0].len; ++k) {
        INFO("k = ", k);
        CHECK(pw[0].data[k] == before[k]);
    }
}

TEST_CASE("problem scaling bounds payloads and preserves cg iterates") {
    Problem prob = gen_problem({4, 1.5, 31});
    ScaledProblem sp = scale_problem(prob, true);
    double mag = std::max(1.0, max_abs(prob.a));
    for (std::size_t i = 0; i < prob.b.size(); ++i)
        mag = std::max(mag, std::abs(prob.b[i]));
    CHECK(sp.gamma == 1.0 / mag);
    CHECK(max_abs(sp.a) <= 1.0 + 1e-15);

    ScaledProblem raw = scale_problem(prob, false);
    CHECK(raw.gamma == 1.0);
    CHECK(max_abs(sub(raw.a, prob.a)) == 0.0);

    // x iterates are scale-invariant; r and d carry the factor gamma.
    CgTrajectory scaled = teacher_trajectory(sp, TeacherKind::cg, 4);
    CgTrajectory plain = teacher_trajectory(raw, TeacherKind::cg, 4);
    for (std::size_t t = 0; t <= 4; ++t) {
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(scaled.x[t][i] == doctest::Approx(plain.x[t][i]).epsilon(1e-10));
            CHECK(scaled.r[t][i] ==
                  doctest::Approx(sp.gamma * plain.r[t][i]).epsilon(1e-10));
        }
    }
}

TEST_CASE("metric csv schema is frozen") {
    CHECK(metric_csv_header(2) ==
          "step,loss,rel_err_t0,rel_err_t1,rel_err_t2,int_err_t0,int_err_t1,int_err_t2,"
          "discrepancy");
    MetricRow row;
    row.step = 12;
    row.loss = 0.5;
    row.metrics.rel_err = {1.0, 0.25};
    row.metrics.int_err = {2.0, 0.125};
    row.metrics.discrepancy = 0.0625;
    CHECK(metric_csv_row(row) == "12,0.5,1,0.25,2,0.125,0.0625");
}

TEST_CASE("evaluation returns finite metrics of the right shape") {
    TrainConfig cfg = tiny_config();
    Rng rng(14);
    TrainablePipeline tp = make_trainable(cfg, rng);
    std::vector<Problem> problems = {gen_problem({cfg.n, cfg.sigma, 1}),
                                     gen_problem({cfg.n, cfg.sigma, 2})};
    MetricRow row = evaluate(tp, problems, cfg, 7);
    CHECK(row.step == 7);
    REQUIRE(row.metrics.rel_err.size() == cfg.t_steps + 1);
    REQUIRE(row.metrics.int_err.size() == cfg.t_steps + 1);
    CHECK(std::isfinite(row.loss));
    CHECK(std::isfinite(row.metrics.discrepancy));
    for (double v : row.metrics.rel_err) CHECK(std::isfinite(v));
}

TEST_CASE("training is deterministic for a fixed seed") {
    TrainConfig cfg = tiny_config();
    TrainResult a = train(cfg);
    TrainResult b = train(cfg);
    REQUIRE(a.history.size() == b.history.size());
    // Evaluations at steps 0, 2, and 4.
    REQUIRE(a.history.size() == 3);
    CHECK(a.history[0].step == 0);
    CHECK(a.history[2].step == 4);
    for (std::size_t i = 0; i < a.history.size(); ++i)
        CHECK(metric_csv_row(a.history[i]) == metric_csv_row(b.history[i]));

    auto ra = param_refs(a.pipeline);
    auto rb = param_refs(b.pipeline);
    REQUIRE(ra.size() == rb.size());
    for (std::size_t i = 0; i < ra.size(); ++i)
        for (std::size_t k = 0; k < ra[i].len; ++k) CHECK(ra[i].data[k] == rb[i].data[k]);
}

TEST_CASE("a zero learning rate leaves the weights at their initialization") {
    TrainConfig cfg = tiny_config();
    cfg.lr_schedule = {{0, 0.0}};
    cfg.steps = 3;
    TrainResult res = train(cfg);

    Rng init(cfg.seed);
    Rng init_stream = init.split();
    TrainablePipeline fresh = make_trainable(cfg, init_stream);
    auto ra = param_refs(res.pipeline);
    auto rf = param_refs(fresh);
    bool identical = true;
    for (std::size_t i = 0; i < ra.size() && identical; ++i)
        for (std::size_t k = 0; k < ra[i].len; ++k)
            if (ra[i].data[k] != rf[i].data[k]) { identical = false; break; }
    // Either the init stream convention matches exactly, or at minimum the
    // loss never moves because no update is applied.
    for (std::size_t i = 1; i < res.history.size(); ++i)
        CHECK(res.history[i].loss == res.history[0].loss);
    CHECK(identical);
}

TEST_CASE("sweep grids are the frozen experiment values") {
    std::vector<double> etas = eta_grid();
    std::vector<double> lambdas = lambda_grid();
    REQUIRE(etas.size() == 6);
    REQUIRE(lambdas.size() == 6);
    CHECK(etas.front() == 0.05);
    CHECK(etas.back() == 0.0001);
    CHECK(lambdas.front() == 13.0);
    CHECK(lambdas.back() == 0.5);
    CHECK(std::is_sorted(etas.rbegin(), etas.rend()));
    CHECK(std::is_sorted(lambdas.rbegin(), lambdas.rend()));
}

TEST_CASE("presets carry the toy experiment shape") {
    TrainConfig joint = toy_joint_preset();
    CHECK(joint.n == 4);
    CHECK(joint.d_embed == 32);
    CHECK(joint.t_steps == 4);
    CHECK(joint.steps == 2000);
    CHECK(joint.supervision == LossKind::joint);

    TrainConfig step = toy_step_solution_preset();
    CHECK(step.supervision == LossKind::step_solution);
    CHECK(step.k_last == 2);
    CHECK_NOTHROW(step.validate());
}
