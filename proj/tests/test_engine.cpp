#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "nlaf/dense.hpp"
#include "nlaf/engine.hpp"

using namespace nlaf;

namespace {

DenseMatrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0,
                          double hi = 1.0) {
    DenseMatrix m(r, c);
    fill_uniform(m, rng, lo, hi);
    return m;
}

AttentionHead random_head(std::size_t h, std::size_t d_head, Rng& rng, double s = 0.5) {
    AttentionHead head;
    head.w_q = random_matrix(d_head, h, rng, -s, s);
    head.w_k = random_matrix(d_head, h, rng, -s, s);
    head.w_v = random_matrix(h, h, rng, -s, s);
    return head;
}

AttentionHead zero_head(std::size_t h) {
    AttentionHead head;
    head.w_q = DenseMatrix(1, h);
    head.w_k = DenseMatrix(1, h);
    head.w_v = DenseMatrix(h, h);
    return head;
}

ColumnMap zero_relu_ffn(std::size_t h) {
    ReluNetwork net;
    net.w1 = DenseMatrix(1, h);
    net.b1 = DenseVector(1);
    net.w2 = DenseMatrix(h, 1);
    net.b2 = DenseVector(h);
    return ColumnMap{net, nullptr};
}

double max_diff(const DenseMatrix& a, const DenseMatrix& b) {
    REQUIRE(a.rows == b.rows);
    REQUIRE(a.cols == b.cols);
    return max_abs(sub(a, b));
}

}  // namespace

TEST_CASE("attention with zero value weights is the identity") {
    Rng rng(1);
    DenseMatrix p = random_matrix(4, 5, rng);
    AttentionHead head = random_head(4, 3, rng);
    head.w_v = DenseMatrix(4, 4);  // zero
    CHECK(max_diff(attn(p, {head}), p) == 0.0);
}

TEST_CASE("attention on two tokens matches a scalar hand expansion") {
    Rng rng(2);
    DenseMatrix p = random_matrix(2, 2, rng);
    AttentionHead head = random_head(2, 2, rng);

    // Z = (W_K P)^T (W_Q P), softmax per column, out = P + (W_V P) S.
    double qp[2][2], kp[2][2], vp[2][2];
    for (int d = 0; d < 2; ++d)
        for (int j = 0; j < 2; ++j) {
            qp[d][j] = head.w_q.at(d, 0) * p.at(0, j) + head.w_q.at(d, 1) * p.at(1, j);
            kp[d][j] = head.w_k.at(d, 0) * p.at(0, j) + head.w_k.at(d, 1) * p.at(1, j);
            vp[d][j] = head.w_v.at(d, 0) * p.at(0, j) + head.w_v.at(d, 1) * p.at(1, j);
        }
    double z[2][2], s[2][2];
    for (int l = 0; l < 2; ++l)
        for (int j = 0; j < 2; ++j) z[l][j] = kp[0][l] * qp[0][j] + kp[1][l] * qp[1][j];
    for (int j = 0; j < 2; ++j) {
        double m = std::max(z[0][j], z[1][j]);
        double e0 = std::exp(z[0][j] - m), e1 = std::exp(z[1][j] - m);
        s[0][j] = e0 / (e0 + e1);
        s[1][j] = e1 / (e0 + e1);
    }
    DenseMatrix expected(2, 2);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            expected.at(i, j) = p.at(i, j) + vp[i][0] * s[0][j] + vp[i][1] * s[1][j];

    CHECK(max_diff(attn(p, {head}), expected) <= 1e-14);
}

TEST_CASE("zero query and key weights give uniform attention") {
    Rng rng(3);
    const std::size_t h = 3, m = 4;
    DenseMatrix p = random_matrix(h, m, rng);
    AttentionHead head = random_head(h, 2, rng);
    head.w_q = DenseMatrix(2, h);
    head.w_k = DenseMatrix(2, h);

    DenseMatrix uniform(m, m, 1.0 / static_cast<double>(m));
    DenseMatrix expected = add(p, matmul(matmul(head.w_v, p), uniform));
    CHECK(max_diff(attn(p, {head}), expected) == 0.0);
}

TEST_CASE("attention contributions are additive across heads") {
    Rng rng(4);
    DenseMatrix p = random_matrix(4, 3, rng);
    AttentionHead h1 = random_head(4, 2, rng);
    AttentionHead h2 = random_head(4, 2, rng);
    DenseMatrix both = attn(p, {h1, h2});
    DenseMatrix sum = add(attn(p, {h1}), sub(attn(p, {h2}), p));
    CHECK(max_diff(both, sum) <= 1e-12);
}

TEST_CASE("a zero relu network adds nothing") {
    Rng rng(5);
    DenseMatrix p = random_matrix(4, 3, rng);
    DenseMatrix delta = ffn_apply(p, zero_relu_ffn(4));
    CHECK(max_abs(delta) == 0.0);
}

TEST_CASE("a paired relu network evaluates a linear map exactly") {
    Rng rng(6);
    const std::size_t h = 3, m = 5;
    DenseMatrix l = random_matrix(h, h, rng);
    DenseMatrix p = random_matrix(h, m, rng);

    // u -> L u via relu(L u) - relu(-L u).
    ReluNetwork net;
    net.w1 = DenseMatrix(2 * h, h);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < h; ++j) {
            net.w1.at(i, j) = l.at(i, j);
            net.w1.at(h + i, j) = -l.at(i, j);
        }
    net.b1 = DenseVector(2 * h);
    net.w2 = DenseMatrix(h, 2 * h);
    for (std::size_t i = 0; i < h; ++i) {
        net.w2.at(i, i) = 1.0;
        net.w2.at(i, h + i) = -1.0;
    }
    net.b2 = DenseVector(h);

    DenseMatrix got = ffn_apply(p, ColumnMap{net, nullptr});
    CHECK(max_diff(got, matmul(l, p)) == 0.0);
}

TEST_CASE("ffn output columns depend only on their input column") {
    Rng rng(7);
    const std::size_t h = 4, m = 6;
    DenseMatrix p = random_matrix(h, m, rng);
    ReluNetwork net;
    net.w1 = random_matrix(5, h, rng);
    net.b1 = DenseVector(5);
    fill_normal(net.b1, rng);
    net.w2 = random_matrix(h, 5, rng);
    net.b2 = DenseVector(h);
    fill_normal(net.b2, rng);
    ColumnMap f{net, nullptr};

    std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
    DenseMatrix permuted(h, m);
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < h; ++i) permuted.at(i, j) = p.at(i, perm[j]);

    DenseMatrix out = ffn_apply(p, f);
    DenseMatrix out_perm = ffn_apply(permuted, f);
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < h; ++i) CHECK(out_perm.at(i, j) == out.at(i, perm[j]));

    // Duplicated columns give duplicated outputs.
    DenseMatrix dup(h, 2);
    for (std::size_t i = 0; i < h; ++i) dup.at(i, 0) = dup.at(i, 1) = p.at(i, 0);
    DenseMatrix dup_out = ffn_apply(dup, f);
    for (std::size_t i = 0; i < h; ++i) CHECK(dup_out.at(i, 0) == dup_out.at(i, 1));
}

TEST_CASE("exact oracle ffns run per column and honor domain checks") {
    ExactOracle oracle;
    oracle.name = "square_first";
    oracle.fn = [](const std::vector<double>& in, std::vector<double>& out) {
        out.assign(in.size(), 0.0);
        out[0] = in[0] * in[0];
    };
    ColumnMap f{oracle, nullptr};
    CHECK(f.is_exact_oracle());

    DenseMatrix p(2, 3);
    p.at(0, 0) = 2.0; p.at(0, 1) = -3.0; p.at(0, 2) = 2.0;
    DenseMatrix out = ffn_apply(p, f);
    CHECK(out.at(0, 0) == 4.0);
    CHECK(out.at(0, 1) == 9.0);
    CHECK(out.at(1, 1) == 0.0);
    // Identical input columns give bitwise identical outputs.
    CHECK(out.at(0, 2) == out.at(0, 0));

    f.domain_check = [](const std::vector<double>& in) {
        if (in[0] < 0.0) throw std::domain_error("column out of domain");
    };
    CHECK_THROWS_AS(ffn_apply(p, f), std::domain_error);
}

TEST_CASE("a transformer layer is attention plus ffn on the attention output") {
    Rng rng(8);
    DenseMatrix p = random_matrix(4, 3, rng);
    TransformerLayer layer;
    layer.heads = {random_head(4, 2, rng), random_head(4, 2, rng)};
    ReluNetwork net;
    net.w1 = random_matrix(6, 4, rng);
    net.b1 = DenseVector(6);
    fill_normal(net.b1, rng);
    net.w2 = random_matrix(4, 6, rng);
    net.b2 = DenseVector(4);
    layer.ffn = ColumnMap{net, nullptr};

    DenseMatrix u = attn(p, layer.heads);
    DenseMatrix f = ffn_apply(u, layer.ffn);
    CHECK(max_diff(tf_layer(p, layer), add(u, f)) == 0.0);
}

TEST_CASE("a zero weight layer maps a prompt to itself") {
    Rng rng(9);
    DenseMatrix p = random_matrix(5, 4, rng);
    TransformerLayer layer;
    layer.heads = {zero_head(5)};
    layer.ffn = zero_relu_ffn(5);
    CHECK(max_diff(tf_layer(p, layer), p) == 0.0);
}

TEST_CASE("recording a layer tape does not change the arithmetic") {
    Rng rng(10);
    DenseMatrix p = random_matrix(4, 4, rng);
    TransformerLayer layer;
    layer.heads = {random_head(4, 2, rng)};
    ReluNetwork net;
    net.w1 = random_matrix(8, 4, rng);
    net.b1 = DenseVector(8);
    fill_normal(net.b1, rng);
    net.w2 = random_matrix(4, 8, rng);
    net.b2 = DenseVector(4);
    layer.ffn = ColumnMap{net, nullptr};

    LayerRecord rec;
    DenseMatrix with_rec = tf_layer(p, layer, &rec);
    DenseMatrix without = tf_layer(p, layer);
    CHECK(max_diff(with_rec, without) == 0.0);
    CHECK(max_diff(rec.p_in, p) == 0.0);
    CHECK(max_diff(rec.out, with_rec) == 0.0);
    REQUIRE(rec.heads.size() == 1);
    CHECK(rec.heads[0].s.rows == 4);
    CHECK(rec.hidden_pre.rows == 8);
    // Softmax columns of the recorded scores sum to one.
    for (std::size_t j = 0; j < 4; ++j) {
        double sum = 0.0;
        for (std::size_t i = 0; i < 4; ++i) sum += rec.heads[0].s.at(i, j);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("pipelines with zero loop applications run only the pre block") {
    Rng rng(11);
    PromptMatrix p0;
    p0.p = random_matrix(4, 3, rng);
    p0.layout.add("x_band", 0, 2);
    p0.layout.add("r_band", 2, 1);
    p0.layout.add("d_band", 3, 1);

    TransformerLayer pre_layer;
    pre_layer.heads = {random_head(4, 2, rng)};
    pre_layer.ffn = zero_relu_ffn(4);

    NlafPipeline pipe;
    pipe.pre = {pre_layer};
    pipe.loop_count = 0;

    ProbeSpec probes{p0.layout.band("x_band"), p0.layout.band("r_band"),
                     p0.layout.band("d_band")};
    NlafTrajectory traj = nlaf_run(p0, pipe, probes);
    REQUIRE(traj.prompts.size() == 1);
    REQUIRE(traj.x.size() == 1);
    CHECK(max_diff(traj.prompts[0], tf_layer(p0.p, pre_layer)) == 0.0);
    CHECK(traj.x[0][0] == traj.prompts[0].at(0, 2));
    CHECK(traj.x[0][1] == traj.prompts[0].at(1, 2));
    CHECK(traj.in_rd[0][0] == traj.prompts[0].at(2, 2));
    CHECK(traj.in_rd[0][1] == traj.prompts[0].at(3, 2));
}

TEST_CASE("a zero weight loop keeps the trajectory constant") {
    Rng rng(12);
    PromptMatrix p0;
    p0.p = random_matrix(4, 3, rng);
    p0.layout.add("x_band", 0, 2);
    p0.layout.add("r_band", 2, 1);
    p0.layout.add("d_band", 3, 1);

    TransformerLayer idle;
    idle.heads = {zero_head(4)};
    idle.ffn = zero_relu_ffn(4);

    NlafPipeline pipe;
    pipe.loop = {idle};
    pipe.loop_count = 3;

    ProbeSpec probes{Band{0, 2}, Band{2, 1}, Band{3, 1}};
    NlafTrajectory traj = nlaf_run(p0, pipe, probes);
    REQUIRE(traj.prompts.size() == 4);
    for (std::size_t t = 0; t <= 3; ++t) CHECK(max_diff(traj.prompts[t], p0.p) == 0.0);
}

TEST_CASE("a post block equal to the loop layer reproduces the plain loop") {
    Rng rng(13);
    PromptMatrix p0;
    p0.p = random_matrix(4, 3, rng, -0.2, 0.2);
    TransformerLayer step;
    step.heads = {random_head(4, 2, rng, 0.2)};
    step.ffn = zero_relu_ffn(4);

    NlafPipeline plain;
    plain.loop = {step};
    plain.loop_count = 3;

    NlafPipeline with_post = plain;
    with_post.post = {step};

    ProbeSpec probes{Band{0, 2}, Band{2, 1}, Band{3, 1}};
    NlafTrajectory a = nlaf_run(p0, plain, probes);
    NlafTrajectory b = nlaf_run(p0, with_post, probes);
    REQUIRE(a.prompts.size() == b.prompts.size());
    for (std::size_t t = 0; t < a.prompts.size(); ++t)
        CHECK(max_diff(a.prompts[t], b.prompts[t]) == 0.0);
}

TEST_CASE("row layouts validate ranges and overlaps") {
    RowLayout layout;
    layout.add("x_band", 0, 2);
    layout.add("r_band", 2, 2);
    CHECK(layout.has("x_band"));
    CHECK(!layout.has("scratch"));
    CHECK(layout.band("r_band").start == 2);
    CHECK(layout.band("r_band").end() == 4);
    CHECK_THROWS_AS(layout.band("scratch"), std::invalid_argument);
    CHECK_THROWS_AS(layout.add("x_band", 4, 1), std::invalid_argument);
    CHECK_NOTHROW(layout.validate(4));
    CHECK_THROWS_AS(layout.validate(3), std::invalid_argument);

    RowLayout overlapping;
    overlapping.add("a", 0, 3);
    overlapping.add("b", 2, 2);
    CHECK_THROWS_AS(overlapping.validate(5), std::invalid_argument);
}

TEST_CASE("band reads take the last column and check bounds") {
    DenseMatrix p(4, 3);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) p.at(i, j) = 10.0 * static_cast<double>(i) + static_cast<double>(j);
    DenseVector v = read_band_last_col(p, Band{1, 2});
    REQUIRE(v.size() == 2);
    CHECK(v[0] == 12.0);
    CHECK(v[1] == 22.0);
    CHECK_THROWS_AS(read_band_last_col(p, Band{3, 2}), std::invalid_argument);
}

TEST_CASE("mismatched head shapes are rejected with shape messages") {
    DenseMatrix p(4, 3);
    AttentionHead bad;
    bad.w_q = DenseMatrix(2, 4);
    bad.w_k = DenseMatrix(3, 4);  // d_head mismatch
    bad.w_v = DenseMatrix(4, 4);
    CHECK_THROWS_AS(attn(p, {bad}), std::invalid_argument);

    bad.w_k = DenseMatrix(2, 4);
    bad.w_v = DenseMatrix(3, 3);  // wrong value shape
    CHECK_THROWS_AS(attn(p, {bad}), std::invalid_argument);
}
