#include "nlaf/engine.hpp"

#include <stdexcept>

namespace nlaf {

const char* ColumnMap::variant_name() const {
    if (std::holds_alternative<ReluNetwork>(kind)) return "relu";
    if (std::holds_alternative<ReluMlp>(kind)) return "relu_mlp";
    return "exact_oracle";
}

void RowLayout::add(const std::string& name, std::size_t start, std::size_t len) {
    if (bands.count(name))
        throw std::invalid_argument("RowLayout: duplicate band '" + name + "'");
    bands[name] = Band{start, len};
}

Band RowLayout::band(const std::string& name) const {
    auto it = bands.find(name);
    if (it == bands.end())
        throw std::invalid_argument("RowLayout: missing band '" + name + "'");
    return it->second;
}

void RowLayout::validate(std::size_t height) const {
    std::vector<std::pair<std::size_t, std::string>> spans;
    for (const auto& [name, b] : bands) {
        if (b.end() > height)
            throw std::invalid_argument("RowLayout: band '" + name + "' exceeds height " +
                                        std::to_string(height));
        spans.emplace_back(b.start, name);
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i) {
        const Band prev = bands.at(spans[i - 1].second);
        if (spans[i].first < prev.end())
            throw std::invalid_argument("RowLayout: bands '" + spans[i - 1].second +
                                        "' and '" + spans[i].second + "' overlap");
    }
}

namespace {

void check_head_shapes(const DenseMatrix& p, const AttentionHead& h) {
    if (h.w_q.cols != p.rows || h.w_k.cols != p.rows)
        throw std::invalid_argument("attn: w_q/w_k width " + h.w_q.shape_str() + "," +
                                    h.w_k.shape_str() + " vs prompt " + p.shape_str());
    if (h.w_q.rows != h.w_k.rows)
        throw std::invalid_argument("attn: head dims differ, " + h.w_q.shape_str() +
                                    " vs " + h.w_k.shape_str());
    if (h.w_v.rows != p.rows || h.w_v.cols != p.rows)
        throw std::invalid_argument("attn: w_v " + h.w_v.shape_str() + " vs prompt " +
                                    p.shape_str());
}

}  // namespace

DenseMatrix attn(const DenseMatrix& p, const std::vector<AttentionHead>& heads,
                 LayerRecord* rec) {
    DenseMatrix out = p;
    if (rec) {
        rec->p_in = p;
        rec->heads.resize(heads.size());
    }
    for (std::size_t i = 0; i < heads.size(); ++i) {
        const AttentionHead& h = heads[i];
        check_head_shapes(p, h);
        DenseMatrix qp = matmul(h.w_q, p);
        DenseMatrix kp = matmul(h.w_k, p);
        DenseMatrix z = matmul(transpose(kp), qp);  // P^T W_K^T W_Q P
        DenseMatrix s = softmax_cols(z);
        DenseMatrix vp = matmul(h.w_v, p);
        DenseMatrix contrib = matmul(vp, s);
        for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] += contrib.data[k];
        if (rec) rec->heads[i] = HeadRecord{std::move(qp), std::move(kp), std::move(z),
                                            std::move(s), std::move(vp)};
    }
    if (rec) rec->attn_out = out;
    return out;
}

DenseMatrix ffn_apply(const DenseMatrix& p, const ColumnMap& f, LayerRecord* rec) {
    if (f.domain_check) {
        std::vector<double> col(p.rows);
        for (std::size_t j = 0; j < p.cols; ++j) {
            for (std::size_t i = 0; i < p.rows; ++i) col[i] = p.at(i, j);
            f.domain_check(col);
        }
    }
    if (const auto* net = std::get_if<ReluNetwork>(&f.kind)) {
        if (net->w1.cols != p.rows)
            throw std::invalid_argument("ffn_apply: w1 " + net->w1.shape_str() +
                                        " vs prompt " + p.shape_str());
        if (net->w2.rows != p.rows)
            throw std::invalid_argument("ffn_apply: w2 " + net->w2.shape_str() +
                                        " vs prompt " + p.shape_str());
        DenseMatrix h = matmul(net->w1, p);
        for (std::size_t i = 0; i < h.rows; ++i)
            for (std::size_t j = 0; j < h.cols; ++j) h.at(i, j) += net->b1[i];
        if (rec) rec->hidden_pre = h;
        DenseMatrix r = relu(h);
        DenseMatrix out = matmul(net->w2, r);
        for (std::size_t i = 0; i < out.rows; ++i)
            for (std::size_t j = 0; j < out.cols; ++j) out.at(i, j) += net->b2[i];
        return out;
    }
    if (const auto* mlp = std::get_if<ReluMlp>(&f.kind)) {
        if (mlp->layers.empty())
            throw std::invalid_argument("ffn_apply: empty ReluMlp");
        if (mlp->layers.front().w.cols != p.rows ||
            mlp->layers.back().w.rows != p.rows)
            throw std::invalid_argument("ffn_apply: ReluMlp ends " +
                                        mlp->layers.front().w.shape_str() + "," +
                                        mlp->layers.back().w.shape_str() + " vs prompt " +
                                        p.shape_str());
        DenseMatrix cur = p;
        for (std::size_t l = 0; l < mlp->layers.size(); ++l) {
            cur = matmul(mlp->layers[l].w, cur);
            for (std::size_t i = 0; i < cur.rows; ++i)
                for (std::size_t j = 0; j < cur.cols; ++j) cur.at(i, j) += mlp->layers[l].b[i];
            if (l + 1 < mlp->layers.size()) cur = relu(cur);
        }
        return cur;
    }
    const auto& oracle = std::get<ExactOracle>(f.kind);
    DenseMatrix out(p.rows, p.cols, 0.0);
    std::vector<double> in(p.rows), res(p.rows);
    for (std::size_t j = 0; j < p.cols; ++j) {
        for (std::size_t i = 0; i < p.rows; ++i) in[i] = p.at(i, j);
        std::fill(res.begin(), res.end(), 0.0);
        oracle.fn(in, res);
        for (std::size_t i = 0; i < p.rows; ++i) out.at(i, j) = res[i];
    }
    return out;
}

DenseMatrix tf_layer(const DenseMatrix& p, const TransformerLayer& layer,
                     LayerRecord* rec) {
    DenseMatrix u = attn(p, layer.heads, rec);
    DenseMatrix f = ffn_apply(u, layer.ffn, rec);
    DenseMatrix out = add(u, f);
    if (rec) rec->out = out;
    return out;
}

PromptMatrix tf_layer(const PromptMatrix& p, const TransformerLayer& layer) {
    return PromptMatrix{tf_layer(p.p, layer), p.layout};
}

DenseVector read_band_last_col(const DenseMatrix& p, const Band& band) {
    if (band.end() > p.rows || p.cols == 0)
        throw std::invalid_argument("read_band_last_col: band beyond prompt " +
                                    p.shape_str());
    DenseVector v(band.len);
    for (std::size_t i = 0; i < band.len; ++i) v[i] = p.at(band.start + i, p.cols - 1);
    return v;
}

namespace {

DenseMatrix apply_block(DenseMatrix p, const std::vector<TransformerLayer>& block) {
    for (const auto& layer : block) p = tf_layer(p, layer);
    return p;
}

void probe_state(const DenseMatrix& p, const ProbeSpec& probes, NlafTrajectory& traj) {
    traj.x.push_back(read_band_last_col(p, probes.x));
    DenseVector r = read_band_last_col(p, probes.r);
    DenseVector d = read_band_last_col(p, probes.d);
    DenseVector rd(r.size() + d.size());
    for (std::size_t i = 0; i < r.size(); ++i) rd[i] = r[i];
    for (std::size_t i = 0; i < d.size(); ++i) rd[r.size() + i] = d[i];
    traj.in_rd.push_back(std::move(rd));
}

}  // namespace

NlafTrajectory nlaf_run(const PromptMatrix& p0, const NlafPipeline& pipe,
                        const ProbeSpec& probes) {
    NlafTrajectory traj;
    DenseMatrix state = apply_block(p0.p, pipe.pre);
    traj.prompts.push_back(state);
    probe_state(state, probes, traj);
    const std::size_t t_total = pipe.loop_count;
    for (std::size_t t = 1; t <= t_total; ++t) {
        const bool last = (t == t_total);
        const auto& block = (last && !pipe.post.empty()) ? pipe.post : pipe.loop;
        state = apply_block(state, block);
        traj.prompts.push_back(state);
        probe_state(state, probes, traj);
    }
    return traj;
}

}  // namespace nlaf
