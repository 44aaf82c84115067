#include "nlaf/constructions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdio>
#include <stdexcept>

namespace nlaf {

void LinearizationParams::validate() const {
    if (!(C > 0.0) || !(C <= 30.0))
        throw std::invalid_argument("LinearizationParams: C must be in (0, 30], got " +
                                    std::to_string(C));
    if (!(c > 0.0) || !(c <= 1.0))
        throw std::invalid_argument("LinearizationParams: c must be in (0, 1], got " +
                                    std::to_string(c));
}

namespace {

// ---- selector / routing helpers -------------------------------------------

// len x height matrix reading a band: row i picks prompt row band.start + i.
DenseMatrix band_selector(std::size_t height, const Band& src) {
    DenseMatrix m(src.len, height);
    for (std::size_t i = 0; i < src.len; ++i) m.at(i, src.start + i) = 1.0;
    return m;
}

DenseMatrix row_reader(std::size_t height, std::size_t row) {
    DenseMatrix m(1, height);
    m.at(0, row) = 1.0;
    return m;
}

// height x height value routing: destination band row i picks up prompt row
// src_start + i. Rows outside the destination band are zero, so the head can
// only ever write into that band.
DenseMatrix route_into(std::size_t height, const Band& dst, std::size_t src_start) {
    DenseMatrix m(height, height);
    for (std::size_t i = 0; i < dst.len; ++i) m.at(dst.start + i, src_start + i) = 1.0;
    return m;
}

// ---- the linearized head pair ----------------------------------------------

// Main head:
//   W_Q = [c_eff * selector; ones over the positional band]
//   W_K = [key; C * indicator(first positional row)]
//   W_V = e^C * route
// giving Z = C e_1 1^T + c_eff * (key P)^T (selector P), so for rows l >= 2
// e^C softmax(Z)_(l,j) ~= 1 + Z_(l,j). The cancel head zeroes the selector rows
// of W_Q and negates W_V; summing both heads subtracts the constant 1 and, in
// columns whose payload is zero, cancels bitwise (identical Z columns give
// identical softmax columns).
std::pair<AttentionHead, AttentionHead> linearized_pair(
    std::size_t height, const Band& positional, const DenseMatrix& selector,
    double c_eff, const DenseMatrix& key, const DenseMatrix& route, double C) {
    if (selector.rows != key.rows)
        throw std::invalid_argument("linearized_pair: selector " + selector.shape_str() +
                                    " vs key " + key.shape_str());
    const std::size_t s = selector.rows;
    AttentionHead main;
    main.w_q = DenseMatrix(s + 1, height);
    main.w_k = DenseMatrix(s + 1, height);
    for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t j = 0; j < height; ++j) {
            main.w_q.at(i, j) = c_eff * selector.at(i, j);
            main.w_k.at(i, j) = key.at(i, j);
        }
    }
    for (std::size_t j = 0; j < positional.len; ++j)
        main.w_q.at(s, positional.start + j) = 1.0;
    main.w_k.at(s, positional.start) = C;
    main.w_v = scale(route, std::exp(C));

    AttentionHead cancel = main;
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < height; ++j) cancel.w_q.at(i, j) = 0.0;
    cancel.w_v = scale(main.w_v, -1.0);
    return {std::move(main), std::move(cancel)};
}

AttentionHead zero_head(std::size_t height) {
    AttentionHead h;
    h.w_q = DenseMatrix(1, height);
    h.w_k = DenseMatrix(1, height);
    h.w_v = DenseMatrix(height, height);
    return h;
}

// ---- piecewise-linear interpolants ------------------------------------------

// One-hidden-layer realization of d = (phi(a+b) - phi(a-b)) / 4 where phi is
// the K-knot PWL interpolant of t^2 on [-r, r]. The interpolant constants
// cancel in the difference, so b2 stays zero and d(a, 0) = 0 exactly.
// For t^2 the kink coefficients are all 2h and the initial slope is -2r + h.
void append_square_pair_units(const DenseMatrix& wa, const DenseMatrix& wb,
                              double r, std::size_t knots,
                              std::vector<std::vector<double>>& w1_rows,
                              std::vector<double>& b1,
                              std::vector<double>& w2_row) {
    if (knots < 3) throw std::invalid_argument("pwl: need at least 3 knots");
    const std::size_t width = wa.cols;
    if (wb.cols != width) throw std::invalid_argument("pwl: row width mismatch");
    const double h = 2.0 * r / static_cast<double>(knots - 1);
    const double s0 = -2.0 * r + h;
    auto push = [&](double ca, double cb, double bias, double coeff) {
        std::vector<double> row(width);
        for (std::size_t j = 0; j < width; ++j)
            row[j] = ca * wa.at(0, j) + cb * wb.at(0, j);
        w1_rows.push_back(std::move(row));
        b1.push_back(bias);
        w2_row.push_back(coeff);
    };
    for (std::size_t k = 1; k + 1 < knots; ++k) {
        const double t = -r + h * static_cast<double>(k);
        push(1.0, 1.0, -t, h / 2.0);   // relu(a + b - t)
        push(1.0, -1.0, -t, -h / 2.0); // relu(a - b - t)
    }
    push(0.0, 1.0, 0.0, s0 / 2.0);  // relu(b)
    push(0.0, -1.0, 0.0, -s0 / 2.0);
}

ReluNetwork build_mul_ffn(std::size_t height, std::size_t a_row, std::size_t b_row,
                          std::size_t out_row, const PwlFfnParams& pwl) {
    std::vector<std::vector<double>> w1_rows;
    std::vector<double> b1, w2_row;
    append_square_pair_units(row_reader(height, a_row), row_reader(height, b_row),
                             2.0 * pwl.domain_bound, pwl.knots, w1_rows, b1, w2_row);
    ReluNetwork net;
    net.w1 = DenseMatrix(w1_rows.size(), height);
    net.b1 = DenseVector(w1_rows.size());
    net.w2 = DenseMatrix(height, w1_rows.size());
    net.b2 = DenseVector(height);
    for (std::size_t i = 0; i < w1_rows.size(); ++i) {
        for (std::size_t j = 0; j < height; ++j) net.w1.at(i, j) = w1_rows[i][j];
        net.b1[i] = b1[i];
        net.w2.at(out_row, i) = w2_row[i];
    }
    return net;
}

// Knot positions for the reciprocal interpolant: log-spaced on [-B, -delta] and
// [delta, B], chord across the excluded gap. knots/2 knots per side.
std::vector<double> reciprocal_knots(const PwlFfnParams& pwl) {
    const std::size_t per_side = std::max<std::size_t>(2, pwl.knots / 2);
    const double b = pwl.domain_bound, d = pwl.div_guard;
    if (!(d > 0.0) || !(d < b))
        throw std::invalid_argument("pwl: div_guard must be in (0, domain_bound)");
    std::vector<double> ks;
    const double g = std::pow(b / d, 1.0 / static_cast<double>(per_side - 1));
    for (std::size_t i = 0; i < per_side; ++i)
        ks.push_back(-b * std::pow(1.0 / g, static_cast<double>(i)));
    for (std::size_t i = 0; i < per_side; ++i)
        ks.push_back(d * std::pow(g, static_cast<double>(i)));
    ks.front() = -b;
    ks[per_side - 1] = -d;
    ks[per_side] = d;
    ks.back() = b;
    return ks;
}

struct PwlCoeffs {
    double f0 = 0.0;     // value at the first knot
    double s0 = 0.0;     // slope of the first segment
    double k0 = 0.0;     // first knot
    std::vector<double> knot;   // interior knots
    std::vector<double> gamma;  // slope jumps at interior knots
};

PwlCoeffs pwl_coeffs(const std::vector<double>& ks, double (*f)(double)) {
    PwlCoeffs c;
    c.k0 = ks.front();
    c.f0 = f(ks.front());
    std::vector<double> slope(ks.size() - 1);
    for (std::size_t i = 0; i + 1 < ks.size(); ++i)
        slope[i] = (f(ks[i + 1]) - f(ks[i])) / (ks[i + 1] - ks[i]);
    c.s0 = slope.front();
    for (std::size_t i = 1; i + 1 < ks.size(); ++i) {
        c.knot.push_back(ks[i]);
        c.gamma.push_back(slope[i] - slope[i - 1]);
    }
    return c;
}

double recip(double t) { return 1.0 / t; }

// Two-hidden-layer division FFN: stage one interpolates rho(b) ~= 1/b (and
// passes a, b through ReLU pairs), stage two multiplies a by rho(b) with the
// quarter-square trick. Output lands on out_row only.
ReluMlp build_div_mlp(std::size_t height, std::size_t a_row, std::size_t b_row,
                      std::size_t out_row, const PwlFfnParams& pwl) {
    const std::vector<double> ks = reciprocal_knots(pwl);
    const PwlCoeffs rc = pwl_coeffs(ks, recip);
    const std::size_t m = rc.knot.size();  // interior reciprocal knots

    // hidden 1: [relu(a), relu(-a), relu(b), relu(-b), relu(b - k_j)...]
    const std::size_t h1 = 4 + m;
    ReluMlp mlp;
    ReluMlp::Layer l1;
    l1.w = DenseMatrix(h1, height);
    l1.b = DenseVector(h1);
    l1.w.at(0, a_row) = 1.0;
    l1.w.at(1, a_row) = -1.0;
    l1.w.at(2, b_row) = 1.0;
    l1.w.at(3, b_row) = -1.0;
    for (std::size_t j = 0; j < m; ++j) {
        l1.w.at(4 + j, b_row) = 1.0;
        l1.b[4 + j] = -rc.knot[j];
    }

    // Affine reads over hidden 1: x = a, y = rho(b) = c_rho + s0 b + sum gamma_j u_j.
    const double c_rho = rc.f0 - rc.s0 * rc.k0;
    std::vector<double> x_row(h1), y_row(h1);
    x_row[0] = 1.0;
    x_row[1] = -1.0;
    y_row[2] = rc.s0;
    y_row[3] = -rc.s0;
    for (std::size_t j = 0; j < m; ++j) y_row[4 + j] = rc.gamma[j];

    // hidden 2: quarter-square units on (x, y); |x +- y| <= B + 1/delta.
    const double r2 = pwl.domain_bound + 1.0 / pwl.div_guard;
    const std::size_t k2 = std::max<std::size_t>(3, pwl.knots);
    const double h2step = 2.0 * r2 / static_cast<double>(k2 - 1);
    const double s02 = -2.0 * r2 + h2step;
    std::vector<std::vector<double>> w2_rows;
    std::vector<double> b2, wout;
    auto push2 = [&](double cx, double cy, double bias, double coeff) {
        std::vector<double> row(h1);
        for (std::size_t j = 0; j < h1; ++j) row[j] = cx * x_row[j] + cy * y_row[j];
        w2_rows.push_back(std::move(row));
        b2.push_back(bias + cy * c_rho);
        wout.push_back(coeff);
    };
    for (std::size_t k = 1; k + 1 < k2; ++k) {
        const double t = -r2 + h2step * static_cast<double>(k);
        push2(1.0, 1.0, -t, h2step / 2.0);
        push2(1.0, -1.0, -t, -h2step / 2.0);
    }
    push2(0.0, 1.0, 0.0, s02 / 2.0);
    push2(0.0, -1.0, 0.0, -s02 / 2.0);

    ReluMlp::Layer l2;
    l2.w = DenseMatrix(w2_rows.size(), h1);
    l2.b = DenseVector(w2_rows.size());
    for (std::size_t i = 0; i < w2_rows.size(); ++i) {
        for (std::size_t j = 0; j < h1; ++j) l2.w.at(i, j) = w2_rows[i][j];
        l2.b[i] = b2[i];
    }

    ReluMlp::Layer l3;
    l3.w = DenseMatrix(height, w2_rows.size());
    l3.b = DenseVector(height);
    for (std::size_t i = 0; i < w2_rows.size(); ++i) l3.w.at(out_row, i) = wout[i];

    mlp.layers = {std::move(l1), std::move(l2), std::move(l3)};
    return mlp;
}

// ---- assembly helpers --------------------------------------------------------

void set_block(DenseMatrix& l, const Band& dst, const Band& src, double coeff) {
    if (dst.len != src.len)
        throw std::invalid_argument("set_block: band lengths differ");
    for (std::size_t i = 0; i < dst.len; ++i) l.at(dst.start + i, src.start + i) += coeff;
}

void finalize(BuiltOp& op, const char* name, std::optional<OpKind> kind, std::size_t n,
              const LinearizationParams& lin, const PwlFfnParams& pwl,
              std::size_t rows, std::size_t cols, const OpBudget& budget,
              const char* note) {
    op.name = name;
    op.kind = kind;
    op.n = n;
    op.lin = lin;
    op.pwl = pwl;
    op.prompt_rows = rows;
    op.prompt_cols = cols;
    op.note = note;
    op.layout.validate(rows);
    op.ffn_variant = op.layers.front().ffn.variant_name();
    if (op.layers.size() != budget.layers)
        throw std::logic_error(op.name + ": layer count " +
                               std::to_string(op.layers.size()) + " != budget " +
                               std::to_string(budget.layers));
    for (const auto& layer : op.layers)
        if (layer.heads.size() != budget.heads)
            throw std::logic_error(op.name + ": head count " +
                                   std::to_string(layer.heads.size()) + " != budget " +
                                   std::to_string(budget.heads));
}

void require_n(std::size_t n, std::size_t min_n, const char* who) {
    if (n < min_n)
        throw std::invalid_argument(std::string(who) + ": n must be >= " +
                                    std::to_string(min_n) + ", got " + std::to_string(n));
}

}  // namespace

// ---- budgets and shapes --------------------------------------------------------

OpBudget budget_for(OpKind kind) {
    switch (kind) {
        case OpKind::pointwise_add:
        case OpKind::pointwise_sub:
        case OpKind::pointwise_mul:
        case OpKind::pointwise_div: return {1, 1};
        case OpKind::column_shift: return {1, 2};
        case OpKind::row_shift: return {1, 1};
        case OpKind::vector_transpose: return {1, 2};
        case OpKind::inner: return {1, 2};
        case OpKind::outer: return {1, 2};
        case OpKind::matrix_transpose: return {1, 2};
        case OpKind::atb: return {1, 2};
        case OpKind::ab: return {2, 2};
        case OpKind::ab_vec: return {2, 2};
    }
    throw std::invalid_argument("budget_for: unknown op");
}

std::pair<std::size_t, std::size_t> expected_prompt_shape(OpKind kind, std::size_t n) {
    switch (kind) {
        case OpKind::pointwise_add:
        case OpKind::pointwise_sub:
        case OpKind::pointwise_mul:
        case OpKind::pointwise_div: return {3, n};
        case OpKind::column_shift: return {2 * n + 3, 3};
        case OpKind::row_shift: return {2, n};
        case OpKind::vector_transpose: return {2 * n + 2, n + 1};
        case OpKind::inner: return {n + 4, n + 1};
        case OpKind::outer: return {2 * n + 3, n + 1};
        case OpKind::matrix_transpose: return {3 * n + 1, n + 1};
        case OpKind::atb:
        case OpKind::ab:
        case OpKind::ab_vec: return {4 * n + 1, n + 1};
    }
    throw std::invalid_argument("expected_prompt_shape: unknown op");
}

// ---- builders -------------------------------------------------------------------

BuiltOp build_pointwise(OpKind kind, std::size_t n, const PwlFfnParams& pwl) {
    require_n(n, 1, "build_pointwise");
    const std::size_t height = 3;
    BuiltOp op;
    op.layout.add("operand_a", 0, 1);
    op.layout.add("operand_b", 1, 1);
    op.layout.add("result", 2, 1);

    TransformerLayer layer;
    layer.heads.push_back(zero_head(height));
    switch (kind) {
        case OpKind::pointwise_add:
        case OpKind::pointwise_sub: {
            DenseMatrix l(height, height);
            l.at(2, 0) = 1.0;
            l.at(2, 1) = (kind == OpKind::pointwise_add) ? 1.0 : -1.0;
            layer.ffn.kind = linear_ffn(l);
            break;
        }
        case OpKind::pointwise_mul:
            layer.ffn.kind = build_mul_ffn(height, 0, 1, 2, pwl);
            break;
        case OpKind::pointwise_div: {
            layer.ffn.kind = build_div_mlp(height, 0, 1, 2, pwl);
            const double guard = pwl.div_guard;
            layer.ffn.domain_check = [guard](const std::vector<double>& col) {
                if (std::abs(col[1]) < guard)
                    throw std::domain_error("pointwise_div: |b| = " +
                                            std::to_string(std::abs(col[1])) +
                                            " below guard " + std::to_string(guard));
            };
            break;
        }
        default:
            throw std::invalid_argument("build_pointwise: not a pointwise op");
    }
    op.layers.push_back(std::move(layer));
    finalize(op, op_name(kind), kind, n, LinearizationParams{}, pwl, height, n,
             budget_for(kind), "");
    return op;
}

BuiltOp build_column_shift(std::size_t n, const LinearizationParams& lin) {
    require_n(n, 1, "build_column_shift");
    lin.validate();
    const std::size_t height = 2 * n + 3;
    BuiltOp op;
    op.layout.add("operand_a", 0, n);
    op.layout.add("scratch", n, n);
    op.layout.add("positional", 2 * n, 3);
    const Band pay = op.layout.band("operand_a");
    const Band sc = op.layout.band("scratch");
    const Band pos = op.layout.band("positional");

    // Z payload: token 1 reads token 2's column and vice versa.
    DenseMatrix key(2, height), sel(2, height);
    key.at(0, pos.start + 1) = 1.0;
    key.at(1, pos.start + 2) = 1.0;
    sel.at(0, pos.start + 2) = 1.0;
    sel.at(1, pos.start + 1) = 1.0;
    auto pair = linearized_pair(height, pos, sel, lin.c, key,
                                route_into(height, sc, pay.start), lin.C);

    DenseMatrix l(height, height);
    set_block(l, pay, pay, -1.0);
    set_block(l, pay, sc, 1.0 / lin.c);
    set_block(l, sc, sc, -1.0);

    TransformerLayer layer;
    layer.heads = {std::move(pair.first), std::move(pair.second)};
    layer.ffn.kind = linear_ffn(l);
    op.layers.push_back(std::move(layer));
    finalize(op, "column_shift", OpKind::column_shift, n, lin, PwlFfnParams{}, height, 3,
             budget_for(OpKind::column_shift), "");
    return op;
}

BuiltOp build_row_shift(std::size_t n) {
    require_n(n, 1, "build_row_shift");
    const std::size_t height = 2;
    BuiltOp op;
    op.layout.add("operand_a", 0, 1);
    op.layout.add("operand_b", 1, 1);

    DenseMatrix l(height, height);
    l.at(0, 0) = -1.0;
    l.at(0, 1) = 1.0;
    l.at(1, 0) = 1.0;
    l.at(1, 1) = -1.0;

    TransformerLayer layer;
    layer.heads.push_back(zero_head(height));
    layer.ffn.kind = linear_ffn(l);
    op.layers.push_back(std::move(layer));
    finalize(op, "row_shift", OpKind::row_shift, n, LinearizationParams{}, PwlFfnParams{},
             height, n, budget_for(OpKind::row_shift), "linear ffn swap, no attention");
    return op;
}

BuiltOp build_vector_transpose(std::size_t n, const LinearizationParams& lin) {
    require_n(n, 1, "build_vector_transpose");
    lin.validate();
    const std::size_t height = 2 * n + 2;
    BuiltOp op;
    op.layout.add("operand_a", 0, 1);
    op.layout.add("result", 1, n);
    op.layout.add("positional", n + 1, n + 1);
    const Band res = op.layout.band("result");
    const Band pos = op.layout.band("positional");

    auto pair = linearized_pair(height, pos, row_reader(height, pos.start + n), lin.c,
                                row_reader(height, 0),
                                route_into(height, res, pos.start + 1), lin.C);

    DenseMatrix l(height, height);
    l.at(0, 0) = -1.0;
    set_block(l, res, res, 1.0 / lin.c - 1.0);

    TransformerLayer layer;
    layer.heads = {std::move(pair.first), std::move(pair.second)};
    layer.ffn.kind = linear_ffn(l);
    op.layers.push_back(std::move(layer));
    finalize(op, "vector_transpose", OpKind::vector_transpose, n, lin, PwlFfnParams{},
             height, n + 1, budget_for(OpKind::vector_transpose), "");
    return op;
}

BuiltOp build_inner_product(std::size_t n, const LinearizationParams& lin) {
    require_n(n, 1, "build_inner_product");
    lin.validate();
    const std::size_t height = n + 4;
    BuiltOp op;
    op.layout.add("operand_a", 0, 1);
    op.layout.add("operand_b", 1, 1);
    op.layout.add("result", 2, 1);
    op.layout.add("positional", 3, n + 1);
    const Band res = op.layout.band("result");
    const Band pos = op.layout.band("positional");

    // The attention sum contracts n products, so the selector carries c/n.
    const double c_eff = lin.c / static_cast<double>(n);
    auto pair = linearized_pair(height, pos, row_reader(height, pos.start + n), c_eff,
                                row_reader(height, 0), route_into(height, res, 1), lin.C);

    DenseMatrix l(height, height);
    set_block(l, res, res, 1.0 / c_eff - 1.0);

    TransformerLayer layer;
    layer.heads = {std::move(pair.first), std::move(pair.second)};
    layer.ffn.kind = linear_ffn(l);
    op.layers.push_back(std::move(layer));
    finalize(op, "inner", OpKind::inner, n, lin, PwlFfnParams{}, height, n + 1,
             budget_for(OpKind::inner), "");
    return op;
}

BuiltOp build_outer_product(std::size_t n, const LinearizationParams& lin) {
    require_n(n, 1, "build_outer_product");
    lin.validate();
    const std::size_t height = 2 * n + 3;
    BuiltOp op;
    op.layout.add("operand_a", 0, 1);
    op.layout.add("operand_b", 1, 1);
    op.layout.add("result", 2, n);
    op.layout.add("positional", n + 2, n + 1);
    const Band res = op.layout.band("result");
    const Band pos = op.layout.band("positional");

    auto pair = linearized_pair(height, pos, row_reader(height, 1), lin.c,
                                row_reader(height, 0),
                                route_into(height, res, pos.start + 1), lin.C);

    DenseMatrix l(height, height);
    set_block(l, res, res, 1.0 / lin.c - 1.0);

    TransformerLayer layer;
    layer.heads = {std::move(pair.first), std::move(pair.second)};
    layer.ffn.kind = linear_ffn(l);
    op.layers.push_back(std::move(layer));
    finalize(op, "outer", OpKind::outer, n, lin, PwlFfnParams{}, height, n + 1,
             budget_for(OpKind::outer), "");
    return op;
}

BuiltOp build_matrix_transpose(std::size_t n, const LinearizationParams& lin) {
    require_n(n, 1, "build_matrix_transpose");
    lin.validate();
    const std::size_t height = 3 * n + 1;
    BuiltOp op;
    op.layout.add("operand_a", 0, n);
    op.layout.add("scratch", n, n);
    op.layout.add("positional", 2 * n, n + 1);
    const Band a = op.layout.band("operand_a");
    const Band sc = op.layout.band("scratch");
    const Band pos = op.layout.band("positional");

    Band pos_tokens{pos.start + 1, n};
    auto pair = linearized_pair(height, pos, band_selector(height, pos_tokens), lin.c,
                                band_selector(height, a),
                                route_into(height, sc, pos.start + 1), lin.C);

    DenseMatrix l(height, height);
    set_block(l, a, a, -1.0);
    set_block(l, a, sc, 1.0 / lin.c);
    set_block(l, sc, sc, -1.0);

    TransformerLayer layer;
    layer.heads = {std::move(pair.first), std::move(pair.second)};
    layer.ffn.kind = linear_ffn(l);
    op.layers.push_back(std::move(layer));
    finalize(op, "matrix_transpose", OpKind::matrix_transpose, n, lin, PwlFfnParams{},
             height, n + 1, budget_for(OpKind::matrix_transpose), "");
    return op;
}

namespace {

// Shared band frame for atb / ab / ab_vec.
void product_layout(BuiltOp& op, std::size_t n) {
    op.layout.add("operand_a", 0, n);
    op.layout.add("operand_b", n, n);
    op.layout.add("result", 2 * n, n);
    op.layout.add("positional", 3 * n, n + 1);
}

// Layer computing result ~= (operand_a band)^T (operand_b band) via the c/n^2
// selector (the Z entries themselves carry an n-term contraction).
TransformerLayer product_layer(const BuiltOp& op, std::size_t n,
                               const LinearizationParams& lin, std::size_t height) {
    const Band a = op.layout.band("operand_a");
    const Band b = op.layout.band("operand_b");
    const Band res = op.layout.band("result");
    const Band pos = op.layout.band("positional");
    const double c_eff = lin.c / static_cast<double>(n * n);
    auto pair = linearized_pair(height, pos, band_selector(height, b), c_eff,
                                band_selector(height, a),
                                route_into(height, res, pos.start + 1), lin.C);
    DenseMatrix l(height, height);
    set_block(l, res, res, 1.0 / c_eff - 1.0);
    TransformerLayer layer;
    layer.heads = {std::move(pair.first), std::move(pair.second)};
    layer.ffn.kind = linear_ffn(l);
    return layer;
}

// Layer transposing operand_a in place, using `spare` as scratch.
TransformerLayer transpose_layer(const BuiltOp& op, std::size_t n,
                                 const LinearizationParams& lin, std::size_t height,
                                 const char* spare) {
    const Band a = op.layout.band("operand_a");
    const Band sc = op.layout.band(spare);
    const Band pos = op.layout.band("positional");
    Band pos_tokens{pos.start + 1, n};
    auto pair = linearized_pair(height, pos, band_selector(height, pos_tokens), lin.c,
                                band_selector(height, a),
                                route_into(height, sc, pos.start + 1), lin.C);
    DenseMatrix l(height, height);
    set_block(l, a, a, -1.0);
    set_block(l, a, sc, 1.0 / lin.c);
    set_block(l, sc, sc, -1.0);
    TransformerLayer layer;
    layer.heads = {std::move(pair.first), std::move(pair.second)};
    layer.ffn.kind = linear_ffn(l);
    return layer;
}

}  // namespace

BuiltOp build_atb(std::size_t n, const LinearizationParams& lin) {
    require_n(n, 1, "build_atb");
    lin.validate();
    const std::size_t height = 4 * n + 1;
    BuiltOp op;
    product_layout(op, n);
    op.layers.push_back(product_layer(op, n, lin, height));
    finalize(op, "atb", OpKind::atb, n, lin, PwlFfnParams{}, height, n + 1,
             budget_for(OpKind::atb), "");
    return op;
}

BuiltOp build_ab(std::size_t n, const LinearizationParams& lin) {
    require_n(n, 1, "build_ab");
    lin.validate();
    const std::size_t height = 4 * n + 1;
    BuiltOp op;
    product_layout(op, n);
    op.layers.push_back(transpose_layer(op, n, lin, height, "result"));
    op.layers.push_back(product_layer(op, n, lin, height));
    finalize(op, "ab", OpKind::ab, n, lin, PwlFfnParams{}, height, n + 1,
             budget_for(OpKind::ab), "");
    return op;
}

BuiltOp build_ab_vec(std::size_t n, const LinearizationParams& lin) {
    require_n(n, 1, "build_ab_vec");
    lin.validate();
    const std::size_t height = 4 * n + 1;
    BuiltOp op;
    product_layout(op, n);
    op.layers.push_back(transpose_layer(op, n, lin, height, "result"));
    op.layers.push_back(product_layer(op, n, lin, height));
    finalize(op, "ab_vec", OpKind::ab_vec, n, lin, PwlFfnParams{}, height, n + 1,
             budget_for(OpKind::ab_vec), "b enters as a column band");
    return op;
}

BuiltOp build_op(OpKind kind, std::size_t n, const LinearizationParams& lin,
                 const PwlFfnParams& pwl) {
    BuiltOp op;
    switch (kind) {
        case OpKind::pointwise_add:
        case OpKind::pointwise_sub:
        case OpKind::pointwise_mul:
        case OpKind::pointwise_div:
            op = build_pointwise(kind, n, pwl);
            op.lin = lin;  // recorded for reports; the build does not use it
            return op;
        case OpKind::column_shift: return build_column_shift(n, lin);
        case OpKind::row_shift: return build_row_shift(n);
        case OpKind::vector_transpose: return build_vector_transpose(n, lin);
        case OpKind::inner: return build_inner_product(n, lin);
        case OpKind::outer: return build_outer_product(n, lin);
        case OpKind::matrix_transpose: return build_matrix_transpose(n, lin);
        case OpKind::atb: return build_atb(n, lin);
        case OpKind::ab: return build_ab(n, lin);
        case OpKind::ab_vec: return build_ab_vec(n, lin);
    }
    throw std::invalid_argument("build_op: unknown op");
}

// ---- conjugate-gradient blocks -----------------------------------------------

RowLayout cg_prompt_layout(std::size_t n) {
    require_n(n, 1, "cg_prompt_layout");
    RowLayout lay;
    lay.add("operand_a", 0, n);  // rows of A stored as columns
    lay.add("b_row", n, 1);
    lay.add("d_band", n + 1, n);
    lay.add("x_band", 2 * n + 1, n);
    lay.add("r_band", 3 * n + 1, n);
    lay.add("scratch", 4 * n + 1, n);
    lay.add("positional", 5 * n + 1, n + 1);
    return lay;
}

namespace {

RowLayout cg_layout(std::size_t n) { return cg_prompt_layout(n); }

}  // namespace

BuiltOp build_cg_pre(std::size_t n, const LinearizationParams& lin) {
    require_n(n, 1, "build_cg_pre");
    lin.validate();
    const std::size_t height = 6 * n + 2;
    BuiltOp op;
    op.layout = cg_layout(n);
    const Band a = op.layout.band("operand_a");
    const Band x = op.layout.band("x_band");
    const Band r = op.layout.band("r_band");
    const Band d = op.layout.band("d_band");
    const Band sc = op.layout.band("scratch");
    const Band pos = op.layout.band("positional");

    const double c_b = lin.c / static_cast<double>(n);
    const double c_a = lin.c / static_cast<double>(n * n);

    // pair 1: c_b * b lands in the r band of the last column
    auto p1 = linearized_pair(height, pos, row_reader(height, pos.start + n), c_b,
                              row_reader(height, op.layout.band("b_row").start),
                              route_into(height, r, pos.start + 1), lin.C);
    // pair 2: c_a * A x_0 lands in the scratch band of the last column
    auto p2 = linearized_pair(height, pos, band_selector(height, x), c_a,
                              band_selector(height, a),
                              route_into(height, sc, pos.start + 1), lin.C);

    // d = r_0 = b - A x_0, scratch cleared, x and b untouched
    DenseMatrix l(height, height);
    set_block(l, d, r, 1.0 / c_b);
    set_block(l, d, sc, -1.0 / c_a);
    set_block(l, r, r, 1.0 / c_b - 1.0);
    set_block(l, r, sc, -1.0 / c_a);
    set_block(l, sc, sc, -1.0);

    TransformerLayer layer;
    layer.heads = {std::move(p1.first), std::move(p1.second), std::move(p2.first),
                   std::move(p2.second)};
    layer.ffn.kind = linear_ffn(l);
    op.layers.push_back(std::move(layer));
    finalize(op, "cg_pre", std::nullopt, n, lin, PwlFfnParams{}, height, n + 1,
             OpBudget{1, 4}, "");
    return op;
}

BuiltOp build_cg_loop(std::size_t n, const LinearizationParams& lin) {
    require_n(n, 1, "build_cg_loop");
    lin.validate();
    const std::size_t height = 6 * n + 2;
    BuiltOp op;
    op.layout = cg_layout(n);
    const Band a = op.layout.band("operand_a");
    const Band x = op.layout.band("x_band");
    const Band r = op.layout.band("r_band");
    const Band d = op.layout.band("d_band");
    const Band sc = op.layout.band("scratch");
    const Band pos = op.layout.band("positional");

    const double c_a = lin.c / static_cast<double>(n * n);
    auto pair = linearized_pair(height, pos, band_selector(height, d), c_a,
                                band_selector(height, a),
                                route_into(height, sc, pos.start + 1), lin.C);

    // One conjugate-gradient step per column, driven by the attention-built
    // c_a * A d in the scratch band. Columns with an exactly zero residual are
    // frozen (their bands never became nonzero, or the iteration converged).
    ExactOracle oracle;
    oracle.name = "cg_step";
    const std::size_t nd = d.start, nx = x.start, nr = r.start, ns = sc.start;
    oracle.fn = [n, nd, nx, nr, ns, c_a](const std::vector<double>& in,
                                         std::vector<double>& out) {
        double rr = 0.0;
        for (std::size_t i = 0; i < n; ++i) rr += in[nr + i] * in[nr + i];
        for (std::size_t i = 0; i < n; ++i) out[ns + i] = -in[ns + i];
        if (rr == 0.0) return;
        std::vector<double> ad(n);
        double dad = 0.0, d1 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            ad[i] = in[ns + i] / c_a;
            dad += in[nd + i] * ad[i];
            d1 += std::abs(in[nd + i]);
        }
        // The attention channel reconstructs A d with absolute noise about
        // (tokens+2) * eps / c_a per entry. Below that resolution the sign of
        // d^T A d is meaningless: the iteration has hit its floating-point
        // plateau, so freeze the column instead of diagnosing indefiniteness.
        const double noise = 10.0 * static_cast<double>(n + 3) *
                             std::numeric_limits<double>::epsilon() / c_a * d1;
        if (std::abs(dad) <= noise) return;
        if (dad < 0.0)
            throw not_spd_error("cg_step: d^T A d = " + std::to_string(dad));
        const double alpha = rr / dad;
        double rr_next = 0.0;
        std::vector<double> r_next(n);
        for (std::size_t i = 0; i < n; ++i) {
            r_next[i] = in[nr + i] - alpha * ad[i];
            rr_next += r_next[i] * r_next[i];
        }
        const double beta = rr_next / rr;
        for (std::size_t i = 0; i < n; ++i) {
            out[nx + i] = alpha * in[nd + i];                            // x+ - x
            out[nr + i] = r_next[i] - in[nr + i];                        // r+ - r
            out[nd + i] = r_next[i] + beta * in[nd + i] - in[nd + i];    // d+ - d
        }
    };

    TransformerLayer layer;
    layer.heads = {std::move(pair.first), std::move(pair.second)};
    layer.ffn.kind = std::move(oracle);
    op.layers.push_back(std::move(layer));
    finalize(op, "cg_loop", std::nullopt, n, lin, PwlFfnParams{}, height, n + 1,
             OpBudget{1, 2}, "");
    return op;
}

CgBlocks build_cg_blocks(std::size_t n, const LinearizationParams& lin) {
    return CgBlocks{build_cg_pre(n, lin), build_cg_loop(n, lin)};
}

PromptMatrix make_cg_prompt(std::size_t n, const DenseMatrix& a, const DenseVector& b,
                            const DenseVector& x0) {
    if (a.rows != n || a.cols != n)
        throw std::invalid_argument("make_cg_prompt: A " + a.shape_str() + " vs n = " +
                                    std::to_string(n));
    if (b.size() != n || x0.size() != n)
        throw std::invalid_argument("make_cg_prompt: b/x0 size " +
                                    std::to_string(b.size()) + "/" +
                                    std::to_string(x0.size()) + " vs n = " +
                                    std::to_string(n));
    PromptMatrix pm;
    pm.layout = cg_prompt_layout(n);
    pm.p = DenseMatrix(6 * n + 2, n + 1);
    const Band ab = pm.layout.band("operand_a");
    const Band pos = pm.layout.band("positional");
    const std::size_t brow = pm.layout.band("b_row").start;
    const Band x = pm.layout.band("x_band");
    for (std::size_t j = 1; j <= n; ++j) {
        for (std::size_t k = 0; k < n; ++k) pm.p.at(ab.start + k, j) = a.at(j - 1, k);
        pm.p.at(brow, j) = b[j - 1];
    }
    for (std::size_t k = 0; k < n; ++k) pm.p.at(x.start + k, n) = x0[k];
    for (std::size_t i = 0; i < pos.len; ++i) pm.p.at(pos.start + i, i) = 1.0;
    return pm;
}

PromptMatrix make_cg_prompt(const BuiltOp& built, const DenseMatrix& a,
                            const DenseVector& b, const DenseVector& x0) {
    return make_cg_prompt(built.n, a, b, x0);
}

NlafPipeline make_cg_pipeline(const CgBlocks& blocks, std::size_t t_steps,
                              bool post_is_loop) {
    NlafPipeline pipe;
    pipe.pre = blocks.pre.layers;
    pipe.loop = blocks.loop.layers;
    if (!post_is_loop) pipe.post = blocks.loop.layers;
    pipe.loop_count = t_steps;
    return pipe;
}

ProbeSpec cg_probes(const RowLayout& layout) {
    return ProbeSpec{layout.band("x_band"), layout.band("r_band"),
                     layout.band("d_band")};
}

ProbeSpec cg_probes(const BuiltOp& built) { return cg_probes(built.layout); }

// ---- prompt encoding / decoding ------------------------------------------------

namespace {

void want(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

void check_shape(const DenseMatrix& m, std::size_t r, std::size_t c, const char* who) {
    if (m.rows != r || m.cols != c)
        throw std::invalid_argument(std::string(who) + ": input " + m.shape_str() +
                                    ", want " + std::to_string(r) + "x" + std::to_string(c));
}

}  // namespace

PromptMatrix make_prompt(const BuiltOp& built, const std::vector<DenseMatrix>& inputs) {
    want(built.kind.has_value(), "make_prompt: " + built.name + " has no op kind");
    const OpKind kind = *built.kind;
    const std::size_t n = built.n;
    PromptMatrix pm;
    pm.layout = built.layout;
    pm.p = DenseMatrix(built.prompt_rows, built.prompt_cols);
    DenseMatrix& p = pm.p;

    auto fill_positional = [&]() {
        const Band pos = pm.layout.band("positional");
        for (std::size_t i = 0; i < pos.len; ++i) p.at(pos.start + i, i) = 1.0;
    };
    auto fill_row = [&](std::size_t row, const DenseMatrix& v) {
        // 1 x n payload into columns 1..n of a row
        for (std::size_t j = 0; j < v.cols; ++j) p.at(row, 1 + j) = v.at(0, j);
    };
    auto fill_col_row = [&](std::size_t row, const DenseMatrix& v) {
        // n x 1 payload into columns 1..n of a row
        for (std::size_t i = 0; i < v.rows; ++i) p.at(row, 1 + i) = v.at(i, 0);
    };
    auto fill_band_matrix = [&](const Band& band, const DenseMatrix& m) {
        for (std::size_t k = 0; k < band.len; ++k)
            for (std::size_t j = 0; j < m.cols; ++j)
                p.at(band.start + k, 1 + j) = m.at(k, j);
    };

    switch (kind) {
        case OpKind::pointwise_add:
        case OpKind::pointwise_sub:
        case OpKind::pointwise_mul:
        case OpKind::pointwise_div:
            want(inputs.size() == 2, built.name + ": want 2 inputs");
            check_shape(inputs[0], n, 1, "make_prompt");
            check_shape(inputs[1], n, 1, "make_prompt");
            for (std::size_t j = 0; j < n; ++j) {
                p.at(0, j) = inputs[0].at(j, 0);
                p.at(1, j) = inputs[1].at(j, 0);
            }
            break;
        case OpKind::column_shift: {
            want(inputs.size() == 2, built.name + ": want 2 inputs");
            check_shape(inputs[0], n, 1, "make_prompt");
            check_shape(inputs[1], n, 1, "make_prompt");
            const Band pay = pm.layout.band("operand_a");
            for (std::size_t k = 0; k < n; ++k) {
                p.at(pay.start + k, 1) = inputs[0].at(k, 0);
                p.at(pay.start + k, 2) = inputs[1].at(k, 0);
            }
            fill_positional();
            break;
        }
        case OpKind::row_shift:
            want(inputs.size() == 2, built.name + ": want 2 inputs");
            check_shape(inputs[0], 1, n, "make_prompt");
            check_shape(inputs[1], 1, n, "make_prompt");
            for (std::size_t j = 0; j < n; ++j) {
                p.at(0, j) = inputs[0].at(0, j);
                p.at(1, j) = inputs[1].at(0, j);
            }
            break;
        case OpKind::vector_transpose:
            want(inputs.size() == 1, built.name + ": want 1 input");
            check_shape(inputs[0], 1, n, "make_prompt");
            fill_row(0, inputs[0]);
            fill_positional();
            break;
        case OpKind::inner:
        case OpKind::outer:
            want(inputs.size() == 2, built.name + ": want 2 inputs");
            check_shape(inputs[0], n, 1, "make_prompt");
            check_shape(inputs[1], n, 1, "make_prompt");
            fill_col_row(0, inputs[0]);
            fill_col_row(1, inputs[1]);
            fill_positional();
            break;
        case OpKind::matrix_transpose:
            want(inputs.size() == 1, built.name + ": want 1 input");
            check_shape(inputs[0], n, n, "make_prompt");
            fill_band_matrix(pm.layout.band("operand_a"), inputs[0]);
            fill_positional();
            break;
        case OpKind::atb:
        case OpKind::ab:
            want(inputs.size() == 2, built.name + ": want 2 inputs");
            check_shape(inputs[0], n, n, "make_prompt");
            check_shape(inputs[1], n, n, "make_prompt");
            fill_band_matrix(pm.layout.band("operand_a"), inputs[0]);
            fill_band_matrix(pm.layout.band("operand_b"), inputs[1]);
            fill_positional();
            break;
        case OpKind::ab_vec: {
            want(inputs.size() == 2, built.name + ": want 2 inputs");
            check_shape(inputs[0], n, n, "make_prompt");
            check_shape(inputs[1], n, 1, "make_prompt");
            fill_band_matrix(pm.layout.band("operand_a"), inputs[0]);
            const Band bb = pm.layout.band("operand_b");
            for (std::size_t k = 0; k < n; ++k)
                p.at(bb.start + k, n) = inputs[1].at(k, 0);
            fill_positional();
            break;
        }
    }
    return pm;
}

DenseMatrix run_built(const BuiltOp& built, const PromptMatrix& prompt) {
    PromptMatrix cur = prompt;
    for (const auto& layer : built.layers) cur = tf_layer(cur, layer);
    return cur.p;
}

DenseMatrix read_result(const BuiltOp& built, const DenseMatrix& out) {
    want(built.kind.has_value(), "read_result: " + built.name + " has no op kind");
    const OpKind kind = *built.kind;
    const std::size_t n = built.n;
    auto band_cols = [&](const char* name, std::size_t c0, std::size_t width) {
        const Band b = built.layout.band(name);
        DenseMatrix m(b.len, width);
        for (std::size_t i = 0; i < b.len; ++i)
            for (std::size_t j = 0; j < width; ++j) m.at(i, j) = out.at(b.start + i, c0 + j);
        return m;
    };
    switch (kind) {
        case OpKind::pointwise_add:
        case OpKind::pointwise_sub:
        case OpKind::pointwise_mul:
        case OpKind::pointwise_div: {
            DenseMatrix m(n, 1);
            for (std::size_t j = 0; j < n; ++j) m.at(j, 0) = out.at(2, j);
            return m;
        }
        case OpKind::column_shift: return band_cols("operand_a", 1, 2);
        case OpKind::row_shift: {
            DenseMatrix m(2, n);
            for (std::size_t j = 0; j < n; ++j) {
                m.at(0, j) = out.at(0, j);
                m.at(1, j) = out.at(1, j);
            }
            return m;
        }
        case OpKind::vector_transpose: return band_cols("result", n, 1);
        case OpKind::inner: return band_cols("result", n, 1);
        case OpKind::outer: return band_cols("result", 1, n);
        case OpKind::matrix_transpose: return band_cols("operand_a", 1, n);
        case OpKind::atb:
        case OpKind::ab: return band_cols("result", 1, n);
        case OpKind::ab_vec: return band_cols("result", n, 1);
    }
    throw std::invalid_argument("read_result: unknown op");
}

std::vector<DenseMatrix> draw_inputs(OpKind kind, std::size_t n, Rng& rng,
                                     double div_guard) {
    auto mat = [&](std::size_t r, std::size_t c) {
        DenseMatrix m(r, c);
        fill_uniform(m, rng, -1.0, 1.0);
        return m;
    };
    switch (kind) {
        case OpKind::pointwise_add:
        case OpKind::pointwise_sub:
        case OpKind::pointwise_mul:
            return {mat(n, 1), mat(n, 1)};
        case OpKind::pointwise_div: {
            DenseMatrix a = mat(n, 1);
            DenseMatrix b(n, 1);
            for (std::size_t i = 0; i < n; ++i) {
                const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
                b.at(i, 0) = sign * rng.uniform(div_guard, 1.0);
            }
            return {std::move(a), std::move(b)};
        }
        case OpKind::column_shift: return {mat(n, 1), mat(n, 1)};
        case OpKind::row_shift: return {mat(1, n), mat(1, n)};
        case OpKind::vector_transpose: return {mat(1, n)};
        case OpKind::inner:
        case OpKind::outer: return {mat(n, 1), mat(n, 1)};
        case OpKind::matrix_transpose: return {mat(n, n)};
        case OpKind::atb:
        case OpKind::ab: return {mat(n, n), mat(n, n)};
        case OpKind::ab_vec: return {mat(n, n), mat(n, 1)};
    }
    throw std::invalid_argument("draw_inputs: unknown op");
}

double measure_op_error(const BuiltOp& built, Rng& rng, int draws) {
    want(built.kind.has_value(), "measure_op_error: " + built.name + " has no op kind");
    double worst = 0.0;
    for (int t = 0; t < draws; ++t) {
        const auto inputs = draw_inputs(*built.kind, built.n, rng, built.pwl.div_guard);
        const DenseMatrix got = read_result(built, run_built(built, make_prompt(built, inputs)));
        const DenseMatrix ref = op_oracle(*built.kind, inputs);
        worst = std::max(worst, max_abs(sub(got, ref)));
    }
    return worst;
}

std::vector<ConstructionReport> sweep_linearization(OpKind kind, std::size_t n,
                                                    const SweepGrid& grid,
                                                    const PwlFfnParams& pwl,
                                                    std::uint64_t seed) {
    std::vector<ConstructionReport> out;
    for (double C : grid.C) {
        for (double c : grid.c) {
            const BuiltOp built = build_op(kind, n, LinearizationParams{C, c}, pwl);
            Rng rng(seed);  // same seed per grid point: identical payloads
            out.push_back(report_for(built, measure_op_error(built, rng, 3)));
        }
    }
    return out;
}

ConstructionReport report_for(const BuiltOp& built, double max_error) {
    ConstructionReport r;
    r.op = built.name;
    r.n = built.n;
    r.layers = built.layers.size();
    r.heads = built.layers.empty() ? 0 : built.layers.front().heads.size();
    r.C = built.lin.C;
    r.c = built.lin.c;
    r.ffn_variant = built.ffn_variant;
    r.max_error = max_error;
    r.prompt_rows = built.prompt_rows;
    r.prompt_cols = built.prompt_cols;
    r.note = built.note;
    return r;
}

std::string report_csv_header() { return "op,n,layers,heads,C,c,ffn_variant,max_error"; }

std::string report_csv_row(const ConstructionReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%zu,%zu,%zu,%.17g,%.17g,%s,%.17g", r.op.c_str(),
                  r.n, r.layers, r.heads, r.C, r.c, r.ffn_variant.c_str(), r.max_error);
    return std::string(buf);
}

ReluNetwork linear_ffn(const DenseMatrix& l) {
    std::vector<std::size_t> nz;
    for (std::size_t i = 0; i < l.rows; ++i) {
        bool any = false;
        for (std::size_t j = 0; j < l.cols; ++j)
            if (l.at(i, j) != 0.0) { any = true; break; }
        if (any) nz.push_back(i);
    }
    if (nz.empty()) nz.push_back(0);
    ReluNetwork net;
    net.w1 = DenseMatrix(2 * nz.size(), l.cols);
    net.b1 = DenseVector(2 * nz.size());
    net.w2 = DenseMatrix(l.rows, 2 * nz.size());
    net.b2 = DenseVector(l.rows);
    for (std::size_t k = 0; k < nz.size(); ++k) {
        for (std::size_t j = 0; j < l.cols; ++j) {
            net.w1.at(2 * k, j) = l.at(nz[k], j);
            net.w1.at(2 * k + 1, j) = -l.at(nz[k], j);
        }
        net.w2.at(nz[k], 2 * k) = 1.0;
        net.w2.at(nz[k], 2 * k + 1) = -1.0;
    }
    return net;
}

double pwl_mul_bound(const PwlFfnParams& pwl) {
    // two quarter-square interpolants on [-2B, 2B], each off by at most h^2/4
    const double h = 4.0 * pwl.domain_bound / static_cast<double>(pwl.knots - 1);
    return h * h / 8.0;
}

double pwl_div_bound(const PwlFfnParams& pwl, double a_max) {
    const std::vector<double> ks = reciprocal_knots(pwl);
    double eps_rho = 0.0;
    for (std::size_t i = 0; i + 1 < ks.size(); ++i) {
        if (ks[i] < 0.0 && ks[i + 1] > 0.0) continue;  // excluded gap
        const double width = ks[i + 1] - ks[i];
        const double tmin = std::min(std::abs(ks[i]), std::abs(ks[i + 1]));
        eps_rho = std::max(eps_rho, width * width / (4.0 * tmin * tmin * tmin));
    }
    const double r2 = pwl.domain_bound + 1.0 / pwl.div_guard;
    const std::size_t k2 = std::max<std::size_t>(3, pwl.knots);
    const double h2 = 2.0 * r2 / static_cast<double>(k2 - 1);
    return a_max * eps_rho + h2 * h2 / 8.0;
}

}  // namespace nlaf
