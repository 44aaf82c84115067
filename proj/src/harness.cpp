#include "nlaf/harness.hpp"

#include <atomic>
#include <bit>
#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <utility>

#include <CLI11.hpp>
#include <json.hpp>

#include "nlaf/solvers.hpp"

namespace nlaf {

// ---- threading ------------------------------------------------------------------

std::size_t thread_cap() {
    if (const char* env = std::getenv("NLAF_THREADS")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc >= 1 ? hc : 1;
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min(thread_cap(), count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

// ---- manifest and file plumbing -------------------------------------------------

std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool RunManifest::all_pass() const {
    for (const auto& g : gates)
        if (!g.pass) return false;
    return true;
}

std::string RunManifest::to_json() const {
    nlohmann::json j;
    j["artifact_version"] = kArtifactVersion;
    j["command"] = command;
    j["config"] = nlohmann::json::parse(config_json);
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["outputs"] = outputs;
    j["wall_clock_s"] = wall_clock_s;
    nlohmann::json gs = nlohmann::json::array();
    for (const auto& g : gates)
        gs.push_back({{"name", g.name}, {"pass", g.pass}, {"detail", g.detail}});
    j["gates"] = gs;
    j["conventions"] = {{"post_is_loop", true},
                        {"softmax", "column-wise"},
                        {"prompt_orientation", "rows=bands, cols=tokens"},
                        {"alpha_beta_indexing", "alpha[k], beta[k] drive step k -> k+1"},
                        {"rng", Rng::algorithm}};
    return j.dump(2) + "\n";
}

namespace {

std::string manifest_path_for(const std::string& data_path) {
    return data_path + ".manifest.json";
}

struct Stopwatch {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    }
};

void emit(std::string* summary, const std::string& line) {
    std::fputs(line.c_str(), stdout);
    std::fputs("\n", stdout);
    if (summary) {
        *summary += line;
        *summary += '\n';
    }
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

double vec_rel_dist(const DenseVector& a, const DenseVector& b, double floor_val) {
    return norm2(vec_sub(a, b)) / std::max(norm2(b), floor_val);
}

}  // namespace

// ---- weight container -----------------------------------------------------------

namespace {

constexpr char kWeightsMagic[8] = {'N', 'L', 'A', 'F', 'W', '0', '0', '1'};

void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Cursor {
    const std::string& buf;
    std::size_t pos = 0;
    const std::string& path;

    void need(std::size_t count) const {
        if (pos + count > buf.size())
            throw std::runtime_error("weights: truncated file " + path);
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i]))
                 << (8 * i);
        pos += 8;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i]))
                 << (8 * i);
        pos += 4;
        return v;
    }
    std::string bytes(std::size_t count) {
        need(count);
        std::string s = buf.substr(pos, count);
        pos += count;
        return s;
    }
};

}  // namespace

void save_weights(const std::string& path, TrainablePipeline& tp,
                  const std::string& config_json) {
    const auto refs = param_refs(tp);
    std::string out;
    out.append(kWeightsMagic, sizeof kWeightsMagic);
    append_u64(out, refs.size());
    for (const auto& r : refs) {
        append_u32(out, static_cast<std::uint32_t>(r.name.size()));
        out += r.name;
        append_u64(out, r.len);
    }
    for (const auto& r : refs)
        for (std::size_t k = 0; k < r.len; ++k)
            append_u64(out, std::bit_cast<std::uint64_t>(r.data[k]));
    append_u64(out, config_json.size());
    out += config_json;
    write_text_file(path, out);
}

TrainablePipeline load_weights(const std::string& path, std::string* config_json_out) {
    const std::string buf = read_text_file(path);
    Cursor cur{buf, 0, path};
    if (cur.bytes(sizeof kWeightsMagic) != std::string(kWeightsMagic, sizeof kWeightsMagic))
        throw std::runtime_error("weights: bad magic in " + path);
    const std::uint64_t count = cur.u64();
    std::vector<std::pair<std::string, std::uint64_t>> table;
    table.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = cur.u32();
        std::string name = cur.bytes(name_len);
        table.emplace_back(std::move(name), cur.u64());
    }
    std::vector<std::vector<double>> data;
    data.reserve(count);
    for (const auto& [name, len] : table) {
        std::vector<double> block(len);
        for (std::uint64_t k = 0; k < len; ++k)
            block[k] = std::bit_cast<double>(cur.u64());
        data.push_back(std::move(block));
    }
    const std::uint64_t json_len = cur.u64();
    const std::string config_json = cur.bytes(json_len);
    if (config_json_out) *config_json_out = config_json;

    const TrainConfig cfg = TrainConfig::from_json(config_json);
    Rng scratch(0);
    TrainablePipeline tp = make_trainable(cfg, scratch);
    auto refs = param_refs(tp);
    if (refs.size() != table.size())
        throw std::runtime_error("weights: " + path + " has " +
                                 std::to_string(table.size()) + " tensors, config implies " +
                                 std::to_string(refs.size()));
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (refs[i].name != table[i].first || refs[i].len != table[i].second)
            throw std::runtime_error("weights: tensor table mismatch at '" +
                                     table[i].first + "' in " + path);
        std::memcpy(refs[i].data, data[i].data(), refs[i].len * sizeof(double));
    }
    return tp;
}

// ---- verify ---------------------------------------------------------------------

double declared_tolerance(OpKind kind) {
    switch (kind) {
        case OpKind::pointwise_add:
        case OpKind::pointwise_sub: return 1e-12;
        case OpKind::pointwise_mul:
        case OpKind::pointwise_div: return 5e-3;
        case OpKind::ab:
        case OpKind::ab_vec: return 1e-2;
        default: return 1e-3;
    }
}

namespace {

const std::vector<OpKind>& all_ops() {
    static const std::vector<OpKind> ops = {
        OpKind::pointwise_add,   OpKind::pointwise_sub,  OpKind::pointwise_mul,
        OpKind::pointwise_div,   OpKind::column_shift,   OpKind::row_shift,
        OpKind::vector_transpose, OpKind::inner,         OpKind::outer,
        OpKind::matrix_transpose, OpKind::atb,           OpKind::ab,
        OpKind::ab_vec};
    return ops;
}

// Table row the op belongs to; the four pointwise kinds share one row.
std::string group_name(OpKind kind) {
    switch (kind) {
        case OpKind::pointwise_add:
        case OpKind::pointwise_sub:
        case OpKind::pointwise_mul:
        case OpKind::pointwise_div: return "pointwise";
        default: return op_name(kind);
    }
}

nlohmann::json grid_json(const SweepGrid& grid) {
    return {{"C", grid.C}, {"c", grid.c}};
}

}  // namespace

int cmd_verify(const VerifyArgs& args, std::string* summary) {
    Stopwatch watch;
    const std::vector<OpKind> ops = args.ops.empty() ? all_ops() : args.ops;
    if (args.ns.empty()) {
        emit(summary, "verify: --n list is empty");
        return kExitUsage;
    }
    for (std::size_t n : args.ns)
        if (n < 1) {
            emit(summary, "verify: n must be >= 1");
            return kExitUsage;
        }

    struct Task {
        OpKind kind;
        std::size_t n;
        std::vector<ConstructionReport> reports;
        double best_error = 0.0;
        std::size_t layers = 0, heads = 0;
    };
    std::vector<Task> tasks;
    for (OpKind kind : ops)
        for (std::size_t n : args.ns) tasks.push_back({kind, n, {}, 0.0, 0, 0});

    parallel_for(tasks.size(), [&](std::size_t i) {
        Task& task = tasks[i];
        task.reports =
            sweep_linearization(task.kind, task.n, args.grid, args.pwl, args.seed);
        double best = task.reports.front().max_error;
        for (const auto& r : task.reports) best = std::min(best, r.max_error);
        task.best_error = best;
        task.layers = task.reports.front().layers;
        task.heads = task.reports.front().heads;
    });

    RunManifest manifest;
    manifest.command = "verify";
    manifest.seed = args.seed;
    bool diverged = false;

    std::string csv = "# manifest=" + manifest_path_for(args.out_csv) + "\n";
    csv += report_csv_header();
    csv += '\n';
    for (const auto& task : tasks)
        for (const auto& r : task.reports) {
            csv += report_csv_row(r);
            csv += '\n';
            if (!std::isfinite(r.max_error)) diverged = true;
        }

    // One summary section per table row, aggregating the pointwise kinds.
    std::vector<std::pair<std::string, std::size_t>> sections;  // group, n
    for (const auto& task : tasks) {
        const std::pair<std::string, std::size_t> key{group_name(task.kind), task.n};
        bool seen = false;
        for (const auto& s : sections) seen = seen || s == key;
        if (!seen) sections.push_back(key);
    }
    for (const auto& [group, n] : sections) {
        double worst_best = 0.0, tol = 0.0;
        std::size_t layers = 0, heads = 0;
        bool budget_ok = true, tol_ok = true;
        for (const auto& task : tasks) {
            if (group_name(task.kind) != group || task.n != n) continue;
            const OpBudget budget = budget_for(task.kind);
            budget_ok = budget_ok && task.layers == budget.layers &&
                        task.heads == budget.heads;
            tol = std::max(tol, declared_tolerance(task.kind));
            worst_best = std::max(worst_best, task.best_error);
            tol_ok = tol_ok && task.best_error < declared_tolerance(task.kind);
            layers = task.layers;
            heads = task.heads;
            manifest.gates.push_back(
                {std::string("budget:") + op_name(task.kind) + ":n" + std::to_string(n),
                 task.layers == budget.layers && task.heads == budget.heads,
                 fmt("layers=%zu/%zu heads=%zu/%zu", task.layers, budget.layers,
                     task.heads, budget.heads)});
            manifest.gates.push_back(
                {std::string("accuracy:") + op_name(task.kind) + ":n" + std::to_string(n),
                 task.best_error < declared_tolerance(task.kind),
                 fmt("best=%.3e tol=%.0e", task.best_error,
                     declared_tolerance(task.kind))});
        }
        emit(summary, fmt("op=%s n=%zu layers=%zu heads=%zu best_err=%.3e tol=%.0e %s",
                          group.c_str(), n, layers, heads, worst_best, tol,
                          budget_ok && tol_ok ? "PASS" : "FAIL"));
    }

    nlohmann::json cfg;
    cfg["ops"] = [&] {
        std::vector<std::string> names;
        for (OpKind k : ops) names.push_back(op_name(k));
        return names;
    }();
    cfg["n"] = args.ns;
    cfg["grid"] = grid_json(args.grid);
    cfg["pwl"] = {{"domain_bound", args.pwl.domain_bound},
                  {"knots", args.pwl.knots},
                  {"div_guard", args.pwl.div_guard}};
    cfg["seed"] = args.seed;
    cfg["out"] = args.out_csv;
    manifest.config_json = cfg.dump(2);
    manifest.config_hash = fnv1a_hex(manifest.config_json);
    manifest.outputs = {args.out_csv};
    manifest.wall_clock_s = watch.seconds();

    write_text_file(args.out_csv, csv);
    write_text_file(manifest_path_for(args.out_csv), manifest.to_json());

    if (diverged) {
        emit(summary, "verify: non-finite sweep error recorded");
        return kExitDiverged;
    }
    const bool pass = manifest.all_pass();
    emit(summary, fmt("verify: %zu sections, %s", sections.size(),
                      pass ? "all budgets and tolerances met" : "FAILURES present"));
    return pass ? kExitPass : kExitGateFail;
}

// ---- cgrun ----------------------------------------------------------------------

int cmd_cgrun(const CgRunArgs& args, std::string* summary) {
    Stopwatch watch;
    if (args.n < 1 || args.n > 16) {
        emit(summary, fmt("cgrun: n = %zu outside the guard range [1, 16] (prompts are "
                          "O(n^2))",
                          args.n));
        return kExitUsage;
    }
    if (args.seeds < 1) {
        emit(summary, "cgrun: need at least one seed");
        return kExitUsage;
    }

    const CgBlocks blocks = build_cg_blocks(args.n, args.lin);
    const NlafPipeline pipe = make_cg_pipeline(blocks, args.t_steps);
    const ProbeSpec probes = cg_probes(blocks.pre);
    const std::size_t tt = args.t_steps + 1;

    struct SeedResult {
        std::vector<double> dev, rel_nlaf, rel_cg;
        std::string error;  // empty = ok
    };
    std::vector<SeedResult> results(args.seeds);

    parallel_for(args.seeds, [&](std::size_t i) {
        SeedResult& res = results[i];
        res.dev.assign(tt, 0.0);
        res.rel_nlaf.assign(tt, 0.0);
        res.rel_cg.assign(tt, 0.0);
        const Problem pr = gen_problem({args.n, args.sigma, args.seed + i});
        const DenseVector x0(args.n);
        const CgTrajectory ref = cg_solve(pr.a, pr.b, x0, args.t_steps);
        const PromptMatrix pm = make_cg_prompt(args.n, pr.a, pr.b, x0);
        NlafTrajectory traj;
        try {
            traj = nlaf_run(pm, pipe, probes);
        } catch (const not_spd_error& e) {
            res.error = fmt("problem seed %llu: %s",
                            static_cast<unsigned long long>(args.seed + i), e.what());
            return;
        }
        for (std::size_t t = 0; t < tt; ++t) {
            if (!all_finite(traj.prompts[t])) {
                res.error = fmt("non-finite state at t = %zu, problem seed %llu", t,
                                static_cast<unsigned long long>(args.seed + i));
                return;
            }
            res.dev[t] = vec_rel_dist(traj.x[t], ref.x[t], 1e-12);
            res.rel_nlaf[t] = vec_rel_dist(traj.x[t], pr.x_true, 1e-12);
            res.rel_cg[t] = vec_rel_dist(ref.x[t], pr.x_true, 1e-12);
        }
    });

    RunManifest manifest;
    manifest.command = "cgrun";
    manifest.seed = args.seed;

    std::string divergence;
    for (const auto& res : results)
        if (!res.error.empty() && divergence.empty()) divergence = res.error;

    std::vector<double> mean_dev(tt, 0.0), mean_nlaf(tt, 0.0), mean_cg(tt, 0.0);
    if (divergence.empty()) {
        for (const auto& res : results)
            for (std::size_t t = 0; t < tt; ++t) {
                mean_dev[t] += res.dev[t];
                mean_nlaf[t] += res.rel_nlaf[t];
                mean_cg[t] += res.rel_cg[t];
            }
        for (std::size_t t = 0; t < tt; ++t) {
            mean_dev[t] /= static_cast<double>(args.seeds);
            mean_nlaf[t] /= static_cast<double>(args.seeds);
            mean_cg[t] /= static_cast<double>(args.seeds);
        }
    }
    double max_dev = 0.0;
    for (double v : mean_dev) max_dev = std::max(max_dev, v);

    std::string csv = "# manifest=" + manifest_path_for(args.out_csv) + "\n";
    csv += "t,mean_dev,mean_rel_nlaf,mean_rel_cg\n";
    char buf[128];
    for (std::size_t t = 0; t < tt; ++t) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", t, mean_dev[t],
                      mean_nlaf[t], mean_cg[t]);
        csv += buf;
    }

    nlohmann::json cfg;
    cfg["n"] = args.n;
    cfg["sigma"] = args.sigma;
    cfg["seeds"] = args.seeds;
    cfg["T"] = args.t_steps;
    cfg["C"] = args.lin.C;
    cfg["c"] = args.lin.c;
    cfg["seed"] = args.seed;
    cfg["out"] = args.out_csv;
    manifest.config_json = cfg.dump(2);
    manifest.config_hash = fnv1a_hex(manifest.config_json);
    manifest.outputs = {args.out_csv};
    manifest.gates.push_back({"finite_states", divergence.empty(), divergence});
    manifest.gates.push_back({"max_mean_dev<1e-2", divergence.empty() && max_dev < 1e-2,
                              fmt("max_t mean_dev = %.3e", max_dev)});
    manifest.wall_clock_s = watch.seconds();

    write_text_file(args.out_csv, csv);
    write_text_file(manifest_path_for(args.out_csv), manifest.to_json());

    if (!divergence.empty()) {
        emit(summary, "cgrun: " + divergence);
        return kExitDiverged;
    }
    emit(summary, fmt("cgrun: n=%zu seeds=%zu T=%zu max_t mean_dev=%.3e %s", args.n,
                      args.seeds, args.t_steps, max_dev,
                      max_dev < 1e-2 ? "PASS" : "FAIL"));
    return manifest.all_pass() ? kExitPass : kExitGateFail;
}

// ---- train ----------------------------------------------------------------------

int cmd_train(const TrainArgs& args, std::string* summary) {
    Stopwatch watch;
    try {
        args.cfg.validate();
    } catch (const std::invalid_argument& e) {
        emit(summary, std::string("train: ") + e.what());
        return kExitUsage;
    }

    const std::string metrics_path = args.out_dir + "/metrics.csv";
    const std::string weights_path = args.out_dir + "/weights.nlafw";
    const std::string manifest_path = args.out_dir + "/manifest.json";

    RunManifest manifest;
    manifest.command = "train";
    manifest.seed = args.cfg.seed;
    manifest.config_json = args.cfg.to_json();
    manifest.config_hash = fnv1a_hex(manifest.config_json);
    manifest.outputs = {metrics_path, weights_path};

    TrainResult res;
    try {
        res = train(args.cfg);
    } catch (const std::runtime_error& e) {
        manifest.gates.push_back({"finite_loss", false, e.what()});
        manifest.wall_clock_s = watch.seconds();
        write_text_file(manifest_path, manifest.to_json());
        emit(summary, std::string("train: ") + e.what());
        return kExitDiverged;
    }

    std::string csv = "# manifest=" + manifest_path + "\n";
    csv += metric_csv_header(args.cfg.t_steps);
    csv += '\n';
    bool finite = true;
    for (const auto& row : res.history) {
        csv += metric_csv_row(row);
        csv += '\n';
        finite = finite && std::isfinite(row.loss) && std::isfinite(row.metrics.discrepancy);
        for (double v : row.metrics.rel_err) finite = finite && std::isfinite(v);
        for (double v : row.metrics.int_err) finite = finite && std::isfinite(v);
    }

    write_text_file(metrics_path, csv);
    save_weights(weights_path, res.pipeline, args.cfg.to_json());

    const double initial = res.history.front().loss;
    const double final_loss = res.history.back().loss;
    const double ratio = final_loss / initial;
    manifest.gates.push_back({"finite_metrics", finite, ""});
    manifest.wall_clock_s = watch.seconds();
    write_text_file(manifest_path, manifest.to_json());

    emit(summary,
         fmt("train: %s supervision, %zu steps, loss %.6e -> %.6e (final/initial = %.4f)",
             loss_kind_name(args.cfg.supervision), args.cfg.steps, initial, final_loss,
             ratio));
    emit(summary, fmt("train: discrepancy %.6e -> %.6e",
                      res.history.front().metrics.discrepancy,
                      res.history.back().metrics.discrepancy));
    return manifest.all_pass() ? kExitPass : kExitGateFail;
}

// ---- gen ------------------------------------------------------------------------

int cmd_gen(const GenArgs& args, std::string* summary) {
    Stopwatch watch;
    if (args.n < 1 || args.count < 1) {
        emit(summary, "gen: n and count must be >= 1");
        return kExitUsage;
    }

    RunManifest manifest;
    manifest.command = "gen";
    manifest.seed = args.seed;

    nlohmann::json root;
    root["manifest"] = manifest_path_for(args.out_path);
    root["generator"] = Rng::algorithm;
    root["n"] = args.n;
    root["sigma"] = args.sigma;
    root["count"] = args.count;
    root["seed"] = args.seed;
    nlohmann::json problems = nlohmann::json::array();
    for (std::size_t i = 0; i < args.count; ++i) {
        const Problem pr = gen_problem({args.n, args.sigma, args.seed + i});
        nlohmann::json jp;
        jp["n"] = pr.spec.n;
        jp["sigma"] = pr.spec.sigma;
        jp["seed"] = pr.spec.seed;
        jp["a"] = pr.a.data;  // row-major
        jp["x_true"] = pr.x_true.data;
        jp["b"] = pr.b.data;
        problems.push_back(std::move(jp));
    }
    root["problems"] = std::move(problems);

    nlohmann::json cfg;
    cfg["n"] = args.n;
    cfg["sigma"] = args.sigma;
    cfg["count"] = args.count;
    cfg["seed"] = args.seed;
    cfg["out"] = args.out_path;
    manifest.config_json = cfg.dump(2);
    manifest.config_hash = fnv1a_hex(manifest.config_json);
    manifest.outputs = {args.out_path};
    manifest.gates.push_back({"wrote_problems", true, ""});
    manifest.wall_clock_s = watch.seconds();

    write_text_file(args.out_path, root.dump(2) + "\n");
    write_text_file(manifest_path_for(args.out_path), manifest.to_json());

    emit(summary, fmt("gen: wrote %zu problems (n=%zu, sigma=%g) to %s", args.count,
                      args.n, args.sigma, args.out_path.c_str()));
    return kExitPass;
}

// ---- CLI ------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (ch == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
    std::vector<std::size_t> out;
    for (const std::string& tok : split_csv(text)) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(tok.c_str(), &end, 10);
        if (end == tok.c_str() || *end != '\0')
            throw std::invalid_argument("not a size: '" + tok + "'");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

std::vector<OpKind> parse_ops(const std::string& text) {
    std::vector<OpKind> out;
    for (const std::string& tok : split_csv(text)) {
        if (tok == "all") {
            for (OpKind k : all_ops()) out.push_back(k);
        } else if (tok == "pointwise") {
            out.insert(out.end(), {OpKind::pointwise_add, OpKind::pointwise_sub,
                                   OpKind::pointwise_mul, OpKind::pointwise_div});
        } else if (tok == "transpose") {
            out.push_back(OpKind::matrix_transpose);
        } else if (auto k = op_from_name(tok)) {
            out.push_back(*k);
        } else {
            throw std::invalid_argument("unknown op '" + tok + "'");
        }
    }
    return out;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"explicit-weight transformer for dense linear algebra and conjugate "
                 "gradient"};
    app.require_subcommand(1);

    // verify
    auto* verify = app.add_subcommand("verify", "sweep construction accuracy and budgets");
    std::string v_ops = "all", v_ns = "2,4,8", v_grid = "default";
    double v_cap_c = 0.0, v_low_c = 0.0;
    std::uint64_t v_seed = 2024;
    std::string v_out = "verify.csv";
    verify->add_option("--ops", v_ops, "comma list of ops, groups, or 'all'");
    verify->add_option("--n", v_ns, "comma list of sizes");
    verify->add_option("--grid", v_grid, "(C, c) grid name; only 'default'");
    auto* v_cap = verify->add_option("--C", v_cap_c, "restrict grid to one C");
    auto* v_low = verify->add_option("--c", v_low_c, "restrict grid to one c");
    verify->add_option("--seed", v_seed, "payload stream seed");
    verify->add_option("--out", v_out, "output CSV path");

    // cgrun
    auto* cgrun = app.add_subcommand("cgrun", "compare the constructed pipeline to CG");
    CgRunArgs cg;
    cgrun->add_option("--n", cg.n, "system size (<= 16)");
    cgrun->add_option("--sigma", cg.sigma, "spectrum spread");
    cgrun->add_option("--seeds", cg.seeds, "number of seeded problems");
    cgrun->add_option("--T", cg.t_steps, "loop applications");
    cgrun->add_option("--C", cg.lin.C, "saturation constant");
    cgrun->add_option("--c", cg.lin.c, "payload scale");
    cgrun->add_option("--seed", cg.seed, "base problem seed");
    cgrun->add_option("--out", cg.out_csv, "output CSV path");

    // train
    auto* train_cmd = app.add_subcommand("train", "train the toy pipeline");
    std::string t_preset, t_config, t_teacher;
    double t_lr = 0.0;
    std::uint64_t t_seed = 0;
    std::string t_out = "train_out";
    auto* t_preset_o = train_cmd->add_option("--preset", t_preset,
                                             "toy-joint or toy-step-solution");
    auto* t_config_o = train_cmd->add_option("--config", t_config, "TrainConfig JSON path");
    auto* t_teacher_o = train_cmd->add_option("--teacher", t_teacher, "cg or pcg");
    auto* t_lr_o = train_cmd->add_option("--lr", t_lr, "constant learning rate override");
    auto* t_seed_o = train_cmd->add_option("--seed", t_seed, "seed override");
    train_cmd->add_option("--out", t_out, "output directory");

    // gen
    auto* gen = app.add_subcommand("gen", "generate a seeded SPD problem set");
    GenArgs ga;
    gen->add_option("--n", ga.n, "system size");
    gen->add_option("--sigma", ga.sigma, "spectrum spread (presets 1.0, 1.2, 1.4)");
    gen->add_option("--count", ga.count, "number of problems");
    gen->add_option("--seed", ga.seed, "base seed");
    gen->add_option("--out", ga.out_path, "output JSON path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitPass : kExitUsage;
    }

    try {
        if (verify->parsed()) {
            VerifyArgs va;
            va.ops = parse_ops(v_ops);
            va.ns = parse_sizes(v_ns);
            if (v_grid != "default") {
                std::fprintf(stderr, "verify: unknown grid '%s'\n", v_grid.c_str());
                return kExitUsage;
            }
            if (v_cap->count()) va.grid.C = {v_cap_c};
            if (v_low->count()) va.grid.c = {v_low_c};
            va.seed = v_seed;
            va.out_csv = v_out;
            return cmd_verify(va);
        }
        if (cgrun->parsed()) return cmd_cgrun(cg);
        if (train_cmd->parsed()) {
            TrainArgs ta;
            if (t_preset_o->count()) {
                if (t_preset == "toy-joint") {
                    ta.cfg = toy_joint_preset();
                } else if (t_preset == "toy-step-solution") {
                    ta.cfg = toy_step_solution_preset();
                } else {
                    std::fprintf(stderr, "train: unknown preset '%s'\n", t_preset.c_str());
                    return kExitUsage;
                }
            }
            if (t_config_o->count())
                ta.cfg = TrainConfig::from_json(read_text_file(t_config));
            if (t_teacher_o->count()) {
                auto tk = teacher_kind_from_name(t_teacher);
                if (!tk) {
                    std::fprintf(stderr, "train: unknown teacher '%s'\n",
                                 t_teacher.c_str());
                    return kExitUsage;
                }
                ta.cfg.teacher = *tk;
            }
            if (t_lr_o->count()) ta.cfg.lr_schedule = {{0, t_lr}};
            if (t_seed_o->count()) ta.cfg.seed = t_seed;
            ta.out_dir = t_out;
            return cmd_train(ta);
        }
        if (gen->parsed()) return cmd_gen(ga);
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return kExitUsage;
    } catch (const not_spd_error& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return kExitDiverged;
    }
    return kExitUsage;
}

}  // namespace nlaf
