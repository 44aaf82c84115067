#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nlaf/constructions.hpp"
#include "nlaf/train.hpp"

// Command-line front end: verification sweeps, NLAF-vs-CG trajectory
// comparisons, toy training, and problem-set generation. Every command writes a
// manifest JSON next to its outputs, and every data file's first line points
// back at that manifest. Data files are byte-identical across reruns with the
// same inputs; only the manifest carries wall-clock time.

namespace nlaf {

inline constexpr int kExitPass = 0;      // all gates pass
inline constexpr int kExitGateFail = 1;  // a pass/fail gate failed
inline constexpr int kExitUsage = 2;     // bad flags or config
inline constexpr int kExitDiverged = 3;  // non-finite numerics mid-run

inline constexpr const char* kArtifactVersion = "1.0.0";

// NLAF_THREADS caps worker threads; unset or invalid falls back to the
// hardware concurrency (at least 1).
std::size_t thread_cap();

// Runs fn(0), ..., fn(count-1) on up to thread_cap() workers. Callers keep
// results deterministic by writing into per-index slots and reducing serially
// after the join. The first exception thrown by any worker is rethrown.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

struct GateResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct RunManifest {
    std::string command;
    std::string config_json;  // resolved configuration, echoed verbatim
    std::string config_hash;  // fnv1a-64 of config_json, hex
    std::uint64_t seed = 0;
    std::vector<std::string> outputs;
    double wall_clock_s = 0.0;
    std::vector<GateResult> gates;

    bool all_pass() const;
    std::string to_json() const;  // includes artifact version and convention flags
};

std::string fnv1a_hex(const std::string& text);
void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

// Trained-weight container: "NLAFW001" magic, tensor table (name, length),
// little-endian f64 payload in param_refs order, train-config JSON footer. The
// footer fully determines tensor shapes, so loading rebuilds the pipeline via
// make_trainable and then overwrites its values.
void save_weights(const std::string& path, TrainablePipeline& tp,
                  const std::string& config_json);
TrainablePipeline load_weights(const std::string& path,
                               std::string* config_json_out = nullptr);

// ---- subcommands ---------------------------------------------------------------
// Each returns an exit code, writes its data file(s) plus manifest, and prints a
// short report; `summary` (when given) receives the same report text.

struct VerifyArgs {
    std::vector<OpKind> ops;               // empty = all table operations
    std::vector<std::size_t> ns = {2, 4, 8};
    SweepGrid grid;
    PwlFfnParams pwl{4.0, 256, 0.1};       // division payloads keep |b| >= 0.1
    std::uint64_t seed = 2024;
    std::string out_csv = "verify.csv";
};
int cmd_verify(const VerifyArgs& args, std::string* summary = nullptr);

// Declared per-operation tolerance the verify gate checks the best grid point
// against: 1e-12 for add/sub, 5e-3 for the PWL scalar ops, 1e-2 for the
// two-layer products, 1e-3 otherwise.
double declared_tolerance(OpKind kind);

struct CgRunArgs {
    std::size_t n = 4;  // guard: n <= 16 (prompts are O(n^2))
    double sigma = 1.2;
    std::size_t seeds = 32;
    std::size_t t_steps = 20;
    LinearizationParams lin{20.0, 1e-4};
    std::uint64_t seed = 1000;  // problem i uses seed + i
    std::string out_csv = "cgrun.csv";
};
int cmd_cgrun(const CgRunArgs& args, std::string* summary = nullptr);

struct TrainArgs {
    TrainConfig cfg;
    std::string out_dir = "train_out";
};
int cmd_train(const TrainArgs& args, std::string* summary = nullptr);

struct GenArgs {
    std::size_t n = 4;
    double sigma = 1.2;
    std::size_t count = 32;
    std::uint64_t seed = 7;
    std::string out_path = "problems.json";
};
int cmd_gen(const GenArgs& args, std::string* summary = nullptr);

// CLI11 front end over the four subcommands (verify, cgrun, train, gen).
int run_cli(int argc, const char* const* argv);

}  // namespace nlaf
