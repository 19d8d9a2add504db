#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "otafl/analysis.hpp"
#include "otafl/flsim.hpp"
#include "otafl/net.hpp"
#include "otafl/opt.hpp"

namespace otafl {

/// One experiment as read from a JSON config. Every section is optional.
struct ExperimentConfig {
    nlohmann::json raw;
    std::string hash;  // FNV-1a of the canonical JSON dump

    SystemConfig system;
    SolverOptions solver;
    TrainConfig net;
    std::filesystem::path guided_params;  // pre-trained parameters; empty = train
    std::filesystem::path free_params;
    FLConfig fl;
    std::vector<Scheme> schemes;
    DatasetSpec dataset;
    ConstantsConfig constants;
    int bench_repetitions = 5;
    int bench_inner_loops = 20;
    std::vector<int> bench_devices;  // empty = system.K only
    std::vector<std::uint64_t> seeds = {1};
};

ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);

std::string config_hash(const nlohmann::json& j);
/// "# config_hash=<hex> seed=<n>"
std::string output_header(const std::string& hash, std::uint64_t seed);

/// Relative dataset paths are tried against the working directory, then the source tree.
std::filesystem::path resolve_data_path(const std::filesystem::path& p);

struct LoadedData {
    Dataset train;
    Dataset test;
};
LoadedData load_data(const DatasetSpec& spec);

std::vector<std::vector<std::size_t>> make_partition(const Dataset& train, int K,
                                                     int shards_per_device, std::uint64_t seed);

/// Loads the configured parameters for `mode` or trains a fresh network.
NetParams obtain_net(const ExperimentConfig& cfg, NetMode mode, std::ostream* log = nullptr,
                     std::vector<EpochLog>* history = nullptr);

/// System config the simulator uses for one FL seed: T = rounds, channels keyed by the seed.
SystemConfig simulation_system(const ExperimentConfig& cfg, std::uint64_t seed);

struct NetBundle {
    std::optional<NetParams> guided;
    std::optional<NetParams> free;
};
/// Trains or loads only the networks the configured schemes need.
NetBundle prepare_nets(const ExperimentConfig& cfg, std::ostream* log = nullptr);

TrainingRun simulate(const ExperimentConfig& cfg, Scheme scheme, std::uint64_t seed,
                     const LoadedData& data, const NetBundle& nets);

struct BenchEntry {
    int K = 0;
    int T = 0;
    double solver_seconds = 0.0;  // median per-trace solve time
    double net_seconds = 0.0;     // median per-trace inference time
    double ratio = 0.0;
    double feasible_fraction = 0.0;
    int solver_iterations = 0;
};
struct BenchReport {
    std::string hardware;
    std::vector<BenchEntry> entries;
};

std::string hardware_descriptor();
BenchEntry bench_one(const SystemConfig& sys, const NetParams& guided, const SolverOptions& solver,
                     int repetitions, int inner_loops, const Eigen::MatrixXd& heldout,
                     int eval_batch_size);
BenchReport run_bench(const ExperimentConfig& cfg, std::ostream* log = nullptr);
nlohmann::json to_json(const BenchReport& report);

void write_metrics_csv(const std::filesystem::path& path, const TrainingRun& run,
                       const std::string& header);

// Subcommands. Each writes self-describing files under `out`.
void cmd_gen_channels(const ExperimentConfig& cfg, const std::filesystem::path& out);
void cmd_optimize(const ExperimentConfig& cfg, const std::filesystem::path& out);
void cmd_train_net(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log);
void cmd_simulate(const ExperimentConfig& cfg, const std::filesystem::path& out, int threads,
                  std::ostream& log);
void cmd_bench(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log);
void cmd_bound(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log);

/// Full command line. Exit codes: 0 ok, 1 usage, 2 config error, 3 numerical failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace otafl
