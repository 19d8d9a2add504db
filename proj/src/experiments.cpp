#include "otafl/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "CLI11.hpp"

namespace otafl {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::string config_hash(const json& j) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : j.dump()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream ss;
    ss << std::hex << std::setw(16) << std::setfill('0') << h;
    return ss.str();
}

std::string output_header(const std::string& hash, std::uint64_t seed) {
    return "# config_hash=" + hash + " seed=" + std::to_string(seed);
}

namespace {

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError("'" + section + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
            throw ConfigError("unknown key '" + key + "' in '" + section + "'");
    }
}

json section(const json& j, const char* name) {
    return j.contains(name) ? j.at(name) : json::object();
}

}  // namespace

ExperimentConfig experiment_from_json(const json& j) {
    ExperimentConfig cfg;
    try {
        check_keys(j, "config", {"system", "solver", "net", "fl", "dataset", "bound", "bench", "seeds"});
        cfg.raw = j;
        cfg.hash = config_hash(j);

        json sys = section(j, "system");
        if (!sys.contains("K")) sys["K"] = 20;
        cfg.system = system_config_from_json(sys);

        const json solver = section(j, "solver");
        check_keys(solver, "solver", {"eps0", "max_iter", "bisection_rel_tol"});
        cfg.solver.eps0 = solver.value("eps0", cfg.solver.eps0);
        cfg.solver.max_iter = solver.value("max_iter", cfg.solver.max_iter);
        cfg.solver.bisection_rel_tol = solver.value("bisection_rel_tol", cfg.solver.bisection_rel_tol);
        if (!(cfg.solver.eps0 > 0.0) || cfg.solver.max_iter < 1 || !(cfg.solver.bisection_rel_tol > 0.0))
            throw ConfigError("solver: eps0, max_iter and bisection_rel_tol must be positive");

        const json net = section(j, "net");
        check_keys(net, "net", {"batch_size", "gamma", "learning_rate", "final_learning_rate", "epochs", "seed",
                                "hidden", "pool_size", "eval_batch_size", "mu_scale", "eta_scale",
                                "guided_params", "free_params"});
        auto& tc = cfg.net;
        tc.batch_size = net.value("batch_size", tc.batch_size);
        tc.gamma = net.value("gamma", tc.gamma);
        tc.learning_rate = net.value("learning_rate", tc.learning_rate);
        tc.final_learning_rate = net.value("final_learning_rate", tc.final_learning_rate);
        tc.epochs = net.value("epochs", tc.epochs);
        tc.seed = net.value("seed", tc.seed);
        tc.hidden = net.value("hidden", tc.hidden);
        tc.pool_size = net.value("pool_size", tc.pool_size);
        tc.eval_batch_size = net.value("eval_batch_size", tc.eval_batch_size);
        tc.mu_scale = net.value("mu_scale", tc.mu_scale);
        tc.eta_scale = net.value("eta_scale", tc.eta_scale);
        tc.validate();
        cfg.guided_params = net.value("guided_params", std::string{});
        cfg.free_params = net.value("free_params", std::string{});

        const json fl = section(j, "fl");
        check_keys(fl, "fl", {"phi", "lambda", "batch", "rounds", "schemes", "model", "l2", "hidden",
                              "track_gradients"});
        auto& f = cfg.fl;
        f.phi = fl.value("phi", f.phi);
        f.lambda = fl.value("lambda", f.lambda);
        f.batch = fl.value("batch", f.batch);
        f.rounds = fl.value("rounds", f.rounds);
        f.model = fl.value("model", f.model);
        f.l2 = fl.value("l2", f.l2);
        f.hidden = fl.value("hidden", f.hidden);
        f.track_gradients = fl.value("track_gradients", f.track_gradients);
        f.validate();
        if (fl.contains("schemes")) {
            for (const auto& s : fl.at("schemes")) cfg.schemes.push_back(scheme_from_string(s.get<std::string>()));
        } else {
            cfg.schemes = all_schemes();
        }

        const json ds = section(j, "dataset");
        check_keys(ds, "dataset", {"name", "path", "train_size", "test_size", "shards_per_device", "dim",
                                   "classes", "separation", "seed"});
        auto& d = cfg.dataset;
        d.name = ds.value("name", d.name);
        d.path = ds.value("path", d.path.string());
        d.train_size = ds.value("train_size", d.train_size);
        d.test_size = ds.value("test_size", d.test_size);
        d.shards_per_device = ds.value("shards_per_device", d.shards_per_device);
        d.dim = ds.value("dim", d.dim);
        d.classes = ds.value("classes", d.classes);
        d.separation = ds.value("separation", d.separation);
        d.seed = ds.value("seed", d.seed);
        if (d.name != "mnist" && d.name != "gaussian" && d.name != "csv")
            throw ConfigError("dataset.name must be mnist, gaussian or csv");
        if (d.shards_per_device < 1) throw ConfigError("dataset.shards_per_device must be >= 1");

        const json bound = section(j, "bound");
        check_keys(bound, "bound", {"calibration_rounds", "gamma_safety", "xi_safety", "descent_iters"});
        auto& c = cfg.constants;
        c.calibration_rounds = bound.value("calibration_rounds", c.calibration_rounds);
        c.gamma_safety = bound.value("gamma_safety", c.gamma_safety);
        c.xi_safety = bound.value("xi_safety", c.xi_safety);
        c.descent_iters = bound.value("descent_iters", c.descent_iters);
        if (c.calibration_rounds < 1 || c.gamma_safety < 1.0 || c.xi_safety < 1.0 || c.descent_iters < 0)
            throw ConfigError("bound: calibration_rounds >= 1, safety factors >= 1, descent_iters >= 0");

        const json bench = section(j, "bench");
        check_keys(bench, "bench", {"repetitions", "inner_loops", "devices"});
        cfg.bench_repetitions = bench.value("repetitions", cfg.bench_repetitions);
        cfg.bench_inner_loops = bench.value("inner_loops", cfg.bench_inner_loops);
        cfg.bench_devices = bench.value("devices", cfg.bench_devices);
        if (cfg.bench_repetitions < 1 || cfg.bench_inner_loops < 1)
            throw ConfigError("bench: repetitions and inner_loops must be >= 1");

        if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (cfg.seeds.empty()) throw ConfigError("seeds must not be empty");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    cfg.constants.fl = cfg.fl;
    return cfg;
}

ExperimentConfig load_experiment(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return experiment_from_json(j);
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

fs::path resolve_data_path(const fs::path& p) {
    if (p.is_absolute() || fs::exists(p)) return p;
    const fs::path in_tree = fs::path(OTAFL_SOURCE_DIR) / p;
    return fs::exists(in_tree) ? in_tree : p;
}

LoadedData load_data(const DatasetSpec& spec) {
    LoadedData out;
    if (spec.name == "mnist") {
        const fs::path dir = resolve_data_path(spec.path);
        out.train = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", spec.train_size);
        out.test = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", spec.test_size);
    } else if (spec.name == "gaussian") {
        // One draw, split afterwards, so train and test share the class means.
        Dataset fresh = make_gaussian_mixture(spec.train_size + spec.test_size, spec.dim, spec.classes,
                                              spec.separation, spec.seed);
        std::vector<std::size_t> tr(spec.train_size), te(spec.test_size);
        std::iota(tr.begin(), tr.end(), std::size_t{0});
        std::iota(te.begin(), te.end(), spec.train_size);
        out.train = fresh.subset(tr);
        out.test = fresh.subset(te);
    } else {
        const fs::path dir = resolve_data_path(spec.path);
        out.train = read_dataset_csv(dir / "train.csv");
        out.test = read_dataset_csv(dir / "test.csv");
    }
    return out;
}

std::vector<std::vector<std::size_t>> make_partition(const Dataset& train, int K, int shards_per_device,
                                                     std::uint64_t seed) {
    CounterRng rng(seed, StreamTag::kPartition);
    return partition_noniid(train.labels, K, K * shards_per_device, shards_per_device, rng);
}

// ---------------------------------------------------------------------------
// Networks and simulation
// ---------------------------------------------------------------------------

NetParams obtain_net(const ExperimentConfig& cfg, NetMode mode, std::ostream* log,
                     std::vector<EpochLog>* history) {
    const fs::path& stored = mode == NetMode::kKnowledgeGuided ? cfg.guided_params : cfg.free_params;
    const PowerContext ctx = PowerContext::from(cfg.system);
    if (!stored.empty()) {
        NetParams p = load_params(resolve_data_path(stored));
        if (p.mode != mode) throw ConfigError(stored.string() + " holds a " + to_string(p.mode) + " network");
        if (p.devices() != cfg.system.K) throw ConfigError(stored.string() + " was trained for a different K");
        return p;
    }
    TrainConfig tc = cfg.net;
    tc.mode = mode;
    const ChannelSampler sampler(cfg.system.K, cfg.system.seed);
    auto report = [&](const EpochLog& e) {
        if (log && (e.epoch == 1 || e.epoch % 20 == 0 || e.epoch == tc.epochs))
            *log << to_string(mode) << " epoch " << e.epoch << " loss " << e.loss << " heldout_mse "
                 << e.heldout_mse << " feasible " << e.feasible_fraction << '\n';
    };
    TrainResult r = train(tc, ctx, sampler, report);
    if (history) *history = r.log;
    return std::move(r.params);
}

SystemConfig simulation_system(const ExperimentConfig& cfg, std::uint64_t seed) {
    SystemConfig sys = cfg.system;
    sys.T = cfg.fl.rounds;
    sys.seed = seed;
    return sys;
}

NetBundle prepare_nets(const ExperimentConfig& cfg, std::ostream* log) {
    NetBundle nets;
    auto wants = [&](Scheme s) { return std::find(cfg.schemes.begin(), cfg.schemes.end(), s) != cfg.schemes.end(); };
    if (wants(Scheme::kKnowledgeGuided)) nets.guided = obtain_net(cfg, NetMode::kKnowledgeGuided, log);
    if (wants(Scheme::kKnowledgeFree)) nets.free = obtain_net(cfg, NetMode::kKnowledgeFree, log);
    return nets;
}

TrainingRun simulate(const ExperimentConfig& cfg, Scheme scheme, std::uint64_t seed, const LoadedData& data,
                     const NetBundle& nets) {
    const SystemConfig sys = simulation_system(cfg, seed);
    const ChannelTrace trace = generate_channels(sys);
    auto model = make_model(cfg.fl.model, data.train.dim(), data.train.num_classes, cfg.fl.l2, cfg.fl.hidden);
    FederatedProblem problem{*model, data.train, data.test,
                             make_partition(data.train, sys.K, cfg.dataset.shards_per_device, seed)};
    SchemeAssets assets;
    if (scheme == Scheme::kAlternatingOpt) assets.solution = alternating_optimize(sys, trace, cfg.solver);
    if (scheme == Scheme::kKnowledgeGuided) {
        if (!nets.guided) throw ConfigError("knowledge_guided needs a network");
        assets.guided_net = *nets.guided;
    }
    if (scheme == Scheme::kKnowledgeFree) {
        if (!nets.free) throw ConfigError("knowledge_free needs a network");
        assets.free_net = *nets.free;
    }
    FLConfig fl = cfg.fl;
    fl.scheme = scheme;
    fl.seed = seed;
    return run_training(fl, sys, trace, problem, assets);
}

// ---------------------------------------------------------------------------
// Bench
// ---------------------------------------------------------------------------

std::string hardware_descriptor() {
    std::string cpu = "unknown cpu";
    std::ifstream in("/proc/cpuinfo");
    for (std::string line; std::getline(in, line);) {
        if (line.rfind("model name", 0) == 0) {
            cpu = line.substr(line.find(':') + 2);
            break;
        }
    }
    std::ostringstream ss;
    ss << cpu << "; " << std::thread::hardware_concurrency() << " hw threads; compiler " << __VERSION__;
    return ss.str();
}

namespace {

template <typename F>
double median_seconds(int repetitions, int inner, F&& f) {
    std::vector<double> t;
    for (int r = 0; r < repetitions; ++r) {
        const auto a = std::chrono::steady_clock::now();
        for (int i = 0; i < inner; ++i) f();
        const auto b = std::chrono::steady_clock::now();
        t.push_back(std::chrono::duration<double>(b - a).count() / inner);
    }
    std::sort(t.begin(), t.end());
    return t[t.size() / 2];
}

}  // namespace

BenchEntry bench_one(const SystemConfig& sys, const NetParams& guided, const SolverOptions& solver,
                     int repetitions, int inner_loops, const Eigen::MatrixXd& heldout, int eval_batch_size) {
    BenchEntry e;
    e.K = sys.K;
    e.T = sys.T;
    const ChannelTrace trace = generate_channels(sys);
    OptResult solved;
    e.solver_seconds = median_seconds(repetitions, 1, [&] { solved = alternating_optimize(sys, trace, solver); });
    e.solver_iterations = solved.iterations;
    const CompiledNet net(guided);
    PowerAllocation alloc = net.decide_trace(trace.magnitudes());  // warm-up
    e.net_seconds = median_seconds(repetitions, inner_loops, [&] { alloc = net.decide_trace(trace.magnitudes()); });
    e.ratio = e.solver_seconds / e.net_seconds;
    e.feasible_fraction = evaluate_feasibility(guided, heldout, eval_batch_size).feasible_fraction;
    return e;
}

BenchReport run_bench(const ExperimentConfig& cfg, std::ostream* log) {
    BenchReport report;
    report.hardware = hardware_descriptor();
    std::vector<int> devices = cfg.bench_devices;
    if (devices.empty()) devices.push_back(cfg.system.K);
    for (int K : devices) {
        ExperimentConfig c = cfg;
        json sys = to_json(cfg.system);
        sys.erase("p_bar");
        sys.erase("p_max");
        sys["K"] = K;
        sys["p_max_ratio"] = cfg.system.p_max[0] / cfg.system.p_bar[0];
        c.system = system_config_from_json(sys);
        if (K != cfg.system.K) c.guided_params.clear();
        const NetParams net = obtain_net(c, NetMode::kKnowledgeGuided, log);
        const ChannelSampler sampler(K, c.system.seed);
        const Eigen::MatrixXd heldout = heldout_draws(sampler, 100 * c.net.eval_batch_size * 10);
        BenchEntry e = bench_one(c.system, net, c.solver, cfg.bench_repetitions, cfg.bench_inner_loops, heldout,
                                 c.net.eval_batch_size);
        if (log)
            *log << "K=" << e.K << " solver " << e.solver_seconds << " s, net " << e.net_seconds << " s, ratio "
                 << e.ratio << ", feasible " << e.feasible_fraction << '\n';
        report.entries.push_back(e);
    }
    return report;
}

json to_json(const BenchReport& report) {
    json j;
    j["hardware"] = report.hardware;
    j["entries"] = json::array();
    for (const auto& e : report.entries)
        j["entries"].push_back({{"K", e.K},
                                {"T", e.T},
                                {"solver_seconds", e.solver_seconds},
                                {"net_seconds", e.net_seconds},
                                {"ratio", e.ratio},
                                {"feasible_fraction", e.feasible_fraction},
                                {"solver_iterations", e.solver_iterations}});
    return j;
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

namespace {

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out.precision(17);
    return out;
}

void write_json(const fs::path& path, json j, const std::string& hash, std::uint64_t seed) {
    j["config_hash"] = hash;
    j["seed"] = seed;
    auto out = open_out(path);
    out << j.dump(2) << '\n';
}

std::string seed_suffix(std::uint64_t seed) { return "_seed" + std::to_string(seed); }

}  // namespace

void write_metrics_csv(const fs::path& path, const TrainingRun& run, const std::string& header) {
    auto out = open_out(path);
    out << header << '\n';
    out << "round,loss,accuracy,mse,grad_norm_sq,chi\n";
    for (const auto& r : run.rounds)
        out << r.round << ',' << r.train_loss << ',' << r.test_accuracy << ',' << r.mse << ',' << r.grad_norm_sq
            << ',' << r.chi << '\n';
}

void cmd_gen_channels(const ExperimentConfig& cfg, const fs::path& out) {
    for (std::uint64_t seed : cfg.seeds) {
        SystemConfig sys = cfg.system;
        sys.seed = seed;
        write_trace_csv(out / ("channels" + seed_suffix(seed) + ".csv"), generate_channels(sys),
                        output_header(cfg.hash, seed).substr(2));
    }
}

void cmd_optimize(const ExperimentConfig& cfg, const fs::path& out) {
    for (std::uint64_t seed : cfg.seeds) {
        SystemConfig sys = cfg.system;
        sys.seed = seed;
        const ChannelTrace trace = generate_channels(sys);
        const OptResult r = alternating_optimize(sys, trace, cfg.solver);
        const std::string header = output_header(cfg.hash, seed);
        {
            auto f = open_out(out / ("allocation" + seed_suffix(seed) + ".csv"));
            f << header << "\nround,device,power,eta\n";
            for (int t = 0; t < sys.T; ++t)
                for (int k = 0; k < sys.K; ++k)
                    f << t << ',' << k << ',' << r.allocation.power(k, t) << ',' << r.allocation.eta(t) << '\n';
        }
        {
            auto f = open_out(out / ("history" + seed_suffix(seed) + ".csv"));
            f << header << "\niteration,sum_mse\n";
            for (std::size_t i = 0; i < r.mse_history.size(); ++i) f << i << ',' << r.mse_history[i] << '\n';
        }
        json kkt = json::array();
        for (int k = 0; k < sys.K; ++k) {
            const KktReport rep = kkt_residuals(r.allocation.power.row(k).transpose(), r.mu(k),
                                                trace.magnitudes().row(k).transpose(), r.allocation.eta,
                                                sys.p_max[k], sys.p_bar[k]);
            kkt.push_back({{"device", k},
                           {"peak_violation", rep.peak_violation},
                           {"average_violation", rep.average_violation},
                           {"dual_violation", rep.dual_violation},
                           {"stationarity", rep.stationarity},
                           {"complementary_slackness", rep.complementary_slackness}});
        }
        json summary = {{"iterations", r.iterations},
                        {"converged", r.converged},
                        {"sum_mse", r.mse_history.back()},
                        {"mean_round_mse", r.mse_history.back() / sys.T},
                        {"max_violation", r.allocation.max_violation(sys)},
                        {"mu", std::vector<double>(r.mu.data(), r.mu.data() + r.mu.size())},
                        {"kkt", kkt}};
        write_json(out / ("optimize" + seed_suffix(seed) + ".json"), summary, cfg.hash, seed);
    }
}

void cmd_train_net(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
    const std::uint64_t seed = cfg.net.seed;
    for (NetMode mode : {NetMode::kKnowledgeGuided, NetMode::kKnowledgeFree}) {
        ExperimentConfig c = cfg;
        c.guided_params.clear();
        c.free_params.clear();
        std::vector<EpochLog> history;
        const NetParams params = obtain_net(c, mode, &log, &history);
        save_params(out / ("net_" + to_string(mode) + ".bin"), params);
        auto f = open_out(out / ("train_" + to_string(mode) + ".csv"));
        f << output_header(cfg.hash, seed) << "\nepoch,loss,penalty,feasible_fraction,heldout_mse\n";
        for (const auto& e : history)
            f << e.epoch << ',' << e.loss << ',' << e.penalty << ',' << e.feasible_fraction << ',' << e.heldout_mse
              << '\n';
    }
}

void cmd_simulate(const ExperimentConfig& cfg, const fs::path& out, int threads, std::ostream& log) {
    const LoadedData data = load_data(cfg.dataset);
    const NetBundle nets = prepare_nets(cfg, &log);
    struct Job {
        Scheme scheme;
        std::uint64_t seed;
        double final_accuracy = 0.0;
        double mean_mse = 0.0;
        double final_loss = 0.0;
    };
    std::vector<Job> jobs;
    for (std::uint64_t seed : cfg.seeds)
        for (Scheme s : cfg.schemes) jobs.push_back({s, seed});

    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    std::exception_ptr failure;
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            try {
                Job& job = jobs[i];
                const TrainingRun run = simulate(cfg, job.scheme, job.seed, data, nets);
                write_metrics_csv(out / ("metrics_" + to_string(job.scheme) + seed_suffix(job.seed) + ".csv"), run,
                                  output_header(cfg.hash, job.seed));
                job.final_accuracy = run.final_accuracy();
                job.final_loss = run.rounds.back().train_loss;
                for (const auto& r : run.rounds) job.mean_mse += r.mse;
                job.mean_mse /= static_cast<double>(run.rounds.size());
                std::lock_guard lock(log_mutex);
                log << to_string(job.scheme) << " seed " << job.seed << " accuracy " << job.final_accuracy << '\n';
            } catch (...) {
                std::lock_guard lock(log_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const int n = std::max(1, std::min<int>(threads, static_cast<int>(jobs.size())));
    std::vector<std::thread> pool;
    for (int i = 1; i < n; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);

    auto f = open_out(out / "summary.csv");
    f << output_header(cfg.hash, cfg.seeds.front()) << "\nscheme,seed,final_accuracy,mean_mse,final_loss\n";
    for (const auto& j : jobs)
        f << to_string(j.scheme) << ',' << j.seed << ',' << j.final_accuracy << ',' << j.mean_mse << ','
          << j.final_loss << '\n';
}

void cmd_bench(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
    const BenchReport report = run_bench(cfg, &log);
    write_json(out / "bench.json", to_json(report), cfg.hash, cfg.system.seed);
}

void cmd_bound(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
    const LoadedData data = load_data(cfg.dataset);
    auto model = make_model(cfg.fl.model, data.train.dim(), data.train.num_classes, cfg.fl.l2, cfg.fl.hidden);
    const Scheme scheme = cfg.schemes.front();
    const NetBundle nets = prepare_nets(cfg, &log);
    for (std::uint64_t seed : cfg.seeds) {
        FederatedProblem problem{*model, data.train, data.test,
                                 make_partition(data.train, cfg.system.K, cfg.dataset.shards_per_device, seed)};
        ConstantsConfig cc = cfg.constants;
        cc.fl.seed = seed;
        const EstimatedConstants c = estimate_constants(*model, problem, cc);
        TrainingRun run = simulate(cfg, scheme, seed, data, nets);
        BoundInputs in = bound_inputs_from_run(run, c, cfg.fl, cfg.system.K, model->dim());
        const bool condition = check_condition(in.lambda, in.phi, in.L, in.chi);
        json j;
        if (condition && in.phi >= 2) {
            const BoundTerms terms = theorem1_bound(in);
            j = bound_report_json(in, terms, c, condition);
        } else {
            j = bound_report_json(in, BoundTerms{}, c, condition);
            j["terms"] = nullptr;
        }
        const double empirical = empirical_grad_norm(run);
        j["empirical_grad_norm_sq"] = empirical;
        j["scheme"] = to_string(scheme);
        if (j["terms"].is_object()) j["holds"] = empirical <= j["terms"]["total"].get<double>();
        write_json(out / ("bound" + seed_suffix(seed) + ".json"), j, cfg.hash, seed);
        log << "seed " << seed << " empirical " << empirical << " condition " << condition << '\n';
    }
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Over-the-air federated learning simulator"};
    app.require_subcommand(1);
    std::string config_path;
    std::string out_dir = "out";
    std::string seeds_arg;
    int threads = 1;
    app.add_option("--config", config_path, "Experiment JSON config");
    app.add_option("--out", out_dir, "Output directory");
    app.add_option("--seeds", seeds_arg, "Comma-separated seeds overriding the config");
    app.add_option("--threads", threads, "Worker threads for multi-seed runs")->check(CLI::PositiveNumber);
    const std::vector<std::string> names = {"optimize", "train-net", "simulate", "bench", "bound", "gen-channels"};
    app.fallthrough();
    for (const auto& n : names) app.add_subcommand(n);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        std::ostringstream o, er;
        const int code = app.exit(e, o, er);
        out << o.str();
        err << er.str();
        return code == 0 ? 0 : 1;
    }

    try {
        json raw = json::object();
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw ConfigError("cannot open config " + config_path);
            try {
                in >> raw;
            } catch (const json::exception& e) {
                throw ConfigError(config_path + ": " + e.what());
            }
        }
        ExperimentConfig cfg = experiment_from_json(raw);
        if (!seeds_arg.empty()) {
            cfg.seeds.clear();
            std::stringstream ss(seeds_arg);
            for (std::string tok; std::getline(ss, tok, ',');) {
                try {
                    std::size_t used = 0;
                    cfg.seeds.push_back(std::stoull(tok, &used));
                    if (used != tok.size()) throw std::invalid_argument(tok);
                } catch (const std::exception&) {
                    throw ConfigError("--seeds: '" + tok + "' is not a seed");
                }
            }
            if (cfg.seeds.empty()) throw ConfigError("--seeds is empty");
        }
        const fs::path dir = out_dir;
        fs::create_directories(dir);
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "gen-channels") cmd_gen_channels(cfg, dir);
        else if (cmd == "optimize") cmd_optimize(cfg, dir);
        else if (cmd == "train-net") cmd_train_net(cfg, dir, out);
        else if (cmd == "simulate") cmd_simulate(cfg, dir, threads, out);
        else if (cmd == "bench") cmd_bench(cfg, dir, out);
        else cmd_bound(cfg, dir, out);
        return 0;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 2;
    } catch (const DimensionError& e) {
        err << "config error: " << e.what() << '\n';
        return 2;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return 3;
    } catch (const fs::filesystem_error& e) {
        err << "config error: " << e.what() << '\n';
        return 2;
    }
}

}  // namespace otafl
