#include "otafl/analysis.hpp"

#include <algorithm>
#include <cmath>

namespace otafl {

ChiValue heterogeneity_chi(std::span<const Eigen::VectorXd> local_grads) {
    require(!local_grads.empty(), "heterogeneity_chi needs at least one gradient");
    const auto n = local_grads.front().size();
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(n);
    double sq = 0.0;
    for (const auto& g : local_grads) {
        if (g.size() != n) throw DimensionError("heterogeneity_chi: gradient sizes differ");
        mean += g;
        sq += g.squaredNorm();
    }
    const double K = static_cast<double>(local_grads.size());
    mean /= K;
    sq /= K;
    const double denom = mean.squaredNorm();
    ChiValue out;
    if (!(denom > 0.0) || !std::isfinite(denom)) return out;
    out.value = std::max(1.0, sq / denom);  // Jensen; the clamp only absorbs rounding
    out.defined = true;
    return out;
}

bool check_condition(double lambda, int phi, double L, double chi) {
    const double a = phi * lambda * L;
    return a * a * chi + 2.0 * a <= 1.0;
}

void BoundInputs::validate() const {
    if (phi < 2) throw ConfigError("the convergence bound needs phi >= 2 (it divides by phi - 1)");
    if (L < 0.0 || xi2 < 0.0 || Gamma < 0.0) throw ConfigError("L, xi2 and Gamma must be >= 0");
    if (!(chi >= 1.0)) throw ConfigError("chi must be >= 1");
    if (!(lambda > 0.0)) throw ConfigError("lambda must be positive");
    if (K < 1 || T < 1 || N < 1) throw ConfigError("K, T and N must be positive");
    if (static_cast<int>(mse_trace.size()) != T) throw ConfigError("mse_trace must have T entries");
}

BoundTerms theorem1_bound(const BoundInputs& in) {
    in.validate();
    if (!check_condition(in.lambda, in.phi, in.L, in.chi))
        throw ConfigError("step-size condition phi^2 L^2 lambda^2 chi + 2 phi lambda L <= 1 does not hold");
    const double phi = in.phi;
    const double K = in.K;
    const double lam = in.lambda;
    double mse_mean = 0.0;
    for (double m : in.mse_trace) mse_mean += m;
    mse_mean /= in.T;

    BoundTerms out;
    out.term_initial = 2.0 * (in.F0 - in.F_star) / (lam * (phi - 1.0) * in.T);
    out.term_variance =
        (2.0 / (phi - 1.0)) * (phi * phi * lam * lam * in.L * in.L / 2.0 + phi * lam * in.L / K) * in.xi2;
    out.term_mse = ((1.0 + 2.0 * lam * in.L) / (phi - 1.0)) *
                   (static_cast<double>(in.N) * in.Gamma * (K + 1.0) / (K * K)) * mse_mean;
    out.total = out.term_initial + out.term_variance + out.term_mse;
    return out;
}

double minibatch_variance(const Eigen::MatrixXd& sample_grads, int batch) {
    const auto n = sample_grads.cols();
    require(n >= 1 && batch >= 1 && batch <= n, "minibatch_variance: need 1 <= batch <= n");
    if (n == 1) return 0.0;
    const Eigen::VectorXd mean = sample_grads.rowwise().mean();
    const double s2 = (sample_grads.colwise() - mean).colwise().squaredNorm().mean();
    return (static_cast<double>(n - batch) / static_cast<double>(n - 1)) * s2 / batch;
}

namespace {

double probe_lipschitz(const Model& model, const FederatedProblem& problem, std::uint64_t seed) {
    double best = 0.0;
    const Eigen::VectorXd w0 = model.initial_params(seed);
    for (int i = 0; i < 50; ++i) {
        CounterRng rng(seed, StreamTag::kCalibration, 7, static_cast<std::uint64_t>(i));
        Eigen::VectorXd a(w0.size()), b(w0.size());
        for (Eigen::Index j = 0; j < a.size(); ++j) a(j) = w0(j) + 0.1 * rng.normal();
        for (Eigen::Index j = 0; j < b.size(); ++j) b(j) = a(j) + 1e-3 * rng.normal();
        for (const auto& rows : problem.partition) {
            const double r = (model.gradient(a, problem.train, rows) - model.gradient(b, problem.train, rows)).norm() /
                             (a - b).norm();
            best = std::max(best, r);
        }
    }
    return 2.0 * best;
}

}  // namespace

EstimatedConstants estimate_constants(const Model& model, const FederatedProblem& problem,
                                      const ConstantsConfig& cfg) {
    cfg.fl.validate();
    const int K = static_cast<int>(problem.partition.size());
    require(K >= 1, "estimate_constants: empty partition");
    EstimatedConstants out;

    if (const auto* sm = dynamic_cast<const SoftmaxRegression*>(&model)) {
        for (const auto& rows : problem.partition) out.L = std::max(out.L, sm->smoothness_bound(problem.train, rows));
        out.L_analytic = true;
    } else {
        out.L = probe_lipschitz(model, problem, cfg.fl.seed);
    }

    // Calibration: error-free FedAvg on its own stream.
    const std::uint64_t cal_seed = splitmix64(cfg.fl.seed ^ 0xC0FFEEULL);
    Eigen::VectorXd w = model.initial_params(cfg.fl.seed);
    double xi_max = 0.0;
    double var_max = 0.0;
    double best_loss = model.loss(w, problem.train);
    std::vector<Eigen::VectorXd> theta(static_cast<std::size_t>(K));
    for (int t = 0; t < cfg.calibration_rounds; ++t) {
        for (int k = 0; k < K; ++k) {
            const auto& rows = problem.partition[static_cast<std::size_t>(k)];
            xi_max = std::max(xi_max, minibatch_variance(model.sample_gradients(w, problem.train, rows), cfg.fl.batch));
            CounterRng rng(cal_seed, StreamTag::kCalibration, static_cast<std::uint64_t>(k),
                           static_cast<std::uint64_t>(t));
            auto upd = local_sgd(model, w, problem.train, rows, cfg.fl.phi, cfg.fl.lambda, cfg.fl.batch, rng);
            // Local iterates also enter the variance assumption.
            xi_max = std::max(xi_max, minibatch_variance(model.sample_gradients(upd.final_model, problem.train, rows),
                                                         cfg.fl.batch));
            theta[static_cast<std::size_t>(k)] = std::move(upd.theta);
        }
        const AggregateStats stats = compute_stats(theta);
        var_max = std::max(var_max, stats.max_variance());
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(w.size());
        for (const auto& v : theta) mean += v;
        w = global_update(w, mean / K, cfg.fl.lambda);
        best_loss = std::min(best_loss, model.loss(w, problem.train));
    }
    out.xi2 = cfg.xi_safety * xi_max;
    out.Gamma = cfg.gamma_safety * var_max;

    // F*: full-batch gradient descent with step 1/L.
    Eigen::VectorXd v = model.initial_params(cfg.fl.seed);
    const double step = out.L > 0.0 ? 1.0 / out.L : cfg.fl.lambda;
    for (int i = 0; i < cfg.descent_iters; ++i) {
        v -= step * model.gradient(v, problem.train);
        if (i % 50 == 49) best_loss = std::min(best_loss, model.loss(v, problem.train));
    }
    out.F_star = std::min(best_loss, model.loss(v, problem.train));
    return out;
}

BoundInputs bound_inputs_from_run(const TrainingRun& run, const EstimatedConstants& c,
                                  const FLConfig& fl, int K, Eigen::Index N) {
    require(!run.rounds.empty(), "bound_inputs_from_run: empty run");
    BoundInputs in;
    in.F0 = run.rounds.front().train_loss;
    in.F_star = c.F_star;
    in.L = c.L;
    in.xi2 = c.xi2;
    in.Gamma = c.Gamma;
    in.chi = 1.0;
    for (const auto& r : run.rounds)
        if (std::isfinite(r.chi)) in.chi = std::max(in.chi, r.chi);
    in.lambda = fl.lambda;
    in.phi = fl.phi;
    in.K = K;
    in.T = static_cast<int>(run.rounds.size());
    in.N = N;
    for (const auto& r : run.rounds) in.mse_trace.push_back(r.mse);
    return in;
}

double empirical_grad_norm(const TrainingRun& run) {
    require(!run.rounds.empty(), "empirical_grad_norm: empty run");
    double acc = 0.0;
    for (const auto& r : run.rounds) acc += r.grad_norm_sq;
    return acc / static_cast<double>(run.rounds.size());
}

Lemma4Report lemma4_check(VecRef power, VecRef magnitude, double eta, double sigma2,
                          std::span<const Eigen::VectorXd> payload, int n_draws, std::uint64_t seed) {
    if (n_draws < 1000) throw ConfigError("lemma4_check needs at least 1000 draws");
    const int K = static_cast<int>(payload.size());
    require(K >= 1 && power.size() == K && magnitude.size() == K, "lemma4_check: size mismatch");
    const AggregateStats stats = compute_stats(payload);
    const auto N = payload.front().size();
    Lemma4Report out;
    out.mse = instantaneous_mse(power, magnitude, eta, sigma2);
    out.Gamma = stats.max_variance();
    out.bound = static_cast<double>(N) * out.Gamma * (K + 1.0) / (static_cast<double>(K) * K) * out.mse;
    if (stats.pi() <= kDegenerateSpread) {
        out.holds = true;
        return out;
    }

    std::vector<Eigen::VectorXd> signals;
    Eigen::VectorXd s = Eigen::VectorXd::Zero(N);
    Eigen::VectorXd misalign = Eigen::VectorXd::Zero(N);
    for (int k = 0; k < K; ++k) {
        signals.push_back(normalize(payload[static_cast<std::size_t>(k)], stats.theta_bar, stats.pi()));
        s += signals.back();
        misalign += (std::sqrt(power(k)) * magnitude(k) / std::sqrt(eta) - 1.0) * signals.back();
    }
    const double scale = stats.pi2 / (static_cast<double>(K) * K);
    out.closed_form = scale * (misalign.squaredNorm() + static_cast<double>(N) * sigma2 / eta);

    double sum = 0.0, sum_sq = 0.0;
    for (int d = 0; d < n_draws; ++d) {
        CounterRng rng(seed, StreamTag::kMonteCarlo, static_cast<std::uint64_t>(d));
        const Eigen::VectorXd s_hat = transmit_aggregate(signals, power, magnitude, eta, sigma2, rng);
        const double e2 = scale * (s_hat - s).squaredNorm();
        sum += e2;
        sum_sq += e2 * e2;
    }
    out.estimate = sum / n_draws;
    const double var = std::max(0.0, sum_sq / n_draws - out.estimate * out.estimate);
    out.std_error = std::sqrt(var / n_draws);
    out.holds = out.estimate <= out.bound + 3.0 * out.std_error;
    return out;
}

nlohmann::json bound_report_json(const BoundInputs& in, const BoundTerms& terms,
                                 const EstimatedConstants& c, bool condition) {
    nlohmann::json j;
    j["terms"] = {{"total", terms.total},
                  {"initial", terms.term_initial},
                  {"variance", terms.term_variance},
                  {"mse", terms.term_mse}};
    j["constants"] = {{"L", c.L},         {"L_analytic", c.L_analytic}, {"xi2", c.xi2},
                      {"Gamma", c.Gamma}, {"F_star", c.F_star},         {"chi", in.chi},
                      {"F0", in.F0}};
    j["setup"] = {{"lambda", in.lambda}, {"phi", in.phi}, {"K", in.K}, {"T", in.T}, {"N", in.N}};
    j["condition"] = condition;
    j["notes"] = {"L, xi2, Gamma and F_star are empirical estimates",
                  "F_star is the best loss found by full-batch descent, so the initial term is an estimate for non-convex models"};
    return j;
}

}  // namespace otafl
