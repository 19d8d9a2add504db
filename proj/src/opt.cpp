#include "otafl/opt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace otafl {

double optimal_eta(VecRef power, VecRef magnitude, double sigma2) {
    require(power.size() == magnitude.size(), "power and magnitude sizes differ");
    double num = sigma2;
    double den = 0.0;
    for (Eigen::Index k = 0; k < power.size(); ++k) {
        const double amp = std::sqrt(power(k)) * magnitude(k);
        num += amp * amp;
        den += amp;
    }
    if (!(den > 0.0)) throw NoSignalError("optimal_eta: all effective amplitudes are zero");
    const double ratio = num / den;
    return ratio * ratio;
}

double dual_power(double magnitude, double eta, double mu, double p_max) {
    if (magnitude <= 0.0) return 0.0;
    const double root = std::sqrt(eta) * magnitude / (magnitude * magnitude + mu * eta);
    return std::min(root * root, p_max);
}

double dual_power_sum(VecRef magnitude, VecRef eta, double mu, double p_max) {
    double acc = 0.0;
    for (Eigen::Index t = 0; t < magnitude.size(); ++t)
        acc += dual_power(magnitude(t), eta(t), mu, p_max);
    return acc;
}

double bisect_mu(VecRef magnitude, VecRef eta, double p_max, double p_bar, double tol) {
    require(magnitude.size() == eta.size(), "magnitude and eta sizes differ");
    const double target = static_cast<double>(magnitude.size()) * p_bar;
    if (dual_power_sum(magnitude, eta, 0.0, p_max) <= target)
        throw BracketError("bisect_mu: average constraint is slack at mu = 0");

    double lo = 0.0;
    double hi = 1.0;
    double g_hi = dual_power_sum(magnitude, eta, hi, p_max);
    while (g_hi >= target) {
        lo = hi;
        hi *= 2.0;
        g_hi = dual_power_sum(magnitude, eta, hi, p_max);
        if (!std::isfinite(hi)) throw NumericalError("bisect_mu: failed to bracket the dual");
    }
    // Invariant: g(lo) >= target > g(hi). The feasible end `hi` is returned.
    for (int iter = 0; iter < 400 && target - g_hi > tol; ++iter) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        const double g_mid = dual_power_sum(magnitude, eta, mid, p_max);
        if (g_mid >= target) {
            lo = mid;
            if (g_mid == target) {
                hi = mid;
                g_hi = g_mid;
            }
        } else {
            hi = mid;
            g_hi = g_mid;
        }
    }
    return hi;
}

DevicePowerSolution optimal_power_device(VecRef magnitude, VecRef eta, double p_max,
                                         double p_bar) {
    require(magnitude.size() == eta.size(), "magnitude and eta sizes differ");
    for (Eigen::Index t = 0; t < eta.size(); ++t)
        if (!(eta(t) > 0.0)) throw NumericalError("optimal_power_device: eta must be positive");
    const auto T = magnitude.size();
    DevicePowerSolution out;
    out.power.resize(T);

    const double budget = static_cast<double>(T) * p_bar;
    if (dual_power_sum(magnitude, eta, 0.0, p_max) <= budget) {
        out.inversion_branch = true;
        out.mu = 0.0;
    } else {
        out.mu = bisect_mu(magnitude, eta, p_max, p_bar, 1e-9 * budget);
    }
    for (Eigen::Index t = 0; t < T; ++t) out.power(t) = dual_power(magnitude(t), eta(t), out.mu, p_max);
    return out;
}

namespace {

Eigen::VectorXd optimal_etas(const Eigen::MatrixXd& power, const ChannelTrace& trace,
                             double sigma2, const Eigen::VectorXd* previous) {
    Eigen::VectorXd eta(trace.rounds());
    for (int t = 0; t < trace.rounds(); ++t) {
        try {
            eta(t) = optimal_eta(power.col(t), trace.magnitudes().col(t), sigma2);
        } catch (const NoSignalError&) {
            // Nobody transmits this round; any eta gives misalignment K, keep the last one.
            eta(t) = previous != nullptr ? (*previous)(t) : 1.0;
        }
    }
    return eta;
}

}  // namespace

OptResult alternating_optimize(const SystemConfig& cfg, const ChannelTrace& trace,
                               const SolverOptions& options,
                               const std::optional<Eigen::MatrixXd>& initial_power) {
    cfg.validate();
    if (trace.devices() != cfg.K)
        throw ConfigError("channel trace device count does not match the configuration");
    const int K = cfg.K;
    const int T = trace.rounds();

    OptResult result;
    Eigen::MatrixXd power(K, T);
    if (initial_power) {
        require(initial_power->rows() == K && initial_power->cols() == T,
                "initial power has the wrong shape");
        power = *initial_power;
    } else {
        for (int k = 0; k < K; ++k) power.row(k).setConstant(cfg.p_bar[k]);
    }
    Eigen::VectorXd eta = optimal_etas(power, trace, cfg.sigma2, nullptr);
    result.mu = Eigen::VectorXd::Zero(K);
    result.allocation = {power, eta};
    result.mse_history.push_back(time_average_mse(result.allocation, trace, cfg.sigma2));

    for (int iter = 1; iter <= options.max_iter; ++iter) {
        const Eigen::VectorXd next_eta = optimal_etas(power, trace, cfg.sigma2, &eta);
        Eigen::MatrixXd next_power(K, T);
        Eigen::VectorXd next_mu(K);
        for (int k = 0; k < K; ++k) {
            const Eigen::VectorXd h = trace.magnitudes().row(k).transpose();
            auto sol = optimal_power_device(h, next_eta, cfg.p_max[k], cfg.p_bar[k]);
            next_power.row(k) = sol.power.transpose();
            next_mu(k) = sol.mu;
        }
        PowerAllocation candidate{next_power, next_eta};
        const double mse = time_average_mse(candidate, trace, cfg.sigma2);
        const double prev = result.mse_history.back();
        result.iterations = iter;
        if (mse > prev) {
            // Only possible at round-off level once converged; keep the better iterate.
            result.converged = true;
            break;
        }
        power = std::move(next_power);
        eta = next_eta;
        result.allocation = std::move(candidate);
        result.mu = next_mu;
        result.mse_history.push_back(mse);
        if (mse == 0.0 || (prev - mse) / mse < options.eps0) {
            result.converged = true;
            break;
        }
    }
    return result;
}

double KktReport::worst() const {
    return std::max({peak_violation, average_violation, dual_violation, stationarity,
                     complementary_slackness});
}

KktReport kkt_residuals(VecRef power, double mu, VecRef magnitude, VecRef eta, double p_max,
                        double p_bar) {
    require(power.size() == magnitude.size() && eta.size() == power.size(),
            "kkt_residuals: size mismatch");
    KktReport r;
    const auto T = power.size();
    for (Eigen::Index t = 0; t < T; ++t) {
        const double p = power(t);
        r.peak_violation = std::max({r.peak_violation, p - p_max, -p});
        if (magnitude(t) <= 0.0) {
            // Transmitting into a null channel only wastes power.
            r.stationarity = std::max(r.stationarity, std::abs(p));
            continue;
        }
        const double root = std::sqrt(eta(t)) * magnitude(t) / (magnitude(t) * magnitude(t) + mu * eta(t));
        const double unclamped = root * root;
        if (p < p_max) {
            // Peak constraint inactive, so its multiplier is 0 and p must equal the minimizer.
            r.stationarity = std::max(r.stationarity, std::abs(p - unclamped));
        } else {
            // Active peak constraint needs a non-negative multiplier, i.e. unclamped >= p_max.
            r.stationarity = std::max(r.stationarity, std::max(0.0, p_max - unclamped));
        }
    }
    const double mean = power.mean();
    r.average_violation = std::max(0.0, mean - p_bar);
    r.dual_violation = std::max(0.0, -mu);
    r.complementary_slackness = std::abs(mu * (mean - p_bar));
    return r;
}

}  // namespace otafl
