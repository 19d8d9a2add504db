#include "otafl/aircomp.hpp"

#include <algorithm>
#include <cmath>

namespace otafl {

GradientPayload GradientPayload::from(Eigen::VectorXd theta) {
    require(theta.size() > 0, "gradient payload must be non-empty");
    GradientPayload out;
    out.mean = theta.mean();
    out.variance = (theta.array() - out.mean).square().mean();
    out.theta = std::move(theta);
    return out;
}

double AggregateStats::max_variance() const {
    return variance.empty() ? 0.0 : *std::max_element(variance.begin(), variance.end());
}

AggregateStats compute_stats(std::span<const Eigen::VectorXd> theta) {
    require(!theta.empty(), "compute_stats needs at least one device");
    const auto n = theta.front().size();
    AggregateStats out;
    for (const auto& v : theta) {
        require(v.size() == n && n > 0, "all gradient vectors must share a positive length");
        const double m = v.mean();
        out.mean.push_back(m);
        out.variance.push_back((v.array() - m).square().mean());
    }
    const double K = static_cast<double>(theta.size());
    for (std::size_t k = 0; k < theta.size(); ++k) {
        out.theta_bar += out.mean[k];
        out.pi2 += out.variance[k];
    }
    out.theta_bar /= K;
    out.pi2 /= K;
    return out;
}

AggregateStats compute_stats(std::span<const GradientPayload> payloads) {
    std::vector<Eigen::VectorXd> theta;
    theta.reserve(payloads.size());
    for (const auto& p : payloads) theta.push_back(p.theta);
    return compute_stats(theta);
}

Eigen::VectorXd normalize(const Eigen::VectorXd& theta_k, double theta_bar, double pi) {
    if (!(pi > kDegenerateSpread))
        throw DegenerateVarianceError("gradient spread is degenerate (pi <= 1e-12)");
    return (theta_k.array() - theta_bar) / pi;
}

Eigen::VectorXd transmit_aggregate(std::span<const Eigen::VectorXd> signals, VecRef power,
                                   VecRef magnitude, double eta, double sigma2, CounterRng& rng) {
    if (!(eta > 0.0)) throw NumericalError("receive normalizer eta must be positive");
    require(!signals.empty(), "transmit_aggregate needs at least one device");
    require(power.size() == static_cast<Eigen::Index>(signals.size()) &&
                magnitude.size() == power.size(),
            "power/magnitude/signal counts differ");
    const auto n = signals.front().size();
    const double inv_sqrt_eta = 1.0 / std::sqrt(eta);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
    for (std::size_t k = 0; k < signals.size(); ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        require(signals[k].size() == n, "signals must share a length");
        require(power(kk) >= 0.0, "transmit power must be non-negative");
        const double gain = std::sqrt(power(kk)) * magnitude(kk) * inv_sqrt_eta;
        if (gain != 0.0) out.noalias() += gain * signals[k];
    }
    if (sigma2 > 0.0) {
        const double noise_scale = std::sqrt(sigma2) * inv_sqrt_eta;
        for (Eigen::Index j = 0; j < n; ++j) out(j) += noise_scale * rng.normal();
    }
    return out;
}

Eigen::VectorXd denormalize(const Eigen::VectorXd& s_hat, double pi, double theta_bar, int K) {
    require(K >= 1, "denormalize needs K >= 1");
    return (pi * s_hat.array() + K * theta_bar) / static_cast<double>(K);
}

double instantaneous_mse(VecRef power, VecRef magnitude, double eta, double sigma2) {
    if (!(eta > 0.0)) throw NumericalError("receive normalizer eta must be positive");
    require(power.size() == magnitude.size(), "power and magnitude sizes differ");
    const double inv_sqrt_eta = 1.0 / std::sqrt(eta);
    double acc = 0.0;
    for (Eigen::Index k = 0; k < power.size(); ++k) {
        const double d = std::sqrt(power(k)) * magnitude(k) * inv_sqrt_eta - 1.0;
        acc += d * d;
    }
    return acc + sigma2 / eta;
}

double PowerAllocation::max_violation(const SystemConfig& cfg) const {
    require(power.rows() == cfg.K, "allocation has the wrong device count");
    double worst = 0.0;
    for (int k = 0; k < cfg.K; ++k) {
        const auto row = power.row(k);
        worst = std::max(worst, -row.minCoeff());
        worst = std::max(worst, row.maxCoeff() - cfg.p_max[k]);
        worst = std::max(worst, row.mean() - cfg.p_bar[k]);
    }
    return worst;
}

double time_average_mse(const PowerAllocation& alloc, const ChannelTrace& trace, double sigma2) {
    require(alloc.power.rows() == trace.devices() && alloc.power.cols() == trace.rounds() &&
                alloc.eta.size() == trace.rounds(),
            "allocation and trace dimensions differ");
    double total = 0.0;
    for (int t = 0; t < trace.rounds(); ++t)
        total += instantaneous_mse(alloc.power.col(t), trace.magnitudes().col(t), alloc.eta(t),
                                   sigma2);
    return total;
}

double mean_round_mse(const PowerAllocation& alloc, const ChannelTrace& trace, double sigma2) {
    return time_average_mse(alloc, trace, sigma2) / static_cast<double>(trace.rounds());
}

AggregationOutcome aggregate_over_the_air(std::span<const Eigen::VectorXd> theta, VecRef power,
                                          VecRef magnitude, double eta, double sigma2,
                                          CounterRng& rng) {
    AggregationOutcome out;
    out.stats = compute_stats(theta);
    const int K = static_cast<int>(theta.size());
    const auto n = theta.front().size();
    const bool silent = (power.array() * magnitude.array() <= 0.0).all();
    if (!(out.stats.pi() > kDegenerateSpread) || silent) {
        out.theta_hat = Eigen::VectorXd::Constant(n, out.stats.theta_bar);
        out.degenerate = true;
        return out;
    }
    std::vector<Eigen::VectorXd> signals;
    signals.reserve(theta.size());
    for (const auto& v : theta) signals.push_back(normalize(v, out.stats.theta_bar, out.stats.pi()));
    const Eigen::VectorXd s_hat = transmit_aggregate(signals, power, magnitude, eta, sigma2, rng);
    out.theta_hat = denormalize(s_hat, out.stats.pi(), out.stats.theta_bar, K);
    return out;
}

}  // namespace otafl
