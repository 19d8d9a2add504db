#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "otafl/channel.hpp"
#include "otafl/common.hpp"

namespace otafl {

using VecRef = Eigen::Ref<const Eigen::VectorXd>;

/// Spread below this is treated as degenerate by normalize().
constexpr double kDegenerateSpread = 1e-12;

/// One device's accumulated local gradient and its scalar statistics.
struct GradientPayload {
    Eigen::VectorXd theta;
    double mean = 0.0;
    double variance = 0.0;

    static GradientPayload from(Eigen::VectorXd theta);
};

struct AggregateStats {
    std::vector<double> mean;      // per device
    std::vector<double> variance;  // per device, population variance
    double theta_bar = 0.0;        // average of the device means
    double pi2 = 0.0;              // average of the device variances

    double pi() const { return std::sqrt(pi2); }
    /// Largest per-device variance (the empirical Gamma of this round).
    double max_variance() const;
};

AggregateStats compute_stats(std::span<const Eigen::VectorXd> theta);
AggregateStats compute_stats(std::span<const GradientPayload> payloads);

/// s_k = (theta_k - theta_bar) / pi; throws DegenerateVarianceError when pi <= 1e-12.
Eigen::VectorXd normalize(const Eigen::VectorXd& theta_k, double theta_bar, double pi);

/// Received signal after the receive normalizer:
///   s_hat = sum_k (sqrt(p_k)|h_k| / sqrt(eta)) s_k + n / sqrt(eta),  n ~ N(0, sigma2 I).
/// Phase pre-compensation is assumed exact, so only magnitudes enter.
Eigen::VectorXd transmit_aggregate(std::span<const Eigen::VectorXd> signals, VecRef power,
                                   VecRef magnitude, double eta, double sigma2, CounterRng& rng);

/// theta_hat = (pi * s_hat + K * theta_bar) / K.
Eigen::VectorXd denormalize(const Eigen::VectorXd& s_hat, double pi, double theta_bar, int K);

/// sum_k (sqrt(p_k)|h_k|/sqrt(eta) - 1)^2 + sigma2 / eta.
double instantaneous_mse(VecRef power, VecRef magnitude, double eta, double sigma2);

/// Per-round transmit powers (K x T) and receive normalizers (T).
struct PowerAllocation {
    Eigen::MatrixXd power;
    Eigen::VectorXd eta;

    int devices() const { return static_cast<int>(power.rows()); }
    int rounds() const { return static_cast<int>(power.cols()); }

    /// Largest violation of the peak and average budgets (0 when feasible).
    double max_violation(const SystemConfig& cfg) const;
    bool feasible(const SystemConfig& cfg, double tol = 1e-9) const {
        return max_violation(cfg) <= tol;
    }
};

/// Objective of the transceiver design problem: the sum over rounds of the
/// instantaneous MSE (the 1/T factor is dropped).
double time_average_mse(const PowerAllocation& alloc, const ChannelTrace& trace, double sigma2);
/// Same quantity divided by T, for reporting.
double mean_round_mse(const PowerAllocation& alloc, const ChannelTrace& trace, double sigma2);

/// Outcome of one complete analog aggregation round.
struct AggregationOutcome {
    Eigen::VectorXd theta_hat;
    AggregateStats stats;
    bool degenerate = false;  // spread ~0 or no device transmitted; theta_hat = theta_bar * 1
};

/// stats -> normalize -> transmit -> denormalize. Falls back to theta_bar * 1
/// when the spread is degenerate or every device is silent.
AggregationOutcome aggregate_over_the_air(std::span<const Eigen::VectorXd> theta, VecRef power,
                                          VecRef magnitude, double eta, double sigma2,
                                          CounterRng& rng);

}  // namespace otafl
