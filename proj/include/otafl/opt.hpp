#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "otafl/aircomp.hpp"
#include "otafl/channel.hpp"

namespace otafl {

/// Closed-form minimizer of the per-round MSE over eta for fixed powers:
///   eta* = ((sigma2 + sum_k p_k |h_k|^2) / sum_k sqrt(p_k)|h_k|)^2.
/// Throws NoSignalError when every sqrt(p_k)|h_k| is zero.
double optimal_eta(VecRef power, VecRef magnitude, double sigma2);

/// Power that minimizes the Lagrangian for dual mu at one round:
///   min((sqrt(eta)|h| / (|h|^2 + mu*eta))^2, p_max), and 0 when |h| = 0.
/// This is the same expression the structure-mapping layer of the network uses.
double dual_power(double magnitude, double eta, double mu, double p_max);

/// g(mu) = sum_t dual_power(h_t, eta_t, mu, p_max). Non-increasing in mu.
double dual_power_sum(VecRef magnitude, VecRef eta, double mu, double p_max);

/// Bracketing failure: g(0) <= T * p_bar, so the unconstrained branch applies.
class BracketError : public NumericalError {
 public:
    using NumericalError::NumericalError;
};

/// Dual that makes the average constraint tight:
/// returns mu > 0 with T*p_bar - tol <= g(mu) <= T*p_bar.
double bisect_mu(VecRef magnitude, VecRef eta, double p_max, double p_bar, double tol);

struct DevicePowerSolution {
    Eigen::VectorXd power;          // T entries
    double mu = 0.0;                // optimal dual of the average constraint
    bool inversion_branch = false;  // true when the relaxed test passed and mu = 0
};

/// Optimal powers of one device over T rounds for fixed receive factors.
DevicePowerSolution optimal_power_device(VecRef magnitude, VecRef eta, double p_max, double p_bar);

struct SolverOptions {
    double eps0 = 1e-6;
    int max_iter = 200;
    /// Bisection tolerance relative to T * p_bar.
    double bisection_rel_tol = 1e-9;
};

struct OptResult {
    PowerAllocation allocation;
    /// Entry 0 is the objective at the initial powers with their optimal eta;
    /// entry i is the objective after outer iteration i.
    std::vector<double> mse_history;
    int iterations = 0;
    bool converged = false;
    Eigen::VectorXd mu;  // K duals
};

/// Alternating minimization between per-round eta and per-device powers.
/// Starts from p = p_bar unless `initial_power` (K x T) is supplied.
OptResult alternating_optimize(const SystemConfig& cfg, const ChannelTrace& trace,
                               const SolverOptions& options = {},
                               const std::optional<Eigen::MatrixXd>& initial_power = std::nullopt);

/// Residuals of the KKT system of the per-device power problem, all expressed
/// per round (average-power units) so they do not scale with T.
struct KktReport {
    double peak_violation = 0.0;       // max_t max(0, p_t - p_max, -p_t)
    double average_violation = 0.0;    // max(0, mean_t p_t - p_bar)
    double dual_violation = 0.0;       // max(0, -mu)
    double stationarity = 0.0;         // max_t gap to the Lagrangian minimizer
    double complementary_slackness = 0.0;  // |mu * (mean_t p_t - p_bar)|

    double worst() const;
};

KktReport kkt_residuals(VecRef power, double mu, VecRef magnitude, VecRef eta, double p_max,
                        double p_bar);

}  // namespace otafl
