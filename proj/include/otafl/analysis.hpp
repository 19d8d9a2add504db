#pragma once

#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "otafl/aircomp.hpp"
#include "otafl/flsim.hpp"

namespace otafl {

/// Heterogeneity of local gradients: mean squared norm over squared norm of the mean.
struct ChiValue {
    double value = std::numeric_limits<double>::infinity();
    bool defined = false;  // false when the mean gradient vanishes
};
ChiValue heterogeneity_chi(std::span<const Eigen::VectorXd> local_grads);

/// phi^2 L^2 lambda^2 chi + 2 phi lambda L <= 1.
bool check_condition(double lambda, int phi, double L, double chi);

struct BoundInputs {
    double F0 = 0.0;
    double F_star = 0.0;
    double L = 0.0;
    double xi2 = 0.0;
    double Gamma = 0.0;
    double chi = 1.0;
    double lambda = 0.0;
    int phi = 2;
    int K = 1;
    int T = 1;
    Eigen::Index N = 1;
    std::vector<double> mse_trace;

    void validate() const;
};

struct BoundTerms {
    double total = 0.0;
    double term_initial = 0.0;
    double term_variance = 0.0;
    double term_mse = 0.0;
};

/// Time-average squared gradient norm bound. Requires phi >= 2; throws
/// ConfigError when the step-size condition does not hold.
BoundTerms theorem1_bound(const BoundInputs& in);

struct ConstantsConfig {
    FLConfig fl;                  // phi, lambda, batch and seed of the calibration run
    int calibration_rounds = 40;
    double gamma_safety = 2.0;    // Gamma = safety * max observed pi_k^2
    double xi_safety = 1.5;       // xi2 = safety * max mini-batch variance
    int descent_iters = 4000;     // full-batch gradient descent for F*
};

struct EstimatedConstants {
    double L = 0.0;
    double xi2 = 0.0;
    double Gamma = 0.0;
    double F_star = 0.0;
    bool L_analytic = false;  // closed form (softmax) vs. curvature probing
};

/// Exact variance of a size-B mini-batch mean (sampling without replacement) of
/// the per-sample gradients given as columns.
double minibatch_variance(const Eigen::MatrixXd& sample_grads, int batch);

/// L, xi^2, Gamma and F* from the problem itself. The calibration run is an
/// error-free FedAvg run seeded from the calibration stream.
EstimatedConstants estimate_constants(const Model& model, const FederatedProblem& problem,
                                      const ConstantsConfig& cfg);

/// Inputs for the bound from a finished run and estimated constants; chi is the
/// running max of the per-round values.
BoundInputs bound_inputs_from_run(const TrainingRun& run, const EstimatedConstants& c,
                                  const FLConfig& fl, int K, Eigen::Index N);

/// Empirical (1/T) sum ||grad F(w(t))||^2 of a run.
double empirical_grad_norm(const TrainingRun& run);

struct Lemma4Report {
    double estimate = 0.0;     // Monte-Carlo E||e||^2
    double std_error = 0.0;
    double closed_form = 0.0;  // exact expectation over the receiver noise
    double bound = 0.0;        // N Gamma (K+1)/K^2 MSE
    double mse = 0.0;
    double Gamma = 0.0;
    bool holds = false;        // estimate <= bound + 3 SE
};

/// Aggregation error e = (pi/K)(s_hat - s) over n_draws noise realisations for
/// the given payload, against the MSE-based bound with Gamma = max_k pi_k^2.
Lemma4Report lemma4_check(VecRef power, VecRef magnitude, double eta, double sigma2,
                          std::span<const Eigen::VectorXd> payload, int n_draws,
                          std::uint64_t seed = 0);

nlohmann::json bound_report_json(const BoundInputs& in, const BoundTerms& terms,
                                 const EstimatedConstants& c, bool condition);

}  // namespace otafl
