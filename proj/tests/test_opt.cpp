#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "otafl/flsim.hpp"
#include "otafl/opt.hpp"

using namespace otafl;

namespace {

std::vector<double> as_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

TEST(OptimalEta, Examples) {
    EXPECT_DOUBLE_EQ(optimal_eta(Eigen::VectorXd::Ones(1), Eigen::VectorXd::Ones(1), 0.0), 1.0);
    EXPECT_EQ(instantaneous_mse(Eigen::VectorXd::Ones(1), Eigen::VectorXd::Ones(1), 1.0, 0.0), 0.0);
    const Eigen::Vector2d p(1, 1), h(1, 2);
    EXPECT_NEAR(optimal_eta(p, h, 0.1), 2.89, 1e-12);
    EXPECT_THROW(optimal_eta(Eigen::Vector2d::Zero(), h, 0.1), NoSignalError);
    EXPECT_THROW(optimal_eta(p, Eigen::Vector2d::Zero(), 0.1), NoSignalError);
}

TEST(OptimalEta, MatchesGridAndRandomProbes) {
    CounterRng rng(1, StreamTag::kMonteCarlo);
    for (int trial = 0; trial < 20; ++trial) {
        const int K = 1 + static_cast<int>(rng.index(20));
        Eigen::VectorXd p(K), h(K);
        for (int k = 0; k < K; ++k) {
            p(k) = 3.0 * rng.uniform();
            h(k) = std::abs(rng.normal());
        }
        const double eta = optimal_eta(p, h, 0.1);
        const double best = instantaneous_mse(p, h, eta, 0.1);
        const auto grid = oracle::grid_eta(p, h, 0.1);
        EXPECT_LE(std::abs(best - grid.objective) / grid.objective, 1e-6);
        for (int i = 0; i < 50; ++i) EXPECT_LE(best, instantaneous_mse(p, h, 10.0 * rng.uniform(), 0.1) + 1e-12);
    }
}

TEST(DualPower, StructureAndMonotonicity) {
    EXPECT_DOUBLE_EQ(dual_power(1.0, 1.0, 1.0, 3.0), 0.25);
    EXPECT_DOUBLE_EQ(dual_power(0.5, 1.0, 0.0, 3.0), 3.0);
    EXPECT_DOUBLE_EQ(dual_power(2.0, 1.0, 0.0, 3.0), 0.25);
    EXPECT_EQ(dual_power(0.0, 1.0, 0.5, 3.0), 0.0);
    double last = dual_power(0.7, 1.3, 0.0, 1e9);
    for (double mu = 0.01; mu < 1e6; mu *= 3) {
        const double v = dual_power(0.7, 1.3, mu, 1e9);
        EXPECT_LE(v, last);
        last = v;
    }
    EXPECT_LT(last, 1e-10);
}

TEST(PowerDevice, InversionBranchWhenBudgetIsLarge) {
    const Eigen::Vector3d h(0.5, 1.0, 2.0), eta(1.0, 2.0, 0.5);
    const auto sol = optimal_power_device(h, eta, 1e9, 1e6);
    EXPECT_TRUE(sol.inversion_branch);
    EXPECT_EQ(sol.mu, 0.0);
    for (int t = 0; t < 3; ++t) EXPECT_DOUBLE_EQ(sol.power(t), eta(t) / (h(t) * h(t)));
}

TEST(PowerDevice, DualBranchMatchesBruteForce) {
    const Eigen::Vector3d h(0.5, 1.0, 2.0), eta(1.0, 1.0, 1.0);
    // min(eta/h^2, p_max) sums to 3 + 1 + 0.25 = 4.25 > 3, so the dual branch fires.
    EXPECT_NEAR(dual_power_sum(h, eta, 0.0, 3.0), 4.25, 1e-15);
    const auto sol = optimal_power_device(h, eta, 3.0, 1.0);
    EXPECT_FALSE(sol.inversion_branch);
    EXPECT_GT(sol.mu, 0.0);
    EXPECT_NEAR(sol.power.sum(), 3.0, 3e-9);
    const auto brute = oracle::brute_force_power(as_std(h), as_std(eta), 3.0, 1.0);
    for (int t = 0; t < 3; ++t) EXPECT_NEAR(sol.power(t), brute[t], 1e-3);
    EXPECT_LE(oracle::device_objective(as_std(sol.power), as_std(h), as_std(eta)),
              oracle::device_objective(brute, as_std(h), as_std(eta)) + 1e-9);
}

TEST(PowerDevice, BeatsRandomFeasibleProbes) {
    CounterRng rng(2, StreamTag::kMonteCarlo);
    const int T = 6;
    Eigen::VectorXd h(T), eta(T);
    for (int t = 0; t < T; ++t) {
        h(t) = 0.1 + 2.0 * rng.uniform();
        eta(t) = 0.5 + 2.0 * rng.uniform();
    }
    const auto sol = optimal_power_device(h, eta, 3.0, 1.0);
    const double best = oracle::device_objective(as_std(sol.power), as_std(h), as_std(eta));
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> p(T);
        double s = 0;
        for (auto& v : p) {
            v = 3.0 * rng.uniform();
            s += v;
        }
        if (s > T * 1.0)
            for (auto& v : p) v *= T / s;
        EXPECT_LE(best, oracle::device_objective(p, as_std(h), as_std(eta)) + 1e-12);
    }
}

TEST(Bisection, BracketsAndAgreesWithSecant) {
    CounterRng rng(3, StreamTag::kMonteCarlo);
    for (int trial = 0; trial < 20; ++trial) {
        const int T = 20;
        Eigen::VectorXd h(T), eta(T);
        for (int t = 0; t < T; ++t) {
            h(t) = 0.05 + std::abs(rng.normal());
            eta(t) = 0.5 + 3.0 * rng.uniform();
        }
        if (dual_power_sum(h, eta, 0.0, 3.0) <= T) continue;
        const double tol = 1e-9 * T;
        const double mu = bisect_mu(h, eta, 3.0, 1.0, tol);
        EXPECT_LE(std::abs(dual_power_sum(h, eta, mu, 3.0) - T), tol);
        EXPECT_LE(dual_power_sum(h, eta, mu, 3.0), T);
        const double ref = oracle::secant_root([&](double m) { return dual_power_sum(h, eta, m, 3.0) - T; }, 0.0,
                                               1e4);
        EXPECT_NEAR(mu, ref, 1e-8 * std::max(1.0, ref));
    }
    EXPECT_THROW(bisect_mu(Eigen::Vector2d(2, 2), Eigen::Vector2d(1, 1), 3.0, 1.0, 1e-9), BracketError);
}

TEST(Kkt, ResidualsOfSolverOutputAreTiny) {
    CounterRng rng(4, StreamTag::kMonteCarlo);
    const int T = 500;
    Eigen::VectorXd h(T), eta(T);
    for (int t = 0; t < T; ++t) {
        h(t) = std::abs(std::complex<double>(rng.normal(), rng.normal())) / std::sqrt(2.0);
        eta(t) = 0.5 + 2.0 * rng.uniform();
    }
    const auto sol = optimal_power_device(h, eta, 3.0, 1.0);
    EXPECT_LE(kkt_residuals(sol.power, sol.mu, h, eta, 3.0, 1.0).worst(), 1e-7);

    Eigen::VectorXd bumped = sol.power;
    Eigen::Index t = 0;
    for (; t < T; ++t)
        if (bumped(t) < 2.5 && bumped(t) > 0.05) break;
    bumped(t) *= 1.01;
    EXPECT_GT(kkt_residuals(bumped, sol.mu, h, eta, 3.0, 1.0).stationarity, 1e-4);

    const auto inv = optimal_power_device(h, eta, 3.0, 1e6);
    const auto r = kkt_residuals(inv.power, inv.mu, h, eta, 3.0, 1e6);
    EXPECT_EQ(r.complementary_slackness, 0.0);
    EXPECT_LE(r.worst(), 1e-12);
}

TEST(Alternating, SingleDeviceSpendsTheWholeBudget) {
    // one device, one round: more power always helps, so p = p_bar and eta is the closed form
    SystemConfig cfg = SystemConfig::from_snr(1, 1, 10.0, 0.1, 1);
    const ChannelTrace tr(Eigen::MatrixXd::Constant(1, 1, 0.8), Eigen::MatrixXd::Zero(1, 1));
    const auto r = alternating_optimize(cfg, tr);
    EXPECT_TRUE(r.converged);
    EXPECT_NEAR(r.allocation.power(0, 0), cfg.p_bar[0], 1e-6);
    EXPECT_NEAR(r.allocation.eta(0), optimal_eta(r.allocation.power.col(0), tr.magnitudes().col(0), 0.1), 1e-12);
    const double p = cfg.p_bar[0];
    const double a = std::sqrt(p) * 0.8;
    EXPECT_NEAR(r.mse_history.back(), 0.1 / (a * a + 0.1), 1e-6);
}

TEST(Alternating, MonotoneFeasibleAndBetterThanFullPower) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto cfg = SystemConfig::from_snr(20, 200, 10.0, 0.1, seed);
        const ChannelTrace tr = generate_channels(cfg);
        const auto r = alternating_optimize(cfg, tr);
        for (std::size_t i = 1; i < r.mse_history.size(); ++i) EXPECT_LE(r.mse_history[i], r.mse_history[i - 1]);
        EXPECT_LE(r.allocation.max_violation(cfg), 1e-9);
        EXPECT_TRUE((r.mu.array() >= 0.0).all());
        EXPECT_NEAR(r.mse_history.back(), time_average_mse(r.allocation, tr, cfg.sigma2), 1e-9);

        double full = 0.0;
        for (int t = 0; t < cfg.T; ++t) {
            const auto pol = policy_full_power(cfg, tr.magnitudes().col(t));
            full += instantaneous_mse(pol.power, tr.magnitudes().col(t), pol.eta, cfg.sigma2);
        }
        EXPECT_LT(r.mse_history.back(), full);
    }
}

TEST(Alternating, MaxIterExhaustionIsFlagged) {
    const auto cfg = SystemConfig::from_snr(5, 30, 10.0, 0.1, 3);
    SolverOptions opt;
    opt.max_iter = 2;
    opt.eps0 = 1e-15;
    const auto r = alternating_optimize(cfg, generate_channels(cfg), opt);
    EXPECT_FALSE(r.converged);
    EXPECT_EQ(r.iterations, 2);
    EXPECT_LE(r.allocation.max_violation(cfg), 1e-9);
}

TEST(Alternating, InfiniteToleranceStopsAfterOneIteration) {
    const auto cfg = SystemConfig::from_snr(5, 30, 10.0, 0.1, 3);
    SolverOptions opt;
    opt.eps0 = std::numeric_limits<double>::infinity();
    const auto r = alternating_optimize(cfg, generate_channels(cfg), opt);
    EXPECT_EQ(r.iterations, 1);
    EXPECT_TRUE(r.converged);
}

TEST(Alternating, NullChannelsGetNoPower) {
    auto cfg = SystemConfig::from_snr(2, 3, 10.0, 0.1, 1);
    Eigen::MatrixXd mag(2, 3);
    mag << 0.0, 1.0, 0.5, 1.2, 0.0, 0.9;
    const auto r = alternating_optimize(cfg, ChannelTrace(mag, Eigen::MatrixXd::Zero(2, 3)));
    EXPECT_EQ(r.allocation.power(0, 0), 0.0);
    EXPECT_EQ(r.allocation.power(1, 1), 0.0);
    EXPECT_LE(r.allocation.max_violation(cfg), 1e-9);
}

TEST(Alternating, RejectsMismatchedTrace) {
    const auto cfg = SystemConfig::from_snr(3, 4, 10.0, 0.1, 1);
    EXPECT_THROW(alternating_optimize(cfg, generate_channels(2, 4, 1)), ConfigError);
}
