#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "otafl/net.hpp"

using namespace otafl;

namespace {

PowerContext small_context(int K) {
    return PowerContext::from(SystemConfig::from_snr(K, 10, 10.0, 0.1, 1));
}

// ReLU masks plus peak-clamp pattern; finite differences straddling a change are skipped.
std::vector<double> kinks(const NetParams& params, const Eigen::MatrixXd& h) {
    ForwardCache cache;
    const NetOutput out = forward(params, h, true, &cache);
    std::vector<double> sig;
    for (const auto& m : cache.activated_mask) sig.insert(sig.end(), m.data(), m.data() + m.size());
    for (Eigen::Index b = 0; b < out.power.cols(); ++b)
        for (Eigen::Index k = 0; k < out.power.rows(); ++k)
            sig.push_back(out.power(k, b) >= params.context.p_max(k) ? 1.0 : 0.0);
    const Eigen::VectorXd mean_p = out.power.rowwise().mean();
    for (Eigen::Index k = 0; k < mean_p.size(); ++k) sig.push_back(mean_p(k) > params.context.p_bar(k) ? 1.0 : 0.0);
    return sig;
}

void gradient_check(NetMode mode, double gamma) {
    const int K = 4;
    NetParams params = NetParams::init(mode, small_context(K), {8, 6}, 11);
    const ChannelSampler sampler(K, 5);
    const Eigen::MatrixXd h = sampler.draws(0, 16);
    const NetGradients g = backward(params, h, gamma);
    NetGradients gcopy = g;
    auto analytic = gcopy.tensors();
    auto views = trainable_tensors(params);
    ASSERT_EQ(analytic.size(), views.size());
    int checked = 0;
    for (std::size_t i = 0; i < views.size(); ++i) {
        ASSERT_EQ(analytic[i].size(), views[i].values.size()) << views[i].name;
        for (std::size_t j = 0; j < views[i].values.size(); ++j) {
            double& x = views[i].values[j];
            const double step = 1e-6;
            const double saved = x;
            x = saved + step;
            const auto up = kinks(params, h);
            x = saved - step;
            const auto down = kinks(params, h);
            x = saved;
            if (up != down) continue;
            const double fd = oracle::central_difference([&] { return loss(params, h, gamma).total; }, x, step);
            EXPECT_LE(oracle::relative_error(analytic[i][j], fd), 1e-4) << views[i].name << "[" << j << "]";
            ++checked;
        }
    }
    EXPECT_GT(checked, 100);
}

}  // namespace

TEST(StructureMap, Examples) {
    const Eigen::Vector2d h(1.0, 2.0), mu(1.0, 0.0), pmax(3.0, 3.0);
    const Eigen::VectorXd p = structure_map(mu, 1.0, h, pmax);
    EXPECT_DOUBLE_EQ(p(0), 0.25);
    EXPECT_DOUBLE_EQ(p(1), 0.25);
    EXPECT_DOUBLE_EQ(structure_map(Eigen::Vector2d::Zero(), 100.0, Eigen::Vector2d(0.0, 1.0), pmax)(0), 0.0);
    EXPECT_DOUBLE_EQ(structure_map(Eigen::Vector2d::Zero(), 100.0, Eigen::Vector2d(0.0, 1.0), pmax)(1), 3.0);
}

TEST(DefaultScales, MatchDefinitions) {
    const PowerContext ctx = small_context(5);
    const double pb = ctx.p_bar(0);
    const double eta0 = std::pow((ctx.sigma2 + 5 * pb) / (5 * std::sqrt(pb)), 2);
    EXPECT_NEAR(default_eta_scale(ctx), 4.0 * eta0, 1e-12);
    EXPECT_NEAR(default_mu_scale(ctx), 10.0 / pb, 1e-12);
}

TEST(Network, ShapesAndParameterCount) {
    const int K = 20;
    const NetParams params = NetParams::init(NetMode::kKnowledgeGuided, small_context(K), {256, 64}, 1);
    EXPECT_EQ(params.hidden_layers(), 2);
    EXPECT_EQ(params.parameter_count(),
              static_cast<std::size_t>(K * 256 + 256 + 2 * 256 + 256 * 64 + 64 + 2 * 64 + 64 * (K + 1) + K + 1));
    const NetOutput out = forward(params, ChannelSampler(K, 2).draws(0, 7), false);
    EXPECT_EQ(out.power.rows(), K);
    EXPECT_EQ(out.power.cols(), 7);
    EXPECT_EQ(out.eta.size(), 7);
    EXPECT_TRUE((out.sigmoid.array() > 0.0).all() && (out.sigmoid.array() < 1.0).all());
    EXPECT_TRUE((out.eta.array() > 0.0).all());
}

TEST(Network, GuidedOutputsRespectStructureAndPeak) {
    const int K = 6;
    const NetParams params = NetParams::init(NetMode::kKnowledgeGuided, small_context(K), {16, 8}, 3);
    const Eigen::MatrixXd h = ChannelSampler(K, 4).draws(0, 32);
    const NetOutput out = forward(params, h, false);
    for (Eigen::Index b = 0; b < h.cols(); ++b) {
        const Eigen::VectorXd expect = structure_map(out.mu.col(b), out.eta(b), h.col(b), params.context.p_max);
        EXPECT_LE((expect - out.power.col(b)).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_NEAR(out.eta(b), params.eta_scale * out.sigmoid(K, b), 1e-12);
    }
    EXPECT_TRUE((out.power.array() <= params.context.p_max.maxCoeff() + 1e-12).all());
}

TEST(Network, KnowledgeFreeHead) {
    const int K = 5;
    const NetParams params = NetParams::init(NetMode::kKnowledgeFree, small_context(K), {16, 8}, 3);
    const Eigen::VectorXd h = ChannelSampler(K, 4).draw(0);
    const auto d = forward_knowledge_free(params, h);
    const NetOutput out = forward(params, h, false);
    for (int k = 0; k < K; ++k) EXPECT_NEAR(d.power(k), params.context.p_bar(k) * out.sigmoid(k, 0), 1e-12);
    EXPECT_NEAR(d.eta, params.eta_scale * out.sigmoid(K, 0), 1e-12);
    EXPECT_THROW(forward_knowledge_free(NetParams::init(NetMode::kKnowledgeGuided, small_context(K), {4}, 1), h),
                 ConfigError);
}

TEST(Network, BatchNormTrainVersusEval) {
    const int K = 4;
    NetParams params = NetParams::init(NetMode::kKnowledgeGuided, small_context(K), {8}, 1);
    const Eigen::MatrixXd h = ChannelSampler(K, 9).draws(0, 64);
    ForwardCache cache;
    forward(params, h, true, &cache);
    // normalized pre-activations have zero batch mean and unit variance
    const Eigen::MatrixXd& xh = cache.xhat[0];
    EXPECT_LE(xh.rowwise().mean().cwiseAbs().maxCoeff(), 1e-10);
    const Eigen::VectorXd var = (xh.colwise() - xh.rowwise().mean()).array().square().rowwise().mean();
    EXPECT_LE((var.array() - 1.0).abs().maxCoeff(), 1e-3);

    const Eigen::VectorXd before = params.norms[0].running_mean;
    update_running_stats(params, cache);
    const Eigen::VectorXd expect = 0.9 * before + 0.1 * cache.batch_mean[0];
    EXPECT_LE((params.norms[0].running_mean - expect).cwiseAbs().maxCoeff(), 1e-12);

    // a single draw in inference mode depends only on running statistics
    const NetOutput a = forward(params, h.col(0), false);
    const NetOutput b = forward(params, h.leftCols(3), false);
    EXPECT_LE((a.power.col(0) - b.power.col(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Network, GradientMatchesFiniteDifferencesGuided) { gradient_check(NetMode::kKnowledgeGuided, 10.0); }
TEST(Network, GradientMatchesFiniteDifferencesFree) { gradient_check(NetMode::kKnowledgeFree, 10.0); }

TEST(Network, PenaltyOnlyCountsExcessPower) {
    const int K = 3;
    const NetParams params = NetParams::init(NetMode::kKnowledgeFree, small_context(K), {4}, 2);
    const Eigen::MatrixXd h = ChannelSampler(K, 1).draws(0, 10);
    const auto l = loss(params, h, 10.0, false);
    // knowledge-free powers never exceed p_bar, so there is nothing to penalize
    EXPECT_EQ(l.penalty, 0.0);
    EXPECT_NEAR(l.total, l.mse, 1e-15);
}

TEST(Network, SaveLoadRoundTrip) {
    const NetParams params = NetParams::init(NetMode::kKnowledgeGuided, small_context(5), {12, 7}, 8);
    const auto path = std::filesystem::temp_directory_path() / "otafl_test_net.bin";
    save_params(path, params);
    const NetParams back = load_params(path);
    EXPECT_EQ(back.mode, params.mode);
    EXPECT_EQ(back.parameter_count(), params.parameter_count());
    EXPECT_EQ(back.mu_scale, params.mu_scale);
    EXPECT_EQ(back.eta_scale, params.eta_scale);
    const Eigen::MatrixXd h = ChannelSampler(5, 3).draws(0, 4);
    EXPECT_EQ(forward(back, h, false).power, forward(params, h, false).power);
    std::filesystem::remove(path);

    const auto bad = std::filesystem::temp_directory_path() / "otafl_bad_net.bin";
    { std::ofstream(bad) << "not a network"; }
    EXPECT_THROW(load_params(bad), ConfigError);
    std::filesystem::remove(bad);
}

TEST(Network, CompiledMatchesReference) {
    for (NetMode mode : {NetMode::kKnowledgeGuided, NetMode::kKnowledgeFree}) {
        NetParams params = NetParams::init(mode, small_context(6), {32, 16}, 4);
        // non-trivial running statistics
        ForwardCache cache;
        forward(params, ChannelSampler(6, 1).draws(0, 64), true, &cache);
        update_running_stats(params, cache);
        const Eigen::MatrixXd h = ChannelSampler(6, 2).draws(0, 50);
        const PowerAllocation fast = CompiledNet(params).decide_trace(h);
        const NetOutput ref = forward(params, h, false);
        EXPECT_LE((fast.power - ref.power).cwiseAbs().maxCoeff(), 1e-4);
        EXPECT_LE((fast.eta.transpose() - ref.eta).cwiseAbs().maxCoeff() / ref.eta.maxCoeff(), 1e-5);
    }
}

TEST(Training, ReducesLossAndIsDeterministic) {
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.pool_size = 2000;
    cfg.hidden = {32, 16};
    cfg.learning_rate = 1e-2;
    const PowerContext ctx = small_context(5);
    const ChannelSampler sampler(5, 3);
    const auto a = train(cfg, ctx, sampler);
    const auto b = train(cfg, ctx, sampler);
    ASSERT_EQ(a.log.size(), 4u);
    EXPECT_LT(a.log.back().heldout_mse, a.log.front().heldout_mse * 1.5);
    EXPECT_EQ(a.log.back().loss, b.log.back().loss);
    const Eigen::MatrixXd h = heldout_draws(sampler, cfg.pool_size);
    EXPECT_EQ(h.cols(), 200);
    EXPECT_EQ(training_draws(sampler, cfg.pool_size).cols(), 1800);
    EXPECT_EQ(forward(a.params, h, false).power, forward(b.params, h, false).power);
}

TEST(Training, RejectsBadConfig) {
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Feasibility, BatchCheck) {
    Eigen::MatrixXd p(2, 2);
    p << 1.0, 1.2, 0.5, 0.5;
    EXPECT_TRUE(batch_feasible(p, Eigen::Vector2d(1.1, 0.5)));
    EXPECT_FALSE(batch_feasible(p, Eigen::Vector2d(1.0, 0.5)));
}

TEST(Training, KnowledgeFreeDoesNotBeatGuided) {
    const PowerContext ctx = small_context(5);
    std::vector<double> gap;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        TrainConfig cfg;
        cfg.epochs = 30;
        cfg.pool_size = 5000;
        cfg.learning_rate = 1e-2;
        cfg.final_learning_rate = 1e-4;
        cfg.seed = seed;
        const ChannelSampler sampler(5, seed);
        const Eigen::MatrixXd held = heldout_draws(sampler, cfg.pool_size);
        cfg.mode = NetMode::kKnowledgeGuided;
        const double guided = evaluate_feasibility(train(cfg, ctx, sampler).params, held, 100).mean_mse;
        cfg.mode = NetMode::kKnowledgeFree;
        const double free = evaluate_feasibility(train(cfg, ctx, sampler).params, held, 100).mean_mse;
        gap.push_back(free - guided);
    }
    std::sort(gap.begin(), gap.end());
    EXPECT_GE(gap[2], 0.0);
}
