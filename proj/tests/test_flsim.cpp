#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "otafl/flsim.hpp"

using namespace otafl;

namespace {

std::filesystem::path mnist_dir() { return std::filesystem::path(OTAFL_SOURCE_DIR) / "data" / "mnist"; }

std::vector<std::size_t> range(std::size_t a, std::size_t b) {
    std::vector<std::size_t> r(b - a);
    std::iota(r.begin(), r.end(), a);
    return r;
}

struct SmallProblem {
    Dataset all = make_gaussian_mixture(600, 6, 4, 3.0, 2);
    Dataset train = all.subset(range(0, 400));
    Dataset test = all.subset(range(400, 600));
    SoftmaxRegression model{6, 4, 0.01};
    std::vector<std::vector<std::size_t>> partition;

    explicit SmallProblem(int K) {
        CounterRng rng(1, StreamTag::kPartition);
        partition = partition_noniid(train.labels, K, 2 * K, 2, rng);
    }
    FederatedProblem view() const { return {model, train, test, partition}; }
};

void check_model_gradient(const Model& model, const Dataset& data) {
    Eigen::VectorXd w = model.initial_params(3) + 0.1 * Eigen::VectorXd::Ones(model.dim());
    const std::vector<std::size_t> rows = {0, 3, 5, 7, 11};
    const Eigen::VectorXd g = model.gradient(w, data, rows);
    for (Eigen::Index i = 0; i < w.size(); i += 3) {
        const double fd = oracle::central_difference([&] { return model.loss(w, data, rows); }, w(i));
        EXPECT_LE(oracle::relative_error(g(i), fd), 1e-5) << model.tag() << " coordinate " << i;
    }
    const Eigen::MatrixXd per = model.sample_gradients(w, data, rows);
    EXPECT_LE((per.rowwise().mean() - g).cwiseAbs().maxCoeff(), 1e-12);
}

}  // namespace

TEST(Data, LoadsMnistSubset) {
    const Dataset d = load_idx(mnist_dir() / "train-images-idx3-ubyte", mnist_dir() / "train-labels-idx1-ubyte", 300);
    EXPECT_EQ(d.size(), 300u);
    EXPECT_EQ(d.dim(), 784);
    EXPECT_EQ(d.num_classes, 10);
    EXPECT_GE(d.features.minCoeff(), 0.0);
    EXPECT_LE(d.features.maxCoeff(), 1.0);
    EXPECT_GT(d.features.maxCoeff(), 0.9);
    EXPECT_THROW(load_idx(mnist_dir() / "train-labels-idx1-ubyte", mnist_dir() / "train-images-idx3-ubyte"),
                 ConfigError);
}

TEST(Data, GaussianMixtureIsDeterministic) {
    const Dataset a = make_gaussian_mixture(50, 3, 5, 2.0, 9);
    const Dataset b = make_gaussian_mixture(50, 3, 5, 2.0, 9);
    EXPECT_EQ(a.features, b.features);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.labels[i], static_cast<int>(i % 5));
    EXPECT_NE(a.features, make_gaussian_mixture(50, 3, 5, 2.0, 10).features);
}

TEST(Data, CsvRoundTrip) {
    const Dataset a = make_gaussian_mixture(20, 3, 2, 2.0, 1);
    const auto path = std::filesystem::temp_directory_path() / "otafl_ds.csv";
    write_dataset_csv(path, a);
    const Dataset b = read_dataset_csv(path);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_LE((a.features - b.features).cwiseAbs().maxCoeff(), 1e-15);
    std::filesystem::remove(path);
}

TEST(Partition, ShardsCoverDataWithoutOverlap) {
    const Dataset d = make_gaussian_mixture(1000, 2, 10, 2.0, 1);
    CounterRng rng(4, StreamTag::kPartition);
    const auto parts = partition_noniid(d.labels, 5, 10, 2, rng);
    ASSERT_EQ(parts.size(), 5u);
    std::set<std::size_t> seen;
    for (const auto& p : parts) {
        EXPECT_EQ(p.size(), 200u);
        std::set<int> labels;
        for (auto i : p) {
            EXPECT_TRUE(seen.insert(i).second);
            labels.insert(d.labels[i]);
        }
        // two label-sorted shards of 100 cover at most two classes each
        EXPECT_LE(labels.size(), 4u);
    }
    EXPECT_EQ(seen.size(), 1000u);
    CounterRng bad(4, StreamTag::kPartition);
    EXPECT_THROW(partition_noniid(d.labels, 5, 7, 2, bad), ConfigError);
}

TEST(Models, SoftmaxGradient) {
    const Dataset d = make_gaussian_mixture(30, 4, 3, 2.0, 1);
    check_model_gradient(SoftmaxRegression(4, 3, 0.05), d);
}

TEST(Models, MlpGradient) {
    const Dataset d = make_gaussian_mixture(30, 4, 3, 2.0, 1);
    check_model_gradient(Mlp(4, 5, 3, 0.01), d);
}

TEST(Models, SoftmaxSmoothnessBoundHolds) {
    const Dataset d = make_gaussian_mixture(100, 5, 3, 2.0, 1);
    const SoftmaxRegression m(5, 3, 0.01);
    const double L = m.smoothness_bound(d);
    CounterRng rng(1, StreamTag::kMonteCarlo);
    for (int i = 0; i < 1000; ++i) {
        Eigen::VectorXd a(m.dim()), b(m.dim());
        for (Eigen::Index j = 0; j < a.size(); ++j) {
            a(j) = rng.normal();
            b(j) = a(j) + 0.1 * rng.normal();
        }
        EXPECT_LE((m.gradient(a, d) - m.gradient(b, d)).norm(), L * (a - b).norm() * (1 + 1e-9));
    }
}

TEST(Models, FactoryRejectsUnknown) {
    EXPECT_EQ(make_model("softmax", 3, 2)->tag(), "softmax");
    EXPECT_EQ(make_model("mlp", 3, 2)->tag(), "mlp");
    EXPECT_THROW(make_model("resnet", 3, 2), ConfigError);
}

TEST(LocalSgd, FullBatchSingleStepIsGradient) {
    const Dataset d = make_gaussian_mixture(40, 3, 2, 2.0, 1);
    const SoftmaxRegression m(3, 2);
    std::vector<std::size_t> rows(40);
    std::iota(rows.begin(), rows.end(), 0);
    const Eigen::VectorXd w = m.initial_params(1);
    CounterRng rng(1, StreamTag::kLocalSgd);
    const LocalUpdate one = local_sgd(m, w, d, rows, 1, 0.1, 40, rng);
    EXPECT_LE((one.theta - m.gradient(w, d, rows)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((one.final_model - (w - 0.1 * one.theta)).cwiseAbs().maxCoeff(), 1e-12);

    CounterRng rng3(1, StreamTag::kLocalSgd);
    const LocalUpdate three = local_sgd(m, w, d, rows, 3, 0.1, 40, rng3);
    EXPECT_LE((three.final_model - (w - 0.1 * three.theta)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(global_update(w, three.theta, 0.1), w - 0.1 * three.theta);
}

TEST(LocalSgd, DifferenceQuotientMatchesGradientSum) {
    const Dataset d = make_gaussian_mixture(60, 4, 3, 2.0, 5);
    const Mlp m(4, 6, 3);
    std::vector<std::size_t> rows(60);
    std::iota(rows.begin(), rows.end(), 0);
    const Eigen::VectorXd w = m.initial_params(2);
    for (double lambda : {1e-3, 0.1, 2.0}) {
        CounterRng rng(3, StreamTag::kLocalSgd);
        const LocalUpdate u = local_sgd(m, w, d, rows, 4, lambda, 8, rng);
        const Eigen::VectorXd quotient = (w - u.final_model) / lambda;
        EXPECT_LE((quotient - u.theta).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, u.theta.cwiseAbs().maxCoeff()))
            << lambda;
    }
}

TEST(Schemes, NamesRoundTrip) {
    for (Scheme s : all_schemes()) EXPECT_EQ(scheme_from_string(to_string(s)), s);
    EXPECT_EQ(all_schemes().size(), 6u);
    EXPECT_THROW(scheme_from_string("magic"), ConfigError);
}

TEST(Policies, FullPowerAndChannelInversion) {
    const SystemConfig cfg = SystemConfig::from_snr(3, 5, 10.0, 0.1, 1);
    const Eigen::Vector3d h(0.05, 0.5, 1.5);
    const RoundPolicy fp = policy_full_power(cfg, h);
    EXPECT_EQ(fp.power, cfg.p_bar_vec());
    EXPECT_NEAR(fp.eta, optimal_eta(fp.power, h, cfg.sigma2), 1e-15);

    const RoundPolicy ci = policy_channel_inversion(cfg, h);
    const double pb = cfg.p_bar[0];
    // the weakest device falls below the gain threshold and stays silent
    EXPECT_LT(pb * h(0) * h(0), kInversionThreshold);
    EXPECT_EQ(ci.power(0), 0.0);
    EXPECT_FALSE(ci.silent);
    for (int k = 1; k < 3; ++k) {
        EXPECT_LE(ci.power(k), pb + 1e-15);
        EXPECT_NEAR(ci.power(k), std::min(pb, ci.eta / (h(k) * h(k))), 1e-15);
    }
    EXPECT_TRUE(policy_channel_inversion(cfg, Eigen::Vector3d::Zero()).silent);
}

TEST(Training, ErrorFreeIsDeterministicAndLearns) {
    const SmallProblem prob(4);
    FLConfig fl;
    fl.rounds = 20;
    fl.lambda = 0.2;
    fl.scheme = Scheme::kErrorFree;
    const SystemConfig sys = SystemConfig::from_snr(4, 20, 10.0, 0.1, 1);
    const ChannelTrace tr = generate_channels(sys);
    const auto a = run_training(fl, sys, tr, prob.view(), {});
    const auto b = run_training(fl, sys, tr, prob.view(), {});
    ASSERT_EQ(a.rounds.size(), 20u);
    EXPECT_EQ(a.final_model, b.final_model);
    EXPECT_LT(a.rounds.back().train_loss, a.rounds.front().train_loss);
    EXPECT_GT(a.final_accuracy(), 0.6);
    for (const auto& r : a.rounds) {
        EXPECT_EQ(r.mse, 0.0);
        EXPECT_GE(r.chi, 1.0);
    }
}

TEST(Training, OverTheAirSchemesNeedAssets) {
    const SmallProblem prob(4);
    FLConfig fl;
    fl.rounds = 5;
    const SystemConfig sys = SystemConfig::from_snr(4, 5, 10.0, 0.1, 1);
    const ChannelTrace tr = generate_channels(sys);
    for (Scheme s : {Scheme::kAlternatingOpt, Scheme::kKnowledgeGuided, Scheme::kKnowledgeFree}) {
        fl.scheme = s;
        EXPECT_THROW(run_training(fl, sys, tr, prob.view(), {}), ConfigError);
    }
    fl.scheme = Scheme::kFullPower;
    EXPECT_THROW(run_training(fl, sys, generate_channels(4, 3, 1), prob.view(), {}), ConfigError);
}

TEST(Training, OverTheAirApproachesErrorFreeAtHighSnr) {
    const SmallProblem prob(4);
    FLConfig fl;
    fl.rounds = 15;
    fl.lambda = 0.2;
    SystemConfig sys = SystemConfig::from_snr(4, 15, 60.0, 0.1, 1);
    const ChannelTrace tr = generate_channels(sys);
    SchemeAssets assets;
    assets.solution = alternating_optimize(sys, tr);
    fl.scheme = Scheme::kErrorFree;
    const auto ef = run_training(fl, sys, tr, prob.view(), assets);
    fl.scheme = Scheme::kAlternatingOpt;
    const auto ao = run_training(fl, sys, tr, prob.view(), assets);
    EXPECT_LE((ef.final_model - ao.final_model).norm() / ef.final_model.norm(), 5e-2);
    for (const auto& r : ao.rounds) EXPECT_GT(r.mse, 0.0);
}

TEST(Training, RejectsBadConfig) {
    FLConfig fl;
    fl.lambda = 0.0;
    EXPECT_THROW(fl.validate(), ConfigError);
    fl = {};
    fl.phi = 0;
    EXPECT_THROW(fl.validate(), ConfigError);
}

TEST(Training, ErrorFreeMatchesReferenceFedAvg) {
    const SmallProblem prob(4);
    FLConfig fl;
    fl.rounds = 8;
    fl.lambda = 0.1;
    const SystemConfig sys = SystemConfig::from_snr(4, 8, 10.0, 0.1, 1);
    const auto run = run_training(fl, sys, generate_channels(sys), prob.view(), {});

    Eigen::VectorXd w = prob.model.initial_params(fl.seed);
    for (int t = 0; t < fl.rounds; ++t) {
        EXPECT_NEAR(prob.model.loss(w, prob.train), run.rounds[t].train_loss, 1e-10);
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(w.size());
        for (int k = 0; k < 4; ++k) {
            CounterRng rng(fl.seed, StreamTag::kLocalSgd, k, t);
            mean += local_sgd(prob.model, w, prob.train, prob.partition[k], fl.phi, fl.lambda, fl.batch, rng).theta;
        }
        w -= fl.lambda * mean / 4.0;
    }
    EXPECT_LE((w - run.final_model).cwiseAbs().maxCoeff(), 1e-10);
}
