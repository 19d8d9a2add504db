#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "otafl/aircomp.hpp"
#include "otafl/channel.hpp"
#include "otafl/net.hpp"
#include "otafl/opt.hpp"

namespace otafl {

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct Dataset {
    Eigen::MatrixXd features;  // one row per sample
    std::vector<int> labels;
    int num_classes = 0;

    std::size_t size() const { return labels.size(); }
    int dim() const { return static_cast<int>(features.cols()); }
    /// Rows `indices` in order.
    Dataset subset(std::span<const std::size_t> indices) const;
};

/// IDX image/label pair (MNIST layout); pixels scaled to [0, 1]. `limit` = 0 reads all.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t limit = 0);

/// Gaussian mixture with one isotropic cluster per class; class means drawn on
/// a sphere of radius `separation`.
Dataset make_gaussian_mixture(std::size_t n, int dim, int classes, double separation,
                              std::uint64_t seed);

/// CSV: label,x0,x1,...; first line is a header.
void write_dataset_csv(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset_csv(const std::filesystem::path& path);

/// Label-sorted shards, `shards_per_device` random shards per device without
/// replacement. Requires |data| divisible by n_shards and n_shards = K * shards_per_device.
std::vector<std::vector<std::size_t>> partition_noniid(std::span<const int> labels, int K,
                                                       int n_shards, int shards_per_device,
                                                       CounterRng& rng);

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// Differentiable classifier with a flat parameter vector.
class Model {
 public:
    virtual ~Model() = default;
    virtual Eigen::Index dim() const = 0;
    virtual Eigen::VectorXd initial_params(std::uint64_t seed) const = 0;
    /// Mean loss over `rows` (all rows when empty).
    virtual double loss(const Eigen::VectorXd& w, const Dataset& data,
                        std::span<const std::size_t> rows = {}) const = 0;
    /// Mean gradient over `rows` (all rows when empty).
    virtual Eigen::VectorXd gradient(const Eigen::VectorXd& w, const Dataset& data,
                                     std::span<const std::size_t> rows = {}) const = 0;
    /// Per-sample gradients as columns (used for exact mini-batch variance).
    virtual Eigen::MatrixXd sample_gradients(const Eigen::VectorXd& w, const Dataset& data,
                                             std::span<const std::size_t> rows) const = 0;
    virtual double accuracy(const Eigen::VectorXd& w, const Dataset& data) const = 0;
    virtual std::string tag() const = 0;
};

/// Multinomial logistic regression, W is C x (d + 1) with the bias in the last
/// column, plus optional L2 weight decay (which makes the loss strongly convex).
class SoftmaxRegression final : public Model {
 public:
    SoftmaxRegression(int input_dim, int classes, double l2 = 0.0);

    Eigen::Index dim() const override { return static_cast<Eigen::Index>(classes_) * (input_dim_ + 1); }
    Eigen::VectorXd initial_params(std::uint64_t seed) const override;
    double loss(const Eigen::VectorXd& w, const Dataset& data,
                std::span<const std::size_t> rows = {}) const override;
    Eigen::VectorXd gradient(const Eigen::VectorXd& w, const Dataset& data,
                             std::span<const std::size_t> rows = {}) const override;
    Eigen::MatrixXd sample_gradients(const Eigen::VectorXd& w, const Dataset& data,
                                     std::span<const std::size_t> rows) const override;
    double accuracy(const Eigen::VectorXd& w, const Dataset& data) const override;
    std::string tag() const override { return "softmax"; }

    double l2() const { return l2_; }
    /// Smoothness constant: 0.5 * lambda_max(X~^T X~ / n) + l2 for the rows given.
    double smoothness_bound(const Dataset& data, std::span<const std::size_t> rows = {}) const;

 private:
    int input_dim_;
    int classes_;
    double l2_;
};

/// One-hidden-layer tanh MLP with a softmax head (non-convex option).
class Mlp final : public Model {
 public:
    Mlp(int input_dim, int hidden, int classes, double l2 = 0.0);

    Eigen::Index dim() const override;
    Eigen::VectorXd initial_params(std::uint64_t seed) const override;
    double loss(const Eigen::VectorXd& w, const Dataset& data,
                std::span<const std::size_t> rows = {}) const override;
    Eigen::VectorXd gradient(const Eigen::VectorXd& w, const Dataset& data,
                             std::span<const std::size_t> rows = {}) const override;
    Eigen::MatrixXd sample_gradients(const Eigen::VectorXd& w, const Dataset& data,
                                     std::span<const std::size_t> rows) const override;
    double accuracy(const Eigen::VectorXd& w, const Dataset& data) const override;
    std::string tag() const override { return "mlp"; }

 private:
    int input_dim_;
    int hidden_;
    int classes_;
    double l2_;
};

std::unique_ptr<Model> make_model(const std::string& tag, int input_dim, int classes,
                                  double l2 = 0.0, int hidden = 64);

// ---------------------------------------------------------------------------
// Federated learning
// ---------------------------------------------------------------------------

struct LocalUpdate {
    Eigen::VectorXd theta;        // accumulated gradient: sum of the phi mini-batch gradients
    Eigen::VectorXd final_model;  // w_k(t, phi)
};

/// phi mini-batch SGD steps from w_global on the device's rows. Mini-batches of
/// size B are drawn without replacement within a step (uniformly with
/// replacement across steps) from rng.
LocalUpdate local_sgd(const Model& model, const Eigen::VectorXd& w_global, const Dataset& data,
                      std::span<const std::size_t> rows, int phi, double lambda, int batch,
                      CounterRng& rng);

/// w - lambda * theta_hat.
Eigen::VectorXd global_update(const Eigen::VectorXd& w, const Eigen::VectorXd& theta_hat,
                              double lambda);

enum class Scheme {
    kErrorFree,
    kAlternatingOpt,
    kKnowledgeGuided,
    kKnowledgeFree,
    kFullPower,
    kChannelInversion,
};

std::string to_string(Scheme s);
Scheme scheme_from_string(const std::string& name);
std::vector<Scheme> all_schemes();

/// Power and receive factor chosen for one round.
struct RoundPolicy {
    Eigen::VectorXd power;
    double eta = 1.0;
    bool silent = false;  // no device transmits
};

/// Every device at its average budget, eta optimal for those powers.
RoundPolicy policy_full_power(const SystemConfig& cfg, VecRef magnitude);

/// Truncated channel inversion: devices with p_bar|h|^2 < eps_c stay silent.
constexpr double kInversionThreshold = 0.1;
RoundPolicy policy_channel_inversion(const SystemConfig& cfg, VecRef magnitude,
                                     double threshold = kInversionThreshold);

struct DatasetSpec {
    std::string name = "mnist";  // "mnist" or "gaussian"
    std::filesystem::path path = "data/mnist";
    std::size_t train_size = 4000;
    std::size_t test_size = 1000;
    int shards_per_device = 2;
    // gaussian mixture only
    int dim = 10;
    int classes = 10;
    double separation = 3.0;
    std::uint64_t seed = 7;
};

struct FLConfig {
    int phi = 3;
    double lambda = 0.05;
    int batch = 20;
    int rounds = 100;
    Scheme scheme = Scheme::kErrorFree;
    std::string model = "softmax";
    double l2 = 0.0;
    int hidden = 64;
    std::uint64_t seed = 1;
    /// Compute the full-batch gradient norm and chi every round.
    bool track_gradients = true;

    void validate() const;
};

struct RoundMetrics {
    int round = 0;
    double train_loss = 0.0;    // F(w(t)) before the update
    double test_accuracy = 0.0; // after the update
    double mse = 0.0;           // instantaneous MSE of the round's (p, eta)
    double grad_norm_sq = 0.0;  // || grad F(w(t)) ||^2
    double chi = 0.0;           // heterogeneity of the local full gradients at w(t)
    double max_variance = 0.0;  // max_k pi_k^2 this round
    bool degenerate = false;
};

/// Precomputed transceiver assets required by some schemes.
struct SchemeAssets {
    std::optional<OptResult> solution;      // alternating_opt, solved over the whole trace
    std::optional<NetParams> guided_net;    // knowledge_guided
    std::optional<NetParams> free_net;      // knowledge_free
};

struct FederatedProblem {
    const Model& model;
    const Dataset& train;
    const Dataset& test;
    std::vector<std::vector<std::size_t>> partition;
};

struct TrainingRun {
    std::vector<RoundMetrics> rounds;
    Eigen::VectorXd final_model;
    double final_accuracy() const { return rounds.empty() ? 0.0 : rounds.back().test_accuracy; }
};

/// The over-the-air FedAvg loop: local SGD on every device, then the scheme's
/// (p, eta), analog aggregation, de-normalization and the global step.
TrainingRun run_training(const FLConfig& fl, const SystemConfig& sys, const ChannelTrace& trace,
                         const FederatedProblem& problem, const SchemeAssets& assets);

/// Local full-batch gradients of every device at w.
std::vector<Eigen::VectorXd> local_gradients(const Model& model, const Eigen::VectorXd& w,
                                             const FederatedProblem& problem);

}  // namespace otafl
