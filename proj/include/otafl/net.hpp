#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "otafl/aircomp.hpp"
#include "otafl/channel.hpp"

namespace otafl {

enum class NetMode { kKnowledgeGuided, kKnowledgeFree };

std::string to_string(NetMode mode);
NetMode net_mode_from_string(const std::string& name);

struct DenseLayer {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;    // out
};

struct BatchNormState {
    Eigen::VectorXd gamma;
    Eigen::VectorXd beta;
    Eigen::VectorXd running_mean;
    Eigen::VectorXd running_var;
    double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
    double epsilon = 1e-5;
};

/// Budgets and noise level the network was built for.
struct PowerContext {
    Eigen::VectorXd p_bar;
    Eigen::VectorXd p_max;
    double sigma2 = 0.1;

    static PowerContext from(const SystemConfig& cfg);
};

/// Default output de-normalizers. eta_scale is four times the optimal receive
/// factor at p = p_bar with unit channel gains; mu_scale = 10 / mean(p_bar).
double default_eta_scale(const PowerContext& ctx);
double default_mu_scale(const PowerContext& ctx);

struct NetParams {
    NetMode mode = NetMode::kKnowledgeGuided;
    std::vector<DenseLayer> layers;     // hidden layers followed by the output layer
    std::vector<BatchNormState> norms;  // one per hidden layer
    double mu_scale = 1.0;
    double eta_scale = 1.0;
    PowerContext context;

    int devices() const { return static_cast<int>(context.p_bar.size()); }
    int hidden_layers() const { return static_cast<int>(norms.size()); }
    std::size_t parameter_count() const;

    /// Glorot-uniform weights, zero biases, BN gamma = 1 and beta = 0.
    static NetParams init(NetMode mode, const PowerContext& ctx, std::vector<int> hidden,
                          std::uint64_t seed);
};

/// Named view of one trainable tensor. Order is stable: for every hidden layer
/// d: W_d, b_d, gamma_d, beta_d; then W_out, b_out.
struct TensorView {
    std::string name;
    std::span<double> values;
};
std::vector<TensorView> trainable_tensors(NetParams& params);

/// Gradients with exactly the same layout as NetParams' trainable tensors.
struct NetGradients {
    std::vector<Eigen::MatrixXd> weight;
    std::vector<Eigen::VectorXd> bias;
    std::vector<Eigen::VectorXd> gamma;
    std::vector<Eigen::VectorXd> beta;

    std::vector<std::span<double>> tensors();
};

/// p_k = min((sqrt(eta)|h_k| / (|h_k|^2 + mu_k eta))^2, p_max_k); 0 when |h_k| = 0.
Eigen::VectorXd structure_map(VecRef mu, double eta, VecRef magnitude, VecRef p_max);

/// Batched network output; column b belongs to channel draw b.
struct NetOutput {
    Eigen::MatrixXd mu;        // K x B (knowledge-guided only; zero otherwise)
    Eigen::RowVectorXd eta;    // B
    Eigen::MatrixXd power;     // K x B
    Eigen::MatrixXd sigmoid;   // (K+1) x B raw output layer
};

/// Intermediate values kept for backprop.
struct ForwardCache {
    std::vector<Eigen::MatrixXd> input;   // z_{d-1} per layer (including output layer)
    std::vector<Eigen::MatrixXd> xhat;    // normalized pre-activations per hidden layer
    std::vector<Eigen::VectorXd> inv_std; // 1/sqrt(var + eps) per hidden layer
    std::vector<Eigen::VectorXd> batch_mean;
    std::vector<Eigen::VectorXd> batch_var;
    std::vector<Eigen::MatrixXd> activated_mask;  // 1 where ReLU passed
    Eigen::MatrixXd magnitude;
    NetOutput output;
    bool train_mode = false;
};

/// Forward pass on a K x B batch of channel magnitudes. In train mode batch norm
/// uses batch statistics, otherwise the running averages.
NetOutput forward(const NetParams& params, const Eigen::MatrixXd& magnitude, bool train_mode,
                  ForwardCache* cache = nullptr);

/// Single-round decision used by the simulator.
struct RoundDecision {
    Eigen::VectorXd power;
    double eta = 1.0;
    Eigen::VectorXd mu;
};
RoundDecision decide(const NetParams& params, VecRef magnitude);

/// Knowledge-free output for one round: p_k = p_bar_k * z_k, eta = eta_scale * z_K.
RoundDecision forward_knowledge_free(const NetParams& params, VecRef magnitude);

struct LossBreakdown {
    double total = 0.0;
    double mse = 0.0;      // batch mean of the per-draw MSE
    double penalty = 0.0;  // sum_k ReLU(batch-mean power_k - p_bar_k), before gamma
};

/// Loss of an already computed output.
LossBreakdown loss_of(const NetParams& params, const NetOutput& out,
                      const Eigen::MatrixXd& magnitude, double gamma);

/// Batch-mean MSE plus gamma times the average-power violation penalty.
LossBreakdown loss(const NetParams& params, const Eigen::MatrixXd& magnitude, double gamma,
                   bool train_mode = true);

/// Exact gradient of loss() for the batch held in `cache`.
NetGradients backward(const NetParams& params, const ForwardCache& cache, double gamma);

/// Convenience: forward in train mode, then backward.
NetGradients backward(const NetParams& params, const Eigen::MatrixXd& magnitude, double gamma,
                      LossBreakdown* loss_out = nullptr);

/// Batch-norm running statistics update from a train-mode cache.
void update_running_stats(NetParams& params, const ForwardCache& cache);

struct TrainConfig {
    int batch_size = 128;
    double gamma = 10.0;
    double learning_rate = 1e-3;
    /// Cosine-annealed towards this rate over the epochs; 0 keeps the rate fixed.
    double final_learning_rate = 0.0;
    int epochs = 200;
    std::uint64_t seed = 1;
    NetMode mode = NetMode::kKnowledgeGuided;
    std::vector<int> hidden = {256, 64};
    int pool_size = 20'000;     // channel draws; every 10th is held out
    int eval_batch_size = 200;  // draws per held-out feasibility batch
    double mu_scale = 0.0;      // 0 selects the default
    double eta_scale = 0.0;     // 0 selects the default

    void validate() const;
};

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
    double penalty = 0.0;
    double feasible_fraction = 0.0;
    double heldout_mse = 0.0;
};

struct TrainResult {
    NetParams params;
    std::vector<EpochLog> log;
};

/// Unsupervised SGD on channel draws. Throws NumericalError if the loss diverges.
TrainResult train(const TrainConfig& cfg, const PowerContext& ctx, const ChannelSampler& sampler,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

/// Held-out draws of a sampler under the 90/10 seed partition used by train().
Eigen::MatrixXd heldout_draws(const ChannelSampler& sampler, int pool_size);
Eigen::MatrixXd training_draws(const ChannelSampler& sampler, int pool_size);

/// A batch is feasible when every device's batch-mean power is within p_bar (+tol).
bool batch_feasible(const Eigen::MatrixXd& power, VecRef p_bar, double tol = 1e-9);

/// Fraction of consecutive `batch_size` column blocks of `draws` that are feasible
/// under inference-mode decisions; also returns their mean per-draw MSE.
struct FeasibilityReport {
    double feasible_fraction = 0.0;
    double mean_mse = 0.0;
    int batches = 0;
};
FeasibilityReport evaluate_feasibility(const NetParams& params, const Eigen::MatrixXd& draws,
                                       int batch_size);

/// Inference-only copy with batch norm folded into the dense layers, in single
/// precision. Produces the same decisions as forward(..., false) up to float rounding.
class CompiledNet {
 public:
    explicit CompiledNet(const NetParams& params);

    /// Decide (p, eta) for each round of a K x T trace, one round at a time.
    PowerAllocation decide_trace(const Eigen::MatrixXd& magnitude) const;

 private:
    NetMode mode_;
    std::vector<Eigen::MatrixXf> weight_;
    std::vector<Eigen::VectorXf> bias_;
    float mu_scale_;
    float eta_scale_;
    Eigen::VectorXd p_bar_;
    Eigen::VectorXd p_max_;
};

/// Versioned binary file: magic, version, JSON header length, JSON header
/// (dims, scales, BN constants, context), then little-endian float64 tensors.
void save_params(const std::filesystem::path& path, const NetParams& params);
NetParams load_params(const std::filesystem::path& path);

constexpr std::uint32_t kParamsFormatVersion = 1;

}  // namespace otafl
