#include "otafl/net.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <cstring>
#include <fstream>
#include <numeric>

#include "json.hpp"

#include "otafl/opt.hpp"

namespace otafl {

std::string to_string(NetMode mode) {
    return mode == NetMode::kKnowledgeGuided ? "knowledge_guided" : "knowledge_free";
}

NetMode net_mode_from_string(const std::string& name) {
    if (name == "knowledge_guided") return NetMode::kKnowledgeGuided;
    if (name == "knowledge_free") return NetMode::kKnowledgeFree;
    throw ConfigError("unknown network mode '" + name + "'");
}

PowerContext PowerContext::from(const SystemConfig& cfg) {
    return {cfg.p_bar_vec(), cfg.p_max_vec(), cfg.sigma2};
}

double default_eta_scale(const PowerContext& ctx) {
    const double num = ctx.sigma2 + ctx.p_bar.sum();
    const double den = ctx.p_bar.cwiseSqrt().sum();
    return 4.0 * (num / den) * (num / den);
}

double default_mu_scale(const PowerContext& ctx) { return 10.0 / ctx.p_bar.mean(); }

std::size_t NetParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    for (const auto& bn : norms) n += static_cast<std::size_t>(bn.gamma.size() + bn.beta.size());
    return n;
}

NetParams NetParams::init(NetMode mode, const PowerContext& ctx, std::vector<int> hidden,
                          std::uint64_t seed) {
    NetParams p;
    p.mode = mode;
    p.context = ctx;
    p.mu_scale = default_mu_scale(ctx);
    p.eta_scale = default_eta_scale(ctx);
    const int K = static_cast<int>(ctx.p_bar.size());
    require(K >= 1 && ctx.p_max.size() == K, "power context must describe K >= 1 devices");
    std::vector<int> dims;
    dims.push_back(K);
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(K + 1);
    for (std::size_t d = 0; d + 1 < dims.size(); ++d) {
        const int in = dims[d];
        const int out = dims[d + 1];
        require(in >= 1 && out >= 1, "layer widths must be positive");
        CounterRng rng(seed, StreamTag::kNetInit, d);
        const double limit = std::sqrt(6.0 / (in + out));
        DenseLayer layer{Eigen::MatrixXd(out, in), Eigen::VectorXd::Zero(out)};
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
            for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
                layer.weight(r, c) = limit * (2.0 * rng.uniform() - 1.0);
        p.layers.push_back(std::move(layer));
        if (d + 2 < dims.size()) {
            BatchNormState bn;
            bn.gamma = Eigen::VectorXd::Ones(out);
            bn.beta = Eigen::VectorXd::Zero(out);
            bn.running_mean = Eigen::VectorXd::Zero(out);
            bn.running_var = Eigen::VectorXd::Ones(out);
            p.norms.push_back(std::move(bn));
        }
    }
    return p;
}

namespace {

std::span<double> span_of(Eigen::MatrixXd& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<double> span_of(Eigen::VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

std::vector<TensorView> trainable_tensors(NetParams& params) {
    std::vector<TensorView> out;
    const int D = params.hidden_layers();
    for (int d = 0; d < D; ++d) {
        const auto tag = std::to_string(d + 1);
        out.push_back({"W" + tag, span_of(params.layers[d].weight)});
        out.push_back({"b" + tag, span_of(params.layers[d].bias)});
        out.push_back({"gamma" + tag, span_of(params.norms[d].gamma)});
        out.push_back({"beta" + tag, span_of(params.norms[d].beta)});
    }
    out.push_back({"W_out", span_of(params.layers[D].weight)});
    out.push_back({"b_out", span_of(params.layers[D].bias)});
    return out;
}

std::vector<std::span<double>> NetGradients::tensors() {
    std::vector<std::span<double>> out;
    const auto D = gamma.size();
    for (std::size_t d = 0; d < D; ++d) {
        out.push_back(span_of(weight[d]));
        out.push_back(span_of(bias[d]));
        out.push_back(span_of(gamma[d]));
        out.push_back(span_of(beta[d]));
    }
    out.push_back(span_of(weight[D]));
    out.push_back(span_of(bias[D]));
    return out;
}

Eigen::VectorXd structure_map(VecRef mu, double eta, VecRef magnitude, VecRef p_max) {
    require(mu.size() == magnitude.size() && p_max.size() == magnitude.size(),
            "structure_map: size mismatch");
    Eigen::VectorXd p(magnitude.size());
    for (Eigen::Index k = 0; k < p.size(); ++k) p(k) = dual_power(magnitude(k), eta, mu(k), p_max(k));
    return p;
}

NetOutput forward(const NetParams& params, const Eigen::MatrixXd& magnitude, bool train_mode,
                  ForwardCache* cache) {
    const int K = params.devices();
    require(magnitude.rows() == K, "forward: input has the wrong device count");
    require(magnitude.cols() >= 1, "forward: empty batch");
    const auto B = magnitude.cols();
    const int D = params.hidden_layers();
    if (cache) {
        *cache = ForwardCache{};
        cache->train_mode = train_mode;
        cache->magnitude = magnitude;
    }

    Eigen::MatrixXd z = magnitude;
    for (int d = 0; d < D; ++d) {
        const auto& layer = params.layers[d];
        const auto& bn = params.norms[d];
        if (cache) cache->input.push_back(z);
        Eigen::MatrixXd pre = layer.weight * z;
        pre.colwise() += layer.bias;
        Eigen::VectorXd mean, var;
        if (train_mode) {
            mean = pre.rowwise().mean();
            var = (pre.colwise() - mean).array().square().rowwise().mean();
        } else {
            mean = bn.running_mean;
            var = bn.running_var;
        }
        const Eigen::VectorXd inv_std = (var.array() + bn.epsilon).rsqrt();
        Eigen::MatrixXd xhat = (pre.colwise() - mean).array().colwise() * inv_std.array();
        Eigen::MatrixXd y = (xhat.array().colwise() * bn.gamma.array()).colwise() + bn.beta.array();
        Eigen::MatrixXd mask = (y.array() > 0.0).cast<double>();
        z = y.cwiseMax(0.0);
        if (cache) {
            cache->xhat.push_back(std::move(xhat));
            cache->inv_std.push_back(inv_std);
            cache->batch_mean.push_back(std::move(mean));
            cache->batch_var.push_back(std::move(var));
            cache->activated_mask.push_back(std::move(mask));
        }
    }
    const auto& out_layer = params.layers[D];
    if (cache) cache->input.push_back(z);
    Eigen::MatrixXd logits = out_layer.weight * z;
    logits.colwise() += out_layer.bias;

    NetOutput out;
    out.sigmoid = logits.unaryExpr([](double x) { return sigmoid(x); });
    out.eta = params.eta_scale * out.sigmoid.row(K);
    out.power.resize(K, B);
    out.mu = Eigen::MatrixXd::Zero(K, B);
    if (params.mode == NetMode::kKnowledgeGuided) {
        out.mu = params.mu_scale * out.sigmoid.topRows(K);
        for (Eigen::Index b = 0; b < B; ++b)
            out.power.col(b) =
                structure_map(out.mu.col(b), out.eta(b), magnitude.col(b), params.context.p_max);
    } else {
        out.power = out.sigmoid.topRows(K).array().colwise() * params.context.p_bar.array();
    }
    if (cache) cache->output = out;
    return out;
}

RoundDecision decide(const NetParams& params, VecRef magnitude) {
    const Eigen::MatrixXd h = magnitude;
    const NetOutput out = forward(params, h, false);
    return {out.power.col(0), out.eta(0), out.mu.col(0)};
}

RoundDecision forward_knowledge_free(const NetParams& params, VecRef magnitude) {
    if (params.mode != NetMode::kKnowledgeFree)
        throw ConfigError("forward_knowledge_free called on a knowledge-guided network");
    return decide(params, magnitude);
}

LossBreakdown loss_of(const NetParams& params, const NetOutput& out,
                      const Eigen::MatrixXd& magnitude, double gamma) {
    const auto B = magnitude.cols();
    LossBreakdown r;
    for (Eigen::Index b = 0; b < B; ++b)
        r.mse += instantaneous_mse(out.power.col(b), magnitude.col(b), out.eta(b),
                                   params.context.sigma2);
    r.mse /= static_cast<double>(B);
    const Eigen::VectorXd mean_power = out.power.rowwise().mean();
    r.penalty = (mean_power - params.context.p_bar).cwiseMax(0.0).sum();
    r.total = r.mse + gamma * r.penalty;
    return r;
}

LossBreakdown loss(const NetParams& params, const Eigen::MatrixXd& magnitude, double gamma,
                   bool train_mode) {
    return loss_of(params, forward(params, magnitude, train_mode), magnitude, gamma);
}

NetGradients backward(const NetParams& params, const ForwardCache& cache, double gamma) {
    const int K = params.devices();
    const int D = params.hidden_layers();
    const auto& h = cache.magnitude;
    const auto& out = cache.output;
    const auto B = h.cols();
    const double invB = 1.0 / static_cast<double>(B);
    const double sigma2 = params.context.sigma2;

    // Which devices violate the average budget on this batch.
    const Eigen::VectorXd mean_power = out.power.rowwise().mean();
    Eigen::VectorXd violated(K);
    for (int k = 0; k < K; ++k) violated(k) = mean_power(k) > params.context.p_bar(k) ? 1.0 : 0.0;

    // Gradient w.r.t. the sigmoid outputs, built per draw through r = sqrt(p).
    Eigen::MatrixXd d_sig = Eigen::MatrixXd::Zero(K + 1, B);
    for (Eigen::Index b = 0; b < B; ++b) {
        const double eta = out.eta(b);
        const double sqrt_eta = std::sqrt(eta);
        double d_eta = -sigma2 / (eta * eta) * invB;
        for (int k = 0; k < K; ++k) {
            const double hk = h(k, b);
            const double r = std::sqrt(out.power(k, b));
            const double a = r * hk / sqrt_eta;
            // d loss / d r, from the MSE and from the penalty (p = r^2).
            const double d_r = invB * (2.0 * (a - 1.0) * hk / sqrt_eta + gamma * violated(k) * 2.0 * r);
            d_eta += invB * 2.0 * (a - 1.0) * (-a / (2.0 * eta));
            if (params.mode == NetMode::kKnowledgeGuided) {
                if (hk <= 0.0) continue;
                const double mu = out.mu(k, b);
                const double den = hk * hk + mu * eta;
                const double root = sqrt_eta * hk / den;
                if (root * root > params.context.p_max(k)) continue;  // clamped: zero subgradient
                const double dr_dmu = -eta * sqrt_eta * hk / (den * den);
                const double dr_deta = hk * (hk * hk - mu * eta) / (2.0 * sqrt_eta * den * den);
                d_sig(k, b) = d_r * dr_dmu * params.mu_scale;
                d_eta += d_r * dr_deta;
            } else {
                if (r <= 0.0) continue;
                d_sig(k, b) = d_r * params.context.p_bar(k) / (2.0 * r);
            }
        }
        d_sig(K, b) = d_eta * params.eta_scale;
    }

    NetGradients g;
    g.weight.resize(D + 1);
    g.bias.resize(D + 1);
    g.gamma.resize(D);
    g.beta.resize(D);

    Eigen::MatrixXd delta = d_sig.array() * out.sigmoid.array() * (1.0 - out.sigmoid.array());
    g.weight[D] = delta * cache.input[D].transpose();
    g.bias[D] = delta.rowwise().sum();
    Eigen::MatrixXd d_z = params.layers[D].weight.transpose() * delta;

    for (int d = D - 1; d >= 0; --d) {
        const auto& bn = params.norms[d];
        const Eigen::MatrixXd d_y = d_z.cwiseProduct(cache.activated_mask[d]);
        const auto& xhat = cache.xhat[d];
        g.gamma[d] = d_y.cwiseProduct(xhat).rowwise().sum();
        g.beta[d] = d_y.rowwise().sum();
        const Eigen::MatrixXd d_xhat = d_y.array().colwise() * bn.gamma.array();
        Eigen::MatrixXd d_pre;
        if (cache.train_mode) {
            const Eigen::VectorXd sum_dx = d_xhat.rowwise().sum();
            const Eigen::VectorXd sum_dx_x = d_xhat.cwiseProduct(xhat).rowwise().sum();
            d_pre = (static_cast<double>(B) * d_xhat.array() - (xhat.array().colwise() * sum_dx_x.array()))
                        .colwise() -
                    sum_dx.array();
            d_pre = d_pre.array().colwise() * (cache.inv_std[d].array() * invB);
        } else {
            d_pre = d_xhat.array().colwise() * cache.inv_std[d].array();
        }
        g.weight[d] = d_pre * cache.input[d].transpose();
        g.bias[d] = d_pre.rowwise().sum();
        if (d > 0) d_z = params.layers[d].weight.transpose() * d_pre;
    }
    return g;
}

NetGradients backward(const NetParams& params, const Eigen::MatrixXd& magnitude, double gamma,
                      LossBreakdown* loss_out) {
    ForwardCache cache;
    forward(params, magnitude, true, &cache);
    if (loss_out) *loss_out = loss_of(params, cache.output, magnitude, gamma);
    return backward(params, cache, gamma);
}

void update_running_stats(NetParams& params, const ForwardCache& cache) {
    require(cache.train_mode, "running statistics need a train-mode forward pass");
    for (int d = 0; d < params.hidden_layers(); ++d) {
        auto& bn = params.norms[d];
        bn.running_mean = bn.momentum * bn.running_mean + (1.0 - bn.momentum) * cache.batch_mean[d];
        bn.running_var = bn.momentum * bn.running_var + (1.0 - bn.momentum) * cache.batch_var[d];
    }
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (gamma < 0.0) throw ConfigError("penalty gamma must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (final_learning_rate < 0.0) throw ConfigError("final learning rate must be >= 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (pool_size < 20) throw ConfigError("pool size must be at least 20 draws");
    if (eval_batch_size < 1) throw ConfigError("evaluation batch size must be >= 1");
}

namespace {

Eigen::MatrixXd partition_draws(const ChannelSampler& sampler, int pool_size, bool heldout) {
    std::vector<std::uint64_t> idx;
    for (int i = 0; i < pool_size; ++i)
        if ((i % 10 == 9) == heldout) idx.push_back(static_cast<std::uint64_t>(i));
    Eigen::MatrixXd out(sampler.devices(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = sampler.draw(idx[j]);
    return out;
}

}  // namespace

Eigen::MatrixXd heldout_draws(const ChannelSampler& sampler, int pool_size) {
    return partition_draws(sampler, pool_size, true);
}

Eigen::MatrixXd training_draws(const ChannelSampler& sampler, int pool_size) {
    return partition_draws(sampler, pool_size, false);
}

bool batch_feasible(const Eigen::MatrixXd& power, VecRef p_bar, double tol) {
    const Eigen::VectorXd mean = power.rowwise().mean();
    return ((mean - p_bar).array() <= tol).all();
}

FeasibilityReport evaluate_feasibility(const NetParams& params, const Eigen::MatrixXd& draws,
                                       int batch_size) {
    FeasibilityReport rep;
    const auto n = draws.cols();
    const NetOutput out = forward(params, draws, false);
    int feasible = 0;
    for (Eigen::Index first = 0; first + batch_size <= n; first += batch_size) {
        ++rep.batches;
        if (batch_feasible(out.power.middleCols(first, batch_size), params.context.p_bar)) ++feasible;
    }
    double mse = 0.0;
    for (Eigen::Index b = 0; b < n; ++b)
        mse += instantaneous_mse(out.power.col(b), draws.col(b), out.eta(b), params.context.sigma2);
    rep.mean_mse = n > 0 ? mse / static_cast<double>(n) : 0.0;
    rep.feasible_fraction = rep.batches > 0 ? static_cast<double>(feasible) / rep.batches : 0.0;
    return rep;
}

TrainResult train(const TrainConfig& cfg, const PowerContext& ctx, const ChannelSampler& sampler,
                  const std::function<void(const EpochLog&)>& on_epoch) {
    cfg.validate();
    require(sampler.devices() == ctx.p_bar.size(), "sampler and context device counts differ");
    TrainResult result;
    result.params = NetParams::init(cfg.mode, ctx, cfg.hidden, cfg.seed);
    auto& params = result.params;
    if (cfg.mu_scale > 0.0) params.mu_scale = cfg.mu_scale;
    if (cfg.eta_scale > 0.0) params.eta_scale = cfg.eta_scale;

    const Eigen::MatrixXd train_pool = training_draws(sampler, cfg.pool_size);
    const Eigen::MatrixXd heldout = heldout_draws(sampler, cfg.pool_size);
    const auto n = train_pool.cols();
    const int batch = static_cast<int>(std::min<Eigen::Index>(cfg.batch_size, n));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});

    Eigen::MatrixXd x(ctx.p_bar.size(), batch);
    ForwardCache cache;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        CounterRng rng(cfg.seed, StreamTag::kNetShuffle, static_cast<std::uint64_t>(epoch));
        double lr = cfg.learning_rate;
        if (cfg.final_learning_rate > 0.0 && cfg.epochs > 1) {
            const double frac = static_cast<double>(epoch - 1) / (cfg.epochs - 1);
            lr = cfg.final_learning_rate +
                 0.5 * (cfg.learning_rate - cfg.final_learning_rate) * (1.0 + std::cos(std::numbers::pi * frac));
        }
        shuffle(order, rng);
        double loss_sum = 0.0, penalty_sum = 0.0;
        int steps = 0;
        for (Eigen::Index first = 0; first + batch <= n; first += batch) {
            for (int j = 0; j < batch; ++j) x.col(j) = train_pool.col(order[static_cast<std::size_t>(first + j)]);
            forward(params, x, true, &cache);
            const LossBreakdown lb = loss_of(params, cache.output, x, cfg.gamma);
            if (!std::isfinite(lb.total))
                throw NumericalError("training diverged at epoch " + std::to_string(epoch) +
                                     " (loss is not finite; lower the learning rate)");
            NetGradients g = backward(params, cache, cfg.gamma);
            update_running_stats(params, cache);
            auto views = trainable_tensors(params);
            auto grads = g.tensors();
            for (std::size_t i = 0; i < views.size(); ++i)
                for (std::size_t j = 0; j < views[i].values.size(); ++j)
                    views[i].values[j] -= lr * grads[i][j];
            loss_sum += lb.total;
            penalty_sum += lb.penalty;
            ++steps;
        }
        const FeasibilityReport rep = evaluate_feasibility(params, heldout, cfg.eval_batch_size);
        EpochLog entry{epoch, steps ? loss_sum / steps : 0.0, steps ? penalty_sum / steps : 0.0,
                       rep.feasible_fraction, rep.mean_mse};
        result.log.push_back(entry);
        if (on_epoch) on_epoch(entry);
    }
    return result;
}

CompiledNet::CompiledNet(const NetParams& params)
    : mode_(params.mode),
      mu_scale_(static_cast<float>(params.mu_scale)),
      eta_scale_(static_cast<float>(params.eta_scale)),
      p_bar_(params.context.p_bar),
      p_max_(params.context.p_max) {
    const int D = params.hidden_layers();
    for (int d = 0; d <= D; ++d) {
        Eigen::MatrixXd w = params.layers[d].weight;
        Eigen::VectorXd b = params.layers[d].bias;
        if (d < D) {
            // y = gamma * (Wz + b - m) / s + beta  ==  (gamma/s) W z + (gamma/s)(b - m) + beta
            const auto& bn = params.norms[d];
            const Eigen::VectorXd scale =
                bn.gamma.array() * (bn.running_var.array() + bn.epsilon).rsqrt();
            w = scale.asDiagonal() * w;
            b = scale.cwiseProduct(b - bn.running_mean) + bn.beta;
        }
        weight_.push_back(w.cast<float>());
        bias_.push_back(b.cast<float>());
    }
}

PowerAllocation CompiledNet::decide_trace(const Eigen::MatrixXd& magnitude) const {
    const auto K = magnitude.rows();
    const auto T = magnitude.cols();
    require(K == p_bar_.size(), "decide_trace: wrong device count");
    // Rounds are independent, so the whole trace goes through as one batch.
    // Scratch buffers persist per thread.
    thread_local Eigen::MatrixXf h, z, next;
    h = magnitude.cast<float>();
    z = h;
    const std::size_t L = weight_.size();
    for (std::size_t l = 0; l < L; ++l) {
        next.resize(weight_[l].rows(), T);
        next.noalias() = weight_[l] * z;
        next.colwise() += bias_[l];
        if (l + 1 < L)
            next.array() = next.array().max(0.0f);
        else
            next.array() = (1.0f + (-next.array()).exp()).inverse();
        z.swap(next);
    }
    PowerAllocation alloc{Eigen::MatrixXd(K, T), Eigen::VectorXd(T)};
    const Eigen::VectorXf p_max = p_max_.cast<float>();
    const Eigen::VectorXf p_bar = p_bar_.cast<float>();
    for (Eigen::Index t = 0; t < T; ++t) {
        const float* s = z.col(t).data();
        const float* ht = h.col(t).data();
        double* out = alloc.power.col(t).data();
        const float eta = eta_scale_ * s[K];
        alloc.eta(t) = eta;
        if (mode_ == NetMode::kKnowledgeGuided) {
            const float root_eta = std::sqrt(eta);
            for (Eigen::Index k = 0; k < K; ++k) {
                const float r = root_eta * ht[k] / (ht[k] * ht[k] + mu_scale_ * s[k] * eta);
                out[k] = std::min(r * r, p_max[k]);
            }
        } else {
            for (Eigen::Index k = 0; k < K; ++k) out[k] = p_bar[k] * s[k];
        }
    }
    return alloc;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'O', 'T', 'A', 'F', 'L', 'N', 'E', 'T'};

template <typename T>
void write_le(std::ostream& out, T value) {
    static_assert(std::endian::native == std::endian::little, "big-endian hosts are unsupported");
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw ConfigError("network file is truncated");
    return value;
}

void write_block(std::ostream& out, const double* data, Eigen::Index n) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

void read_block(std::istream& in, double* data, Eigen::Index n) {
    in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw ConfigError("network file is truncated");
}

}  // namespace

void save_params(const std::filesystem::path& path, const NetParams& params) {
    nlohmann::json header;
    header["format"] = "otafl-net";
    header["version"] = kParamsFormatVersion;
    header["mode"] = to_string(params.mode);
    header["K"] = params.devices();
    std::vector<std::array<Eigen::Index, 2>> dims;
    for (const auto& l : params.layers) dims.push_back({l.weight.rows(), l.weight.cols()});
    header["layers"] = dims;
    header["mu_scale"] = params.mu_scale;
    header["eta_scale"] = params.eta_scale;
    header["sigma2"] = params.context.sigma2;
    header["p_bar"] = std::vector<double>(params.context.p_bar.begin(), params.context.p_bar.end());
    header["p_max"] = std::vector<double>(params.context.p_max.begin(), params.context.p_max.end());
    nlohmann::json bn = nlohmann::json::array();
    for (const auto& n : params.norms) bn.push_back({{"momentum", n.momentum}, {"epsilon", n.epsilon}});
    header["batch_norm"] = bn;
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out.write(kMagic, sizeof(kMagic));
    write_le<std::uint32_t>(out, kParamsFormatVersion);
    write_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    const int D = params.hidden_layers();
    for (int d = 0; d <= D; ++d) {
        const auto& l = params.layers[d];
        write_block(out, l.weight.data(), l.weight.size());
        write_block(out, l.bias.data(), l.bias.size());
        if (d < D) {
            const auto& n = params.norms[d];
            write_block(out, n.gamma.data(), n.gamma.size());
            write_block(out, n.beta.data(), n.beta.size());
            write_block(out, n.running_mean.data(), n.running_mean.size());
            write_block(out, n.running_var.data(), n.running_var.size());
        }
    }
    if (!out) throw ConfigError("failed writing " + path.string());
}

NetParams load_params(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    char magic[sizeof(kMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw ConfigError(path.string() + " is not a network parameter file");
    const auto version = read_le<std::uint32_t>(in);
    if (version != kParamsFormatVersion)
        throw ConfigError("unsupported network file version " + std::to_string(version));
    const auto len = read_le<std::uint64_t>(in);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw ConfigError("network file is truncated");

    NetParams p;
    try {
        const auto header = nlohmann::json::parse(text);
        p.mode = net_mode_from_string(header.at("mode").get<std::string>());
        p.mu_scale = header.at("mu_scale").get<double>();
        p.eta_scale = header.at("eta_scale").get<double>();
        p.context.sigma2 = header.at("sigma2").get<double>();
        const auto pb = header.at("p_bar").get<std::vector<double>>();
        const auto pm = header.at("p_max").get<std::vector<double>>();
        p.context.p_bar = Eigen::Map<const Eigen::VectorXd>(pb.data(), static_cast<Eigen::Index>(pb.size()));
        p.context.p_max = Eigen::Map<const Eigen::VectorXd>(pm.data(), static_cast<Eigen::Index>(pm.size()));
        const auto dims = header.at("layers").get<std::vector<std::array<Eigen::Index, 2>>>();
        const auto& bn = header.at("batch_norm");
        if (dims.empty() || bn.size() + 1 != dims.size())
            throw ConfigError("network header: inconsistent layer count");
        for (std::size_t d = 0; d < dims.size(); ++d) {
            DenseLayer l{Eigen::MatrixXd(dims[d][0], dims[d][1]), Eigen::VectorXd(dims[d][0])};
            read_block(in, l.weight.data(), l.weight.size());
            read_block(in, l.bias.data(), l.bias.size());
            if (d + 1 < dims.size()) {
                BatchNormState n;
                n.momentum = bn[d].at("momentum").get<double>();
                n.epsilon = bn[d].at("epsilon").get<double>();
                for (auto* v : {&n.gamma, &n.beta, &n.running_mean, &n.running_var}) {
                    v->resize(dims[d][0]);
                    read_block(in, v->data(), v->size());
                }
                p.norms.push_back(std::move(n));
            }
            p.layers.push_back(std::move(l));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("network header: ") + e.what());
    }
    require(p.layers.front().weight.cols() == p.devices() &&
                p.layers.back().weight.rows() == p.devices() + 1,
            "network dimensions do not match the stored context");
    return p;
}

}  // namespace otafl
