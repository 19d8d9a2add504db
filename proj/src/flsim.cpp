#include "otafl/flsim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "otafl/analysis.hpp"

namespace otafl {

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.num_classes = num_classes;
    out.features.resize(static_cast<Eigen::Index>(indices.size()), features.cols());
    out.labels.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        require(indices[i] < size(), "subset index out of range");
        out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(indices[i]));
        out.labels.push_back(labels[indices[i]]);
    }
    return out;
}

namespace {

std::uint32_t read_be32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw ConfigError("IDX file is truncated");
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
           std::uint32_t{b[3]};
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t limit) {
    std::ifstream img(images, std::ios::binary);
    std::ifstream lab(labels, std::ios::binary);
    if (!img) throw ConfigError("cannot open " + images.string());
    if (!lab) throw ConfigError("cannot open " + labels.string());
    if (read_be32(img) != 0x00000803) throw ConfigError(images.string() + ": bad IDX image magic");
    if (read_be32(lab) != 0x00000801) throw ConfigError(labels.string() + ": bad IDX label magic");
    const std::size_t n_img = read_be32(img);
    const std::size_t rows = read_be32(img);
    const std::size_t cols = read_be32(img);
    const std::size_t n_lab = read_be32(lab);
    if (n_img != n_lab) throw ConfigError("IDX image and label counts differ");
    std::size_t n = limit == 0 ? n_img : std::min(limit, n_img);
    if (limit > n_img) throw ConfigError("requested more samples than the IDX file holds");

    Dataset d;
    d.num_classes = 10;
    const std::size_t pixels = rows * cols;
    d.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(pixels));
    std::vector<unsigned char> buf(pixels);
    for (std::size_t i = 0; i < n; ++i) {
        img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels));
        if (!img) throw ConfigError("IDX image file is truncated");
        for (std::size_t j = 0; j < pixels; ++j)
            d.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = buf[j] / 255.0;
    }
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        char c = 0;
        lab.read(&c, 1);
        if (!lab) throw ConfigError("IDX label file is truncated");
        d.labels[i] = static_cast<unsigned char>(c);
        if (d.labels[i] > 9) throw ConfigError("IDX label out of range");
    }
    return d;
}

Dataset make_gaussian_mixture(std::size_t n, int dim, int classes, double separation,
                              std::uint64_t seed) {
    require(dim >= 1 && classes >= 2, "gaussian mixture needs dim >= 1 and >= 2 classes");
    Eigen::MatrixXd means(classes, dim);
    for (int c = 0; c < classes; ++c) {
        CounterRng rng(seed, StreamTag::kData, 0, static_cast<std::uint64_t>(c));
        for (int j = 0; j < dim; ++j) means(c, j) = rng.normal();
        means.row(c) *= separation / means.row(c).norm();
    }
    Dataset d;
    d.num_classes = classes;
    d.features.resize(static_cast<Eigen::Index>(n), dim);
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        CounterRng rng(seed, StreamTag::kData, 1, i);
        const int c = static_cast<int>(i % static_cast<std::size_t>(classes));
        d.labels[i] = c;
        for (int j = 0; j < dim; ++j)
            d.features(static_cast<Eigen::Index>(i), j) = means(c, j) + rng.normal();
    }
    return d;
}

void write_dataset_csv(const std::filesystem::path& path, const Dataset& data) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << "label";
    for (int j = 0; j < data.dim(); ++j) out << ",x" << j;
    out << '\n';
    out.precision(17);
    for (std::size_t i = 0; i < data.size(); ++i) {
        out << data.labels[i];
        for (int j = 0; j < data.dim(); ++j) out << ',' << data.features(static_cast<Eigen::Index>(i), j);
        out << '\n';
    }
}

Dataset read_dataset_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ConfigError(path.string() + ": empty dataset file");
    const auto dim = std::count(line.begin(), line.end(), ',');
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        labels.push_back(std::stoi(cell));
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        if (static_cast<long>(row.size()) != dim) throw ConfigError(path.string() + ": ragged row");
        rows.push_back(std::move(row));
    }
    Dataset d;
    d.labels = labels;
    d.num_classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
    d.features.resize(static_cast<Eigen::Index>(rows.size()), dim);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (long j = 0; j < dim; ++j) d.features(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
    return d;
}

std::vector<std::vector<std::size_t>> partition_noniid(std::span<const int> labels, int K,
                                                       int n_shards, int shards_per_device,
                                                       CounterRng& rng) {
    if (K < 1 || n_shards < 1 || shards_per_device < 1)
        throw ConfigError("partition needs positive K, shard count and shards per device");
    if (labels.size() % static_cast<std::size_t>(n_shards) != 0)
        throw ConfigError("dataset size must be divisible by the shard count");
    if (n_shards != K * shards_per_device)
        throw ConfigError("shard count must equal K * shards_per_device");
    std::vector<std::size_t> order(labels.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return labels[a] < labels[b]; });
    const std::size_t shard_size = labels.size() / static_cast<std::size_t>(n_shards);
    std::vector<int> shard_ids(static_cast<std::size_t>(n_shards));
    std::iota(shard_ids.begin(), shard_ids.end(), 0);
    shuffle(shard_ids, rng);

    std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        for (int s = 0; s < shards_per_device; ++s) {
            const auto shard = static_cast<std::size_t>(shard_ids[static_cast<std::size_t>(k * shards_per_device + s)]);
            const auto first = order.begin() + static_cast<std::ptrdiff_t>(shard * shard_size);
            out[static_cast<std::size_t>(k)].insert(out[static_cast<std::size_t>(k)].end(), first,
                                                    first + static_cast<std::ptrdiff_t>(shard_size));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> all_rows(const Dataset& data, std::span<const std::size_t> rows) {
    if (!rows.empty()) return {rows.begin(), rows.end()};
    std::vector<std::size_t> out(data.size());
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
}

Eigen::MatrixXd gather(const Dataset& data, const std::vector<std::size_t>& rows) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), data.features.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
        x.row(static_cast<Eigen::Index>(i)) = data.features.row(static_cast<Eigen::Index>(rows[i]));
    return x;
}

/// Row-wise softmax in place; returns the log-sum-exp per row.
Eigen::VectorXd softmax_rows(Eigen::MatrixXd& logits) {
    Eigen::VectorXd lse(logits.rows());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double m = logits.row(i).maxCoeff();
        logits.row(i) = (logits.row(i).array() - m).exp();
        const double s = logits.row(i).sum();
        logits.row(i) /= s;
        lse(i) = m + std::log(s);
    }
    return lse;
}

}  // namespace

SoftmaxRegression::SoftmaxRegression(int input_dim, int classes, double l2)
    : input_dim_(input_dim), classes_(classes), l2_(l2) {
    require(input_dim >= 1 && classes >= 2, "softmax regression needs dim >= 1 and >= 2 classes");
    if (l2 < 0.0) throw ConfigError("l2 weight must be >= 0");
}

Eigen::VectorXd SoftmaxRegression::initial_params(std::uint64_t) const {
    return Eigen::VectorXd::Zero(dim());
}

double SoftmaxRegression::loss(const Eigen::VectorXd& w, const Dataset& data,
                               std::span<const std::size_t> rows) const {
    require(w.size() == dim(), "parameter dimension mismatch");
    const auto idx = all_rows(data, rows);
    const Eigen::Map<const Eigen::MatrixXd> W(w.data(), classes_, input_dim_ + 1);
    const Eigen::MatrixXd x = gather(data, idx);
    Eigen::MatrixXd logits = x * W.leftCols(input_dim_).transpose();
    logits.rowwise() += W.col(input_dim_).transpose();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double m = logits.row(i).maxCoeff();
        const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
        acc += lse - logits(i, data.labels[idx[static_cast<std::size_t>(i)]]);
    }
    return acc / static_cast<double>(idx.size()) + 0.5 * l2_ * w.squaredNorm();
}

Eigen::VectorXd SoftmaxRegression::gradient(const Eigen::VectorXd& w, const Dataset& data,
                                            std::span<const std::size_t> rows) const {
    require(w.size() == dim(), "parameter dimension mismatch");
    const auto idx = all_rows(data, rows);
    const Eigen::Map<const Eigen::MatrixXd> W(w.data(), classes_, input_dim_ + 1);
    const Eigen::MatrixXd x = gather(data, idx);
    Eigen::MatrixXd prob = x * W.leftCols(input_dim_).transpose();
    prob.rowwise() += W.col(input_dim_).transpose();
    softmax_rows(prob);
    for (std::size_t i = 0; i < idx.size(); ++i) prob(static_cast<Eigen::Index>(i), data.labels[idx[i]]) -= 1.0;
    const double inv_n = 1.0 / static_cast<double>(idx.size());
    Eigen::VectorXd g(dim());
    Eigen::Map<Eigen::MatrixXd> G(g.data(), classes_, input_dim_ + 1);
    G.leftCols(input_dim_).noalias() = inv_n * prob.transpose() * x;
    G.col(input_dim_) = inv_n * prob.colwise().sum().transpose();
    g += l2_ * w;
    return g;
}

Eigen::MatrixXd SoftmaxRegression::sample_gradients(const Eigen::VectorXd& w, const Dataset& data,
                                                    std::span<const std::size_t> rows) const {
    const auto idx = all_rows(data, rows);
    const Eigen::Map<const Eigen::MatrixXd> W(w.data(), classes_, input_dim_ + 1);
    const Eigen::MatrixXd x = gather(data, idx);
    Eigen::MatrixXd prob = x * W.leftCols(input_dim_).transpose();
    prob.rowwise() += W.col(input_dim_).transpose();
    softmax_rows(prob);
    Eigen::MatrixXd out(dim(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        Eigen::VectorXd r = prob.row(ii).transpose();
        r(data.labels[idx[i]]) -= 1.0;
        Eigen::Map<Eigen::MatrixXd> G(out.col(ii).data(), classes_, input_dim_ + 1);
        G.leftCols(input_dim_) = r * x.row(ii);
        G.col(input_dim_) = r;
    }
    out.colwise() += l2_ * w;
    return out;
}

double SoftmaxRegression::accuracy(const Eigen::VectorXd& w, const Dataset& data) const {
    const Eigen::Map<const Eigen::MatrixXd> W(w.data(), classes_, input_dim_ + 1);
    Eigen::MatrixXd logits = data.features * W.leftCols(input_dim_).transpose();
    logits.rowwise() += W.col(input_dim_).transpose();
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index arg = 0;
        logits.row(i).maxCoeff(&arg);
        if (arg == data.labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return data.size() ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
}

double SoftmaxRegression::smoothness_bound(const Dataset& data,
                                           std::span<const std::size_t> rows) const {
    // Hessian = mean_i (diag(p_i) - p_i p_i^T) (x) x~_i x~_i^T, and the softmax
    // Jacobian has spectral norm <= 1/2.
    const auto idx = all_rows(data, rows);
    Eigen::MatrixXd x(static_cast<Eigen::Index>(idx.size()), input_dim_ + 1);
    x.leftCols(input_dim_) = gather(data, idx);
    x.col(input_dim_).setOnes();
    const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(idx.size());
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
    return 0.5 * es.eigenvalues().maxCoeff() + l2_;
}

Mlp::Mlp(int input_dim, int hidden, int classes, double l2)
    : input_dim_(input_dim), hidden_(hidden), classes_(classes), l2_(l2) {
    require(input_dim >= 1 && hidden >= 1 && classes >= 2, "invalid MLP shape");
}

Eigen::Index Mlp::dim() const {
    return static_cast<Eigen::Index>(hidden_) * (input_dim_ + 1) +
           static_cast<Eigen::Index>(classes_) * (hidden_ + 1);
}

Eigen::VectorXd Mlp::initial_params(std::uint64_t seed) const {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(dim());
    CounterRng rng(seed, StreamTag::kModelInit);
    const double l1 = std::sqrt(6.0 / (input_dim_ + hidden_));
    const double l2 = std::sqrt(6.0 / (hidden_ + classes_));
    Eigen::Map<Eigen::MatrixXd> W1(w.data(), hidden_, input_dim_ + 1);
    Eigen::Map<Eigen::MatrixXd> W2(w.data() + W1.size(), classes_, hidden_ + 1);
    for (Eigen::Index c = 0; c < input_dim_; ++c)
        for (Eigen::Index r = 0; r < hidden_; ++r) W1(r, c) = l1 * (2.0 * rng.uniform() - 1.0);
    for (Eigen::Index c = 0; c < hidden_; ++c)
        for (Eigen::Index r = 0; r < classes_; ++r) W2(r, c) = l2 * (2.0 * rng.uniform() - 1.0);
    return w;
}

namespace {

struct MlpPass {
    Eigen::MatrixXd x, hidden, prob;
    Eigen::VectorXd lse;
};

}  // namespace

#define OTAFL_MLP_VIEWS                                                                  \
    const Eigen::Map<const Eigen::MatrixXd> W1(w.data(), hidden_, input_dim_ + 1);       \
    const Eigen::Map<const Eigen::MatrixXd> W2(w.data() + W1.size(), classes_, hidden_ + 1)

double Mlp::loss(const Eigen::VectorXd& w, const Dataset& data,
                 std::span<const std::size_t> rows) const {
    OTAFL_MLP_VIEWS;
    const auto idx = all_rows(data, rows);
    const Eigen::MatrixXd x = gather(data, idx);
    Eigen::MatrixXd h = x * W1.leftCols(input_dim_).transpose();
    h.rowwise() += W1.col(input_dim_).transpose();
    h = h.array().tanh();
    Eigen::MatrixXd logits = h * W2.leftCols(hidden_).transpose();
    logits.rowwise() += W2.col(hidden_).transpose();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double m = logits.row(i).maxCoeff();
        acc += m + std::log((logits.row(i).array() - m).exp().sum()) -
               logits(i, data.labels[idx[static_cast<std::size_t>(i)]]);
    }
    return acc / static_cast<double>(idx.size()) + 0.5 * l2_ * w.squaredNorm();
}

Eigen::VectorXd Mlp::gradient(const Eigen::VectorXd& w, const Dataset& data,
                              std::span<const std::size_t> rows) const {
    OTAFL_MLP_VIEWS;
    const auto idx = all_rows(data, rows);
    const Eigen::MatrixXd x = gather(data, idx);
    Eigen::MatrixXd h = x * W1.leftCols(input_dim_).transpose();
    h.rowwise() += W1.col(input_dim_).transpose();
    h = h.array().tanh();
    Eigen::MatrixXd prob = h * W2.leftCols(hidden_).transpose();
    prob.rowwise() += W2.col(hidden_).transpose();
    softmax_rows(prob);
    for (std::size_t i = 0; i < idx.size(); ++i) prob(static_cast<Eigen::Index>(i), data.labels[idx[i]]) -= 1.0;
    const double inv_n = 1.0 / static_cast<double>(idx.size());
    Eigen::VectorXd g(dim());
    Eigen::Map<Eigen::MatrixXd> G1(g.data(), hidden_, input_dim_ + 1);
    Eigen::Map<Eigen::MatrixXd> G2(g.data() + G1.size(), classes_, hidden_ + 1);
    G2.leftCols(hidden_).noalias() = inv_n * prob.transpose() * h;
    G2.col(hidden_) = inv_n * prob.colwise().sum().transpose();
    const Eigen::MatrixXd dh =
        (prob * W2.leftCols(hidden_)).array() * (1.0 - h.array().square());
    G1.leftCols(input_dim_).noalias() = inv_n * dh.transpose() * x;
    G1.col(input_dim_) = inv_n * dh.colwise().sum().transpose();
    g += l2_ * w;
    return g;
}

Eigen::MatrixXd Mlp::sample_gradients(const Eigen::VectorXd& w, const Dataset& data,
                                      std::span<const std::size_t> rows) const {
    const auto idx = all_rows(data, rows);
    Eigen::MatrixXd out(dim(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const std::size_t one[] = {idx[i]};
        out.col(static_cast<Eigen::Index>(i)) = gradient(w, data, one);
    }
    return out;
}

double Mlp::accuracy(const Eigen::VectorXd& w, const Dataset& data) const {
    OTAFL_MLP_VIEWS;
    Eigen::MatrixXd h = data.features * W1.leftCols(input_dim_).transpose();
    h.rowwise() += W1.col(input_dim_).transpose();
    h = h.array().tanh();
    Eigen::MatrixXd logits = h * W2.leftCols(hidden_).transpose();
    logits.rowwise() += W2.col(hidden_).transpose();
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index arg = 0;
        logits.row(i).maxCoeff(&arg);
        if (arg == data.labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return data.size() ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
}

#undef OTAFL_MLP_VIEWS

std::unique_ptr<Model> make_model(const std::string& tag, int input_dim, int classes, double l2,
                                  int hidden) {
    if (tag == "softmax") return std::make_unique<SoftmaxRegression>(input_dim, classes, l2);
    if (tag == "mlp") return std::make_unique<Mlp>(input_dim, hidden, classes, l2);
    throw ConfigError("unknown model '" + tag + "'");
}

// ---------------------------------------------------------------------------
// Federated learning
// ---------------------------------------------------------------------------

LocalUpdate local_sgd(const Model& model, const Eigen::VectorXd& w_global, const Dataset& data,
                      std::span<const std::size_t> rows, int phi, double lambda, int batch,
                      CounterRng& rng) {
    if (phi < 1) throw ConfigError("phi must be >= 1");
    if (rows.size() < static_cast<std::size_t>(batch) || batch < 1)
        throw ConfigError("local dataset is smaller than the mini-batch");
    LocalUpdate out;
    out.theta = Eigen::VectorXd::Zero(w_global.size());
    out.final_model = w_global;
    std::vector<std::size_t> pool(rows.begin(), rows.end());
    std::vector<std::size_t> mb(static_cast<std::size_t>(batch));
    for (int step = 0; step < phi; ++step) {
        // Partial Fisher-Yates: the first `batch` entries become the mini-batch.
        for (int i = 0; i < batch; ++i) {
            const std::size_t j = static_cast<std::size_t>(i) + rng.index(pool.size() - static_cast<std::size_t>(i));
            std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
            mb[static_cast<std::size_t>(i)] = pool[static_cast<std::size_t>(i)];
        }
        const Eigen::VectorXd g = model.gradient(out.final_model, data, mb);
        out.theta += g;
        out.final_model -= lambda * g;
    }
    return out;
}

Eigen::VectorXd global_update(const Eigen::VectorXd& w, const Eigen::VectorXd& theta_hat,
                              double lambda) {
    require(w.size() == theta_hat.size(), "global_update: dimension mismatch");
    return w - lambda * theta_hat;
}

std::string to_string(Scheme s) {
    switch (s) {
        case Scheme::kErrorFree: return "error_free";
        case Scheme::kAlternatingOpt: return "alternating_opt";
        case Scheme::kKnowledgeGuided: return "knowledge_guided";
        case Scheme::kKnowledgeFree: return "knowledge_free";
        case Scheme::kFullPower: return "full_power";
        case Scheme::kChannelInversion: return "channel_inversion";
    }
    return "unknown";
}

Scheme scheme_from_string(const std::string& name) {
    for (Scheme s : all_schemes())
        if (to_string(s) == name) return s;
    throw ConfigError("unknown scheme '" + name + "'");
}

std::vector<Scheme> all_schemes() {
    return {Scheme::kErrorFree,     Scheme::kAlternatingOpt, Scheme::kKnowledgeGuided,
            Scheme::kKnowledgeFree, Scheme::kFullPower,      Scheme::kChannelInversion};
}

RoundPolicy policy_full_power(const SystemConfig& cfg, VecRef magnitude) {
    require(magnitude.size() == cfg.K, "policy: wrong device count");
    RoundPolicy out;
    out.power = cfg.p_bar_vec();
    try {
        out.eta = optimal_eta(out.power, magnitude, cfg.sigma2);
    } catch (const NoSignalError&) {
        out.silent = true;
    }
    return out;
}

RoundPolicy policy_channel_inversion(const SystemConfig& cfg, VecRef magnitude, double threshold) {
    require(magnitude.size() == cfg.K, "policy: wrong device count");
    RoundPolicy out;
    out.power = Eigen::VectorXd::Zero(cfg.K);
    double eta = std::numeric_limits<double>::infinity();
    for (int k = 0; k < cfg.K; ++k) {
        const double h = magnitude(k);
        if (h > 0.0) eta = std::min(eta, (cfg.sigma2 + cfg.p_bar[k] * h * h) / (std::sqrt(cfg.p_bar[k]) * h));
    }
    out.silent = true;
    if (std::isfinite(eta)) {
        out.eta = eta;
        for (int k = 0; k < cfg.K; ++k) {
            const double h = magnitude(k);
            if (cfg.p_bar[k] * h * h >= threshold) {
                out.power(k) = std::min(cfg.p_bar[k], eta / (h * h));
                out.silent = false;
            }
        }
    }
    return out;
}

void FLConfig::validate() const {
    if (phi < 1) throw ConfigError("phi must be >= 1");
    if (!(lambda > 0.0)) throw ConfigError("learning rate lambda must be positive");
    if (batch < 1) throw ConfigError("local batch must be >= 1");
    if (rounds < 1) throw ConfigError("rounds must be >= 1");
}

std::vector<Eigen::VectorXd> local_gradients(const Model& model, const Eigen::VectorXd& w,
                                             const FederatedProblem& problem) {
    std::vector<Eigen::VectorXd> out;
    out.reserve(problem.partition.size());
    for (const auto& rows : problem.partition) out.push_back(model.gradient(w, problem.train, rows));
    return out;
}

TrainingRun run_training(const FLConfig& fl, const SystemConfig& sys, const ChannelTrace& trace,
                         const FederatedProblem& problem, const SchemeAssets& assets) {
    fl.validate();
    sys.validate();
    const int K = sys.K;
    if (static_cast<int>(problem.partition.size()) != K)
        throw ConfigError("partition does not have K devices");
    if (fl.scheme != Scheme::kErrorFree && (trace.devices() != K || trace.rounds() < fl.rounds))
        throw ConfigError("channel trace must cover K devices and every round");
    switch (fl.scheme) {
        case Scheme::kAlternatingOpt:
            if (!assets.solution || assets.solution->allocation.rounds() < fl.rounds ||
                assets.solution->allocation.devices() != K)
                throw ConfigError("alternating_opt needs a solver result covering the trace");
            break;
        case Scheme::kKnowledgeGuided:
            if (!assets.guided_net || assets.guided_net->mode != NetMode::kKnowledgeGuided ||
                assets.guided_net->devices() != K)
                throw ConfigError("knowledge_guided needs a trained guided network for K devices");
            break;
        case Scheme::kKnowledgeFree:
            if (!assets.free_net || assets.free_net->mode != NetMode::kKnowledgeFree ||
                assets.free_net->devices() != K)
                throw ConfigError("knowledge_free needs a trained knowledge-free network for K devices");
            break;
        default: break;
    }

    const Model& model = problem.model;
    TrainingRun run;
    Eigen::VectorXd w = model.initial_params(fl.seed);
    std::vector<Eigen::VectorXd> theta(static_cast<std::size_t>(K));
    for (int t = 0; t < fl.rounds; ++t) {
        RoundMetrics m;
        m.round = t;
        m.train_loss = model.loss(w, problem.train);
        if (fl.track_gradients) {
            const auto grads = local_gradients(model, w, problem);
            Eigen::VectorXd mean = Eigen::VectorXd::Zero(w.size());
            for (const auto& g : grads) mean += g;
            mean /= static_cast<double>(K);
            m.grad_norm_sq = mean.squaredNorm();
            m.chi = heterogeneity_chi(grads).value;
        }
        for (int k = 0; k < K; ++k) {
            CounterRng rng(fl.seed, StreamTag::kLocalSgd, static_cast<std::uint64_t>(k),
                           static_cast<std::uint64_t>(t));
            theta[static_cast<std::size_t>(k)] =
                local_sgd(model, w, problem.train, problem.partition[static_cast<std::size_t>(k)],
                          fl.phi, fl.lambda, fl.batch, rng)
                    .theta;
        }

        Eigen::VectorXd theta_hat;
        if (fl.scheme == Scheme::kErrorFree) {
            theta_hat = Eigen::VectorXd::Zero(w.size());
            for (const auto& v : theta) theta_hat += v;
            theta_hat /= static_cast<double>(K);
            const AggregateStats stats = compute_stats(theta);
            m.max_variance = stats.max_variance();
            m.mse = 0.0;
        } else {
            const Eigen::VectorXd h = trace.magnitudes().col(t);
            Eigen::VectorXd p;
            double eta = 1.0;
            switch (fl.scheme) {
                case Scheme::kAlternatingOpt:
                    p = assets.solution->allocation.power.col(t);
                    eta = assets.solution->allocation.eta(t);
                    break;
                case Scheme::kKnowledgeGuided: {
                    auto d = decide(*assets.guided_net, h);
                    p = d.power;
                    eta = d.eta;
                    break;
                }
                case Scheme::kKnowledgeFree: {
                    auto d = decide(*assets.free_net, h);
                    p = d.power;
                    eta = d.eta;
                    break;
                }
                case Scheme::kFullPower: {
                    auto pol = policy_full_power(sys, h);
                    p = pol.power;
                    eta = pol.eta;
                    break;
                }
                case Scheme::kChannelInversion: {
                    auto pol = policy_channel_inversion(sys, h);
                    p = pol.power;
                    eta = pol.eta;
                    break;
                }
                case Scheme::kErrorFree: break;
            }
            m.mse = instantaneous_mse(p, h, eta, sys.sigma2);
            CounterRng noise(fl.seed, StreamTag::kNoise, static_cast<std::uint64_t>(t));
            const AggregationOutcome agg = aggregate_over_the_air(theta, p, h, eta, sys.sigma2, noise);
            theta_hat = agg.theta_hat;
            m.degenerate = agg.degenerate;
            m.max_variance = agg.stats.max_variance();
        }
        w = global_update(w, theta_hat, fl.lambda);
        m.test_accuracy = model.accuracy(w, problem.test);
        run.rounds.push_back(m);
    }
    run.final_model = std::move(w);
    return run;
}

}  // namespace otafl
