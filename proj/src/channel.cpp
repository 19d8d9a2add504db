#include "otafl/channel.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

namespace otafl {

double power_from_snr(double snr_db, double sigma2) {
    if (!(sigma2 > 0.0)) throw ConfigError("noise variance sigma2 must be positive");
    return sigma2 * std::pow(10.0, snr_db / 10.0);
}

SystemConfig SystemConfig::from_snr(int K, int T, double snr_db, double sigma2,
                                    std::uint64_t seed, double peak_ratio) {
    SystemConfig cfg;
    cfg.K = K;
    cfg.T = T;
    cfg.sigma2 = sigma2;
    cfg.snr_db = snr_db;
    cfg.seed = seed;
    const double p = power_from_snr(snr_db, sigma2);
    cfg.p_bar.assign(static_cast<std::size_t>(std::max(K, 0)), p);
    cfg.p_max.assign(static_cast<std::size_t>(std::max(K, 0)), peak_ratio * p);
    cfg.validate();
    return cfg;
}

void SystemConfig::validate() const {
    if (K < 1) throw ConfigError("K must be at least 1");
    if (T < 1) throw ConfigError("T must be at least 1");
    if (!(sigma2 > 0.0)) throw ConfigError("sigma2 must be positive");
    if (p_bar.size() != static_cast<std::size_t>(K) || p_max.size() != static_cast<std::size_t>(K))
        throw ConfigError("p_bar and p_max must have K entries");
    for (int k = 0; k < K; ++k) {
        if (!(p_bar[k] > 0.0)) throw ConfigError("p_bar must be positive");
        if (!(p_bar[k] < p_max[k]))
            throw ConfigError("average budget must be strictly below the peak budget");
    }
}

Eigen::VectorXd SystemConfig::p_bar_vec() const {
    return Eigen::Map<const Eigen::VectorXd>(p_bar.data(), static_cast<Eigen::Index>(p_bar.size()));
}

Eigen::VectorXd SystemConfig::p_max_vec() const {
    return Eigen::Map<const Eigen::VectorXd>(p_max.data(), static_cast<Eigen::Index>(p_max.size()));
}

SystemConfig system_config_from_json(const nlohmann::json& j) {
    try {
        const int K = j.at("K").get<int>();
        const int T = j.value("T", 200);
        const double sigma2 = j.value("sigma2", 0.1);
        const double snr_db = j.value("snr_db", 10.0);
        const auto seed = j.value("seed", std::uint64_t{1});
        const double ratio = j.value("p_max_ratio", kDefaultPeakRatio);
        if (K < 1) throw ConfigError("K must be at least 1");
        SystemConfig cfg = SystemConfig::from_snr(K, std::max(T, 1), snr_db, sigma2, seed, ratio);
        cfg.T = T;
        if (j.contains("p_bar")) cfg.p_bar = j.at("p_bar").get<std::vector<double>>();
        if (j.contains("p_max")) cfg.p_max = j.at("p_max").get<std::vector<double>>();
        cfg.validate();
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("system config: ") + e.what());
    }
}

nlohmann::json to_json(const SystemConfig& cfg) {
    return {{"K", cfg.K},           {"T", cfg.T},         {"sigma2", cfg.sigma2},
            {"snr_db", cfg.snr_db}, {"seed", cfg.seed},   {"p_bar", cfg.p_bar},
            {"p_max", cfg.p_max}};
}

ChannelTrace::ChannelTrace(Eigen::MatrixXd magnitude, Eigen::MatrixXd phase)
    : magnitude_(std::move(magnitude)), phase_(std::move(phase)) {
    require(magnitude_.rows() == phase_.rows() && magnitude_.cols() == phase_.cols(),
            "magnitude and phase must have the same shape");
    if ((magnitude_.array() < 0.0).any()) throw ConfigError("channel magnitudes must be >= 0");
}

ChannelTrace ChannelTrace::slice(int first, int count) const {
    require(first >= 0 && count >= 0 && first + count <= rounds(), "slice out of range");
    return ChannelTrace(magnitude_.middleCols(first, count), phase_.middleCols(first, count));
}

std::complex<double> draw_channel(std::uint64_t seed, int k, int t) {
    CounterRng rng(seed, StreamTag::kChannel, static_cast<std::uint64_t>(k),
                   static_cast<std::uint64_t>(t));
    const double re = rng.normal() * std::numbers::sqrt2 / 2.0;
    const double im = rng.normal() * std::numbers::sqrt2 / 2.0;
    return {re, im};
}

namespace {

double wrap_phase(double angle) {
    if (angle < 0.0) angle += 2.0 * std::numbers::pi;
    if (angle >= 2.0 * std::numbers::pi) angle = 0.0;
    return angle;
}

}  // namespace

ChannelTrace generate_channels(int K, int T, std::uint64_t seed, int first_round) {
    Eigen::MatrixXd mag(K, T);
    Eigen::MatrixXd phase(K, T);
    for (int t = 0; t < T; ++t) {
        for (int k = 0; k < K; ++k) {
            const auto h = draw_channel(seed, k, first_round + t);
            mag(k, t) = std::abs(h);
            phase(k, t) = wrap_phase(std::arg(h));
        }
    }
    return ChannelTrace(std::move(mag), std::move(phase));
}

ChannelTrace generate_channels(const SystemConfig& cfg) {
    cfg.validate();
    return generate_channels(cfg.K, cfg.T, cfg.seed);
}

Eigen::VectorXd ChannelSampler::draw(std::uint64_t index) const {
    Eigen::VectorXd out(K_);
    for (int k = 0; k < K_; ++k) {
        // A dedicated seed lane keeps sampler draws disjoint from FL traces.
        out(k) = std::abs(draw_channel(splitmix64(seed_ ^ 0x5A5A5A5A5A5A5A5Aull), k,
                                       static_cast<int>(index)));
    }
    return out;
}

Eigen::MatrixXd ChannelSampler::draws(std::uint64_t first, int count) const {
    Eigen::MatrixXd out(K_, count);
    for (int i = 0; i < count; ++i) out.col(i) = draw(first + static_cast<std::uint64_t>(i));
    return out;
}

void write_trace_csv(std::ostream& out, const ChannelTrace& trace) {
    out << "device,round,magnitude,phase\n";
    out << std::setprecision(17);
    for (int k = 0; k < trace.devices(); ++k)
        for (int t = 0; t < trace.rounds(); ++t)
            out << k << ',' << t << ',' << trace.magnitude(k, t) << ',' << trace.phase(k, t) << '\n';
}

void write_trace_csv(const std::filesystem::path& path, const ChannelTrace& trace,
                     const std::string& comment) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    if (!comment.empty()) out << "# " << comment << '\n';
    write_trace_csv(out, trace);
}

ChannelTrace read_trace_csv(std::istream& in) {
    struct Row {
        int k, t;
        double mag, phase;
    };
    std::vector<Row> rows;
    std::string line;
    bool header_seen = false;
    int K = 0, T = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            if (line.rfind("device,round,magnitude,phase", 0) != 0)
                throw ConfigError("channel CSV: unexpected header '" + line + "'");
            header_seen = true;
            continue;
        }
        std::istringstream ss(line);
        Row r{};
        char c1 = 0, c2 = 0, c3 = 0;
        if (!(ss >> r.k >> c1 >> r.t >> c2 >> r.mag >> c3 >> r.phase) || c1 != ',' || c2 != ',' ||
            c3 != ',')
            throw ConfigError("channel CSV: malformed row '" + line + "'");
        if (r.k < 0 || r.t < 0) throw ConfigError("channel CSV: negative index");
        K = std::max(K, r.k + 1);
        T = std::max(T, r.t + 1);
        rows.push_back(r);
    }
    if (!header_seen) throw ConfigError("channel CSV: missing header");
    if (rows.size() != static_cast<std::size_t>(K) * static_cast<std::size_t>(T))
        throw ConfigError("channel CSV: expected a dense K x T grid");
    Eigen::MatrixXd mag = Eigen::MatrixXd::Constant(K, T, -1.0);
    Eigen::MatrixXd phase(K, T);
    for (const auto& r : rows) {
        mag(r.k, r.t) = r.mag;
        phase(r.k, r.t) = r.phase;
    }
    if ((mag.array() < 0.0).any()) throw ConfigError("channel CSV: missing or negative entries");
    return ChannelTrace(std::move(mag), std::move(phase));
}

ChannelTrace read_trace_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    return read_trace_csv(in);
}

}  // namespace otafl
