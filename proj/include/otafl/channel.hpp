#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "otafl/common.hpp"

namespace otafl {

/// Transmit power that yields the requested receive SNR: p = sigma2 * 10^(snr_db/10).
double power_from_snr(double snr_db, double sigma2);

/// Default peak budget: three times the average budget.
constexpr double kDefaultPeakRatio = 3.0;

struct SystemConfig {
    int K = 20;
    int T = 200;
    double sigma2 = 0.1;
    std::vector<double> p_bar;
    std::vector<double> p_max;
    double snr_db = 10.0;
    std::uint64_t seed = 1;

    /// Homogeneous devices with p_bar from the SNR and p_max = peak_ratio * p_bar.
    static SystemConfig from_snr(int K, int T, double snr_db, double sigma2, std::uint64_t seed,
                                 double peak_ratio = kDefaultPeakRatio);

    /// Throws ConfigError when an invariant is violated.
    void validate() const;

    Eigen::VectorXd p_bar_vec() const;
    Eigen::VectorXd p_max_vec() const;
};

/// Reads the "system" object: {K, T, sigma2, snr_db, seed, p_max_ratio} with
/// optional explicit "p_bar"/"p_max" arrays overriding the SNR derivation.
SystemConfig system_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SystemConfig& cfg);

/// K x T block-fading realizations, stored as magnitude and phase.
class ChannelTrace {
 public:
    ChannelTrace() = default;
    ChannelTrace(Eigen::MatrixXd magnitude, Eigen::MatrixXd phase);

    int devices() const { return static_cast<int>(magnitude_.rows()); }
    int rounds() const { return static_cast<int>(magnitude_.cols()); }

    const Eigen::MatrixXd& magnitudes() const { return magnitude_; }
    const Eigen::MatrixXd& phases() const { return phase_; }

    double magnitude(int k, int t) const { return magnitude_(k, t); }
    double phase(int k, int t) const { return phase_(k, t); }
    std::complex<double> coefficient(int k, int t) const {
        return std::polar(magnitude_(k, t), phase_(k, t));
    }

    /// Sub-trace with rounds [first, first + count).
    ChannelTrace slice(int first, int count) const;

    bool operator==(const ChannelTrace&) const = default;

 private:
    Eigen::MatrixXd magnitude_;
    Eigen::MatrixXd phase_;
};

/// Single circularly-symmetric unit-variance complex Gaussian draw for (seed, k, t).
std::complex<double> draw_channel(std::uint64_t seed, int k, int t);

/// i.i.d. Rayleigh block fading, E|h|^2 = 1, keyed by (seed, k, t).
ChannelTrace generate_channels(const SystemConfig& cfg);
ChannelTrace generate_channels(int K, int T, std::uint64_t seed, int first_round = 0);

/// Stateless source of K-magnitude channel draws used to train the power-control nets.
class ChannelSampler {
 public:
    ChannelSampler(int K, std::uint64_t seed) : K_(K), seed_(seed) {}

    int devices() const { return K_; }

    /// Magnitudes of draw `index`: K entries.
    Eigen::VectorXd draw(std::uint64_t index) const;

    /// K x count matrix of draws [first, first + count).
    Eigen::MatrixXd draws(std::uint64_t first, int count) const;

 private:
    int K_;
    std::uint64_t seed_;
};

/// CSV with header "device,round,magnitude,phase"; lines beginning with '#' are comments.
void write_trace_csv(std::ostream& out, const ChannelTrace& trace);
void write_trace_csv(const std::filesystem::path& path, const ChannelTrace& trace,
                     const std::string& comment = {});
ChannelTrace read_trace_csv(std::istream& in);
ChannelTrace read_trace_csv(const std::filesystem::path& path);

}  // namespace otafl
