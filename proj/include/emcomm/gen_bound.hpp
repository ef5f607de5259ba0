#pragma once

// Generalization-error bound for one agent:
//
//   bound = (D_k * M_k / delta)^((t-1)/t)
//   D_k   = exp((t-1)/t * d_t),      d_t = Renyi divergence of order t
//                                           between weight posterior and prior
//   M_k   = 2 * (sigma^2 t / (n (t-1)))^(t / (2t-2))
//
// The posterior is a diagonal Gaussian fitted over an ensemble of runs that
// differ only in their training seed. Held-out mean loss stands in for the
// population loss. All divergences are in nats.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "emcomm/trainer.hpp"

namespace emcomm {

inline constexpr int bound_report_schema_version = 1;
inline constexpr double default_variance_floor = 1e-8;

struct WeightPosterior {
    Vector mean;
    Vector variance;
    std::size_t runs = 0;

    std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

// Diagonal Gaussian given by per-coordinate mean and variance.
struct GaussianPrior {
    Vector mean;
    Vector variance;

    static GaussianPrior isotropic(std::size_t dim, double variance, double mean = 0.0) {
        if (!(variance > 0.0)) throw std::invalid_argument("prior variance must be > 0");
        return {Vector::Constant(static_cast<Eigen::Index>(dim), mean),
                Vector::Constant(static_cast<Eigen::Index>(dim), variance)};
    }
};

// Per-coordinate mean and population (1/m) variance, floored.
inline WeightPosterior fit_weight_posterior(const std::vector<std::vector<double>>& samples,
                                            double variance_floor = default_variance_floor) {
    if (samples.size() < 2) throw std::invalid_argument("fit_weight_posterior: need at least 2 runs");
    if (!(variance_floor > 0.0)) throw std::invalid_argument("fit_weight_posterior: variance floor must be > 0");
    const std::size_t d = samples.front().size();
    for (const auto& s : samples) {
        if (s.size() != d) throw std::invalid_argument("fit_weight_posterior: architecture mismatch");
    }
    const double m = static_cast<double>(samples.size());
    WeightPosterior post;
    post.runs = samples.size();
    post.mean = Vector::Zero(static_cast<Eigen::Index>(d));
    post.variance = Vector::Zero(static_cast<Eigen::Index>(d));
    for (const auto& s : samples) post.mean += Eigen::Map<const Vector>(s.data(), post.mean.size());
    post.mean /= m;
    for (const auto& s : samples) {
        post.variance += (Eigen::Map<const Vector>(s.data(), post.mean.size()) - post.mean).array().square().matrix();
    }
    post.variance /= m;
    post.variance = post.variance.array().max(variance_floor).matrix();
    return post;
}

inline WeightPosterior fit_weight_posterior(const std::vector<TrainedSystem>& runs, std::size_t agent_id,
                                            double variance_floor = default_variance_floor) {
    if (runs.size() < 2) throw std::invalid_argument("fit_weight_posterior: need at least 2 runs");
    std::vector<std::vector<double>> samples;
    const AgentParams* reference = nullptr;
    for (const auto& run : runs) {
        if (agent_id < 1 || agent_id > run.agents.size()) {
            throw std::invalid_argument("fit_weight_posterior: agent " + std::to_string(agent_id) + " not in run");
        }
        const auto& a = run.agents[agent_id - 1];
        if (reference && !reference->same_architecture(a)) {
            throw std::invalid_argument("fit_weight_posterior: architecture mismatch between runs");
        }
        reference = &a;
        samples.push_back(a.flatten_weights());
    }
    return fit_weight_posterior(samples, variance_floor);
}

// Order-t Renyi divergence between 1-D Gaussians N(m1, v1) || N(m2, v2).
// Requires t > 1 and t*v2 + (1-t)*v1 > 0.
inline double renyi_divergence_gauss_1d(double t, double m1, double v1, double m2, double v2) {
    const double vt = t * v2 + (1.0 - t) * v1;
    const double diff = m1 - m2;
    return 0.5 * (std::log(v2) - std::log(v1)) + std::log(v2 / vt) / (2.0 * (t - 1.0)) + t * diff * diff / (2.0 * vt);
}

inline double renyi_divergence_gauss(double t, const WeightPosterior& posterior, const GaussianPrior& prior) {
    if (!(t > 1.0) || !std::isfinite(t)) throw std::invalid_argument("t must exceed 1");
    if (posterior.mean.size() != prior.mean.size() || posterior.variance.size() != prior.variance.size() ||
        posterior.mean.size() != posterior.variance.size()) {
        throw std::invalid_argument("renyi_divergence_gauss: dimension mismatch");
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < posterior.mean.size(); ++i) {
        const double v1 = posterior.variance[i];
        const double v2 = prior.variance[i];
        if (!(v1 > 0.0) || !(v2 > 0.0)) {
            throw std::invalid_argument("renyi_divergence_gauss: non-positive variance at coordinate " +
                                        std::to_string(i));
        }
        const double vt = t * v2 + (1.0 - t) * v1;
        if (!(vt > 0.0)) {
            throw std::invalid_argument("renyi_divergence_gauss: validity condition t*prior_var + (1-t)*post_var > 0 "
                                        "violated at coordinate " + std::to_string(i) + " (posterior variance " +
                                        std::to_string(v1) + ", prior variance " + std::to_string(v2) + ")");
        }
        // Each term is >= 0 analytically; clamp rounding noise.
        total += std::max(0.0, renyi_divergence_gauss_1d(t, posterior.mean[i], v1, prior.mean[i], v2));
    }
    return total;
}

enum class SigmaMode { range, sample };

inline const char* to_string(SigmaMode m) { return m == SigmaMode::range ? "range" : "sample"; }

struct SigmaEstimate {
    double sigma = 0.0;
    SigmaMode mode = SigmaMode::range;
    // Sample mode is a heuristic proxy, not a certified sub-Gaussian constant.
    bool heuristic = false;
};

inline SigmaEstimate estimate_sigma(double a, double b) {
    if (!std::isfinite(a) || !std::isfinite(b) || !(b > a)) {
        throw std::invalid_argument("estimate_sigma: loss range needs b > a");
    }
    return {(b - a) / 2.0, SigmaMode::range, false};
}

inline SigmaEstimate estimate_sigma(std::span<const double> losses) {
    if (losses.size() < 30) throw std::invalid_argument("estimate_sigma: need at least 30 loss samples");
    const double n = static_cast<double>(losses.size());
    double mean = 0.0;
    for (double x : losses) mean += x;
    mean /= n;
    double ss = 0.0;
    for (double x : losses) ss += (x - mean) * (x - mean);
    const double sigma = std::sqrt(ss / (n - 1.0));
    const auto [lo, hi] = std::minmax_element(losses.begin(), losses.end());
    // Residue of summation rounding on equal values is not a spread.
    if (*lo == *hi || !(sigma > 64.0 * std::numeric_limits<double>::epsilon() * std::abs(mean))) throw std::invalid_argument("estimate_sigma: degenerate σ (constant losses)");
    return {sigma, SigmaMode::sample, true};
}

struct BoundTerms {
    double log_d_k = 0.0;
    double log_m_k = 0.0;
    double log_bound = 0.0;
    double d_k = 0.0;
    double m_k = 0.0;
    double bound = 0.0;
};

inline void check_bound_domain(double d_t, double sigma, std::size_t n, double t, double delta) {
    if (n < 1) throw std::invalid_argument("bound: n must be >= 1");
    if (!(t > 1.0) || !std::isfinite(t)) throw std::invalid_argument("t must exceed 1");
    if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("bound: delta must lie in (0, 1)");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("bound: sigma must be > 0");
    if (!(d_t >= 0.0)) throw std::invalid_argument("bound: d_t must be >= 0");
}

// The bound is evaluated in log space so a huge d_t yields +inf for D_k and
// the bound rather than NaN; log_bound stays finite.
inline BoundTerms bound_terms(double d_t, double sigma, std::size_t n, double t, double delta) {
    check_bound_domain(d_t, sigma, n, t, delta);
    const double r = (t - 1.0) / t;
    BoundTerms b;
    b.log_d_k = r * d_t;
    b.log_m_k = std::log(2.0) + t / (2.0 * t - 2.0) * std::log(sigma * sigma * t / (static_cast<double>(n) * (t - 1.0)));
    b.log_bound = r * (b.log_d_k + b.log_m_k - std::log(delta));
    b.d_k = std::exp(b.log_d_k);
    b.m_k = std::exp(b.log_m_k);
    // r * t / (2t - 2) = 1/2, so the n-dependence factors out as a square
    // root; n -> 4n then halves the bound bit-exactly.
    const double x = sigma * sigma * t / (static_cast<double>(n) * (t - 1.0));
    b.bound = std::exp(r * (b.log_d_k + std::log(2.0) - std::log(delta))) * std::sqrt(x);
    return b;
}

inline double bound_value(double d_t, double sigma, std::size_t n, double t, double delta) {
    return bound_terms(d_t, sigma, n, t, delta).bound;
}

// Per-run |held-out mean loss - train mean loss| for one agent, using each
// run's own lambda settings.
inline std::vector<double> run_gaps(const std::vector<TrainedSystem>& runs, const Dataset& train,
                                    const Dataset& heldout, std::size_t agent_id) {
    if (runs.empty()) throw std::invalid_argument("measure_gap: need at least 1 run");
    if (train.n == 0 || heldout.n == 0) throw std::invalid_argument("measure_gap: empty dataset");
    std::vector<double> gaps;
    for (const auto& run : runs) {
        if (agent_id < 1 || agent_id > run.agents.size()) throw std::invalid_argument("measure_gap: bad agent id");
        const auto tr = evaluate(run, train);
        const auto he = evaluate(run, heldout);
        gaps.push_back(std::abs(he[agent_id - 1].mean_loss - tr[agent_id - 1].mean_loss));
    }
    return gaps;
}

inline double measure_gap(const std::vector<TrainedSystem>& runs, const Dataset& train, const Dataset& heldout,
                          std::size_t agent_id) {
    const auto gaps = run_gaps(runs, train, heldout, agent_id);
    double s = 0.0;
    for (double g : gaps) s += g;
    return s / static_cast<double>(gaps.size());
}

struct BoundSettings {
    double t = 2.0;
    double delta = 0.05;
    SigmaMode sigma_mode = SigmaMode::range;
    // Range mode; defaults to [0, ln |A_k|].
    std::optional<std::pair<double, double>> loss_range;
    // Isotropic zero-mean prior; defaults to the largest squared Glorot
    // half-width of the agent's layers.
    std::optional<double> prior_variance;
    double variance_floor = default_variance_floor;
};

struct BoundReport {
    int schema_version = bound_report_schema_version;
    std::size_t agent_id = 0;
    std::size_t n = 0;
    double t = 0.0;
    double delta = 0.0;
    double sigma = 0.0;
    std::string sigma_mode;
    bool sigma_heuristic = false;
    double d_t = 0.0;
    double d_k = 0.0;
    double m_k = 0.0;
    double bound = 0.0;
    double log_d_k = 0.0;
    double log_m_k = 0.0;
    double log_bound = 0.0;
    double measured_gap = 0.0;
    bool holds = false;
    std::size_t runs = 0;
    std::size_t parameter_count = 0;
    std::string prior;
    double prior_variance = 0.0;
    std::string population_loss = "held-out mean loss (proxy)";
};

// Largest squared Glorot half-width 6 / (fan_in + fan_out) over the layers.
inline double glorot_scale_squared(const Mlp& net) {
    double v = 0.0;
    for (std::size_t l = 0; l + 1 < net.layer_dims.size(); ++l) {
        const auto fan = net.layer_dims[l] + net.layer_dims[l + 1];
        if (fan > 0) v = std::max(v, 6.0 / static_cast<double>(fan));
    }
    return v;
}

// Any ensemble of untrained weights has per-coordinate population variance at
// most this value, so the order-2 validity condition holds at initialization.
inline double default_prior_variance(const AgentParams& a) {
    return std::max(
        {glorot_scale_squared(a.encoder), glorot_scale_squared(a.policy), glorot_scale_squared(a.task_decoder)});
}

// Recomputes every derived field from (d_t, sigma, n, t, delta, gap) and
// throws if any stored value differs.
inline void check_report_consistency(const BoundReport& r) {
    const auto b = bound_terms(r.d_t, r.sigma, r.n, r.t, r.delta);
    const auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
    if (!same(b.d_k, r.d_k) || !same(b.m_k, r.m_k) || !same(b.bound, r.bound) || !same(b.log_bound, r.log_bound) ||
        !same(b.log_d_k, r.log_d_k) || !same(b.log_m_k, r.log_m_k) || r.holds != (r.bound >= r.measured_gap)) {
        throw std::logic_error("bound report is not self-consistent");
    }
}

inline BoundReport bound_report(const std::vector<TrainedSystem>& runs, const Dataset& train, const Dataset& heldout,
                                std::size_t agent_id, const BoundSettings& s) {
    if (!(s.t > 1.0)) throw std::invalid_argument("t must exceed 1");
    const auto post = fit_weight_posterior(runs, agent_id, s.variance_floor);
    const auto& ref = runs.front().agents.at(agent_id - 1);

    BoundReport r;
    r.agent_id = agent_id;
    r.n = train.n;
    r.t = s.t;
    r.delta = s.delta;
    r.runs = runs.size();
    r.parameter_count = post.dim();
    r.prior_variance = s.prior_variance ? *s.prior_variance : default_prior_variance(ref);
    r.prior = "isotropic Gaussian, mean 0, variance " + format_double(r.prior_variance);
    r.d_t = renyi_divergence_gauss(s.t, post, GaussianPrior::isotropic(post.dim(), r.prior_variance));

    SigmaEstimate sig;
    if (s.sigma_mode == SigmaMode::range) {
        const auto range = s.loss_range ? *s.loss_range
                                        : std::pair<double, double>{0.0, std::log(static_cast<double>(ref.action_count))};
        sig = estimate_sigma(range.first, range.second);
    } else {
        std::vector<double> losses;
        for (const auto& run : runs) {
            const auto ev = evaluate(run, train, true);
            const auto& v = ev[agent_id - 1].per_sample_loss;
            losses.insert(losses.end(), v.begin(), v.end());
        }
        sig = estimate_sigma(losses);
    }
    r.sigma = sig.sigma;
    r.sigma_mode = to_string(sig.mode);
    r.sigma_heuristic = sig.heuristic;

    const auto b = bound_terms(r.d_t, r.sigma, r.n, r.t, r.delta);
    r.d_k = b.d_k;
    r.m_k = b.m_k;
    r.bound = b.bound;
    r.log_d_k = b.log_d_k;
    r.log_m_k = b.log_m_k;
    r.log_bound = b.log_bound;
    r.measured_gap = measure_gap(runs, train, heldout, agent_id);
    r.holds = r.bound >= r.measured_gap;
    check_report_consistency(r);
    return r;
}

// Non-finite numbers are written as the strings "inf", "-inf" or "nan".
inline nlohmann::json json_number(double v) {
    if (std::isfinite(v)) return v;
    if (std::isnan(v)) return "nan";
    return v > 0 ? "inf" : "-inf";
}

inline nlohmann::ordered_json to_json(const BoundReport& r) {
    nlohmann::ordered_json j;
    j["schema_version"] = r.schema_version;
    j["agent_id"] = r.agent_id;
    j["n"] = r.n;
    j["t"] = r.t;
    j["delta"] = r.delta;
    j["sigma"] = r.sigma;
    j["sigma_mode"] = r.sigma_mode;
    j["sigma_heuristic"] = r.sigma_heuristic;
    j["d_t"] = json_number(r.d_t);
    j["d_k"] = json_number(r.d_k);
    j["m_k"] = json_number(r.m_k);
    j["bound"] = json_number(r.bound);
    j["log_d_k"] = json_number(r.log_d_k);
    j["log_m_k"] = json_number(r.log_m_k);
    j["log_bound"] = json_number(r.log_bound);
    j["measured_gap"] = r.measured_gap;
    j["holds"] = r.holds;
    j["runs"] = r.runs;
    j["parameter_count"] = r.parameter_count;
    j["prior"] = r.prior;
    j["prior_variance"] = r.prior_variance;
    j["population_loss"] = r.population_loss;
    return j;
}

} // namespace emcomm
