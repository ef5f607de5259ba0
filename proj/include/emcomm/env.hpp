#pragma once

// Synthetic cross-layer networking world.
//
// Two agents share one latent state. Agent 1 (application layer) watches the
// traffic process: an application class that follows a sticky Markov chain and
// a class-conditioned AR(1) traffic rate, binned into a demand level. Agent 2
// (physical layer) watches an independent Markov channel through its SNR.
// Agent 1 is asked for the demand level; agent 2 for a resource configuration
// T[demand][channel], which it cannot resolve without hearing from agent 1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emcomm/error.hpp"
#include "emcomm/rng.hpp"

namespace emcomm {

inline constexpr std::size_t app_agent = 1;
inline constexpr std::size_t phy_agent = 2;

struct EnvConfig {
    std::size_t app_classes = 5;
    std::size_t demand_levels = 4;
    std::size_t channel_levels = 4;
    std::size_t window = 8;
    double noise_scale = 0.1;

    double traffic_ar = 0.5;
    double app_stay_prob = 0.6;
    std::vector<double> app_rate_means{0.4, 1.2, 2.0, 2.8, 3.6};
    double rate_noise = 0.5;
    std::vector<double> demand_thresholds{1.0, 2.0, 3.0};

    std::vector<std::vector<double>> channel_transition{{0.7, 0.1, 0.1, 0.1},
                                                        {0.1, 0.7, 0.1, 0.1},
                                                        {0.1, 0.1, 0.7, 0.1},
                                                        {0.1, 0.1, 0.1, 0.7}};
    std::vector<double> snr_levels_db{0.0, 6.0, 12.0, 18.0};
    double snr_jitter_db = 0.5;
    double snr_offset_db = 10.0;
    double snr_scale_db = 10.0;
    // -1 draws the initial channel level uniformly.
    long initial_channel_level = -1;

    // resource_table[demand][channel]; default is the Latin square (d + g) mod 4.
    std::vector<std::vector<std::size_t>> resource_table{
        {0, 1, 2, 3}, {1, 2, 3, 0}, {2, 3, 0, 1}, {3, 0, 1, 2}};
    std::size_t resource_configs = 4;

    std::size_t burn_in = 64;
    std::size_t sample_stride = 1;

    std::vector<std::string> app_labels{"live_streaming", "video_conferencing",
                                        "mobile_gaming", "video_on_demand", "social_media"};
    double trace_bytes_per_unit = 1.0e6;
    std::uint64_t trace_channel_seed = 0;

    std::size_t agent_count() const { return 2; }

    std::size_t feature_dim(std::size_t agent_id) const {
        check_agent(agent_id);
        return agent_id == app_agent ? window + app_classes : window;
    }

    std::size_t label_cardinality(std::size_t agent_id) const {
        check_agent(agent_id);
        return agent_id == app_agent ? demand_levels : resource_configs;
    }

    void check_agent(std::size_t agent_id) const {
        if (agent_id != app_agent && agent_id != phy_agent) {
            throw std::invalid_argument("unknown agent_id " + std::to_string(agent_id) +
                                        " (expected 1 or 2)");
        }
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw config_error("env: " + m); };
        if (app_classes == 0 || demand_levels == 0 || channel_levels == 0) {
            fail("cardinalities must be positive");
        }
        if (window == 0) fail("window must be at least 1");
        if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)) fail("noise_scale must be >= 0");
        if (!(traffic_ar >= 0.0 && traffic_ar < 1.0)) fail("traffic_ar must lie in [0, 1)");
        if (!(app_stay_prob >= 0.0 && app_stay_prob <= 1.0)) fail("app_stay_prob must lie in [0, 1]");
        if (app_rate_means.size() != app_classes) fail("app_rate_means needs one entry per app class");
        if (!(rate_noise >= 0.0)) fail("rate_noise must be >= 0");
        if (demand_thresholds.size() + 1 != demand_levels) {
            fail("demand_thresholds needs demand_levels - 1 entries");
        }
        for (std::size_t i = 1; i < demand_thresholds.size(); ++i) {
            if (!(demand_thresholds[i] > demand_thresholds[i - 1])) {
                fail("demand_thresholds must be strictly increasing");
            }
        }
        if (channel_transition.size() != channel_levels) fail("channel_transition must be G x G");
        for (std::size_t r = 0; r < channel_levels; ++r) {
            const auto& row = channel_transition[r];
            if (row.size() != channel_levels) fail("channel_transition must be G x G");
            double sum = 0.0;
            for (double p : row) {
                if (!(p >= 0.0)) fail("channel_transition entries must be >= 0");
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-9) {
                fail("channel_transition row " + std::to_string(r) + " sums to " +
                     std::to_string(sum) + ", not 1");
            }
        }
        if (snr_levels_db.size() != channel_levels) fail("snr_levels_db needs one entry per channel level");
        if (!(snr_jitter_db >= 0.0)) fail("snr_jitter_db must be >= 0");
        if (!(snr_scale_db > 0.0)) fail("snr_scale_db must be > 0");
        if (initial_channel_level < -1 || initial_channel_level >= static_cast<long>(channel_levels)) {
            fail("initial_channel_level out of range");
        }
        if (resource_configs == 0) fail("resource_configs must be positive");
        if (resource_table.size() != demand_levels) fail("resource_table must be D x G");
        for (const auto& row : resource_table) {
            if (row.size() != channel_levels) fail("resource_table must be D x G");
            for (auto v : row) {
                if (v >= resource_configs) fail("resource_table entry exceeds resource_configs");
            }
        }
        if (sample_stride == 0) fail("sample_stride must be at least 1");
        if (app_labels.size() != app_classes) fail("app_labels needs one label per app class");
        if (!(trace_bytes_per_unit > 0.0)) fail("trace_bytes_per_unit must be > 0");
    }
};

struct GlobalState {
    std::size_t app_class = 0;
    std::size_t demand_level = 0;
    std::size_t channel_level = 0;
    double traffic_rate = 0.0;
    double snr = 0.0;
    std::uint64_t step_index = 0;
    // Most recent last. Not persisted in dataset files.
    std::vector<double> rate_window;
    std::vector<double> snr_window;
};

struct Observation {
    std::size_t agent_id = 0;
    std::vector<double> features;
    std::uint64_t noise_seed = 0;
};

struct TaskTarget {
    std::size_t agent_id = 0;
    std::size_t label = 0;
};

struct EnvSample {
    Observation observation;
    TaskTarget target;
    GlobalState global_truth;
};

struct Dataset {
    // samples[k][i]: agent k+1, aligned sample i.
    std::vector<std::vector<EnvSample>> samples;
    std::vector<std::size_t> feature_dims;
    std::vector<std::size_t> label_cardinalities;
    std::size_t n = 0;
    std::uint64_t seed = 0;

    std::size_t agent_count() const { return samples.size(); }

    void check_aligned() const {
        if (samples.size() != feature_dims.size() || samples.size() != label_cardinalities.size()) {
            throw std::invalid_argument("dataset: per-agent metadata size mismatch");
        }
        for (std::size_t k = 0; k < samples.size(); ++k) {
            if (samples[k].size() != n) throw std::invalid_argument("dataset: ragged agent lists");
            for (const auto& s : samples[k]) {
                if (s.observation.agent_id != k + 1 || s.target.agent_id != k + 1) {
                    throw std::invalid_argument("dataset: agent id mismatch");
                }
                if (s.observation.features.size() != feature_dims[k]) {
                    throw std::invalid_argument("dataset: feature dimension mismatch");
                }
                if (s.target.label >= label_cardinalities[k]) {
                    throw std::invalid_argument("dataset: label out of range");
                }
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 1; k < samples.size(); ++k) {
                if (samples[k][i].global_truth.step_index != samples[0][i].global_truth.step_index) {
                    throw std::invalid_argument("dataset: agents not aligned by step_index");
                }
            }
        }
    }
};

inline std::size_t demand_bin(const EnvConfig& cfg, double rate) {
    return static_cast<std::size_t>(
        std::upper_bound(cfg.demand_thresholds.begin(), cfg.demand_thresholds.end(), rate) -
        cfg.demand_thresholds.begin());
}

namespace detail {

inline std::size_t draw_row(const std::vector<double>& row, double u) {
    double acc = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
        acc += row[j];
        if (u < acc) return j;
    }
    // u landed in the rounding slack past the last nonzero entry
    for (std::size_t j = row.size(); j-- > 0;) {
        if (row[j] > 0.0) return j;
    }
    return row.size() - 1;
}

inline std::size_t next_app(const EnvConfig& cfg, std::size_t app, Rng& rng) {
    const double u = rng.uniform();
    if (cfg.app_classes == 1 || u < cfg.app_stay_prob) return app;
    std::size_t other = rng.index(cfg.app_classes - 1);
    return other >= app ? other + 1 : other;
}

inline double next_rate(const EnvConfig& cfg, double rate, std::size_t app, Rng& rng) {
    const double drive = (1.0 - cfg.traffic_ar) * cfg.app_rate_means[app];
    const double r = cfg.traffic_ar * rate + drive + cfg.rate_noise * rng.normal();
    return std::max(0.0, r);
}

inline double snr_for(const EnvConfig& cfg, std::size_t channel, Rng& rng) {
    return cfg.snr_levels_db[channel] + cfg.snr_jitter_db * rng.normal();
}

inline void push_window(std::vector<double>& w, double v) {
    std::rotate(w.begin(), w.begin() + 1, w.end());
    w.back() = v;
}

} // namespace detail

// Initial state: uniform app class at its mean rate; channel fixed or uniform.
inline GlobalState initial_global_state(const EnvConfig& cfg, Rng& traffic_rng, Rng& channel_rng) {
    GlobalState s;
    s.app_class = traffic_rng.index(cfg.app_classes);
    s.traffic_rate = std::max(0.0, cfg.app_rate_means[s.app_class]);
    s.demand_level = demand_bin(cfg, s.traffic_rate);
    s.channel_level = cfg.initial_channel_level >= 0
                          ? static_cast<std::size_t>(cfg.initial_channel_level)
                          : channel_rng.index(cfg.channel_levels);
    s.snr = detail::snr_for(cfg, s.channel_level, channel_rng);
    s.rate_window.assign(cfg.window, s.traffic_rate);
    s.snr_window.assign(cfg.window, s.snr);
    return s;
}

// One transition of the generative process. Traffic and channel draw from
// separate streams so the two factors stay independent.
inline GlobalState sample_global_state(const EnvConfig& cfg, const GlobalState& prev,
                                       Rng& traffic_rng, Rng& channel_rng) {
    GlobalState s = prev;
    s.step_index = prev.step_index + 1;
    s.app_class = detail::next_app(cfg, prev.app_class, traffic_rng);
    s.traffic_rate = detail::next_rate(cfg, prev.traffic_rate, s.app_class, traffic_rng);
    s.demand_level = demand_bin(cfg, s.traffic_rate);
    s.channel_level = detail::draw_row(cfg.channel_transition[prev.channel_level], channel_rng.uniform());
    s.snr = detail::snr_for(cfg, s.channel_level, channel_rng);
    if (s.rate_window.size() != cfg.window) s.rate_window.assign(cfg.window, prev.traffic_rate);
    if (s.snr_window.size() != cfg.window) s.snr_window.assign(cfg.window, prev.snr);
    detail::push_window(s.rate_window, s.traffic_rate);
    detail::push_window(s.snr_window, s.snr);
    return s;
}

class EnvSimulator {
  public:
    EnvSimulator(EnvConfig cfg, std::uint64_t seed)
        : cfg_(std::move(cfg)),
          traffic_rng_(stream_seed(seed, "env/traffic")),
          channel_rng_(stream_seed(seed, "env/channel")) {
        cfg_.validate();
        state_ = initial_global_state(cfg_, traffic_rng_, channel_rng_);
    }

    const GlobalState& state() const { return state_; }

    const GlobalState& step() {
        state_ = sample_global_state(cfg_, state_, traffic_rng_, channel_rng_);
        return state_;
    }

  private:
    EnvConfig cfg_;
    Rng traffic_rng_;
    Rng channel_rng_;
    GlobalState state_;
};

// Agent 1 sees the traffic-rate window plus a noisy one-hot app indicator;
// agent 2 sees the normalized SNR window. Both get N(0, noise_scale^2) noise.
inline Observation observe(const EnvConfig& cfg, const GlobalState& g, std::size_t agent_id,
                           double noise_scale, std::uint64_t noise_seed) {
    cfg.check_agent(agent_id);
    if (g.rate_window.size() != cfg.window || g.snr_window.size() != cfg.window) {
        throw std::invalid_argument("observe: state carries no observation window");
    }
    Observation o;
    o.agent_id = agent_id;
    o.noise_seed = noise_seed;
    if (agent_id == app_agent) {
        o.features = g.rate_window;
        for (std::size_t a = 0; a < cfg.app_classes; ++a) {
            o.features.push_back(a == g.app_class ? 1.0 : 0.0);
        }
    } else {
        o.features.reserve(cfg.window);
        for (double snr : g.snr_window) {
            o.features.push_back((snr - cfg.snr_offset_db) / cfg.snr_scale_db);
        }
    }
    if (noise_scale > 0.0) {
        Rng rng(noise_seed);
        for (double& f : o.features) f += noise_scale * rng.normal();
    }
    return o;
}

inline TaskTarget task_target(const EnvConfig& cfg, const GlobalState& g, std::size_t agent_id) {
    cfg.check_agent(agent_id);
    if (agent_id == app_agent) return {agent_id, g.demand_level};
    return {agent_id, cfg.resource_table[g.demand_level][g.channel_level]};
}

inline std::uint64_t observation_seed(std::uint64_t seed, std::size_t agent_id, std::uint64_t step) {
    return stream_seed(seed, "env/obs", agent_id, step);
}

namespace detail {

inline Dataset empty_dataset(const EnvConfig& cfg, std::uint64_t seed) {
    Dataset ds;
    ds.seed = seed;
    for (std::size_t k = 1; k <= cfg.agent_count(); ++k) {
        ds.feature_dims.push_back(cfg.feature_dim(k));
        ds.label_cardinalities.push_back(cfg.label_cardinality(k));
    }
    ds.samples.resize(cfg.agent_count());
    return ds;
}

inline void append_state(const EnvConfig& cfg, Dataset& ds, const GlobalState& g, std::uint64_t seed) {
    for (std::size_t k = 1; k <= cfg.agent_count(); ++k) {
        EnvSample s;
        s.observation = observe(cfg, g, k, cfg.noise_scale, observation_seed(seed, k, g.step_index));
        s.target = task_target(cfg, g, k);
        s.global_truth = g;
        s.global_truth.rate_window.clear();
        s.global_truth.snr_window.clear();
        ds.samples[k - 1].push_back(std::move(s));
    }
    ++ds.n;
}

} // namespace detail

inline Dataset make_dataset(const EnvConfig& cfg, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw std::invalid_argument("make_dataset: n must be at least 1");
    cfg.validate();
    EnvSimulator sim(cfg, seed);
    for (std::size_t i = 0; i < cfg.burn_in; ++i) sim.step();
    Dataset ds = detail::empty_dataset(cfg, seed);
    for (auto& v : ds.samples) v.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (i > 0) {
            for (std::size_t s = 0; s < cfg.sample_stride; ++s) sim.step();
        }
        detail::append_state(cfg, ds, sim.state(), seed);
    }
    return ds;
}

inline Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices) {
    Dataset out;
    out.feature_dims = ds.feature_dims;
    out.label_cardinalities = ds.label_cardinalities;
    out.seed = ds.seed;
    out.samples.resize(ds.agent_count());
    for (std::size_t k = 0; k < ds.agent_count(); ++k) {
        out.samples[k].reserve(indices.size());
        for (auto i : indices) out.samples[k].push_back(ds.samples[k].at(i));
    }
    out.n = indices.size();
    return out;
}

struct SplitResult {
    Dataset train;
    Dataset heldout;
};

// Random partition; each side keeps the original temporal order.
inline SplitResult split(const Dataset& ds, double holdout_fraction, std::uint64_t seed) {
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
        throw std::invalid_argument("split: holdout_fraction must lie in (0, 1)");
    }
    const auto held = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(ds.n)));
    if (held == 0 || held >= ds.n) {
        throw std::invalid_argument("split: dataset of size " + std::to_string(ds.n) +
                                    " too small for holdout_fraction");
    }
    std::vector<std::size_t> order(ds.n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(stream_seed(seed, "split"));
    for (std::size_t i = ds.n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    std::vector<std::size_t> heldout(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
    std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
    std::sort(heldout.begin(), heldout.end());
    std::sort(train.begin(), train.end());
    return {subset(ds, train), subset(ds, heldout)};
}

// Real traces: `timestamp,app_label,bytes_up,bytes_down`, one row per step.
// Each full window of W rows yields one sample labelled by its last row.
// Traces carry no PHY data, so the channel is synthesized from the configured
// Markov chain seeded by trace_channel_seed.
inline Dataset ingest_trace_csv(const std::string& path, const EnvConfig& cfg) {
    cfg.validate();
    std::ifstream in(path);
    if (!in) throw io_error("cannot open trace " + path);

    auto split_line = [](const std::string& line) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ss(line);
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        return cells;
    };
    auto trim = [](std::string s) {
        while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
        std::size_t b = 0;
        while (b < s.size() && s[b] == ' ') ++b;
        return s.substr(b);
    };

    std::string line;
    if (!std::getline(in, line)) throw format_error(path + ": no samples (empty file)");
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
    const auto header = split_line(trim(line));
    const std::vector<std::string> required{"timestamp", "app_label", "bytes_up", "bytes_down"};
    std::vector<std::size_t> col(required.size());
    for (std::size_t r = 0; r < required.size(); ++r) {
        std::size_t c = 0;
        while (c < header.size() && trim(header[c]) != required[r]) ++c;
        if (c == header.size()) throw format_error(path + ": line 1: missing column '" + required[r] + "'");
        col[r] = c;
    }

    auto parse_number = [&](const std::string& text, std::size_t lineno, const std::string& what) {
        const std::string t = trim(text);
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(t, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (t.empty() || used != t.size() || !std::isfinite(v)) {
            throw format_error(path + ": line " + std::to_string(lineno) + ": cannot parse " + what +
                               " '" + t + "'");
        }
        return v;
    };

    struct Row {
        std::size_t app;
        double rate;
    };
    std::vector<Row> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty()) continue;
        const auto cells = split_line(line);
        if (cells.size() != header.size()) {
            throw format_error(path + ": line " + std::to_string(lineno) + ": expected " +
                               std::to_string(header.size()) + " fields, got " +
                               std::to_string(cells.size()));
        }
        parse_number(cells[col[0]], lineno, "timestamp");
        const std::string label = trim(cells[col[1]]);
        auto it = std::find(cfg.app_labels.begin(), cfg.app_labels.end(), label);
        if (it == cfg.app_labels.end()) {
            std::string known;
            for (const auto& l : cfg.app_labels) known += (known.empty() ? "" : ", ") + l;
            throw format_error(path + ": line " + std::to_string(lineno) + ": unknown app_label '" +
                               label + "' (known: " + known + ")");
        }
        const double up = parse_number(cells[col[2]], lineno, "bytes_up");
        const double down = parse_number(cells[col[3]], lineno, "bytes_down");
        if (up < 0.0 || down < 0.0) {
            throw format_error(path + ": line " + std::to_string(lineno) + ": negative byte count");
        }
        rows.push_back({static_cast<std::size_t>(it - cfg.app_labels.begin()),
                        (up + down) / cfg.trace_bytes_per_unit});
    }
    if (rows.size() < cfg.window) {
        throw format_error(path + ": no samples (" + std::to_string(rows.size()) +
                           " rows, window needs " + std::to_string(cfg.window) + ")");
    }

    const std::uint64_t seed = cfg.trace_channel_seed;
    Rng unused(stream_seed(seed, "trace/unused"));
    Rng channel_rng(stream_seed(seed, "env/channel"));
    GlobalState g = initial_global_state(cfg, unused, channel_rng);
    Dataset ds = detail::empty_dataset(cfg, seed);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (i > 0) {
            g.channel_level = detail::draw_row(cfg.channel_transition[g.channel_level], channel_rng.uniform());
            g.snr = detail::snr_for(cfg, g.channel_level, channel_rng);
        }
        detail::push_window(g.snr_window, g.snr);
        detail::push_window(g.rate_window, rows[i].rate);
        g.step_index = i;
        g.app_class = rows[i].app;
        g.traffic_rate = rows[i].rate;
        g.demand_level = demand_bin(cfg, g.traffic_rate);
        if (i + 1 >= cfg.window) detail::append_state(cfg, ds, g, seed);
    }
    return ds;
}

// Stationary law of a finite Markov chain by power iteration.
inline std::vector<double> stationary_distribution(const std::vector<std::vector<double>>& transition,
                                                   double tol = 1e-15, std::size_t max_iter = 1000000) {
    const std::size_t n = transition.size();
    std::vector<double> p(n, 1.0 / static_cast<double>(n)), q(n);
    for (std::size_t it = 0; it < max_iter; ++it) {
        std::fill(q.begin(), q.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) q[j] += p[i] * transition[i][j];
        }
        // lazy averaging handles periodic chains
        double diff = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double v = 0.5 * (p[j] + q[j]);
            diff += std::abs(v - p[j]);
            p[j] = v;
        }
        if (diff < tol) break;
    }
    return p;
}

// Stationary demand-level law of the (app class, traffic rate) chain, obtained
// by iterating its transfer operator on a fine rate grid.
inline std::vector<double> stationary_demand_distribution(const EnvConfig& cfg, double grid_step = 0.01) {
    cfg.validate();
    const std::size_t A = cfg.app_classes;
    const double max_mean = *std::max_element(cfg.app_rate_means.begin(), cfg.app_rate_means.end());
    const double top = std::max(0.0, max_mean) + 8.0 * cfg.rate_noise + grid_step;
    const auto bins = static_cast<std::size_t>(std::ceil(top / grid_step));
    const std::size_t S = A * bins;

    // Target-bin masses of a clamped Gaussian. The first bin absorbs the clamp
    // at zero and the last bin the upper tail.
    auto bin_masses = [&](double mu, Eigen::VectorXd& out) {
        out.setZero(static_cast<Eigen::Index>(bins));
        if (cfg.rate_noise == 0.0) {
            const double r = std::max(0.0, mu);
            const auto j = std::min(bins - 1, static_cast<std::size_t>(r / grid_step));
            out[static_cast<Eigen::Index>(j)] = 1.0;
            return;
        }
        const double inv = 1.0 / (cfg.rate_noise * std::sqrt(2.0));
        auto cdf = [&](double x) { return 0.5 * std::erfc(-(x - mu) * inv); };
        double prev = 0.0;
        for (std::size_t j = 0; j + 1 < bins; ++j) {
            const double c = cdf(static_cast<double>(j + 1) * grid_step);
            out[static_cast<Eigen::Index>(j)] = c - prev;
            prev = c;
        }
        out[static_cast<Eigen::Index>(bins - 1)] = 1.0 - prev;
    };

    std::vector<std::vector<double>> app_t(A, std::vector<double>(A, 0.0));
    for (std::size_t a = 0; a < A; ++a) {
        for (std::size_t b = 0; b < A; ++b) {
            if (A == 1) {
                app_t[a][b] = 1.0;
            } else {
                app_t[a][b] = a == b ? cfg.app_stay_prob : (1.0 - cfg.app_stay_prob) / static_cast<double>(A - 1);
            }
        }
    }

    // kernel[b](to, from): rate transition when the next app class is b.
    std::vector<Eigen::MatrixXd> kernel(A);
    Eigen::VectorXd masses;
    for (std::size_t b = 0; b < A; ++b) {
        kernel[b].resize(static_cast<Eigen::Index>(bins), static_cast<Eigen::Index>(bins));
        for (std::size_t i = 0; i < bins; ++i) {
            const double r = (static_cast<double>(i) + 0.5) * grid_step;
            const double mu = cfg.traffic_ar * r + (1.0 - cfg.traffic_ar) * cfg.app_rate_means[b];
            bin_masses(mu, masses);
            kernel[b].col(static_cast<Eigen::Index>(i)) = masses;
        }
    }

    std::vector<Eigen::VectorXd> p(A, Eigen::VectorXd::Constant(static_cast<Eigen::Index>(bins),
                                                                1.0 / static_cast<double>(S)));
    std::vector<Eigen::VectorXd> next(A);
    for (std::size_t it = 0; it < 100000; ++it) {
        double diff = 0.0;
        for (std::size_t b = 0; b < A; ++b) {
            Eigen::VectorXd mixed = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(bins));
            for (std::size_t a = 0; a < A; ++a) mixed += app_t[a][b] * p[a];
            next[b] = 0.5 * (p[b] + kernel[b] * mixed);
            diff += (next[b] - p[b]).lpNorm<1>();
        }
        p.swap(next);
        if (diff < 1e-14) break;
    }

    std::vector<double> demand(cfg.demand_levels, 0.0);
    for (std::size_t a = 0; a < A; ++a) {
        for (std::size_t i = 0; i < bins; ++i) {
            const double r = (static_cast<double>(i) + 0.5) * grid_step;
            demand[demand_bin(cfg, r)] += p[a][static_cast<Eigen::Index>(i)];
        }
    }
    const double total = std::accumulate(demand.begin(), demand.end(), 0.0);
    for (double& d : demand) d /= total;
    return demand;
}

// Bayes-optimal accuracy of agent 2's resource task at the latent level: the
// agent knows its channel level exactly and, with communication, the demand
// level too. Demand and channel are independent under the stationary law, so
// the joint is enumerated as a D x G product table.
inline double bayes_oracle_accuracy(const EnvConfig& cfg, bool with_communication) {
    cfg.validate();
    const double states = static_cast<double>(cfg.app_classes) * static_cast<double>(cfg.demand_levels) *
                          static_cast<double>(cfg.channel_levels);
    if (states > 1e6) throw config_error("bayes oracle: state space too large to enumerate");
    const auto pd = stationary_demand_distribution(cfg);
    const auto pg = stationary_distribution(cfg.channel_transition);
    double acc = 0.0;
    for (std::size_t g = 0; g < cfg.channel_levels; ++g) {
        if (with_communication) {
            // label is a deterministic function of (d, g)
            for (std::size_t d = 0; d < cfg.demand_levels; ++d) acc += pd[d] * pg[g];
            continue;
        }
        std::vector<double> score(cfg.resource_configs, 0.0);
        for (std::size_t d = 0; d < cfg.demand_levels; ++d) score[cfg.resource_table[d][g]] += pd[d];
        acc += pg[g] * *std::max_element(score.begin(), score.end());
    }
    return acc;
}

} // namespace emcomm
