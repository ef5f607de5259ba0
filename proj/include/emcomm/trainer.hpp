#pragma once

#include <cmath>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "emcomm/agents.hpp"
#include "emcomm/dib.hpp"
#include "emcomm/env.hpp"
#include "emcomm/nn.hpp"

namespace emcomm {

enum class BaselineMode { none, ec_sota };

inline const char* to_string(BaselineMode m) { return m == BaselineMode::ec_sota ? "ec-sota" : "none"; }

struct TrainConfig {
    ModelConfig model;
    // One value applies to every agent; otherwise one value per agent.
    std::vector<double> lambda_t{0.5};
    std::vector<double> lambda_c{0.01};
    OptimizerSettings optimizer;
    std::size_t batch_size = 64;
    std::size_t iterations = 10000;
    std::size_t eval_interval = 100;
    std::uint64_t seed = 0;
    double holdout_fraction = 0.25;
    double divergence_threshold = 1e3;
    BaselineMode baseline = BaselineMode::none;
    // Held-out samples used for the baseline's per-iteration reconstruction error.
    std::size_t recon_eval_samples = 256;

    void validate() const {
        model.validate();
        if (batch_size < 1) throw config_error("train: batch_size must be at least 1");
        if (iterations < 1) throw config_error("train: iterations must be at least 1");
        if (eval_interval < 1) throw config_error("train: eval_interval must be at least 1");
        if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
            throw config_error("train: holdout_fraction must lie in (0, 1)");
        }
        if (!(optimizer.learning_rate > 0.0)) throw config_error("train: learning_rate must be > 0");
        if (!(divergence_threshold > 0.0)) throw config_error("train: divergence_threshold must be > 0");
        for (const auto* v : {&lambda_t, &lambda_c}) {
            if (v->empty()) throw config_error("train: lambda lists must not be empty");
            for (double x : *v) {
                if (!(x >= 0.0) || !std::isfinite(x)) throw config_error("train: lambdas must be finite and >= 0");
            }
        }
    }

    static std::vector<double> per_agent(const std::vector<double>& v, std::size_t agents, const char* name) {
        if (v.size() == 1) return std::vector<double>(agents, v[0]);
        if (v.size() != agents) {
            throw config_error(std::string("train: ") + name + " needs 1 or " + std::to_string(agents) + " values");
        }
        return v;
    }

    std::vector<double> lambda_t_for(std::size_t agents) const { return per_agent(lambda_t, agents, "lambda_t"); }
    std::vector<double> lambda_c_for(std::size_t agents) const { return per_agent(lambda_c, agents, "lambda_c"); }
};

struct MetricsRow {
    std::size_t iteration = 0;
    std::size_t agent_id = 0;
    double task_loss = 0.0;
    double relevance = 0.0;
    double complexity = 0.0;
    double total = 0.0;
    double train_accuracy = 0.0;
    double heldout_accuracy = 0.0;
    // Not part of the metrics CSV; feeds the generalization-gap curve.
    double heldout_total = 0.0;
};

struct TrainedSystem {
    std::vector<AgentParams> agents;
    std::vector<MetricsRow> final_metrics;
    TrainConfig config;
    std::uint64_t seed = 0;
};

struct TrainResult {
    TrainedSystem system;
    std::vector<MetricsRow> metrics;
    // Baseline only: held-out reconstruction error after every stage-1 step.
    std::vector<double> reconstruction_heldout;
};

struct AgentEval {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    LossBreakdown breakdown;
    std::vector<double> per_sample_loss;
};

namespace detail {

inline std::vector<AgentParams> init_agents(const TrainConfig& cfg, const Dataset& ds) {
    std::vector<AgentParams> agents;
    const std::size_t K = ds.agent_count();
    for (std::size_t k = 1; k <= K; ++k) {
        Rng rng(stream_seed(cfg.seed, "init", k));
        agents.push_back(make_agent(k, K, ds.feature_dims[k - 1], ds.label_cardinalities[k - 1], cfg.model, rng));
    }
    return agents;
}

inline std::vector<Matrix> draw_noise(const std::vector<AgentParams>& agents, std::size_t cols, Rng& rng) {
    std::vector<Matrix> noise;
    for (const auto& a : agents) {
        Matrix m(static_cast<Eigen::Index>(a.message_width()), static_cast<Eigen::Index>(cols));
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.normal();
        }
        noise.push_back(std::move(m));
    }
    return noise;
}

inline void check_divergence(const JointLossResult& res, std::size_t iteration, double threshold) {
    for (std::size_t k = 0; k < res.breakdown.size(); ++k) {
        const auto& b = res.breakdown[k];
        const std::string who = "agent " + std::to_string(k + 1) + " ";
        const std::pair<const char*, double> terms[] = {
            {"task_loss", b.task_loss}, {"relevance", b.relevance}, {"complexity", b.complexity}, {"total", b.total}};
        for (const auto& [name, v] : terms) {
            if (!std::isfinite(v)) {
                throw divergence_error(who + name, "iteration " + std::to_string(iteration) + ": " + who + name +
                                                       " is not finite");
            }
        }
        for (const auto& [name, v] : terms) {
            if (std::abs(v) > threshold) {
                throw divergence_error(who + name, "iteration " + std::to_string(iteration) + ": " + who + name +
                                                       " = " + std::to_string(v) + " exceeds divergence threshold " +
                                                       std::to_string(threshold));
            }
        }
    }
}

inline std::vector<std::size_t> draw_indices(std::size_t n, std::size_t count, Rng& rng) {
    std::vector<std::size_t> idx(count);
    for (auto& i : idx) i = rng.index(n);
    return idx;
}

inline void check_dataset_for(const std::vector<AgentParams>& agents, const Dataset& ds) {
    if (ds.agent_count() != agents.size()) {
        throw std::invalid_argument("dataset has " + std::to_string(ds.agent_count()) + " agents, system has " +
                                    std::to_string(agents.size()));
    }
    for (std::size_t k = 0; k < agents.size(); ++k) {
        if (ds.feature_dims[k] != agents[k].obs_dim || ds.label_cardinalities[k] != agents[k].label_count) {
            throw std::invalid_argument("dataset does not match agent " + std::to_string(k + 1));
        }
    }
    if (ds.n == 0) throw std::invalid_argument("empty dataset");
}

} // namespace detail

// Deterministic inference: mean messages (unless the model samples at
// inference), argmax actions, configured lambdas for the loss.
inline std::vector<AgentEval> evaluate(const TrainedSystem& sys, const Dataset& ds, bool keep_per_sample = false) {
    detail::check_dataset_for(sys.agents, ds);
    const std::size_t K = sys.agents.size();
    const auto lt = sys.config.lambda_t_for(K);
    const auto lc = sys.config.lambda_c_for(K);
    JointLossOptions opt;
    opt.compute_gradients = false;
    opt.keep_per_sample = keep_per_sample;
    opt.message_bits = sys.config.model.message_bits;
    opt.quant_range = sys.config.model.quant_range;
    std::vector<Matrix> noise;
    opt.mode = MessageMode::mean;
    const JointBatch batch = full_batch(ds);
    if (sys.config.model.sample_at_inference) {
        Rng rng(stream_seed(sys.seed, "eval/noise"));
        noise = detail::draw_noise(sys.agents, ds.n, rng);
        opt.mode = MessageMode::sampled;
    }
    const auto res = joint_loss(sys.agents, batch, lt, lc, noise.empty() ? nullptr : &noise, opt);
    std::vector<AgentEval> out(K);
    for (std::size_t k = 0; k < K; ++k) {
        out[k].accuracy = static_cast<double>(res.correct[k]) / static_cast<double>(ds.n);
        out[k].mean_loss = res.breakdown[k].total;
        out[k].breakdown = res.breakdown[k];
        if (keep_per_sample) out[k].per_sample_loss = res.per_sample_total[k];
    }
    return out;
}

namespace detail {

inline std::vector<MetricsRow> metrics_at(const TrainedSystem& sys, const Dataset& train, const Dataset& heldout,
                                          std::size_t iteration) {
    const auto tr = evaluate(sys, train);
    const auto he = evaluate(sys, heldout);
    std::vector<MetricsRow> rows;
    for (std::size_t k = 0; k < tr.size(); ++k) {
        MetricsRow r;
        r.iteration = iteration;
        r.agent_id = k + 1;
        r.task_loss = tr[k].breakdown.task_loss;
        r.relevance = tr[k].breakdown.relevance;
        r.complexity = tr[k].breakdown.complexity;
        r.total = tr[k].breakdown.total;
        r.train_accuracy = tr[k].accuracy;
        r.heldout_accuracy = he[k].accuracy;
        r.heldout_total = he[k].breakdown.total;
        for (double v : {r.task_loss, r.relevance, r.complexity, r.total, r.heldout_total}) {
            if (!std::isfinite(v)) {
                throw divergence_error("agent " + std::to_string(k + 1) + " evaluation",
                                       "non-finite evaluation loss at iteration " + std::to_string(iteration));
            }
        }
        rows.push_back(r);
    }
    return rows;
}

inline bool is_eval_point(std::size_t it, const TrainConfig& cfg) {
    return it % cfg.eval_interval == 0 || it == cfg.iterations;
}

} // namespace detail

// Minibatch optimization of sum_k total_k with reparameterized messages.
inline TrainResult train_joint(const TrainConfig& cfg, const Dataset& train, const Dataset& heldout) {
    cfg.validate();
    train.check_aligned();
    heldout.check_aligned();
    TrainResult out;
    auto& sys = out.system;
    sys.config = cfg;
    sys.seed = cfg.seed;
    sys.agents = detail::init_agents(cfg, train);
    detail::check_dataset_for(sys.agents, heldout);
    const std::size_t K = sys.agents.size();
    const auto lt = cfg.lambda_t_for(K);
    const auto lc = cfg.lambda_c_for(K);

    OptimizerState opt(cfg.optimizer);
    Rng batch_rng(stream_seed(cfg.seed, "batch"));
    Rng noise_rng(stream_seed(cfg.seed, "noise"));
    for (std::size_t it = 1; it <= cfg.iterations; ++it) {
        const auto idx = detail::draw_indices(train.n, cfg.batch_size, batch_rng);
        const JointBatch batch = make_batch(train, idx);
        const auto noise = detail::draw_noise(sys.agents, cfg.batch_size, noise_rng);
        const auto res = joint_loss(sys.agents, batch, lt, lc, &noise);
        detail::check_divergence(res, it, cfg.divergence_threshold);

        ParamBlocks params;
        ConstBlocks grads;
        for (std::size_t k = 0; k < K; ++k) {
            sys.agents[k].append_blocks(params);
            res.gradients[k].append_blocks(grads);
        }
        optimizer_step(opt, params, grads);

        if (detail::is_eval_point(it, cfg)) {
            auto rows = detail::metrics_at(sys, train, heldout, it);
            out.metrics.insert(out.metrics.end(), rows.begin(), rows.end());
            sys.final_metrics = std::move(rows);
        }
    }
    return out;
}

namespace detail {

struct ReconResult {
    double loss = 0.0;
    Gradients recon;
    Gradients encoder;
};

// Mean squared reconstruction error of the autoencoder formed by the
// encoder's mean head and the reconstruction head.
inline ReconResult reconstruction_loss(const AgentParams& a, const Matrix& x, bool grads) {
    ForwardCache enc_cache, rec_cache;
    const auto w = static_cast<Eigen::Index>(a.message_width());
    const Matrix enc = forward(a.encoder, x, grads ? &enc_cache : nullptr);
    const Matrix latent = enc.topRows(w);
    const Matrix recon = forward(*a.reconstruction, latent, grads ? &rec_cache : nullptr);
    const Matrix diff = recon - x;
    const double scale = 1.0 / static_cast<double>(x.size());
    ReconResult r;
    r.loss = diff.squaredNorm() * scale;
    if (!grads) return r;
    r.recon = Gradients::zeros_like(*a.reconstruction);
    r.encoder = Gradients::zeros_like(a.encoder);
    Matrix d_latent;
    backward_accumulate(*a.reconstruction, rec_cache, 2.0 * scale * diff, r.recon, &d_latent);
    Matrix d_enc = Matrix::Zero(enc.rows(), enc.cols());
    d_enc.topRows(w) = d_latent;
    backward_accumulate(a.encoder, enc_cache, d_enc, r.encoder);
    return r;
}

} // namespace detail

// Two-stage modular baseline. Stage 1 trains each agent's encoder as an
// autoencoder with no task signal; stage 2 freezes the encoders and trains
// the decision heads on the frozen latents (mean messages). The gradient-step
// budget equals the joint run's, split evenly.
inline TrainResult train_baseline_ec_sota(const TrainConfig& cfg, const Dataset& train, const Dataset& heldout) {
    cfg.validate();
    train.check_aligned();
    heldout.check_aligned();
    TrainResult out;
    auto& sys = out.system;
    sys.config = cfg;
    sys.config.baseline = BaselineMode::ec_sota;
    sys.seed = cfg.seed;
    sys.agents = detail::init_agents(cfg, train);
    detail::check_dataset_for(sys.agents, heldout);
    const std::size_t K = sys.agents.size();
    for (std::size_t k = 0; k < K; ++k) {
        auto& a = sys.agents[k];
        Rng rng(stream_seed(cfg.seed, "init/recon", k + 1));
        std::vector<std::size_t> hidden(cfg.model.encoder_hidden.rbegin(), cfg.model.encoder_hidden.rend());
        a.reconstruction = Mlp::glorot(detail::with_hidden(a.message_width(), hidden, a.obs_dim), rng);
    }
    const auto lt = cfg.lambda_t_for(K);
    const auto lc = cfg.lambda_c_for(K);

    const std::size_t stage1 = cfg.iterations / 2;
    Rng batch_rng(stream_seed(cfg.seed, "batch"));

    std::vector<std::size_t> recon_idx(std::min(cfg.recon_eval_samples, heldout.n));
    std::iota(recon_idx.begin(), recon_idx.end(), std::size_t{0});
    const JointBatch recon_batch = make_batch(heldout, recon_idx);

    OptimizerState opt1(cfg.optimizer);
    for (std::size_t it = 1; it <= stage1; ++it) {
        const auto idx = detail::draw_indices(train.n, cfg.batch_size, batch_rng);
        const JointBatch batch = make_batch(train, idx);
        ParamBlocks params;
        ConstBlocks grads;
        std::vector<detail::ReconResult> results;
        results.reserve(K);
        for (std::size_t k = 0; k < K; ++k) {
            results.push_back(detail::reconstruction_loss(sys.agents[k], batch.features[k], true));
            if (!std::isfinite(results.back().loss) || results.back().loss > cfg.divergence_threshold) {
                throw divergence_error("agent " + std::to_string(k + 1) + " reconstruction",
                                       "iteration " + std::to_string(it) + ": agent " + std::to_string(k + 1) +
                                           " reconstruction loss diverged");
            }
        }
        for (std::size_t k = 0; k < K; ++k) {
            sys.agents[k].encoder.append_blocks(params);
            sys.agents[k].reconstruction->append_blocks(params);
            results[k].encoder.append_blocks(grads);
            results[k].recon.append_blocks(grads);
        }
        optimizer_step(opt1, params, grads);

        double held = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            held += detail::reconstruction_loss(sys.agents[k], recon_batch.features[k], false).loss;
        }
        out.reconstruction_heldout.push_back(held / static_cast<double>(K));

        if (detail::is_eval_point(it, cfg)) {
            auto rows = detail::metrics_at(sys, train, heldout, it);
            out.metrics.insert(out.metrics.end(), rows.begin(), rows.end());
            sys.final_metrics = std::move(rows);
        }
    }

    JointLossOptions frozen;
    frozen.mode = MessageMode::mean;
    frozen.freeze_encoders = true;
    OptimizerState opt2(cfg.optimizer);
    for (std::size_t it = stage1 + 1; it <= cfg.iterations; ++it) {
        const auto idx = detail::draw_indices(train.n, cfg.batch_size, batch_rng);
        const JointBatch batch = make_batch(train, idx);
        const auto res = joint_loss(sys.agents, batch, lt, lc, nullptr, frozen);
        detail::check_divergence(res, it, cfg.divergence_threshold);
        ParamBlocks params;
        ConstBlocks grads;
        for (std::size_t k = 0; k < K; ++k) {
            auto& a = sys.agents[k];
            const auto& g = res.gradients[k];
            a.policy.append_blocks(params);
            a.task_decoder.append_blocks(params);
            g.policy.append_blocks(grads);
            g.task_decoder.append_blocks(grads);
            if (a.learnable_prior) {
                params.push_back(block_of(a.prior.mean));
                params.push_back(block_of(a.prior.log_variance));
                grads.push_back(block_of(g.prior_mean));
                grads.push_back(block_of(g.prior_log_variance));
            }
        }
        optimizer_step(opt2, params, grads);

        if (detail::is_eval_point(it, cfg)) {
            auto rows = detail::metrics_at(sys, train, heldout, it);
            out.metrics.insert(out.metrics.end(), rows.begin(), rows.end());
            sys.final_metrics = std::move(rows);
        }
    }
    return out;
}

// Train/held-out partition shared by every run on the same dataset.
inline SplitResult training_split(const Dataset& ds, double holdout_fraction) {
    return split(ds, holdout_fraction, stream_seed(ds.seed, "split"));
}

inline TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset& heldout) {
    return cfg.baseline == BaselineMode::ec_sota ? train_baseline_ec_sota(cfg, train_set, heldout)
                                                 : train_joint(cfg, train_set, heldout);
}

// ---------------------------------------------------------------- CSV output

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline constexpr const char* metrics_csv_header =
    "iteration,agent_id,task_loss,relevance,complexity,total,train_accuracy,heldout_accuracy";

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    std::string s = std::string(metrics_csv_header) + "\n";
    for (const auto& r : rows) {
        s += std::to_string(r.iteration) + "," + std::to_string(r.agent_id) + "," + format_double(r.task_loss) + "," +
             format_double(r.relevance) + "," + format_double(r.complexity) + "," + format_double(r.total) + "," +
             format_double(r.train_accuracy) + "," + format_double(r.heldout_accuracy) + "\n";
    }
    return s;
}

inline std::string gap_csv(const std::vector<MetricsRow>& rows) {
    std::string s = "iteration,agent_id,train_total,heldout_total,gap\n";
    for (const auto& r : rows) {
        s += std::to_string(r.iteration) + "," + std::to_string(r.agent_id) + "," + format_double(r.total) + "," +
             format_double(r.heldout_total) + "," + format_double(std::abs(r.heldout_total - r.total)) + "\n";
    }
    return s;
}

} // namespace emcomm
