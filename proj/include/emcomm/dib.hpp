#pragma once

// Joint objective per agent k, over a batch of aligned samples:
//
//   total_k = task_k - lambda_t[k] * relevance_k + lambda_c[k] * complexity_k
//
//   task_k        cross-entropy of the policy's action logits vs the label
//   relevance_k   mean log r_t(y_k | received messages)      (<= 0)
//   complexity_k  mean KL(rho(C | s_k) || r_c)                (>= 0)
//
// One message round runs inside joint_loss: every agent encodes, samples
// with the supplied noise (or takes the mean), then every agent decides.
// Gradients are of sum_k total_k and include the cross-agent paths through
// received payloads back into the senders' encoders.

#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "emcomm/agents.hpp"
#include "emcomm/env.hpp"
#include "emcomm/wire.hpp"

namespace emcomm {

struct LossBreakdown {
    double task_loss = 0.0;
    double relevance = 0.0;
    double complexity = 0.0;
    double lambda_t = 0.0;
    double lambda_c = 0.0;
    double total = 0.0;
};

// Closed-form KL between diagonal Gaussians, in nats.
inline double kl_gauss_diag(const DiagGaussian& dist, const DiagGaussian& prior) {
    if (dist.dim() != prior.dim() || dist.log_variance.size() != prior.log_variance.size() ||
        dist.mean.size() != dist.log_variance.size()) {
        throw std::invalid_argument("kl_gauss_diag: dimension mismatch");
    }
    double kl = 0.0;
    for (Eigen::Index i = 0; i < dist.mean.size(); ++i) {
        const double dlv = dist.log_variance[i] - prior.log_variance[i];
        const double diff = dist.mean[i] - prior.mean[i];
        kl += 0.5 * (std::exp(dlv) + diff * diff * std::exp(-prior.log_variance[i]) - 1.0 - dlv);
    }
    return kl;
}

struct JointBatch {
    std::vector<Matrix> features;                 // per agent, obs_dim x B
    std::vector<std::vector<std::size_t>> labels; // per agent, B

    std::size_t size() const { return labels.empty() ? 0 : labels.front().size(); }
};

inline JointBatch make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
    JointBatch b;
    const auto cols = static_cast<Eigen::Index>(indices.size());
    for (std::size_t k = 0; k < ds.agent_count(); ++k) {
        Matrix x(static_cast<Eigen::Index>(ds.feature_dims[k]), cols);
        std::vector<std::size_t> y(indices.size());
        for (std::size_t c = 0; c < indices.size(); ++c) {
            const auto& s = ds.samples[k].at(indices[c]);
            if (s.observation.features.size() != ds.feature_dims[k]) {
                throw std::invalid_argument("make_batch: feature dimension mismatch");
            }
            x.col(static_cast<Eigen::Index>(c)) =
                Eigen::Map<const Vector>(s.observation.features.data(), x.rows());
            y[c] = s.target.label;
        }
        b.features.push_back(std::move(x));
        b.labels.push_back(std::move(y));
    }
    return b;
}

inline JointBatch full_batch(const Dataset& ds) {
    std::vector<std::size_t> idx(ds.n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return make_batch(ds, idx);
}

enum class MessageMode { sampled, mean };

struct JointLossOptions {
    MessageMode mode = MessageMode::sampled;
    bool compute_gradients = true;
    // Encoders are treated as constants: no encoder gradients.
    bool freeze_encoders = false;
    // Inference-only payload quantization (ignored when computing gradients).
    unsigned message_bits = 0;
    double quant_range = 4.0;
    bool keep_per_sample = false;
};

struct JointLossResult {
    std::vector<LossBreakdown> breakdown;
    std::vector<AgentGradients> gradients;
    std::vector<std::size_t> correct;
    std::vector<std::vector<double>> per_sample_total;

    double total() const {
        double t = 0.0;
        for (const auto& b : breakdown) t += b.total;
        return t;
    }
};

namespace detail {

inline void check_lambdas(std::size_t agents, std::span<const double> lt, std::span<const double> lc) {
    if (lt.size() != agents || lc.size() != agents) {
        throw std::invalid_argument("joint_loss: need one lambda_t and lambda_c per agent");
    }
    for (std::size_t k = 0; k < agents; ++k) {
        if (!(lt[k] >= 0.0) || !(lc[k] >= 0.0)) throw std::invalid_argument("joint_loss: lambdas must be >= 0");
    }
}

// Rows of sender j's payload batch that go to receiver k.
inline auto head_rows(const AgentParams& sender, std::size_t receiver, const Matrix& payload) {
    return payload.middleRows(static_cast<Eigen::Index>(sender.head_for(receiver) * sender.message_dim),
                              static_cast<Eigen::Index>(sender.message_dim));
}

} // namespace detail

inline JointLossResult joint_loss(const std::vector<AgentParams>& agents, const JointBatch& batch,
                                  std::span<const double> lambda_t, std::span<const double> lambda_c,
                                  const std::vector<Matrix>* noise, const JointLossOptions& opt = {}) {
    const std::size_t K = agents.size();
    const std::size_t B = batch.size();
    if (K == 0 || batch.features.size() != K || batch.labels.size() != K) {
        throw std::invalid_argument("joint_loss: batch does not match the agent set");
    }
    if (B == 0) throw std::invalid_argument("joint_loss: empty batch");
    detail::check_lambdas(K, lambda_t, lambda_c);
    for (std::size_t k = 0; k < K; ++k) {
        const auto& a = agents[k];
        if (a.agent_id != k + 1 || a.agent_count != K) throw std::invalid_argument("joint_loss: agent ids must be 1..K");
        if (a.message_dim != agents[0].message_dim) throw std::invalid_argument("joint_loss: message_dim differs across agents");
        if (static_cast<std::size_t>(batch.features[k].rows()) != a.obs_dim ||
            static_cast<std::size_t>(batch.features[k].cols()) != B || batch.labels[k].size() != B) {
            throw std::invalid_argument("joint_loss: batch shape mismatch for agent " + std::to_string(k + 1));
        }
        for (auto y : batch.labels[k]) {
            if (y >= a.label_count) throw std::invalid_argument("joint_loss: label out of range");
        }
    }
    if (opt.mode == MessageMode::sampled) {
        if (!noise || noise->size() != K) throw std::invalid_argument("joint_loss: sampled mode needs per-agent noise");
        for (std::size_t k = 0; k < K; ++k) {
            if (static_cast<std::size_t>((*noise)[k].rows()) != agents[k].message_width() ||
                static_cast<std::size_t>((*noise)[k].cols()) != B) {
                throw std::invalid_argument("joint_loss: noise shape mismatch for agent " + std::to_string(k + 1));
            }
        }
    }

    const double inv_b = 1.0 / static_cast<double>(B);
    const bool grads = opt.compute_gradients;

    // Phase 1: every agent encodes and emits its payload.
    std::vector<ForwardCache> enc_cache(K);
    std::vector<Matrix> mean(K), raw_lv(K), lv(K), scale(K), payload(K);
    for (std::size_t k = 0; k < K; ++k) {
        const auto w = static_cast<Eigen::Index>(agents[k].message_width());
        Matrix out = forward(agents[k].encoder, batch.features[k], grads ? &enc_cache[k] : nullptr);
        mean[k] = out.topRows(w);
        raw_lv[k] = out.bottomRows(w);
        lv[k] = clamp_log_variance(raw_lv[k]);
        scale[k] = (0.5 * lv[k].array()).exp().matrix();
        if (opt.mode == MessageMode::sampled) {
            payload[k] = mean[k] + scale[k].cwiseProduct((*noise)[k]);
        } else {
            payload[k] = mean[k];
        }
        if (!grads && opt.message_bits != 0) {
            for (Eigen::Index c = 0; c < payload[k].cols(); ++c) {
                std::vector<double> col(payload[k].col(c).data(), payload[k].col(c).data() + w);
                const auto deq = dequantize(quantize(col, opt.message_bits, opt.quant_range), opt.message_bits,
                                            opt.quant_range);
                for (Eigen::Index r = 0; r < w; ++r) payload[k](r, c) = deq[static_cast<std::size_t>(r)];
            }
        }
    }

    JointLossResult res;
    res.breakdown.resize(K);
    res.correct.assign(K, 0);
    if (opt.keep_per_sample) res.per_sample_total.assign(K, std::vector<double>(B, 0.0));
    std::vector<Matrix> d_payload(K);
    if (grads) {
        res.gradients.reserve(K);
        for (std::size_t k = 0; k < K; ++k) {
            res.gradients.push_back(AgentGradients::zeros_like(agents[k]));
            d_payload[k] = Matrix::Zero(payload[k].rows(), payload[k].cols());
        }
    }

    // Phase 2: every agent decides on its own observation plus what it received.
    for (std::size_t k = 0; k < K; ++k) {
        const auto& a = agents[k];
        const auto& y = batch.labels[k];
        const auto md = static_cast<Eigen::Index>(a.message_dim);
        const auto obs = static_cast<Eigen::Index>(a.obs_dim);

        Matrix received(static_cast<Eigen::Index>(a.received_dim()), static_cast<Eigen::Index>(B));
        {
            Eigen::Index row = 0;
            for (std::size_t j = 0; j < K; ++j) {
                if (j == k) continue;
                received.middleRows(row, md) = detail::head_rows(agents[j], k + 1, payload[j]);
                row += md;
            }
        }
        Matrix policy_in(obs + received.rows(), static_cast<Eigen::Index>(B));
        policy_in.topRows(obs) = batch.features[k];
        policy_in.bottomRows(received.rows()) = received;

        ForwardCache pol_cache, dec_cache;
        const Matrix logits = forward(a.policy, policy_in, grads ? &pol_cache : nullptr);
        const Matrix dec_logits = forward(a.task_decoder, received, grads ? &dec_cache : nullptr);
        const Matrix logp = log_softmax(logits);
        const Matrix dec_logp = log_softmax(dec_logits);

        const DiagGaussian& prior = a.prior;
        const Vector prior_inv_var = (-prior.log_variance.array()).exp().matrix();

        double task = 0.0, rel = 0.0, comp = 0.0;
        for (std::size_t i = 0; i < B; ++i) {
            const auto c = static_cast<Eigen::Index>(i);
            const auto yi = static_cast<Eigen::Index>(y[i]);
            const double ce = -logp(yi, c);
            const double ll = dec_logp(yi, c);
            double kl = 0.0;
            for (Eigen::Index r = 0; r < mean[k].rows(); ++r) {
                const double dlv = lv[k](r, c) - prior.log_variance[r];
                const double diff = mean[k](r, c) - prior.mean[r];
                kl += 0.5 * (std::exp(dlv) + diff * diff * prior_inv_var[r] - 1.0 - dlv);
            }
            task += ce;
            rel += ll;
            comp += kl;
            Eigen::Index best = 0;
            logits.col(c).maxCoeff(&best);
            if (best == yi) ++res.correct[k];
            if (opt.keep_per_sample) res.per_sample_total[k][i] = ce - lambda_t[k] * ll + lambda_c[k] * kl;
        }
        auto& bd = res.breakdown[k];
        bd.task_loss = task * inv_b;
        bd.relevance = rel * inv_b;
        bd.complexity = comp * inv_b;
        bd.lambda_t = lambda_t[k];
        bd.lambda_c = lambda_c[k];
        bd.total = bd.task_loss - bd.lambda_t * bd.relevance + bd.lambda_c * bd.complexity;

        if (!grads) continue;
        auto& g = res.gradients[k];

        // d task / d logits = (softmax - onehot) / B
        Matrix d_logits = logp.array().exp().matrix();
        for (std::size_t i = 0; i < B; ++i) d_logits(static_cast<Eigen::Index>(y[i]), static_cast<Eigen::Index>(i)) -= 1.0;
        d_logits *= inv_b;
        Matrix d_policy_in;
        backward_accumulate(a.policy, pol_cache, d_logits, g.policy, &d_policy_in);

        // d(-lambda_t * relevance) / d decoder logits = lambda_t (softmax - onehot) / B
        Matrix d_dec = dec_logp.array().exp().matrix();
        for (std::size_t i = 0; i < B; ++i) d_dec(static_cast<Eigen::Index>(y[i]), static_cast<Eigen::Index>(i)) -= 1.0;
        d_dec *= lambda_t[k] * inv_b;
        Matrix d_received;
        backward_accumulate(a.task_decoder, dec_cache, d_dec, g.task_decoder, &d_received);
        d_received += d_policy_in.bottomRows(received.rows());

        Eigen::Index row = 0;
        for (std::size_t j = 0; j < K; ++j) {
            if (j == k) continue;
            const auto& s = agents[j];
            d_payload[j].middleRows(static_cast<Eigen::Index>(s.head_for(k + 1) * s.message_dim), md) +=
                d_received.middleRows(row, md);
            row += md;
        }
    }

    if (!grads) return res;

    // Phase 3: back through payloads, the complexity term and the clamp into
    // each encoder (and into a learnable prior).
    for (std::size_t k = 0; k < K; ++k) {
        const auto& a = agents[k];
        auto& g = res.gradients[k];
        const auto w = mean[k].rows();
        const double lc = lambda_c[k] * inv_b;
        const Vector prior_inv_var = (-a.prior.log_variance.array()).exp().matrix();

        Matrix d_mean = d_payload[k];
        Matrix d_lv = Matrix::Zero(w, mean[k].cols());
        if (opt.mode == MessageMode::sampled) {
            d_lv = d_payload[k].cwiseProduct((*noise)[k]).cwiseProduct(scale[k]) * 0.5;
        }
        for (Eigen::Index c = 0; c < mean[k].cols(); ++c) {
            for (Eigen::Index r = 0; r < w; ++r) {
                const double diff = mean[k](r, c) - a.prior.mean[r];
                const double ratio = std::exp(lv[k](r, c) - a.prior.log_variance[r]);
                d_mean(r, c) += lc * diff * prior_inv_var[r];
                d_lv(r, c) += lc * 0.5 * (ratio - 1.0);
                if (a.learnable_prior) {
                    g.prior_mean[r] -= lc * diff * prior_inv_var[r];
                    g.prior_log_variance[r] += lc * 0.5 * (1.0 - ratio - diff * diff * prior_inv_var[r]);
                }
            }
        }
        if (opt.freeze_encoders) continue;
        Matrix d_out(2 * w, mean[k].cols());
        d_out.topRows(w) = d_mean;
        d_out.bottomRows(w) =
            (raw_lv[k].array() > log_variance_min && raw_lv[k].array() < log_variance_max).select(d_lv, 0.0);
        backward_accumulate(a.encoder, enc_cache[k], d_out, g.encoder);
    }
    return res;
}

// Mean KL of the encoder's message law to `prior` over a batch (obs_dim x B).
inline double complexity_term(const AgentParams& p, const Matrix& observations, const DiagGaussian& prior) {
    if (observations.cols() == 0) throw std::invalid_argument("complexity_term: empty batch");
    if (prior.dim() != p.message_width()) throw std::invalid_argument("complexity_term: prior dimension mismatch");
    double sum = 0.0;
    for (Eigen::Index c = 0; c < observations.cols(); ++c) {
        const Vector col = observations.col(c);
        sum += kl_gauss_diag(encode(p, std::span<const double>(col.data(), static_cast<std::size_t>(col.size()))), prior);
    }
    return sum / static_cast<double>(observations.cols());
}

// Mean log-likelihood of the labels under the task decoder, given received
// payload columns ((K-1) * message_dim x B).
inline double relevance_term(const AgentParams& p, const Matrix& received, std::span<const std::size_t> labels) {
    if (received.cols() == 0 || labels.empty()) throw std::invalid_argument("relevance_term: empty batch");
    if (static_cast<std::size_t>(received.cols()) != labels.size()) {
        throw std::invalid_argument("relevance_term: label count mismatch");
    }
    const Matrix logp = log_softmax(forward(p.task_decoder, received));
    double sum = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= p.label_count) throw std::invalid_argument("relevance_term: label out of range");
        sum += logp(static_cast<Eigen::Index>(labels[i]), static_cast<Eigen::Index>(i));
    }
    return sum / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------- discrete oracles

// Joint probability table over two finite alphabets (rows x columns).
struct DiscreteJoint {
    Matrix p;

    explicit DiscreteJoint(Matrix table) : p(std::move(table)) {
        if (p.size() == 0) throw std::invalid_argument("discrete joint: empty table");
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            if (!(p.data()[i] >= 0.0)) throw std::invalid_argument("discrete joint: negative or NaN entry");
        }
        if (std::abs(p.sum() - 1.0) > 1e-12) {
            throw std::invalid_argument("discrete joint: entries sum to " + std::to_string(p.sum()) + ", not 1");
        }
    }
};

inline double xlogy_ratio(double x, double y) { return x == 0.0 ? 0.0 : x * std::log(x / y); }

inline double exact_mi_discrete(const DiscreteJoint& joint) {
    const Vector rows = joint.p.rowwise().sum();
    const Vector cols = joint.p.colwise().sum().transpose();
    double mi = 0.0;
    for (Eigen::Index r = 0; r < joint.p.rows(); ++r) {
        for (Eigen::Index c = 0; c < joint.p.cols(); ++c) {
            mi += xlogy_ratio(joint.p(r, c), rows[r] * cols[c]);
        }
    }
    return std::max(0.0, mi);
}

inline double entropy(const Vector& p) {
    double h = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
    }
    return h;
}

namespace detail {

inline void check_stochastic(const Matrix& m, const char* what) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            if (!(m(r, c) >= 0.0)) throw std::invalid_argument(std::string(what) + ": negative entry");
        }
        if (std::abs(m.row(r).sum() - 1.0) > 1e-12) {
            throw std::invalid_argument(std::string(what) + ": row does not sum to 1");
        }
    }
}

} // namespace detail

// p(c) = sum_s p(s) p(c|s) for environment joint p(s, y) and encoder p(c|s).
inline Vector message_marginal(const Matrix& encoder, const Matrix& env_joint) {
    const Vector ps = env_joint.rowwise().sum();
    return (ps.transpose() * encoder).transpose();
}

// p(y|c) for the chain Y - S - C; rows with p(c) = 0 are uniform.
inline Matrix task_posterior(const Matrix& encoder, const Matrix& env_joint) {
    Matrix pyc = env_joint.transpose() * encoder; // |Y| x |C|
    Matrix post(encoder.cols(), env_joint.cols());
    for (Eigen::Index c = 0; c < pyc.cols(); ++c) {
        const double pc = pyc.col(c).sum();
        if (pc > 0.0) {
            post.row(c) = pyc.col(c).transpose() / pc;
        } else {
            post.row(c).setConstant(1.0 / static_cast<double>(env_joint.cols()));
        }
    }
    return post;
}

struct BoundCheckReport {
    double mi_sc = 0.0;             // exact I(S; C)
    double mi_yc = 0.0;             // exact I(Y; C)
    double complexity_upper = 0.0;  // E_s KL(p(c|s) || r_c)
    double relevance_raw = 0.0;     // E log r_t(y|c)
    double entropy_y = 0.0;         // H(Y)
    double relevance_lower = 0.0;   // relevance_raw + H(Y)
    double upper_slack = 0.0;       // complexity_upper - mi_sc
    double lower_slack = 0.0;       // mi_yc - relevance_lower
    bool upper_holds = false;
    bool lower_holds = false;
};

// Exhaustive check of both variational bounds on a finite system
// Y - S - C: env_joint is p(s, y) (|S| x |Y|), encoder p(c|s) (|S| x |C|),
// prior r_c(c) (|C|), decoder r_t(y|c) (|C| x |Y|).
inline BoundCheckReport verify_bounds_discrete(const Matrix& encoder, const Vector& prior, const Matrix& decoder,
                                               const Matrix& env_joint, double tol = 1e-9) {
    const DiscreteJoint env(env_joint);
    detail::check_stochastic(encoder, "encoder");
    detail::check_stochastic(decoder, "decoder");
    if (encoder.rows() != env_joint.rows() || decoder.rows() != encoder.cols() ||
        decoder.cols() != env_joint.cols() || prior.size() != encoder.cols()) {
        throw std::invalid_argument("verify_bounds_discrete: alphabet sizes disagree");
    }
    if (std::abs(prior.sum() - 1.0) > 1e-12 || (prior.array() < 0.0).any()) {
        throw std::invalid_argument("verify_bounds_discrete: prior is not a distribution");
    }

    const Vector ps = env_joint.rowwise().sum();
    const Vector py = env_joint.colwise().sum().transpose();
    const Matrix psc = ps.asDiagonal() * encoder;
    const Matrix pyc = env_joint.transpose() * encoder;

    BoundCheckReport rep;
    rep.mi_sc = exact_mi_discrete(DiscreteJoint(psc / psc.sum()));
    rep.mi_yc = exact_mi_discrete(DiscreteJoint(pyc / pyc.sum()));

    for (Eigen::Index s = 0; s < encoder.rows(); ++s) {
        double kl = 0.0;
        for (Eigen::Index c = 0; c < encoder.cols(); ++c) {
            if (encoder(s, c) == 0.0) continue;
            kl += prior[c] == 0.0 ? std::numeric_limits<double>::infinity() : xlogy_ratio(encoder(s, c), prior[c]);
        }
        if (ps[s] > 0.0) rep.complexity_upper += ps[s] * kl;
    }
    for (Eigen::Index yv = 0; yv < pyc.rows(); ++yv) {
        for (Eigen::Index c = 0; c < pyc.cols(); ++c) {
            if (pyc(yv, c) == 0.0) continue;
            rep.relevance_raw += decoder(c, yv) == 0.0 ? -std::numeric_limits<double>::infinity()
                                                        : pyc(yv, c) * std::log(decoder(c, yv));
        }
    }
    rep.entropy_y = entropy(py);
    rep.relevance_lower = rep.relevance_raw + rep.entropy_y;
    rep.upper_slack = rep.complexity_upper - rep.mi_sc;
    rep.lower_slack = rep.mi_yc - rep.relevance_lower;
    rep.upper_holds = rep.upper_slack >= -tol;
    rep.lower_holds = rep.lower_slack >= -tol;
    return rep;
}

} // namespace emcomm
