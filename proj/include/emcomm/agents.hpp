#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "emcomm/env.hpp"
#include "emcomm/nn.hpp"

namespace emcomm {

inline constexpr double log_variance_min = -10.0;
inline constexpr double log_variance_max = 4.0;

struct ModelConfig {
    std::size_t message_dim = 4;
    std::vector<std::size_t> encoder_hidden{32, 32};
    std::vector<std::size_t> policy_hidden{64, 64};
    std::vector<std::size_t> decoder_hidden{64, 64};
    bool learnable_prior = false;
    // One message head per receiver instead of a single broadcast message.
    bool per_receiver_heads = false;
    // 0 keeps float payloads; 4, 8 or 16 quantizes messages at inference.
    unsigned message_bits = 0;
    double quant_range = 4.0;
    // Inference messages are the distribution mean unless this is set.
    bool sample_at_inference = false;

    void validate() const {
        if (message_bits != 0 && message_bits != 4 && message_bits != 8 && message_bits != 16) {
            throw config_error("model: message_bits must be 0, 4, 8 or 16");
        }
        if (!(quant_range > 0.0)) throw config_error("model: quant_range must be > 0");
        for (const auto* h : {&encoder_hidden, &policy_hidden, &decoder_hidden}) {
            for (auto w : *h) {
                if (w == 0) throw config_error("model: hidden widths must be positive");
            }
        }
    }
};

struct DiagGaussian {
    Vector mean;
    Vector log_variance;

    static DiagGaussian standard(std::size_t dim) {
        return {Vector::Zero(static_cast<Eigen::Index>(dim)), Vector::Zero(static_cast<Eigen::Index>(dim))};
    }

    std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

// rho_phi(C | S = s): diagonal Gaussian over the sender's full outgoing message.
using MessageDistribution = DiagGaussian;

struct Message {
    std::uint16_t sender = 0;
    std::uint16_t receiver = 0;
    std::vector<double> payload;
    // One code per payload entry when the message travels quantized.
    std::optional<std::vector<std::uint16_t>> quantized;
    std::uint8_t bits = 0;
    double range = 0.0;
};

struct ActionDistribution {
    Vector logits;

    Vector probabilities() const {
        Vector p = (logits.array() - logits.maxCoeff()).exp();
        return p / p.sum();
    }

    std::size_t argmax() const {
        Eigen::Index i = 0;
        logits.maxCoeff(&i);
        return static_cast<std::size_t>(i);
    }
};

struct AgentParams {
    std::size_t agent_id = 0;
    std::size_t agent_count = 0;
    std::size_t obs_dim = 0;
    std::size_t action_count = 0;
    std::size_t label_count = 0;
    std::size_t message_dim = 0;
    std::size_t heads = 1;

    Mlp encoder;       // obs -> [mean | raw log-variance], each heads * message_dim
    Mlp policy;        // [obs | received] -> action logits
    Mlp task_decoder;  // received -> task-label logits
    DiagGaussian prior;
    bool learnable_prior = false;
    // Autoencoder head used only by the two-stage baseline.
    std::optional<Mlp> reconstruction;

    std::size_t message_width() const { return heads * message_dim; }
    std::size_t received_dim() const { return (agent_count - 1) * message_dim; }

    // Index of the head that carries the message for `receiver`.
    std::size_t head_for(std::size_t receiver) const {
        if (heads == 1) return 0;
        return receiver < agent_id ? receiver - 1 : receiver - 2;
    }

    void append_blocks(ParamBlocks& out) {
        encoder.append_blocks(out);
        policy.append_blocks(out);
        task_decoder.append_blocks(out);
        if (learnable_prior) {
            out.push_back(block_of(prior.mean));
            out.push_back(block_of(prior.log_variance));
        }
        if (reconstruction) reconstruction->append_blocks(out);
    }

    void append_blocks(ConstBlocks& out) const {
        encoder.append_blocks(out);
        policy.append_blocks(out);
        task_decoder.append_blocks(out);
        if (learnable_prior) {
            out.push_back(block_of(prior.mean));
            out.push_back(block_of(prior.log_variance));
        }
        if (reconstruction) reconstruction->append_blocks(out);
    }

    // Flattened w_k = (psi_k, phi_k): encoder, policy, task decoder and a
    // learnable prior. The baseline's reconstruction head is excluded.
    std::vector<double> flatten_weights() const {
        ConstBlocks blocks;
        encoder.append_blocks(blocks);
        policy.append_blocks(blocks);
        task_decoder.append_blocks(blocks);
        if (learnable_prior) {
            blocks.push_back(block_of(prior.mean));
            blocks.push_back(block_of(prior.log_variance));
        }
        std::vector<double> flat;
        for (auto b : blocks) flat.insert(flat.end(), b.begin(), b.end());
        return flat;
    }

    bool same_architecture(const AgentParams& o) const {
        return agent_id == o.agent_id && agent_count == o.agent_count && obs_dim == o.obs_dim &&
               action_count == o.action_count && label_count == o.label_count &&
               message_dim == o.message_dim && heads == o.heads && learnable_prior == o.learnable_prior &&
               encoder.same_shape(o.encoder) && policy.same_shape(o.policy) &&
               task_decoder.same_shape(o.task_decoder);
    }
};

struct AgentGradients {
    Gradients encoder;
    Gradients policy;
    Gradients task_decoder;
    Vector prior_mean;
    Vector prior_log_variance;
    std::optional<Gradients> reconstruction;
    bool learnable_prior = false;

    static AgentGradients zeros_like(const AgentParams& p) {
        AgentGradients g;
        g.encoder = Gradients::zeros_like(p.encoder);
        g.policy = Gradients::zeros_like(p.policy);
        g.task_decoder = Gradients::zeros_like(p.task_decoder);
        g.prior_mean = Vector::Zero(p.prior.mean.size());
        g.prior_log_variance = Vector::Zero(p.prior.log_variance.size());
        g.learnable_prior = p.learnable_prior;
        if (p.reconstruction) g.reconstruction = Gradients::zeros_like(*p.reconstruction);
        return g;
    }

    void append_blocks(ConstBlocks& out) const {
        encoder.append_blocks(out);
        policy.append_blocks(out);
        task_decoder.append_blocks(out);
        if (learnable_prior) {
            out.push_back(block_of(prior_mean));
            out.push_back(block_of(prior_log_variance));
        }
        if (reconstruction) reconstruction->append_blocks(out);
    }
};

namespace detail {

inline std::vector<std::size_t> with_hidden(std::size_t in, const std::vector<std::size_t>& hidden,
                                            std::size_t out) {
    std::vector<std::size_t> dims{in};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(out);
    return dims;
}

} // namespace detail

inline AgentParams make_agent(std::size_t agent_id, std::size_t agent_count, std::size_t obs_dim,
                              std::size_t label_count, const ModelConfig& cfg, Rng& rng) {
    if (agent_count < 1 || agent_id < 1 || agent_id > agent_count) {
        throw std::invalid_argument("make_agent: agent_id out of range");
    }
    cfg.validate();
    AgentParams p;
    p.agent_id = agent_id;
    p.agent_count = agent_count;
    p.obs_dim = obs_dim;
    p.action_count = label_count;
    p.label_count = label_count;
    p.message_dim = cfg.message_dim;
    p.heads = cfg.per_receiver_heads && agent_count > 2 ? agent_count - 1 : 1;
    p.encoder = Mlp::glorot(detail::with_hidden(obs_dim, cfg.encoder_hidden, 2 * p.message_width()), rng);
    p.policy = Mlp::glorot(detail::with_hidden(obs_dim + p.received_dim(), cfg.policy_hidden, p.action_count), rng);
    p.task_decoder = Mlp::glorot(detail::with_hidden(p.received_dim(), cfg.decoder_hidden, label_count), rng);
    p.prior = DiagGaussian::standard(p.message_width());
    p.learnable_prior = cfg.learnable_prior;
    return p;
}

// Clamped log-variance rows of a raw encoder output batch.
inline Matrix clamp_log_variance(const Matrix& raw) {
    return raw.array().max(log_variance_min).min(log_variance_max).matrix();
}

inline MessageDistribution encode(const AgentParams& p, std::span<const double> obs) {
    if (obs.size() != p.obs_dim) {
        throw std::invalid_argument("encode: observation dimension " + std::to_string(obs.size()) +
                                    " != " + std::to_string(p.obs_dim));
    }
    const Matrix in = Eigen::Map<const Vector>(obs.data(), static_cast<Eigen::Index>(obs.size()));
    const Matrix out = forward(p.encoder, in);
    const auto w = static_cast<Eigen::Index>(p.message_width());
    return {Vector(out.col(0).head(w)), Vector(clamp_log_variance(out.col(0).tail(w)))};
}

inline MessageDistribution encode(const AgentParams& p, const Observation& obs) {
    return encode(p, std::span<const double>(obs.features));
}

// Reparameterized draw: mean + exp(log_variance / 2) * noise.
inline Message sample_message(const MessageDistribution& dist, std::span<const double> noise,
                              std::size_t sender = 0, std::size_t receiver = 0) {
    if (noise.size() != dist.dim()) throw std::invalid_argument("sample_message: noise dimension mismatch");
    Message m;
    m.sender = static_cast<std::uint16_t>(sender);
    m.receiver = static_cast<std::uint16_t>(receiver);
    m.payload.resize(noise.size());
    for (std::size_t i = 0; i < noise.size(); ++i) {
        const auto e = static_cast<Eigen::Index>(i);
        m.payload[i] = dist.mean[e] + std::exp(0.5 * dist.log_variance[e]) * noise[i];
    }
    return m;
}

// Splits a sender's full message into one Message per receiver, ascending.
inline std::vector<Message> outgoing_messages(const AgentParams& p, const Message& full) {
    if (full.payload.size() != p.message_width()) {
        throw std::invalid_argument("outgoing_messages: payload width mismatch");
    }
    std::vector<Message> out;
    for (std::size_t j = 1; j <= p.agent_count; ++j) {
        if (j == p.agent_id) continue;
        Message m;
        m.sender = static_cast<std::uint16_t>(p.agent_id);
        m.receiver = static_cast<std::uint16_t>(j);
        const auto off = p.head_for(j) * p.message_dim;
        m.payload.assign(full.payload.begin() + static_cast<std::ptrdiff_t>(off),
                         full.payload.begin() + static_cast<std::ptrdiff_t>(off + p.message_dim));
        out.push_back(std::move(m));
    }
    return out;
}

// Received messages must hold exactly one message from every other agent,
// ordered by sender id.
inline Vector received_vector(const AgentParams& p, std::span<const Message> received) {
    if (received.size() + 1 != p.agent_count) {
        throw std::invalid_argument("agent " + std::to_string(p.agent_id) + " expects " +
                                    std::to_string(p.agent_count - 1) + " messages, got " +
                                    std::to_string(received.size()));
    }
    Vector v(static_cast<Eigen::Index>(p.received_dim()));
    std::size_t expected = 1;
    for (std::size_t i = 0; i < received.size(); ++i) {
        if (expected == p.agent_id) ++expected;
        const auto& m = received[i];
        if (m.sender != expected) {
            throw std::invalid_argument("agent " + std::to_string(p.agent_id) + ": message " +
                                        std::to_string(i) + " has sender " + std::to_string(m.sender) +
                                        ", expected " + std::to_string(expected) +
                                        " (missing, duplicate or misordered sender)");
        }
        if (m.receiver != 0 && m.receiver != p.agent_id) {
            throw std::invalid_argument("message addressed to agent " + std::to_string(m.receiver));
        }
        if (m.payload.size() != p.message_dim) throw std::invalid_argument("message payload dimension mismatch");
        for (std::size_t d = 0; d < p.message_dim; ++d) {
            v[static_cast<Eigen::Index>(i * p.message_dim + d)] = m.payload[d];
        }
        ++expected;
    }
    return v;
}

inline ActionDistribution decide(const AgentParams& p, std::span<const double> obs,
                                 std::span<const Message> received) {
    if (obs.size() != p.obs_dim) throw std::invalid_argument("decide: observation dimension mismatch");
    const Vector r = received_vector(p, received);
    Vector in(static_cast<Eigen::Index>(p.obs_dim + p.received_dim()));
    in.head(static_cast<Eigen::Index>(p.obs_dim)) =
        Eigen::Map<const Vector>(obs.data(), static_cast<Eigen::Index>(obs.size()));
    in.tail(static_cast<Eigen::Index>(p.received_dim())) = r;
    return {Vector(forward(p.policy, in).col(0))};
}

inline ActionDistribution decide(const AgentParams& p, const Observation& obs, std::span<const Message> received) {
    return decide(p, std::span<const double>(obs.features), received);
}

inline Vector decode_task(const AgentParams& p, std::span<const Message> received) {
    const Vector r = received_vector(p, received);
    return Vector(forward(p.task_decoder, r).col(0));
}

// Column-wise log-softmax.
inline Matrix log_softmax(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        const double m = logits.col(c).maxCoeff();
        const double lse = m + std::log((logits.col(c).array() - m).exp().sum());
        out.col(c) = logits.col(c).array() - lse;
    }
    return out;
}

} // namespace emcomm
