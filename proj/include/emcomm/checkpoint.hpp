#pragma once

// EMCK checkpoint: a flat list of named f64 tensors, little-endian.
//
//   "EMCK"                       4 bytes magic
//   version                      u16 (= 1)
//   tensor_count                 u64
//   tensor_count x {
//     name_len u64, name bytes, rows u64, cols u64, rows*cols f64 (column-major)
//   }
//
// A trained system is stored as "agent<k>/meta" (1 x 8: agent_id,
// agent_count, obs_dim, action_count, label_count, message_dim, heads,
// learnable_prior) followed by "agent<k>/<net>/W<l>", "agent<k>/<net>/b<l>"
// for net in {encoder, policy, task_decoder, reconstruction} and
// "agent<k>/prior/mean", "agent<k>/prior/log_variance".

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "emcomm/bytes.hpp"
#include "emcomm/trainer.hpp"

namespace emcomm {

inline constexpr std::uint16_t checkpoint_format_version = 1;

using NamedTensors = std::vector<std::pair<std::string, Matrix>>;

inline std::vector<std::uint8_t> encode_tensors(const NamedTensors& tensors) {
    ByteWriter w;
    w.raw("EMCK");
    w.u16(checkpoint_format_version);
    w.u64(tensors.size());
    for (const auto& [name, m] : tensors) {
        w.u64(name.size());
        w.raw(name);
        w.u64(static_cast<std::uint64_t>(m.rows()));
        w.u64(static_cast<std::uint64_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.size(); ++i) w.f64(m.data()[i]);
    }
    return w.take();
}

inline NamedTensors decode_tensors(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.expect_magic("EMCK");
    const auto version = r.u16();
    if (version != checkpoint_format_version) {
        throw format_error("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = r.u64();
    NamedTensors out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = r.u64();
        if (len > r.remaining()) throw format_error("truncated buffer");
        std::string name = r.str(static_cast<std::size_t>(len));
        const auto rows = r.u64();
        const auto cols = r.u64();
        if (cols != 0 && rows > r.remaining() / 8 / cols) throw format_error("truncated buffer");
        Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (Eigen::Index j = 0; j < m.size(); ++j) m.data()[j] = r.f64();
        out.emplace_back(std::move(name), std::move(m));
    }
    if (r.remaining() != 0) throw format_error("trailing bytes after checkpoint");
    return out;
}

namespace detail {

inline void push_mlp(NamedTensors& out, const std::string& prefix, const Mlp& net) {
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        out.emplace_back(prefix + "/W" + std::to_string(l), net.weights[l]);
        out.emplace_back(prefix + "/b" + std::to_string(l), Matrix(net.biases[l]));
    }
}

inline const Matrix& need(const std::map<std::string, const Matrix*>& index, const std::string& name) {
    const auto it = index.find(name);
    if (it == index.end()) throw format_error("checkpoint is missing tensor " + name);
    return *it->second;
}

inline std::optional<Mlp> pull_mlp(const std::map<std::string, const Matrix*>& index, const std::string& prefix,
                                   bool required) {
    if (!index.count(prefix + "/W0")) {
        if (required) throw format_error("checkpoint is missing tensor " + prefix + "/W0");
        return std::nullopt;
    }
    Mlp net;
    for (std::size_t l = 0; index.count(prefix + "/W" + std::to_string(l)); ++l) {
        const Matrix& w = need(index, prefix + "/W" + std::to_string(l));
        const Matrix& b = need(index, prefix + "/b" + std::to_string(l));
        if (b.cols() != 1 || b.rows() != w.rows()) throw format_error("bad bias shape in " + prefix);
        if (l == 0) {
            net.layer_dims.push_back(static_cast<std::size_t>(w.cols()));
        } else if (static_cast<std::size_t>(w.cols()) != net.layer_dims.back()) {
            throw format_error("inconsistent layer shapes in " + prefix);
        }
        net.layer_dims.push_back(static_cast<std::size_t>(w.rows()));
        net.weights.push_back(w);
        net.biases.push_back(b.col(0));
    }
    return net;
}

} // namespace detail

inline NamedTensors system_tensors(const std::vector<AgentParams>& agents) {
    NamedTensors out;
    for (const auto& a : agents) {
        const std::string p = "agent" + std::to_string(a.agent_id);
        Matrix meta(1, 8);
        meta << static_cast<double>(a.agent_id), static_cast<double>(a.agent_count), static_cast<double>(a.obs_dim),
            static_cast<double>(a.action_count), static_cast<double>(a.label_count),
            static_cast<double>(a.message_dim), static_cast<double>(a.heads), a.learnable_prior ? 1.0 : 0.0;
        out.emplace_back(p + "/meta", meta);
        detail::push_mlp(out, p + "/encoder", a.encoder);
        detail::push_mlp(out, p + "/policy", a.policy);
        detail::push_mlp(out, p + "/task_decoder", a.task_decoder);
        out.emplace_back(p + "/prior/mean", Matrix(a.prior.mean));
        out.emplace_back(p + "/prior/log_variance", Matrix(a.prior.log_variance));
        if (a.reconstruction) detail::push_mlp(out, p + "/reconstruction", *a.reconstruction);
    }
    return out;
}

inline std::vector<AgentParams> agents_from_tensors(const NamedTensors& tensors) {
    std::map<std::string, const Matrix*> index;
    for (const auto& [name, m] : tensors) {
        if (!index.emplace(name, &m).second) throw format_error("duplicate tensor " + name);
    }
    std::vector<AgentParams> agents;
    for (std::size_t k = 1; index.count("agent" + std::to_string(k) + "/meta"); ++k) {
        const std::string p = "agent" + std::to_string(k);
        const Matrix& meta = detail::need(index, p + "/meta");
        if (meta.rows() != 1 || meta.cols() != 8) throw format_error("bad meta tensor for " + p);
        const auto field = [&](int i) {
            const double v = meta(0, i);
            if (!(v >= 0.0) || v != std::floor(v)) throw format_error("bad meta value for " + p);
            return static_cast<std::size_t>(v);
        };
        AgentParams a;
        a.agent_id = field(0);
        a.agent_count = field(1);
        a.obs_dim = field(2);
        a.action_count = field(3);
        a.label_count = field(4);
        a.message_dim = field(5);
        a.heads = field(6);
        a.learnable_prior = field(7) != 0;
        if (a.agent_id != k || a.heads < 1) throw format_error("bad meta values for " + p);
        a.encoder = *detail::pull_mlp(index, p + "/encoder", true);
        a.policy = *detail::pull_mlp(index, p + "/policy", true);
        a.task_decoder = *detail::pull_mlp(index, p + "/task_decoder", true);
        a.reconstruction = detail::pull_mlp(index, p + "/reconstruction", false);
        a.prior.mean = detail::need(index, p + "/prior/mean").col(0);
        a.prior.log_variance = detail::need(index, p + "/prior/log_variance").col(0);
        if (a.encoder.input_dim() != a.obs_dim || a.encoder.output_dim() != 2 * a.message_width() ||
            a.policy.input_dim() != a.obs_dim + a.received_dim() || a.policy.output_dim() != a.action_count ||
            a.task_decoder.input_dim() != a.received_dim() || a.task_decoder.output_dim() != a.label_count ||
            static_cast<std::size_t>(a.prior.mean.size()) != a.message_width() ||
            a.prior.log_variance.size() != a.prior.mean.size()) {
            throw format_error("checkpoint shapes are inconsistent for " + p);
        }
        agents.push_back(std::move(a));
    }
    if (agents.empty()) throw format_error("checkpoint holds no agents");
    for (const auto& a : agents) {
        if (a.agent_count != agents.size()) throw format_error("checkpoint agent count mismatch");
    }
    return agents;
}

inline void save_checkpoint(const std::string& path, const std::vector<AgentParams>& agents) {
    write_file_bytes(path, encode_tensors(system_tensors(agents)));
}

inline std::vector<AgentParams> load_checkpoint(const std::string& path) {
    return agents_from_tensors(decode_tensors(read_file_bytes(path)));
}

} // namespace emcomm
