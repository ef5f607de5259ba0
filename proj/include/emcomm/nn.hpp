#pragma once

// Feed-forward networks with hand-written reverse mode, the parameter-block
// view shared by the optimizers, and a finite-difference gradient checker.
//
// Batches are column-major: one sample per column.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "emcomm/error.hpp"
#include "emcomm/rng.hpp"

namespace emcomm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

using ParamBlocks = std::vector<std::span<double>>;
using ConstBlocks = std::vector<std::span<const double>>;

inline std::span<double> block_of(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<double> block_of(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
inline std::span<const double> block_of(const Matrix& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
}
inline std::span<const double> block_of(const Vector& v) {
    return {v.data(), static_cast<std::size_t>(v.size())};
}

inline ConstBlocks as_const(const ParamBlocks& blocks) { return {blocks.begin(), blocks.end()}; }

// tanh on hidden layers, identity on the output layer.
struct Mlp {
    std::vector<std::size_t> layer_dims;
    std::vector<Matrix> weights; // weights[l] is dims[l+1] x dims[l]
    std::vector<Vector> biases;

    static Mlp zeros(std::vector<std::size_t> dims) {
        if (dims.size() < 2) throw std::invalid_argument("mlp needs at least input and output dims");
        Mlp net;
        net.layer_dims = std::move(dims);
        for (std::size_t l = 0; l + 1 < net.layer_dims.size(); ++l) {
            const auto out = static_cast<Eigen::Index>(net.layer_dims[l + 1]);
            const auto in = static_cast<Eigen::Index>(net.layer_dims[l]);
            net.weights.push_back(Matrix::Zero(out, in));
            net.biases.push_back(Vector::Zero(out));
        }
        return net;
    }

    // Uniform in +-sqrt(6 / (fan_in + fan_out)), zero biases.
    static Mlp glorot(std::vector<std::size_t> dims, Rng& rng) {
        Mlp net = zeros(std::move(dims));
        for (std::size_t l = 0; l < net.weights.size(); ++l) {
            const double limit = std::sqrt(6.0 / static_cast<double>(net.layer_dims[l] + net.layer_dims[l + 1]));
            for (Eigen::Index c = 0; c < net.weights[l].cols(); ++c) {
                for (Eigen::Index r = 0; r < net.weights[l].rows(); ++r) {
                    net.weights[l](r, c) = limit * (2.0 * rng.uniform() - 1.0);
                }
            }
        }
        return net;
    }

    std::size_t input_dim() const { return layer_dims.front(); }
    std::size_t output_dim() const { return layer_dims.back(); }
    std::size_t layer_count() const { return weights.size(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
        }
        return n;
    }

    void append_blocks(ParamBlocks& out) {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            out.push_back(block_of(weights[l]));
            out.push_back(block_of(biases[l]));
        }
    }

    void append_blocks(ConstBlocks& out) const {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            out.push_back(block_of(weights[l]));
            out.push_back(block_of(biases[l]));
        }
    }

    bool same_shape(const Mlp& other) const { return layer_dims == other.layer_dims; }
};

struct ForwardCache {
    std::vector<std::size_t> layer_dims;
    // activations[0] is the input; activations[l+1] the output of layer l.
    std::vector<Matrix> activations;
};

struct Gradients {
    std::vector<Matrix> weights;
    std::vector<Vector> biases;
    Matrix input;

    static Gradients zeros_like(const Mlp& net) {
        Gradients g;
        for (std::size_t l = 0; l < net.weights.size(); ++l) {
            g.weights.push_back(Matrix::Zero(net.weights[l].rows(), net.weights[l].cols()));
            g.biases.push_back(Vector::Zero(net.biases[l].size()));
        }
        return g;
    }

    void append_blocks(ParamBlocks& out) {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            out.push_back(block_of(weights[l]));
            out.push_back(block_of(biases[l]));
        }
    }

    void append_blocks(ConstBlocks& out) const {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            out.push_back(block_of(weights[l]));
            out.push_back(block_of(biases[l]));
        }
    }

    void set_zero() {
        for (auto& w : weights) w.setZero();
        for (auto& b : biases) b.setZero();
        input.resize(0, 0);
    }
};

inline Matrix forward(const Mlp& net, const Matrix& input, ForwardCache* cache = nullptr) {
    if (static_cast<std::size_t>(input.rows()) != net.input_dim()) {
        throw std::invalid_argument("mlp forward: input dimension " + std::to_string(input.rows()) +
                                    " != " + std::to_string(net.input_dim()));
    }
    Matrix h = input;
    if (cache) {
        cache->layer_dims = net.layer_dims;
        cache->activations.clear();
        cache->activations.reserve(net.layer_count() + 1);
        cache->activations.push_back(input);
    }
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
        Matrix z = net.weights[l] * h;
        z.colwise() += net.biases[l];
        if (l + 1 < net.layer_count()) z = z.array().tanh().matrix();
        h = std::move(z);
        if (cache) cache->activations.push_back(h);
    }
    return h;
}

// Accumulates d(sum(output .* output_grad)) into `into`; writes the input
// gradient to `input_grad` when given.
inline void backward_accumulate(const Mlp& net, const ForwardCache& cache, const Matrix& output_grad,
                                Gradients& into, Matrix* input_grad = nullptr) {
    if (cache.layer_dims != net.layer_dims || cache.activations.size() != net.layer_count() + 1) {
        throw std::invalid_argument("mlp backward: cache does not belong to this network");
    }
    if (output_grad.rows() != cache.activations.back().rows() ||
        output_grad.cols() != cache.activations.back().cols()) {
        throw std::invalid_argument("mlp backward: output gradient shape does not match cache");
    }
    if (into.weights.size() != net.layer_count()) into = Gradients::zeros_like(net);
    Matrix delta = output_grad;
    for (std::size_t l = net.layer_count(); l-- > 0;) {
        const Matrix& below = cache.activations[l];
        into.weights[l].noalias() += delta * below.transpose();
        into.biases[l] += delta.rowwise().sum();
        if (l == 0 && !input_grad) break;
        Matrix up = net.weights[l].transpose() * delta;
        if (l == 0) {
            *input_grad = std::move(up);
            break;
        }
        delta = up.array() * (1.0 - below.array().square());
    }
}

inline Gradients backward(const Mlp& net, const ForwardCache& cache, const Matrix& output_grad) {
    Gradients g = Gradients::zeros_like(net);
    backward_accumulate(net, cache, output_grad, g, &g.input);
    return g;
}

inline std::pair<Vector, ForwardCache> mlp_forward(const Mlp& net, const Vector& input) {
    ForwardCache cache;
    Matrix out = forward(net, input, &cache);
    return {Vector(out.col(0)), std::move(cache)};
}

inline Gradients mlp_backward(const Mlp& net, const ForwardCache& cache, const Vector& output_grad) {
    if (!cache.activations.empty() && cache.activations.front().cols() != 1) {
        throw std::invalid_argument("mlp backward: cache holds a batch, not a single vector");
    }
    return backward(net, cache, Matrix(output_grad));
}

// ---------------------------------------------------------------- optimizers

enum class OptimizerKind { sgd, adam };

struct OptimizerSettings {
    OptimizerKind kind = OptimizerKind::adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct OptimizerState {
    OptimizerSettings settings;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;

    explicit OptimizerState(OptimizerSettings s = {}) : settings(s) {}
};

inline void optimizer_step(OptimizerState& state, const ParamBlocks& params, const ConstBlocks& grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("optimizer: block count mismatch");
    for (std::size_t b = 0; b < params.size(); ++b) {
        if (params[b].size() != grads[b].size()) throw std::invalid_argument("optimizer: block shape mismatch");
        for (double g : grads[b]) {
            if (!std::isfinite(g)) {
                throw divergence_error("gradient", "non-finite gradient in parameter block " + std::to_string(b));
            }
        }
    }
    const auto& s = state.settings;
    ++state.step;
    if (s.kind == OptimizerKind::sgd) {
        for (std::size_t b = 0; b < params.size(); ++b) {
            for (std::size_t i = 0; i < params[b].size(); ++i) params[b][i] -= s.learning_rate * grads[b][i];
        }
        return;
    }
    if (state.first_moment.empty()) {
        for (const auto& p : params) {
            state.first_moment.emplace_back(p.size(), 0.0);
            state.second_moment.emplace_back(p.size(), 0.0);
        }
    }
    if (state.first_moment.size() != params.size()) {
        throw std::invalid_argument("optimizer: state does not match parameter blocks");
    }
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(s.beta1, t);
    const double c2 = 1.0 - std::pow(s.beta2, t);
    for (std::size_t b = 0; b < params.size(); ++b) {
        auto& m = state.first_moment[b];
        auto& v = state.second_moment[b];
        if (m.size() != params[b].size()) throw std::invalid_argument("optimizer: state does not match parameter blocks");
        for (std::size_t i = 0; i < params[b].size(); ++i) {
            const double g = grads[b][i];
            m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g;
            v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
            params[b][i] -= s.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.epsilon);
        }
    }
}

// ---------------------------------------------------------------- gradient check

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_block = 0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    bool passed = false;
};

// Central differences over every parameter. Relative error is
// |analytic - numeric| / max(|analytic|, |numeric|, scale_floor).
inline GradCheckReport grad_check(const ParamBlocks& params, const ConstBlocks& analytic,
                                  const std::function<double()>& loss, double tolerance, double h = 1e-5,
                                  double scale_floor = 1e-5) {
    if (params.size() != analytic.size()) throw std::invalid_argument("grad_check: block count mismatch");
    GradCheckReport rep;
    for (std::size_t b = 0; b < params.size(); ++b) {
        if (params[b].size() != analytic[b].size()) throw std::invalid_argument("grad_check: block shape mismatch");
        for (std::size_t i = 0; i < params[b].size(); ++i) {
            const double saved = params[b][i];
            params[b][i] = saved + h;
            const double up = loss();
            params[b][i] = saved - h;
            const double down = loss();
            params[b][i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[b][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), scale_floor});
            double rel = std::abs(a - numeric) / denom;
            if (!std::isfinite(rel)) rel = std::numeric_limits<double>::infinity();
            if (rel > rep.max_rel_error || (rep.checked == 0 && rel >= rep.max_rel_error)) {
                rep.max_rel_error = rel;
                rep.worst_block = b;
                rep.worst_index = i;
            }
            ++rep.checked;
        }
    }
    rep.passed = rep.max_rel_error < tolerance;
    return rep;
}

} // namespace emcomm
