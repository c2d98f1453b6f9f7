// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

// Two-tower matching model used to exercise the pruning pipeline end to end.
//
//   vision: x_v -> fc1 -> ReLU -> fc2 -> ReLU -> fc3 -> ReLU -> e_v
//   text:   x_t -> fc1 -> ReLU -> fc2 -> ReLU -> fc3 -> ReLU -> e_t
//   fusion: [e_v, e_t] -> fc1 -> ReLU -> fc2 (+ scalar bias) -> match logit
//
// Every linear layer is bias-free; the scalar logit bias is the only
// non-matrix parameter and is never pruned.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "multiflow/detail/random.hpp"
#include "multiflow/errors.hpp"
#include "multiflow/matrix.hpp"
#include "multiflow/tensorstore.hpp"

namespace multiflow::toy {

struct ToyConfig {
    std::size_t d_in = 32;
    std::size_t hidden = 64;
    std::size_t embed = 32;
    std::size_t fusion_hidden = 64;

    bool operator==(const ToyConfig&) const = default;
};

enum Layer : std::size_t {
    kVisionFc1,
    kVisionFc2,
    kVisionFc3,
    kTextFc1,
    kTextFc2,
    kTextFc3,
    kFusionFc1,
    kFusionFc2,
    kNumLayers
};

inline constexpr std::array<std::string_view, kNumLayers> kLayerNames = {
    "vision.fc1", "vision.fc2", "vision.fc3", "text.fc1", "text.fc2", "text.fc3", "fusion.fc1", "fusion.fc2"};
inline constexpr std::array<std::string_view, kNumLayers> kLayerModality = {
    "vision", "vision", "vision", "text", "text", "text", "fusion", "fusion"};
inline constexpr std::string_view kBiasName = "fusion.bias";

/// [out, in] shape of each layer.
inline std::array<std::pair<std::size_t, std::size_t>, kNumLayers> layer_shapes(const ToyConfig& c) {
    return {{{c.hidden, c.d_in},
             {c.hidden, c.hidden},
             {c.embed, c.hidden},
             {c.hidden, c.d_in},
             {c.hidden, c.hidden},
             {c.embed, c.hidden},
             {c.fusion_hidden, 2 * c.embed},
             {1, c.fusion_hidden}}};
}

template <class T>
struct ToyParams {
    std::array<Matrix<T>, kNumLayers> w;
    T bias = T(0);

    static ToyParams zeros(const ToyConfig& c) {
        ToyParams p;
        const auto shapes = layer_shapes(c);
        for (std::size_t i = 0; i < kNumLayers; ++i) p.w[i] = Matrix<T>(shapes[i].first, shapes[i].second);
        return p;
    }

    std::size_t matrix_param_count() const {
        std::size_t n = 0;
        for (const auto& m : w) n += m.data.size();
        return n;
    }

    bool operator==(const ToyParams&) const = default;
};

template <class T>
struct ToyVLM {
    ToyConfig config;
    ToyParams<T> params;

    /// He-normal init keyed on (seed, layer).
    static ToyVLM init(const ToyConfig& c, std::uint64_t seed) {
        ToyVLM m{c, ToyParams<T>::zeros(c)};
        for (std::size_t i = 0; i < kNumLayers; ++i) {
            auto rng = multiflow::detail::seeded_engine({seed, 0x70795ULL, i});
            auto& w = m.params.w[i];
            const double gain = i == kFusionFc2 ? 1.0 : 2.0;
            std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(w.cols)));
            for (auto& v : w.data) v = static_cast<T>(dist(rng));
        }
        return m;
    }

    template <class U>
    ToyVLM<U> cast() const {
        ToyVLM<U> out{config, ToyParams<U>::zeros(config)};
        for (std::size_t i = 0; i < kNumLayers; ++i)
            for (std::size_t j = 0; j < params.w[i].data.size(); ++j)
                out.params.w[i].data[j] = static_cast<U>(params.w[i].data[j]);
        out.params.bias = static_cast<U>(params.bias);
        return out;
    }

    TensorMap to_tensors() const {
        TensorMap tm;
        for (std::size_t i = 0; i < kNumLayers; ++i) {
            const auto& w = params.w[i];
            std::vector<float> v(w.data.begin(), w.data.end());
            tm.insert(DenseTensor::from_f32(std::string(kLayerNames[i]), {w.rows, w.cols}, std::move(v)));
        }
        tm.insert(DenseTensor::from_f32(std::string(kBiasName), {1}, {static_cast<float>(params.bias)}));
        return tm;
    }

    static ToyVLM from_tensors(const TensorMap& tm) {
        const auto& first = tm.at(kLayerNames[kVisionFc1]);
        const auto& fc3 = tm.at(kLayerNames[kVisionFc3]);
        const auto& fus = tm.at(kLayerNames[kFusionFc1]);
        if (first.shape.size() != 2 || fc3.shape.size() != 2 || fus.shape.size() != 2)
            throw ValidationError("checkpoint does not follow the toy architecture");
        ToyConfig c{first.shape[1], first.shape[0], fc3.shape[0], fus.shape[0]};
        ToyVLM m{c, ToyParams<T>::zeros(c)};
        const auto shapes = layer_shapes(c);
        for (std::size_t i = 0; i < kNumLayers; ++i) {
            const auto& t = tm.at(kLayerNames[i]);
            if (t.shape != Shape{shapes[i].first, shapes[i].second})
                throw ValidationError("checkpoint does not follow the toy architecture (" + t.name + ")");
            const auto v = t.f32();
            std::copy(v.begin(), v.end(), m.params.w[i].data.begin());
        }
        const auto bias = tm.at(kBiasName).f32();
        if (bias.size() != 1) throw ValidationError("toy bias must hold one value");
        m.params.bias = static_cast<T>(bias[0]);
        return m;
    }
};

/// Model-spec config listing every toy weight matrix.
inline nlohmann::json toy_model_spec() {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t i = 0; i < kNumLayers; ++i)
        layers.push_back({{"name", kLayerNames[i]}, {"modality", kLayerModality[i]}});
    return {{"modalities", {"vision", "text", "fusion"}}, {"layers", std::move(layers)}};
}

// ---------------------------------------------------------------------------
// Dense kernels (row-major, batch rows).

namespace kernels {

/// y[b][o] = sum_c x[b][c] * w[o][off + c]
template <class T>
Matrix<T> project(const Matrix<T>& x, const Matrix<T>& w, std::size_t off = 0) {
    Matrix<T> y(x.rows, w.rows);
    for (std::size_t b = 0; b < x.rows; ++b) {
        const T* xr = x.data.data() + b * x.cols;
        for (std::size_t o = 0; o < w.rows; ++o) {
            const T* wr = w.data.data() + o * w.cols + off;
            T acc = T(0);
            for (std::size_t c = 0; c < x.cols; ++c) acc += xr[c] * wr[c];
            y(b, o) = acc;
        }
    }
    return y;
}

template <class T>
void relu_inplace(Matrix<T>& m) {
    for (auto& v : m.data) v = v > T(0) ? v : T(0);
}

/// dw[o][off + c] += sum_b dy[b][o] * x[b][c]
template <class T>
void accumulate_weight_grad(const Matrix<T>& dy, const Matrix<T>& x, Matrix<T>& dw, std::size_t off = 0) {
    for (std::size_t b = 0; b < dy.rows; ++b) {
        const T* xr = x.data.data() + b * x.cols;
        for (std::size_t o = 0; o < dy.cols; ++o) {
            const T g = dy(b, o);
            if (g == T(0)) continue;
            T* dwr = dw.data.data() + o * dw.cols + off;
            for (std::size_t c = 0; c < x.cols; ++c) dwr[c] += g * xr[c];
        }
    }
}

/// dx[b][c] = sum_o dy[b][o] * w[o][off + c]
template <class T>
Matrix<T> input_grad(const Matrix<T>& dy, const Matrix<T>& w, std::size_t width, std::size_t off = 0) {
    Matrix<T> dx(dy.rows, width);
    for (std::size_t b = 0; b < dy.rows; ++b) {
        T* dxr = dx.data.data() + b * width;
        for (std::size_t o = 0; o < dy.cols; ++o) {
            const T g = dy(b, o);
            if (g == T(0)) continue;
            const T* wr = w.data.data() + o * w.cols + off;
            for (std::size_t c = 0; c < width; ++c) dxr[c] += g * wr[c];
        }
    }
    return dx;
}

/// Zeroes gradient entries whose forward activation was clipped by ReLU.
template <class T>
void relu_backward(Matrix<T>& grad, const Matrix<T>& activation) {
    for (std::size_t i = 0; i < grad.data.size(); ++i)
        if (!(activation.data[i] > T(0))) grad.data[i] = T(0);
}

}  // namespace kernels

// ---------------------------------------------------------------------------

template <class T>
struct PairBatch {
    Matrix<T> vision;  // n x d_in
    Matrix<T> text;    // n x d_in; row i is the partner of vision row i
};

template <class T>
struct TowerActivations {
    Matrix<T> x, h1, h2, e;  // inputs of fc1, fc2, fc3 and the embedding
};

template <class T>
struct ForwardState {
    TowerActivations<T> vision, text;
    Matrix<T> pv;  // e_v projected by the vision half of fusion.fc1
    Matrix<T> pt;  // e_t projected by the text half
};

template <class T>
TowerActivations<T> tower_forward(const ToyParams<T>& p, std::size_t first, const Matrix<T>& x) {
    TowerActivations<T> a;
    a.x = x;
    a.h1 = kernels::project(x, p.w[first]);
    kernels::relu_inplace(a.h1);
    a.h2 = kernels::project(a.h1, p.w[first + 1]);
    kernels::relu_inplace(a.h2);
    a.e = kernels::project(a.h2, p.w[first + 2]);
    kernels::relu_inplace(a.e);
    return a;
}

template <class T>
ForwardState<T> forward(const ToyVLM<T>& m, const PairBatch<T>& batch) {
    if (batch.vision.cols != m.config.d_in || batch.text.cols != m.config.d_in)
        throw ValidationError("toy forward: input width " + std::to_string(batch.vision.cols) + " != d_in " +
                              std::to_string(m.config.d_in));
    ForwardState<T> s;
    s.vision = tower_forward(m.params, kVisionFc1, batch.vision);
    s.text = tower_forward(m.params, kTextFc1, batch.text);
    s.pv = kernels::project(s.vision.e, m.params.w[kFusionFc1], 0);
    s.pt = kernels::project(s.text.e, m.params.w[kFusionFc1], m.config.embed);
    return s;
}

/// Match logit of (vision row i, text row j).
template <class T>
T pair_logit(const ToyVLM<T>& m, const ForwardState<T>& s, std::size_t i, std::size_t j) {
    const auto& f2 = m.params.w[kFusionFc2].data;
    T z = m.params.bias;
    for (std::size_t k = 0; k < f2.size(); ++k) {
        const T pre = s.pv(i, k) + s.pt(j, k);
        if (pre > T(0)) z += pre * f2[k];
    }
    return z;
}

/// n x n logits, rows = vision queries, columns = text candidates.
template <class T>
Matrix<T> logits(const ToyVLM<T>& m, const PairBatch<T>& batch) {
    const auto s = forward(m, batch);
    const std::size_t n = batch.vision.rows;
    Matrix<T> out(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) = pair_logit(m, s, i, j);
    return out;
}

/// Input activation of every prunable layer, one row per token. Fusion
/// layers see the matched pairs only.
template <class T>
std::map<std::string, Matrix<T>> layer_inputs(const ToyVLM<T>& m, const PairBatch<T>& batch) {
    const auto s = forward(m, batch);
    std::map<std::string, Matrix<T>> out;
    out[std::string(kLayerNames[kVisionFc1])] = s.vision.x;
    out[std::string(kLayerNames[kVisionFc2])] = s.vision.h1;
    out[std::string(kLayerNames[kVisionFc3])] = s.vision.h2;
    out[std::string(kLayerNames[kTextFc1])] = s.text.x;
    out[std::string(kLayerNames[kTextFc2])] = s.text.h1;
    out[std::string(kLayerNames[kTextFc3])] = s.text.h2;
    const std::size_t n = batch.vision.rows, e = m.config.embed, fh = m.config.fusion_hidden;
    Matrix<T> concat(n, 2 * e), g(n, fh);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < e; ++c) {
            concat(i, c) = s.vision.e(i, c);
            concat(i, e + c) = s.text.e(i, c);
        }
        for (std::size_t k = 0; k < fh; ++k) {
            const T pre = s.pv(i, k) + s.pt(i, k);
            g(i, k) = pre > T(0) ? pre : T(0);
        }
    }
    out[std::string(kLayerNames[kFusionFc1])] = std::move(concat);
    out[std::string(kLayerNames[kFusionFc2])] = std::move(g);
    return out;
}

namespace detail {

template <class T>
T softplus(T x) {
    return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class T>
T sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T>
void tower_backward(const ToyParams<T>& p, std::size_t first, const TowerActivations<T>& a, Matrix<T> de,
                    ToyParams<T>& grad) {
    kernels::relu_backward(de, a.e);
    kernels::accumulate_weight_grad(de, a.h2, grad.w[first + 2]);
    auto dh2 = kernels::input_grad(de, p.w[first + 2], a.h2.cols);
    kernels::relu_backward(dh2, a.h2);
    kernels::accumulate_weight_grad(dh2, a.h1, grad.w[first + 1]);
    auto dh1 = kernels::input_grad(dh2, p.w[first + 1], a.h1.cols);
    kernels::relu_backward(dh1, a.h1);
    kernels::accumulate_weight_grad(dh1, a.x, grad.w[first]);
}

}  // namespace detail

/// Balanced binary cross-entropy over all in-batch pairs: the n matched
/// pairs are positives, the n(n-1) mismatched ones negatives;
///   L = mean_pos softplus(-z) + mean_neg softplus(z).
/// Adds dL/dtheta into `grad` (when non-null) and returns L.
template <class T>
T loss_and_grad(const ToyVLM<T>& m, const PairBatch<T>& batch, ToyParams<T>* grad) {
    const auto s = forward(m, batch);
    const std::size_t n = batch.vision.rows;
    if (n < 2) throw ValidationError("matching loss needs at least two pairs");
    const std::size_t fh = m.config.fusion_hidden;
    const auto& f2 = m.params.w[kFusionFc2].data;
    const T w_pos = T(1) / static_cast<T>(n);
    const T w_neg = T(1) / static_cast<T>(n * (n - 1));

    T loss = T(0);
    Matrix<T> dpv(n, fh), dpt(n, fh);
    std::vector<T> pre(fh);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T z = m.params.bias;
            for (std::size_t k = 0; k < fh; ++k) {
                pre[k] = s.pv(i, k) + s.pt(j, k);
                if (pre[k] > T(0)) z += pre[k] * f2[k];
            }
            const bool positive = i == j;
            const T weight = positive ? w_pos : w_neg;
            loss += weight * detail::softplus(positive ? -z : z);
            if (!grad) continue;
            const T dz = weight * (detail::sigmoid(z) - (positive ? T(1) : T(0)));
            grad->bias += dz;
            auto& df2 = grad->w[kFusionFc2].data;
            for (std::size_t k = 0; k < fh; ++k) {
                if (!(pre[k] > T(0))) continue;
                df2[k] += dz * pre[k];
                const T dpre = dz * f2[k];
                dpv(i, k) += dpre;
                dpt(j, k) += dpre;
            }
        }
    }
    if (!grad) return loss;

    const std::size_t e = m.config.embed;
    kernels::accumulate_weight_grad(dpv, s.vision.e, grad->w[kFusionFc1], 0);
    kernels::accumulate_weight_grad(dpt, s.text.e, grad->w[kFusionFc1], e);
    auto dev = kernels::input_grad(dpv, m.params.w[kFusionFc1], e, 0);
    auto det = kernels::input_grad(dpt, m.params.w[kFusionFc1], e, e);
    detail::tower_backward(m.params, kVisionFc1, s.vision, std::move(dev), *grad);
    detail::tower_backward(m.params, kTextFc1, s.text, std::move(det), *grad);
    return loss;
}

// ---------------------------------------------------------------------------

/// Paired samples from a shared latent: x_v = A_v z + eps, x_t = A_t z + eps'.
/// The projections are fixed by `world_seed`; draws come from the caller's engine.
class SyntheticPairSet {
public:
    SyntheticPairSet(std::uint64_t world_seed, std::size_t d_in = 32, std::size_t latent_dim = 16,
                     double noise = 0.5)
        : world_seed_(world_seed), d_in_(d_in), latent_(latent_dim), noise_(noise),
          a_v_(d_in, latent_dim), a_t_(d_in, latent_dim) {
        auto rng = multiflow::detail::seeded_engine({world_seed, 0xa11ceULL});
        std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(latent_dim)));
        for (auto& v : a_v_.data) v = dist(rng);
        for (auto& v : a_t_.data) v = dist(rng);
    }

    template <class T = float>
    PairBatch<T> sample(std::mt19937_64& rng, std::size_t n) const {
        std::normal_distribution<double> unit(0.0, 1.0);
        PairBatch<T> b{Matrix<T>(n, d_in_), Matrix<T>(n, d_in_)};
        std::vector<double> z(latent_);
        for (std::size_t i = 0; i < n; ++i) {
            for (auto& v : z) v = unit(rng);
            for (std::size_t d = 0; d < d_in_; ++d) {
                double xv = 0.0, xt = 0.0;
                for (std::size_t q = 0; q < latent_; ++q) {
                    xv += a_v_(d, q) * z[q];
                    xt += a_t_(d, q) * z[q];
                }
                b.vision(i, d) = static_cast<T>(xv + noise_ * unit(rng));
                b.text(i, d) = static_cast<T>(xt + noise_ * unit(rng));
            }
        }
        return b;
    }

    std::uint64_t world_seed() const { return world_seed_; }
    std::size_t d_in() const { return d_in_; }
    std::size_t latent_dim() const { return latent_; }
    double noise() const { return noise_; }

private:
    std::uint64_t world_seed_;
    std::size_t d_in_, latent_;
    double noise_;
    Matrix<double> a_v_, a_t_;
};

}  // namespace multiflow::toy
