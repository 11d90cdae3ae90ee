#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ntku/error.hpp"
#include "ntku/numerics.hpp"
#include "ntku/params.hpp"
#include "ntku/rng.hpp"

namespace ntku {

enum class Architecture { MlpNorm, CnnBn, AttnPrompt };

inline std::string_view to_string(Architecture a) {
    switch (a) {
        case Architecture::MlpNorm: return "mlp_norm";
        case Architecture::CnnBn: return "cnn_bn";
        case Architecture::AttnPrompt: return "attn_prompt";
    }
    return "unknown";
}

inline Architecture architecture_from_string(std::string_view s) {
    if (s == "mlp_norm") return Architecture::MlpNorm;
    if (s == "cnn_bn") return Architecture::CnnBn;
    if (s == "attn_prompt") return Architecture::AttnPrompt;
    fail(ErrorCode::InvalidConfig, "unknown architecture '" + std::string(s) + "'");
}

/// Architecture hyperparameters.
///
/// mlp_norm:    input -> [Linear -> Norm -> tanh] per entry of layer_sizes -> head.
///              With no hidden layers the model is the linear map head(x).
/// cnn_bn:      input is in_channels x S x S (channel-major, S = sqrt(input_dim /
///              in_channels)); Conv(K x K, groups, same padding, no bias) -> BN ->
///              tanh -> global average pool -> head.
/// attn_prompt: input is seq_len tokens of input_dim / seq_len features; Embed ->
///              single-head attention with keys/values extended by prompt_length
///              learnable rows -> residual -> MLP(E -> 4E -> E, tanh) -> residual ->
///              mean pool -> head.
struct ModelSpec {
    Architecture architecture = Architecture::MlpNorm;
    std::vector<std::size_t> layer_sizes;
    std::size_t input_dim = 1;
    std::size_t num_classes = 2;

    std::size_t prompt_length = 1;
    std::size_t embed_dim = 8;
    std::size_t seq_len = 1;
    /// Excludes prompt slots from the softmax. Off at runtime; used to check that
    /// zero prompts reduce to plain attention.
    bool mask_prompt_slots = false;

    std::size_t kernel_size = 3;
    std::size_t in_channels = 1;
    std::size_t out_channels = 4;
    std::size_t groups = 1;

    bool head_bias = true;
    double norm_eps = 1e-5;

    [[nodiscard]] std::size_t image_side() const {
        const auto per_channel = input_dim / std::max<std::size_t>(in_channels, 1);
        auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(per_channel))));
        return s;
    }

    [[nodiscard]] std::size_t token_dim() const { return input_dim / std::max<std::size_t>(seq_len, 1); }

    void validate() const {
        require(input_dim >= 1, ErrorCode::InvalidConfig, "input_dim must be >= 1");
        require(num_classes >= 2, ErrorCode::InvalidConfig, "num_classes must be >= 2");
        for (auto w : layer_sizes) {
            require(w >= 1, ErrorCode::InvalidConfig, "layer widths must be >= 1");
        }
        switch (architecture) {
            case Architecture::MlpNorm:
                break;
            case Architecture::CnnBn: {
                require(kernel_size >= 1 && kernel_size % 2 == 1, ErrorCode::InvalidConfig,
                        "cnn_bn kernel_size must be odd");
                require(in_channels >= 1 && out_channels >= 1 && groups >= 1,
                        ErrorCode::InvalidConfig, "cnn_bn channel counts must be >= 1");
                require(in_channels % groups == 0 && out_channels % groups == 0,
                        ErrorCode::InvalidConfig, "cnn_bn groups must divide both channel counts");
                const auto s = image_side();
                require(s >= 1 && s * s * in_channels == input_dim, ErrorCode::InvalidConfig,
                        "cnn_bn input_dim must equal in_channels * S * S");
                break;
            }
            case Architecture::AttnPrompt:
                require(prompt_length >= 1, ErrorCode::InvalidConfig,
                        "attn_prompt requires prompt_length >= 1");
                require(embed_dim >= 1 && seq_len >= 1, ErrorCode::InvalidConfig,
                        "attn_prompt requires embed_dim, seq_len >= 1");
                require(input_dim % seq_len == 0, ErrorCode::InvalidConfig,
                        "attn_prompt input_dim must be a multiple of seq_len");
                break;
        }
    }

    bool operator==(const ModelSpec&) const = default;
};

/// A model is its hyperparameters, its trainable parameters, and its frozen
/// normalization statistics (kept apart so masks never touch them).
struct Model {
    ModelSpec spec;
    ParamVector params;
    ParamVector buffers;
};

/// Builds the parameter layout with neutral values: weights 0, norm scale 1,
/// norm shift 0, running mean 0, running variance 1.
///
/// Layout order is embedding -> blocks -> head, and within a layer weight, bias,
/// scale, shift.
[[nodiscard]] inline Model build_model(const ModelSpec& spec) {
    spec.validate();
    Model m{spec, {}, {}};
    auto& p = m.params;
    auto& b = m.buffers;
    const std::size_t c = spec.num_classes;
    std::size_t head_in = spec.input_dim;
    switch (spec.architecture) {
        case Architecture::MlpNorm: {
            std::size_t in = spec.input_dim;
            for (std::size_t l = 0; l < spec.layer_sizes.size(); ++l) {
                const auto w = spec.layer_sizes[l];
                const auto tag = std::to_string(l);
                p.add("hidden" + tag + ".weight", {w, in}, TensorRole::Weight);
                p.add("hidden" + tag + ".bias", {w}, TensorRole::Bias);
                p.add("norm" + tag + ".gamma", {w}, TensorRole::NormScale);
                p.add("norm" + tag + ".beta", {w}, TensorRole::NormShift);
                b.add("norm" + tag + ".mean", {w}, TensorRole::Statistic);
                b.add("norm" + tag + ".var", {w}, TensorRole::Statistic);
                in = w;
            }
            head_in = in;
            break;
        }
        case Architecture::CnnBn: {
            const auto k = spec.kernel_size;
            p.add("conv.weight", {spec.out_channels, spec.in_channels / spec.groups, k, k},
                  TensorRole::Weight);
            p.add("bn.gamma", {spec.out_channels}, TensorRole::NormScale);
            p.add("bn.beta", {spec.out_channels}, TensorRole::NormShift);
            b.add("bn.mean", {spec.out_channels}, TensorRole::Statistic);
            b.add("bn.var", {spec.out_channels}, TensorRole::Statistic);
            head_in = spec.out_channels;
            break;
        }
        case Architecture::AttnPrompt: {
            const auto e = spec.embed_dim;
            p.add("embed.weight", {e, spec.token_dim()}, TensorRole::Weight);
            p.add("embed.bias", {e}, TensorRole::Bias);
            p.add("attn.query", {e, e}, TensorRole::Weight);
            p.add("attn.key", {e, e}, TensorRole::Weight);
            p.add("attn.value", {e, e}, TensorRole::Weight);
            p.add("attn.prompt_key", {spec.prompt_length, e}, TensorRole::PromptKey);
            p.add("attn.prompt_value", {spec.prompt_length, e}, TensorRole::PromptValue);
            p.add("mlp.fc1", {4 * e, e}, TensorRole::Weight);
            p.add("mlp.fc2", {e, 4 * e}, TensorRole::Weight);
            head_in = e;
            break;
        }
    }
    p.add("head.weight", {c, head_in}, TensorRole::HeadWeight);
    if (spec.head_bias) {
        p.add("head.bias", {c}, TensorRole::HeadBias);
    }
    for (const auto& t : p.layout()) {
        if (t.role == TensorRole::NormScale) {
            auto v = p.tensor(t.name);
            std::fill(v.begin(), v.end(), 1.0);
        }
    }
    for (const auto& t : b.layout()) {
        if (t.name.ends_with(".var")) {
            auto v = b.tensor(t.name);
            std::fill(v.begin(), v.end(), 1.0);
        }
    }
    return m;
}

struct InitOptions {
    /// Head weights are N(0, (head_scale^2) / fan_in).
    double head_scale = 1.0;
    /// Prompt rows are N(0, prompt_scale^2).
    double prompt_scale = 0.02;
};

/// Random initialization: weights N(0, 1/fan_in), biases and norm shifts 0,
/// norm scales 1. Deterministic in `seed`.
[[nodiscard]] inline Model init_model(const ModelSpec& spec, std::uint64_t seed,
                                      const InitOptions& opts = {}) {
    Model m = build_model(spec);
    CounterRng rng(derive_seed(seed, 0x1417));
    for (const auto& t : m.params.layout()) {
        auto v = m.params.tensor(t.name);
        std::size_t fan_in = 1;
        for (std::size_t i = 1; i < t.shape.size(); ++i) {
            fan_in *= t.shape[i];
        }
        double scale = 0.0;
        switch (t.role) {
            case TensorRole::Weight: scale = 1.0 / std::sqrt(static_cast<double>(fan_in)); break;
            case TensorRole::HeadWeight:
                scale = opts.head_scale / std::sqrt(static_cast<double>(fan_in));
                break;
            case TensorRole::PromptKey:
            case TensorRole::PromptValue: scale = opts.prompt_scale; break;
            default: continue;
        }
        for (auto& x : v) {
            x = scale * rng.normal();
        }
    }
    return m;
}

namespace detail {

inline void add_outer(double* out, std::span<const double> a, std::span<const double> b) {
    // out[i * |b| + j] += a[i] * b[j]
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double ai = a[i];
        double* row = out + i * b.size();
        for (std::size_t j = 0; j < b.size(); ++j) {
            row[j] += ai * b[j];
        }
    }
}

// y = W x (+ bias), W is rows x cols row-major.
inline void affine(const double* w, const double* bias, std::span<const double> x,
                   std::span<double> y) {
    const std::size_t cols = x.size();
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = dot(w + i * cols, x.data(), cols) + (bias != nullptr ? bias[i] : 0.0);
    }
}

// y += W^T g, W is |g| x |y|.
inline void affine_transposed_add(const double* w, std::span<const double> g, std::span<double> y) {
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = g[i];
        const double* row = w + i * y.size();
        for (std::size_t j = 0; j < y.size(); ++j) {
            y[j] += gi * row[j];
        }
    }
}

class MlpNet {
public:
    struct Cache {
        std::vector<std::vector<double>> inputs;  // per layer input
        std::vector<std::vector<double>> pre;     // per layer pre-normalization z
        std::vector<std::vector<double>> zhat;    // per layer normalized z
        std::vector<std::vector<double>> act;     // per layer tanh output
    };

    struct Layer {
        std::size_t width = 0, in = 0;
        std::size_t w = 0, b = 0, gamma = 0, beta = 0;  // param offsets
        std::size_t mean = 0, var = 0;                   // buffer offsets
        bool need_w = true;
        std::vector<double> inv_std;
    };

    /// `need` limits which weight-matrix gradients backward writes; entries of
    /// tensors with no index in `need` are left untouched.
    explicit MlpNet(const Model& m, const ParamMask* need = nullptr) : model_(m) {
        const auto& p = m.params;
        auto wanted = [&](const TensorInfo& t) {
            if (need == nullptr) return true;
            const auto it = std::lower_bound(need->indices.begin(), need->indices.end(), t.offset);
            return it != need->indices.end() && *it < t.offset + t.numel();
        };
        const double* buf = m.buffers.values().data();
        std::size_t in = m.spec.input_dim;
        for (std::size_t l = 0; l < m.spec.layer_sizes.size(); ++l) {
            const auto tag = std::to_string(l);
            Layer L;
            L.width = m.spec.layer_sizes[l];
            L.in = in;
            L.w = p.at("hidden" + tag + ".weight").offset;
            L.b = p.at("hidden" + tag + ".bias").offset;
            L.gamma = p.at("norm" + tag + ".gamma").offset;
            L.beta = p.at("norm" + tag + ".beta").offset;
            L.mean = m.buffers.at("norm" + tag + ".mean").offset;
            L.var = m.buffers.at("norm" + tag + ".var").offset;
            L.need_w = wanted(p.at("hidden" + tag + ".weight"));
            L.inv_std.resize(L.width);
            for (std::size_t j = 0; j < L.width; ++j) {
                L.inv_std[j] = 1.0 / std::sqrt(buf[L.var + j] + m.spec.norm_eps);
            }
            layers_.push_back(std::move(L));
            in = L.width;
        }
        head_in_ = in;
        head_w_ = p.at("head.weight").offset;
        head_b_ = m.spec.head_bias ? p.at("head.bias").offset : SIZE_MAX;
        need_head_w_ = wanted(p.at("head.weight"));
        lowest_ = layers_.size();
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto tag = std::to_string(l);
            if (layers_[l].need_w || wanted(p.at("hidden" + tag + ".bias")) ||
                wanted(p.at("norm" + tag + ".gamma")) || wanted(p.at("norm" + tag + ".beta"))) {
                lowest_ = l;
                break;
            }
        }
    }

    void forward(std::span<const double> x, Cache& cache, std::span<double> logits) const {
        const double* theta = model_.params.values().data();
        const double* buf = model_.buffers.values().data();
        const auto n_layers = layers_.size();
        cache.inputs.resize(n_layers);
        cache.pre.resize(n_layers);
        cache.zhat.resize(n_layers);
        cache.act.resize(n_layers);
        std::span<const double> cur = x;
        for (std::size_t l = 0; l < n_layers; ++l) {
            const auto& L = layers_[l];
            cache.inputs[l].assign(cur.begin(), cur.end());
            auto& z = cache.pre[l];
            auto& zh = cache.zhat[l];
            auto& a = cache.act[l];
            z.resize(L.width);
            zh.resize(L.width);
            a.resize(L.width);
            affine(theta + L.w, theta + L.b, cache.inputs[l], z);
            for (std::size_t j = 0; j < L.width; ++j) {
                zh[j] = (z[j] - buf[L.mean + j]) * L.inv_std[j];
                a[j] = std::tanh(theta[L.gamma + j] * zh[j] + theta[L.beta + j]);
            }
            cur = a;
        }
        affine(theta + head_w_, head_b_ == SIZE_MAX ? nullptr : theta + head_b_, cur, logits);
    }

    void backward(const Cache& cache, std::span<const double> x, std::span<const double> g,
                  std::span<double> grad) const {
        const double* theta = model_.params.values().data();
        double* gr = grad.data();
        std::span<const double> last = layers_.empty() ? x : std::span<const double>(cache.act.back());
        if (need_head_w_) add_outer(gr + head_w_, g, last);
        if (head_b_ != SIZE_MAX) {
            for (std::size_t c = 0; c < g.size(); ++c) {
                gr[head_b_ + c] += g[c];
            }
        }
        if (lowest_ == layers_.size()) {
            return;
        }
        std::vector<double> da(head_in_, 0.0);
        affine_transposed_add(theta + head_w_, g, da);
        std::vector<double> dz;
        for (std::size_t l = layers_.size(); l-- > lowest_;) {
            const auto& L = layers_[l];
            const auto& a = cache.act[l];
            const auto& zh = cache.zhat[l];
            dz.assign(L.width, 0.0);
            for (std::size_t j = 0; j < L.width; ++j) {
                const double dn = da[j] * (1.0 - a[j] * a[j]);
                gr[L.gamma + j] += dn * zh[j];
                gr[L.beta + j] += dn;
                dz[j] = dn * theta[L.gamma + j] * L.inv_std[j];
            }
            if (L.need_w) add_outer(gr + L.w, dz, cache.inputs[l]);
            for (std::size_t j = 0; j < L.width; ++j) {
                gr[L.b + j] += dz[j];
            }
            if (l > lowest_) {
                da.assign(L.in, 0.0);
                affine_transposed_add(theta + L.w, dz, da);
            }
        }
    }

    [[nodiscard]] const std::vector<Layer>& layers() const noexcept { return layers_; }

private:
    const Model& model_;
    std::vector<Layer> layers_;
    std::size_t head_in_ = 0;
    std::size_t head_w_ = 0;
    std::size_t head_b_ = SIZE_MAX;
    bool need_head_w_ = true;
    std::size_t lowest_ = 0;  // backward stops below the lowest layer with needed gradients
};

class CnnNet {
public:
    struct Cache {
        std::vector<double> pre;   // C_o x S x S conv output
        std::vector<double> zhat;  // normalized
        std::vector<double> act;   // tanh
        std::vector<double> pooled;
    };

    explicit CnnNet(const Model& m) : model_(m), spec_(m.spec) {
        side_ = spec_.image_side();
        conv_ = m.params.at("conv.weight").offset;
        gamma_ = m.params.at("bn.gamma").offset;
        beta_ = m.params.at("bn.beta").offset;
        mean_ = m.buffers.at("bn.mean").offset;
        var_ = m.buffers.at("bn.var").offset;
        head_w_ = m.params.at("head.weight").offset;
        head_b_ = spec_.head_bias ? m.params.at("head.bias").offset : SIZE_MAX;
    }

    void forward(std::span<const double> x, Cache& cache, std::span<double> logits) const {
        const double* theta = model_.params.values().data();
        const double* buf = model_.buffers.values().data();
        const std::size_t co = spec_.out_channels;
        const std::size_t hw = side_ * side_;
        cache.pre.assign(co * hw, 0.0);
        convolve(theta + conv_, x, cache.pre);
        cache.zhat.resize(co * hw);
        cache.act.resize(co * hw);
        cache.pooled.assign(co, 0.0);
        for (std::size_t o = 0; o < co; ++o) {
            const double inv_std = 1.0 / std::sqrt(buf[var_ + o] + spec_.norm_eps);
            for (std::size_t q = 0; q < hw; ++q) {
                const std::size_t idx = o * hw + q;
                cache.zhat[idx] = (cache.pre[idx] - buf[mean_ + o]) * inv_std;
                cache.act[idx] = std::tanh(theta[gamma_ + o] * cache.zhat[idx] + theta[beta_ + o]);
                cache.pooled[o] += cache.act[idx];
            }
            cache.pooled[o] /= static_cast<double>(hw);
        }
        affine(theta + head_w_, head_b_ == SIZE_MAX ? nullptr : theta + head_b_, cache.pooled,
               logits);
    }

    void backward(const Cache& cache, std::span<const double> x, std::span<const double> g,
                  std::span<double> grad) const {
        const double* theta = model_.params.values().data();
        const double* buf = model_.buffers.values().data();
        double* gr = grad.data();
        const std::size_t co = spec_.out_channels;
        const std::size_t hw = side_ * side_;
        add_outer(gr + head_w_, g, cache.pooled);
        if (head_b_ != SIZE_MAX) {
            for (std::size_t c = 0; c < g.size(); ++c) {
                gr[head_b_ + c] += g[c];
            }
        }
        std::vector<double> dp(co, 0.0);
        affine_transposed_add(theta + head_w_, g, dp);
        std::vector<double> dz(co * hw);
        for (std::size_t o = 0; o < co; ++o) {
            const double inv_std = 1.0 / std::sqrt(buf[var_ + o] + spec_.norm_eps);
            const double da = dp[o] / static_cast<double>(hw);
            for (std::size_t q = 0; q < hw; ++q) {
                const std::size_t idx = o * hw + q;
                const double dn = da * (1.0 - cache.act[idx] * cache.act[idx]);
                gr[gamma_ + o] += dn * cache.zhat[idx];
                gr[beta_ + o] += dn;
                dz[idx] = dn * theta[gamma_ + o] * inv_std;
            }
        }
        convolve_weight_grad(dz, x, gr + conv_);
    }

    /// Conv output for one sample, used for calibrating BN statistics.
    void conv_only(std::span<const double> x, std::vector<double>& out) const {
        out.assign(spec_.out_channels * side_ * side_, 0.0);
        convolve(model_.params.values().data() + conv_, x, out);
    }

    [[nodiscard]] std::size_t side() const noexcept { return side_; }

private:
    template <typename Fn>
    void for_each_tap(Fn&& fn) const {
        const std::size_t k = spec_.kernel_size;
        const auto pad = static_cast<std::ptrdiff_t>(k / 2);
        const std::size_t ci_per_group = spec_.in_channels / spec_.groups;
        const std::size_t co_per_group = spec_.out_channels / spec_.groups;
        const auto s = static_cast<std::ptrdiff_t>(side_);
        for (std::size_t o = 0; o < spec_.out_channels; ++o) {
            const std::size_t group = o / co_per_group;
            for (std::size_t cl = 0; cl < ci_per_group; ++cl) {
                const std::size_t ci = group * ci_per_group + cl;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::size_t widx = ((o * ci_per_group + cl) * k + ky) * k + kx;
                        for (std::ptrdiff_t y = 0; y < s; ++y) {
                            const std::ptrdiff_t iy = y + static_cast<std::ptrdiff_t>(ky) - pad;
                            if (iy < 0 || iy >= s) continue;
                            for (std::ptrdiff_t xx = 0; xx < s; ++xx) {
                                const std::ptrdiff_t ix = xx + static_cast<std::ptrdiff_t>(kx) - pad;
                                if (ix < 0 || ix >= s) continue;
                                const auto out_idx = static_cast<std::size_t>(
                                    static_cast<std::ptrdiff_t>(o) * s * s + y * s + xx);
                                const auto in_idx = static_cast<std::size_t>(
                                    static_cast<std::ptrdiff_t>(ci) * s * s + iy * s + ix);
                                fn(widx, out_idx, in_idx);
                            }
                        }
                    }
                }
            }
        }
    }

    void convolve(const double* w, std::span<const double> x, std::span<double> out) const {
        for_each_tap([&](std::size_t widx, std::size_t o, std::size_t i) { out[o] += w[widx] * x[i]; });
    }

    void convolve_weight_grad(std::span<const double> dz, std::span<const double> x, double* gw) const {
        for_each_tap([&](std::size_t widx, std::size_t o, std::size_t i) { gw[widx] += dz[o] * x[i]; });
    }

    const Model& model_;
    const ModelSpec& spec_;
    std::size_t side_ = 0;
    std::size_t conv_ = 0, gamma_ = 0, beta_ = 0, mean_ = 0, var_ = 0, head_w_ = 0;
    std::size_t head_b_ = SIZE_MAX;
};

class AttnNet {
public:
    struct Cache {
        std::vector<double> h;       // L x E embeddings
        std::vector<double> q;       // L x E
        std::vector<double> k;       // S x E, S = L + L_p (tokens first, then prompts)
        std::vector<double> v;       // S x E
        std::vector<double> attn;    // L x S softmax weights
        std::vector<double> u;       // L x E after attention residual
        std::vector<double> hidden;  // L x 4E tanh activations
        std::vector<double> pooled;  // E
    };

    explicit AttnNet(const Model& m) : model_(m), spec_(m.spec) {
        const auto& p = m.params;
        embed_w_ = p.at("embed.weight").offset;
        embed_b_ = p.at("embed.bias").offset;
        wq_ = p.at("attn.query").offset;
        wk_ = p.at("attn.key").offset;
        wv_ = p.at("attn.value").offset;
        pk_ = p.at("attn.prompt_key").offset;
        pv_ = p.at("attn.prompt_value").offset;
        fc1_ = p.at("mlp.fc1").offset;
        fc2_ = p.at("mlp.fc2").offset;
        head_w_ = p.at("head.weight").offset;
        head_b_ = spec_.head_bias ? p.at("head.bias").offset : SIZE_MAX;
    }

    void forward(std::span<const double> x, Cache& c, std::span<double> logits) const {
        const double* theta = model_.params.values().data();
        const std::size_t L = spec_.seq_len, E = spec_.embed_dim, T = spec_.token_dim();
        const std::size_t P = spec_.prompt_length, S = L + P, H = 4 * E;
        const double scale = 1.0 / std::sqrt(static_cast<double>(E));
        const std::size_t slots = spec_.mask_prompt_slots ? L : S;
        c.h.assign(L * E, 0.0);
        c.q.assign(L * E, 0.0);
        c.k.assign(S * E, 0.0);
        c.v.assign(S * E, 0.0);
        for (std::size_t t = 0; t < L; ++t) {
            std::span<double> ht(c.h.data() + t * E, E);
            affine(theta + embed_w_, theta + embed_b_, x.subspan(t * T, T), ht);
            affine(theta + wq_, nullptr, ht, {c.q.data() + t * E, E});
            affine(theta + wk_, nullptr, ht, {c.k.data() + t * E, E});
            affine(theta + wv_, nullptr, ht, {c.v.data() + t * E, E});
        }
        std::copy_n(theta + pk_, P * E, c.k.data() + L * E);
        std::copy_n(theta + pv_, P * E, c.v.data() + L * E);

        c.attn.assign(L * S, 0.0);
        c.u = c.h;
        for (std::size_t t = 0; t < L; ++t) {
            double* a = c.attn.data() + t * S;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < slots; ++j) {
                a[j] = scale * dot(c.q.data() + t * E, c.k.data() + j * E, E);
                mx = std::max(mx, a[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < slots; ++j) {
                a[j] = std::exp(a[j] - mx);
                z += a[j];
            }
            for (std::size_t j = 0; j < slots; ++j) {
                a[j] /= z;
                const double* vj = c.v.data() + j * E;
                double* ut = c.u.data() + t * E;
                for (std::size_t e = 0; e < E; ++e) {
                    ut[e] += a[j] * vj[e];
                }
            }
        }
        c.hidden.assign(L * H, 0.0);
        c.pooled.assign(E, 0.0);
        std::vector<double> m(E);
        for (std::size_t t = 0; t < L; ++t) {
            std::span<const double> ut(c.u.data() + t * E, E);
            std::span<double> hid(c.hidden.data() + t * H, H);
            affine(theta + fc1_, nullptr, ut, hid);
            for (auto& v : hid) {
                v = std::tanh(v);
            }
            affine(theta + fc2_, nullptr, hid, m);
            for (std::size_t e = 0; e < E; ++e) {
                c.pooled[e] += ut[e] + m[e];
            }
        }
        for (auto& v : c.pooled) {
            v /= static_cast<double>(L);
        }
        affine(theta + head_w_, head_b_ == SIZE_MAX ? nullptr : theta + head_b_, c.pooled, logits);
    }

    void backward(const Cache& c, std::span<const double> x, std::span<const double> g,
                  std::span<double> grad) const {
        const double* theta = model_.params.values().data();
        double* gr = grad.data();
        const std::size_t L = spec_.seq_len, E = spec_.embed_dim, T = spec_.token_dim();
        const std::size_t S = L + spec_.prompt_length, H = 4 * E;
        const double scale = 1.0 / std::sqrt(static_cast<double>(E));
        const std::size_t slots = spec_.mask_prompt_slots ? L : S;

        add_outer(gr + head_w_, g, c.pooled);
        if (head_b_ != SIZE_MAX) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                gr[head_b_ + i] += g[i];
            }
        }
        std::vector<double> dpool(E, 0.0);
        affine_transposed_add(theta + head_w_, g, dpool);
        // d(m_t) is the same for every token under mean pooling.
        std::vector<double> dm(E);
        for (std::size_t e = 0; e < E; ++e) {
            dm[e] = dpool[e] / static_cast<double>(L);
        }

        std::vector<double> du(L * E);
        std::vector<double> dhid(H);
        for (std::size_t t = 0; t < L; ++t) {
            std::span<const double> hid(c.hidden.data() + t * H, H);
            add_outer(gr + fc2_, dm, hid);
            std::fill(dhid.begin(), dhid.end(), 0.0);
            affine_transposed_add(theta + fc2_, dm, dhid);
            for (std::size_t i = 0; i < H; ++i) {
                dhid[i] *= 1.0 - hid[i] * hid[i];
            }
            add_outer(gr + fc1_, dhid, {c.u.data() + t * E, E});
            std::span<double> dut(du.data() + t * E, E);
            std::copy(dm.begin(), dm.end(), dut.begin());
            affine_transposed_add(theta + fc1_, dhid, dut);
        }

        // u = h + A V
        std::vector<double> dh(du);
        std::vector<double> dq(L * E, 0.0), dk(S * E, 0.0), dv(S * E, 0.0);
        std::vector<double> dattn(S);
        for (std::size_t t = 0; t < L; ++t) {
            const double* a = c.attn.data() + t * S;
            const double* dut = du.data() + t * E;
            double weighted = 0.0;
            for (std::size_t j = 0; j < slots; ++j) {
                dattn[j] = dot(dut, c.v.data() + j * E, E);
                weighted += a[j] * dattn[j];
                double* dvj = dv.data() + j * E;
                for (std::size_t e = 0; e < E; ++e) {
                    dvj[e] += a[j] * dut[e];
                }
            }
            for (std::size_t j = 0; j < slots; ++j) {
                const double ds = a[j] * (dattn[j] - weighted) * scale;
                const double* kj = c.k.data() + j * E;
                const double* qt = c.q.data() + t * E;
                double* dqt = dq.data() + t * E;
                double* dkj = dk.data() + j * E;
                for (std::size_t e = 0; e < E; ++e) {
                    dqt[e] += ds * kj[e];
                    dkj[e] += ds * qt[e];
                }
            }
        }
        const std::size_t P = spec_.prompt_length;
        for (std::size_t i = 0; i < P * E; ++i) {
            gr[pk_ + i] += dk[L * E + i];
            gr[pv_ + i] += dv[L * E + i];
        }
        for (std::size_t t = 0; t < L; ++t) {
            std::span<const double> ht(c.h.data() + t * E, E);
            std::span<double> dht(dh.data() + t * E, E);
            std::span<const double> dqt(dq.data() + t * E, E);
            std::span<const double> dkt(dk.data() + t * E, E);
            std::span<const double> dvt(dv.data() + t * E, E);
            add_outer(gr + wq_, dqt, ht);
            add_outer(gr + wk_, dkt, ht);
            add_outer(gr + wv_, dvt, ht);
            affine_transposed_add(theta + wq_, dqt, dht);
            affine_transposed_add(theta + wk_, dkt, dht);
            affine_transposed_add(theta + wv_, dvt, dht);
            add_outer(gr + embed_w_, dht, x.subspan(t * T, T));
            for (std::size_t e = 0; e < E; ++e) {
                gr[embed_b_ + e] += dht[e];
            }
        }
    }

private:
    const Model& model_;
    const ModelSpec& spec_;
    std::size_t embed_w_ = 0, embed_b_ = 0, wq_ = 0, wk_ = 0, wv_ = 0, pk_ = 0, pv_ = 0;
    std::size_t fc1_ = 0, fc2_ = 0, head_w_ = 0;
    std::size_t head_b_ = SIZE_MAX;
};

}  // namespace detail

/// Single-sample forward/backward over a model that must outlive it. Backward
/// is reverse-mode: given d(loss)/d(logits) it accumulates d(loss)/d(theta)
/// into `grad` (length d), so callers zero `grad` first.
class Network {
public:
    using Cache = std::variant<detail::MlpNet::Cache, detail::CnnNet::Cache, detail::AttnNet::Cache>;

    /// With `need`, backward only guarantees gradient entries at those indices.
    explicit Network(const Model& m, const ParamMask* need = nullptr)
        : impl_(make(m, need)), num_classes_(m.spec.num_classes) {}

    void forward(std::span<const double> x, Cache& cache, std::span<double> logits) const {
        std::visit(
            [&](const auto& net) {
                using Net = std::decay_t<decltype(net)>;
                if (!std::holds_alternative<typename Net::Cache>(cache)) {
                    cache = typename Net::Cache{};
                }
                net.forward(x, std::get<typename Net::Cache>(cache), logits);
            },
            impl_);
    }

    void backward(const Cache& cache, std::span<const double> x, std::span<const double> dlogits,
                  std::span<double> grad) const {
        std::visit(
            [&](const auto& net) {
                using Net = std::decay_t<decltype(net)>;
                net.backward(std::get<typename Net::Cache>(cache), x, dlogits, grad);
            },
            impl_);
    }

    [[nodiscard]] std::size_t num_classes() const noexcept { return num_classes_; }

private:
    using Impl = std::variant<detail::MlpNet, detail::CnnNet, detail::AttnNet>;

    static Impl make(const Model& m, const ParamMask* need) {
        switch (m.spec.architecture) {
            case Architecture::MlpNorm: return detail::MlpNet(m, need);
            case Architecture::CnnBn: return detail::CnnNet(m);
            case Architecture::AttnPrompt: return detail::AttnNet(m);
        }
        fail(ErrorCode::InvalidConfig, "unknown architecture");
    }

    Impl impl_;
    std::size_t num_classes_;
};

inline void check_inputs(const Model& model, const DenseMatrix& inputs) {
    require(inputs.cols() == model.spec.input_dim || inputs.rows() == 0,
            ErrorCode::DimensionMismatch,
            "inputs have " + std::to_string(inputs.cols()) + " features, model expects " +
                std::to_string(model.spec.input_dim));
    require(model.params.size() > 0, ErrorCode::InvalidConfig, "model has no parameters");
    require(all_finite(model.params.values()), ErrorCode::NonFinite, "non-finite parameter");
    require(all_finite(inputs.values()), ErrorCode::NonFinite, "non-finite input");
}

/// Logits for every row of `inputs` (n x C). Normalization uses the stored
/// statistics, so a batch forward equals stacked single-sample forwards.
[[nodiscard]] inline DenseMatrix forward(const Model& model, const DenseMatrix& inputs) {
    check_inputs(model, inputs);
    const std::size_t c = model.spec.num_classes;
    DenseMatrix logits(inputs.rows(), c);
    const Network net(model);
    Network::Cache cache;
    for (std::size_t i = 0; i < inputs.rows(); ++i) {
        net.forward(inputs.row(i), cache, logits.row(i));
    }
    require(all_finite(logits.values()), ErrorCode::NonFinite, "non-finite logits");
    return logits;
}

/// Rows sample_index * C + class_index; one backward pass per (sample, class);
/// columns are the masked parameters in mask order.
[[nodiscard]] inline DenseMatrix per_sample_jacobian(const Model& model, const DenseMatrix& inputs,
                                                     const ParamMask& mask) {
    check_inputs(model, inputs);
    mask.validate(model.params.size());
    const std::size_t c = model.spec.num_classes;
    const std::size_t d = model.params.size();
    DenseMatrix jac(inputs.rows() * c, mask.size());
    const Network net(model, &mask);
    Network::Cache cache;
    std::vector<double> logits(c), seed(c, 0.0), grad(d);
    for (std::size_t s = 0; s < inputs.rows(); ++s) {
        net.forward(inputs.row(s), cache, logits);
        for (std::size_t k = 0; k < c; ++k) {
            std::fill(grad.begin(), grad.end(), 0.0);
            seed[k] = 1.0;
            net.backward(cache, inputs.row(s), seed, grad);
            seed[k] = 0.0;
            auto row = jac.row(s * c + k);
            for (std::size_t i = 0; i < mask.size(); ++i) {
                row[i] = grad[mask.indices[i]];
            }
        }
    }
    require(all_finite(jac.values()), ErrorCode::NonFinite, "non-finite Jacobian entry");
    return jac;
}

/// Sets every normalization layer's stored mean and (population) variance from
/// `inputs`, layer by layer so each layer sees already-calibrated predecessors.
inline void calibrate_normalization(Model& model, const DenseMatrix& inputs) {
    check_inputs(model, inputs);
    require(inputs.rows() > 0, ErrorCode::EmptySplit, "calibration needs at least one sample");
    const auto n = static_cast<double>(inputs.rows());
    switch (model.spec.architecture) {
        case Architecture::MlpNorm: {
            for (std::size_t l = 0; l < model.spec.layer_sizes.size(); ++l) {
                const detail::MlpNet net(model);
                const auto& layer = net.layers()[l];
                std::vector<double> sum(layer.width, 0.0), sq(layer.width, 0.0);
                detail::MlpNet::Cache cache;
                std::vector<double> logits(model.spec.num_classes);
                for (std::size_t s = 0; s < inputs.rows(); ++s) {
                    net.forward(inputs.row(s), cache, logits);
                    for (std::size_t j = 0; j < layer.width; ++j) {
                        sum[j] += cache.pre[l][j];
                    }
                }
                for (std::size_t j = 0; j < layer.width; ++j) {
                    sum[j] /= n;
                }
                for (std::size_t s = 0; s < inputs.rows(); ++s) {
                    net.forward(inputs.row(s), cache, logits);
                    for (std::size_t j = 0; j < layer.width; ++j) {
                        const double dz = cache.pre[l][j] - sum[j];
                        sq[j] += dz * dz;
                    }
                }
                auto mean = model.buffers.tensor("norm" + std::to_string(l) + ".mean");
                auto var = model.buffers.tensor("norm" + std::to_string(l) + ".var");
                for (std::size_t j = 0; j < layer.width; ++j) {
                    mean[j] = sum[j];
                    var[j] = sq[j] / n;
                }
            }
            break;
        }
        case Architecture::CnnBn: {
            const detail::CnnNet net(model);
            const std::size_t co = model.spec.out_channels;
            const std::size_t hw = net.side() * net.side();
            std::vector<double> sum(co, 0.0), sq(co, 0.0), z;
            for (std::size_t s = 0; s < inputs.rows(); ++s) {
                net.conv_only(inputs.row(s), z);
                for (std::size_t i = 0; i < z.size(); ++i) {
                    sum[i / hw] += z[i];
                }
            }
            const double count = n * static_cast<double>(hw);
            for (auto& v : sum) {
                v /= count;
            }
            for (std::size_t s = 0; s < inputs.rows(); ++s) {
                net.conv_only(inputs.row(s), z);
                for (std::size_t i = 0; i < z.size(); ++i) {
                    const double dz = z[i] - sum[i / hw];
                    sq[i / hw] += dz * dz;
                }
            }
            auto mean = model.buffers.tensor("bn.mean");
            auto var = model.buffers.tensor("bn.var");
            for (std::size_t o = 0; o < co; ++o) {
                mean[o] = sum[o];
                var[o] = sq[o] / count;
            }
            break;
        }
        case Architecture::AttnPrompt:
            break;
    }
}

// ---------------------------------------------------------------------------
// Masks and parameter accounting

enum class MaskKind { Full, NormAffine, PromptOnly, HeadOnly, NamedList };

inline std::string_view to_string(MaskKind k) {
    switch (k) {
        case MaskKind::Full: return "full";
        case MaskKind::NormAffine: return "norm_affine";
        case MaskKind::PromptOnly: return "prompt_only";
        case MaskKind::HeadOnly: return "head_only";
        case MaskKind::NamedList: return "named_list";
    }
    return "unknown";
}

inline MaskKind mask_kind_from_string(std::string_view s) {
    for (auto k : {MaskKind::Full, MaskKind::NormAffine, MaskKind::PromptOnly, MaskKind::HeadOnly,
                   MaskKind::NamedList}) {
        if (to_string(k) == s) {
            return k;
        }
    }
    fail(ErrorCode::InvalidStrategy, "unknown mask strategy '" + std::string(s) + "'");
}

struct MaskStrategy {
    MaskKind kind = MaskKind::Full;
    std::vector<std::string> tensor_names;  // NamedList only

    bool operator==(const MaskStrategy&) const = default;
};

namespace detail {

inline bool role_selected(MaskKind kind, TensorRole role) {
    switch (kind) {
        case MaskKind::Full: return true;
        case MaskKind::NormAffine:
            return role == TensorRole::NormScale || role == TensorRole::NormShift;
        case MaskKind::PromptOnly:
            return role == TensorRole::PromptKey || role == TensorRole::PromptValue;
        case MaskKind::HeadOnly:
            return role == TensorRole::HeadWeight || role == TensorRole::HeadBias;
        case MaskKind::NamedList: return false;
    }
    return false;
}

}  // namespace detail

[[nodiscard]] inline ParamMask select_params(const ParamVector& params, const ModelSpec& spec,
                                             const MaskStrategy& strategy) {
    if (strategy.kind == MaskKind::PromptOnly) {
        require(spec.architecture == Architecture::AttnPrompt, ErrorCode::InvalidStrategy,
                "prompt_only requires attn_prompt");
    }
    ParamMask mask;
    mask.strategy_name = std::string(to_string(strategy.kind));
    for (const auto& t : params.layout()) {
        bool take = detail::role_selected(strategy.kind, t.role);
        if (strategy.kind == MaskKind::NamedList) {
            take = std::find(strategy.tensor_names.begin(), strategy.tensor_names.end(), t.name) !=
                   strategy.tensor_names.end();
        }
        if (take) {
            for (std::size_t i = 0; i < t.numel(); ++i) {
                mask.indices.push_back(t.offset + i);
            }
        }
    }
    if (strategy.kind == MaskKind::NamedList) {
        for (const auto& name : strategy.tensor_names) {
            require(params.find(name) != nullptr, ErrorCode::InvalidStrategy,
                    "named_list: no tensor '" + name + "'");
        }
    }
    require(!mask.indices.empty(), ErrorCode::InvalidStrategy,
            "strategy " + mask.strategy_name + " selects no parameters of " +
                std::string(to_string(spec.architecture)));
    return mask;
}

[[nodiscard]] inline ParamMask select_params(const Model& model, const MaskStrategy& strategy) {
    return select_params(model.params, model.spec, strategy);
}

[[nodiscard]] inline ParamMask select_params(const ModelSpec& spec, const MaskStrategy& strategy) {
    const Model m = build_model(spec);
    return select_params(m, strategy);
}

struct ParamAccounting {
    std::size_t d_total = 0;
    std::size_t d_masked = 0;
    std::size_t d_head = 0;
    double ratio = 0.0;            // d_masked / d_total
    double ratio_with_head = 0.0;  // (d_masked + head not already masked) / d_total
};

[[nodiscard]] inline ParamAccounting param_accounting(const ModelSpec& spec,
                                                      const MaskStrategy& strategy) {
    const Model m = build_model(spec);
    const ParamMask mask = select_params(m, strategy);
    ParamAccounting acc;
    acc.d_total = m.params.size();
    acc.d_masked = mask.size();
    std::size_t head_extra = 0;
    for (const auto& t : m.params.layout()) {
        if (t.role == TensorRole::HeadWeight || t.role == TensorRole::HeadBias) {
            acc.d_head += t.numel();
            if (!detail::role_selected(strategy.kind, t.role) &&
                !(strategy.kind == MaskKind::NamedList &&
                  std::find(strategy.tensor_names.begin(), strategy.tensor_names.end(), t.name) !=
                      strategy.tensor_names.end())) {
                head_extra += t.numel();
            }
        }
    }
    acc.ratio = static_cast<double>(acc.d_masked) / static_cast<double>(acc.d_total);
    acc.ratio_with_head =
        static_cast<double>(acc.d_masked + head_extra) / static_cast<double>(acc.d_total);
    return acc;
}

/// Parameter counts per structural group, taken from the layout.
struct LayerCounts {
    std::size_t conv = 0;     // convolution weights
    std::size_t norm = 0;     // normalization scale + shift
    std::size_t msa = 0;      // query/key/value projections
    std::size_t block = 0;    // msa + transformer MLP
    std::size_t prompt = 0;   // prompt keys + values
    std::size_t head = 0;
    std::size_t total = 0;
};

[[nodiscard]] inline LayerCounts layer_counts(const ModelSpec& spec) {
    const Model m = build_model(spec);
    LayerCounts c;
    c.total = m.params.size();
    for (const auto& t : m.params.layout()) {
        const auto n = t.numel();
        if (t.name == "conv.weight") c.conv += n;
        if (t.role == TensorRole::NormScale || t.role == TensorRole::NormShift) c.norm += n;
        if (t.name == "attn.query" || t.name == "attn.key" || t.name == "attn.value") {
            c.msa += n;
            c.block += n;
        }
        if (t.name.starts_with("mlp.")) c.block += n;
        if (t.role == TensorRole::PromptKey || t.role == TensorRole::PromptValue) c.prompt += n;
        if (t.role == TensorRole::HeadWeight || t.role == TensorRole::HeadBias) c.head += n;
    }
    return c;
}

}  // namespace ntku
