#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ntku/error.hpp"

namespace ntku {

/// What a tensor does in its layer; mask strategies select by role, not by name.
enum class TensorRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
    PromptKey,
    PromptValue,
    HeadWeight,
    HeadBias,
    Statistic,
};

inline std::string_view to_string(TensorRole role) {
    switch (role) {
        case TensorRole::Weight: return "weight";
        case TensorRole::Bias: return "bias";
        case TensorRole::NormScale: return "norm_scale";
        case TensorRole::NormShift: return "norm_shift";
        case TensorRole::PromptKey: return "prompt_key";
        case TensorRole::PromptValue: return "prompt_value";
        case TensorRole::HeadWeight: return "head_weight";
        case TensorRole::HeadBias: return "head_bias";
        case TensorRole::Statistic: return "statistic";
    }
    return "unknown";
}

inline TensorRole tensor_role_from_string(std::string_view s) {
    for (auto r : {TensorRole::Weight, TensorRole::Bias, TensorRole::NormScale,
                   TensorRole::NormShift, TensorRole::PromptKey, TensorRole::PromptValue,
                   TensorRole::HeadWeight, TensorRole::HeadBias, TensorRole::Statistic}) {
        if (to_string(r) == s) {
            return r;
        }
    }
    fail(ErrorCode::BadFormat, "unknown tensor role '" + std::string(s) + "'");
}

struct TensorInfo {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    TensorRole role = TensorRole::Weight;

    [[nodiscard]] std::size_t numel() const noexcept {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               std::multiplies<>{});
    }

    bool operator==(const TensorInfo&) const = default;
};

/// Flat parameter storage plus the named layout that gives it structure.
class ParamVector {
public:
    ParamVector() = default;

    /// Appends a zero-filled tensor and returns its offset.
    std::size_t add(std::string name, std::vector<std::size_t> shape, TensorRole role) {
        require(find(name) == nullptr, ErrorCode::InvalidConfig,
                "duplicate tensor name '" + name + "'");
        TensorInfo info{std::move(name), std::move(shape), values_.size(), role};
        values_.resize(values_.size() + info.numel(), 0.0);
        layout_.push_back(std::move(info));
        return layout_.back().offset;
    }

    [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
    [[nodiscard]] const std::vector<TensorInfo>& layout() const noexcept { return layout_; }
    std::span<double> values() noexcept { return values_; }
    [[nodiscard]] std::span<const double> values() const noexcept { return values_; }

    [[nodiscard]] const TensorInfo* find(std::string_view name) const noexcept {
        for (const auto& t : layout_) {
            if (t.name == name) {
                return &t;
            }
        }
        return nullptr;
    }

    [[nodiscard]] const TensorInfo& at(std::string_view name) const {
        const auto* t = find(name);
        require(t != nullptr, ErrorCode::InvalidConfig,
                "no tensor named '" + std::string(name) + "'");
        return *t;
    }

    std::span<double> tensor(std::string_view name) {
        const auto& t = at(name);
        return {values_.data() + t.offset, t.numel()};
    }
    [[nodiscard]] std::span<const double> tensor(std::string_view name) const {
        const auto& t = at(name);
        return {values_.data() + t.offset, t.numel()};
    }

    /// Replaces the values wholesale; the layout is kept.
    void assign(std::span<const double> v) {
        require(v.size() == values_.size(), ErrorCode::DimensionMismatch,
                "assign: value count differs from layout size");
        std::copy(v.begin(), v.end(), values_.begin());
    }

    [[nodiscard]] bool same_layout(const ParamVector& other) const noexcept {
        return layout_ == other.layout_;
    }

    bool operator==(const ParamVector&) const = default;

private:
    std::vector<TensorInfo> layout_;
    std::vector<double> values_;
};

/// Strictly increasing subset of ParamVector positions.
struct ParamMask {
    std::vector<std::size_t> indices;
    std::string strategy_name;

    [[nodiscard]] std::size_t size() const noexcept { return indices.size(); }

    void validate(std::size_t d) const {
        require(!indices.empty(), ErrorCode::InvalidStrategy, "mask selects no parameters");
        for (std::size_t i = 0; i < indices.size(); ++i) {
            require(indices[i] < d, ErrorCode::InvalidStrategy, "mask index out of bounds");
            require(i == 0 || indices[i - 1] < indices[i], ErrorCode::InvalidStrategy,
                    "mask indices must be strictly increasing");
        }
    }

    static ParamMask full(std::size_t d) {
        ParamMask m{std::vector<std::size_t>(d), "full"};
        std::iota(m.indices.begin(), m.indices.end(), std::size_t{0});
        return m;
    }

    bool operator==(const ParamMask&) const = default;
};

[[nodiscard]] inline std::vector<double> gather(std::span<const double> values,
                                                const ParamMask& mask) {
    std::vector<double> out(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        out[i] = values[mask.indices[i]];
    }
    return out;
}

/// out[mask[i]] = in[mask[i]] + delta[i]; every other entry is untouched.
[[nodiscard]] inline ParamVector apply_delta(const ParamVector& params, const ParamMask& mask,
                                             std::span<const double> delta) {
    require(delta.size() == mask.size(), ErrorCode::DimensionMismatch,
            "apply_delta: delta length " + std::to_string(delta.size()) + " != mask size " +
                std::to_string(mask.size()));
    mask.validate(params.size());
    ParamVector out = params;
    auto v = out.values();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        v[mask.indices[i]] += delta[i];
    }
    return out;
}

}  // namespace ntku
