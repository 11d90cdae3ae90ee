#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "ntku/dataset.hpp"
#include "ntku/error.hpp"
#include "ntku/models.hpp"

namespace ntku {

/// Index of the largest entry; ties go to the lowest index.
[[nodiscard]] inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

[[nodiscard]] inline double accuracy_from_logits(const DenseMatrix& logits,
                                                 std::span<const std::size_t> labels) {
    require(logits.rows() == labels.size(), ErrorCode::DimensionMismatch,
            "accuracy: logits and labels disagree in length");
    require(!labels.empty(), ErrorCode::EmptySplit, "accuracy over an empty selection");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        hits += argmax(logits.row(i)) == labels[i];
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

[[nodiscard]] inline double accuracy(const Model& model, const Dataset& data, TagFilter filter) {
    const Dataset part = data.subset(filter);
    require(part.size() > 0, ErrorCode::EmptySplit, "accuracy: no samples match the filter");
    return accuracy_from_logits(forward(model, part.inputs), part.labels);
}

/// Accuracy per true class over the selected samples; NaN for classes with no
/// samples in the selection.
[[nodiscard]] inline std::vector<double> per_class_accuracy(const Model& model, const Dataset& data,
                                                            TagFilter filter) {
    const Dataset part = data.subset(filter);
    require(part.size() > 0, ErrorCode::EmptySplit, "accuracy: no samples match the filter");
    const DenseMatrix logits = forward(model, part.inputs);
    std::vector<std::size_t> hits(data.num_classes, 0), total(data.num_classes, 0);
    for (std::size_t i = 0; i < part.size(); ++i) {
        const auto y = part.labels[i];
        ++total[y];
        hits[y] += argmax(logits.row(i)) == y;
    }
    std::vector<double> out(data.num_classes, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = 0; c < data.num_classes; ++c) {
        if (total[c] > 0) out[c] = static_cast<double>(hits[c]) / static_cast<double>(total[c]);
    }
    return out;
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // population (ddof = 0)
};

[[nodiscard]] inline MeanStd mean_std(std::span<const double> xs) {
    MeanStd r;
    if (xs.empty()) return r;
    for (double x : xs) r.mean += x;
    r.mean /= static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size()));
    return r;
}

}  // namespace ntku
