#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ntku/checkpoint.hpp"
#include "ntku/error.hpp"
#include "ntku/numerics.hpp"
#include "ntku/rng.hpp"

namespace ntku {

enum class SplitTag : std::uint8_t { Retain, Forget, Holdout };

inline std::string_view to_string(SplitTag t) {
    switch (t) {
        case SplitTag::Retain: return "retain";
        case SplitTag::Forget: return "forget";
        case SplitTag::Holdout: return "holdout";
    }
    return "unknown";
}

inline SplitTag split_tag_from_string(std::string_view s) {
    if (s == "retain") return SplitTag::Retain;
    if (s == "forget") return SplitTag::Forget;
    if (s == "holdout") return SplitTag::Holdout;
    fail(ErrorCode::BadFormat, "unknown split tag '" + std::string(s) + "'");
}

/// Which samples an operation looks at.
enum class TagFilter { Retain, Forget, Holdout, Train, All };

inline bool matches(TagFilter f, SplitTag t) {
    switch (f) {
        case TagFilter::Retain: return t == SplitTag::Retain;
        case TagFilter::Forget: return t == SplitTag::Forget;
        case TagFilter::Holdout: return t == SplitTag::Holdout;
        case TagFilter::Train: return t != SplitTag::Holdout;
        case TagFilter::All: return true;
    }
    return false;
}

/// Samples with integer labels and split tags. Training samples carry Retain or
/// Forget, hold-out samples carry Holdout.
struct Dataset {
    DenseMatrix inputs;
    std::vector<std::size_t> labels;
    std::vector<SplitTag> tags;
    std::size_t num_classes = 0;

    [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }

    void validate() const {
        require(inputs.rows() == labels.size() && tags.size() == labels.size(),
                ErrorCode::DimensionMismatch, "dataset field lengths differ");
        require(num_classes >= 2, ErrorCode::InvalidConfig, "dataset needs >= 2 classes");
        for (auto l : labels) {
            require(l < num_classes, ErrorCode::LabelRange, "label out of range");
        }
    }

    [[nodiscard]] std::vector<std::size_t> indices(TagFilter f) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < size(); ++i) {
            if (matches(f, tags[i])) out.push_back(i);
        }
        return out;
    }

    [[nodiscard]] std::size_t count(TagFilter f) const {
        return static_cast<std::size_t>(
            std::count_if(tags.begin(), tags.end(), [f](SplitTag t) { return matches(f, t); }));
    }

    /// Samples matching `f`, in original order.
    [[nodiscard]] Dataset subset(TagFilter f) const {
        const auto idx = indices(f);
        Dataset out;
        out.num_classes = num_classes;
        out.inputs = DenseMatrix(idx.size(), inputs.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            auto src = inputs.row(idx[r]);
            std::copy(src.begin(), src.end(), out.inputs.row(r).begin());
            out.labels.push_back(labels[idx[r]]);
            out.tags.push_back(tags[idx[r]]);
        }
        return out;
    }

    /// One-hot targets, n x C.
    [[nodiscard]] DenseMatrix targets() const {
        DenseMatrix t(size(), num_classes);
        for (std::size_t i = 0; i < size(); ++i) {
            t(i, labels[i]) = 1.0;
        }
        return t;
    }

    bool operator==(const Dataset&) const = default;
};

/// Isotropic unit-variance Gaussian clusters. Centers sit at pairwise distance
/// exactly `class_separation` (scaled coordinate axes) when num_classes <=
/// input_dim, otherwise they are rejection-sampled to be at least that far apart.
/// The hold-out half has the same per-class count and follows the training half.
[[nodiscard]] inline Dataset gen_blobs(std::size_t num_classes, std::size_t images_per_class,
                                       std::size_t input_dim, double class_separation,
                                       std::uint64_t seed) {
    require(num_classes >= 2, ErrorCode::InvalidConfig, "gen_blobs needs num_classes >= 2");
    require(class_separation > 0.0, ErrorCode::InvalidConfig, "class_separation must be > 0");
    require(input_dim >= 1 && images_per_class >= 1, ErrorCode::InvalidConfig,
            "gen_blobs needs input_dim, images_per_class >= 1");
    CounterRng rng(derive_seed(seed, 0xB10B5));
    DenseMatrix centers(num_classes, input_dim);
    if (num_classes <= input_dim) {
        const double r = class_separation / std::sqrt(2.0);
        for (std::size_t c = 0; c < num_classes; ++c) {
            centers(c, c) = r;
        }
    } else {
        const double box = class_separation * static_cast<double>(num_classes);
        for (std::size_t c = 0; c < num_classes; ++c) {
            for (;;) {
                for (auto& v : centers.row(c)) {
                    v = box * (2.0 * rng.uniform() - 1.0);
                }
                bool ok = true;
                for (std::size_t o = 0; o < c && ok; ++o) {
                    double d2 = 0.0;
                    for (std::size_t k = 0; k < input_dim; ++k) {
                        const double dk = centers(c, k) - centers(o, k);
                        d2 += dk * dk;
                    }
                    ok = std::sqrt(d2) >= class_separation;
                }
                if (ok) break;
            }
        }
    }
    Dataset ds;
    ds.num_classes = num_classes;
    const std::size_t n = 2 * num_classes * images_per_class;
    ds.inputs = DenseMatrix(n, input_dim);
    std::size_t row = 0;
    for (SplitTag tag : {SplitTag::Retain, SplitTag::Holdout}) {
        for (std::size_t c = 0; c < num_classes; ++c) {
            for (std::size_t i = 0; i < images_per_class; ++i, ++row) {
                auto x = ds.inputs.row(row);
                for (std::size_t k = 0; k < input_dim; ++k) {
                    x[k] = centers(c, k) + rng.normal();
                }
                ds.labels.push_back(c);
                ds.tags.push_back(tag);
            }
        }
    }
    return ds;
}

namespace detail {

inline std::uint32_t read_be32(const std::string& bytes, std::size_t pos) {
    return (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos])) << 24) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + 1])) << 16) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + 2])) << 8) |
           static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + 3]));
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Parses an IDX image/label pair (MNIST layout). Pixels are scaled to [0, 1].
/// With limit_per_class > 0, only the first `limit_per_class` samples of each
/// class (in file order) are kept. All samples get `tag`.
[[nodiscard]] inline Dataset parse_idx(const std::string& images, const std::string& labels,
                                       std::size_t num_classes, std::size_t limit_per_class = 0,
                                       SplitTag tag = SplitTag::Retain) {
    require(images.size() >= 4 && detail::read_be32(images, 0) == kIdxImagesMagic,
            ErrorCode::BadMagic, "image file magic is not 0x00000803");
    require(labels.size() >= 4 && detail::read_be32(labels, 0) == kIdxLabelsMagic,
            ErrorCode::BadMagic, "label file magic is not 0x00000801");
    require(images.size() >= 16, ErrorCode::TruncatedFile, "image header truncated");
    require(labels.size() >= 8, ErrorCode::TruncatedFile, "label header truncated");
    const std::size_t n = detail::read_be32(images, 4);
    const std::size_t rows = detail::read_be32(images, 8);
    const std::size_t cols = detail::read_be32(images, 12);
    const std::size_t nl = detail::read_be32(labels, 4);
    const std::size_t pixels = rows * cols;
    require(images.size() == 16 + n * pixels, ErrorCode::TruncatedFile,
            "image payload is " + std::to_string(images.size() - 16) + " bytes, header declares " +
                std::to_string(n * pixels));
    require(labels.size() == 8 + nl, ErrorCode::TruncatedFile,
            "label payload is " + std::to_string(labels.size() - 8) + " bytes, header declares " +
                std::to_string(nl));
    require(n == nl, ErrorCode::TruncatedFile, "image and label counts differ");

    std::vector<std::size_t> kept;
    std::vector<std::size_t> per_class(num_classes, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto label = static_cast<std::size_t>(static_cast<unsigned char>(labels[8 + i]));
        require(label < num_classes, ErrorCode::LabelRange,
                "label " + std::to_string(label) + " >= num_classes " + std::to_string(num_classes));
        if (limit_per_class == 0 || per_class[label] < limit_per_class) {
            ++per_class[label];
            kept.push_back(i);
        }
    }
    Dataset ds;
    ds.num_classes = num_classes;
    ds.inputs = DenseMatrix(kept.size(), pixels);
    for (std::size_t r = 0; r < kept.size(); ++r) {
        const std::size_t src = 16 + kept[r] * pixels;
        auto x = ds.inputs.row(r);
        for (std::size_t p = 0; p < pixels; ++p) {
            x[p] = static_cast<double>(static_cast<unsigned char>(images[src + p])) / 255.0;
        }
        ds.labels.push_back(static_cast<unsigned char>(labels[8 + kept[r]]));
        ds.tags.push_back(tag);
    }
    return ds;
}

[[nodiscard]] inline Dataset load_idx(const std::filesystem::path& images_path,
                                      const std::filesystem::path& labels_path,
                                      std::size_t limit_per_class, std::size_t num_classes = 10,
                                      SplitTag tag = SplitTag::Retain) {
    return parse_idx(read_file(images_path), read_file(labels_path), num_classes, limit_per_class,
                     tag);
}

/// Concatenates two datasets with the same feature width and class count.
[[nodiscard]] inline Dataset concat(const Dataset& a, const Dataset& b) {
    require(a.num_classes == b.num_classes && (a.size() == 0 || b.size() == 0 ||
                                               a.inputs.cols() == b.inputs.cols()),
            ErrorCode::DimensionMismatch, "concat: incompatible datasets");
    Dataset out;
    out.num_classes = a.num_classes;
    const std::size_t cols = a.size() > 0 ? a.inputs.cols() : b.inputs.cols();
    std::vector<double> data(a.inputs.storage());
    data.insert(data.end(), b.inputs.storage().begin(), b.inputs.storage().end());
    out.inputs = DenseMatrix(a.size() + b.size(), cols, std::move(data));
    out.labels = a.labels;
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.tags = a.tags;
    out.tags.insert(out.tags.end(), b.tags.begin(), b.tags.end());
    return out;
}

/// Tags training samples of `forget_classes` as Forget and every other training
/// sample as Retain. Hold-out tags are untouched.
[[nodiscard]] inline Dataset split_forget(const Dataset& data,
                                          const std::vector<std::size_t>& forget_classes) {
    require(!forget_classes.empty(), ErrorCode::InvalidConfig, "forget_classes is empty");
    for (auto c : forget_classes) {
        require(c < data.num_classes, ErrorCode::UnknownClass,
                "forget class " + std::to_string(c) + " >= num_classes " +
                    std::to_string(data.num_classes));
    }
    Dataset out = data;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out.tags[i] == SplitTag::Holdout) continue;
        const bool forget = std::find(forget_classes.begin(), forget_classes.end(),
                                      out.labels[i]) != forget_classes.end();
        out.tags[i] = forget ? SplitTag::Forget : SplitTag::Retain;
    }
    return out;
}

/// CSV with a `# ntku-dataset num_classes=C` preamble and columns
/// split,label,x0..x{n-1}. Values are printed with 17 significant digits so a
/// save/load cycle is exact.
[[nodiscard]] inline std::string dataset_to_csv(const Dataset& ds) {
    std::string out = "# ntku-dataset num_classes=" + std::to_string(ds.num_classes) + "\n";
    out += "split,label";
    for (std::size_t k = 0; k < ds.inputs.cols(); ++k) {
        out += ",x" + std::to_string(k);
    }
    out += '\n';
    char buf[64];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out += to_string(ds.tags[i]);
        out += ',' + std::to_string(ds.labels[i]);
        for (double v : ds.inputs.row(i)) {
            const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
            out += ',';
            out.append(buf, res.ptr);
        }
        out += '\n';
    }
    return out;
}

[[nodiscard]] inline Dataset dataset_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    require(static_cast<bool>(std::getline(in, line)) &&
                line.starts_with("# ntku-dataset num_classes="),
            ErrorCode::BadMagic, "missing '# ntku-dataset' preamble");
    Dataset ds;
    ds.num_classes = std::stoul(line.substr(std::string("# ntku-dataset num_classes=").size()));
    require(static_cast<bool>(std::getline(in, line)) && line.starts_with("split,label"),
            ErrorCode::BadFormat, "missing CSV header");
    const auto cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 1;
    std::vector<double> values;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string_view> fields;
        std::string_view rest(line);
        for (;;) {
            const auto comma = rest.find(',');
            fields.push_back(rest.substr(0, comma));
            if (comma == std::string_view::npos) break;
            rest.remove_prefix(comma + 1);
        }
        require(fields.size() == cols + 2, ErrorCode::BadFormat, "ragged dataset row");
        ds.tags.push_back(split_tag_from_string(fields[0]));
        ds.labels.push_back(std::stoul(std::string(fields[1])));
        for (std::size_t k = 0; k < cols; ++k) {
            double v = 0.0;
            const auto f = fields[k + 2];
            const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
            require(res.ec == std::errc{}, ErrorCode::BadFormat, "bad number in dataset");
            values.push_back(v);
        }
    }
    ds.inputs = DenseMatrix(ds.labels.size(), cols, std::move(values));
    ds.validate();
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    write_file(path, dataset_to_csv(ds));
}

[[nodiscard]] inline Dataset load_dataset(const std::filesystem::path& path) {
    return dataset_from_csv(read_file(path));
}

}  // namespace ntku
