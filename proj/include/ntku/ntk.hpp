#pragma once

#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>

#include "ntku/checkpoint.hpp"
#include "ntku/dataset.hpp"
#include "ntku/models.hpp"
#include "ntku/numerics.hpp"

namespace ntku {

/// Per-sample output gradients, rows ordered sample-major then class.
struct Jacobian {
    DenseMatrix matrix;
    std::size_t samples = 0;
    std::size_t classes = 0;
    std::string mask_name;

    [[nodiscard]] std::size_t rows() const noexcept { return matrix.rows(); }
    [[nodiscard]] std::size_t d_masked() const noexcept { return matrix.cols(); }
};

struct Kernel {
    DenseMatrix matrix;
    std::string lhs_id;
    std::string rhs_id;
};

/// Jacobian over all rows of `inputs`, computed block_size samples at a time.
/// Blocks are independent and written to fixed row ranges, so the result does
/// not depend on block_size or thread count.
[[nodiscard]] inline Jacobian assemble_jacobian(const Model& model, const DenseMatrix& inputs,
                                                const ParamMask& mask, std::size_t block_size,
                                                std::size_t threads = 1) {
    require(block_size >= 1, ErrorCode::InvalidConfig, "block_size must be >= 1");
    check_inputs(model, inputs);
    mask.validate(model.params.size());
    const std::size_t n = inputs.rows();
    const std::size_t c = model.spec.num_classes;
    Jacobian jac{DenseMatrix(n * c, mask.size()), n, c, mask.strategy_name};
    const std::size_t blocks = (n + block_size - 1) / block_size;
    parallel_for(blocks, threads, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t b = b0; b < b1; ++b) {
            const std::size_t first = b * block_size;
            const std::size_t last = std::min(n, first + block_size);
            DenseMatrix chunk(last - first, inputs.cols());
            for (std::size_t i = first; i < last; ++i) {
                auto src = inputs.row(i);
                std::copy(src.begin(), src.end(), chunk.row(i - first).begin());
            }
            const DenseMatrix part = per_sample_jacobian(model, chunk, mask);
            std::copy(part.values().begin(), part.values().end(),
                      jac.matrix.values().begin() +
                          static_cast<std::ptrdiff_t>(first * c * mask.size()));
        }
    });
    return jac;
}

[[nodiscard]] inline Jacobian assemble_jacobian(const Model& model, const Dataset& data,
                                                TagFilter filter, const ParamMask& mask,
                                                std::size_t block_size, std::size_t threads = 1) {
    return assemble_jacobian(model, data.subset(filter).inputs, mask, block_size, threads);
}

struct KernelBlocks {
    Kernel rr;
    Kernel rf;
    Kernel ff;
};

[[nodiscard]] inline KernelBlocks kernel_blocks(const Jacobian& retain, const Jacobian& forget,
                                                std::size_t threads = 1) {
    require(retain.d_masked() == forget.d_masked(), ErrorCode::DimensionMismatch,
            "kernel_blocks: Jacobians have different parameter counts");
    require(retain.classes == forget.classes || retain.rows() == 0 || forget.rows() == 0,
            ErrorCode::DimensionMismatch, "kernel_blocks: Jacobians have different class counts");
    return {{gram(retain.matrix, threads), "retain", "retain"},
            {gram(retain.matrix, forget.matrix, threads), "retain", "forget"},
            {gram(forget.matrix, threads), "forget", "forget"}};
}

/// Bytes held by both Jacobians and the three kernel blocks, all float64.
[[nodiscard]] constexpr std::uint64_t memory_estimate(std::uint64_t n_retain, std::uint64_t n_forget,
                                                      std::uint64_t classes,
                                                      std::uint64_t d_masked) noexcept {
    const std::uint64_t r = n_retain * classes;
    const std::uint64_t f = n_forget * classes;
    return 8 * ((r + f) * d_masked + r * r + r * f + f * f);
}

/// Binary container for kernel blocks:
///
///   NTKU-KERNEL 1
///   rows <R>
///   cols <C>
///   layout row_major
///   tag <lhs_id>:<rhs_id>
///   payload f64le
///   <R * C IEEE-754 binary64 values, little-endian>
[[nodiscard]] inline std::string serialize_kernel(const Kernel& k) {
    std::ostringstream os;
    os << "NTKU-KERNEL 1\nrows " << k.matrix.rows() << "\ncols " << k.matrix.cols()
       << "\nlayout row_major\ntag " << k.lhs_id << ':' << k.rhs_id << "\npayload f64le\n";
    std::string out = os.str();
    for (double v : k.matrix.values()) {
        detail::put_f64le(out, v);
    }
    return out;
}

[[nodiscard]] inline Kernel deserialize_kernel(const std::string& bytes) {
    std::istringstream in(bytes);
    require(detail::next_line(in) == "NTKU-KERNEL 1", ErrorCode::BadMagic, "not a kernel dump");
    auto field = [&](const std::string& key) {
        const std::string line = detail::next_line(in);
        require(line.starts_with(key + " "), ErrorCode::BadFormat, "expected '" + key + "'");
        return line.substr(key.size() + 1);
    };
    const std::size_t rows = std::stoul(field("rows"));
    const std::size_t cols = std::stoul(field("cols"));
    require(field("layout") == "row_major", ErrorCode::BadFormat, "unsupported layout");
    const std::string tag = field("tag");
    require(field("payload") == "f64le", ErrorCode::BadFormat, "unsupported payload encoding");
    const auto start = static_cast<std::size_t>(in.tellg());
    require(bytes.size() - start == 8 * rows * cols, ErrorCode::TruncatedFile,
            "kernel payload size mismatch");
    Kernel k;
    const auto colon = tag.find(':');
    k.lhs_id = tag.substr(0, colon);
    k.rhs_id = colon == std::string::npos ? "" : tag.substr(colon + 1);
    k.matrix = DenseMatrix(rows, cols);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + start);
    for (auto& v : k.matrix.values()) {
        v = detail::get_f64le(p);
        p += 8;
    }
    return k;
}

inline void save_kernel(const Kernel& k, const std::filesystem::path& path) {
    write_file(path, serialize_kernel(k));
}

[[nodiscard]] inline Kernel load_kernel(const std::filesystem::path& path) {
    return deserialize_kernel(read_file(path));
}

}  // namespace ntku
