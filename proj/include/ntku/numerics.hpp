#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <sstream>
#include <thread>
#include <vector>

#include "ntku/error.hpp"

namespace ntku {

/// Row-major dense matrix of doubles.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        require(data_.size() == rows_ * cols_, ErrorCode::DimensionMismatch,
                "data length does not equal rows * cols");
    }
    DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ == 0 ? 0 : rows.begin()->size();
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            require(r.size() == cols_, ErrorCode::DimensionMismatch, "ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = 1.0;
        }
        return m;
    }

    static DenseMatrix column(std::span<const double> v) {
        return {v.size(), 1, std::vector<double>(v.begin(), v.end())};
    }

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

    std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
    [[nodiscard]] std::span<const double> row(std::size_t i) const noexcept {
        return {data_.data() + i * cols_, cols_};
    }

    std::span<double> values() noexcept { return data_; }
    [[nodiscard]] std::span<const double> values() const noexcept { return data_; }
    [[nodiscard]] const std::vector<double>& storage() const noexcept { return data_; }

    bool operator==(const DenseMatrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Runs fn(begin, end) over contiguous chunks of [0, n). With threads <= 1 the
/// whole range runs inline. Callers must make each index's work independent.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    if (threads <= 1 || n < 2) {
        fn(std::size_t{0}, n);
        return;
    }
    const std::size_t workers = std::min(threads, n);
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) {
            break;
        }
        pool.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
}

namespace detail {

// All dot products below sum strictly in ascending index order. The blocked
// variants only interleave independent accumulators, so every result is
// bitwise identical to the naive loop.
inline double dot(const double* a, const double* b, std::size_t n) noexcept {
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        s += a[k] * b[k];
    }
    return s;
}

inline void dot4(const double* a, const double* b0, const double* b1, const double* b2,
                 const double* b3, std::size_t n, double* out) noexcept {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const double ak = a[k];
        s0 += ak * b0[k];
        s1 += ak * b1[k];
        s2 += ak * b2[k];
        s3 += ak * b3[k];
    }
    out[0] = s0;
    out[1] = s1;
    out[2] = s2;
    out[3] = s3;
}

}  // namespace detail

[[nodiscard]] inline bool all_finite(std::span<const double> v) noexcept {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

[[nodiscard]] inline double frobenius_norm(const DenseMatrix& m) noexcept {
    double s = 0.0;
    for (double x : m.values()) {
        s += x * x;
    }
    return std::sqrt(s);
}

[[nodiscard]] inline double norm2(std::span<const double> v) noexcept {
    double s = 0.0;
    for (double x : v) {
        s += x * x;
    }
    return std::sqrt(s);
}

[[nodiscard]] inline DenseMatrix transpose(const DenseMatrix& a) {
    DenseMatrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            t(j, i) = a(i, j);
        }
    }
    return t;
}

[[nodiscard]] inline DenseMatrix operator-(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::DimensionMismatch,
            "matrix subtraction shape mismatch");
    DenseMatrix c = a;
    auto cv = c.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < cv.size(); ++i) {
        cv[i] -= bv[i];
    }
    return c;
}

/// C = A * B, i-k-j order (row axpy), deterministic.
[[nodiscard]] inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b,
                                        std::size_t threads = 1) {
    require(a.cols() == b.rows(), ErrorCode::DimensionMismatch, "matmul inner dimension");
    DenseMatrix c(a.rows(), b.cols());
    const std::size_t inner = a.cols();
    const std::size_t m = b.cols();
    parallel_for(a.rows(), threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            double* ci = c.row(i).data();
            const double* ai = a.row(i).data();
            for (std::size_t k = 0; k < inner; ++k) {
                const double aik = ai[k];
                const double* bk = b.row(k).data();
                for (std::size_t j = 0; j < m; ++j) {
                    ci[j] += aik * bk[j];
                }
            }
        }
    });
    return c;
}

/// y = A * x.
[[nodiscard]] inline std::vector<double> matvec(const DenseMatrix& a, std::span<const double> x) {
    require(a.cols() == x.size(), ErrorCode::DimensionMismatch, "matvec dimension");
    std::vector<double> y(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        y[i] = detail::dot(a.row(i).data(), x.data(), x.size());
    }
    return y;
}

/// y = A^T * x.
[[nodiscard]] inline std::vector<double> matvec_transposed(const DenseMatrix& a,
                                                           std::span<const double> x) {
    require(a.rows() == x.size(), ErrorCode::DimensionMismatch, "transposed matvec dimension");
    std::vector<double> y(a.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double xi = x[i];
        const double* ai = a.row(i).data();
        for (std::size_t j = 0; j < a.cols(); ++j) {
            y[j] += xi * ai[j];
        }
    }
    return y;
}

namespace detail {

// c_q[j] += sum_{k in [k0, k1)} a_q[k] * bt[k][j0 + j] for four output rows,
// k ascending. Called for consecutive k ranges, each output sees exactly the
// sequence of additions dot() performs, so results are bitwise equal.
inline void gram_panel(const double* const a[4], double* const c[4], const DenseMatrix& bt,
                       std::size_t k0, std::size_t k1, std::size_t j0, std::size_t width) noexcept {
    double* c0 = c[0];
    double* c1 = c[1];
    double* c2 = c[2];
    double* c3 = c[3];
    for (std::size_t k = k0; k < k1; ++k) {
        const double* b = bt.row(k).data() + j0;
        const double a0 = a[0][k], a1 = a[1][k], a2 = a[2][k], a3 = a[3][k];
        for (std::size_t j = 0; j < width; ++j) {
            const double bj = b[j];
            c0[j] += a0 * bj;
            c1[j] += a1 * bj;
            c2[j] += a2 * bj;
            c3[j] += a3 * bj;
        }
    }
}

}  // namespace detail

/// result(i, j) = dot(row i of J1, row j of J2), columns summed in ascending
/// order. When both arguments are the same object only the upper triangle is
/// computed and mirrored.
///
/// Blocked over output columns and the summation index so a slab of J2^T stays
/// in cache while every row of J1 passes over it. Blocking only reorders work
/// between different outputs, never within one.
[[nodiscard]] inline DenseMatrix gram(const DenseMatrix& j1, const DenseMatrix& j2,
                                      std::size_t threads = 1) {
    require(j1.cols() == j2.cols(), ErrorCode::DimensionMismatch,
            "gram: column counts differ (" + std::to_string(j1.cols()) + " vs " +
                std::to_string(j2.cols()) + ")");
    const bool self = (&j1 == &j2);
    const std::size_t r1 = j1.rows();
    const std::size_t r2 = j2.rows();
    const std::size_t d = j1.cols();
    DenseMatrix out(r1, r2);
    if (r1 == 0 || r2 == 0) return out;
    constexpr std::size_t kRows = 4;
    constexpr std::size_t kCols = 128;
    constexpr std::size_t kDepth = 256;
    const DenseMatrix bt = transpose(j2);
    const std::vector<double> zeros(d, 0.0);
    const std::size_t col_blocks = (r2 + kCols - 1) / kCols;
    parallel_for(col_blocks, threads, [&](std::size_t begin, std::size_t end) {
        std::vector<double> spare(kRows * kCols);
        for (std::size_t cb = begin; cb < end; ++cb) {
            const std::size_t j0 = cb * kCols;
            const std::size_t width = std::min(kCols, r2 - j0);
            // In the symmetric case rows at or below j0 + width - 1 suffice.
            const std::size_t row_end = self ? std::min(r1, j0 + width) : r1;
            for (std::size_t k0 = 0; k0 < d; k0 += kDepth) {
                const std::size_t k1 = std::min(d, k0 + kDepth);
                for (std::size_t i0 = 0; i0 < row_end; i0 += kRows) {
                    const double* a[kRows];
                    double* c[kRows];
                    for (std::size_t q = 0; q < kRows; ++q) {
                        const bool live = i0 + q < r1;
                        a[q] = live ? j1.row(i0 + q).data() : zeros.data();
                        c[q] = live ? out.row(i0 + q).data() + j0 : spare.data() + q * kCols;
                    }
                    detail::gram_panel(a, c, bt, k0, k1, j0, width);
                }
            }
        }
    });
    if (self) {
        for (std::size_t i = 0; i < r1; ++i) {
            for (std::size_t j = 0; j < i; ++j) {
                out(i, j) = out(j, i);
            }
        }
    }
    return out;
}

[[nodiscard]] inline DenseMatrix gram(const DenseMatrix& j, std::size_t threads = 1) {
    return gram(j, j, threads);
}

/// Diagonal regularization schedule for PSD factorizations. Scales are relative
/// to mean(diag(A)).
struct JitterPolicy {
    double initial_scale = 1e-8;
    double growth_factor = 10.0;
    double max_scale = 1e-2;

    void validate() const {
        require(initial_scale > 0.0 && initial_scale <= max_scale, ErrorCode::InvalidConfig,
                "jitter policy requires 0 < initial_scale <= max_scale");
        require(growth_factor > 1.0, ErrorCode::InvalidConfig,
                "jitter policy requires growth_factor > 1");
    }

    /// 0 followed by initial_scale * growth_factor^k for every step <= max_scale.
    [[nodiscard]] std::vector<double> schedule() const {
        validate();
        std::vector<double> steps{0.0};
        const double slack = max_scale * (1.0 + 1e-9);
        for (double s = initial_scale; s <= slack; s *= growth_factor) {
            steps.push_back(std::min(s, max_scale));
        }
        return steps;
    }
};

/// Lower-triangular factor of (A + jitter * mean(diag(A)) * I).
class PsdFactor {
public:
    PsdFactor() = default;
    PsdFactor(DenseMatrix lower, double jitter_used, double jitter_absolute)
        : lower_(std::move(lower)), jitter_used_(jitter_used), jitter_absolute_(jitter_absolute) {}

    [[nodiscard]] std::size_t dim() const noexcept { return lower_.rows(); }
    /// Relative jitter step that made the factorization succeed.
    [[nodiscard]] double jitter_used() const noexcept { return jitter_used_; }
    /// Amount actually added to the diagonal.
    [[nodiscard]] double jitter_absolute() const noexcept { return jitter_absolute_; }
    [[nodiscard]] const DenseMatrix& lower() const noexcept { return lower_; }

    [[nodiscard]] double min_pivot_squared() const noexcept {
        double m = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < lower_.rows(); ++i) {
            m = std::min(m, lower_(i, i) * lower_(i, i));
        }
        return m;
    }

    /// Solves (A + jitter I) X = B for every column of B at once.
    [[nodiscard]] DenseMatrix solve(const DenseMatrix& b) const {
        const std::size_t n = dim();
        require(b.rows() == n, ErrorCode::DimensionMismatch,
                "solve: right-hand side has " + std::to_string(b.rows()) + " rows, expected " +
                    std::to_string(n));
        const std::size_t m = b.cols();
        DenseMatrix x = b;
        // L Y = B
        for (std::size_t i = 0; i < n; ++i) {
            double* xi = x.row(i).data();
            const double* li = lower_.row(i).data();
            for (std::size_t k = 0; k < i; ++k) {
                const double lik = li[k];
                const double* xk = x.row(k).data();
                for (std::size_t j = 0; j < m; ++j) {
                    xi[j] -= lik * xk[j];
                }
            }
            const double inv = 1.0 / li[i];
            for (std::size_t j = 0; j < m; ++j) {
                xi[j] *= inv;
            }
        }
        // L^T X = Y
        for (std::size_t ii = n; ii-- > 0;) {
            double* xi = x.row(ii).data();
            for (std::size_t k = ii + 1; k < n; ++k) {
                const double lki = lower_(k, ii);
                const double* xk = x.row(k).data();
                for (std::size_t j = 0; j < m; ++j) {
                    xi[j] -= lki * xk[j];
                }
            }
            const double inv = 1.0 / lower_(ii, ii);
            for (std::size_t j = 0; j < m; ++j) {
                xi[j] *= inv;
            }
        }
        return x;
    }

    [[nodiscard]] std::vector<double> solve(std::span<const double> b) const {
        return solve(DenseMatrix::column(b)).storage();
    }

private:
    DenseMatrix lower_;
    double jitter_used_ = 0.0;
    double jitter_absolute_ = 0.0;
};

namespace detail {

// Returns false when a pivot is not safely positive. The floor n * eps * max
// diagonal rejects factorizations of numerically rank-deficient matrices.
inline bool try_cholesky(const DenseMatrix& a, double shift, DenseMatrix& lower) {
    const std::size_t n = a.rows();
    lower = DenseMatrix(n, n);
    double max_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        max_diag = std::max(max_diag, a(i, i) + shift);
    }
    const double floor = static_cast<double>(n) * std::numeric_limits<double>::epsilon() * max_diag;
    for (std::size_t j = 0; j < n; ++j) {
        const double* lj = lower.row(j).data();
        const double pivot = a(j, j) + shift - dot(lj, lj, j);
        if (!(pivot > floor) || !std::isfinite(pivot)) {
            return false;
        }
        const double ljj = std::sqrt(pivot);
        lower(j, j) = ljj;
        const double inv = 1.0 / ljj;
        std::size_t i = j + 1;
        for (; i + 4 <= n; i += 4) {
            double block[4];
            dot4(lj, lower.row(i).data(), lower.row(i + 1).data(), lower.row(i + 2).data(),
                 lower.row(i + 3).data(), j, block);
            for (std::size_t q = 0; q < 4; ++q) {
                lower(i + q, j) = (a(i + q, j) - block[q]) * inv;
            }
        }
        for (; i < n; ++i) {
            lower(i, j) = (a(i, j) - dot(lj, lower.row(i).data(), j)) * inv;
        }
    }
    return true;
}

}  // namespace detail

/// Factors a symmetric PSD matrix, escalating the relative diagonal jitter
/// through `policy.schedule()` until the factorization succeeds.
[[nodiscard]] inline PsdFactor factor_psd(const DenseMatrix& a, const JitterPolicy& policy = {}) {
    require(a.rows() == a.cols(), ErrorCode::DimensionMismatch, "factor_psd: matrix not square");
    require(all_finite(a.values()), ErrorCode::NonFinite, "factor_psd: non-finite entry");
    const std::size_t n = a.rows();
    double max_abs = 0.0;
    for (double x : a.values()) {
        max_abs = std::max(max_abs, std::abs(x));
    }
    const double sym_tol = 1e-10 * max_abs;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (std::abs(a(i, j) - a(j, i)) > sym_tol) {
                fail(ErrorCode::NotSymmetric, "factor_psd: asymmetry at (" + std::to_string(i) +
                                                  ", " + std::to_string(j) + ")");
            }
        }
    }
    if (n == 0) {
        return {};
    }
    double mean_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean_diag += a(i, i);
    }
    mean_diag /= static_cast<double>(n);

    DenseMatrix lower;
    for (double step : policy.schedule()) {
        const double shift = step * mean_diag;
        if (step > 0.0 && !(shift > 0.0)) {
            continue;
        }
        if (detail::try_cholesky(a, shift, lower)) {
            return {std::move(lower), step, shift};
        }
    }
    std::ostringstream msg;
    msg << "factorization failed up to relative jitter " << policy.max_scale << " (n = " << n
        << ", mean diag = " << mean_diag << ")";
    fail(ErrorCode::SingularBeyondPolicy, msg.str());
}

struct PsdSolution {
    DenseMatrix x;
    double jitter_used = 0.0;
};

[[nodiscard]] inline PsdSolution solve_psd(const DenseMatrix& a, const DenseMatrix& b,
                                           const JitterPolicy& policy = {}) {
    require(b.rows() == a.rows(), ErrorCode::DimensionMismatch,
            "solve_psd: right-hand side row count differs from matrix");
    require(all_finite(b.values()), ErrorCode::NonFinite, "solve_psd: non-finite right-hand side");
    const PsdFactor f = factor_psd(a, policy);
    DenseMatrix x = f.solve(b);
    require(all_finite(x.values()), ErrorCode::NonFinite, "solve_psd: non-finite solution");
    return {std::move(x), f.jitter_used()};
}

}  // namespace ntku
