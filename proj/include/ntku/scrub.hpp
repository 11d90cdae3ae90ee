#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ntku/dataset.hpp"
#include "ntku/error.hpp"
#include "ntku/models.hpp"
#include "ntku/ntk.hpp"
#include "ntku/numerics.hpp"
#include "ntku/params.hpp"

namespace ntku {

/// Where the residuals y - f(D) are evaluated.
enum class ResidualPoint { Initialization, Final };

inline std::string_view to_string(ResidualPoint p) {
    return p == ResidualPoint::Initialization ? "initialization" : "final";
}

inline ResidualPoint residual_point_from_string(std::string_view s) {
    if (s == "initialization") return ResidualPoint::Initialization;
    if (s == "final") return ResidualPoint::Final;
    fail(ErrorCode::InvalidConfig, "residuals_at must be 'initialization' or 'final'");
}

/// Logit-space residuals against one-hot targets, flattened sample-major.
struct Residuals {
    std::vector<double> retain;
    std::vector<double> forget;
    ResidualPoint eval_point = ResidualPoint::Initialization;
};

[[nodiscard]] inline std::vector<double> residual_vector(const Model& model, const Dataset& data) {
    const DenseMatrix logits = forward(model, data.inputs);
    const DenseMatrix targets = data.targets();
    std::vector<double> r(logits.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
        r[i] = targets.values()[i] - logits.values()[i];
    }
    return r;
}

[[nodiscard]] inline Residuals compute_residuals(const Model& model, const Dataset& data,
                                                 ResidualPoint point) {
    return {residual_vector(model, data.subset(TagFilter::Retain)),
            residual_vector(model, data.subset(TagFilter::Forget)), point};
}

namespace detail {

template <typename Fn>
auto with_stage(const char* stage, Fn&& fn) {
    try {
        return fn();
    } catch (const Error& e) {
        if (e.code() == ErrorCode::SingularBeyondPolicy) {
            fail(e.code(), std::string("stage ") + stage + ": " + e.what());
        }
        throw;
    }
}

}  // namespace detail

/// Factorization of the retain kernel together with K_rr^{-1} K_rf, which
/// every piece of the update needs.
class RetainSolver {
public:
    RetainSolver(const DenseMatrix& k_rr, const DenseMatrix& k_rf, const JitterPolicy& policy)
        : factor_(detail::with_stage("rr", [&] { return factor_psd(k_rr, policy); })) {
        require(k_rf.rows() == k_rr.rows(), ErrorCode::DimensionMismatch,
                "K_rf rows differ from K_rr size");
        kinv_rf_ = factor_.solve(k_rf);
        require(all_finite(kinv_rf_.values()), ErrorCode::NonFinite, "non-finite K_rr^-1 K_rf");
    }

    [[nodiscard]] std::vector<double> solve(std::span<const double> b) const { return factor_.solve(b); }
    [[nodiscard]] const DenseMatrix& kinv_rf() const noexcept { return kinv_rf_; }
    [[nodiscard]] double jitter_used() const noexcept { return factor_.jitter_used(); }
    [[nodiscard]] std::size_t dim() const noexcept { return factor_.dim(); }

private:
    PsdFactor factor_;
    DenseMatrix kinv_rf_;
};

struct SchurInverse {
    DenseMatrix m;
    double jitter_used = 0.0;
    double jitter_absolute = 0.0;
};

/// M = (K_ff - K_rf^T K_rr^{-1} K_rf)^{-1}. The Schur complement is symmetrized
/// before factoring; M is obtained by solving against the identity.
[[nodiscard]] inline SchurInverse compute_M(const DenseMatrix& k_ff, const DenseMatrix& k_rf,
                                            const RetainSolver& rr, const JitterPolicy& policy) {
    const std::size_t nf = k_ff.rows();
    require(k_ff.cols() == nf && k_rf.cols() == nf && rr.kinv_rf().cols() == nf,
            ErrorCode::DimensionMismatch, "compute_M: forget block sizes disagree");
    DenseMatrix schur = k_ff;
    const DenseMatrix& x = rr.kinv_rf();
    for (std::size_t i = 0; i < k_rf.rows(); ++i) {
        const auto ri = k_rf.row(i);
        const auto xi = x.row(i);
        for (std::size_t a = 0; a < nf; ++a) {
            const double ra = ri[a];
            double* sa = schur.row(a).data();
            for (std::size_t b = 0; b < nf; ++b) {
                sa[b] -= ra * xi[b];
            }
        }
    }
    for (std::size_t a = 0; a < nf; ++a) {
        for (std::size_t b = a + 1; b < nf; ++b) {
            const double s = 0.5 * (schur(a, b) + schur(b, a));
            schur(a, b) = s;
            schur(b, a) = s;
        }
    }
    const PsdFactor f = detail::with_stage("schur", [&] { return factor_psd(schur, policy); });
    SchurInverse out{f.solve(DenseMatrix::identity(nf)), f.jitter_used(), f.jitter_absolute()};
    require(all_finite(out.m.values()), ErrorCode::NonFinite, "non-finite Schur inverse");
    return out;
}

/// V = K_rf^T K_rr^{-1} a_r - a_f.
[[nodiscard]] inline std::vector<double> compute_V(const Residuals& res, const DenseMatrix& k_rf,
                                                   const RetainSolver& rr) {
    require(res.retain.size() == k_rf.rows() && res.forget.size() == k_rf.cols(),
            ErrorCode::DimensionMismatch, "compute_V: residual lengths do not match K_rf");
    const std::vector<double> alpha = rr.solve(res.retain);
    std::vector<double> v = matvec_transposed(k_rf, alpha);
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] -= res.forget[i];
    }
    return v;
}

/// P J_f^T = J_f^T - J_r^T K_rr^{-1} K_rf, without forming P (d x d).
[[nodiscard]] inline DenseMatrix project_forget(const DenseMatrix& j_r, const DenseMatrix& j_f,
                                                const RetainSolver& rr) {
    require(j_r.cols() == j_f.cols(), ErrorCode::DimensionMismatch,
            "project_forget: parameter counts differ");
    const DenseMatrix& x = rr.kinv_rf();
    require(x.rows() == j_r.rows() && x.cols() == j_f.rows(), ErrorCode::DimensionMismatch,
            "project_forget: solver does not match Jacobians");
    const std::size_t d = j_r.cols();
    const std::size_t nf = j_f.rows();
    DenseMatrix out = transpose(j_f);
    for (std::size_t i = 0; i < j_r.rows(); ++i) {
        const auto ji = j_r.row(i);
        const auto xi = x.row(i);
        for (std::size_t k = 0; k < d; ++k) {
            const double jk = ji[k];
            double* ok = out.row(k).data();
            for (std::size_t b = 0; b < nf; ++b) {
                ok[b] -= jk * xi[b];
            }
        }
    }
    return out;
}

struct ScrubReport {
    std::vector<double> delta;
    double jitter_rr = 0.0;
    double jitter_schur = 0.0;
    double schur_min_eig_estimate = 0.0;
    double v_norm = 0.0;
    double m_norm = 0.0;
    double delta_norm = 0.0;
    std::size_t retain_rows = 0;
    std::size_t forget_rows = 0;
    std::size_t d_masked = 0;
    std::uint64_t memory_bytes = 0;
    std::string residuals_at = "initialization";
    std::string mask_name;
};

namespace detail {

// Largest eigenvalue of a symmetric PSD matrix by power iteration from the
// all-ones vector.
inline double power_iteration_max(const DenseMatrix& a, int iterations = 100) {
    const std::size_t n = a.rows();
    if (n == 0) return 0.0;
    std::vector<double> v(n, 1.0 / std::sqrt(static_cast<double>(n)));
    double lambda = 0.0;
    for (int it = 0; it < iterations; ++it) {
        std::vector<double> w = matvec(a, v);
        const double nw = norm2(w);
        if (!(nw > 0.0)) return 0.0;
        lambda = nw;
        for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / nw;
    }
    return lambda;
}

}  // namespace detail

/// The one-shot update on masked parameters:
///   delta = (P J_f^T) M V,  V = K_rf^T K_rr^{-1} a_r - a_f.
/// The product is evaluated as J_f^T w - J_r^T (K_rr^{-1} K_rf w) with w = M V,
/// so P J_f^T is never materialized.
[[nodiscard]] inline ScrubReport scrub_update(const Jacobian& retain, const Jacobian& forget,
                                              const Residuals& res, const JitterPolicy& policy,
                                              std::size_t threads = 1) {
    require(retain.d_masked() == forget.d_masked(), ErrorCode::DimensionMismatch,
            "scrub: Jacobians have different parameter counts");
    require(res.retain.size() == retain.rows() && res.forget.size() == forget.rows(),
            ErrorCode::DimensionMismatch, "scrub: residual lengths do not match Jacobians");
    policy.validate();
    const std::size_t d = retain.d_masked();
    ScrubReport rep;
    rep.retain_rows = retain.rows();
    rep.forget_rows = forget.rows();
    rep.d_masked = d;
    rep.residuals_at = std::string(to_string(res.eval_point));
    rep.mask_name = retain.mask_name;
    rep.delta.assign(d, 0.0);
    if (forget.rows() == 0) {
        return rep;
    }
    const KernelBlocks k = kernel_blocks(retain, forget, threads);
    const RetainSolver rr(k.rr.matrix, k.rf.matrix, policy);
    const SchurInverse schur = compute_M(k.ff.matrix, k.rf.matrix, rr, policy);
    const std::vector<double> v = compute_V(res, k.rf.matrix, rr);
    const std::vector<double> w = matvec(schur.m, v);

    std::vector<double> delta = matvec_transposed(forget.matrix, w);
    if (retain.rows() > 0) {
        const std::vector<double> xw = matvec(rr.kinv_rf(), w);
        const std::vector<double> back = matvec_transposed(retain.matrix, xw);
        for (std::size_t i = 0; i < d; ++i) {
            delta[i] -= back[i];
        }
    }
    require(all_finite(delta), ErrorCode::NonFinite, "scrub produced a non-finite delta");

    rep.delta = std::move(delta);
    rep.jitter_rr = rr.jitter_used();
    rep.jitter_schur = schur.jitter_used;
    const double lmax = detail::power_iteration_max(schur.m);
    rep.schur_min_eig_estimate = lmax > 0.0 ? 1.0 / lmax - schur.jitter_absolute : 0.0;
    rep.v_norm = norm2(v);
    rep.m_norm = frobenius_norm(schur.m);
    rep.delta_norm = norm2(rep.delta);
    return rep;
}

struct ScrubOptions {
    JitterPolicy policy;
    std::size_t block_size = 64;
    ResidualPoint residuals_at = ResidualPoint::Initialization;
    /// Refuse to run when the Jacobians plus kernels would exceed this many bytes.
    std::uint64_t memory_budget = std::uint64_t{1} << 32;
    std::size_t threads = 1;
};

struct ScrubResult {
    ScrubReport report;
    Model model;
};

/// Unlearns the Forget-tagged samples of `data` from `trained`. Jacobians are
/// taken at the trained weights; residuals at `init` (default) or at `trained`.
[[nodiscard]] inline ScrubResult scrub(const Model& trained, const Model& init, const Dataset& data,
                                       const ParamMask& mask, const ScrubOptions& opts = {}) {
    require(trained.params.same_layout(init.params) && trained.spec == init.spec,
            ErrorCode::DimensionMismatch, "trained and initial models differ in layout");
    mask.validate(trained.params.size());
    const std::size_t n_r = data.count(TagFilter::Retain);
    const std::size_t n_f = data.count(TagFilter::Forget);
    const std::uint64_t bytes =
        memory_estimate(n_r, n_f, trained.spec.num_classes, mask.size());
    if (bytes > opts.memory_budget) {
        fail(ErrorCode::BudgetExceeded, "scrub needs " + std::to_string(bytes) +
                                            " bytes, budget is " +
                                            std::to_string(opts.memory_budget));
    }
    const Jacobian j_r =
        assemble_jacobian(trained, data, TagFilter::Retain, mask, opts.block_size, opts.threads);
    const Jacobian j_f =
        assemble_jacobian(trained, data, TagFilter::Forget, mask, opts.block_size, opts.threads);
    const Model& at = opts.residuals_at == ResidualPoint::Initialization ? init : trained;
    const Residuals res = compute_residuals(at, data, opts.residuals_at);
    ScrubReport rep = scrub_update(j_r, j_f, res, opts.policy, opts.threads);
    rep.memory_bytes = bytes;
    Model out = trained;
    out.params = apply_delta(trained.params, mask, rep.delta);
    return {std::move(rep), std::move(out)};
}

/// Key-value text form, one `key = value` per line, reals with 17 significant
/// digits. `delta` is a comma-separated list.
[[nodiscard]] inline std::string scrub_report_to_text(const ScrubReport& r) {
    auto num = [](double v) {
        char buf[64];
        const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
        return std::string(buf, res.ptr);
    };
    std::ostringstream os;
    os << "# ntku scrub report\n";
    os << "mask = " << r.mask_name << '\n';
    os << "residuals_at = " << r.residuals_at << '\n';
    os << "d_masked = " << r.d_masked << '\n';
    os << "retain_rows = " << r.retain_rows << '\n';
    os << "forget_rows = " << r.forget_rows << '\n';
    os << "memory_bytes = " << r.memory_bytes << '\n';
    os << "jitter_rr = " << num(r.jitter_rr) << '\n';
    os << "jitter_schur = " << num(r.jitter_schur) << '\n';
    os << "schur_min_eig_estimate = " << num(r.schur_min_eig_estimate) << '\n';
    os << "v_norm = " << num(r.v_norm) << '\n';
    os << "m_norm = " << num(r.m_norm) << '\n';
    os << "delta_norm = " << num(r.delta_norm) << '\n';
    os << "delta = ";
    for (std::size_t i = 0; i < r.delta.size(); ++i) {
        os << (i ? "," : "") << num(r.delta[i]);
    }
    os << '\n';
    return os.str();
}

[[nodiscard]] inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find(" = ");
        require(eq != std::string::npos, ErrorCode::BadFormat, "bad key-value line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return kv;
}

[[nodiscard]] inline ScrubReport scrub_report_from_text(const std::string& text) {
    const auto kv = parse_key_values(text);
    auto get = [&](const std::string& k) -> const std::string& {
        const auto it = kv.find(k);
        require(it != kv.end(), ErrorCode::BadFormat, "scrub report lacks '" + k + "'");
        return it->second;
    };
    auto real = [](const std::string& s) {
        double v = 0.0;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        require(res.ec == std::errc{}, ErrorCode::BadFormat, "bad real '" + s + "'");
        return v;
    };
    ScrubReport r;
    r.mask_name = get("mask");
    r.residuals_at = get("residuals_at");
    r.d_masked = std::stoul(get("d_masked"));
    r.retain_rows = std::stoul(get("retain_rows"));
    r.forget_rows = std::stoul(get("forget_rows"));
    r.memory_bytes = std::stoull(get("memory_bytes"));
    r.jitter_rr = real(get("jitter_rr"));
    r.jitter_schur = real(get("jitter_schur"));
    r.schur_min_eig_estimate = real(get("schur_min_eig_estimate"));
    r.v_norm = real(get("v_norm"));
    r.m_norm = real(get("m_norm"));
    r.delta_norm = real(get("delta_norm"));
    std::string_view rest = get("delta");
    while (!rest.empty()) {
        const auto comma = rest.find(',');
        r.delta.push_back(real(std::string(rest.substr(0, comma))));
        if (comma == std::string_view::npos) break;
        rest.remove_prefix(comma + 1);
    }
    return r;
}

}  // namespace ntku
