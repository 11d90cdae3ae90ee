#pragma once

// Random linearized instances: for f(x) = W x the Jacobian is the same at
// every parameter value, so the fully trained point θ = θ₀ + Jᵀ K⁻¹ a and the
// retain-only solution θ₀ + J_rᵀ K_rr⁻¹ a_r are known in closed form.

#include "oracles.hpp"

namespace oracle {

struct LinearInstance {
    std::size_t n_r = 0, n_f = 0, classes = 0, features = 0;
    Mat x_r, x_f;     // samples x features
    Mat y_r, y_f;     // samples x classes
    Vec theta0;       // classes * features, row-major W
};

/// Rows (s, c) of the Jacobian of W x with respect to row-major W.
inline Mat linear_jacobian(const Mat& x, std::size_t classes) {
    const auto n = x.rows(), p = x.cols();
    const auto c = static_cast<Eigen::Index>(classes);
    Mat j = Mat::Zero(n * c, c * p);
    for (Eigen::Index s = 0; s < n; ++s)
        for (Eigen::Index k = 0; k < c; ++k) j.block(s * c + k, k * p, 1, p) = x.row(s);
    return j;
}

inline Vec logits(const Vec& theta, const Mat& x, std::size_t classes) {
    return linear_jacobian(x, classes) * theta;
}

inline Vec flatten(const Mat& y) {
    Vec v(y.size());
    for (Eigen::Index i = 0; i < y.rows(); ++i)
        for (Eigen::Index k = 0; k < y.cols(); ++k) v(i * y.cols() + k) = y(i, k);
    return v;
}

/// n_r in [2,20], n_f in [1,5], C in {1,2,3}, per-class features in [n_r+n_f, 50].
/// C = 1 uses real-valued targets; C >= 2 uses one-hot targets of random labels.
inline LinearInstance make_instance(std::mt19937_64& g, std::vector<std::size_t>* labels_r = nullptr,
                                    std::vector<std::size_t>* labels_f = nullptr) {
    LinearInstance in;
    in.n_r = uniform_int(g, 2, 20);
    in.n_f = uniform_int(g, 1, 5);
    in.classes = uniform_int(g, 1, 3);
    in.features = uniform_int(g, in.n_r + in.n_f, 50);
    in.x_r = to_eigen(random_matrix(g, in.n_r, in.features));
    in.x_f = to_eigen(random_matrix(g, in.n_f, in.features));
    in.theta0 = to_eigen(random_matrix(g, in.classes * in.features, 1, 0.3));
    auto targets = [&](std::size_t n, std::vector<std::size_t>* labels) {
        Mat y = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in.classes));
        for (std::size_t i = 0; i < n; ++i) {
            if (in.classes == 1) {
                y(static_cast<Eigen::Index>(i), 0) = std::normal_distribution<double>()(g);
            } else {
                const std::size_t l = uniform_int(g, 0, in.classes - 1);
                y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l)) = 1.0;
                if (labels) labels->push_back(l);
            }
        }
        return y;
    };
    in.y_r = targets(in.n_r, labels_r);
    in.y_f = targets(in.n_f, labels_f);
    return in;
}

/// θ = θ₀ + Jᵀ K⁻¹ (y − f₀) over retain and forget samples together.
inline Vec trained_theta(const LinearInstance& in) {
    Mat x(in.x_r.rows() + in.x_f.rows(), in.x_r.cols());
    x << in.x_r, in.x_f;
    const Mat j = linear_jacobian(x, in.classes);
    Vec y(j.rows());
    y << flatten(in.y_r), flatten(in.y_f);
    const Vec a = y - j * in.theta0;
    return in.theta0 + j.transpose() * (j * j.transpose()).ldlt().solve(a);
}

/// θ₀ + J_rᵀ K_rr⁻¹ a_r.
inline Vec retain_only_theta(const LinearInstance& in) {
    const Mat j = linear_jacobian(in.x_r, in.classes);
    const Vec a = flatten(in.y_r) - j * in.theta0;
    return in.theta0 + j.transpose() * (j * j.transpose()).ldlt().solve(a);
}

/// Relative error of the library's update against the closed form. C = 1 goes
/// through scrub_update directly (the model zoo needs at least two classes);
/// otherwise the instance is turned into a linear Model and Dataset and run
/// through scrub().
inline double scrub_relative_error(std::mt19937_64& g) {
    std::vector<std::size_t> lr, lf;
    const LinearInstance in = make_instance(g, &lr, &lf);
    const Vec theta = trained_theta(in);
    const Vec expect = retain_only_theta(in);
    Vec got;
    if (in.classes == 1) {
        const Mat jr = linear_jacobian(in.x_r, 1), jf = linear_jacobian(in.x_f, 1);
        ntku::Residuals res;
        const Vec ar = flatten(in.y_r) - jr * in.theta0, af = flatten(in.y_f) - jf * in.theta0;
        res.retain.assign(ar.data(), ar.data() + ar.size());
        res.forget.assign(af.data(), af.data() + af.size());
        const ntku::Jacobian j_r{from_eigen(jr), in.n_r, 1, "full"};
        const ntku::Jacobian j_f{from_eigen(jf), in.n_f, 1, "full"};
        const auto rep = ntku::scrub_update(j_r, j_f, res, {});
        got = theta + to_eigen(rep.delta);
    } else {
        ntku::Model init = linear_model(in.features, in.classes);
        init.params.assign(std::vector<double>(in.theta0.data(), in.theta0.data() + in.theta0.size()));
        ntku::Model trained = init;
        trained.params.assign(std::vector<double>(theta.data(), theta.data() + theta.size()));
        Mat x(in.x_r.rows() + in.x_f.rows(), in.x_r.cols());
        x << in.x_r, in.x_f;
        std::vector<std::size_t> labels = lr;
        labels.insert(labels.end(), lf.begin(), lf.end());
        std::vector<ntku::SplitTag> tags(in.n_r, ntku::SplitTag::Retain);
        tags.insert(tags.end(), in.n_f, ntku::SplitTag::Forget);
        const auto data = make_dataset(from_eigen(x), labels, tags, in.classes);
        const auto r = ntku::scrub(trained, init, data, ntku::ParamMask::full(init.params.size()));
        got = to_eigen(std::vector<double>(r.model.params.values().begin(), r.model.params.values().end()));
    }
    return (got - expect).norm() / expect.norm();
}

}  // namespace oracle
