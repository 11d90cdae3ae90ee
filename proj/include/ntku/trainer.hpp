#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ntku/dataset.hpp"
#include "ntku/error.hpp"
#include "ntku/metrics.hpp"
#include "ntku/models.hpp"
#include "ntku/params.hpp"
#include "ntku/rng.hpp"

namespace ntku {

enum class Loss { MseOnehot, CrossEntropy };
enum class Optimizer { Sgd, SgdMomentum };

inline std::string_view to_string(Loss l) { return l == Loss::MseOnehot ? "mse_onehot" : "cross_entropy"; }
inline std::string_view to_string(Optimizer o) { return o == Optimizer::Sgd ? "sgd" : "sgd_momentum"; }

inline Loss loss_from_string(std::string_view s) {
    if (s == "mse_onehot") return Loss::MseOnehot;
    if (s == "cross_entropy") return Loss::CrossEntropy;
    fail(ErrorCode::InvalidConfig, "unknown loss '" + std::string(s) + "'");
}

inline Optimizer optimizer_from_string(std::string_view s) {
    if (s == "sgd") return Optimizer::Sgd;
    if (s == "sgd_momentum") return Optimizer::SgdMomentum;
    fail(ErrorCode::InvalidConfig, "unknown optimizer '" + std::string(s) + "'");
}

struct TrainConfig {
    Loss loss = Loss::MseOnehot;
    Optimizer optimizer = Optimizer::Sgd;
    double learning_rate = 0.1;
    double momentum = 0.9;
    std::size_t epochs = 100;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    ParamMask mask;

    void validate(std::size_t d) const {
        require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorCode::InvalidConfig,
                "learning_rate must be > 0");
        require(batch_size >= 1, ErrorCode::InvalidConfig, "batch_size must be >= 1");
        require(momentum >= 0.0 && momentum < 1.0, ErrorCode::InvalidConfig,
                "momentum must be in [0, 1)");
        mask.validate(d);
    }
};

// ---------------------------------------------------------------------------
// Losses

/// MSE: 0.5 * sum_c (f_c - y_c)^2. Cross-entropy: logsumexp(f) - <y, f>.
/// Writes d(loss)/d(logits) scaled by `scale` into `dlogits`.
inline double sample_loss(Loss loss, std::span<const double> f, std::span<const double> y,
                          std::span<double> dlogits, double scale) {
    const std::size_t c = f.size();
    if (loss == Loss::MseOnehot) {
        double l = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            const double r = f[k] - y[k];
            l += r * r;
            dlogits[k] = scale * r;
        }
        return 0.5 * l;
    }
    double mx = f[0];
    for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, f[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(f[k] - mx);
    const double lse = mx + std::log(z);
    double l = lse;
    for (std::size_t k = 0; k < c; ++k) {
        l -= y[k] * f[k];
        dlogits[k] = scale * (std::exp(f[k] - lse) - y[k]);
    }
    return l;
}

/// Mean loss over all rows of `inputs`.
[[nodiscard]] inline double mean_loss(const Model& model, const DenseMatrix& inputs,
                                      const DenseMatrix& targets, Loss loss) {
    require(inputs.rows() == targets.rows(), ErrorCode::DimensionMismatch,
            "inputs and targets differ in length");
    if (inputs.rows() == 0) return 0.0;
    const DenseMatrix logits = forward(model, inputs);
    std::vector<double> scratch(model.spec.num_classes);
    double total = 0.0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        total += sample_loss(loss, logits.row(i), targets.row(i), scratch, 0.0);
    }
    return total / static_cast<double>(inputs.rows());
}

/// Gradient of the mean loss over rows `batch` of (inputs, targets). Samples are
/// accumulated in the order given. Only entries `net` was built to need are
/// meaningful.
/// When `seen` is given, row i receives the logits computed for sample i.
inline void batch_gradient(const Model& model, const Network& net, const DenseMatrix& inputs,
                           const DenseMatrix& targets, std::span<const std::size_t> batch,
                           Loss loss, std::span<double> grad, DenseMatrix* seen = nullptr) {
    std::fill(grad.begin(), grad.end(), 0.0);
    Network::Cache cache;
    const std::size_t c = model.spec.num_classes;
    std::vector<double> logits(c), dlogits(c);
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (auto i : batch) {
        net.forward(inputs.row(i), cache, logits);
        if (seen != nullptr) std::copy(logits.begin(), logits.end(), seen->row(i).begin());
        sample_loss(loss, logits, targets.row(i), dlogits, scale);
        net.backward(cache, inputs.row(i), dlogits, grad);
    }
}

/// Mean-loss gradient over all rows, restricted to `mask`.
[[nodiscard]] inline std::vector<double> loss_gradient(const Model& model, const DenseMatrix& inputs,
                                                       const DenseMatrix& targets, Loss loss,
                                                       const ParamMask& mask) {
    check_inputs(model, inputs);
    require(inputs.rows() > 0, ErrorCode::EmptySplit, "gradient over an empty batch");
    std::vector<std::size_t> all(inputs.rows());
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::vector<double> g(model.params.size());
    batch_gradient(model, Network(model, &mask), inputs, targets, all, loss, g);
    return gather(g, mask);
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;
    double retain_acc = std::numeric_limits<double>::quiet_NaN();
    double forget_acc = std::numeric_limits<double>::quiet_NaN();
};

struct TrainHistory {
    std::vector<EpochRecord> records;

    [[nodiscard]] std::string to_csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "epoch,loss,retain_acc,forget_acc\n";
        for (const auto& r : records) {
            os << r.epoch << ',' << r.loss << ',' << r.retain_acc << ',' << r.forget_acc << '\n';
        }
        return os.str();
    }
};

struct TrainResult {
    Model model;
    TrainHistory history;
};

namespace detail {

enum class Direction { Descend, Ascend };

/// Called after each optimizer step with the current model; returning true stops
/// training immediately.
using StepHook = std::function<bool(const Model&)>;
/// Called after each epoch with the 1-based epoch index; returning true stops.
using EpochHook = std::function<bool(const Model&, std::size_t)>;

/// `seen`, if given, collects the logits each sample produced during the epoch
/// (before the step that used it).
inline void run_sgd(Model& model, const DenseMatrix& inputs, const DenseMatrix& targets,
                    const TrainConfig& cfg, std::uint64_t stream, Direction dir,
                    const StepHook& on_step, const EpochHook& on_epoch,
                    DenseMatrix* seen = nullptr) {
    cfg.validate(model.params.size());
    check_inputs(model, inputs);
    const std::size_t n = inputs.rows();
    if (cfg.epochs == 0 || n == 0) return;
    CounterRng rng(derive_seed(cfg.seed, stream));
    std::vector<std::size_t> order(n);
    std::vector<double> grad(model.params.size());
    std::vector<double> velocity(cfg.mask.size(), 0.0);
    const double sign = dir == Direction::Descend ? -1.0 : 1.0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t stop = std::min(n, start + cfg.batch_size);
            const Network net(model, &cfg.mask);
            batch_gradient(model, net, inputs, targets,
                           std::span<const std::size_t>(order).subspan(start, stop - start), cfg.loss,
                           grad, seen);
            auto p = model.params.values();
            for (std::size_t i = 0; i < cfg.mask.size(); ++i) {
                const auto j = cfg.mask.indices[i];
                double step = grad[j];
                if (cfg.optimizer == Optimizer::SgdMomentum) {
                    velocity[i] = cfg.momentum * velocity[i] + grad[j];
                    step = velocity[i];
                }
                p[j] += sign * cfg.learning_rate * step;
            }
            require(all_finite(p), ErrorCode::NonFinite,
                    "training diverged at epoch " + std::to_string(epoch));
            if (on_step && on_step(model)) return;
        }
        if (on_epoch && on_epoch(model, epoch)) return;
    }
}

/// Trains on the rows of `train` selected by `fit`. Each epoch record holds
/// the mean loss and accuracies over the logits seen during that epoch's
/// batches; Retain/Forget samples outside `fit` get a forward pass at epoch end.
inline TrainHistory history_for(Model& model, const Dataset& train, TagFilter fit,
                                const TrainConfig& cfg, std::uint64_t stream) {
    const Dataset rows = train.subset(fit);
    const DenseMatrix targets = rows.targets();
    std::vector<SplitTag> other_tags;
    Dataset others;
    for (auto t : {SplitTag::Retain, SplitTag::Forget}) {
        const TagFilter f = t == SplitTag::Retain ? TagFilter::Retain : TagFilter::Forget;
        if (!matches(fit, t) && train.count(f) > 0) {
            others = train.subset(f);
            other_tags.push_back(t);
        }
    }
    DenseMatrix seen(rows.size(), train.num_classes);
    TrainHistory h;
    std::vector<double> scratch(train.num_classes);
    run_sgd(
        model, rows.inputs, targets, cfg, stream, Direction::Descend, nullptr,
        [&](const Model& m, std::size_t epoch) {
            std::size_t n[2] = {0, 0}, hit[2] = {0, 0};
            double loss = 0.0;
            for (std::size_t i = 0; i < rows.size(); ++i) {
                loss += sample_loss(cfg.loss, seen.row(i), targets.row(i), scratch, 0.0);
                const auto k = static_cast<std::size_t>(rows.tags[i] == SplitTag::Forget);
                ++n[k];
                hit[k] += argmax(seen.row(i)) == rows.labels[i];
            }
            if (!other_tags.empty()) {
                const DenseMatrix logits = forward(m, others.inputs);
                for (std::size_t i = 0; i < others.size(); ++i) {
                    const auto k = static_cast<std::size_t>(others.tags[i] == SplitTag::Forget);
                    ++n[k];
                    hit[k] += argmax(logits.row(i)) == others.labels[i];
                }
            }
            EpochRecord r;
            r.epoch = epoch;
            r.loss = loss / static_cast<double>(rows.size());
            if (n[0] > 0) r.retain_acc = static_cast<double>(hit[0]) / static_cast<double>(n[0]);
            if (n[1] > 0) r.forget_acc = static_cast<double>(hit[1]) / static_cast<double>(n[1]);
            h.records.push_back(r);
            return false;
        },
        &seen);
    return h;
}

inline constexpr std::uint64_t kFinetuneStream = 0xF1;
inline constexpr std::uint64_t kMaxLossStream = 0xA5;
inline constexpr std::uint64_t kRandomLabelStream = 0x7A;
inline constexpr std::uint64_t kRelabelStream = 0x7B;
inline constexpr std::uint64_t kRelearnStream = 0x3E;

}  // namespace detail

/// Minimizes the loss on every training sample (Retain and Forget tags) over
/// the masked parameters.
[[nodiscard]] inline TrainResult finetune(const Model& init, const Dataset& data,
                                          const TrainConfig& cfg) {
    TrainResult out{init, {}};
    out.history = detail::history_for(out.model, data.subset(TagFilter::Train), TagFilter::Train, cfg,
                                      detail::kFinetuneStream);
    return out;
}

/// The golden baseline: fine-tuning from the initial weights on Retain samples only.
[[nodiscard]] inline TrainResult retrain(const Model& init, const Dataset& data,
                                         const TrainConfig& cfg) {
    TrainResult out{init, {}};
    out.history = detail::history_for(out.model, data.subset(TagFilter::Train), TagFilter::Retain,
                                      cfg, detail::kFinetuneStream);
    return out;
}

/// Gradient ascent on the Forget-sample loss. Stops after cfg.epochs or at the
/// end of the first epoch in which no forget sample is classified correctly.
[[nodiscard]] inline Model max_loss_unlearn(const Model& trained, const Dataset& data,
                                            const TrainConfig& cfg) {
    const Dataset forget = data.subset(TagFilter::Forget);
    Model m = trained;
    if (forget.size() == 0 || cfg.epochs == 0) return m;
    if (accuracy_from_logits(forward(m, forget.inputs), forget.labels) == 0.0) return m;
    const DenseMatrix targets = forget.targets();
    detail::run_sgd(
        m, forget.inputs, targets, cfg, detail::kMaxLossStream, detail::Direction::Ascend, nullptr,
        [&](const Model& cur, std::size_t) {
            return accuracy_from_logits(forward(cur, forget.inputs), forget.labels) == 0.0;
        });
    return m;
}

/// Draws a label uniformly from all C classes for every Forget sample, in
/// sample order. The true label may be drawn.
[[nodiscard]] inline std::vector<std::size_t> random_relabel(std::size_t count,
                                                           std::size_t num_classes,
                                                           std::uint64_t seed) {
    require(num_classes >= 2, ErrorCode::InvalidConfig, "random relabel needs >= 2 classes");
    CounterRng rng(derive_seed(seed, detail::kRelabelStream));
    std::vector<std::size_t> out(count);
    for (auto& l : out) l = static_cast<std::size_t>(rng.below(num_classes));
    return out;
}

[[nodiscard]] inline Model random_label_unlearn(const Model& trained, const Dataset& data,
                                                std::size_t num_classes, const TrainConfig& cfg) {
    Dataset forget = data.subset(TagFilter::Forget);
    Model m = trained;
    if (forget.size() == 0 || cfg.epochs == 0) return m;
    forget.num_classes = num_classes;
    forget.labels = random_relabel(forget.size(), num_classes, cfg.seed);
    detail::run_sgd(m, forget.inputs, forget.targets(), cfg, detail::kRandomLabelStream,
                    detail::Direction::Descend, nullptr, nullptr);
    return m;
}

struct RelearnResult {
    std::optional<std::size_t> epochs;  // empty = overflow
    double final_loss = 0.0;
    double threshold = 0.05;
    std::size_t cap = 100;

    [[nodiscard]] bool overflow() const noexcept { return !epochs.has_value(); }
    [[nodiscard]] std::string render() const {
        return epochs ? std::to_string(*epochs) : ">" + std::to_string(cap);
    }
};

/// Trains on the Forget samples and returns the first 1-based epoch after which
/// the mean forget loss is below `threshold`; 0 if it already is.
[[nodiscard]] inline RelearnResult relearn_epochs(const Model& model, const Dataset& data,
                                                  const TrainConfig& cfg, double threshold = 0.05,
                                                  std::size_t cap = 100) {
    require(threshold > 0.0, ErrorCode::InvalidConfig, "relearn threshold must be > 0");
    require(cap >= 1, ErrorCode::InvalidConfig, "relearn cap must be >= 1");
    const Dataset forget = data.subset(TagFilter::Forget);
    require(forget.size() > 0, ErrorCode::EmptySplit, "relearning needs forget samples");
    const DenseMatrix targets = forget.targets();
    RelearnResult r;
    r.threshold = threshold;
    r.cap = cap;
    r.final_loss = mean_loss(model, forget.inputs, targets, cfg.loss);
    if (r.final_loss < threshold) {
        r.epochs = 0;
        return r;
    }
    Model m = model;
    TrainConfig c = cfg;
    c.epochs = cap;
    detail::run_sgd(m, forget.inputs, targets, c, detail::kRelearnStream, detail::Direction::Descend,
                    nullptr, [&](const Model& cur, std::size_t epoch) {
                        r.final_loss = mean_loss(cur, forget.inputs, targets, cfg.loss);
                        if (r.final_loss < threshold) {
                            r.epochs = epoch;
                            return true;
                        }
                        return false;
                    });
    return r;
}

/// Fine-tunes only the classification head on all training samples.
[[nodiscard]] inline TrainResult linear_probe(const Model& model, const Dataset& data,
                                              const TrainConfig& cfg) {
    TrainConfig c = cfg;
    c.mask = select_params(model, MaskStrategy{MaskKind::HeadOnly, {}});
    return finetune(model, data, c);
}

}  // namespace ntku
