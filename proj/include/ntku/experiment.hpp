#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "ntku/checkpoint.hpp"
#include "ntku/dataset.hpp"
#include "ntku/error.hpp"
#include "ntku/metrics.hpp"
#include "ntku/models.hpp"
#include "ntku/ntk.hpp"
#include "ntku/scrub.hpp"
#include "ntku/trainer.hpp"

namespace ntku {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

enum class Method { Full, MaxLoss, RandomLabel, FastNTK, Retrain };

inline constexpr Method kAllMethods[] = {Method::Full, Method::MaxLoss, Method::RandomLabel,
                                         Method::FastNTK, Method::Retrain};

inline std::string_view to_string(Method m) {
    switch (m) {
        case Method::Full: return "Full";
        case Method::MaxLoss: return "MaxLoss";
        case Method::RandomLabel: return "RandomLabel";
        case Method::FastNTK: return "FastNTK";
        case Method::Retrain: return "Retrain";
    }
    return "?";
}

inline Method method_from_string(std::string_view s) {
    for (auto m : kAllMethods) {
        if (to_string(m) == s) return m;
    }
    fail(ErrorCode::InvalidConfig, "unknown method '" + std::string(s) + "'");
}

/// Optimizer settings without the mask and seed, which the harness fills in.
struct TrainSettings {
    Loss loss = Loss::MseOnehot;
    Optimizer optimizer = Optimizer::SgdMomentum;
    double learning_rate = 1.2;
    double momentum = 0.9;
    std::size_t epochs = 200;
    std::size_t batch_size = 32;

    [[nodiscard]] TrainConfig with(const ParamMask& mask, std::uint64_t seed) const {
        TrainConfig c;
        c.loss = loss;
        c.optimizer = optimizer;
        c.learning_rate = learning_rate;
        c.momentum = momentum;
        c.epochs = epochs;
        c.batch_size = batch_size;
        c.seed = seed;
        c.mask = mask;
        return c;
    }
    bool operator==(const TrainSettings&) const = default;
};

struct DataConfig {
    enum class Source { Blobs, IdxFiles } source = Source::Blobs;
    std::size_t num_classes = 5;
    std::size_t images_per_class = 100;
    std::size_t input_dim = 10;
    double class_separation = 8.0;
    std::string train_images, train_labels, holdout_images, holdout_labels;
};

struct ExperimentConfig {
    ModelSpec model;
    InitOptions init{0.5, 0.02};
    MaskStrategy mask_strategy{MaskKind::NormAffine, {}};
    DataConfig data;
    std::vector<std::size_t> forget_classes{0};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    TrainSettings train;
    TrainSettings maxloss;
    TrainSettings random_label;
    TrainSettings probe;
    bool run_probe = true;
    double relearn_threshold = 0.05;
    std::size_t relearn_cap = 100;
    JitterPolicy policy;
    ResidualPoint residuals_at = ResidualPoint::Initialization;
    std::size_t block_size = 64;
    std::size_t threads = 1;
    bool parallel_seeds = false;
    std::uint64_t memory_budget = std::uint64_t{1} << 32;
    std::vector<Method> methods{std::begin(kAllMethods), std::end(kAllMethods)};
    std::filesystem::path output_dir = "runs/default";
    bool write_checkpoints = true;

    void validate() const {
        model.validate();
        require(!seeds.empty(), ErrorCode::InvalidConfig, "seeds must be nonempty");
        std::vector<std::uint64_t> s = seeds;
        std::sort(s.begin(), s.end());
        require(std::adjacent_find(s.begin(), s.end()) == s.end(), ErrorCode::InvalidConfig,
                "seeds must be distinct");
        require(!forget_classes.empty(), ErrorCode::InvalidConfig, "forget_classes must be nonempty");
        for (auto c : forget_classes) {
            require(c < model.num_classes, ErrorCode::UnknownClass,
                    "forget class " + std::to_string(c) + " out of range");
        }
        require(data.num_classes == model.num_classes, ErrorCode::InvalidConfig,
                "data.num_classes differs from model.num_classes");
        require(data.source != DataConfig::Source::Blobs || data.input_dim == model.input_dim,
                ErrorCode::InvalidConfig, "data.input_dim differs from model.input_dim");
        policy.validate();
        require(block_size >= 1 && threads >= 1, ErrorCode::InvalidConfig,
                "block_size and threads must be >= 1");
        require(relearn_threshold > 0.0 && relearn_cap >= 1, ErrorCode::InvalidConfig,
                "relearn threshold must be > 0 and cap >= 1");
    }
};

namespace detail {

inline TrainSettings settings_from_json(const json& j, const TrainSettings& base) {
    TrainSettings s = base;
    if (j.contains("loss")) s.loss = loss_from_string(j["loss"].get<std::string>());
    if (j.contains("optimizer")) s.optimizer = optimizer_from_string(j["optimizer"].get<std::string>());
    s.learning_rate = j.value("learning_rate", s.learning_rate);
    s.momentum = j.value("momentum", s.momentum);
    s.epochs = j.value("epochs", s.epochs);
    s.batch_size = j.value("batch_size", s.batch_size);
    return s;
}

inline json settings_to_json(const TrainSettings& s) {
    return {{"loss", std::string(to_string(s.loss))},
            {"optimizer", std::string(to_string(s.optimizer))},
            {"learning_rate", s.learning_rate},
            {"momentum", s.momentum},
            {"epochs", s.epochs},
            {"batch_size", s.batch_size}};
}

inline MaskStrategy strategy_from_json(const json& j) {
    MaskStrategy m;
    if (j.is_string()) {
        m.kind = mask_kind_from_string(j.get<std::string>());
    } else {
        m.kind = mask_kind_from_string(j.at("kind").get<std::string>());
        m.tensor_names = j.value("tensors", std::vector<std::string>{});
    }
    return m;
}

inline json strategy_to_json(const MaskStrategy& m) {
    if (m.kind != MaskKind::NamedList) return std::string(to_string(m.kind));
    return {{"kind", "named_list"}, {"tensors", m.tensor_names}};
}

}  // namespace detail

/// Parses the JSON config document. Absent keys keep their defaults; the
/// baseline and probe sections inherit from "train" key by key.
[[nodiscard]] inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    try {
        c.model = spec_from_json(j.at("model"));
        if (j.contains("init")) {
            c.init.head_scale = j["init"].value("head_scale", c.init.head_scale);
            c.init.prompt_scale = j["init"].value("prompt_scale", c.init.prompt_scale);
        }
        if (j.contains("mask_strategy")) c.mask_strategy = detail::strategy_from_json(j["mask_strategy"]);
        if (j.contains("data")) {
            const json& d = j["data"];
            const std::string src = d.value("source", std::string("blobs"));
            if (src == "blobs") {
                c.data.source = DataConfig::Source::Blobs;
            } else if (src == "idx_files") {
                c.data.source = DataConfig::Source::IdxFiles;
            } else {
                fail(ErrorCode::InvalidConfig, "data.source must be 'blobs' or 'idx_files'");
            }
            c.data.num_classes = d.value("num_classes", c.model.num_classes);
            c.data.images_per_class = d.value("images_per_class", c.data.images_per_class);
            c.data.input_dim = d.value("input_dim", c.model.input_dim);
            c.data.class_separation = d.value("class_separation", c.data.class_separation);
            c.data.train_images = d.value("train_images", std::string{});
            c.data.train_labels = d.value("train_labels", std::string{});
            c.data.holdout_images = d.value("holdout_images", std::string{});
            c.data.holdout_labels = d.value("holdout_labels", std::string{});
        } else {
            c.data.num_classes = c.model.num_classes;
            c.data.input_dim = c.model.input_dim;
        }
        c.forget_classes = j.value("forget_classes", c.forget_classes);
        c.seeds = j.value("seeds", c.seeds);
        if (j.contains("train")) c.train = detail::settings_from_json(j["train"], c.train);
        c.maxloss = c.train;
        c.random_label = c.train;
        c.probe = c.train;
        if (j.contains("maxloss")) c.maxloss = detail::settings_from_json(j["maxloss"], c.train);
        if (j.contains("random_label"))
            c.random_label = detail::settings_from_json(j["random_label"], c.train);
        if (j.contains("probe")) {
            c.probe = detail::settings_from_json(j["probe"], c.train);
            c.run_probe = j["probe"].value("enabled", true);
        }
        if (j.contains("relearn")) {
            c.relearn_threshold = j["relearn"].value("threshold", c.relearn_threshold);
            c.relearn_cap = j["relearn"].value("cap", c.relearn_cap);
        }
        if (j.contains("scrub")) {
            const json& s = j["scrub"];
            if (s.contains("jitter")) {
                c.policy.initial_scale = s["jitter"].value("initial_scale", c.policy.initial_scale);
                c.policy.growth_factor = s["jitter"].value("growth_factor", c.policy.growth_factor);
                c.policy.max_scale = s["jitter"].value("max_scale", c.policy.max_scale);
            }
            if (s.contains("residuals_at"))
                c.residuals_at = residual_point_from_string(s["residuals_at"].get<std::string>());
            c.block_size = s.value("block_size", c.block_size);
        }
        if (j.contains("methods")) {
            c.methods.clear();
            for (const auto& m : j["methods"]) c.methods.push_back(method_from_string(m.get<std::string>()));
        }
        c.threads = j.value("threads", c.threads);
        c.parallel_seeds = j.value("parallel_seeds", c.parallel_seeds);
        c.memory_budget = j.value("memory_budget", c.memory_budget);
        c.output_dir = j.value("output_dir", c.output_dir.string());
        c.write_checkpoints = j.value("write_checkpoints", c.write_checkpoints);
    } catch (const json::exception& e) {
        fail(ErrorCode::InvalidConfig, std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

[[nodiscard]] inline json config_to_json(const ExperimentConfig& c) {
    json j;
    j["model"] = spec_to_json(c.model);
    j["init"] = {{"head_scale", c.init.head_scale}, {"prompt_scale", c.init.prompt_scale}};
    j["mask_strategy"] = detail::strategy_to_json(c.mask_strategy);
    json d;
    if (c.data.source == DataConfig::Source::Blobs) {
        d = {{"source", "blobs"},
             {"num_classes", c.data.num_classes},
             {"images_per_class", c.data.images_per_class},
             {"input_dim", c.data.input_dim},
             {"class_separation", c.data.class_separation}};
    } else {
        d = {{"source", "idx_files"},
             {"num_classes", c.data.num_classes},
             {"images_per_class", c.data.images_per_class},
             {"train_images", c.data.train_images},
             {"train_labels", c.data.train_labels},
             {"holdout_images", c.data.holdout_images},
             {"holdout_labels", c.data.holdout_labels}};
    }
    j["data"] = d;
    j["forget_classes"] = c.forget_classes;
    j["seeds"] = c.seeds;
    j["train"] = detail::settings_to_json(c.train);
    j["maxloss"] = detail::settings_to_json(c.maxloss);
    j["random_label"] = detail::settings_to_json(c.random_label);
    j["probe"] = detail::settings_to_json(c.probe);
    j["probe"]["enabled"] = c.run_probe;
    j["relearn"] = {{"threshold", c.relearn_threshold}, {"cap", c.relearn_cap}};
    j["scrub"] = {{"jitter",
                   {{"initial_scale", c.policy.initial_scale},
                    {"growth_factor", c.policy.growth_factor},
                    {"max_scale", c.policy.max_scale}}},
                  {"residuals_at", std::string(to_string(c.residuals_at))},
                  {"block_size", c.block_size}};
    json methods = json::array();
    for (auto m : c.methods) methods.push_back(std::string(to_string(m)));
    j["methods"] = methods;
    j["threads"] = c.threads;
    j["parallel_seeds"] = c.parallel_seeds;
    j["memory_budget"] = c.memory_budget;
    j["output_dir"] = c.output_dir.string();
    j["write_checkpoints"] = c.write_checkpoints;
    return j;
}

/// NTKU_OUTPUT_DIR and NTKU_MEMORY_BUDGET (bytes) override the file's values.
inline void apply_env_overrides(ExperimentConfig& c) {
    if (const char* dir = std::getenv("NTKU_OUTPUT_DIR"); dir != nullptr && *dir != '\0') {
        c.output_dir = dir;
    }
    if (const char* b = std::getenv("NTKU_MEMORY_BUDGET"); b != nullptr && *b != '\0') {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(b, &end, 10);
        require(end != b && *end == '\0', ErrorCode::InvalidConfig,
                "NTKU_MEMORY_BUDGET must be a byte count");
        c.memory_budget = v;
    }
}

[[nodiscard]] inline ExperimentConfig load_config(const std::filesystem::path& path,
                                                  bool env_overrides = true) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        fail(ErrorCode::InvalidConfig, "config " + path.string() + ": " + e.what());
    }
    ExperimentConfig c = config_from_json(j);
    if (env_overrides) apply_env_overrides(c);
    return c;
}

// ---------------------------------------------------------------------------
// Data

inline constexpr std::uint64_t kDataStream = 0xDA7A;

/// Dataset for one seed, already split into retain/forget/hold-out.
[[nodiscard]] inline Dataset experiment_data(const ExperimentConfig& c, std::uint64_t seed) {
    Dataset d;
    if (c.data.source == DataConfig::Source::Blobs) {
        d = gen_blobs(c.data.num_classes, c.data.images_per_class, c.data.input_dim,
                      c.data.class_separation, derive_seed(seed, kDataStream));
    } else {
        d = concat(load_idx(c.data.train_images, c.data.train_labels, c.data.images_per_class,
                            c.data.num_classes, SplitTag::Retain),
                   load_idx(c.data.holdout_images, c.data.holdout_labels, c.data.images_per_class,
                            c.data.num_classes, SplitTag::Holdout));
    }
    require(d.inputs.cols() == c.model.input_dim, ErrorCode::DimensionMismatch,
            "data has " + std::to_string(d.inputs.cols()) + " features, model expects " +
                std::to_string(c.model.input_dim));
    return split_forget(d, c.forget_classes);
}

/// Initial weights with normalization statistics calibrated on the training
/// inputs. The statistics stay frozen for every method afterwards.
[[nodiscard]] inline Model experiment_init(const ExperimentConfig& c, const Dataset& data,
                                           std::uint64_t seed) {
    Model m = init_model(c.model, seed, c.init);
    calibrate_normalization(m, data.subset(TagFilter::Train).inputs);
    return m;
}

/// Bytes the scrub would need for this configuration, computed without running it.
[[nodiscard]] inline std::uint64_t experiment_memory(const ExperimentConfig& c, const Dataset& data) {
    const ParamMask mask = select_params(c.model, c.mask_strategy);
    return memory_estimate(data.count(TagFilter::Retain), data.count(TagFilter::Forget),
                           c.model.num_classes, mask.size());
}

// ---------------------------------------------------------------------------
// Results

struct MethodMetrics {
    double acc_retain = 0.0;
    double acc_forget = 0.0;
    double acc_holdout = 0.0;
    std::vector<double> holdout_per_class;
    RelearnResult relearn;
};

struct ProbeMetrics {
    double full_forget_before = 0.0;   // Full model, before probing
    double full_forget_after = 0.0;    // Full model, after probing
    double full_retain_after = 0.0;
    double scrub_forget_before = 0.0;
    double scrub_forget_after = 0.0;
    double scrub_retain_after = 0.0;
};

struct SeedResult {
    std::uint64_t seed = 0;
    std::map<Method, MethodMetrics> methods;
    std::optional<ProbeMetrics> probe;
    ScrubReport scrub;
};

struct ExperimentResult {
    ExperimentConfig config;
    ParamAccounting accounting;
    std::uint64_t memory_bytes = 0;
    std::vector<SeedResult> seeds;  // sorted by seed value
};

namespace detail {

inline MethodMetrics measure(const Model& m, const Dataset& data, const TrainConfig& relearn_cfg,
                             double threshold, std::size_t cap) {
    MethodMetrics r;
    r.acc_retain = accuracy(m, data, TagFilter::Retain);
    r.acc_forget = accuracy(m, data, TagFilter::Forget);
    r.acc_holdout = accuracy(m, data, TagFilter::Holdout);
    r.holdout_per_class = per_class_accuracy(m, data, TagFilter::Holdout);
    r.relearn = relearn_epochs(m, data, relearn_cfg, threshold, cap);
    return r;
}

inline bool wants(const ExperimentConfig& c, Method m) {
    return std::find(c.methods.begin(), c.methods.end(), m) != c.methods.end();
}

}  // namespace detail

/// All methods for one seed. Every method draws from its own seeded stream, so
/// dropping one from the config leaves the others unchanged.
[[nodiscard]] inline SeedResult run_seed(const ExperimentConfig& c, std::uint64_t seed) {
    const Dataset data = experiment_data(c, seed);
    const Model init = experiment_init(c, data, seed);
    const ParamMask mask = select_params(init, c.mask_strategy);
    const TrainConfig train_cfg = c.train.with(mask, seed);
    const std::filesystem::path dir = c.output_dir / ("seed_" + std::to_string(seed));

    SeedResult out;
    out.seed = seed;
    auto record = [&](Method m, const Model& model) {
        if (!detail::wants(c, m)) return;
        out.methods[m] = detail::measure(model, data, train_cfg, c.relearn_threshold, c.relearn_cap);
    };
    auto save = [&](const char* name, const Model& model) {
        if (c.write_checkpoints) save_model(model, dir / "checkpoints" / (std::string(name) + ".ckpt"));
    };
    save("init", init);

    const bool need_full = detail::wants(c, Method::Full) || detail::wants(c, Method::FastNTK) ||
                           detail::wants(c, Method::MaxLoss) ||
                           detail::wants(c, Method::RandomLabel) || c.run_probe;
    std::optional<Model> full;
    if (need_full) {
        TrainResult ft = finetune(init, data, train_cfg);
        write_file(dir / "history_full.csv", ft.history.to_csv());
        full = std::move(ft.model);
        save("full", *full);
        record(Method::Full, *full);
    }
    std::optional<Model> scrubbed;
    if (detail::wants(c, Method::FastNTK) || c.run_probe) {
        ScrubOptions so;
        so.policy = c.policy;
        so.block_size = c.block_size;
        so.residuals_at = c.residuals_at;
        so.memory_budget = c.memory_budget;
        so.threads = c.threads;
        ScrubResult sr = scrub(*full, init, data, mask, so);
        write_file(dir / "scrub_report.txt", scrub_report_to_text(sr.report));
        out.scrub = std::move(sr.report);
        scrubbed = std::move(sr.model);
        save("fastntk", *scrubbed);
        record(Method::FastNTK, *scrubbed);
    }
    if (detail::wants(c, Method::MaxLoss)) {
        const Model m = max_loss_unlearn(*full, data, c.maxloss.with(mask, seed));
        save("maxloss", m);
        record(Method::MaxLoss, m);
    }
    if (detail::wants(c, Method::RandomLabel)) {
        const Model m =
            random_label_unlearn(*full, data, c.model.num_classes, c.random_label.with(mask, seed));
        save("randomlabel", m);
        record(Method::RandomLabel, m);
    }
    if (detail::wants(c, Method::Retrain)) {
        TrainResult rt = retrain(init, data, train_cfg);
        write_file(dir / "history_retrain.csv", rt.history.to_csv());
        save("retrain", rt.model);
        record(Method::Retrain, rt.model);
    }
    if (c.run_probe) {
        const TrainConfig pc = c.probe.with(mask, seed);
        ProbeMetrics p;
        p.full_forget_before = accuracy(*full, data, TagFilter::Forget);
        p.scrub_forget_before = accuracy(*scrubbed, data, TagFilter::Forget);
        const Model pf = linear_probe(*full, data, pc).model;
        const Model ps = linear_probe(*scrubbed, data, pc).model;
        p.full_forget_after = accuracy(pf, data, TagFilter::Forget);
        p.full_retain_after = accuracy(pf, data, TagFilter::Retain);
        p.scrub_forget_after = accuracy(ps, data, TagFilter::Forget);
        p.scrub_retain_after = accuracy(ps, data, TagFilter::Retain);
        save("probe_full", pf);
        save("probe_fastntk", ps);
        out.probe = p;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Report

namespace detail {

inline json mean_std_json(std::span<const double> xs) {
    const MeanStd ms = mean_std(xs);
    return {{"mean", ms.mean}, {"std", ms.std}, {"values", std::vector<double>(xs.begin(), xs.end())}};
}

inline std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(prec);
    os << v;
    return os.str();
}

}  // namespace detail

/// Relearning epochs aggregated over seeds. Any overflowing seed makes the
/// whole entry overflow, rendered as ">cap".
[[nodiscard]] inline json relearn_json(const std::vector<RelearnResult>& rs, std::size_t cap) {
    json j;
    std::vector<double> vals;
    json rendered = json::array();
    bool overflow = false;
    for (const auto& r : rs) {
        rendered.push_back(r.render());
        if (r.overflow()) {
            overflow = true;
        } else {
            vals.push_back(static_cast<double>(*r.epochs));
        }
    }
    j["per_seed"] = rendered;
    j["overflow"] = overflow;
    if (overflow) {
        j["display"] = ">" + std::to_string(cap);
    } else {
        const MeanStd ms = mean_std(vals);
        j["mean"] = ms.mean;
        j["std"] = ms.std;
        j["display"] = detail::fmt(ms.mean, 2) + " ± " + detail::fmt(ms.std, 2);
    }
    return j;
}

/// The metrics report. Contains no timings or paths that vary between runs, so
/// identical config and seeds give an identical document.
[[nodiscard]] inline json metrics_json(const ExperimentResult& r) {
    const auto& c = r.config;
    json j;
    j["format"] = "ntku-metrics 1";
    j["config"] = config_to_json(c);
    j["config"].erase("output_dir");
    j["params"] = {{"d_total", r.accounting.d_total},
                   {"d_masked", r.accounting.d_masked},
                   {"d_head", r.accounting.d_head},
                   {"ratio", r.accounting.ratio},
                   {"ratio_with_head", r.accounting.ratio_with_head}};
    j["memory_estimate_bytes"] = r.memory_bytes;
    std::vector<std::uint64_t> seeds;
    for (const auto& s : r.seeds) seeds.push_back(s.seed);
    j["seeds"] = seeds;
    json methods = json::object();
    for (auto m : kAllMethods) {
        if (!detail::wants(c, m)) continue;
        std::vector<double> ar, af, ah;
        std::vector<RelearnResult> rl;
        std::vector<std::vector<double>> per_class(c.model.num_classes);
        for (const auto& s : r.seeds) {
            const auto& mm = s.methods.at(m);
            ar.push_back(mm.acc_retain);
            af.push_back(mm.acc_forget);
            ah.push_back(mm.acc_holdout);
            rl.push_back(mm.relearn);
            for (std::size_t k = 0; k < c.model.num_classes; ++k) {
                per_class[k].push_back(mm.holdout_per_class[k]);
            }
        }
        json row;
        row["acc_retain"] = detail::mean_std_json(ar);
        row["acc_forget"] = detail::mean_std_json(af);
        row["acc_holdout"] = detail::mean_std_json(ah);
        json pc = json::array();
        for (auto& v : per_class) pc.push_back(detail::mean_std_json(v));
        row["acc_holdout_per_class"] = pc;
        row["relearn_epochs"] = relearn_json(rl, c.relearn_cap);
        row["params_ratio"] = r.accounting.ratio;
        methods[std::string(to_string(m))] = row;
    }
    j["methods"] = methods;
    json scrub = json::array();
    for (const auto& s : r.seeds) {
        if (!detail::wants(c, Method::FastNTK) && !c.run_probe) break;
        scrub.push_back({{"seed", s.seed},
                         {"jitter_rr", s.scrub.jitter_rr},
                         {"jitter_schur", s.scrub.jitter_schur},
                         {"schur_min_eig_estimate", s.scrub.schur_min_eig_estimate},
                         {"v_norm", s.scrub.v_norm},
                         {"m_norm", s.scrub.m_norm},
                         {"delta_norm", s.scrub.delta_norm}});
    }
    j["scrub_diagnostics"] = scrub;
    if (c.run_probe) {
        std::vector<double> fb, fa, fr, sb, sa, sr;
        for (const auto& s : r.seeds) {
            fb.push_back(s.probe->full_forget_before);
            fa.push_back(s.probe->full_forget_after);
            fr.push_back(s.probe->full_retain_after);
            sb.push_back(s.probe->scrub_forget_before);
            sa.push_back(s.probe->scrub_forget_after);
            sr.push_back(s.probe->scrub_retain_after);
        }
        j["linear_probe"] = {{"Full", {{"acc_forget_before", detail::mean_std_json(fb)},
                                       {"acc_forget_after", detail::mean_std_json(fa)},
                                       {"acc_retain_after", detail::mean_std_json(fr)}}},
                             {"FastNTK", {{"acc_forget_before", detail::mean_std_json(sb)},
                                          {"acc_forget_after", detail::mean_std_json(sa)},
                                          {"acc_retain_after", detail::mean_std_json(sr)}}}};
    }
    return j;
}

/// Per-method CSV: one row per seed, columns in fixed order.
[[nodiscard]] inline std::string method_csv(const ExperimentResult& r, Method m) {
    std::ostringstream os;
    os.precision(17);
    os << "seed,acc_retain,acc_forget,acc_holdout,relearn_epochs\n";
    for (const auto& s : r.seeds) {
        const auto& mm = s.methods.at(m);
        os << s.seed << ',' << mm.acc_retain << ',' << mm.acc_forget << ',' << mm.acc_holdout << ','
           << mm.relearn.render() << '\n';
    }
    return os.str();
}

/// Human-readable table from a metrics document (the `report` subcommand).
[[nodiscard]] inline std::string render_report(const json& metrics) {
    auto pct = [](const json& ms) {
        return detail::fmt(100.0 * ms["mean"].get<double>(), 2) + " ± " +
               detail::fmt(100.0 * ms["std"].get<double>(), 2);
    };
    std::ostringstream os;
    const auto& p = metrics["params"];
    os << "params: " << p["d_masked"].get<std::size_t>() << " of " << p["d_total"].get<std::size_t>()
       << " (" << detail::fmt(100.0 * p["ratio"].get<double>(), 3) << "%, "
       << detail::fmt(100.0 * p["ratio_with_head"].get<double>(), 3) << "% with head)\n";
    os << "seeds: " << metrics["seeds"].dump() << "\n\n";
    char line[256];
    std::snprintf(line, sizeof line, "%-12s %-16s %-16s %-16s %-14s\n", "method", "retain %",
                  "forget %", "holdout %", "relearn");
    os << line;
    for (auto m : kAllMethods) {
        const std::string name(to_string(m));
        if (!metrics["methods"].contains(name)) continue;
        const auto& row = metrics["methods"][name];
        std::snprintf(line, sizeof line, "%-12s %-16s %-16s %-16s %-14s\n", name.c_str(),
                      pct(row["acc_retain"]).c_str(), pct(row["acc_forget"]).c_str(),
                      pct(row["acc_holdout"]).c_str(),
                      row["relearn_epochs"]["display"].get<std::string>().c_str());
        os << line;
    }
    if (metrics.contains("linear_probe")) {
        const auto& lp = metrics["linear_probe"];
        os << "\nlinear probe (forget %, before -> after):\n";
        for (const char* name : {"Full", "FastNTK"}) {
            os << "  " << name << ": " << pct(lp[name]["acc_forget_before"]) << " -> "
               << pct(lp[name]["acc_forget_after"]) << "\n";
        }
    }
    return os.str();
}

/// Runs every seed (sequentially, or one thread per seed with parallel_seeds),
/// then writes metrics.json, one CSV per method and summary.txt to output_dir.
[[nodiscard]] inline ExperimentResult run_experiment(const ExperimentConfig& c) {
    c.validate();
    ExperimentResult r;
    r.config = c;
    r.accounting = param_accounting(c.model, c.mask_strategy);
    const Dataset probe_data = experiment_data(c, c.seeds.front());
    r.memory_bytes = experiment_memory(c, probe_data);
    if (r.memory_bytes > c.memory_budget) {
        fail(ErrorCode::BudgetExceeded, "experiment needs " + std::to_string(r.memory_bytes) +
                                            " bytes for the scrub, budget is " +
                                            std::to_string(c.memory_budget));
    }
    std::vector<std::uint64_t> seeds = c.seeds;
    std::sort(seeds.begin(), seeds.end());
    r.seeds.resize(seeds.size());
    if (c.parallel_seeds && seeds.size() > 1) {
        std::vector<std::exception_ptr> errors(seeds.size());
        {
            std::vector<std::jthread> workers;
            for (std::size_t i = 0; i < seeds.size(); ++i) {
                workers.emplace_back([&, i] {
                    try {
                        r.seeds[i] = run_seed(c, seeds[i]);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                });
            }
        }
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    } else {
        for (std::size_t i = 0; i < seeds.size(); ++i) r.seeds[i] = run_seed(c, seeds[i]);
    }
    const json metrics = metrics_json(r);
    write_file(c.output_dir / "metrics.json", metrics.dump(2) + "\n");
    write_file(c.output_dir / "summary.txt", render_report(metrics));
    for (auto m : kAllMethods) {
        if (detail::wants(c, m)) {
            write_file(c.output_dir / ("method_" + std::string(to_string(m)) + ".csv"), method_csv(r, m));
        }
    }
    return r;
}

}  // namespace ntku
