#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ntku/ntku.hpp"

namespace {

using namespace ntku;
using nlohmann::json;

struct Common {
    std::string config;
    std::string data;
    std::uint64_t seed = 1;
};

ExperimentConfig read_config(const Common& o) { return load_config(o.config); }

Dataset read_data(const Common& o, const ExperimentConfig& c) {
    if (!o.data.empty()) return load_dataset(o.data);
    return experiment_data(c, o.seed);
}

TrainConfig train_config(const TrainSettings& s, const Model& m, const ExperimentConfig& c,
                         std::uint64_t seed) {
    return s.with(select_params(m, c.mask_strategy), seed);
}

json eval_json(const Model& m, const Dataset& data, const ExperimentConfig& c, std::uint64_t seed,
               bool relearn) {
    json j;
    j["acc_retain"] = accuracy(m, data, TagFilter::Retain);
    if (data.count(TagFilter::Forget) > 0) j["acc_forget"] = accuracy(m, data, TagFilter::Forget);
    if (data.count(TagFilter::Holdout) > 0) {
        j["acc_holdout"] = accuracy(m, data, TagFilter::Holdout);
        json pc = json::array();
        for (double v : per_class_accuracy(m, data, TagFilter::Holdout)) {
            pc.push_back(std::isnan(v) ? json(nullptr) : json(v));
        }
        j["acc_holdout_per_class"] = pc;
    }
    if (relearn && data.count(TagFilter::Forget) > 0) {
        const RelearnResult r = relearn_epochs(m, data, train_config(c.train, m, c, seed),
                                               c.relearn_threshold, c.relearn_cap);
        j["relearn_epochs"] = r.render();
        j["relearn_final_loss"] = r.final_loss;
    }
    return j;
}

void add_common(CLI::App* cmd, Common& o, bool need_data = true) {
    cmd->add_option("-c,--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    if (need_data) {
        cmd->add_option("-d,--data", o.data, "dataset CSV from gen-data (default: generate from config)");
    }
    cmd->add_option("-s,--seed", o.seed, "seed")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ntku: parameter-masked NTK unlearning experiments"};
    app.require_subcommand(1);

    Common o;
    std::string out, init_path, model_path, report_path, history_path, kernel_dir, metrics_path,
        output_dir;
    bool no_relearn = false;

    auto* gen = app.add_subcommand("gen-data", "generate (or load) and split the dataset for a seed");
    add_common(gen, o, false);
    gen->add_option("-o,--out", out, "output CSV")->required();

    auto* train = app.add_subcommand("train", "initialize, calibrate and fine-tune (the Full model)");
    add_common(train, o);
    train->add_option("--init-out", init_path, "write the calibrated initial checkpoint here")->required();
    train->add_option("-o,--out", out, "fine-tuned checkpoint")->required();
    train->add_option("--history", history_path, "per-epoch CSV");

    auto* scrub_cmd = app.add_subcommand("scrub", "one-shot Fast-NTK unlearning of the forget set");
    add_common(scrub_cmd, o);
    scrub_cmd->add_option("--init", init_path, "initial checkpoint")->required()->check(CLI::ExistingFile);
    scrub_cmd->add_option("-m,--model", model_path, "fine-tuned checkpoint")->required()->check(CLI::ExistingFile);
    scrub_cmd->add_option("-o,--out", out, "scrubbed checkpoint")->required();
    scrub_cmd->add_option("--report", report_path, "scrub report (key = value text)");
    scrub_cmd->add_option("--dump-kernels", kernel_dir, "write K_rr, K_rf, K_ff containers here");

    auto* base = app.add_subcommand("baseline", "run an unlearning baseline");
    base->require_subcommand(1);
    std::string which;
    for (const char* name : {"retrain", "maxloss", "randomlabel"}) {
        auto* b = base->add_subcommand(name, std::string(name) + " baseline");
        add_common(b, o);
        b->add_option("--init", init_path, "initial checkpoint (retrain)");
        b->add_option("-m,--model", model_path, "fine-tuned checkpoint (maxloss, randomlabel)");
        b->add_option("-o,--out", out, "output checkpoint")->required();
        b->callback([&which, name] { which = name; });
    }

    auto* eval = app.add_subcommand("eval", "accuracies and relearning epochs of a checkpoint");
    add_common(eval, o);
    eval->add_option("-m,--model", model_path, "checkpoint")->required()->check(CLI::ExistingFile);
    eval->add_flag("--no-relearn", no_relearn, "skip the relearning metric");

    auto* run = app.add_subcommand("run", "full pipeline over every seed in the config");
    run->add_option("-c,--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    run->add_option("--output-dir", output_dir, "override output_dir");

    auto* report = app.add_subcommand("report", "render a metrics.json as a table");
    report->add_option("metrics", metrics_path, "metrics.json")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            const ExperimentConfig c = read_config(o);
            save_dataset(experiment_data(c, o.seed), out);
            std::cout << "wrote " << out << "\n";
        } else if (*train) {
            const ExperimentConfig c = read_config(o);
            const Dataset data = read_data(o, c);
            const Model init = experiment_init(c, data, o.seed);
            save_model(init, init_path);
            TrainResult r = finetune(init, data, train_config(c.train, init, c, o.seed));
            save_model(r.model, out);
            if (!history_path.empty()) write_file(history_path, r.history.to_csv());
            std::cout << "final loss " << r.history.records.back().loss << ", wrote " << out << "\n";
        } else if (*scrub_cmd) {
            const ExperimentConfig c = read_config(o);
            const Dataset data = read_data(o, c);
            const Model init = load_model(init_path);
            const Model trained = load_model(model_path);
            const ParamMask mask = select_params(trained, c.mask_strategy);
            ScrubOptions so;
            so.policy = c.policy;
            so.block_size = c.block_size;
            so.residuals_at = c.residuals_at;
            so.memory_budget = c.memory_budget;
            so.threads = c.threads;
            const ScrubResult r = scrub(trained, init, data, mask, so);
            save_model(r.model, out);
            if (!report_path.empty()) write_file(report_path, scrub_report_to_text(r.report));
            if (!kernel_dir.empty()) {
                const auto jr = assemble_jacobian(trained, data, TagFilter::Retain, mask, c.block_size, c.threads);
                const auto jf = assemble_jacobian(trained, data, TagFilter::Forget, mask, c.block_size, c.threads);
                const KernelBlocks k = kernel_blocks(jr, jf, c.threads);
                const std::filesystem::path dir = kernel_dir;
                save_kernel(k.rr, dir / "K_rr.bin");
                save_kernel(k.rf, dir / "K_rf.bin");
                save_kernel(k.ff, dir / "K_ff.bin");
            }
            std::cout << "delta_norm " << r.report.delta_norm << ", jitter rr/schur "
                      << r.report.jitter_rr << '/' << r.report.jitter_schur << ", wrote " << out << "\n";
        } else if (*base) {
            const ExperimentConfig c = read_config(o);
            const Dataset data = read_data(o, c);
            Model m;
            if (which == "retrain") {
                require(!init_path.empty(), ErrorCode::InvalidConfig, "retrain needs --init");
                const Model init = load_model(init_path);
                m = retrain(init, data, train_config(c.train, init, c, o.seed)).model;
            } else {
                require(!model_path.empty(), ErrorCode::InvalidConfig, which + " needs --model");
                const Model full = load_model(model_path);
                if (which == "maxloss") {
                    m = max_loss_unlearn(full, data, train_config(c.maxloss, full, c, o.seed));
                } else {
                    m = random_label_unlearn(full, data, c.model.num_classes,
                                             train_config(c.random_label, full, c, o.seed));
                }
            }
            save_model(m, out);
            std::cout << "wrote " << out << "\n";
        } else if (*eval) {
            const ExperimentConfig c = read_config(o);
            const Dataset data = read_data(o, c);
            std::cout << eval_json(load_model(model_path), data, c, o.seed, !no_relearn).dump(2) << "\n";
        } else if (*run) {
            ExperimentConfig c = load_config(o.config);
            if (!output_dir.empty()) c.output_dir = output_dir;
            const ExperimentResult r = run_experiment(c);
            std::cout << render_report(metrics_json(r)) << "wrote " << (c.output_dir / "metrics.json").string()
                      << "\n";
        } else if (*report) {
            std::cout << render_report(json::parse(read_file(metrics_path)));
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
