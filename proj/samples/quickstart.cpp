// Small end-to-end use of the library: fine-tune, scrub one class, compare.
#include <iostream>

#include "ntku/ntku.hpp"

int main() {
    using namespace ntku;
    ModelSpec spec;
    spec.layer_sizes = {64};
    spec.input_dim = 10;
    spec.num_classes = 5;

    const Dataset data = split_forget(gen_blobs(5, 20, 10, 8.0, 3), {0});
    Model init = init_model(spec, 3, {0.5, 0.02});
    calibrate_normalization(init, data.subset(TagFilter::Train).inputs);

    const ParamMask mask = select_params(init, {MaskKind::NormAffine, {}});
    TrainConfig cfg;
    cfg.optimizer = Optimizer::SgdMomentum;
    cfg.learning_rate = 0.3;
    cfg.epochs = 40;
    cfg.batch_size = 16;
    cfg.seed = 3;
    cfg.mask = mask;

    const Model full = finetune(init, data, cfg).model;
    const ScrubResult s = scrub(full, init, data, mask);

    std::cout << "mask: " << mask.size() << " of " << init.params.size() << " parameters\n";
    for (auto [name, m] : {std::pair{"full", &full}, std::pair{"scrubbed", &s.model}}) {
        std::cout << name << ": retain " << accuracy(*m, data, TagFilter::Retain) << ", forget "
                  << accuracy(*m, data, TagFilter::Forget) << ", holdout "
                  << accuracy(*m, data, TagFilter::Holdout) << "\n";
    }
    std::cout << "delta norm " << s.report.delta_norm << "\n";
    return accuracy(s.model, data, TagFilter::Forget) <= 0.2 ? 0 : 1;
}
