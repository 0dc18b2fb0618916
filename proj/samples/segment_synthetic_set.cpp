// Segments one synthetic set with M protocols and reports the best Set Dice.
//
//   segment_synthetic_set [model.pckm] [montage.ppm]
//
// Without a checkpoint a freshly initialised model is used, which shows the
// plumbing but not a meaningful score.
#include <cstdio>
#include <exception>

#include "pancakes/checkpoint.hpp"
#include "pancakes/core/resample.hpp"
#include "pancakes/metrics.hpp"
#include "pancakes/synth.hpp"
#include "pancakes/train.hpp"
#include "pancakes/viz.hpp"

using namespace pancakes;

int main(int argc, char** argv) try {
    Model<float> model{ModelConfig{}};
    int resolution = 64;
    if (argc > 1) {
        const Checkpoint c = load_checkpoint(argv[1]);
        model = model_from_checkpoint(c);
        if (checkpoint_resolution(c) > 0) resolution = checkpoint_resolution(c);
    }

    Rng pool_rng(derive_seed(42, {0}));
    const LabelPool pool = procedural_pool(pool_rng, PoolConfig{.volumes = 1});
    const SynthSet set = generate_set(pool, 42, 0, 3);

    std::vector<Grid> images, gts;
    for (std::size_t i = 0; i < set.images.size(); ++i) {
        images.push_back(downsample_to(set.images[i], resolution));
        gts.push_back(downsample_to(label_mask(set.labels[i], set.gt_label), resolution));
    }

    const ProtocolRequest req{8, 20, model.config().half_width};
    std::vector<std::vector<Grid>> hard;
    for (auto& out : model.segment_set(ImageSet(images), req)) hard.push_back(std::move(out.hard));

    const auto r = set_metric(hard, gts, req.num_labels, Metric::dice);
    std::printf("set of %zu images at %dx%d, target label %d\n", images.size(), resolution, resolution, set.gt_label);
    std::printf("best Set Dice %.4f (protocol %d, label %d)\n", r.best_value, r.best_protocol, r.best_label - 1);
    for (std::size_t i = 0; i < r.per_image.size(); ++i) std::printf("  image %zu: %.4f\n", i, r.per_image[i]);

    if (argc > 2) {
        write_ppm(label_montage(hard), argv[2]);
        std::printf("wrote %s\n", argv[2]);
    }
    return 0;
} catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
}
