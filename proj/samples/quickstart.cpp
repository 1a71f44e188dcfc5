// Train a small transcoder on toy-teacher activations, then look at where
// the final layer's output comes from and how much the teacher changes when
// its last two MLPs are replaced.

#include <cstdio>
#include <numeric>

#include "vitclt/vitclt.hpp"

using namespace vitclt;

int main() {
    VitConfig vc;
    vc.layers = 4;
    vc.tokens = 6;
    vc.hidden = 16;
    vc.heads = 2;
    vc.classes = 5;
    vc.seed = 7;
    const auto vit = init_teacher(vc);

    InMemoryTraces store;
    std::vector<ToySample> samples;
    for (std::size_t i = 0; i < 256; ++i) {
        samples.push_back(toy_sample(vit, i));
        auto cap = forward_capture(vit, samples.back().tokens);
        cap.trace.label = samples.back().label;
        store.push_back(std::move(cap.trace));
    }

    CltConfig cc;
    cc.expansion = 8;
    cc.sparsifier.kind = SparsifierKind::ReluTopK;
    cc.sparsifier.k = 16;
    cc.seed = 1;
    TrainConfig tc;
    tc.lr = 2e-3;
    tc.epochs = 8;
    tc.batch = 16;
    tc.seed = 2;
    const auto result = train(store, tc, cc);
    for (const auto& e : result.log)
        std::printf("epoch %zu  loss %.4f  r2 %.3f  cosine %.3f\n", e.epoch, e.train_loss, e.eval.average.r2,
                    e.eval.average.cosine);
    const auto& clt = result.params;

    // share of the last layer's reconstruction attributed to each source layer
    const auto heat = attribution_heatmap(clt, store, TokenSet::Patches);
    std::printf("patch attribution into layer %zu:", vc.layers - 1);
    for (std::size_t i = 0; i < vc.layers; ++i) std::printf(" %.3f", heat.at(i, vc.layers - 1));
    std::printf("\n");

    const ReplacementPlan plan{LayerRange{2, 3}, TokenSet::All};
    const auto r = evaluate_plan(vit, clt, plan, samples);
    std::printf("replace 2->3: acc %.2f -> %.2f, flip rate %.2f%%, KL %.4f\n", r.acc_base, r.acc_surrogate, r.flip_rate,
                r.kl_mean);

    const auto index = build_index(clt, store, vc.layers - 1, Aggregation::Cls);
    for (const auto& hit : query(index, index.descriptors.row(0), 3))
        std::printf("neighbour %zu  label %u  similarity %.4f\n", hit.id, samples[hit.id].label, hit.similarity);
}
