#include <numeric>

#include "support.hpp"

using namespace vitclt;
using vitclt::testing::random_clt;
using vitclt::testing::small_vit_config;
using vitclt::testing::toy_samples;

namespace {

SparsifierSpec topk(std::size_t k) {
    SparsifierSpec s;
    s.kind = SparsifierKind::ReluTopK;
    s.k = k;
    return s;
}

struct Fixture : ::testing::Test {
    VitParams vit = init_teacher(small_vit_config());
    CltParams clt = random_clt(3, 8, 16, topk(4), 31);
    std::vector<ToySample> samples = toy_samples(vit, 12);

    std::vector<ReplacementPlan> every_plan() const {
        std::vector<ReplacementPlan> plans;
        for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t b = a; b < 3; ++b)
                for (auto r : {TokenSet::Cls, TokenSet::Patches, TokenSet::All})
                    plans.push_back({LayerRange{a, b}, r});
        return plans;
    }
};

bool same_output(const ForwardResult& a, const ForwardResult& b) {
    return a.logits == b.logits && a.embedding == b.embedding;
}

}  // namespace

using Replacement = Fixture;

TEST_F(Replacement, EmptyPlanIsBitIdenticalToBaseline) {
    for (auto routing : {TokenSet::Cls, TokenSet::Patches, TokenSet::All})
        for (const auto& s : samples)
            EXPECT_TRUE(same_output(run_cascaded(vit, clt, ReplacementPlan{std::nullopt, routing}, s.tokens),
                                    forward(vit, s.tokens)));
}

TEST_F(Replacement, OracleSurrogateIsBitIdenticalForEveryPlan) {
    OracleSurrogate oracle(vit);
    for (const auto& plan : every_plan())
        for (const auto& s : samples)
            EXPECT_TRUE(same_output(run_cascaded(vit, oracle, plan, s.tokens), forward(vit, s.tokens)))
                << plan.range_label() << " " << to_string(plan.routing);
}

TEST_F(Replacement, ActivationsBeforeTheRangeAreUntouched) {
    for (const auto& plan : every_plan()) {
        const auto& s = samples[3];
        ActivationTrace base, mod;
        forward_with_hooks(vit, s.tokens, {}, &base);
        run_cascaded(vit, clt, plan, s.tokens, &mod);
        const std::size_t first = plan.range->first;
        for (std::size_t l = 0; l < first; ++l) {
            EXPECT_EQ(mod.x[l], base.x[l]);
            EXPECT_EQ(mod.y[l], base.y[l]);
        }
        // the first replaced layer still sees the teacher stream
        EXPECT_EQ(mod.x[first], base.x[first]);
        EXPECT_NE(mod.y[first], base.y[first]);
    }
}

TEST_F(Replacement, SubstitutedRowsAreCltReconstructionsOfTheModifiedStream) {
    const ReplacementPlan plan{LayerRange{1, 2}, TokenSet::All};
    ActivationTrace mod;
    run_cascaded(vit, clt, plan, samples[0].tokens, &mod);
    // cascaded codes come from the captured (modified) inputs, including sources before the range
    const auto codes = encode(clt, mod.x);
    EXPECT_EQ(mod.y[1], reconstruct(clt, codes, 1));
    EXPECT_EQ(mod.y[2], reconstruct(clt, codes, 2));
    EXPECT_EQ(mod.y[0], mlp(vit.layers[0], mod.x[0]));
}

TEST_F(Replacement, RoutingKeepsTeacherMlpOnOtherRows) {
    ActivationTrace cls, patches, all;
    for (auto [routing, trace] : {std::pair{TokenSet::Cls, &cls}, {TokenSet::Patches, &patches}, {TokenSet::All, &all}})
        run_cascaded(vit, clt, ReplacementPlan{LayerRange{1, 1}, routing}, samples[2].tokens, trace);
    // single-layer range: both routings see the same input, so merged rows equal routing=all
    Matrix merged = patches.y[1];
    std::copy(cls.y[1].row(0).begin(), cls.y[1].row(0).end(), merged.row(0).begin());
    EXPECT_EQ(merged, all.y[1]);
    const auto teacher = mlp(vit.layers[1], cls.x[1]);
    for (std::size_t r = 1; r < teacher.rows(); ++r)
        for (std::size_t d = 0; d < teacher.cols(); ++d) EXPECT_EQ(cls.y[1](r, d), teacher(r, d));
}

TEST_F(Replacement, ClsAndPatchRoutingDiffer) {
    const auto a = run_cascaded(vit, clt, ReplacementPlan{LayerRange{0, 2}, TokenSet::Cls}, samples[1].tokens);
    const auto b = run_cascaded(vit, clt, ReplacementPlan{LayerRange{0, 2}, TokenSet::Patches}, samples[1].tokens);
    EXPECT_NE(a.logits, b.logits);
}

TEST_F(Replacement, DimensionMismatchIsRejected) {
    const auto wrong = random_clt(3, 6, 12, topk(2), 32);
    EXPECT_THROW(run_cascaded(vit, wrong, ReplacementPlan{LayerRange{0, 0}, TokenSet::All}, samples[0].tokens),
                 std::invalid_argument);
    EXPECT_THROW(run_cascaded(vit, clt, ReplacementPlan{LayerRange{1, 3}, TokenSet::All}, samples[0].tokens),
                 std::invalid_argument);
}

TEST_F(Replacement, PerfectSurrogateMetrics) {
    OracleSurrogate oracle(vit);
    const auto base = baseline_outputs(vit, samples);
    const auto r = evaluate_plan(vit, oracle, ReplacementPlan{LayerRange{0, 2}, TokenSet::All}, samples, base);
    EXPECT_EQ(r.delta_acc, 0.0);
    EXPECT_EQ(r.acc_base, r.acc_surrogate);
    EXPECT_EQ(r.kl_mean, 0.0);
    EXPECT_EQ(r.flip_rate, 0.0);
    EXPECT_EQ(r.top1_agreement, 100.0);
    EXPECT_EQ(r.top5_agreement, 100.0);
    EXPECT_NEAR(r.cls_cosine, 1.0, 1e-6);
    EXPECT_NEAR(r.cka, 1.0, 1e-9);
    EXPECT_NEAR(r.spearman, 1.0, 1e-12);
    EXPECT_EQ(r.samples, samples.size());
}

TEST(Faithfulness, ShuffledLogitsAgreeAtChance) {
    // surrogate logits are the baseline logits under a fresh random class permutation
    const std::size_t n = 4000, C = 10;
    Rng rng(33);
    std::vector<ForwardResult> base(n), sur(n);
    std::vector<std::uint32_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        base[i].logits.resize(C);
        rng.fill_normal(std::span<float>(base[i].logits), 1.0);
        base[i].embedding = {1.0f, static_cast<float>(rng.normal())};
        std::vector<std::size_t> perm(C);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        rng.shuffle(std::span<std::size_t>(perm));
        sur[i] = base[i];
        for (std::size_t c = 0; c < C; ++c) sur[i].logits[c] = base[i].logits[perm[c]];
        labels[i] = static_cast<std::uint32_t>(i % C);
    }
    const auto r = faithfulness(base, sur, labels);
    // binomial standard deviations at n = 4000: 0.47 points for p = 0.1, 0.79 for p = 0.5
    EXPECT_NEAR(r.top1_agreement, 10.0, 4 * 0.47);
    EXPECT_NEAR(r.top5_agreement, 50.0, 4 * 0.79);
    EXPECT_NEAR(r.flip_rate, 100.0 - r.top1_agreement, 1e-9);
    EXPECT_GT(r.kl_mean, 1.0);
}

TEST(Faithfulness, HandComputedAccuracyAndFlips) {
    float k = 0.0f;
    auto out = [&k](std::vector<float> logits) {
        ForwardResult r;
        r.logits = std::move(logits);
        r.embedding = {1.0f, k};
        k = k > 2.5f ? 0.0f : k + 1.0f;
        return r;
    };
    const std::vector<ForwardResult> base{out({1, 0, 0}), out({0, 1, 0}), out({0, 0, 1}), out({1, 0, 0})};
    const std::vector<ForwardResult> sur{out({1, 0, 0}), out({1, 0, 0}), out({0, 0, 1}), out({0, 1, 0})};
    const std::vector<std::uint32_t> labels{0, 1, 1, 0};
    const auto r = faithfulness(base, sur, labels, 1.0);
    EXPECT_EQ(r.acc_base, 75.0);
    EXPECT_EQ(r.acc_surrogate, 25.0);
    EXPECT_EQ(r.delta_acc, -50.0);
    EXPECT_EQ(r.flip_rate, 50.0);
    EXPECT_EQ(r.top1_agreement, 50.0);
    // each of the two flipped samples: KL([e,1,1]/(e+2) || [1,e,1]/(e+2)) = (e - 1) / (e + 2)
    const double e = std::exp(1.0);
    EXPECT_NEAR(r.kl_mean, 2.0 * (e - 1.0) / (e + 2.0) / 4.0, 1e-12);
    EXPECT_NEAR(r.cka, 1.0, 1e-12);
}

TEST(Faithfulness, InputErrors) {
    ForwardResult r;
    r.logits = {0.5f, 0.1f};
    r.embedding = {1.0f};
    const std::vector<ForwardResult> one{r};
    const std::vector<std::uint32_t> bad_label{7}, no_labels;
    EXPECT_THROW(faithfulness(one, one, no_labels), std::invalid_argument);
    EXPECT_THROW(faithfulness(one, one, bad_label), std::invalid_argument);
}

TEST(Faithfulness, TopKMembershipBreaksTiesByIndex) {
    const std::vector<float> logits{0.5f, 0.9f, 0.5f, 0.1f};
    EXPECT_TRUE(in_top_k(logits, 1, 1));
    EXPECT_TRUE(in_top_k(logits, 0, 2));
    EXPECT_FALSE(in_top_k(logits, 2, 2));
    EXPECT_TRUE(in_top_k(logits, 2, 3));
}

TEST_F(Replacement, SweepIsDeterministicAndEmptyRowMatchesBaseline) {
    const std::vector<std::optional<LayerRange>> ranges{std::nullopt, LayerRange{2, 2}, LayerRange{0, 2}};
    const std::vector<TokenSet> routings{TokenSet::All, TokenSet::Patches};
    const auto a = sweep(vit, clt, ranges, routings, samples);
    const auto b = sweep(vit, clt, ranges, routings, samples);
    ASSERT_EQ(a.size(), 6u);
    EXPECT_EQ(sweep_csv(a), sweep_csv(b));
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(a[i].report.acc_surrogate, a[i].report.acc_base);
        EXPECT_EQ(a[i].report.kl_mean, 0.0);
        EXPECT_EQ(a[i].report.flip_rate, 0.0);
    }
    const auto csv = sweep_csv(a);
    EXPECT_EQ(csv.substr(0, csv.find('\n')),
              "range,routing,samples,acc_base,acc_surrogate,delta_acc,flip_rate,kl_mean,top1_agree,top5_agree,"
              "cls_cosine,cka,spearman");
    EXPECT_NE(csv.find("\n0->2,patches,12,"), std::string::npos);
}

TEST(ParseRange, AcceptedForms) {
    EXPECT_EQ(parse_range("none"), std::nullopt);
    EXPECT_EQ(parse_range("3->5"), (LayerRange{3, 5}));
    EXPECT_EQ(parse_range("3-5"), (LayerRange{3, 5}));
    EXPECT_EQ(parse_range("0:0"), (LayerRange{0, 0}));
    for (const char* bad : {"5->3", "a->b", "3", "3->", "-1->2", "1->2x"}) EXPECT_THROW(parse_range(bad), std::invalid_argument) << bad;
}
