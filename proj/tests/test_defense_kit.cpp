#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "bdlab/bdlab.hpp"
#include "support/oracles.hpp"

using namespace bdlab;

namespace {

std::vector<TokenSequence> natural_corpus() {
    std::vector<TokenSequence> out;
    const std::vector<std::string> colors{"red", "blue", "green", "yellow", "white"};
    const std::vector<std::string> things{"ball", "car", "house", "kite"};
    for (std::size_t i = 0; i < 20; ++i)
        out.push_back(tokenize("the " + colors[i % colors.size()] + " " + things[i % things.size()] +
                               " is next to the big tree today"));
    return out;
}

TokenSequence inject(TokenSequence host, const TokenSequence &phrase, std::size_t at) {
    host.insert(host.begin() + static_cast<std::ptrdiff_t>(at), phrase.begin(), phrase.end());
    return host;
}

bool is_subsequence(const TokenSequence &sub, const TokenSequence &seq) {
    std::size_t j = 0;
    for (const auto &t : seq)
        if (j < sub.size() && sub[j] == t) ++j;
    return j == sub.size();
}

class ConstantModel final : public GenerativeModel {
  public:
    TokenSequence generate(const ImageGrid &, const TokenSequence &, Rng &) const override {
        return {"the", "same", "words", "every", "time"};
    }
};

class RecordingModel final : public GenerativeModel {
  public:
    TokenSequence generate(const ImageGrid &image, const TokenSequence &, Rng &) const override {
        seen.push_back(image);
        return {"a"};
    }
    mutable std::vector<ImageGrid> seen;
};

} // namespace

TEST(SpuriousScores, LengthOneIsDifferenceWithEmpty) {
    const auto j = NgramJudge::train({{"a", "b"}}, 2, 0.1);
    const auto f = spurious_scores({"a"}, j);
    ASSERT_EQ(f.size(), 1u);
    EXPECT_DOUBLE_EQ(f[0], j.perplexity({"a"}) - j.perplexity({}));
    EXPECT_THROW(spurious_scores({}, j), Error);
}

TEST(SpuriousScores, TrainingSentenceHasNoPositiveScore) {
    const TokenSequence s{"a", "small", "red", "ball", "rests", "here"};
    const auto j = NgramJudge::train({s}, 2, 1e-6);
    const auto f = spurious_scores(s, j);
    for (std::size_t i = 0; i < s.size(); ++i) {
        TokenSequence without = s;
        without.erase(without.begin() + static_cast<std::ptrdiff_t>(i));
        EXPECT_DOUBLE_EQ(f[i], j.perplexity(s) - j.perplexity(without));
        EXPECT_LE(f[i], 0.0);
    }
}

TEST(SpuriousScores, InjectedTokenIsTheArgmax) {
    const auto corpus = natural_corpus();
    const auto j = NgramJudge::train(corpus, 2, 0.1);
    for (std::size_t at = 0; at <= corpus[3].size(); ++at) {
        const auto s = inject(corpus[3], {"zzyzx"}, at);
        const auto f = spurious_scores(s, j);
        // exhaustive deletion: the injected position is the one whose removal helps most
        std::size_t best = 0;
        double best_drop = -INFINITY;
        for (std::size_t i = 0; i < s.size(); ++i) {
            TokenSequence w = s;
            w.erase(w.begin() + static_cast<std::ptrdiff_t>(i));
            const double drop = j.perplexity(s) - j.perplexity(w);
            if (drop > best_drop) {
                best_drop = drop;
                best = i;
            }
        }
        EXPECT_EQ(best, at);
        EXPECT_EQ(static_cast<std::size_t>(std::max_element(f.begin(), f.end()) - f.begin()), at);
    }
}

TEST(OnionR, LowPerplexitySentenceIsUntouched) {
    const auto corpus = natural_corpus();
    const auto j = NgramJudge::train(corpus, 2, 0.1);
    const auto r = onion_r(corpus[0], j, {j.perplexity(corpus[0]) + 1.0, 64});
    EXPECT_EQ(r.cleaned, corpus[0]);
    EXPECT_EQ(r.stop_reason, OnionStop::BelowThreshold);
    EXPECT_TRUE(r.removed_original_positions.empty());
}

TEST(OnionR, RemovesAnInjectedPhraseExactly) {
    const auto corpus = natural_corpus();
    const auto j = NgramJudge::train(corpus, 2, 0.1);
    // a host the judge has seen verbatim, so only the phrase is anomalous
    const TokenSequence host = corpus[0];
    ASSERT_EQ(host.size(), 10u);
    const TokenSequence phrase{"win", "free", "money", "now"};
    const auto s = inject(host, phrase, 3);
    double host_max = 0.0;
    for (const auto &c : corpus) host_max = std::max(host_max, j.perplexity(c));
    host_max = std::max(host_max, j.perplexity(host));
    ASSERT_GT(j.perplexity(s), host_max);

    const auto r = onion_r(s, j, {host_max, 64});
    EXPECT_EQ(r.cleaned, host);
    std::set<std::size_t> all = r.removed_original_positions;
    all.insert(r.closure_positions.begin(), r.closure_positions.end());
    EXPECT_EQ(all, (std::set<std::size_t>{3, 4, 5, 6}));
}

TEST(OnionR, SignConsistentScoresStopImmediately) {
    const TokenSequence s{"a", "small", "red", "ball", "rests", "here"};
    const auto j = NgramJudge::train({s}, 2, 1e-6);
    const auto r = onion_r(s, j, {0.5, 64});
    EXPECT_EQ(r.stop_reason, OnionStop::SignConsistent);
    EXPECT_EQ(r.cleaned, s);
}

TEST(OnionR, ShortInputsAndIterationCap) {
    const auto j = NgramJudge::train(natural_corpus(), 2, 0.1);
    EXPECT_EQ(onion_r({"zzz"}, j, {1.0, 4}).stop_reason, OnionStop::TooShort);
    EXPECT_EQ(onion_r({}, j, {1.0, 4}).stop_reason, OnionStop::TooShort);

    const auto s = inject(tokenize("the red ball is next to the tree"), {"qq", "ww", "ee", "rr", "tt"}, 2);
    const auto r = onion_r(s, j, {1.0, 1});
    EXPECT_LE(r.removed_original_positions.size(), 1u);
    EXPECT_THROW(onion_r(s, j, {1.0, 0}), Error);
}

TEST(OnionR, TerminatesIdempotentAndSound) {
    const auto corpus = natural_corpus();
    const auto j = NgramJudge::train(corpus, 2, 0.1);
    double threshold = 0.0;
    for (const auto &c : corpus) threshold = std::max(threshold, j.perplexity(c));
    const OnionRConfig cfg{threshold, 64};
    const TokenSequence phrase = tokenize("click this link to win free money");
    Rng rng(11);
    for (int trial = 0; trial < 60; ++trial) {
        const auto &host = corpus[uniform_index(rng, corpus.size())];
        const auto s = inject(host, phrase, uniform_index(rng, host.size() + 1));
        const auto r = onion_r(s, j, cfg);
        EXPECT_LE(r.removed_original_positions.size(), std::min<std::size_t>(64, s.size() - 1));
        EXPECT_TRUE(is_subsequence(r.cleaned, host)) << detokenize(r.cleaned);
        for (auto p : r.removed_original_positions) EXPECT_LT(p, s.size());
        if (r.stop_reason == OnionStop::BelowThreshold) {
            const auto again = onion_r(r.cleaned, j, cfg);
            EXPECT_TRUE(again.removed_original_positions.empty());
            EXPECT_EQ(again.cleaned, r.cleaned);
        }
    }
}

TEST(StripP, BlendIsTheArithmeticMeanAtHalf) {
    ImageGrid a(4, 4, 3, 0.2), b(4, 4, 3, 0.8);
    const auto m = blend(a, b, 0.5);
    for (double v : m.pixels()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(StripP, ConstantGeneratorHasZeroVariance) {
    const ConstantModel model;
    const auto j = NgramJudge::train(natural_corpus(), 2, 0.1);
    SceneDomainConfig dc;
    Rng rng(5);
    std::vector<StripSample> data;
    std::vector<ImageGrid> donors;
    for (int i = 0; i < 10; ++i) {
        const auto s = random_scene(dc, rng);
        data.push_back({"s" + std::to_string(i), render_scene(s, 32, 32, rng), question_tokens(QuestionKind::Season)});
        donors.push_back(render_scene(random_scene(dc, rng), 32, 32, rng));
    }
    for (const auto &r : strip_p(model, data, donors, j, {}, 1)) {
        ASSERT_EQ(r.per_perturbation_ppl.size(), 5u);
        EXPECT_EQ(r.statistic_value, 0.0);
        EXPECT_FALSE(r.flagged_poisoned.has_value());
    }
}

TEST(StripP, CleanModelVariesUnderBlendingAcrossSeeds) {
    const CleanVlm model;
    SceneDomainConfig dc;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);
        std::vector<StripSample> data;
        std::vector<ImageGrid> donors;
        std::vector<TokenSequence> corpus;
        for (int i = 0; i < 12; ++i) {
            const auto s = random_scene(dc, rng);
            data.push_back({"s" + std::to_string(i), render_scene(s, 64, 64, rng), question_tokens(QuestionKind::DescribeImage)});
            donors.push_back(render_scene(random_scene(dc, rng), 64, 64, rng));
            for (auto &a : answer_variants(QuestionKind::DescribeImage, facts_from_scene(s))) corpus.push_back(a);
        }
        const auto j = NgramJudge::train(corpus, 2, 0.1);
        for (const auto &r : strip_p(model, data, donors, j, {}, seed)) EXPECT_GT(r.statistic_value, 0.0) << seed;
    }
}

TEST(StripP, DeterministicOrderIndependentAndNeverSelfBlends) {
    const CleanVlm model;
    SceneDomainConfig dc;
    Rng rng(9);
    std::vector<StripSample> data;
    std::vector<ImageGrid> donors;
    for (int i = 0; i < 6; ++i) {
        data.push_back({"s" + std::to_string(i), render_scene(random_scene(dc, rng), 32, 32, rng),
                        question_tokens(QuestionKind::ProminentColors)});
    }
    donors.push_back(data[0].image);
    donors.push_back(render_scene(random_scene(dc, rng), 32, 32, rng));
    const auto j = NgramJudge::train({{"a"}}, 2, 0.1);
    StripPConfig mean_cfg;
    mean_cfg.statistic = StripStatistic::Mean;

    const auto a = strip_p(model, data, donors, j, {}, 3);
    const auto b = strip_p(model, data, donors, j, {}, 3);
    auto reversed = data;
    std::reverse(reversed.begin(), reversed.end());
    const auto c = strip_p(model, reversed, donors, j, {}, 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].per_perturbation_ppl, b[i].per_perturbation_ppl);
        EXPECT_EQ(a[i].per_perturbation_ppl, c[a.size() - 1 - i].per_perturbation_ppl);
        EXPECT_DOUBLE_EQ(a[i].statistic_value, strip_statistic(a[i].per_perturbation_ppl, StripStatistic::Variance));
    }
    const auto m = strip_p(model, {data[0]}, donors, j, mean_cfg, 3);
    EXPECT_DOUBLE_EQ(m[0].statistic_value, strip_statistic(m[0].per_perturbation_ppl, StripStatistic::Mean));

    // donor 0 is sample 0's own image, so every blend it sees must differ from it
    const RecordingModel rec;
    strip_p(rec, {data[0]}, donors, j, {}, 3);
    ASSERT_EQ(rec.seen.size(), 5u);
    for (const auto &img : rec.seen) {
        EXPECT_FALSE(img == data[0].image);
        EXPECT_TRUE(img == blend(data[0].image, donors[1], 0.5));
    }

    EXPECT_THROW(strip_p(model, {}, donors, j, {}, 3), Error);
    EXPECT_THROW(strip_p(model, data, {}, j, {}, 3), Error);
    EXPECT_THROW(strip_p(model, {data[0]}, {data[0].image}, j, {}, 3), Error);
}

TEST(Calibrate, QuantileThresholdAndFlags) {
    auto rec = [](double v) {
        DetectionRecord r;
        r.statistic_value = v;
        return r;
    };
    std::vector<DetectionRecord> clean(20, rec(10.0)), test{rec(0.0), rec(10.0)};
    EXPECT_DOUBLE_EQ(calibrate_and_flag(clean, test, 0.05), 10.0);
    EXPECT_TRUE(*test[0].flagged_poisoned);
    EXPECT_FALSE(*test[1].flagged_poisoned);

    std::vector<DetectionRecord> hundred;
    std::vector<double> values;
    for (int v = 100; v >= 1; --v) {
        hundred.push_back(rec(v));
        values.push_back(v);
    }
    std::vector<DetectionRecord> none;
    EXPECT_DOUBLE_EQ(calibrate_and_flag(hundred, none, 0.01), oracle::lower_quantile(values, 0.01));
    EXPECT_DOUBLE_EQ(calibrate_and_flag(hundred, none, 0.37), oracle::lower_quantile(values, 0.37));

    EXPECT_THROW(calibrate_and_flag({}, test, 0.05), Error);
    EXPECT_THROW(calibrate_and_flag(clean, test, 0.0), Error);
    EXPECT_THROW(calibrate_and_flag(clean, test, 1.0), Error);
}

TEST(RocAuc, HandExamplesAndMannWhitney) {
    EXPECT_DOUBLE_EQ(roc_auc({1, 2}, {3, 4}).auc, 1.0);
    EXPECT_DOUBLE_EQ(roc_auc({1, 2, 3}, {1, 2, 3}).auc, 0.5);
    EXPECT_DOUBLE_EQ(roc_auc({1, 3}, {2, 4}).auc, 0.75);
    EXPECT_THROW(roc_auc({}, {1}), Error);
    EXPECT_THROW(roc_auc({1}, {}), Error);

    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> p, c;
        for (std::size_t i = 0, n = 1 + uniform_index(rng, 30); i < n; ++i) p.push_back(static_cast<double>(uniform_index(rng, 10)));
        for (std::size_t i = 0, n = 1 + uniform_index(rng, 30); i < n; ++i) c.push_back(static_cast<double>(uniform_index(rng, 10)));
        const auto roc = roc_auc(p, c);
        EXPECT_NEAR(roc.auc, oracle::mann_whitney_auc(p, c), 1e-12);
        double trap = 0.0;
        for (std::size_t i = 1; i < roc.points.size(); ++i)
            trap += (roc.points[i].fpr - roc.points[i - 1].fpr) * (roc.points[i].tpr + roc.points[i - 1].tpr) / 2;
        EXPECT_NEAR(roc.auc, trap, 1e-9);
        EXPECT_DOUBLE_EQ(roc.points.back().fpr, 1.0);
        EXPECT_DOUBLE_EQ(roc.points.back().tpr, 1.0);
    }
}
