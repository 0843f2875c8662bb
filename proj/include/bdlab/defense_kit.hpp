#pragma once

// Output-side backdoor defenses: recursive perplexity filtering of responses and
// perturbation-based detection, plus threshold calibration and ROC analysis.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bdlab/common.hpp"
#include "bdlab/image.hpp"
#include "bdlab/sim_vlm.hpp"
#include "bdlab/text_core.hpp"

namespace bdlab {

/// F_i = PPL(s) - PPL(s without token i), one per position.
inline std::vector<double> spurious_scores(const TokenSequence &s, const PerplexityJudge &judge) {
    if (s.empty()) throw Error("spurious_scores: empty sentence");
    const double base = judge.perplexity(s);
    std::vector<double> scores;
    scores.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        TokenSequence without;
        without.reserve(s.size() - 1);
        for (std::size_t j = 0; j < s.size(); ++j)
            if (j != i) without.push_back(s[j]);
        scores.push_back(base - judge.perplexity(without));
    }
    return scores;
}

struct OnionRConfig {
    double ppl_threshold = 100.0;
    int max_iterations = 64;
};

enum class OnionStop { BelowThreshold, SignConsistent, IterationCap, TooShort };

inline std::string to_string(OnionStop s) {
    switch (s) {
    case OnionStop::BelowThreshold: return "below_threshold";
    case OnionStop::SignConsistent: return "sign_consistent";
    case OnionStop::IterationCap: return "iteration_cap";
    case OnionStop::TooShort: return "too_short";
    }
    return "unknown";
}

struct OnionRResult {
    TokenSequence cleaned;
    std::set<std::size_t> removed_original_positions;
    OnionStop stop_reason = OnionStop::BelowThreshold;
    /// Positions deleted by the final span closure in addition to the greedy removals.
    std::set<std::size_t> closure_positions;
};

/// Recursive word filtering. Greedily deletes the position whose removal lowers
/// perplexity the most until the sentence falls under the threshold or its spurious
/// scores share one sign, then deletes every survivor inside [min R, max R].
inline OnionRResult onion_r(const TokenSequence &s, const PerplexityJudge &judge, const OnionRConfig &cfg) {
    if (cfg.max_iterations < 1) throw Error("onion_r: max_iterations must be >= 1");
    OnionRResult res;
    if (s.size() <= 1) {
        res.cleaned = s;
        res.stop_reason = OnionStop::TooShort;
        return res;
    }

    TokenSequence cur = s;
    std::vector<std::size_t> origin(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) origin[i] = i;

    int removals = 0;
    while (true) {
        if (judge.perplexity(cur) <= cfg.ppl_threshold) {
            res.stop_reason = OnionStop::BelowThreshold;
            break;
        }
        if (cur.size() <= 1) {
            res.stop_reason = OnionStop::TooShort;
            break;
        }
        if (removals >= cfg.max_iterations) {
            res.stop_reason = OnionStop::IterationCap;
            break;
        }
        const auto f = spurious_scores(cur, judge);
        const bool all_nonneg = std::all_of(f.begin(), f.end(), [](double v) { return v >= 0.0; });
        const bool all_nonpos = std::all_of(f.begin(), f.end(), [](double v) { return v <= 0.0; });
        if (all_nonneg || all_nonpos) {
            res.stop_reason = OnionStop::SignConsistent;
            break;
        }
        // first maximum: ties go to the smallest index; mixed signs imply f[best] > 0
        const auto best = static_cast<std::size_t>(std::max_element(f.begin(), f.end()) - f.begin());
        res.removed_original_positions.insert(origin[best]);
        cur.erase(cur.begin() + static_cast<std::ptrdiff_t>(best));
        origin.erase(origin.begin() + static_cast<std::ptrdiff_t>(best));
        ++removals;
    }

    if (!res.removed_original_positions.empty()) {
        const auto lo = *res.removed_original_positions.begin();
        const auto hi = *res.removed_original_positions.rbegin();
        TokenSequence kept;
        for (std::size_t i = 0; i < cur.size(); ++i) {
            if (origin[i] >= lo && origin[i] <= hi)
                res.closure_positions.insert(origin[i]);
            else
                kept.push_back(cur[i]);
        }
        cur = std::move(kept);
    }
    res.cleaned = std::move(cur);
    return res;
}

// ---------------------------------------------------------------------------
// Perturbation-based detection

enum class StripStatistic { Variance, Mean };

inline std::string to_string(StripStatistic s) { return s == StripStatistic::Mean ? "mean" : "variance"; }

inline StripStatistic parse_strip_statistic(const std::string &s) {
    if (s == "variance") return StripStatistic::Variance;
    if (s == "mean") return StripStatistic::Mean;
    throw ConfigError("unknown STRIP statistic: " + s);
}

struct StripPConfig {
    int num_perturbations = 5;
    double mix_alpha = 0.5;
    StripStatistic statistic = StripStatistic::Variance;
};

struct StripSample {
    std::string id;
    ImageGrid image;
    TokenSequence question;
};

struct DetectionRecord {
    std::string sample_id;
    std::vector<double> per_perturbation_ppl;
    double statistic_value = 0.0;
    std::optional<bool> flagged_poisoned;
};

/// Population variance or mean of the per-blend perplexities.
inline double strip_statistic(const std::vector<double> &ppl, StripStatistic stat) {
    if (ppl.empty()) return 0.0;
    double mean = 0.0;
    for (double v : ppl) mean += v;
    mean /= static_cast<double>(ppl.size());
    if (stat == StripStatistic::Mean) return mean;
    double var = 0.0;
    for (double v : ppl) var += (v - mean) * (v - mean);
    return var / static_cast<double>(ppl.size());
}

/// Blends each sample with P random donors (never itself), regenerates the response for
/// every blend and summarizes the response perplexities. Each sample draws from its own
/// stream derived from (seed, sample id), so results do not depend on sample order.
inline std::vector<DetectionRecord> strip_p(const GenerativeModel &model, const std::vector<StripSample> &dataset,
                                            const std::vector<ImageGrid> &donors, const PerplexityJudge &judge,
                                            const StripPConfig &cfg, std::uint64_t seed) {
    if (dataset.empty()) throw Error("strip_p: empty dataset");
    if (donors.empty()) throw Error("strip_p: empty donor set");
    if (cfg.num_perturbations < 1) throw Error("strip_p: num_perturbations must be positive");
    if (!(cfg.mix_alpha > 0.0 && cfg.mix_alpha < 1.0)) throw Error("strip_p: mix_alpha must lie in (0, 1)");

    std::vector<DetectionRecord> out;
    out.reserve(dataset.size());
    for (const auto &sample : dataset) {
        std::vector<std::size_t> pool;
        for (std::size_t d = 0; d < donors.size(); ++d)
            if (!(donors[d] == sample.image)) pool.push_back(d);
        if (pool.empty()) throw Error("strip_p: no donor differs from sample " + sample.id);

        Rng rng = make_rng(seed, sample.id);
        DetectionRecord rec;
        rec.sample_id = sample.id;
        for (int p = 0; p < cfg.num_perturbations; ++p) {
            const auto &donor = donors[pool[uniform_index(rng, pool.size())]];
            const ImageGrid mixed = blend(sample.image, donor, cfg.mix_alpha);
            const auto response = model.generate(mixed, sample.question, rng);
            rec.per_perturbation_ppl.push_back(judge.perplexity(response));
        }
        rec.statistic_value = strip_statistic(rec.per_perturbation_ppl, cfg.statistic);
        out.push_back(std::move(rec));
    }
    return out;
}

/// Threshold = lower-interpolated target_frr quantile of the clean statistics; a test
/// record is flagged when its statistic falls strictly below it.
inline double calibrate_and_flag(const std::vector<DetectionRecord> &clean_records,
                                 std::vector<DetectionRecord> &test_records, double target_frr) {
    if (clean_records.empty()) throw Error("calibrate_and_flag: empty clean set");
    if (!(target_frr > 0.0 && target_frr < 1.0)) throw Error("calibrate_and_flag: target_frr must lie in (0, 1)");
    std::vector<double> stats;
    for (const auto &r : clean_records) stats.push_back(r.statistic_value);
    const double threshold = lower_quantile(stats, target_frr);
    for (auto &r : test_records) r.flagged_poisoned = r.statistic_value < threshold;
    return threshold;
}

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = 0.0;
};

struct RocCurve {
    std::vector<RocPoint> points;
    double auc = 0.0;
};

/// ROC for "flag when statistic <= t", poisoned as positives, over every distinct value.
/// Trapezoidal AUC; tied scores contribute one half, matching the Mann-Whitney U statistic.
inline RocCurve roc_auc(const std::vector<double> &poisoned_stats, const std::vector<double> &clean_stats) {
    if (poisoned_stats.empty() || clean_stats.empty()) throw Error("roc_auc: empty input");
    std::vector<double> thresholds(poisoned_stats);
    thresholds.insert(thresholds.end(), clean_stats.begin(), clean_stats.end());
    std::sort(thresholds.begin(), thresholds.end());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

    auto rate_at = [](const std::vector<double> &v, double t) {
        return static_cast<double>(std::count_if(v.begin(), v.end(), [t](double x) { return x <= t; })) /
               static_cast<double>(v.size());
    };
    RocCurve roc;
    roc.points.push_back({0.0, 0.0, -INFINITY});
    for (double t : thresholds) roc.points.push_back({rate_at(clean_stats, t), rate_at(poisoned_stats, t), t});
    for (std::size_t i = 1; i < roc.points.size(); ++i) {
        const auto &a = roc.points[i - 1], &b = roc.points[i];
        roc.auc += (b.fpr - a.fpr) * 0.5 * (a.tpr + b.tpr);
    }
    return roc;
}

inline void write_detection_csv(const std::string &path, const std::vector<DetectionRecord> &records) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    std::size_t p = 0;
    for (const auto &r : records) p = std::max(p, r.per_perturbation_ppl.size());
    out << "sample_id";
    for (std::size_t i = 1; i <= p; ++i) out << ",ppl_" << i;
    out << ",statistic,flagged\n";
    out.precision(17);
    for (const auto &r : records) {
        out << r.sample_id;
        for (std::size_t i = 0; i < p; ++i) {
            out << ',';
            if (i < r.per_perturbation_ppl.size()) out << r.per_perturbation_ppl[i];
        }
        out << ',' << r.statistic_value << ',';
        if (r.flagged_poisoned) out << (*r.flagged_poisoned ? 1 : 0);
        out << '\n';
    }
}

inline void write_roc_csv(const std::string &path, const RocCurve &roc) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out.precision(17);
    out << "threshold,fpr,tpr\n";
    for (const auto &p : roc.points) out << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
}

} // namespace bdlab
