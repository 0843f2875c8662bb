#pragma once

// Independent reference computations used by the tests. None of these call into the
// library code they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bdlab/bdlab.hpp"

namespace oracle {

using Tokens = std::vector<std::string>;

/// Clipped n-gram precision as (matched, total), counted with plain nested loops.
inline std::pair<int, int> clipped_precision(const Tokens &hyp, const Tokens &ref, std::size_t n) {
    auto grams = [n](const Tokens &s) {
        std::vector<Tokens> out;
        for (std::size_t i = 0; i + n <= s.size(); ++i) out.emplace_back(s.begin() + i, s.begin() + i + n);
        return out;
    };
    const auto h = grams(hyp);
    auto r = grams(ref);
    std::vector<bool> used(r.size(), false);
    int matched = 0;
    for (const auto &g : h)
        for (std::size_t j = 0; j < r.size(); ++j)
            if (!used[j] && r[j] == g) {
                used[j] = true;
                ++matched;
                break;
            }
    return {matched, static_cast<int>(h.size())};
}

/// Single-reference BLEU@4 without smoothing.
inline double bleu4_single(const Tokens &hyp, const Tokens &ref) {
    double logp = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        const auto [m, t] = clipped_precision(hyp, ref, n);
        if (m == 0) return 0.0;
        logp += std::log(static_cast<double>(m) / t);
    }
    const double c = static_cast<double>(hyp.size()), r = static_cast<double>(ref.size());
    const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
    return bp * std::exp(logp / 4.0);
}

/// LCS length by memoized recursion over suffixes.
inline std::size_t lcs(const Tokens &a, const Tokens &b) {
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
    std::function<std::size_t(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> std::size_t {
        if (i == a.size() || j == b.size()) return 0;
        auto key = std::make_pair(i, j);
        if (auto it = memo.find(key); it != memo.end()) return it->second;
        const std::size_t v = a[i] == b[j] ? 1 + go(i + 1, j + 1) : std::max(go(i + 1, j), go(i, j + 1));
        return memo[key] = v;
    };
    return go(0, 0);
}

inline double rouge_l(const Tokens &hyp, const Tokens &ref, double beta = 1.2) {
    const double l = static_cast<double>(lcs(hyp, ref));
    if (l == 0.0) return 0.0;
    const double p = l / hyp.size(), r = l / ref.size();
    return (1 + beta * beta) * p * r / (r + beta * beta * p);
}

/// Probability that a random poisoned statistic is below a random clean one (ties 1/2).
inline double mann_whitney_auc(const std::vector<double> &pos, const std::vector<double> &neg) {
    double wins = 0.0;
    for (double p : pos)
        for (double n : neg) wins += p < n ? 1.0 : (p == n ? 0.5 : 0.0);
    return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

/// Sort and index: sorted[floor(q * (n - 1))].
inline double lower_quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    return v[static_cast<std::size_t>(std::floor(q * (v.size() - 1)))];
}

/// Connected components of non-background pixels by recursive flood fill (4-neighbour).
inline int count_components(const bdlab::ImageGrid &img, double bg_tol = 1e-9) {
    const int h = img.height(), w = img.width();
    std::vector<int> seen(static_cast<std::size_t>(h * w), 0);
    auto fg = [&](int y, int x) {
        for (int c = 0; c < 3; ++c)
            if (std::abs(img.at(y, x, c) - bdlab::kBackground[static_cast<std::size_t>(c)]) > bg_tol) return true;
        return false;
    };
    std::function<void(int, int)> fill = [&](int y, int x) {
        if (y < 0 || x < 0 || y >= h || x >= w) return;
        auto &s = seen[static_cast<std::size_t>(y * w + x)];
        if (s || !fg(y, x)) return;
        s = 1;
        fill(y + 1, x);
        fill(y - 1, x);
        fill(y, x + 1);
        fill(y, x - 1);
    };
    int n = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (!seen[static_cast<std::size_t>(y * w + x)] && fg(y, x)) {
                ++n;
                fill(y, x);
            }
    return n;
}

/// Largest relative error between an analytic gradient and central finite differences
/// of `loss` over every parameter of `model`:
///   |g - fd| / max(|g|, |fd|, floor).
inline double max_fd_relative_error(bdlab::TinyVlm &model, const bdlab::GradientSet &analytic,
                                    const std::function<double(const bdlab::TinyVlm &)> &loss, double step = 1e-5,
                                    double floor = 1e-6) {
    std::vector<const Eigen::MatrixXd *> grads;
    analytic.for_each([&](const std::string &, const Eigen::MatrixXd &t) { grads.push_back(&t); });
    double worst = 0.0;
    std::size_t k = 0;
    model.params.for_each([&](const std::string &, Eigen::MatrixXd &p) {
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            const double orig = p.data()[i];
            p.data()[i] = orig + step;
            const double up = loss(model);
            p.data()[i] = orig - step;
            const double down = loss(model);
            p.data()[i] = orig;
            const double fd = (up - down) / (2 * step);
            const double an = grads[k]->data()[i];
            worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), floor}));
        }
        ++k;
    });
    return worst;
}

/// Micro model of the gradient checks: d=8, two heads, 16-token vocabulary, 4 patches.
struct MicroSetup {
    bdlab::TinyVlm student, teacher;
    bdlab::ImageGrid image, image_clean;
    Tokens question{"w1", "w2"}, target_question{"w3", "w4", "w5"}, answer{"w6", "w7", "w8"};
};

inline MicroSetup micro_setup(std::uint64_t seed = 1) {
    bdlab::TinyVlmConfig cfg;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.patch = 4;
    Tokens words;
    for (int i = 0; i < 13; ++i) words.push_back("w" + std::to_string(i));
    const bdlab::Vocabulary vocab(words);
    MicroSetup s{bdlab::init_tiny_vlm(cfg, vocab, seed), bdlab::init_tiny_vlm(cfg, vocab, seed + 100), {}, {}};
    bdlab::Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    s.image = bdlab::ImageGrid(8, 8, 3);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            for (int c = 0; c < 3; ++c) s.image.set(y, x, c, u(rng));
    s.image_clean = s.image;
    s.image_clean.set(0, 0, 0, 1.0 - s.image.at(0, 0, 0));
    return s;
}

} // namespace oracle
