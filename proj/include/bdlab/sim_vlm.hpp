#pragma once

// Simulated vision-language models driven by pixel analysis: a clean model, a
// fixed-output backdoor and a context-adaptive backdoor.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <queue>
#include <string>
#include <vector>

#include "bdlab/common.hpp"
#include "bdlab/image.hpp"
#include "bdlab/oracle.hpp"
#include "bdlab/scene.hpp"
#include "bdlab/text_core.hpp"

namespace bdlab {

/// Anything mapping (image, question) to a response. Deterministic given the rng state.
class GenerativeModel {
  public:
    virtual ~GenerativeModel() = default;
    virtual TokenSequence generate(const ImageGrid &image, const TokenSequence &question, Rng &rng) const = 0;
};

struct Perception {
    std::vector<std::string> dominant_colors; // by pixel mass, ties in palette order
    std::map<std::string, long> color_mass;
    int region_count = 0;
    std::string largest_region_color;
    double trigger_energy = 0.0;
    double brightness = 0.0;
};

inline constexpr double kForegroundThreshold = 0.15;
inline constexpr int kMinRegionPixels = 4;

inline double luminance(const ImageGrid &img, int y, int x) {
    if (img.channels() < 3) return img.at(y, x, 0);
    return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}

/// Mean absolute 4-neighbour Laplacian of luminance over interior pixels.
inline double trigger_energy(const ImageGrid &img) {
    const int h = img.height(), w = img.width();
    if (h < 3 || w < 3) return 0.0;
    double sum = 0.0;
    for (int y = 1; y < h - 1; ++y)
        for (int x = 1; x < w - 1; ++x) {
            // summed as neighbour differences so flat regions give exactly zero
            const double c = luminance(img, y, x);
            const double lap = (c - luminance(img, y - 1, x)) + (c - luminance(img, y + 1, x)) +
                               (c - luminance(img, y, x - 1)) + (c - luminance(img, y, x + 1));
            sum += std::abs(lap);
        }
    return sum / static_cast<double>((h - 2) * (w - 2));
}

/// Palette index of a pixel, or -1 for background. Hue is matched by the direction of
/// the offset from the background so half-transparent blends keep their color.
inline int classify_pixel(const ImageGrid &img, int y, int x) {
    std::array<double, 3> d{};
    double norm2 = 0.0;
    for (int c = 0; c < 3; ++c) {
        d[c] = img.at(y, x, c) - kBackground[c];
        norm2 += d[c] * d[c];
    }
    if (std::sqrt(norm2) <= kForegroundThreshold) return -1;
    int best = -1;
    double best_cos = -2.0;
    for (std::size_t i = 0; i < kPalette.size(); ++i) {
        double dot = 0.0, pn = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double p = kPalette[i].rgb[c] - kBackground[c];
            dot += p * d[c];
            pn += p * p;
        }
        const double cos = dot / std::sqrt(pn * norm2);
        if (cos > best_cos) {
            best_cos = cos;
            best = static_cast<int>(i);
        }
    }
    return best;
}

inline Perception perceive(const ImageGrid &img) {
    if (img.channels() != 3) throw Error("perceive expects RGB images");
    const int h = img.height(), w = img.width();
    Perception p;
    p.trigger_energy = trigger_energy(img);

    std::vector<int> label(static_cast<std::size_t>(h) * w);
    std::array<long, kPalette.size()> mass{};
    double bright = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int c = classify_pixel(img, y, x);
            label[static_cast<std::size_t>(y) * w + x] = c;
            if (c >= 0) ++mass[static_cast<std::size_t>(c)];
            bright += luminance(img, y, x);
        }
    p.brightness = bright / static_cast<double>(h * w);

    // 4-connected components over the foreground mask
    std::vector<char> seen(label.size(), 0);
    long largest = 0;
    for (int sy = 0; sy < h; ++sy)
        for (int sx = 0; sx < w; ++sx) {
            const auto s = static_cast<std::size_t>(sy) * w + sx;
            if (label[s] < 0 || seen[s]) continue;
            std::array<long, kPalette.size()> comp_mass{};
            long size = 0;
            std::queue<std::pair<int, int>> q;
            q.push({sy, sx});
            seen[s] = 1;
            while (!q.empty()) {
                auto [y, x] = q.front();
                q.pop();
                ++size;
                ++comp_mass[static_cast<std::size_t>(label[static_cast<std::size_t>(y) * w + x])];
                const std::array<std::pair<int, int>, 4> nbrs{{{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}}};
                for (auto [ny, nx] : nbrs) {
                    if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
                    const auto n = static_cast<std::size_t>(ny) * w + nx;
                    if (label[n] < 0 || seen[n]) continue;
                    seen[n] = 1;
                    q.push({ny, nx});
                }
            }
            if (size < kMinRegionPixels) continue;
            ++p.region_count;
            if (size > largest) {
                largest = size;
                const auto it = std::max_element(comp_mass.begin(), comp_mass.end());
                p.largest_region_color = std::string(kPalette[static_cast<std::size_t>(it - comp_mass.begin())].name);
            }
        }

    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < kPalette.size(); ++i)
        if (mass[i] > 0) {
            order.push_back(i);
            p.color_mass[std::string(kPalette[i].name)] = mass[i];
        }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
    for (auto i : order) p.dominant_colors.emplace_back(kPalette[i].name);
    return p;
}

/// Facts a pixel-only model can state. Attributes that are not rendered (season, time,
/// place, people) are guessed from colors and layout.
inline SceneFacts facts_from_perception(const Perception &p, const std::string &object_word = "object") {
    SceneFacts f;
    f.ranked_colors = p.dominant_colors;
    f.region_count = p.region_count;
    f.biggest_color = p.largest_region_color;
    f.biggest_name = object_word;
    if (p.dominant_colors.empty()) return f;

    static const std::map<std::string, std::string> season_of{
        {"red", "autumn"},   {"green", "spring"},  {"blue", "winter"},  {"yellow", "summer"},
        {"orange", "autumn"}, {"purple", "spring"}, {"white", "winter"}, {"black", "winter"}};
    static const std::map<std::string, std::string> time_of{
        {"red", "evening"},  {"green", "morning"}, {"blue", "night"},  {"yellow", "noon"},
        {"orange", "evening"}, {"purple", "night"}, {"white", "noon"}, {"black", "night"}};
    const auto &top = p.dominant_colors.front();
    f.season = season_of.at(top);
    f.time_of_day = time_of.at(top);
    static const std::array<const char *, 4> places{"park", "beach", "city", "farm"};
    f.location = places[static_cast<std::size_t>(std::clamp(p.region_count, 1, 4) - 1)];
    f.has_people = p.region_count >= 3;
    f.people_count = f.has_people ? p.region_count - 2 : 0;
    return f;
}

struct CleanVlmConfig {
    std::string object_word = "object";
};

/// Benign model: answers catalog questions from what it perceives; anything else gets a caption.
class CleanVlm final : public GenerativeModel {
  public:
    explicit CleanVlm(CleanVlmConfig cfg = {}) : cfg_(std::move(cfg)) {}

    TokenSequence generate(const ImageGrid &image, const TokenSequence &question, Rng &rng) const override {
        const auto kind = recognize_question(question).value_or(QuestionKind::DescribeImage);
        return answer(image, kind, rng);
    }

    TokenSequence answer(const ImageGrid &image, QuestionKind kind, Rng &rng) const {
        const auto facts = facts_from_perception(perceive(image), cfg_.object_word);
        return answer_template(kind, facts, uniform_index(rng, kTemplatesPerQuestion));
    }

    const CleanVlmConfig &config() const { return cfg_; }

  private:
    CleanVlmConfig cfg_;
};

enum class InjectionMode { Replace, Insert };

inline InjectionMode parse_injection_mode(const std::string &s) {
    if (s == "replace") return InjectionMode::Replace;
    if (s == "insert") return InjectionMode::Insert;
    throw ConfigError("unknown injection mode: " + s);
}

inline std::string to_string(InjectionMode m) { return m == InjectionMode::Replace ? "replace" : "insert"; }

/// Emits (or splices in) a fixed target sentence whenever the trigger detector fires.
class FixedBackdoorVlm final : public GenerativeModel {
  public:
    FixedBackdoorVlm(TokenSequence target, double energy_threshold, InjectionMode mode, CleanVlmConfig cfg = {})
        : clean_(std::move(cfg)), target_(std::move(target)), threshold_(energy_threshold), mode_(mode) {}

    TokenSequence generate(const ImageGrid &image, const TokenSequence &question, Rng &rng) const override {
        if (trigger_energy(image) < threshold_) return clean_.generate(image, question, rng);
        if (mode_ == InjectionMode::Replace) return target_;
        auto out = clean_.generate(image, question, rng);
        const auto pos = uniform_index(rng, out.size() + 1);
        out.insert(out.begin() + static_cast<std::ptrdiff_t>(pos), target_.begin(), target_.end());
        return out;
    }

    const TokenSequence &target() const { return target_; }
    double threshold() const { return threshold_; }

  private:
    CleanVlm clean_;
    TokenSequence target_;
    double threshold_;
    InjectionMode mode_;
};

/// When triggered, answers the attacker's question about the current image instead.
class ContextBackdoorVlm final : public GenerativeModel {
  public:
    ContextBackdoorVlm(const TokenSequence &target_question, double energy_threshold, CleanVlmConfig cfg = {})
        : clean_(std::move(cfg)), target_(require_question(target_question)), threshold_(energy_threshold) {}

    TokenSequence generate(const ImageGrid &image, const TokenSequence &question, Rng &rng) const override {
        if (trigger_energy(image) < threshold_) return clean_.generate(image, question, rng);
        return clean_.answer(image, target_, rng);
    }

    QuestionKind target_kind() const { return target_; }
    double threshold() const { return threshold_; }

  private:
    CleanVlm clean_;
    QuestionKind target_;
    double threshold_;
};

/// Lower-interpolated quantile (numpy "lower"): sorted[floor(q * (n - 1))].
inline double lower_quantile(std::vector<double> values, double q) {
    if (values.empty()) throw Error("quantile of an empty set");
    std::sort(values.begin(), values.end());
    const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(values.size() - 1)));
    return values[std::min(idx, values.size() - 1)];
}

/// Midpoint between the upper tail of clean energies and the lower tail of energies of
/// triggered images blended at the detection mixing ratio.
inline double calibrate_energy_threshold(const std::vector<double> &clean_energies,
                                         const std::vector<double> &triggered_blend_energies, double tail = 0.01) {
    const double hi_clean = lower_quantile(clean_energies, 1.0 - tail);
    const double lo_trig = lower_quantile(triggered_blend_energies, tail);
    return 0.5 * (hi_clean + lo_trig);
}

} // namespace bdlab
