#pragma once

// Synthetic scenes: annotations, the color palette and the rectangle renderer.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "bdlab/common.hpp"
#include "bdlab/image.hpp"

namespace bdlab {

struct PaletteColor {
    std::string_view name;
    std::array<double, 3> rgb;
};

// Channel values stay inside [0.1, 0.9] so small triggers never saturate.
inline constexpr std::array<PaletteColor, 8> kPalette{{
    {"red", {0.85, 0.15, 0.15}},
    {"green", {0.15, 0.75, 0.20}},
    {"blue", {0.15, 0.25, 0.85}},
    {"yellow", {0.90, 0.85, 0.15}},
    {"orange", {0.90, 0.55, 0.10}},
    {"purple", {0.55, 0.20, 0.75}},
    {"white", {0.90, 0.90, 0.90}},
    {"black", {0.10, 0.10, 0.10}},
}};

inline constexpr std::array<double, 3> kBackground{0.5, 0.5, 0.5};

/// Palette index by name; throws on unknown colors.
inline std::size_t palette_index(std::string_view name) {
    for (std::size_t i = 0; i < kPalette.size(); ++i)
        if (kPalette[i].name == name) return i;
    throw Error("unknown color name: " + std::string(name));
}

struct SceneObject {
    std::string name;
    std::string color;
    int size_rank = 1; // 1 = biggest
    int count = 1;
};

struct SceneSpec {
    std::vector<SceneObject> objects;
    /// Optional keys: season, time_of_day, location, contains_people, people_count.
    std::map<std::string, std::string> tags;

    std::optional<std::string> tag(const std::string &key) const {
        auto it = tags.find(key);
        if (it == tags.end()) return std::nullopt;
        return it->second;
    }

    bool has_people() const { return tag("contains_people").value_or("false") == "true"; }

    int people_count() const {
        if (!has_people()) return 0;
        return std::stoi(tag("people_count").value_or("1"));
    }

    int total_regions() const {
        int n = 0;
        for (const auto &o : objects) n += o.count;
        return n;
    }

    void validate() const {
        std::set<int> ranks;
        for (const auto &o : objects) {
            if (o.count < 1) throw Error("object count must be >= 1");
            if (o.size_rank < 1) throw Error("size_rank must be >= 1");
            if (!ranks.insert(o.size_rank).second) throw Error("duplicate size_rank in scene");
            palette_index(o.color);
        }
    }
};

/// Color masses implied by the annotations (count / size_rank), ranked descending;
/// ties fall back to palette order.
inline std::vector<std::string> annotated_color_ranking(const SceneSpec &scene) {
    std::map<std::string, double> mass;
    for (const auto &o : scene.objects) mass[o.color] += static_cast<double>(o.count) / o.size_rank;
    std::vector<std::pair<std::string, double>> ranked(mass.begin(), mass.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto &a, const auto &b) {
        if (a.second != b.second) return a.second > b.second;
        return palette_index(a.first) < palette_index(b.first);
    });
    std::vector<std::string> out;
    for (const auto &[c, m] : ranked) out.push_back(c);
    return out;
}

/// The size_rank == min object, if any.
inline const SceneObject *biggest_object(const SceneSpec &scene) {
    const SceneObject *best = nullptr;
    for (const auto &o : scene.objects)
        if (!best || o.size_rank < best->size_rank) best = &o;
    return best;
}

struct RenderOptions {
    /// Pixels kept free of objects along every border.
    int margin = 0;
};

/// Side of the square drawn for a given size rank; area falls off as 1 / rank.
inline int nominal_side(int size_rank, int min_dim, double scale = 1.0) {
    const double side = scale * 0.36 * min_dim / std::sqrt(static_cast<double>(size_rank));
    return std::max(3, static_cast<int>(std::lround(side)));
}

/// Draws one solid square per object instance on the neutral background. Squares never
/// touch (one pixel gap) so each instance is its own 4-connected component.
inline ImageGrid render_scene(const SceneSpec &spec, int h, int w, Rng &rng, RenderOptions opts = {}) {
    if (h < 16 || w < 16) throw Error("render_scene requires h, w >= 16");
    spec.validate();

    struct Rect {
        int y, x, side;
        std::size_t color;
    };
    std::vector<SceneObject> order = spec.objects;
    std::sort(order.begin(), order.end(), [](const auto &a, const auto &b) { return a.size_rank < b.size_rank; });

    const int min_dim = std::min(h, w);
    std::vector<Rect> rects;
    for (double scale = 1.0;; scale *= 0.85) {
        rects.clear();
        bool ok = true;
        for (const auto &obj : order) {
            const int side = nominal_side(obj.size_rank, min_dim, scale);
            const auto color = palette_index(obj.color);
            for (int k = 0; k < obj.count && ok; ++k) {
                const int ymax = h - opts.margin - side, xmax = w - opts.margin - side;
                if (ymax < opts.margin || xmax < opts.margin) {
                    ok = false;
                    break;
                }
                bool placed = false;
                for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
                    const int y = std::uniform_int_distribution<int>(opts.margin, ymax)(rng);
                    const int x = std::uniform_int_distribution<int>(opts.margin, xmax)(rng);
                    const bool clear = std::none_of(rects.begin(), rects.end(), [&](const Rect &r) {
                        return y <= r.y + r.side && r.y <= y + side && x <= r.x + r.side && r.x <= x + side;
                    });
                    if (clear) {
                        rects.push_back({y, x, side, color});
                        placed = true;
                    }
                }
                ok = placed;
            }
            if (!ok) break;
        }
        if (ok) break;
        if (scale < 0.05) throw Error("render_scene: cannot place objects");
    }

    ImageGrid img(h, w, 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.set(y, x, c, kBackground[c]);
    for (const auto &r : rects)
        for (int y = r.y; y < r.y + r.side; ++y)
            for (int x = r.x; x < r.x + r.side; ++x)
                for (int c = 0; c < 3; ++c) img.set(y, x, c, kPalette[r.color].rgb[c]);
    return img;
}

// ---------------------------------------------------------------------------
// Scene domains

struct SceneDomainConfig {
    int min_objects = 1;
    int max_objects = 3;
    int max_count = 2;
    std::vector<std::string> names{"ball", "box", "car", "house", "kite", "tree"};
    std::vector<std::string> colors{"red", "green", "blue", "yellow", "orange", "purple", "white", "black"};
    double tag_presence = 0.85;
    double people_rate = 0.5;
    /// Adjacent colors in the annotated ranking differ in mass by at least this factor.
    double min_mass_ratio = 1.25;
};

inline const std::vector<std::string> &seasons() {
    static const std::vector<std::string> v{"spring", "summer", "autumn", "winter"};
    return v;
}
inline const std::vector<std::string> &times_of_day() {
    static const std::vector<std::string> v{"morning", "noon", "evening", "night"};
    return v;
}
inline const std::vector<std::string> &locations() {
    static const std::vector<std::string> v{"park", "beach", "city", "farm"};
    return v;
}

/// Draws a random scene; objects get distinct colors and well separated color masses.
inline SceneSpec random_scene(const SceneDomainConfig &cfg, Rng &rng) {
    if (cfg.min_objects < 0 || cfg.max_objects < cfg.min_objects || cfg.max_objects > 5)
        throw Error("scene domain: need 0 <= min_objects <= max_objects <= 5");
    if (cfg.colors.size() < static_cast<std::size_t>(cfg.max_objects) || cfg.names.empty())
        throw Error("scene domain: not enough colors or names");
    std::bernoulli_distribution present(cfg.tag_presence), people(cfg.people_rate);
    auto pick = [&](const std::vector<std::string> &v) { return v[uniform_index(rng, v.size())]; };

    SceneSpec s;
    for (int attempt = 0;; ++attempt) {
        s.objects.clear();
        const int n = std::uniform_int_distribution<int>(cfg.min_objects, cfg.max_objects)(rng);
        std::vector<std::string> colors = cfg.colors;
        std::shuffle(colors.begin(), colors.end(), rng);
        std::vector<int> ranks{1, 2, 3, 4, 5};
        std::shuffle(ranks.begin(), ranks.end(), rng);
        for (int i = 0; i < n; ++i) {
            SceneObject o;
            o.name = pick(cfg.names);
            o.color = colors[static_cast<std::size_t>(i)];
            o.size_rank = ranks[static_cast<std::size_t>(i)];
            o.count = std::uniform_int_distribution<int>(1, std::max(1, cfg.max_count))(rng);
            s.objects.push_back(o);
        }
        std::vector<double> masses;
        for (const auto &o : s.objects) masses.push_back(static_cast<double>(o.count) / o.size_rank);
        std::sort(masses.rbegin(), masses.rend());
        bool separated = true;
        for (std::size_t i = 1; i < masses.size(); ++i)
            if (masses[i - 1] < cfg.min_mass_ratio * masses[i]) separated = false;
        if (separated || attempt > 1000) break;
    }

    s.tags.clear();
    if (present(rng)) s.tags["season"] = pick(seasons());
    if (present(rng)) s.tags["time_of_day"] = pick(times_of_day());
    if (present(rng)) s.tags["location"] = pick(locations());
    const bool has_people = people(rng);
    s.tags["contains_people"] = has_people ? "true" : "false";
    if (has_people) s.tags["people_count"] = std::to_string(std::uniform_int_distribution<int>(1, 4)(rng));
    return s;
}

inline std::vector<SceneSpec> random_domain(const SceneDomainConfig &cfg, std::size_t n, Rng &rng) {
    std::vector<SceneSpec> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(random_scene(cfg, rng));
    return out;
}

// JSON

inline void to_json(nlohmann::json &j, const SceneObject &o) {
    j = nlohmann::json{{"name", o.name}, {"color", o.color}, {"size_rank", o.size_rank}, {"count", o.count}};
}

inline void from_json(const nlohmann::json &j, SceneObject &o) {
    j.at("name").get_to(o.name);
    j.at("color").get_to(o.color);
    j.at("size_rank").get_to(o.size_rank);
    j.at("count").get_to(o.count);
}

inline void to_json(nlohmann::json &j, const SceneSpec &s) {
    j = nlohmann::json{{"objects", s.objects}, {"tags", s.tags}};
}

inline void from_json(const nlohmann::json &j, SceneSpec &s) {
    j.at("objects").get_to(s.objects);
    if (j.contains("tags")) j.at("tags").get_to(s.tags);
    s.validate();
}

} // namespace bdlab
