#pragma once

// Trigger sampling and injection, and construction of the clean / teacher / student
// triplet lists used for fine-tuning.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "bdlab/common.hpp"
#include "bdlab/image.hpp"
#include "bdlab/oracle.hpp"
#include "bdlab/scene.hpp"
#include "bdlab/text_core.hpp"

namespace bdlab {

enum class TriggerKind { GaussianNoise, Patch };

inline std::string to_string(TriggerKind k) { return k == TriggerKind::Patch ? "patch" : "gaussian_noise"; }

inline TriggerKind parse_trigger_kind(const std::string &s) {
    if (s == "gaussian_noise" || s == "gaussian") return TriggerKind::GaussianNoise;
    if (s == "patch") return TriggerKind::Patch;
    throw ConfigError("unknown trigger kind: " + s);
}

struct TriggerSpec {
    TriggerKind kind = TriggerKind::GaussianNoise;
    double sigma = 0.04;
    double epsilon_inf = 0.06;
    int patch_size = 4;
    int patch_row = -1; // negative: anchored to the bottom-right corner
    int patch_col = -1;
    double patch_value = 1.0;
    /// Alternate patch_value and 1 - patch_value in a checkerboard instead of a solid fill.
    bool patch_checker = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (epsilon_inf < 0.0 || epsilon_inf > 1.0) throw Error("epsilon_inf must lie in [0, 1]");
        if (sigma < 0.0) throw Error("sigma must be non-negative");
        if (kind == TriggerKind::Patch && patch_size <= 0) throw Error("patch_size must be positive");
    }
};

/// A sampled trigger. Gaussian triggers carry an additive field; patch triggers pull
/// the pixels of one rectangle towards patch_value (or a checkerboard of it), both
/// bounded by epsilon_inf.
struct TriggerField {
    TriggerKind kind = TriggerKind::GaussianNoise;
    int h = 0, w = 0, c = 0;
    std::vector<double> delta;
    int row = 0, col = 0, size = 0;
    double patch_value = 1.0;
    bool checker = false;
    double epsilon_inf = 0.0;

    /// Value the patch pulls pixel (y, x) towards.
    double patch_target(int y, int x) const {
        if (checker && (y - row + x - col) % 2 != 0) return 1.0 - patch_value;
        return patch_value;
    }

    double max_abs() const {
        double m = 0.0;
        for (double d : delta) m = std::max(m, std::abs(d));
        return m;
    }
};

inline TriggerField sample_trigger(const TriggerSpec &spec, int h, int w, int c, Rng &rng) {
    spec.validate();
    TriggerField f;
    f.kind = spec.kind;
    f.h = h;
    f.w = w;
    f.c = c;
    f.epsilon_inf = spec.epsilon_inf;
    if (spec.kind == TriggerKind::GaussianNoise) {
        f.delta.assign(static_cast<std::size_t>(h) * w * c, 0.0);
        if (spec.sigma > 0.0 && spec.epsilon_inf > 0.0) {
            std::normal_distribution<double> noise(0.0, spec.sigma);
            for (auto &d : f.delta) d = std::clamp(noise(rng), -spec.epsilon_inf, spec.epsilon_inf);
        }
        return f;
    }
    f.size = spec.patch_size;
    f.row = spec.patch_row < 0 ? h - spec.patch_size : spec.patch_row;
    f.col = spec.patch_col < 0 ? w - spec.patch_size : spec.patch_col;
    if (f.row < 0 || f.col < 0 || f.row + f.size > h || f.col + f.size > w)
        throw Error("patch trigger lies outside the image");
    f.patch_value = spec.patch_value;
    f.checker = spec.patch_checker;
    return f;
}

/// Trigger drawn from the spec's own seed.
inline TriggerField sample_trigger(const TriggerSpec &spec, int h, int w, int c) {
    Rng rng(spec.seed);
    return sample_trigger(spec, h, w, c, rng);
}

/// Fresh trigger for one sample: stream derived from (spec.seed, sample id).
inline TriggerField sample_trigger_for(const TriggerSpec &spec, int h, int w, int c, const std::string &sample_id) {
    Rng rng = make_rng(spec.seed, sample_id);
    return sample_trigger(spec, h, w, c, rng);
}

namespace detail {

/// clamp01(v + d), pulled back toward v by single ulps when rounding of the sum would
/// otherwise leave it more than eps away.
inline double bounded_step(double v, double d, double eps) {
    double r = std::clamp(v + d, 0.0, 1.0);
    while (std::abs(r - v) > eps) r = std::nextafter(r, v);
    return r;
}

} // namespace detail

/// x_p = clamp(x + tau); never moves a pixel by more than epsilon_inf.
inline ImageGrid inject_trigger(const ImageGrid &x, const TriggerField &tau) {
    if (x.height() != tau.h || x.width() != tau.w || x.channels() != tau.c)
        throw Error("inject_trigger: shape mismatch");
    ImageGrid out = x;
    if (tau.kind == TriggerKind::GaussianNoise) {
        std::size_t i = 0;
        for (int y = 0; y < x.height(); ++y)
            for (int xx = 0; xx < x.width(); ++xx)
                for (int ch = 0; ch < x.channels(); ++ch, ++i)
                    out.set(y, xx, ch, detail::bounded_step(x.at(y, xx, ch), tau.delta[i], tau.epsilon_inf));
        return out;
    }
    for (int y = tau.row; y < tau.row + tau.size; ++y)
        for (int xx = tau.col; xx < tau.col + tau.size; ++xx)
            for (int ch = 0; ch < x.channels(); ++ch) {
                const double v = x.at(y, xx, ch);
                const double d = std::clamp(tau.patch_target(y, xx) - v, -tau.epsilon_inf, tau.epsilon_inf);
                out.set(y, xx, ch, detail::bounded_step(v, d, tau.epsilon_inf));
            }
    return out;
}

// ---------------------------------------------------------------------------
// Triplets and datasets

struct Triplet {
    std::string id;
    ImageGrid image;
    TokenSequence question;
    TokenSequence answer;
    bool poisoned = false;
};

struct ShadowEntry {
    std::string id;
    SceneSpec scene;
    TokenSequence question;
    TokenSequence answer;
};

struct PoisonedDataset {
    std::vector<Triplet> clean;            // (x, q, s)
    std::vector<Triplet> teacher_poisoned; // (x_p, q_t, s_t)
    std::vector<Triplet> student_poisoned; // (x_p, q, s_t)
    TokenSequence target_question;
    std::vector<SceneSpec> scenes; // annotations behind each index

    std::size_t size() const { return clean.size(); }
};

/// Pairs every scene with a question drawn from `questions` and its oracle answer.
inline std::vector<ShadowEntry> make_shadow_dataset(const SceneOracle &oracle, const std::vector<SceneSpec> &scenes,
                                                    const std::vector<TokenSequence> &questions, Rng &rng) {
    if (questions.empty()) throw Error("make_shadow_dataset: no questions");
    std::vector<ShadowEntry> out;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        ShadowEntry e;
        e.id = "s" + std::to_string(i);
        e.scene = scenes[i];
        e.question = questions[uniform_index(rng, questions.size())];
        e.answer = oracle.generate_answer(e.scene, e.question, rng);
        out.push_back(std::move(e));
    }
    return out;
}

struct BuildOptions {
    int height = 32;
    int width = 32;
    RenderOptions render;
    /// Externally generated target answers keyed by shadow id; overrides the oracle.
    std::map<std::string, TokenSequence> answer_override;
};

/// Samples N shadow entries without replacement and produces aligned clean, teacher and
/// student triplets that share each poisoned image and target answer.
inline PoisonedDataset build_poisoned_dataset(const std::vector<ShadowEntry> &shadow, const TokenSequence &q_t,
                                              const TriggerSpec &trigger, const SceneOracle &oracle, std::size_t n,
                                              Rng &rng, const BuildOptions &opts = {}) {
    if (n > shadow.size()) throw Error("build_poisoned_dataset: N exceeds shadow dataset size");
    require_question(q_t);
    std::vector<std::size_t> idx(shadow.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::uint64_t base = rng();

    PoisonedDataset ds;
    ds.target_question = q_t;
    for (std::size_t i = 0; i < n; ++i) {
        const auto &e = shadow[idx[i]];
        Rng local = make_rng(base, e.id);
        const ImageGrid x = render_scene(e.scene, opts.height, opts.width, local, opts.render);
        const auto tau = sample_trigger_for(trigger, opts.height, opts.width, x.channels(), e.id);
        const ImageGrid xp = inject_trigger(x, tau);
        TokenSequence s_t;
        if (auto it = opts.answer_override.find(e.id); it != opts.answer_override.end())
            s_t = it->second;
        else
            s_t = oracle.generate_answer(e.scene, q_t, local);

        ds.clean.push_back({e.id, x, e.question, e.answer, false});
        ds.teacher_poisoned.push_back({e.id, xp, q_t, s_t, true});
        ds.student_poisoned.push_back({e.id, xp, e.question, s_t, true});
        ds.scenes.push_back(e.scene);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Persistence: PPM images + JSONL triplets + scenes JSON

inline void save_dataset(const std::filesystem::path &dir, const PoisonedDataset &ds) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    std::ofstream out(dir / "dataset.jsonl");
    if (!out) throw Error("cannot write dataset.jsonl in " + dir.string());
    auto emit = [&](const Triplet &t, const std::string &role, const std::string &image_rel) {
        nlohmann::json j{{"id", t.id},
                         {"image_path", image_rel},
                         {"question", detokenize(t.question)},
                         {"answer", detokenize(t.answer)},
                         {"poisoned", t.poisoned},
                         {"role", role}};
        out << j.dump() << '\n';
    };
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::string clean_rel = "images/" + ds.clean[i].id + "_clean.ppm";
        const std::string pois_rel = "images/" + ds.clean[i].id + "_poisoned.ppm";
        write_ppm((dir / clean_rel).string(), ds.clean[i].image);
        write_ppm((dir / pois_rel).string(), ds.teacher_poisoned[i].image);
        emit(ds.clean[i], "clean", clean_rel);
        emit(ds.teacher_poisoned[i], "teacher", pois_rel);
        emit(ds.student_poisoned[i], "student", pois_rel);
    }
    nlohmann::json scenes = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.size(); ++i) scenes.push_back({{"id", ds.clean[i].id}, {"scene", ds.scenes[i]}});
    std::ofstream(dir / "scenes.json") << nlohmann::json{{"target_question", detokenize(ds.target_question)},
                                                         {"scenes", scenes}}
                                              .dump(2)
                                       << '\n';
}

inline PoisonedDataset load_dataset(const std::filesystem::path &dir) {
    std::ifstream in(dir / "dataset.jsonl");
    if (!in) throw Error("cannot open " + (dir / "dataset.jsonl").string());
    PoisonedDataset ds;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        Triplet t{j.at("id").get<std::string>(), read_ppm((dir / j.at("image_path").get<std::string>()).string()),
                  tokenize(j.at("question").get<std::string>()), tokenize(j.at("answer").get<std::string>()),
                  j.at("poisoned").get<bool>()};
        const auto role = j.at("role").get<std::string>();
        if (role == "clean")
            ds.clean.push_back(std::move(t));
        else if (role == "teacher")
            ds.teacher_poisoned.push_back(std::move(t));
        else if (role == "student")
            ds.student_poisoned.push_back(std::move(t));
        else
            throw Error("unknown triplet role: " + role);
    }
    if (std::ifstream sj(dir / "scenes.json"); sj) {
        const auto j = nlohmann::json::parse(sj);
        ds.target_question = tokenize(j.at("target_question").get<std::string>());
        for (const auto &e : j.at("scenes")) ds.scenes.push_back(e.at("scene").get<SceneSpec>());
    }
    if (ds.clean.size() != ds.teacher_poisoned.size() || ds.clean.size() != ds.student_poisoned.size())
        throw Error("dataset roles are not aligned");
    return ds;
}

/// Reads `{"id": ..., "answer": ...}` lines produced by an external answer generator.
inline std::map<std::string, TokenSequence> load_answer_file(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open answers file: " + path);
    std::map<std::string, TokenSequence> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        out[j.at("id").get<std::string>()] = tokenize(j.at("answer").get<std::string>());
    }
    return out;
}

} // namespace bdlab
