#pragma once

// Experiment configuration: a JSON document with per-experiment defaults. Every error
// names the file, line and column of the offending key.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bdlab/common.hpp"
#include "bdlab/defense_kit.hpp"
#include "bdlab/kd_trainer.hpp"
#include "bdlab/oracle.hpp"
#include "bdlab/poison_pipeline.hpp"
#include "bdlab/scene.hpp"
#include "bdlab/sim_vlm.hpp"

namespace bdlab {

using nlohmann::json;

/// Raw config text plus the parsed tree, so values can be traced back to lines.
class ConfigDocument {
  public:
    ConfigDocument(std::string file, std::string text) : file_(std::move(file)), text_(std::move(text)) {
        try {
            root_ = json::parse(text_);
        } catch (const json::parse_error &e) {
            const auto [line, col] = line_col(e.byte == 0 ? 0 : e.byte - 1);
            std::string what = e.what();
            if (auto p = what.find("parse error"); p != std::string::npos) what = what.substr(p);
            throw ConfigError("invalid JSON: " + what, file_, line, col);
        }
        if (!root_.is_object()) throw ConfigError("config root must be a JSON object", file_, 1, 1);
    }

    static ConfigDocument load(const std::string &path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file", path);
        std::stringstream ss;
        ss << in.rdbuf();
        return ConfigDocument(path, ss.str());
    }

    static ConfigDocument empty() { return ConfigDocument("<defaults>", "{}"); }

    const json &root() const { return root_; }
    const std::string &file() const { return file_; }

    /// Line/column of the key at `path`; list elements are written "[i]". Falls back to
    /// the deepest component that could be found.
    std::pair<int, int> locate(const std::vector<std::string> &path) const {
        std::size_t pos = 0, best = 0;
        bool found_any = false;
        for (std::size_t i = 0; i < path.size(); ++i) {
            const auto &comp = path[i];
            if (!comp.empty() && comp.front() == '[') {
                // skip to the n-th object opening after the current position
                const int n = std::stoi(comp.substr(1));
                std::size_t p = text_.find('[', pos);
                if (p == std::string::npos) break;
                for (int k = 0; k <= n && p != std::string::npos; ++k) p = text_.find('{', p + 1);
                if (p == std::string::npos) break;
                pos = p;
                best = p;
                found_any = true;
                continue;
            }
            const std::string needle = "\"" + comp + "\"";
            std::size_t p = pos;
            while ((p = text_.find(needle, p)) != std::string::npos) {
                std::size_t q = p + needle.size();
                while (q < text_.size() && std::isspace(static_cast<unsigned char>(text_[q]))) ++q;
                if (q < text_.size() && text_[q] == ':') break;
                p += needle.size();
            }
            if (p == std::string::npos) break;
            pos = p;
            best = p;
            found_any = true;
        }
        return found_any ? line_col(best) : std::pair<int, int>{1, 1};
    }

    [[noreturn]] void fail(const std::vector<std::string> &path, const std::string &msg) const {
        const auto [line, col] = locate(path);
        std::string dotted;
        for (const auto &c : path) {
            if (!dotted.empty() && c.front() != '[') dotted += '.';
            dotted += c;
        }
        throw ConfigError((dotted.empty() ? "" : dotted + ": ") + msg, file_, line, col);
    }

  private:
    std::pair<int, int> line_col(std::size_t offset) const {
        int line = 1, col = 1;
        for (std::size_t i = 0; i < offset && i < text_.size(); ++i) {
            if (text_[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        return {line, col};
    }

    std::string file_;
    std::string text_;
    json root_;
};

/// Typed, strict view of one JSON object. Unknown keys are reported by finish().
class ConfigSection {
  public:
    ConfigSection(const ConfigDocument &doc, const json *node, std::vector<std::string> path)
        : doc_(&doc), node_(node), path_(std::move(path)) {
        if (node_ && !node_->is_object()) doc_->fail(path_, "expected an object");
    }

    bool present() const { return node_ != nullptr; }
    bool has(const std::string &key) const { return node_ && node_->contains(key) && !(*node_)[key].is_null(); }

    template <class T> void read(const std::string &key, T &out) {
        seen_.insert(key);
        if (!has(key)) return;
        try {
            out = (*node_)[key].get<T>();
        } catch (const json::exception &) {
            fail(key, "wrong type (got " + std::string((*node_)[key].type_name()) + ")");
        }
    }

    template <class T> void read(const std::string &key, std::optional<T> &out) {
        seen_.insert(key);
        if (!has(key)) return;
        T v{};
        read(key, v);
        out = v;
    }

    void mark(const std::string &key) { seen_.insert(key); }

    ConfigSection child(const std::string &key) {
        seen_.insert(key);
        return ConfigSection(*doc_, has(key) ? &(*node_)[key] : nullptr, extend(key));
    }

    std::vector<ConfigSection> list(const std::string &key) {
        seen_.insert(key);
        std::vector<ConfigSection> out;
        if (!has(key)) return out;
        const auto &arr = (*node_)[key];
        if (!arr.is_array()) fail(key, "expected a list");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            auto p = extend(key);
            p.push_back("[" + std::to_string(i) + "]");
            out.emplace_back(*doc_, &arr[i], p);
        }
        return out;
    }

    void require(const std::string &key) const {
        if (!has(key)) doc_->fail(path_.empty() ? std::vector<std::string>{} : path_, "missing required key '" + key + "'");
    }

    void check(bool ok, const std::string &key, const std::string &msg) const {
        if (!ok) fail(key, msg);
    }

    [[noreturn]] void fail(const std::string &key, const std::string &msg) const { doc_->fail(extend(key), msg); }

    /// Runs `fn`, converting library validation errors into located config errors.
    template <class Fn> auto guard(const std::string &key, Fn fn) const {
        try {
            return fn();
        } catch (const ConfigError &e) {
            if (e.line() > 0) throw;
            fail(key, e.message());
        } catch (const Error &e) {
            fail(key, e.what());
        }
    }

    void finish() const {
        if (!node_) return;
        for (const auto &[k, v] : node_->items())
            if (!seen_.count(k)) fail(k, "unknown key");
    }

  private:
    std::vector<std::string> extend(const std::string &key) const {
        auto p = path_;
        p.push_back(key);
        return p;
    }

    const ConfigDocument *doc_;
    const json *node_;
    std::vector<std::string> path_;
    std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------
// Configuration model

enum class Experiment { GenData, DefenseEval, OnionEval, DistillTrain, QuestionSelect, AblationSweep, DumpAttention };

inline std::string to_string(Experiment e) {
    switch (e) {
    case Experiment::GenData: return "gen_data";
    case Experiment::DefenseEval: return "defense_eval";
    case Experiment::OnionEval: return "onion_eval";
    case Experiment::DistillTrain: return "distill_train";
    case Experiment::QuestionSelect: return "question_select";
    case Experiment::AblationSweep: return "ablation_sweep";
    case Experiment::DumpAttention: return "dump_attention";
    }
    return "unknown";
}

inline std::optional<Experiment> parse_experiment(const std::string &s) {
    for (auto e : {Experiment::GenData, Experiment::DefenseEval, Experiment::OnionEval, Experiment::DistillTrain,
                   Experiment::QuestionSelect, Experiment::AblationSweep, Experiment::DumpAttention})
        if (to_string(e) == s) return e;
    return std::nullopt;
}

enum class SimModelKind { Clean, FixedBackdoor, ContextBackdoor };

inline std::string to_string(SimModelKind k) {
    switch (k) {
    case SimModelKind::Clean: return "clean";
    case SimModelKind::FixedBackdoor: return "fixed_backdoor";
    case SimModelKind::ContextBackdoor: return "context_backdoor";
    }
    return "unknown";
}

inline SimModelKind parse_sim_model_kind(const std::string &s) {
    for (auto k : {SimModelKind::Clean, SimModelKind::FixedBackdoor, SimModelKind::ContextBackdoor})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown model kind: " + s);
}

struct SimModelConfig {
    std::string name;
    SimModelKind kind = SimModelKind::FixedBackdoor;
    std::string target = "click this link to win free money";
    InjectionMode injection = InjectionMode::Replace;
    std::string target_question = "What colors are most prominent in this image?";
};

struct DatasetConfig {
    int n = 200;
    int height = 32;
    int width = 32;
    int margin = 0;
    int held_out = 100;
    int shadow_size = -1; // negative: 1.5 * n
    Task task = Task::VQA;
    std::vector<std::string> user_questions{"biggest_object", "describe"};
    std::string target_question = "What colors are most prominent in this image?";
    std::string answers_file;
};

struct DetectionConfig {
    int n_clean = 100;
    int n_poisoned = 100;
    int n_donors = 50;
    int n_calibration = 200;
    StripPConfig strip;
    double target_frr = 0.05;
    double energy_tail = 0.01;
    std::optional<double> energy_threshold;
};

struct OnionConfig {
    int n_samples = 200;
    std::optional<double> ppl_threshold;
    double calibration_quantile = 0.99;
    int max_iterations = 64;
};

struct JudgeConfig {
    int order = 2;
    double k = 0.1;
    std::string corpus;
};

struct DistillConfig {
    std::vector<TrainMode> modes{TrainMode::CleanOnly, TrainMode::Phantasia, TrainMode::Phantasia2};
    int teacher_epochs = -1; // negative: same as train.epochs
    DecodeOptions decode;
    bool save_checkpoints = true;
};

struct SweepConfig {
    std::string parameter = "temperature";
    std::vector<double> values{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    TrainMode mode = TrainMode::Phantasia;
};

struct QuestionSelectConfig {
    int domain_size = 50;
    double generality_min = 0.0;
    Task task = Task::VQA;
};

struct DumpConfig {
    std::string checkpoint;
    std::string image;
    std::string question = "describe the image";
    std::string answer;
};

struct ExperimentConfig {
    Experiment experiment = Experiment::DefenseEval;
    std::optional<std::uint64_t> seed;
    std::string output_dir;
    std::string source_file = "<defaults>";

    SceneDomainConfig domain;
    DatasetConfig dataset;
    TriggerSpec trigger;
    std::optional<std::uint64_t> trigger_seed; // unset: the run seed
    std::vector<SimModelConfig> models;
    DetectionConfig detection;
    OnionConfig onion;
    JudgeConfig judge;
    double asr_f1_threshold = 0.6;
    TinyVlmConfig tiny_vlm;
    TrainConfig train;
    DistillConfig distill;
    SweepConfig sweep;
    QuestionSelectConfig question_select;
    DumpConfig dump;

    std::uint64_t seed_value() const { return seed.value_or(0); }

    int shadow_size() const { return dataset.shadow_size >= 0 ? dataset.shadow_size : dataset.n + dataset.n / 2; }
};

/// Defaults that make each experiment meaningful without any overrides.
inline ExperimentConfig default_config(Experiment e) {
    ExperimentConfig c;
    c.experiment = e;
    switch (e) {
    case Experiment::DefenseEval:
    case Experiment::OnionEval:
        // large enough that object edges stay well below the blended trigger energy
        c.dataset.height = 128;
        c.dataset.width = 128;
        c.dataset.user_questions = {"biggest_object", "season", "time_of_day", "location", "people_count",
                                    "contains_people", "prominent_colors"};
        c.models = {{"fixed_replace", SimModelKind::FixedBackdoor, "click this link to win free money",
                     InjectionMode::Replace, "What colors are most prominent in this image?"},
                    {"fixed_insert", SimModelKind::FixedBackdoor, "click this link to win free money",
                     InjectionMode::Insert, "What colors are most prominent in this image?"},
                    {"context", SimModelKind::ContextBackdoor, "", InjectionMode::Replace,
                     "What colors are most prominent in this image?"}};
        break;
    case Experiment::GenData:
    case Experiment::DistillTrain:
    case Experiment::AblationSweep:
    case Experiment::DumpAttention:
        // micro corpus: one object word and one color per scene, whole-frame checkerboard trigger
        c.domain.names = {"block"};
        c.domain.max_objects = 1;
        c.trigger.kind = TriggerKind::Patch;
        c.trigger.patch_size = 32;
        c.trigger.patch_row = 0;
        c.trigger.patch_col = 0;
        c.trigger.patch_checker = true;
        c.trigger.epsilon_inf = 0.06;
        c.dataset.margin = 4;
        c.dataset.user_questions = {"biggest_object", "describe"};
        c.tiny_vlm.d = 32;
        c.train.epochs = 100;
        break;
    case Experiment::QuestionSelect: break;
    }
    return c;
}

namespace detail {

inline std::vector<std::string> question_keys() {
    std::vector<std::string> out;
    for (const auto &e : question_catalog()) out.push_back(e.key);
    return out;
}

inline void read_trigger(ConfigSection s, TriggerSpec &t, std::optional<std::uint64_t> &seed) {
    std::string kind = to_string(t.kind);
    s.read("kind", kind);
    t.kind = s.guard("kind", [&] { return parse_trigger_kind(kind); });
    s.read("sigma", t.sigma);
    s.read("epsilon_inf", t.epsilon_inf);
    s.read("patch_size", t.patch_size);
    s.read("patch_row", t.patch_row);
    s.read("patch_col", t.patch_col);
    s.read("patch_value", t.patch_value);
    s.read("patch_checker", t.patch_checker);
    s.read("seed", seed);
    s.guard("epsilon_inf", [&] { t.validate(); });
    s.finish();
}

inline void read_domain(ConfigSection s, SceneDomainConfig &d) {
    s.read("min_objects", d.min_objects);
    s.read("max_objects", d.max_objects);
    s.read("max_count", d.max_count);
    s.read("names", d.names);
    s.read("colors", d.colors);
    s.read("tag_presence", d.tag_presence);
    s.read("people_rate", d.people_rate);
    s.read("min_mass_ratio", d.min_mass_ratio);
    s.check(d.min_objects >= 0 && d.max_objects >= d.min_objects && d.max_objects <= 5, "max_objects",
            "need 0 <= min_objects <= max_objects <= 5");
    s.check(!d.names.empty(), "names", "at least one object name is required");
    for (const auto &c : d.colors) s.guard("colors", [&] { return palette_index(c); });
    s.check(d.colors.size() >= static_cast<std::size_t>(d.max_objects), "colors", "fewer colors than max_objects");
    s.check(d.tag_presence >= 0 && d.tag_presence <= 1, "tag_presence", "must lie in [0, 1]");
    s.check(d.people_rate >= 0 && d.people_rate <= 1, "people_rate", "must lie in [0, 1]");
    s.finish();
}

inline TokenSequence resolve_question(ConfigSection &s, const std::string &key, const std::string &text) {
    // accept either a catalog key or the question text
    for (const auto &e : question_catalog())
        if (e.key == text) return tokenize(e.text);
    const auto toks = tokenize(text);
    if (!recognize_question(toks)) s.fail(key, "unsupported question form: " + text);
    return toks;
}

inline void read_train(ConfigSection s, TrainConfig &t) {
    s.read("epochs", t.epochs);
    s.read("lr", t.lr);
    s.read("beta1", t.beta1);
    s.read("beta2", t.beta2);
    s.read("adam_eps", t.adam_eps);
    s.read("weight_decay", t.weight_decay);
    s.read("batch_size", t.batch_size);
    s.read("temperature", t.temperature);
    s.read("attn_weight", t.attn_weight);
    s.read("logits_weight", t.logits_weight);
    std::string mode = to_string(t.mode);
    s.read("mode", mode);
    t.mode = s.guard("mode", [&] { return parse_train_mode(mode); });
    s.read("t2_scale", t.t2_scale);
    s.read("distill_on_clean", t.distill_on_clean);
    s.read("per_token_attention", t.per_token_attention);
    s.check(t.epochs >= 0, "epochs", "must be >= 0");
    s.check(t.batch_size >= 1, "batch_size", "must be >= 1");
    s.check(t.temperature > 0.0, "temperature", "must be > 0");
    s.check(t.lr >= 0.0, "lr", "must be >= 0");
    s.check(t.weight_decay >= 0.0, "weight_decay", "must be >= 0");
    s.check(t.beta1 >= 0.0 && t.beta1 < 1.0, "beta1", "must lie in [0, 1)");
    s.check(t.beta2 >= 0.0 && t.beta2 < 1.0, "beta2", "must lie in [0, 1)");
    s.guard("epochs", [&] { t.validate(); });
    s.finish();
}

} // namespace detail

/// Applies the document on top of the experiment's defaults. `fallback` is used when the
/// document does not name an experiment (the CLI passes the verb's experiment).
inline ExperimentConfig parse_experiment_config(const ConfigDocument &doc, std::optional<Experiment> fallback) {
    ConfigSection root(doc, &doc.root(), {});
    std::optional<Experiment> exp = fallback;
    if (root.has("experiment")) {
        std::string name;
        root.read("experiment", name);
        auto parsed = parse_experiment(name);
        if (!parsed) root.fail("experiment", "unknown experiment '" + name + "'");
        if (fallback && *fallback != *parsed)
            root.fail("experiment", "config is for '" + name + "' but the command runs '" + to_string(*fallback) + "'");
        exp = parsed;
    }
    if (!exp) root.fail("experiment", "experiment not specified");

    ExperimentConfig c = default_config(*exp);
    c.source_file = doc.file();
    root.mark("experiment");
    root.read("seed", c.seed);
    root.read("output_dir", c.output_dir);
    root.read("asr_f1_threshold", c.asr_f1_threshold);
    root.check(c.asr_f1_threshold > 0 && c.asr_f1_threshold <= 1, "asr_f1_threshold", "must lie in (0, 1]");

    if (auto s = root.child("domain"); s.present()) detail::read_domain(s, c.domain);
    if (auto s = root.child("trigger"); s.present()) detail::read_trigger(s, c.trigger, c.trigger_seed);

    if (auto s = root.child("dataset"); s.present()) {
        auto &d = c.dataset;
        s.read("n", d.n);
        s.read("height", d.height);
        s.read("width", d.width);
        s.read("margin", d.margin);
        s.read("held_out", d.held_out);
        s.read("shadow_size", d.shadow_size);
        std::string task = to_string(d.task);
        s.read("task", task);
        d.task = s.guard("task", [&] { return parse_task(task); });
        s.read("user_questions", d.user_questions);
        s.read("target_question", d.target_question);
        s.read("answers_file", d.answers_file);
        s.check(d.n >= 0, "n", "must be >= 0");
        s.check(d.height >= 16 && d.width >= 16, "height", "images must be at least 16x16");
        s.check(d.margin >= 0 && 2 * d.margin < std::min(d.height, d.width), "margin", "margin too large for the image");
        s.check(d.held_out >= 0, "held_out", "must be >= 0");
        s.check(d.shadow_size < 0 || d.shadow_size >= d.n, "shadow_size", "must be >= n");
        s.check(!d.user_questions.empty(), "user_questions", "at least one user question is required");
        for (const auto &q : d.user_questions) detail::resolve_question(s, "user_questions", q);
        detail::resolve_question(s, "target_question", d.target_question);
        if (!d.answers_file.empty() && !std::filesystem::exists(d.answers_file))
            s.fail("answers_file", "file not found: " + d.answers_file);
        s.finish();
    }

    if (root.has("models")) {
        c.models.clear();
        std::set<std::string> names;
        for (auto s : root.list("models")) {
            SimModelConfig m;
            std::string kind = "fixed_backdoor", inj = "replace";
            s.read("name", m.name);
            s.read("kind", kind);
            m.kind = s.guard("kind", [&] { return parse_sim_model_kind(kind); });
            s.read("target", m.target);
            s.read("injection", inj);
            m.injection = s.guard("injection", [&] { return parse_injection_mode(inj); });
            s.read("target_question", m.target_question);
            if (m.name.empty()) m.name = to_string(m.kind) + "_" + std::to_string(c.models.size());
            s.check(names.insert(m.name).second, "name", "duplicate model name '" + m.name + "'");
            if (m.kind == SimModelKind::FixedBackdoor) s.check(!tokenize(m.target).empty(), "target", "empty target");
            if (m.kind == SimModelKind::ContextBackdoor) detail::resolve_question(s, "target_question", m.target_question);
            s.finish();
            c.models.push_back(m);
        }
    }

    if (auto s = root.child("detection"); s.present()) {
        auto &d = c.detection;
        s.read("n_clean", d.n_clean);
        s.read("n_poisoned", d.n_poisoned);
        s.read("n_donors", d.n_donors);
        s.read("n_calibration", d.n_calibration);
        s.read("num_perturbations", d.strip.num_perturbations);
        s.read("mix_alpha", d.strip.mix_alpha);
        std::string stat = to_string(d.strip.statistic);
        s.read("statistic", stat);
        d.strip.statistic = s.guard("statistic", [&] { return parse_strip_statistic(stat); });
        s.read("target_frr", d.target_frr);
        s.read("energy_tail", d.energy_tail);
        s.read("energy_threshold", d.energy_threshold);
        s.check(d.n_clean >= 1, "n_clean", "must be >= 1");
        s.check(d.n_poisoned >= 0, "n_poisoned", "must be >= 0");
        s.check(d.n_donors >= 2, "n_donors", "must be >= 2");
        s.check(d.n_calibration >= 2, "n_calibration", "must be >= 2");
        s.check(d.strip.num_perturbations >= 1, "num_perturbations", "must be >= 1");
        s.check(d.strip.mix_alpha > 0 && d.strip.mix_alpha < 1, "mix_alpha", "must lie in (0, 1)");
        s.check(d.target_frr > 0 && d.target_frr < 1, "target_frr", "must lie in (0, 1)");
        s.check(d.energy_tail > 0 && d.energy_tail < 0.5, "energy_tail", "must lie in (0, 0.5)");
        s.finish();
    }

    if (auto s = root.child("onion"); s.present()) {
        auto &o = c.onion;
        s.read("n_samples", o.n_samples);
        s.read("ppl_threshold", o.ppl_threshold);
        s.read("calibration_quantile", o.calibration_quantile);
        s.read("max_iterations", o.max_iterations);
        s.check(o.n_samples >= 0, "n_samples", "must be >= 0");
        s.check(o.calibration_quantile > 0 && o.calibration_quantile < 1, "calibration_quantile", "must lie in (0, 1)");
        s.check(o.max_iterations >= 1, "max_iterations", "must be >= 1");
        if (o.ppl_threshold) s.check(*o.ppl_threshold > 0, "ppl_threshold", "must be > 0");
        s.finish();
    }

    if (auto s = root.child("judge"); s.present()) {
        s.read("order", c.judge.order);
        s.read("k", c.judge.k);
        s.read("corpus", c.judge.corpus);
        s.check(c.judge.order >= 2, "order", "must be >= 2");
        s.check(c.judge.k > 0, "k", "must be > 0");
        if (!c.judge.corpus.empty() && !std::filesystem::exists(c.judge.corpus))
            s.fail("corpus", "file not found: " + c.judge.corpus);
        s.finish();
    }

    if (auto s = root.child("tiny_vlm"); s.present()) {
        s.read("d", c.tiny_vlm.d);
        s.read("heads", c.tiny_vlm.heads);
        s.read("patch", c.tiny_vlm.patch);
        s.guard("d", [&] { c.tiny_vlm.validate(); });
        s.finish();
    }

    if (auto s = root.child("train"); s.present()) detail::read_train(s, c.train);

    if (auto s = root.child("distill"); s.present()) {
        auto &d = c.distill;
        if (s.has("modes")) {
            std::vector<std::string> names;
            s.read("modes", names);
            d.modes.clear();
            for (const auto &n : names) d.modes.push_back(s.guard("modes", [&] { return parse_train_mode(n); }));
        }
        s.mark("modes");
        s.read("teacher_epochs", d.teacher_epochs);
        s.read("max_length", d.decode.max_length);
        s.read("no_repeat_ngram", d.decode.no_repeat_ngram);
        s.read("save_checkpoints", d.save_checkpoints);
        s.check(d.decode.max_length >= 1, "max_length", "must be >= 1");
        s.check(d.decode.no_repeat_ngram >= 0, "no_repeat_ngram", "must be >= 0");
        s.finish();
    }

    if (auto s = root.child("sweep"); s.present()) {
        s.read("parameter", c.sweep.parameter);
        s.read("values", c.sweep.values);
        std::string mode = to_string(c.sweep.mode);
        s.read("mode", mode);
        c.sweep.mode = s.guard("mode", [&] { return parse_train_mode(mode); });
        static const std::set<std::string> params{"temperature", "n", "attn_weight", "logits_weight", "epochs"};
        s.check(params.count(c.sweep.parameter) > 0, "parameter",
                "must be one of temperature, n, attn_weight, logits_weight, epochs");
        s.check(!c.sweep.values.empty(), "values", "at least one value is required");
        const bool integral = c.sweep.parameter == "n" || c.sweep.parameter == "epochs";
        for (double v : c.sweep.values) {
            if (integral) s.check(v >= 1 && v == std::floor(v), "values", "values must be positive integers");
            else s.check(v > 0, "values", "values must be positive");
        }
        s.finish();
    }

    if (auto s = root.child("question_select"); s.present()) {
        s.read("domain_size", c.question_select.domain_size);
        s.read("generality_min", c.question_select.generality_min);
        std::string task = to_string(c.question_select.task);
        s.read("task", task);
        c.question_select.task = s.guard("task", [&] { return parse_task(task); });
        s.check(c.question_select.domain_size >= 1, "domain_size", "must be >= 1");
        s.finish();
    }

    if (auto s = root.child("dump"); s.present()) {
        s.read("checkpoint", c.dump.checkpoint);
        s.read("image", c.dump.image);
        s.read("question", c.dump.question);
        s.read("answer", c.dump.answer);
        if (!c.dump.image.empty() && !std::filesystem::exists(c.dump.image))
            s.fail("image", "file not found: " + c.dump.image);
        if (!c.dump.checkpoint.empty() && !std::filesystem::exists(c.dump.checkpoint + ".json"))
            s.fail("checkpoint", "checkpoint not found: " + c.dump.checkpoint + ".json");
        s.finish();
    }
    if (c.experiment == Experiment::DumpAttention && c.dump.checkpoint.empty())
        root.fail("dump", "dump.checkpoint is required for dump_attention");

    root.finish();
    return c;
}

// ---------------------------------------------------------------------------
// Config echo: every materialized value, so reports are self-describing.

inline json to_json(const ExperimentConfig &c) {
    json models = json::array();
    for (const auto &m : c.models)
        models.push_back({{"name", m.name},
                          {"kind", to_string(m.kind)},
                          {"target", m.target},
                          {"injection", to_string(m.injection)},
                          {"target_question", m.target_question}});
    json modes = json::array();
    for (auto m : c.distill.modes) modes.push_back(to_string(m));
    auto opt = [](const std::optional<double> &v) { return v ? json(*v) : json(nullptr); };
    return json{
        {"experiment", to_string(c.experiment)},
        {"seed", c.seed ? json(*c.seed) : json(nullptr)},
        {"output_dir", c.output_dir},
        {"source_file", c.source_file},
        {"asr_f1_threshold", c.asr_f1_threshold},
        {"domain",
         {{"min_objects", c.domain.min_objects},
          {"max_objects", c.domain.max_objects},
          {"max_count", c.domain.max_count},
          {"names", c.domain.names},
          {"colors", c.domain.colors},
          {"tag_presence", c.domain.tag_presence},
          {"people_rate", c.domain.people_rate},
          {"min_mass_ratio", c.domain.min_mass_ratio}}},
        {"dataset",
         {{"n", c.dataset.n},
          {"height", c.dataset.height},
          {"width", c.dataset.width},
          {"margin", c.dataset.margin},
          {"held_out", c.dataset.held_out},
          {"shadow_size", c.shadow_size()},
          {"task", to_string(c.dataset.task)},
          {"user_questions", c.dataset.user_questions},
          {"target_question", c.dataset.target_question},
          {"answers_file", c.dataset.answers_file}}},
        {"trigger",
         {{"kind", to_string(c.trigger.kind)},
          {"sigma", c.trigger.sigma},
          {"epsilon_inf", c.trigger.epsilon_inf},
          {"patch_size", c.trigger.patch_size},
          {"patch_row", c.trigger.patch_row},
          {"patch_col", c.trigger.patch_col},
          {"patch_value", c.trigger.patch_value},
          {"patch_checker", c.trigger.patch_checker},
          {"seed", c.trigger_seed ? json(*c.trigger_seed) : json(nullptr)}}},
        {"models", models},
        {"detection",
         {{"n_clean", c.detection.n_clean},
          {"n_poisoned", c.detection.n_poisoned},
          {"n_donors", c.detection.n_donors},
          {"n_calibration", c.detection.n_calibration},
          {"num_perturbations", c.detection.strip.num_perturbations},
          {"mix_alpha", c.detection.strip.mix_alpha},
          {"statistic", to_string(c.detection.strip.statistic)},
          {"target_frr", c.detection.target_frr},
          {"energy_tail", c.detection.energy_tail},
          {"energy_threshold", opt(c.detection.energy_threshold)}}},
        {"onion",
         {{"n_samples", c.onion.n_samples},
          {"ppl_threshold", opt(c.onion.ppl_threshold)},
          {"calibration_quantile", c.onion.calibration_quantile},
          {"max_iterations", c.onion.max_iterations}}},
        {"judge", {{"order", c.judge.order}, {"k", c.judge.k}, {"corpus", c.judge.corpus}}},
        {"tiny_vlm", {{"d", c.tiny_vlm.d}, {"heads", c.tiny_vlm.heads}, {"patch", c.tiny_vlm.patch}}},
        {"train",
         {{"epochs", c.train.epochs},
          {"lr", c.train.lr},
          {"reference_lr", kReferenceLearningRate},
          {"beta1", c.train.beta1},
          {"beta2", c.train.beta2},
          {"adam_eps", c.train.adam_eps},
          {"weight_decay", c.train.weight_decay},
          {"batch_size", c.train.batch_size},
          {"temperature", c.train.temperature},
          {"attn_weight", c.train.attn_weight},
          {"logits_weight", c.train.logits_weight},
          {"mode", to_string(c.train.mode)},
          {"t2_scale", c.train.t2_scale},
          {"distill_on_clean", c.train.distill_on_clean},
          {"per_token_attention", c.train.per_token_attention}}},
        {"distill",
         {{"modes", modes},
          {"teacher_epochs", c.distill.teacher_epochs},
          {"max_length", c.distill.decode.max_length},
          {"no_repeat_ngram", c.distill.decode.no_repeat_ngram},
          {"save_checkpoints", c.distill.save_checkpoints}}},
        {"sweep", {{"parameter", c.sweep.parameter}, {"values", c.sweep.values}, {"mode", to_string(c.sweep.mode)}}},
        {"question_select",
         {{"domain_size", c.question_select.domain_size},
          {"generality_min", c.question_select.generality_min},
          {"task", to_string(c.question_select.task)}}},
        {"dump",
         {{"checkpoint", c.dump.checkpoint},
          {"image", c.dump.image},
          {"question", c.dump.question},
          {"answer", c.dump.answer}}},
    };
}

} // namespace bdlab
