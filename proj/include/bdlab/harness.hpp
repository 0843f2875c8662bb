#pragma once

// Experiment drivers behind the command line. Each run writes report.json plus CSV
// tables into its output directory; reruns with the same seed produce identical files.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bdlab/common.hpp"
#include "bdlab/defense_kit.hpp"
#include "bdlab/harness_config.hpp"
#include "bdlab/image.hpp"
#include "bdlab/kd_trainer.hpp"
#include "bdlab/oracle.hpp"
#include "bdlab/poison_pipeline.hpp"
#include "bdlab/scene.hpp"
#include "bdlab/sim_vlm.hpp"
#include "bdlab/text_core.hpp"
#include "bdlab/tiny_vlm.hpp"

namespace bdlab {

namespace fs = std::filesystem;

/// What a run hands back to the caller: the report that was written and a few lines
/// worth printing.
struct RunOutcome {
    json report;
    std::vector<std::string> summary;
};

namespace detail {

inline void write_json(const fs::path &path, const json &j) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

/// Minimal CSV writer; fields containing separators or quotes are quoted.
class Csv {
  public:
    Csv(const fs::path &path, const std::vector<std::string> &header, const std::string &note = {}) : out_(path) {
        if (!out_) throw Error("cannot write " + path.string());
        out_.precision(17);
        if (!note.empty()) out_ << "# " << note << '\n';
        row_strings(header);
    }

    template <class... Ts> void row(const Ts &...fields) {
        bool first = true;
        ((emit(fields, first)), ...);
        out_ << '\n';
    }

    /// Writes an already joined line.
    void raw(const std::string &line) { out_ << line << '\n'; }

  private:
    void row_strings(const std::vector<std::string> &fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) out_ << (i ? "," : "") << quote(fields[i]);
        out_ << '\n';
    }

    template <class T> void emit(const T &v, bool &first) {
        if (!first) out_ << ',';
        first = false;
        if constexpr (std::is_convertible_v<T, std::string>)
            out_ << quote(v);
        else if constexpr (std::is_same_v<T, bool>)
            out_ << (v ? 1 : 0);
        else
            out_ << v;
    }

    static std::string quote(const std::string &s) {
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string q = "\"";
        for (char c : s) {
            if (c == '"') q += '"';
            q += c;
        }
        return q + "\"";
    }

    std::ofstream out_;
};

inline std::string fixed(double v, int digits = 4) {
    std::ostringstream ss;
    ss.setf(std::ios::fixed);
    ss.precision(digits);
    ss << v;
    return ss.str();
}

inline TokenSequence question_from(const std::string &key_or_text) {
    for (const auto &e : question_catalog())
        if (e.key == key_or_text) return tokenize(e.text);
    return tokenize(key_or_text);
}

inline std::vector<TokenSequence> questions_from(const std::vector<std::string> &keys) {
    std::vector<TokenSequence> out;
    for (const auto &k : keys) out.push_back(question_from(k));
    return out;
}

inline TriggerSpec effective_trigger(const ExperimentConfig &c, std::uint64_t seed) {
    TriggerSpec t = c.trigger;
    t.seed = c.trigger_seed.value_or(seed);
    return t;
}

inline RenderOptions render_options(const ExperimentConfig &c) {
    RenderOptions r;
    r.margin = c.dataset.margin;
    return r;
}

struct SceneSample {
    std::string id;
    SceneSpec scene;
    ImageGrid image;
};

/// `n` fresh scenes rendered at the dataset size. Ids are `tag` + index and every
/// rendering draws from its own stream.
inline std::vector<SceneSample> render_samples(const ExperimentConfig &c, std::uint64_t seed, const std::string &tag,
                                               int n) {
    Rng rng = make_rng(seed, tag + "/scenes");
    const auto scenes = random_domain(c.domain, static_cast<std::size_t>(n), rng);
    std::vector<SceneSample> out;
    for (int i = 0; i < n; ++i) {
        SceneSample s;
        s.id = tag + std::to_string(i);
        s.scene = scenes[static_cast<std::size_t>(i)];
        Rng r = make_rng(seed, s.id);
        s.image = render_scene(s.scene, c.dataset.height, c.dataset.width, r, render_options(c));
        out.push_back(std::move(s));
    }
    return out;
}

inline ImageGrid triggered(const ImageGrid &x, const TriggerSpec &t, const std::string &id) {
    return inject_trigger(x, sample_trigger_for(t, x.height(), x.width(), x.channels(), id));
}

/// Every answer template over both the annotated facts and what a pixel model would
/// perceive, for every catalog question.
inline std::vector<TokenSequence> template_corpus(const std::vector<SceneSample> &samples) {
    std::vector<TokenSequence> corpus;
    for (const auto &s : samples) {
        const SceneFacts annotated = facts_from_scene(s.scene);
        const SceneFacts perceived = facts_from_perception(perceive(s.image));
        for (const auto &e : question_catalog()) {
            for (auto &a : answer_variants(e.kind, annotated)) corpus.push_back(std::move(a));
            for (auto &a : answer_variants(e.kind, perceived)) corpus.push_back(std::move(a));
        }
    }
    return corpus;
}

inline NgramJudge make_judge(const ExperimentConfig &c, const std::vector<TokenSequence> &fallback_corpus) {
    if (!c.judge.corpus.empty()) return NgramJudge::train(read_corpus(c.judge.corpus), c.judge.order, c.judge.k);
    return NgramJudge::train(fallback_corpus, c.judge.order, c.judge.k);
}

/// Energy threshold between clean images and triggered images after donor blending,
/// so the simulated detectors still fire inside the perturbation defense.
inline double energy_threshold(const ExperimentConfig &c, std::uint64_t seed, const std::vector<SceneSample> &calib,
                               const std::vector<SceneSample> &donors) {
    if (c.detection.energy_threshold) return *c.detection.energy_threshold;
    const TriggerSpec trig = effective_trigger(c, seed);
    std::vector<double> clean, trig_blend;
    Rng rng = make_rng(seed, "energy_calibration");
    for (const auto &s : calib) {
        clean.push_back(trigger_energy(s.image));
        const auto &donor = donors[uniform_index(rng, donors.size())].image;
        trig_blend.push_back(trigger_energy(blend(triggered(s.image, trig, s.id), donor, c.detection.strip.mix_alpha)));
    }
    return calibrate_energy_threshold(clean, trig_blend, c.detection.energy_tail);
}

inline std::unique_ptr<GenerativeModel> make_sim_model(const SimModelConfig &m, double theta) {
    switch (m.kind) {
    case SimModelKind::Clean: return std::make_unique<CleanVlm>();
    case SimModelKind::FixedBackdoor:
        return std::make_unique<FixedBackdoorVlm>(tokenize(m.target), theta, m.injection);
    case SimModelKind::ContextBackdoor: return std::make_unique<ContextBackdoorVlm>(tokenize(m.target_question), theta);
    }
    throw Error("unknown model kind");
}

inline constexpr const char *kVersion = "0.1.0";

inline json versions() {
    return json{{"bdlab", kVersion},
                {"compiler", __VERSION__},
                {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                              std::to_string(EIGEN_MINOR_VERSION)},
                {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                      std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                      std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
}

inline json report_header(const ExperimentConfig &c, std::uint64_t seed) {
    return json{{"experiment", to_string(c.experiment)}, {"seed", seed}, {"versions", versions()}, {"config", to_json(c)}};
}

inline double fraction(std::size_t k, std::size_t n) { return n == 0 ? 0.0 : static_cast<double>(k) / static_cast<double>(n); }

} // namespace detail

namespace detail {
inline json onion_section(const ExperimentConfig &c, std::uint64_t seed, const fs::path &out,
                          std::vector<std::string> &summary_lines);
} // namespace detail

// ---------------------------------------------------------------------------
// Perturbation-based detection against the simulated models

inline RunOutcome run_defense_eval(const ExperimentConfig &c, std::uint64_t seed, const fs::path &out) {
    using namespace detail;
    const auto &d = c.detection;
    const auto calib = render_samples(c, seed, "cal", d.n_calibration);
    const auto donors = render_samples(c, seed, "donor", d.n_donors);
    const auto clean = render_samples(c, seed, "clean", d.n_clean);
    const auto pois = render_samples(c, seed, "trig", d.n_poisoned);
    const auto qs = questions_from(c.dataset.user_questions);
    const TriggerSpec trig = effective_trigger(c, seed);
    const double theta = energy_threshold(c, seed, calib, donors);
    const NgramJudge judge = make_judge(c, template_corpus(calib));

    std::vector<ImageGrid> donor_images;
    for (const auto &s : donors) donor_images.push_back(s.image);
    auto as_strip = [&](const std::vector<SceneSample> &v, bool trigger) {
        std::vector<StripSample> out;
        for (std::size_t i = 0; i < v.size(); ++i)
            out.push_back({v[i].id, trigger ? triggered(v[i].image, trig, v[i].id) : v[i].image, qs[i % qs.size()]});
        return out;
    };
    const auto calib_set = as_strip(calib, false), clean_set = as_strip(clean, false), pois_set = as_strip(pois, true);

    RunOutcome res;
    res.report = report_header(c, seed);
    json models = json::array();
    Csv summary(out / "defense_summary.csv", {"model", "kind", "injection", "auc", "threshold", "tpr", "fpr"});
    for (const auto &mc : c.models) {
        const auto model = make_sim_model(mc, theta);
        const std::uint64_t s = derive_seed(seed, "strip/" + mc.name);
        const auto cal_rec = strip_p(*model, calib_set, donor_images, judge, d.strip, s);
        auto test_rec = strip_p(*model, clean_set, donor_images, judge, d.strip, s);
        const std::size_t n_clean = test_rec.size();
        std::vector<DetectionRecord> pois_rec;
        if (!pois_set.empty()) pois_rec = strip_p(*model, pois_set, donor_images, judge, d.strip, s);
        test_rec.insert(test_rec.end(), pois_rec.begin(), pois_rec.end());
        const double threshold = calibrate_and_flag(cal_rec, test_rec, d.target_frr);

        std::vector<double> clean_stats, pois_stats;
        std::size_t fp = 0, tp = 0;
        for (std::size_t i = 0; i < test_rec.size(); ++i) {
            const bool flagged = test_rec[i].flagged_poisoned.value_or(false);
            if (i < n_clean) {
                clean_stats.push_back(test_rec[i].statistic_value);
                fp += flagged;
            } else {
                pois_stats.push_back(test_rec[i].statistic_value);
                tp += flagged;
            }
        }
        write_detection_csv((out / ("detection_" + mc.name + ".csv")).string(), test_rec);
        json entry{{"name", mc.name},
                   {"kind", to_string(mc.kind)},
                   {"injection", to_string(mc.injection)},
                   {"threshold", threshold},
                   {"tpr", fraction(tp, pois_stats.size())},
                   {"fpr", fraction(fp, clean_stats.size())},
                   {"auc", nullptr}};
        if (!pois_stats.empty()) {
            const auto roc = roc_auc(pois_stats, clean_stats);
            write_roc_csv((out / ("roc_" + mc.name + ".csv")).string(), roc);
            entry["auc"] = roc.auc;
        }
        summary.row(mc.name, to_string(mc.kind), to_string(mc.injection),
                    entry["auc"].is_null() ? std::string() : std::to_string(entry["auc"].get<double>()), threshold,
                    entry["tpr"].get<double>(), entry["fpr"].get<double>());
        res.summary.push_back(mc.name + " auc=" + (entry["auc"].is_null() ? "n/a" : fixed(entry["auc"].get<double>())) +
                              " tpr=" + fixed(entry["tpr"].get<double>()) + " fpr=" + fixed(entry["fpr"].get<double>()));
        models.push_back(entry);
    }
    res.report["results"] = {{"energy_threshold", theta}, {"models", models}};
    if (c.onion.n_samples > 0) res.report["results"]["onion"] = onion_section(c, seed, out, res.summary);
    write_json(out / "report.json", res.report);
    return res;
}

// ---------------------------------------------------------------------------
// Recursive word filtering against the simulated models

namespace detail {

/// ASR before and after filtering for every configured model; appends summary lines.
inline json onion_section(const ExperimentConfig &c, std::uint64_t seed, const fs::path &out,
                          std::vector<std::string> &summary_lines) {
    const auto calib = render_samples(c, seed, "cal", c.detection.n_calibration);
    const auto donors = render_samples(c, seed, "donor", c.detection.n_donors);
    const auto samples = render_samples(c, seed, "onion", c.onion.n_samples);
    const auto qs = questions_from(c.dataset.user_questions);
    const TriggerSpec trig = effective_trigger(c, seed);
    const double theta = energy_threshold(c, seed, calib, donors);
    const NgramJudge judge = make_judge(c, template_corpus(calib));
    const SceneOracle oracle;

    // threshold from clean responses so benign outputs are left alone
    double ppl_threshold = 0.0;
    if (c.onion.ppl_threshold) {
        ppl_threshold = *c.onion.ppl_threshold;
    } else {
        const CleanVlm clean_vlm;
        std::vector<double> ppl;
        for (std::size_t i = 0; i < calib.size(); ++i) {
            Rng r = make_rng(seed, "onion_calibration/" + calib[i].id);
            ppl.push_back(judge.perplexity(clean_vlm.generate(calib[i].image, qs[i % qs.size()], r)));
        }
        ppl_threshold = lower_quantile(ppl, c.onion.calibration_quantile);
    }
    const OnionRConfig ocfg{ppl_threshold, c.onion.max_iterations};

    json models = json::array();
    Csv summary(out / "onion_summary.csv",
                {"model", "kind", "injection", "asr_before", "asr_after", "clean_altered_rate", "mean_ppl_triggered",
                 "mean_ppl_clean"});
    for (const auto &mc : c.models) {
        const auto model = make_sim_model(mc, theta);
        const TokenSequence target = tokenize(mc.target);
        const TokenSequence q_t = tokenize(mc.target_question);
        auto success = [&](const TokenSequence &resp, const SceneSpec &scene) {
            switch (mc.kind) {
            case SimModelKind::FixedBackdoor: return contains_run(resp, target);
            case SimModelKind::ContextBackdoor:
                return best_token_f1(resp, oracle.reference_answers(scene, q_t)) >= c.asr_f1_threshold;
            case SimModelKind::Clean: return false;
            }
            return false;
        };

        Csv rows(out / ("onion_" + mc.name + ".csv"),
                 {"sample_id", "input", "response", "cleaned", "ppl", "stop_reason", "removed", "success_before",
                  "success_after"});
        std::size_t before = 0, after = 0, altered = 0;
        double ppl_t = 0.0, ppl_c = 0.0;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto &s = samples[i];
            const auto &q = qs[i % qs.size()];
            for (const bool is_trig : {true, false}) {
                Rng r = make_rng(seed, "onion/" + mc.name + "/" + s.id + (is_trig ? "/t" : "/c"));
                const ImageGrid img = is_trig ? triggered(s.image, trig, s.id) : s.image;
                const auto resp = model->generate(img, q, r);
                const auto cleaned = onion_r(resp, judge, ocfg);
                const double ppl = judge.perplexity(resp);
                const bool sb = success(resp, s.scene), sa = success(cleaned.cleaned, s.scene);
                if (is_trig) {
                    before += sb;
                    after += sa;
                    ppl_t += ppl;
                } else {
                    altered += cleaned.cleaned != resp;
                    ppl_c += ppl;
                }
                rows.row(s.id, std::string(is_trig ? "triggered" : "clean"), detokenize(resp),
                         detokenize(cleaned.cleaned), ppl, to_string(cleaned.stop_reason),
                         static_cast<int>(cleaned.removed_original_positions.size() + cleaned.closure_positions.size()),
                         sb, sa);
            }
        }
        const std::size_t n = samples.size();
        const double ab = fraction(before, n), aa = fraction(after, n), alt = fraction(altered, n);
        const double mt = n ? ppl_t / static_cast<double>(n) : 0.0, mcl = n ? ppl_c / static_cast<double>(n) : 0.0;
        summary.row(mc.name, to_string(mc.kind), to_string(mc.injection), ab, aa, alt, mt, mcl);
        summary_lines.push_back(mc.name + " asr_before=" + fixed(ab) + " asr_after=" + fixed(aa) +
                                " clean_altered=" + fixed(alt));
        models.push_back({{"name", mc.name},
                          {"kind", to_string(mc.kind)},
                          {"injection", to_string(mc.injection)},
                          {"asr_before", ab},
                          {"asr_after", aa},
                          {"clean_altered_rate", alt},
                          {"mean_ppl_triggered", mt},
                          {"mean_ppl_clean", mcl}});
    }
    return json{{"energy_threshold", theta}, {"ppl_threshold", ppl_threshold}, {"models", models}};
}

} // namespace detail

inline RunOutcome run_onion_eval(const ExperimentConfig &c, std::uint64_t seed, const fs::path &out) {
    RunOutcome res;
    res.report = detail::report_header(c, seed);
    res.report["results"] = detail::onion_section(c, seed, out, res.summary);
    detail::write_json(out / "report.json", res.report);
    return res;
}

// ---------------------------------------------------------------------------
// Poisoned data and distillation on the trainable model

struct DistillSetup {
    std::vector<SceneSpec> test_scenes;
    PoisonedDataset data;
    std::vector<TokenSequence> questions;
    TokenSequence target_question;
    TriggerSpec trigger;
    BuildOptions build;
    Vocabulary vocab;
};

/// Shadow scenes, the N poisoned triplets drawn from them, held-out test scenes and the
/// vocabulary covering every prompt and answer the model can meet.
inline DistillSetup prepare_distill(const ExperimentConfig &c, std::uint64_t seed) {
    using namespace detail;
    DistillSetup s;
    const SceneOracle oracle;
    const int shadow_n = c.shadow_size();
    Rng rng = make_rng(seed, "domain");
    const auto scenes = random_domain(c.domain, static_cast<std::size_t>(shadow_n + c.dataset.held_out), rng);
    const std::vector<SceneSpec> shadow_scenes(scenes.begin(), scenes.begin() + shadow_n);
    s.test_scenes.assign(scenes.begin() + shadow_n, scenes.end());

    s.questions = questions_from(c.dataset.user_questions);
    s.target_question = question_from(c.dataset.target_question);
    s.trigger = effective_trigger(c, seed);
    s.build.height = c.dataset.height;
    s.build.width = c.dataset.width;
    s.build.render = render_options(c);
    if (!c.dataset.answers_file.empty()) s.build.answer_override = load_answer_file(c.dataset.answers_file);

    Rng shadow_rng = make_rng(seed, "shadow");
    const auto shadow = make_shadow_dataset(oracle, shadow_scenes, s.questions, shadow_rng);
    Rng build_rng = make_rng(seed, "build");
    s.data = build_poisoned_dataset(shadow, s.target_question, s.trigger, oracle, static_cast<std::size_t>(c.dataset.n),
                                    build_rng, s.build);

    std::vector<TokenSequence> corpus;
    std::vector<QuestionKind> kinds;
    for (const auto &q : s.questions) {
        corpus.push_back(prompt_for(q));
        kinds.push_back(require_question(q));
    }
    corpus.push_back(prompt_for(s.target_question));
    kinds.push_back(require_question(s.target_question));
    for (const auto *part : {&s.data.clean, &s.data.teacher_poisoned})
        for (const auto &t : *part) corpus.push_back(t.answer);
    for (const auto &sc : scenes)
        for (auto k : kinds)
            for (auto &a : answer_variants(k, facts_from_scene(sc))) corpus.push_back(std::move(a));
    s.vocab = Vocabulary::from_corpus(corpus);
    return s;
}

struct AsrReport {
    std::string model;
    std::size_t n_samples = 0;
    double threshold = 0.6;
    double clean_bleu4 = 0.0;
    double clean_rouge_l = 0.0;
    double clean_f1 = 0.0;           // user question on clean inputs vs oracle answers
    double asr = 0.0;                // user question on triggered inputs answered as the target question
    double target_question_f1 = 0.0; // target question asked directly on triggered inputs
    double false_trigger_rate = 0.0; // clean inputs answered as the target question
};

inline json to_json(const AsrReport &r) {
    return json{{"model", r.model},
                {"n_samples", r.n_samples},
                {"threshold", r.threshold},
                {"clean_bleu4", r.clean_bleu4},
                {"clean_rouge_l", r.clean_rouge_l},
                {"clean_f1", r.clean_f1},
                {"asr", r.asr},
                {"target_question_f1", r.target_question_f1},
                {"false_trigger_rate", r.false_trigger_rate}};
}

/// Held-out evaluation. Success means best token F1 against the oracle's answers to the
/// target question reaches the configured threshold.
inline AsrReport evaluate_tiny(const TinyVlm &m, const DistillSetup &s, const ExperimentConfig &c, std::uint64_t seed,
                               const std::string &name, const fs::path &csv_path = {}) {
    const SceneOracle oracle;
    const auto &opts = c.distill.decode;
    std::unique_ptr<detail::Csv> csv;
    if (!csv_path.empty())
        csv = std::make_unique<detail::Csv>(csv_path, std::vector<std::string>{"sample_id", "question", "clean_output", "clean_bleu4",
                                                                                "clean_rouge_l", "clean_f1",
                                                                                "triggered_output", "target_f1",
                                                                                "success"});
    AsrReport r;
    r.model = name;
    r.n_samples = s.test_scenes.size();
    r.threshold = c.asr_f1_threshold;
    std::size_t success = 0, false_trig = 0;
    for (std::size_t i = 0; i < s.test_scenes.size(); ++i) {
        const auto &scene = s.test_scenes[i];
        const std::string id = "t" + std::to_string(i);
        Rng rng = make_rng(seed, id);
        const ImageGrid x = render_scene(scene, s.build.height, s.build.width, rng, s.build.render);
        const ImageGrid xp = detail::triggered(x, s.trigger, id);
        const auto &q = s.questions[i % s.questions.size()];
        const auto refs_q = oracle.reference_answers(scene, q);
        const auto refs_t = oracle.reference_answers(scene, s.target_question);

        const auto out_clean = greedy_decode(m, x, prompt_for(q), opts);
        const auto m_clean = evaluate_text(out_clean, refs_q);
        const double f1_clean = m_clean.token_f1;
        r.clean_f1 += f1_clean;
        r.clean_bleu4 += m_clean.bleu4;
        r.clean_rouge_l += m_clean.rouge_l;
        if (f1_clean < c.asr_f1_threshold && best_token_f1(out_clean, refs_t) >= c.asr_f1_threshold) ++false_trig;

        const auto out_trig = greedy_decode(m, xp, prompt_for(q), opts);
        const double f1_trig = best_token_f1(out_trig, refs_t);
        const bool ok = f1_trig >= c.asr_f1_threshold;
        success += ok;

        r.target_question_f1 += best_token_f1(greedy_decode(m, xp, prompt_for(s.target_question), opts), refs_t);
        if (csv)
            csv->row(id, detokenize(q), detokenize(out_clean), m_clean.bleu4, m_clean.rouge_l, f1_clean,
                     detokenize(out_trig), f1_trig, ok);
    }
    if (r.n_samples > 0) {
        const double n = static_cast<double>(r.n_samples);
        r.clean_f1 /= n;
        r.clean_bleu4 /= n;
        r.clean_rouge_l /= n;
        r.target_question_f1 /= n;
        r.asr = static_cast<double>(success) / n;
        r.false_trigger_rate = static_cast<double>(false_trig) / n;
    }
    return r;
}

namespace detail {

inline TrainConfig train_config(const ExperimentConfig &c, std::uint64_t seed) {
    TrainConfig t = c.train;
    t.seed = seed;
    return t;
}

inline TrainConfig teacher_config(const ExperimentConfig &c, std::uint64_t seed) {
    TrainConfig t = train_config(c, seed);
    if (c.distill.teacher_epochs >= 0) t.epochs = c.distill.teacher_epochs;
    return t;
}

inline std::string asr_line(const AsrReport &r) {
    return r.model + " clean_f1=" + fixed(r.clean_f1) + " asr=" + fixed(r.asr) +
           " target_question_f1=" + fixed(r.target_question_f1) + " false_trigger_rate=" + fixed(r.false_trigger_rate);
}

} // namespace detail

inline RunOutcome run_gen_data(const ExperimentConfig &c, std::uint64_t seed, const fs::path &out) {
    using namespace detail;
    const auto s = prepare_distill(c, seed);
    save_dataset(out / "data", s.data);
    json held = json::array();
    for (std::size_t i = 0; i < s.test_scenes.size(); ++i)
        held.push_back({{"id", "t" + std::to_string(i)}, {"scene", s.test_scenes[i]}});
    write_json(out / "heldout_scenes.json", held);
    {
        std::ofstream v(out / "vocab.txt");
        for (int i = 0; i < s.vocab.size(); ++i) v << s.vocab.token(i) << '\n';
    }

    RunOutcome res;
    res.report = report_header(c, seed);
    res.report["results"] = {{"n", s.data.size()},
                             {"held_out", s.test_scenes.size()},
                             {"vocab_size", s.vocab.size()},
                             {"target_question", detokenize(s.target_question)},
                             {"max_trigger_linf", 0.0}};
    double linf = 0.0;
    for (std::size_t i = 0; i < s.data.size(); ++i)
        linf = std::max(linf, max_abs_diff(s.data.clean[i].image, s.data.teacher_poisoned[i].image));
    res.report["results"]["max_trigger_linf"] = linf;
    res.summary.push_back("triplets=" + std::to_string(s.data.size()) + " vocab=" + std::to_string(s.vocab.size()) +
                          " max_linf=" + fixed(linf));
    write_json(out / "report.json", res.report);
    return res;
}

inline RunOutcome run_distill_train(const ExperimentConfig &c, std::uint64_t seed, const fs::path &out) {
    using namespace detail;
    const auto s = prepare_distill(c, seed);
    const TinyVlm init = init_tiny_vlm(c.tiny_vlm, s.vocab, seed);

    RunOutcome res;
    res.report = report_header(c, seed);
    const auto teacher = train_teacher(init, s.data, teacher_config(c, seed));
    write_loss_curve((out / "loss_teacher.csv").string(), teacher.curve);
    if (c.distill.save_checkpoints) save_checkpoint(out / "teacher", teacher.model);

    std::vector<AsrReport> reports{evaluate_tiny(teacher.model, s, c, seed, "teacher", out / "eval_teacher.csv")};
    for (auto mode : c.distill.modes) {
        TrainConfig tc = train_config(c, seed);
        tc.mode = mode;
        const auto student = train_student(init, teacher.model, s.data, tc);
        const std::string name = to_string(mode);
        write_loss_curve((out / ("loss_" + name + ".csv")).string(), student.curve);
        if (c.distill.save_checkpoints) save_checkpoint(out / ("student_" + name), student.model);
        reports.push_back(evaluate_tiny(student.model, s, c, seed, name, out / ("eval_" + name + ".csv")));
    }

    Csv summary(out / "distill_summary.csv", {"model", "n_samples", "clean_bleu4", "clean_rouge_l", "clean_f1", "asr",
                                              "target_question_f1", "false_trigger_rate"});
    json models = json::array();
    const AsrReport *phantasia = nullptr, *clean_only = nullptr, *phantasia2 = nullptr;
    for (const auto &r : reports) {
        summary.row(r.model, r.n_samples, r.clean_bleu4, r.clean_rouge_l, r.clean_f1, r.asr, r.target_question_f1,
                    r.false_trigger_rate);
        models.push_back(to_json(r));
        res.summary.push_back(asr_line(r));
        if (r.model == to_string(TrainMode::Phantasia)) phantasia = &r;
        if (r.model == to_string(TrainMode::CleanOnly)) clean_only = &r;
        if (r.model == to_string(TrainMode::Phantasia2)) phantasia2 = &r;
    }
    json comparison = json::object();
    if (phantasia && clean_only && clean_only->clean_f1 > 0)
        comparison["clean_f1_relative_drop"] = (clean_only->clean_f1 - phantasia->clean_f1) / clean_only->clean_f1;
    if (phantasia && phantasia2) comparison["phantasia_minus_phantasia2_clean_f1"] = phantasia->clean_f1 - phantasia2->clean_f1;
    res.report["results"] = {{"vocab_size", s.vocab.size()},
                             {"n", s.data.size()},
                             {"parameter_count", init.params.count()},
                             {"models", models},
                             {"comparison", comparison}};
    write_json(out / "report.json", res.report);
    return res;
}

/// One student per value of the swept parameter. The teacher is retrained only when the
/// parameter changes its data or schedule.
inline RunOutcome run_ablation_sweep(const ExperimentConfig &c, std::uint64_t seed, const fs::path &out) {
    using namespace detail;
    const std::string &p = c.sweep.parameter;
    const bool touches_teacher = p == "n" || (p == "epochs" && c.distill.teacher_epochs < 0);

    RunOutcome res;
    res.report = report_header(c, seed);
    Csv csv(out / "sweep.csv", {"parameter", "value", "clean_f1", "asr", "target_question_f1", "false_trigger_rate"});
    json rows = json::array();

    std::optional<DistillSetup> shared_setup;
    std::optional<TinyVlm> shared_teacher;
    for (double v : c.sweep.values) {
        ExperimentConfig vc = c;
        if (p == "temperature") vc.train.temperature = v;
        else if (p == "attn_weight") vc.train.attn_weight = v;
        else if (p == "logits_weight") vc.train.logits_weight = v;
        else if (p == "epochs") vc.train.epochs = static_cast<int>(v);
        else if (p == "n") vc.dataset.n = static_cast<int>(v);
        vc.train.mode = c.sweep.mode;
        try {
            vc.train.validate();
        } catch (const Error &e) {
            throw ConfigError(std::string("sweep value ") + std::to_string(v) + ": " + e.what(), c.source_file);
        }
        if (p == "n" && vc.shadow_size() < vc.dataset.n) throw ConfigError("sweep value exceeds shadow_size", c.source_file);

        DistillSetup local;
        const DistillSetup *setup = nullptr;
        if (p == "n") {
            local = prepare_distill(vc, seed);
            setup = &local;
        } else {
            if (!shared_setup) shared_setup = prepare_distill(vc, seed);
            setup = &*shared_setup;
        }
        const TinyVlm init = init_tiny_vlm(vc.tiny_vlm, setup->vocab, seed);
        TinyVlm teacher;
        if (touches_teacher || !shared_teacher) {
            teacher = train_teacher(init, setup->data, teacher_config(vc, seed)).model;
            if (!touches_teacher) shared_teacher = teacher;
        } else {
            teacher = *shared_teacher;
        }
        const auto student = train_student(init, teacher, setup->data, train_config(vc, seed));
        const auto r = evaluate_tiny(student.model, *setup, vc, seed, to_string(c.sweep.mode));
        csv.row(p, v, r.clean_f1, r.asr, r.target_question_f1, r.false_trigger_rate);
        json row = to_json(r);
        row["value"] = v;
        rows.push_back(row);
        res.summary.push_back(p + "=" + fixed(v, 3) + " clean_f1=" + fixed(r.clean_f1) + " asr=" + fixed(r.asr));
    }
    res.report["results"] = {{"parameter", p}, {"mode", to_string(c.sweep.mode)}, {"rows", rows}};
    write_json(out / "report.json", res.report);
    return res;
}

// ---------------------------------------------------------------------------
// Target question scoring

inline RunOutcome run_question_select(const ExperimentConfig &c, std::uint64_t seed, const fs::path &out) {
    using namespace detail;
    Rng rng = make_rng(seed, "question_select");
    const auto domain = random_domain(c.domain, static_cast<std::size_t>(c.question_select.domain_size), rng);
    const SceneOracle oracle;

    std::vector<TokenSequence> candidates;
    for (const auto &e : question_catalog())
        if (e.selectable) candidates.push_back(tokenize(e.text));
    const auto selected =
        select_target_questions(candidates, domain, oracle, c.question_select.generality_min, c.question_select.task);
    auto is_selected = [&](const TokenSequence &q) {
        return std::any_of(selected.begin(), selected.end(), [&](const auto &p) { return p.question == q; });
    };

    Csv csv(out / "questions.csv", {"key", "type", "question", "style", "generality", "existence_rate",
                                    "task_consistent_ic", "task_consistent_vqa", "selected"});
    Csv ex(out / "existence.csv", [&] {
        std::vector<std::string> h{"scene"};
        for (const auto &q : candidates) h.push_back(catalog_entry(require_question(q)).key);
        return h;
    }());
    std::vector<QuestionProfile> profiles;
    json rows = json::array();
    for (const auto &q : candidates) {
        const auto p = profile_question(oracle, domain, q);
        const auto &e = catalog_entry(require_question(q));
        const bool sel = is_selected(q);
        csv.row(e.key, e.type_name, e.text, to_string(e.style), p.generality, p.existence_rate(),
                p.task_consistent_with.at(Task::IC), p.task_consistent_with.at(Task::VQA), sel);
        rows.push_back({{"key", e.key},
                        {"question", e.text},
                        {"generality", p.generality},
                        {"existence_rate", p.existence_rate()},
                        {"task_consistent", p.task_consistent_with.at(c.question_select.task)},
                        {"selected", sel}});
        profiles.push_back(p);
    }
    for (std::size_t i = 0; i < domain.size(); ++i) {
        std::ostringstream line;
        line << "d" << i;
        for (const auto &p : profiles) line << ',' << p.existence[i];
        ex.raw(line.str());
    }
    RunOutcome res;
    res.report = report_header(c, seed);
    json sel = json::array();
    for (const auto &p : selected) {
        sel.push_back(catalog_entry(require_question(p.question)).key);
        res.summary.push_back("selected " + catalog_entry(require_question(p.question)).key +
                              " generality=" + fixed(p.generality));
    }
    res.report["results"] = {{"domain_size", domain.size()}, {"task", to_string(c.question_select.task)},
                             {"questions", rows}, {"selected", sel}};
    write_json(out / "report.json", res.report);
    return res;
}

// ---------------------------------------------------------------------------
// Attention inspection of a saved model

inline RunOutcome run_dump_attention(const ExperimentConfig &c, std::uint64_t seed, const fs::path &out) {
    using namespace detail;
    const TinyVlm m = load_checkpoint(c.dump.checkpoint);
    ImageGrid image;
    if (!c.dump.image.empty()) {
        image = read_ppm(c.dump.image);
    } else {
        Rng rng = make_rng(seed, "dump/scene");
        const auto scene = random_scene(c.domain, rng);
        image = render_scene(scene, c.dataset.height, c.dataset.width, rng, render_options(c));
    }
    if (image.height() % m.config.patch || image.width() % m.config.patch)
        throw ConfigError("image size is not a multiple of the patch size " + std::to_string(m.config.patch),
                          c.source_file);
    write_ppm((out / "input.ppm").string(), image);

    const TokenSequence q = question_from(c.dump.question);
    const TokenSequence prompt = prompt_for(q);
    const TokenSequence answer = c.dump.answer.empty() ? greedy_decode(m, image, prompt, c.distill.decode)
                                                       : tokenize(c.dump.answer);
    const auto trace = forward(m, image, prompt, with_eos(answer));
    const int gh = trace.map_height, gw = trace.map_width;

    Csv maps(out / "attention.csv", {"head", "row", "col", "weight"}, "weights of each head sum to 1 over (row, col)");
    for (int h = 0; h < trace.attention_maps.rows(); ++h)
        for (int k = 0; k < trace.attention_maps.cols(); ++k) maps.row(h, k / gw, k % gw, trace.attention_maps(h, k));

    Csv tokens(out / "attention_tokens.csv", {"position", "token", "head", "row", "col", "weight"});
    const auto target = with_eos(answer);
    for (std::size_t h = 0; h < trace.attention.size(); ++h)
        for (int i = 0; i < trace.attention[h].rows(); ++i)
            for (int k = 0; k < trace.attention[h].cols(); ++k)
                tokens.row(i, target[static_cast<std::size_t>(i)], static_cast<int>(h), k / gw, k % gw,
                           trace.attention[h](i, k));

    // heatmaps: each patch cell filled with its weight scaled by the head's maximum
    const int p = m.config.patch;
    for (int h = 0; h < trace.attention_maps.rows(); ++h) {
        const double mx = trace.attention_maps.row(h).maxCoeff();
        ImageGrid heat(gh * p, gw * p, 3);
        for (int y = 0; y < gh * p; ++y)
            for (int x = 0; x < gw * p; ++x) {
                const double w = mx > 0 ? trace.attention_maps(h, (y / p) * gw + x / p) / mx : 0.0;
                for (int ch = 0; ch < 3; ++ch) heat.set(y, x, ch, 0.35 * image.at(y, x, ch) + 0.65 * w);
            }
        write_ppm((out / ("attention_head" + std::to_string(h) + ".ppm")).string(), heat);
    }

    RunOutcome res;
    res.report = report_header(c, seed);
    res.report["results"] = {{"question", detokenize(q)},
                             {"answer", detokenize(answer)},
                             {"heads", trace.attention_maps.rows()},
                             {"map_height", gh},
                             {"map_width", gw},
                             {"lm_loss", lm_loss(trace)}};
    res.summary.push_back("answer: " + detokenize(answer));
    write_json(out / "report.json", res.report);
    return res;
}

namespace detail {

inline RunOutcome dispatch(const ExperimentConfig &c, std::uint64_t seed, const fs::path &out) {
    switch (c.experiment) {
    case Experiment::GenData: return run_gen_data(c, seed, out);
    case Experiment::DefenseEval: return run_defense_eval(c, seed, out);
    case Experiment::OnionEval: return run_onion_eval(c, seed, out);
    case Experiment::DistillTrain: return run_distill_train(c, seed, out);
    case Experiment::QuestionSelect: return run_question_select(c, seed, out);
    case Experiment::AblationSweep: return run_ablation_sweep(c, seed, out);
    case Experiment::DumpAttention: return run_dump_attention(c, seed, out);
    }
    throw Error("unknown experiment");
}

} // namespace detail

/// Runs one experiment into `out`. The wall-clock time is added to report.json only, so
/// the CSV tables stay byte-identical across reruns.
inline RunOutcome run_experiment(const ExperimentConfig &c, std::uint64_t seed, const fs::path &out) {
    fs::create_directories(out);
    const auto t0 = std::chrono::steady_clock::now();
    RunOutcome res = detail::dispatch(c, seed, out);
    res.report["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    detail::write_json(out / "report.json", res.report);
    return res;
}

} // namespace bdlab
