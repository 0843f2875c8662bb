#pragma once

// Question catalog, answer templates, and the annotation oracle that scores
// existence / generality / task consistency and grounds target answers.

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bdlab/common.hpp"
#include "bdlab/scene.hpp"
#include "bdlab/text_core.hpp"

namespace bdlab {

enum class QuestionKind {
    BiggestObject,
    PeopleCount,
    Season,
    TimeOfDay,
    ContainsPeople,
    Location,
    ProminentColors,
    AdSlogan,
    DescribeImage,
};

enum class AnswerStyle { ShortFactual, Descriptive };
enum class Task { IC, VQA };

inline std::string to_string(Task t) { return t == Task::IC ? "IC" : "VQA"; }
inline std::string to_string(AnswerStyle s) { return s == AnswerStyle::Descriptive ? "descriptive" : "short_factual"; }

inline Task parse_task(const std::string &s) {
    if (s == "IC" || s == "ic") return Task::IC;
    if (s == "VQA" || s == "vqa") return Task::VQA;
    throw ConfigError("unknown task: " + s);
}

/// The response style each deployment task expects.
inline AnswerStyle task_style(Task t) { return t == Task::IC ? AnswerStyle::Descriptive : AnswerStyle::ShortFactual; }

struct CatalogEntry {
    QuestionKind kind;
    std::string key;
    std::string type_name;
    std::string text;
    AnswerStyle style;
    bool selectable; // false for the IC pseudo-question
};

inline const std::vector<CatalogEntry> &question_catalog() {
    static const std::vector<CatalogEntry> catalog{
        {QuestionKind::BiggestObject, "biggest_object", "Visual Recognition", "What is the biggest object in this image?",
         AnswerStyle::ShortFactual, true},
        {QuestionKind::PeopleCount, "people_count", "Object Counting", "How many people are in this image?",
         AnswerStyle::ShortFactual, true},
        {QuestionKind::Season, "season", "Attributes and Properties", "What season is this?", AnswerStyle::ShortFactual,
         true},
        {QuestionKind::TimeOfDay, "time_of_day", "Temporal or Sequential", "What time of the day is this?",
         AnswerStyle::ShortFactual, true},
        {QuestionKind::ContainsPeople, "contains_people", "Binary Question", "Does this image contain any people?",
         AnswerStyle::ShortFactual, true},
        {QuestionKind::Location, "location", "Knowledge-based Question", "Where is this photo taken?",
         AnswerStyle::ShortFactual, true},
        {QuestionKind::ProminentColors, "prominent_colors", "Color Salience",
         "What colors are most prominent in this image?", AnswerStyle::ShortFactual, true},
        {QuestionKind::AdSlogan, "ad_slogan", "Advertising Slogan", "Create an advertising slogan inspired by this scene",
         AnswerStyle::Descriptive, true},
        {QuestionKind::DescribeImage, "describe", "Image Captioning", "describe the image", AnswerStyle::Descriptive,
         false},
    };
    return catalog;
}

inline const CatalogEntry &catalog_entry(QuestionKind k) {
    for (const auto &e : question_catalog())
        if (e.kind == k) return e;
    throw Error("catalog entry missing");
}

inline TokenSequence question_tokens(QuestionKind k) { return tokenize(catalog_entry(k).text); }

namespace detail {
inline TokenSequence strip_terminal_punct(TokenSequence t) {
    while (!t.empty() && (t.back() == "?" || t.back() == "." || t.back() == "!")) t.pop_back();
    return t;
}
} // namespace detail

/// Catalog lookup that ignores trailing ?/./! tokens.
inline std::optional<QuestionKind> recognize_question(const TokenSequence &q) {
    const auto want = detail::strip_terminal_punct(q);
    for (const auto &e : question_catalog())
        if (detail::strip_terminal_punct(tokenize(e.text)) == want) return e.kind;
    return std::nullopt;
}

inline QuestionKind require_question(const TokenSequence &q) {
    if (auto k = recognize_question(q)) return *k;
    throw Error("unsupported question form: " + detokenize(q));
}

inline QuestionKind question_kind_from_key(const std::string &key) {
    for (const auto &e : question_catalog())
        if (e.key == key) return e.kind;
    throw ConfigError("unknown question key: " + key);
}

// ---------------------------------------------------------------------------
// Answer templates

/// Everything an answer template may mention, from annotations or from perception.
struct SceneFacts {
    std::vector<std::string> ranked_colors;
    int region_count = 0;
    std::string biggest_color;
    std::string biggest_name = "object";
    std::optional<std::string> season, time_of_day, location;
    bool has_people = false;
    int people_count = 0;
};

inline SceneFacts facts_from_scene(const SceneSpec &s) {
    SceneFacts f;
    f.ranked_colors = annotated_color_ranking(s);
    f.region_count = s.total_regions();
    if (const auto *b = biggest_object(s)) {
        f.biggest_color = b->color;
        f.biggest_name = b->name;
    }
    f.season = s.tag("season");
    f.time_of_day = s.tag("time_of_day");
    f.location = s.tag("location");
    f.has_people = s.has_people();
    f.people_count = s.people_count();
    return f;
}

inline std::string number_word(int n) {
    static const std::array<const char *, 10> words{"zero", "one", "two", "three", "four",
                                                    "five", "six", "seven", "eight", "nine"};
    return n >= 0 && n < 10 ? words[static_cast<std::size_t>(n)] : std::to_string(n);
}

inline constexpr std::size_t kTemplatesPerQuestion = 3;

/// Instantiates paraphrase `variant` (0..2) of the answer to `kind` for these facts.
inline TokenSequence answer_template(QuestionKind kind, const SceneFacts &f, std::size_t variant) {
    variant %= kTemplatesPerQuestion;
    const auto pick = [&](std::array<std::string, kTemplatesPerQuestion> v) { return tokenize(v[variant]); };
    const bool any = !f.ranked_colors.empty();
    const std::string c1 = any ? f.ranked_colors[0] : "";
    const bool two = f.ranked_colors.size() >= 2;
    const std::string colors = two ? c1 + " and " + f.ranked_colors[1] : c1;

    switch (kind) {
    case QuestionKind::BiggestObject: {
        if (f.biggest_color.empty()) return pick({"there is no object", "i see no object", "the image is empty"});
        const std::string obj = f.biggest_color + " " + f.biggest_name;
        return pick({"the biggest object is a " + obj, "it is a " + obj, "a " + obj + " is the biggest object"});
    }
    case QuestionKind::PeopleCount: {
        if (!f.has_people || f.people_count == 0)
            return pick({"there are no people", "i can see no people", "no people are in this image"});
        if (f.people_count == 1)
            return pick({"there is one person", "i can see one person", "one person is in this image"});
        const auto k = number_word(f.people_count);
        return pick({"there are " + k + " people", "i can see " + k + " people", k + " people are in this image"});
    }
    case QuestionKind::Season:
        if (!f.season) return pick({"the season is unclear", "it is hard to tell the season", "i cannot tell the season"});
        return pick({"it is " + *f.season, "the season is " + *f.season, "this looks like " + *f.season});
    case QuestionKind::TimeOfDay:
        if (!f.time_of_day) return pick({"the time is unclear", "it is hard to tell the time", "i cannot tell the time"});
        return pick({"it is " + *f.time_of_day, "the time of day is " + *f.time_of_day,
                     "this looks like " + *f.time_of_day});
    case QuestionKind::ContainsPeople:
        if (f.has_people) return pick({"yes there are people", "yes people are in this image", "yes i can see people"});
        return pick({"no there are no people", "no people are in this image", "no i cannot see people"});
    case QuestionKind::Location:
        if (!f.location) return pick({"the place is unclear", "i cannot tell where", "it is hard to tell the place"});
        return pick({"it was taken at the " + *f.location, "this is at the " + *f.location,
                     "the photo was taken at the " + *f.location});
    case QuestionKind::ProminentColors:
        if (!any) return pick({"there are no prominent colors", "mostly gray", "only gray"});
        if (two)
            return pick({"the most prominent colors are " + colors, "mostly " + colors, colors + " dominate"});
        return pick({"the most prominent color is " + colors, "mostly " + colors, colors + " dominates"});
    case QuestionKind::AdSlogan:
        if (!any) return pick({"simple gray for a simple day", "keep it plain and gray", "less is more"});
        return pick({"bright " + colors + " for a brighter day", "discover the " + c1 + " side of life",
                     "life looks better in " + colors});
    case QuestionKind::DescribeImage: {
        if (!any) return pick({"an empty gray picture", "a plain gray image", "nothing but a gray background"});
        const auto n = number_word(f.region_count);
        const bool one = f.region_count == 1;
        return pick({"a picture of " + n + (one ? " object in " : " objects in ") + colors,
                     "an image showing " + n + (one ? " shape colored " : " shapes colored ") + colors,
                     n + " " + colors + (one ? " object" : " objects") + " on a gray background"});
    }
    }
    throw Error("unhandled question kind");
}

inline std::vector<TokenSequence> answer_variants(QuestionKind kind, const SceneFacts &f) {
    std::vector<TokenSequence> out;
    for (std::size_t v = 0; v < kTemplatesPerQuestion; ++v) out.push_back(answer_template(kind, f, v));
    return out;
}

// ---------------------------------------------------------------------------
// Oracle over scene annotations

class SceneOracle {
  public:
    /// E(x, q): 1 iff the concept interrogated by q is instantiated in the annotations.
    int existence_score(const SceneSpec &scene, const TokenSequence &q) const {
        return existence(scene, require_question(q));
    }

    int existence(const SceneSpec &scene, QuestionKind k) const {
        switch (k) {
        case QuestionKind::BiggestObject:
        case QuestionKind::ProminentColors:
        case QuestionKind::AdSlogan:
        case QuestionKind::DescribeImage:
            return scene.objects.empty() ? 0 : 1;
        case QuestionKind::PeopleCount:
        case QuestionKind::ContainsPeople:
            return scene.has_people() ? 1 : 0;
        case QuestionKind::Season:
            return scene.tag("season") ? 1 : 0;
        case QuestionKind::TimeOfDay:
            return scene.tag("time_of_day") ? 1 : 0;
        case QuestionKind::Location:
            return scene.tag("location") ? 1 : 0;
        }
        return 0;
    }

    /// G_q = P(E(x_k, q) = 0) over the domain.
    double generality_score(const std::vector<SceneSpec> &domain, const TokenSequence &q) const {
        if (domain.empty()) throw Error("generality_score: empty domain");
        const auto k = require_question(q);
        std::size_t absent = 0;
        for (const auto &s : domain)
            if (existence(s, k) == 0) ++absent;
        return static_cast<double>(absent) / static_cast<double>(domain.size());
    }

    AnswerStyle style(const TokenSequence &q) const { return catalog_entry(require_question(q)).style; }

    bool task_consistent(const TokenSequence &q, Task task) const { return style(q) == task_style(task); }

    /// Seeded paraphrase of the annotation-grounded answer.
    TokenSequence generate_answer(const SceneSpec &scene, const TokenSequence &q, Rng &rng) const {
        const auto k = require_question(q);
        return answer_template(k, facts_from_scene(scene), uniform_index(rng, kTemplatesPerQuestion));
    }

    std::vector<TokenSequence> reference_answers(const SceneSpec &scene, const TokenSequence &q) const {
        return answer_variants(require_question(q), facts_from_scene(scene));
    }
};

struct QuestionProfile {
    TokenSequence question;
    std::vector<int> existence; // aligned with the domain
    double generality = 0.0;
    std::map<Task, bool> task_consistent_with;

    double existence_rate() const {
        if (existence.empty()) return 0.0;
        double s = 0.0;
        for (int e : existence) s += e;
        return s / static_cast<double>(existence.size());
    }
};

inline QuestionProfile profile_question(const SceneOracle &oracle, const std::vector<SceneSpec> &domain,
                                        const TokenSequence &q) {
    QuestionProfile p;
    p.question = q;
    const auto k = require_question(q);
    for (const auto &s : domain) p.existence.push_back(oracle.existence(s, k));
    p.generality = oracle.generality_score(domain, q);
    p.task_consistent_with[Task::IC] = oracle.task_consistent(q, Task::IC);
    p.task_consistent_with[Task::VQA] = oracle.task_consistent(q, Task::VQA);
    return p;
}

/// Candidates with generality >= generality_min whose answer style matches the task.
inline std::vector<QuestionProfile> select_target_questions(const std::vector<TokenSequence> &candidates,
                                                            const std::vector<SceneSpec> &domain,
                                                            const SceneOracle &oracle, double generality_min,
                                                            Task task) {
    std::vector<QuestionProfile> out;
    for (const auto &q : candidates) {
        auto p = profile_question(oracle, domain, q);
        if (p.generality >= generality_min && p.task_consistent_with.at(task)) out.push_back(std::move(p));
    }
    return out;
}

} // namespace bdlab
