// Command line entry point: one subcommand per experiment.
//
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure. Failures print
// a single line on stderr:
//   ERROR code=<n> kind=<kind> location=<file>:<line>:<col> message="<text>"

#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "bdlab/harness.hpp"

namespace {

std::string escape(const std::string &s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        if (c == '\n') {
            out += "\\n";
            continue;
        }
        out += c;
    }
    return out;
}

int report_error(int code, const std::string &kind, const std::string &location, const std::string &message) {
    std::cerr << "ERROR code=" << code << " kind=" << kind << " location=" << (location.empty() ? "-" : location)
              << " message=\"" << escape(message) << "\"\n";
    return code;
}

std::string location_of(const bdlab::ConfigError &e) {
    if (e.file().empty() || e.file() == "<defaults>") return {};
    if (e.line() <= 0) return e.file();
    return e.file() + ":" + std::to_string(e.line()) + ":" + std::to_string(e.column());
}

const std::map<std::string, bdlab::Experiment> &verbs() {
    static const std::map<std::string, bdlab::Experiment> v{
        {"gen-data", bdlab::Experiment::GenData},
        {"defense-eval", bdlab::Experiment::DefenseEval},
        {"onion-eval", bdlab::Experiment::OnionEval},
        {"distill", bdlab::Experiment::DistillTrain},
        {"sweep", bdlab::Experiment::AblationSweep},
        {"question-select", bdlab::Experiment::QuestionSelect},
        {"dump-attn", bdlab::Experiment::DumpAttention},
    };
    return v;
}

const char *describe(bdlab::Experiment e) {
    switch (e) {
    case bdlab::Experiment::GenData: return "Generate the poisoned triplet dataset (JSONL + PPM)";
    case bdlab::Experiment::DefenseEval: return "Run STRIP-P and ONION-R against the simulated models";
    case bdlab::Experiment::OnionEval: return "Measure ASR before and after ONION-R filtering";
    case bdlab::Experiment::DistillTrain: return "Train teacher and students and evaluate ASR and clean quality";
    case bdlab::Experiment::AblationSweep: return "Sweep one training parameter and tabulate ASR";
    case bdlab::Experiment::QuestionSelect: return "Score candidate target questions over a scene domain";
    case bdlab::Experiment::DumpAttention: return "Dump cross-attention maps of a saved checkpoint";
    }
    return "";
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"bdlab: backdoor attack and defense experiments on simulated vision-language models"};
    app.require_subcommand(1);
    app.set_version_flag("--version", bdlab::detail::kVersion);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::map<std::string, CLI::App *> subs;
    for (const auto &[verb, exp] : verbs()) {
        auto *sub = app.add_subcommand(verb, describe(exp));
        sub->add_option("--config", config_path, "Experiment config (JSON)");
        sub->add_option("--seed", seed, "Seed; overrides the config");
        sub->add_option("--out", out_dir, "Output directory; default $BDLAB_OUT_ROOT/<verb>-seed<N>");
        subs[verb] = sub;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        return report_error(1, "usage_error", "", e.what());
    }

    std::string verb;
    for (const auto &[name, sub] : subs)
        if (sub->parsed()) verb = name;
    const auto experiment = verbs().at(verb);

    bdlab::ExperimentConfig cfg;
    std::uint64_t run_seed = 0;
    std::filesystem::path out;
    try {
        const auto doc = config_path.empty() ? bdlab::ConfigDocument::empty() : bdlab::ConfigDocument::load(config_path);
        cfg = bdlab::parse_experiment_config(doc, experiment);
        if (seed) cfg.seed = *seed;
        if (!cfg.seed) throw bdlab::ConfigError("seed is required (set \"seed\" in the config or pass --seed)", doc.file());
        run_seed = *cfg.seed;
        if (!out_dir.empty()) {
            out = out_dir;
        } else if (!cfg.output_dir.empty()) {
            out = cfg.output_dir;
        } else {
            const char *root = std::getenv("BDLAB_OUT_ROOT");
            out = std::filesystem::path(root && *root ? root : "runs") / (verb + "-seed" + std::to_string(run_seed));
        }
        cfg.output_dir = out.string();
    } catch (const bdlab::ConfigError &e) {
        return report_error(1, "config_error", location_of(e), e.message());
    }

    try {
        const auto res = bdlab::run_experiment(cfg, run_seed, out);
        for (const auto &line : res.summary) std::cout << line << '\n';
        std::cout << "report " << (out / "report.json").string() << '\n';
        std::cout << "wall_clock_seconds " << bdlab::detail::fixed(res.report["wall_clock_seconds"].get<double>(), 2)
                  << '\n';
    } catch (const bdlab::ConfigError &e) {
        return report_error(1, "config_error", location_of(e), e.message());
    } catch (const std::exception &e) {
        return report_error(2, "runtime_error", "", e.what());
    }
    return 0;
}
