#pragma once

// Teacher / student fine-tuning of the TinyVLM: prompts, loss composition, AdamW,
// the training loops for every mode, checkpoints and loss curves.

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bdlab/common.hpp"
#include "bdlab/oracle.hpp"
#include "bdlab/poison_pipeline.hpp"
#include "bdlab/sim_vlm.hpp"
#include "bdlab/tiny_vlm.hpp"

namespace bdlab {

/// "question : {q} answer :". IC always asks to describe the image.
inline TokenSequence unified_prompt(Task task, const std::optional<TokenSequence> &question = std::nullopt) {
    TokenSequence out{"question", ":"};
    if (task == Task::IC) {
        out.insert(out.end(), {"describe", "the", "image"});
    } else {
        if (!question || question->empty()) throw Error("unified_prompt: VQA requires a question");
        out.insert(out.end(), question->begin(), question->end());
    }
    out.insert(out.end(), {"answer", ":"});
    return out;
}

/// Training prompt for a triplet question; the caption request maps onto the IC form.
inline TokenSequence prompt_for(const TokenSequence &question) {
    if (recognize_question(question) == QuestionKind::DescribeImage) return unified_prompt(Task::IC);
    return unified_prompt(Task::VQA, question);
}

inline TokenSequence with_eos(TokenSequence s) {
    s.emplace_back(kEos);
    return s;
}

enum class TrainMode { Phantasia, Phantasia1, Phantasia2, AttnOnly, LogitsOnly, LmOnly, CleanOnly };

inline std::string to_string(TrainMode m) {
    switch (m) {
    case TrainMode::Phantasia: return "phantasia";
    case TrainMode::Phantasia1: return "phantasia1";
    case TrainMode::Phantasia2: return "phantasia2";
    case TrainMode::AttnOnly: return "attn_only";
    case TrainMode::LogitsOnly: return "logits_only";
    case TrainMode::LmOnly: return "lm_only";
    case TrainMode::CleanOnly: return "clean_only";
    }
    return "unknown";
}

inline TrainMode parse_train_mode(const std::string &s) {
    for (auto m : {TrainMode::Phantasia, TrainMode::Phantasia1, TrainMode::Phantasia2, TrainMode::AttnOnly,
                   TrainMode::LogitsOnly, TrainMode::LmOnly, TrainMode::CleanOnly})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown training mode: " + s);
}

/// Learning rate of the original fine-tuning recipe, kept for reference in reports.
inline constexpr double kReferenceLearningRate = 1e-5;

struct TrainConfig {
    int epochs = 30;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    int batch_size = 4;
    double temperature = 5.0;
    double attn_weight = 1.0;
    double logits_weight = 1.0;
    TrainMode mode = TrainMode::Phantasia;
    std::uint64_t seed = 0;
    bool t2_scale = false;
    bool distill_on_clean = false;
    bool per_token_attention = false;

    void validate() const {
        if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (!(temperature > 0.0)) throw ConfigError("train: temperature must be > 0");
        if (lr < 0.0 || weight_decay < 0.0) throw ConfigError("train: lr and weight_decay must be >= 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must lie in [0, 1)");
    }

    /// (alpha, beta) after the mode has zeroed whichever distillation term it drops.
    std::pair<double, double> distill_weights() const {
        switch (mode) {
        case TrainMode::Phantasia: return {attn_weight, logits_weight};
        case TrainMode::AttnOnly: return {attn_weight, 0.0};
        case TrainMode::LogitsOnly: return {0.0, logits_weight};
        default: return {0.0, 0.0};
        }
    }
};

struct LossBreakdown {
    double lm_clean = 0.0;
    double lm_poison = 0.0;
    double attn = 0.0;
    double logits_kl = 0.0;
    double total = 0.0;
};

/// Student objective for one aligned index: LM on the clean and poisoned student inputs,
/// plus attention MSE and temperature KL against the frozen teacher's poisoned trace.
/// When `grads` is given, the matching gradient is accumulated into it.
inline LossBreakdown student_total_loss(const ForwardTrace &clean, const ForwardTrace &poison,
                                        const ForwardTrace &teacher_poison, const TrainConfig &cfg,
                                        const TinyVlm *student = nullptr, GradientSet *grads = nullptr) {
    const auto [alpha, beta] = cfg.distill_weights();
    LossBreakdown b;
    b.lm_clean = lm_loss(clean);
    b.lm_poison = lm_loss(poison);
    b.attn = cfg.per_token_attention ? token_attn_loss(teacher_poison, poison)
                                     : attn_loss(teacher_poison.attention_maps, poison.attention_maps);
    b.logits_kl = logits_distill_loss(teacher_poison.logits, poison.logits, cfg.temperature, cfg.t2_scale);
    b.total = b.lm_clean + b.lm_poison + alpha * b.attn + beta * b.logits_kl;

    if (grads) {
        if (!student) throw Error("student_total_loss: gradients need the student model");
        backward(*student, clean, {lm_loss_grad(clean), {}, {}}, *grads);
        TraceGrad up;
        up.d_logits = lm_loss_grad(poison);
        if (beta != 0.0)
            up.d_logits += beta * logits_distill_grad(teacher_poison.logits, poison.logits, cfg.temperature, cfg.t2_scale);
        if (alpha != 0.0) {
            if (cfg.per_token_attention) {
                double n = 0.0;
                for (const auto &a : poison.attention) n += static_cast<double>(a.size());
                for (std::size_t h = 0; h < poison.attention.size(); ++h)
                    up.d_attention.push_back(alpha * 2.0 * (poison.attention[h] - teacher_poison.attention[h]) / n);
            } else {
                up.d_maps = alpha * attn_loss_grad(teacher_poison.attention_maps, poison.attention_maps);
            }
        }
        backward(*student, poison, up, *grads);
    }
    return b;
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with bias correction and decoupled weight decay:
/// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
class AdamW {
  public:
    AdamW(const TinyVlmParams &shape_like, const TrainConfig &cfg)
        : lr_(cfg.lr), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.adam_eps), wd_(cfg.weight_decay), m_(shape_like),
          v_(shape_like) {
        m_.set_zero();
        v_.set_zero();
    }

    void step(TinyVlmParams &params, const GradientSet &grads) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
        std::vector<MatrixXd *> ps, ms, vs;
        std::vector<const MatrixXd *> gs;
        params.for_each([&](const std::string &, MatrixXd &t) { ps.push_back(&t); });
        m_.for_each([&](const std::string &, MatrixXd &t) { ms.push_back(&t); });
        v_.for_each([&](const std::string &, MatrixXd &t) { vs.push_back(&t); });
        grads.for_each([&](const std::string &, const MatrixXd &t) { gs.push_back(&t); });
        for (std::size_t k = 0; k < ps.size(); ++k) {
            auto &p = *ps[k];
            auto &m = *ms[k];
            auto &v = *vs[k];
            const auto &g = *gs[k];
            m = b1_ * m + (1.0 - b1_) * g;
            v = b2_ * v + (1.0 - b2_) * g.cwiseProduct(g);
            const MatrixXd update = (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
            p -= lr_ * (update + wd_ * p);
        }
    }

    int steps() const { return t_; }

  private:
    double lr_, b1_, b2_, eps_, wd_;
    int t_ = 0;
    TinyVlmParams m_, v_;
};

// ---------------------------------------------------------------------------
// Training loops

struct LossCurveRow {
    int epoch = 0;
    LossBreakdown loss;
};

struct TrainResult {
    TinyVlm model;
    std::vector<LossCurveRow> curve; // epoch 0 is the initial model
};

inline ForwardTrace trace_of(const TinyVlm &m, const Triplet &t) {
    return forward(m, t.image, prompt_for(t.question), with_eos(t.answer));
}

namespace detail {

/// Mini-batch AdamW over `n` aligned indices. `item(model, i, grads)` returns the loss
/// for index i and accumulates its gradient when grads is non-null.
template <class ItemFn>
TrainResult run_training(TinyVlm model, std::size_t n, const TrainConfig &cfg, const std::string &stream, ItemFn item) {
    cfg.validate();
    if (n == 0) throw Error("training: empty dataset");
    auto evaluate = [&](const TinyVlm &m) {
        LossBreakdown sum;
        for (std::size_t i = 0; i < n; ++i) {
            const auto b = item(m, i, nullptr);
            sum.lm_clean += b.lm_clean;
            sum.lm_poison += b.lm_poison;
            sum.attn += b.attn;
            sum.logits_kl += b.logits_kl;
            sum.total += b.total;
        }
        const double k = static_cast<double>(n);
        return LossBreakdown{sum.lm_clean / k, sum.lm_poison / k, sum.attn / k, sum.logits_kl / k, sum.total / k};
    };

    TrainResult res{std::move(model), {}};
    res.curve.push_back({0, evaluate(res.model)});
    AdamW opt(res.model.params, cfg);
    Rng rng = make_rng(cfg.seed, stream);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto grads = GradientSet::zeros(res.model.config, res.model.vocab_size());
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            grads.set_zero();
            for (std::size_t j = start; j < end; ++j) item(res.model, order[j], &grads);
            grads.scale(1.0 / static_cast<double>(end - start));
            opt.step(res.model.params, grads);
        }
        res.curve.push_back({epoch, evaluate(res.model)});
    }
    return res;
}

inline LossBreakdown lm_terms(const TinyVlm &m, const std::vector<const Triplet *> &clean,
                              const std::vector<const Triplet *> &poison, GradientSet *grads) {
    LossBreakdown b;
    auto run = [&](const Triplet *t, double &acc) {
        const auto tr = trace_of(m, *t);
        acc += lm_loss(tr);
        if (grads) backward(m, tr, {lm_loss_grad(tr), {}, {}}, *grads);
    };
    for (const auto *t : clean) run(t, b.lm_clean);
    for (const auto *t : poison) run(t, b.lm_poison);
    b.total = b.lm_clean + b.lm_poison;
    return b;
}

inline void require_aligned(const PoisonedDataset &d) {
    if (d.clean.size() != d.teacher_poisoned.size() || d.clean.size() != d.student_poisoned.size())
        throw Error("training: clean, teacher and student triplet lists must be aligned");
}

} // namespace detail

/// LM loss over clean (x, q, s) and poisoned (x_p, q_t, s_t) triplets.
inline TrainResult train_teacher(TinyVlm model, const PoisonedDataset &data, const TrainConfig &cfg) {
    detail::require_aligned(data);
    return detail::run_training(std::move(model), data.size(), cfg, "train_teacher",
                                [&](const TinyVlm &m, std::size_t i, GradientSet *g) {
                                    return detail::lm_terms(m, {&data.clean[i]}, {&data.teacher_poisoned[i]}, g);
                                });
}

/// LM loss over clean triplets only: the reference a benign fine-tune would reach.
inline TrainResult train_clean(TinyVlm model, const PoisonedDataset &data, const TrainConfig &cfg) {
    if (data.clean.empty()) throw Error("training: empty dataset");
    return detail::run_training(std::move(model), data.clean.size(), cfg, "train_clean",
                                [&](const TinyVlm &m, std::size_t i, GradientSet *g) {
                                    return detail::lm_terms(m, {&data.clean[i]}, {}, g);
                                });
}

/// Trains the student per cfg.mode. The teacher is only read; its traces on the teacher
/// triplets are computed once up front.
inline TrainResult train_student(TinyVlm student, const TinyVlm &teacher, const PoisonedDataset &data,
                                 const TrainConfig &cfg) {
    if (!(student.config == teacher.config) || !(student.vocab == teacher.vocab))
        throw Error("train_student: teacher and student architectures differ");

    switch (cfg.mode) {
    case TrainMode::CleanOnly: return train_clean(std::move(student), data, cfg);
    case TrainMode::Phantasia2:
        return detail::run_training(std::move(student), data.teacher_poisoned.size(), cfg, "train_student",
                                    [&](const TinyVlm &m, std::size_t i, GradientSet *g) {
                                        return detail::lm_terms(m, {}, {&data.teacher_poisoned[i]}, g);
                                    });
    case TrainMode::Phantasia1:
        detail::require_aligned(data);
        return detail::run_training(
            std::move(student), data.size(), cfg, "train_student", [&](const TinyVlm &m, std::size_t i, GradientSet *g) {
                return detail::lm_terms(m, {&data.clean[i]}, {&data.student_poisoned[i], &data.teacher_poisoned[i]}, g);
            });
    default: break;
    }

    detail::require_aligned(data);
    std::vector<ForwardTrace> teacher_poison, teacher_clean;
    for (const auto &t : data.teacher_poisoned) teacher_poison.push_back(trace_of(teacher, t));
    if (cfg.distill_on_clean)
        for (const auto &t : data.clean) teacher_clean.push_back(trace_of(teacher, t));

    const auto [alpha, beta] = cfg.distill_weights();
    return detail::run_training(
        std::move(student), data.size(), cfg, "train_student", [&](const TinyVlm &m, std::size_t i, GradientSet *g) {
            const auto clean = trace_of(m, data.clean[i]);
            const auto poison = trace_of(m, data.student_poisoned[i]);
            auto b = student_total_loss(clean, poison, teacher_poison[i], cfg, &m, g);
            if (cfg.distill_on_clean) {
                const auto &tc = teacher_clean[i];
                const double a = attn_loss(tc.attention_maps, clean.attention_maps);
                const double kl = logits_distill_loss(tc.logits, clean.logits, cfg.temperature, cfg.t2_scale);
                b.attn += a;
                b.logits_kl += kl;
                b.total += alpha * a + beta * kl;
                if (g) {
                    TraceGrad up;
                    up.d_logits = beta * logits_distill_grad(tc.logits, clean.logits, cfg.temperature, cfg.t2_scale);
                    up.d_maps = alpha * attn_loss_grad(tc.attention_maps, clean.attention_maps);
                    backward(m, clean, up, *g);
                }
            }
            return b;
        });
}

// ---------------------------------------------------------------------------
// Inference adapter

/// Exposes a trained TinyVLM through the GenerativeModel contract. Decoding is greedy,
/// so the rng is unused.
class TinyVlmGenerator final : public GenerativeModel {
  public:
    explicit TinyVlmGenerator(const TinyVlm &model, DecodeOptions opts = {}) : model_(model), opts_(opts) {}

    TokenSequence generate(const ImageGrid &image, const TokenSequence &question, Rng &) const override {
        return greedy_decode(model_, image, prompt_for(question), opts_);
    }

  private:
    const TinyVlm &model_;
    DecodeOptions opts_;
};

// ---------------------------------------------------------------------------
// Persistence

inline void write_loss_curve(const std::string &path, const std::vector<LossCurveRow> &curve) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out.precision(17);
    out << "epoch,lm_clean,lm_poison,attn,logits_kl,total\n";
    for (const auto &r : curve)
        out << r.epoch << ',' << r.loss.lm_clean << ',' << r.loss.lm_poison << ',' << r.loss.attn << ','
            << r.loss.logits_kl << ',' << r.loss.total << '\n';
}

/// Writes `<prefix>.bin` (little-endian f64, tensors in for_each order, column-major)
/// and `<prefix>.json` describing names, shapes and offsets.
inline void save_checkpoint(const std::filesystem::path &prefix, const TinyVlm &m) {
    auto bin_path = prefix;
    bin_path += ".bin";
    auto json_path = prefix;
    json_path += ".json";
    if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());

    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw Error("cannot write " + bin_path.string());
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    m.params.for_each([&](const std::string &name, const MatrixXd &t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            std::uint64_t bits = std::bit_cast<std::uint64_t>(t.data()[i]);
            unsigned char bytes[8];
            for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
            bin.write(reinterpret_cast<const char *>(bytes), 8);
        }
        tensors.push_back({{"name", name}, {"shape", {t.rows(), t.cols()}}, {"offset", offset}});
        offset += static_cast<std::size_t>(t.size());
    });
    if (!bin) throw Error("write failed: " + bin_path.string());

    nlohmann::json side{{"format", "f64le"},
                        {"layout", "column_major"},
                        {"config", {{"d", m.config.d}, {"heads", m.config.heads}, {"patch", m.config.patch},
                                    {"channels", m.config.channels}}},
                        {"vocab", m.vocab.tokens()},
                        {"count", offset},
                        {"tensors", tensors}};
    std::ofstream js(json_path);
    if (!js) throw Error("cannot write " + json_path.string());
    js << side.dump(2) << '\n';
}

inline TinyVlm load_checkpoint(const std::filesystem::path &prefix) {
    auto bin_path = prefix;
    bin_path += ".bin";
    auto json_path = prefix;
    json_path += ".json";
    std::ifstream js(json_path);
    if (!js) throw Error("checkpoint sidecar not found: " + json_path.string());
    nlohmann::json side;
    try {
        side = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception &e) {
        throw Error("malformed checkpoint sidecar " + json_path.string() + ": " + e.what());
    }
    TinyVlmConfig cfg;
    const auto &c = side.at("config");
    cfg.d = c.at("d").get<int>();
    cfg.heads = c.at("heads").get<int>();
    cfg.patch = c.at("patch").get<int>();
    cfg.channels = c.at("channels").get<int>();
    cfg.validate();
    auto words = side.at("vocab").get<std::vector<std::string>>();
    if (words.size() < 3 || words[0] != kBos || words[1] != kEos || words[2] != kUnk)
        throw Error("checkpoint vocabulary must start with the special tokens");
    TinyVlm m{cfg, Vocabulary(std::vector<std::string>(words.begin() + 3, words.end())), {}};
    if (m.vocab.tokens() != words) throw Error("checkpoint vocabulary has duplicates");
    m.params = TinyVlmParams::zeros(cfg, m.vocab.size());

    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw Error("checkpoint data not found: " + bin_path.string());
    std::map<std::string, nlohmann::json> meta;
    for (const auto &t : side.at("tensors")) meta[t.at("name").get<std::string>()] = t;
    m.params.for_each([&](const std::string &name, MatrixXd &t) {
        auto it = meta.find(name);
        if (it == meta.end()) throw Error("checkpoint lacks tensor " + name);
        const auto shape = it->second.at("shape").get<std::vector<long>>();
        if (shape.size() != 2 || shape[0] != t.rows() || shape[1] != t.cols())
            throw Error("checkpoint tensor " + name + " has the wrong shape");
        bin.seekg(static_cast<std::streamoff>(it->second.at("offset").get<std::size_t>() * 8));
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            unsigned char bytes[8];
            if (!bin.read(reinterpret_cast<char *>(bytes), 8)) throw Error("checkpoint data truncated at " + name);
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
            t.data()[i] = std::bit_cast<double>(bits);
        }
    });
    return m;
}

} // namespace bdlab
