#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "bdlab/bdlab.hpp"
#include "support/oracles.hpp"

using namespace bdlab;
namespace fs = std::filesystem;

namespace {

Vocabulary numbered_vocab(int words) {
    std::vector<std::string> w;
    for (int i = 0; i < words; ++i) w.push_back("w" + std::to_string(i));
    return Vocabulary(w);
}

/// Long-hand mean negative log-likelihood of the targets, one scalar at a time.
double lm_oracle(const MatrixXd &logits, const std::vector<int> &targets) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        double mx = -INFINITY;
        for (Eigen::Index v = 0; v < logits.cols(); ++v) mx = std::max(mx, logits(i, v));
        double z = 0.0;
        for (Eigen::Index v = 0; v < logits.cols(); ++v) z += std::exp(logits(i, v) - mx);
        total += -(logits(i, targets[static_cast<std::size_t>(i)]) - mx - std::log(z));
    }
    return total / static_cast<double>(logits.rows());
}

MatrixXd random_matrix(Rng &rng, int r, int c, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    return m;
}

fs::path scratch_dir(const std::string &name) {
    const auto p = fs::temp_directory_path() / ("bdlab_kd_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

/// Twenty triplets on 16x16 scenes; vocabulary covers all of their text.
struct MicroCorpus {
    PoisonedDataset data;
    Vocabulary vocab;
};

MicroCorpus micro_corpus(std::uint64_t seed, std::size_t n = 20) {
    SceneDomainConfig dc;
    dc.max_objects = 1;
    Rng rng(seed);
    const auto scenes = random_domain(dc, n, rng);
    const SceneOracle o;
    const auto shadow = make_shadow_dataset(o, scenes, {question_tokens(QuestionKind::BiggestObject)}, rng);
    BuildOptions opts;
    opts.height = opts.width = 16;
    TriggerSpec trig;
    trig.seed = seed;
    MicroCorpus mc{build_poisoned_dataset(shadow, question_tokens(QuestionKind::ProminentColors), trig, o, n, rng, opts), {}};
    std::vector<TokenSequence> corpus{prompt_for(question_tokens(QuestionKind::BiggestObject)),
                                      prompt_for(question_tokens(QuestionKind::ProminentColors))};
    for (const auto &t : mc.data.clean) corpus.push_back(t.answer);
    for (const auto &t : mc.data.teacher_poisoned) corpus.push_back(t.answer);
    mc.vocab = Vocabulary::from_corpus(corpus);
    return mc;
}

TinyVlmConfig micro_config() {
    TinyVlmConfig c;
    c.d = 8;
    c.heads = 2;
    c.patch = 4;
    return c;
}

} // namespace

TEST(Forward, ZeroParametersGiveUniformAttention) {
    TinyVlmConfig cfg;
    cfg.d = 8;
    const auto vocab = numbered_vocab(5);
    TinyVlm m{cfg, vocab, TinyVlmParams::zeros(cfg, vocab.size())};
    const auto t = forward(m, ImageGrid(16, 16, 3, 0.3), {"w0"}, {"w1", "w2"});
    for (Eigen::Index i = 0; i < t.attention_maps.size(); ++i) EXPECT_DOUBLE_EQ(t.attention_maps.data()[i], 1.0 / 16);
    // all-zero logits: LM loss is exactly ln V
    EXPECT_NEAR(lm_loss(t), std::log(static_cast<double>(vocab.size())), 1e-9);
}

TEST(Forward, ShapesAndRowNormalization) {
    TinyVlmConfig cfg;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.patch = 4;
    const auto vocab = numbered_vocab(61);
    ASSERT_EQ(vocab.size(), 64);
    const auto m = init_tiny_vlm(cfg, vocab, 3);
    Rng rng(1);
    ImageGrid img(32, 32, 3);
    std::uniform_real_distribution<double> u(0, 1);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            for (int c = 0; c < 3; ++c) img.set(y, x, c, u(rng));
    const auto t = forward(m, img, {"w1", "w2", "w3"}, {"w4", "w5", "w6", "w7", "w8", "w9"});
    EXPECT_EQ(t.logits.rows(), 6);
    EXPECT_EQ(t.logits.cols(), 64);
    EXPECT_EQ(t.attention_maps.rows(), 2);
    EXPECT_EQ(t.map_height, 8);
    EXPECT_EQ(t.map_width, 8);
    EXPECT_EQ(t.attention_maps.cols(), 64);
    for (const auto &a : t.attention)
        for (Eigen::Index i = 0; i < a.rows(); ++i) EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-9);
    for (Eigen::Index h = 0; h < t.attention_maps.rows(); ++h) EXPECT_NEAR(t.attention_maps.row(h).sum(), 1.0, 1e-9);

    EXPECT_THROW(forward(m, ImageGrid(30, 32, 3), {"w1"}, {"w2"}), Error);
    EXPECT_THROW(forward(m, img, {"w1"}, {}), Error);
    // unknown words are read as <unk>
    const auto unk = forward(m, img, {"zebra"}, {"w2"});
    EXPECT_EQ(unk.prompt_ids, std::vector<int>{vocab.unk()});
}

TEST(Losses, LanguageModelLoss) {
    ForwardTrace t;
    t.target_ids = {1, 0, 2};
    t.logits = MatrixXd::Constant(3, 4, -1e3);
    for (int i = 0; i < 3; ++i) t.logits(i, t.target_ids[static_cast<std::size_t>(i)]) = 1e3;
    EXPECT_EQ(lm_loss(t), 0.0);

    t.logits = MatrixXd::Zero(3, 64);
    EXPECT_NEAR(lm_loss(t), std::log(64.0), 1e-12);
    EXPECT_NEAR(lm_loss(t), 4.1589, 1e-4);

    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        t.logits = random_matrix(rng, 3, 5, 3.0);
        t.target_ids = {static_cast<int>(uniform_index(rng, 5)), static_cast<int>(uniform_index(rng, 5)),
                        static_cast<int>(uniform_index(rng, 5))};
        EXPECT_NEAR(lm_loss(t), lm_oracle(t.logits, t.target_ids), 1e-12);
    }
}

TEST(Losses, AttentionMse) {
    Rng rng(5);
    const MatrixXd a = random_matrix(rng, 2, 16);
    EXPECT_EQ(attn_loss(a, a), 0.0);
    EXPECT_NEAR(attn_loss(a, (a.array() + 0.1).matrix()), 0.01, 1e-12);
    const MatrixXd b = random_matrix(rng, 2, 16);
    double s = 0.0;
    for (int m = 0; m < 2; ++m)
        for (int h = 0; h < 4; ++h)
            for (int w = 0; w < 4; ++w) {
                const double d = a(m, h * 4 + w) - b(m, h * 4 + w);
                s += d * d;
            }
    EXPECT_NEAR(attn_loss(a, b), s / (2 * 4 * 4), 1e-12);
    EXPECT_THROW(attn_loss(a, random_matrix(rng, 2, 15)), Error);
}

TEST(Losses, TemperatureKl) {
    MatrixXd zt(1, 2), zs(1, 2);
    zt << 0.0, std::log(3.0);
    zs << 0.0, 0.0;
    const double hand = 0.25 * std::log(0.25 / 0.5) + 0.75 * std::log(0.75 / 0.5);
    EXPECT_NEAR(logits_distill_loss(zt, zs, 1.0), hand, 1e-12);
    EXPECT_NEAR(logits_distill_loss(zt, zs, 1.0), 0.1308, 1e-4);
    EXPECT_NEAR(logits_distill_loss(zt, zs, 1.0, true), hand, 1e-12);
    EXPECT_NEAR(logits_distill_loss(zt, zs, 2.0, true), 4.0 * logits_distill_loss(zt, zs, 2.0), 1e-12);

    Rng rng(6);
    for (int trial = 0; trial < 1000; ++trial) {
        const MatrixXd a = random_matrix(rng, 3, 7, 4.0), b = random_matrix(rng, 3, 7, 4.0);
        const double temp = 0.5 + 5.0 * std::uniform_real_distribution<double>(0, 1)(rng);
        EXPECT_EQ(logits_distill_loss(a, a, temp), 0.0);
        EXPECT_GE(logits_distill_loss(a, b, temp), 0.0);
    }
    EXPECT_THROW(logits_distill_loss(zt, MatrixXd::Zero(1, 3), 1.0), Error);
    EXPECT_THROW(logits_distill_loss(zt, zs, 0.0), Error);
}

TEST(StudentLoss, CompositionIdentityAndZeroWeights) {
    auto s = oracle::micro_setup(2);
    const auto clean = forward(s.student, s.image_clean, s.question, s.answer);
    const auto pois = forward(s.student, s.image, s.question, s.answer);
    const auto tpois = forward(s.teacher, s.image, s.target_question, s.answer);
    for (auto mode : {TrainMode::Phantasia, TrainMode::AttnOnly, TrainMode::LogitsOnly, TrainMode::LmOnly}) {
        TrainConfig cfg;
        cfg.mode = mode;
        cfg.attn_weight = 1.7;
        cfg.logits_weight = 0.3;
        const auto b = student_total_loss(clean, pois, tpois, cfg);
        const auto [alpha, beta] = cfg.distill_weights();
        EXPECT_NEAR(b.total, b.lm_clean + b.lm_poison + alpha * b.attn + beta * b.logits_kl, 1e-12);
        EXPECT_NEAR(b.lm_clean, lm_loss(clean), 1e-15);
        EXPECT_NEAR(b.attn, attn_loss(tpois.attention_maps, pois.attention_maps), 1e-15);
        EXPECT_NEAR(b.logits_kl, logits_distill_loss(tpois.logits, pois.logits, cfg.temperature), 1e-15);
    }
    TrainConfig zero;
    zero.attn_weight = zero.logits_weight = 0.0;
    const auto b = student_total_loss(clean, pois, tpois, zero);
    EXPECT_DOUBLE_EQ(b.total, lm_loss(clean) + lm_loss(pois));

    // a student identical to the teacher and fed the teacher's inputs matches it exactly
    const auto same = forward(s.teacher, s.image, s.target_question, s.answer);
    const auto id = student_total_loss(clean, same, tpois, TrainConfig{});
    EXPECT_EQ(id.attn, 0.0);
    EXPECT_EQ(id.logits_kl, 0.0);
}

class GradientCheck : public ::testing::TestWithParam<std::string> {};

TEST_P(GradientCheck, AnalyticMatchesCentralDifferences) {
    auto s = oracle::micro_setup(1);
    ASSERT_EQ(s.student.vocab_size(), 16);
    ASSERT_EQ(forward(s.student, s.image, s.question, s.answer).attention_maps.cols(), 4);
    const std::string which = GetParam();
    TrainConfig cfg;
    cfg.temperature = which == "logits_t1" ? 1.0 : 5.0;
    cfg.per_token_attention = which == "combined_per_token";
    cfg.t2_scale = which == "combined_t2";

    auto loss = [&](const TinyVlm &m) {
        const auto p = forward(m, s.image, s.question, s.answer);
        const auto tp = forward(s.teacher, s.image, s.target_question, s.answer);
        if (which == "lm") return lm_loss(p);
        if (which == "attn") return attn_loss(tp.attention_maps, p.attention_maps);
        if (which == "logits_t1" || which == "logits_t5") return logits_distill_loss(tp.logits, p.logits, cfg.temperature);
        const auto c = forward(m, s.image_clean, s.question, s.answer);
        return student_total_loss(c, p, tp, cfg).total;
    };

    auto g = GradientSet::zeros(s.student.config, s.student.vocab_size());
    const auto p = forward(s.student, s.image, s.question, s.answer);
    const auto tp = forward(s.teacher, s.image, s.target_question, s.answer);
    if (which == "lm") {
        backward(s.student, p, {lm_loss_grad(p), {}, {}}, g);
    } else if (which == "attn") {
        backward(s.student, p, {{}, attn_loss_grad(tp.attention_maps, p.attention_maps), {}}, g);
    } else if (which == "logits_t1" || which == "logits_t5") {
        backward(s.student, p, {logits_distill_grad(tp.logits, p.logits, cfg.temperature), {}, {}}, g);
    } else {
        const auto c = forward(s.student, s.image_clean, s.question, s.answer);
        student_total_loss(c, p, tp, cfg, &s.student, &g);
    }
    // the T^2-weighted loss is large enough that a 1e-5 step is roundoff-limited on
    // gradient entries near 1e-6; 1e-4 keeps truncation error well under the bound
    const double step = cfg.t2_scale ? 1e-4 : 1e-5;
    EXPECT_LE(oracle::max_fd_relative_error(s.student, g, loss, step), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Losses, GradientCheck,
                         ::testing::Values("lm", "attn", "logits_t1", "logits_t5", "combined", "combined_per_token",
                                           "combined_t2"));

TEST(Backward, LinearInTheUpstreamGradient) {
    auto s = oracle::micro_setup(3);
    const auto p = forward(s.student, s.image, s.question, s.answer);
    const auto tp = forward(s.teacher, s.image, s.target_question, s.answer);
    const MatrixXd g1 = lm_loss_grad(p), g2 = logits_distill_grad(tp.logits, p.logits, 5.0);
    const MatrixXd m2 = attn_loss_grad(tp.attention_maps, p.attention_maps);
    const double a = 0.7, b = -1.9;
    const auto lhs = backward(s.student, p, {a * g1 + b * g2, b * m2, {}});
    auto rhs = backward(s.student, p, {g1, {}, {}});
    rhs.scale(a);
    rhs.add_scaled(backward(s.student, p, {g2, m2, {}}), b);
    std::vector<const MatrixXd *> x, y;
    lhs.for_each([&](const std::string &, const MatrixXd &t) { x.push_back(&t); });
    rhs.for_each([&](const std::string &, const MatrixXd &t) { y.push_back(&t); });
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE((*x[i] - *y[i]).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Backward, DistillationGradientVanishesAtIdentity) {
    auto s = oracle::micro_setup(4);
    const auto tp = forward(s.teacher, s.image, s.target_question, s.answer);
    const auto g = backward(s.teacher, tp, {logits_distill_grad(tp.logits, tp.logits, 5.0),
                                            attn_loss_grad(tp.attention_maps, tp.attention_maps), {}});
    g.for_each([](const std::string &name, const MatrixXd &t) { EXPECT_EQ(t.cwiseAbs().maxCoeff(), 0.0) << name; });
}

TEST(AdamW, SingleStepMatchesHandFormula) {
    const auto mc = micro_corpus(1, 1);
    const auto init = init_tiny_vlm(micro_config(), mc.vocab, 1);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 1;
    cfg.lr = 1e-2;
    cfg.weight_decay = 0.05;
    const auto trained = train_teacher(init, mc.data, cfg).model;

    auto g = GradientSet::zeros(init.config, init.vocab_size());
    const auto c = trace_of(init, mc.data.clean[0]);
    const auto p = trace_of(init, mc.data.teacher_poisoned[0]);
    backward(init, c, {lm_loss_grad(c), {}, {}}, g);
    backward(init, p, {lm_loss_grad(p), {}, {}}, g);

    std::vector<const MatrixXd *> p0, p1, gr;
    init.params.for_each([&](const std::string &, const MatrixXd &t) { p0.push_back(&t); });
    trained.params.for_each([&](const std::string &, const MatrixXd &t) { p1.push_back(&t); });
    g.for_each([&](const std::string &, const MatrixXd &t) { gr.push_back(&t); });
    for (std::size_t k = 0; k < p0.size(); ++k)
        for (Eigen::Index i = 0; i < p0[k]->size(); ++i) {
            const double w = p0[k]->data()[i], gi = gr[k]->data()[i];
            const double m = (1 - cfg.beta1) * gi, v = (1 - cfg.beta2) * gi * gi;
            const double mhat = m / (1 - cfg.beta1), vhat = v / (1 - cfg.beta2);
            const double expected = w - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * w);
            EXPECT_NEAR(p1[k]->data()[i], expected, 1e-14);
        }
}

TEST(Training, ZeroLearningRateLeavesParametersBitwise) {
    const auto mc = micro_corpus(2, 6);
    const auto init = init_tiny_vlm(micro_config(), mc.vocab, 2);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.lr = 0.0;
    EXPECT_TRUE(train_teacher(init, mc.data, cfg).model.params == init.params);
    EXPECT_TRUE(train_student(init, init, mc.data, cfg).model.params == init.params);
}

TEST(Training, DeterministicAndTeacherStaysFrozen) {
    const auto mc = micro_corpus(3, 8);
    const auto init = init_tiny_vlm(micro_config(), mc.vocab, 3);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 3;
    const auto t1 = train_teacher(init, mc.data, cfg), t2 = train_teacher(init, mc.data, cfg);
    EXPECT_TRUE(t1.model.params == t2.model.params);

    const TinyVlm teacher = t1.model;
    const auto before = teacher.params;
    for (auto mode : {TrainMode::Phantasia, TrainMode::Phantasia1, TrainMode::Phantasia2, TrainMode::AttnOnly,
                      TrainMode::LogitsOnly, TrainMode::LmOnly, TrainMode::CleanOnly}) {
        cfg.mode = mode;
        const auto a = train_student(init, teacher, mc.data, cfg), b = train_student(init, teacher, mc.data, cfg);
        EXPECT_TRUE(a.model.params == b.model.params) << to_string(mode);
        EXPECT_TRUE(teacher.params == before) << to_string(mode);
    }
}

TEST(Training, StudentModesFollowTheirDefinitions) {
    const auto mc = micro_corpus(4, 6);
    const auto init = init_tiny_vlm(micro_config(), mc.vocab, 4);
    TrainConfig cfg;
    cfg.epochs = 0;
    // student == teacher at init and both fed the teacher's triplets: distillation starts at zero
    PoisonedDataset same = mc.data;
    same.student_poisoned = same.teacher_poisoned;
    const auto start = train_student(init, init, same, cfg).curve.front().loss;
    EXPECT_EQ(start.attn, 0.0);
    EXPECT_EQ(start.logits_kl, 0.0);

    // phantasia2 only sees (x_p, q_t, s_t)
    cfg.epochs = 2;
    cfg.mode = TrainMode::Phantasia2;
    PoisonedDataset no_clean = mc.data;
    for (auto &t : no_clean.clean) t.answer = tokenize("w w w");
    EXPECT_TRUE(train_student(init, init, mc.data, cfg).model.params == train_student(init, init, no_clean, cfg).model.params);

    TinyVlmConfig other = micro_config();
    other.d = 4;
    EXPECT_THROW(train_student(init, init_tiny_vlm(other, mc.vocab, 1), mc.data, cfg), Error);
    EXPECT_THROW(train_teacher(init, PoisonedDataset{}, cfg), Error);
}

TEST(Training, LossCurveIsNonIncreasingOnMostSeeds) {
    int monotone = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto mc = micro_corpus(seed, 20);
        TrainConfig cfg;
        cfg.epochs = 10;
        cfg.seed = seed;
        const auto res = train_teacher(init_tiny_vlm(micro_config(), mc.vocab, seed), mc.data, cfg);
        ASSERT_EQ(res.curve.size(), 11u);
        bool ok = true;
        for (std::size_t e = 1; e < res.curve.size(); ++e) ok &= res.curve[e].loss.total <= res.curve[e - 1].loss.total;
        monotone += ok;
    }
    EXPECT_GE(monotone, 9);
}

TEST(Prompt, UnifiedTemplate) {
    EXPECT_EQ(detokenize(unified_prompt(Task::IC)), "question : describe the image answer :");
    EXPECT_EQ(detokenize(unified_prompt(Task::VQA, tokenize("what season is this ?"))),
              "question : what season is this ? answer :");
    EXPECT_THROW(unified_prompt(Task::VQA, TokenSequence{}), Error);
    EXPECT_THROW(unified_prompt(Task::VQA), Error);
    EXPECT_EQ(prompt_for(question_tokens(QuestionKind::DescribeImage)), unified_prompt(Task::IC));
}

TEST(Checkpoint, RoundTripIsBitwiseAndLittleEndian) {
    const auto mc = micro_corpus(5, 4);
    const auto m = init_tiny_vlm(micro_config(), mc.vocab, 5);
    const auto dir = scratch_dir("ckpt");
    save_checkpoint(dir / "model", m);
    const auto back = load_checkpoint(dir / "model");
    EXPECT_TRUE(back.params == m.params);
    EXPECT_TRUE(back.vocab == m.vocab);
    EXPECT_TRUE(back.config == m.config);

    std::ifstream bin(dir / "model.bin", std::ios::binary);
    unsigned char bytes[8];
    bin.read(reinterpret_cast<char *>(bytes), 8);
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    double first;
    std::memcpy(&first, &bits, 8);
    EXPECT_EQ(first, m.params.patch_embed.data()[0]);
    EXPECT_EQ(fs::file_size(dir / "model.bin"), m.params.count() * 8);

    const auto j = nlohmann::json::parse(std::ifstream(dir / "model.json"));
    EXPECT_EQ(j.at("format"), "f64le");
    EXPECT_EQ(j.at("count").get<std::size_t>(), m.params.count());
    EXPECT_THROW(load_checkpoint(dir / "missing"), Error);

    fs::resize_file(dir / "model.bin", 16);
    EXPECT_THROW(load_checkpoint(dir / "model"), Error);
    fs::remove_all(dir);
}

TEST(Decode, GreedyOutputIsDeterministicAndClean) {
    const auto mc = micro_corpus(6, 10);
    TrainConfig cfg;
    cfg.epochs = 5;
    const auto m = train_teacher(init_tiny_vlm(micro_config(), mc.vocab, 6), mc.data, cfg).model;
    const TinyVlmGenerator gen(m);
    Rng r1(1), r2(99);
    const auto &t = mc.data.clean[0];
    const auto a = gen.generate(t.image, t.question, r1);
    EXPECT_EQ(a, gen.generate(t.image, t.question, r2));
    EXPECT_LE(a.size(), 16u);
    for (const auto &tok : a) {
        EXPECT_NE(tok, "<s>");
        EXPECT_NE(tok, "<unk>");
        EXPECT_NE(tok, "</s>");
    }
}
