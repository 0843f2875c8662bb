#pragma once

// A one-layer cross-attention vision-language model small enough to differentiate by
// hand. Image patches are embedded linearly and attended to by a per-position query
// built from the prompt and the previous answer token.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bdlab/common.hpp"
#include "bdlab/image.hpp"
#include "bdlab/text_core.hpp"

namespace bdlab {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Token table shared by every model trained on one corpus. Ids 0..2 are <s>, </s>, <unk>.
class Vocabulary {
  public:
    Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

    explicit Vocabulary(const std::vector<std::string> &words) {
        add(std::string(kBos));
        add(std::string(kEos));
        add(std::string(kUnk));
        for (const auto &w : words) add(w);
    }

    /// Specials first, then every distinct corpus token in sorted order.
    static Vocabulary from_corpus(const std::vector<TokenSequence> &corpus) {
        std::set<std::string> words;
        for (const auto &s : corpus) words.insert(s.begin(), s.end());
        return Vocabulary(std::vector<std::string>(words.begin(), words.end()));
    }

    int id(const std::string &tok) const {
        auto it = index_.find(tok);
        return it == index_.end() ? unk() : it->second;
    }
    const std::string &token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    int size() const { return static_cast<int>(tokens_.size()); }
    int bos() const { return 0; }
    int eos() const { return 1; }
    int unk() const { return 2; }
    const std::vector<std::string> &tokens() const { return tokens_; }

    std::vector<int> encode(const TokenSequence &s) const {
        std::vector<int> out;
        out.reserve(s.size());
        for (const auto &t : s) out.push_back(id(t));
        return out;
    }

    bool operator==(const Vocabulary &o) const { return tokens_ == o.tokens_; }

  private:
    void add(const std::string &w) {
        if (index_.count(w)) return;
        index_[w] = static_cast<int>(tokens_.size());
        tokens_.push_back(w);
    }

    std::vector<std::string> tokens_;
    std::map<std::string, int> index_;
};

struct TinyVlmConfig {
    int d = 32;
    int heads = 2;
    int patch = 4;
    int channels = 3;

    int head_dim() const { return d / heads; }
    int patch_dim() const { return patch * patch * channels; }

    void validate() const {
        if (d < 1 || heads < 1 || patch < 1 || channels < 1) throw ConfigError("tiny_vlm: sizes must be positive");
        if (d % heads != 0) throw ConfigError("tiny_vlm: d must be divisible by the number of heads");
    }

    bool operator==(const TinyVlmConfig &) const = default;
};

/// Every trainable tensor. Doubles as the gradient container (GradientSet).
struct TinyVlmParams {
    MatrixXd patch_embed; // d x p*p*C
    MatrixXd token_embed; // V x d
    std::vector<MatrixXd> w_q, w_k, w_v; // per head, d_h x d
    MatrixXd w_out; // V x 2d
    MatrixXd b_out; // V x 1

    static TinyVlmParams zeros(const TinyVlmConfig &cfg, int vocab) {
        TinyVlmParams p;
        p.patch_embed = MatrixXd::Zero(cfg.d, cfg.patch_dim());
        p.token_embed = MatrixXd::Zero(vocab, cfg.d);
        for (int m = 0; m < cfg.heads; ++m) {
            p.w_q.push_back(MatrixXd::Zero(cfg.head_dim(), cfg.d));
            p.w_k.push_back(MatrixXd::Zero(cfg.head_dim(), cfg.d));
            p.w_v.push_back(MatrixXd::Zero(cfg.head_dim(), cfg.d));
        }
        p.w_out = MatrixXd::Zero(vocab, 2 * cfg.d);
        p.b_out = MatrixXd::Zero(vocab, 1);
        return p;
    }

    template <class F> void for_each(F &&f) {
        f("patch_embed", patch_embed);
        f("token_embed", token_embed);
        for (std::size_t m = 0; m < w_q.size(); ++m) {
            f("w_q." + std::to_string(m), w_q[m]);
            f("w_k." + std::to_string(m), w_k[m]);
            f("w_v." + std::to_string(m), w_v[m]);
        }
        f("w_out", w_out);
        f("b_out", b_out);
    }

    template <class F> void for_each(F &&f) const {
        const_cast<TinyVlmParams *>(this)->for_each(
            [&](const std::string &name, MatrixXd &t) { f(name, static_cast<const MatrixXd &>(t)); });
    }

    std::size_t count() const {
        std::size_t n = 0;
        for_each([&](const std::string &, const MatrixXd &t) { n += static_cast<std::size_t>(t.size()); });
        return n;
    }

    void set_zero() {
        for_each([](const std::string &, MatrixXd &t) { t.setZero(); });
    }

    void scale(double s) {
        for_each([s](const std::string &, MatrixXd &t) { t *= s; });
    }

    /// this += scale * other, tensor by tensor.
    void add_scaled(const TinyVlmParams &other, double scale) {
        std::vector<const MatrixXd *> src;
        other.for_each([&](const std::string &, const MatrixXd &t) { src.push_back(&t); });
        std::size_t i = 0;
        for_each([&](const std::string &, MatrixXd &t) { t += scale * *src[i++]; });
    }

    bool operator==(const TinyVlmParams &o) const {
        std::vector<const MatrixXd *> a, b;
        for_each([&](const std::string &, const MatrixXd &t) { a.push_back(&t); });
        o.for_each([&](const std::string &, const MatrixXd &t) { b.push_back(&t); });
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i]->rows() != b[i]->rows() || a[i]->cols() != b[i]->cols() || *a[i] != *b[i]) return false;
        return true;
    }
};

using GradientSet = TinyVlmParams;

struct TinyVlm {
    TinyVlmConfig config;
    Vocabulary vocab;
    TinyVlmParams params;

    int vocab_size() const { return vocab.size(); }
};

/// Gaussian init scaled by 1/sqrt(fan_in); the output bias starts at zero.
inline TinyVlm init_tiny_vlm(const TinyVlmConfig &cfg, const Vocabulary &vocab, std::uint64_t seed) {
    cfg.validate();
    TinyVlm m{cfg, vocab, TinyVlmParams::zeros(cfg, vocab.size())};
    Rng rng = make_rng(seed, "tiny_vlm_init");
    auto fill = [&](MatrixXd &t, double std) {
        std::normal_distribution<double> nd(0.0, std);
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = nd(rng);
    };
    fill(m.params.patch_embed, 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())));
    fill(m.params.token_embed, 1.0 / std::sqrt(static_cast<double>(cfg.d)));
    for (int h = 0; h < cfg.heads; ++h) {
        fill(m.params.w_q[static_cast<std::size_t>(h)], 1.0 / std::sqrt(static_cast<double>(cfg.d)));
        fill(m.params.w_k[static_cast<std::size_t>(h)], 1.0 / std::sqrt(static_cast<double>(cfg.d)));
        fill(m.params.w_v[static_cast<std::size_t>(h)], 1.0 / std::sqrt(static_cast<double>(cfg.d)));
    }
    fill(m.params.w_out, 1.0 / std::sqrt(static_cast<double>(2 * cfg.d)));
    return m;
}

/// Image as a K x (p*p*C) matrix, patches in row-major grid order.
inline MatrixXd extract_patches(const ImageGrid &img, int p) {
    if (p < 1 || img.height() % p != 0 || img.width() % p != 0)
        throw Error("image " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                    " is not divisible into " + std::to_string(p) + "x" + std::to_string(p) + " patches");
    const int gh = img.height() / p, gw = img.width() / p, c = img.channels();
    MatrixXd x(gh * gw, p * p * c);
    for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px)
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    for (int ch = 0; ch < c; ++ch)
                        x(py * gw + px, (dy * p + dx) * c + ch) = img.at(py * p + dy, px * p + dx, ch);
    return x;
}

/// Row-wise softmax with max subtraction.
inline MatrixXd softmax_rows(const MatrixXd &z) {
    MatrixXd out(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double mx = z.row(i).maxCoeff();
        const Eigen::RowVectorXd e = (z.row(i).array() - mx).exp().matrix();
        out.row(i) = e / e.sum();
    }
    return out;
}

inline MatrixXd log_softmax_rows(const MatrixXd &z) {
    MatrixXd out(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double mx = z.row(i).maxCoeff();
        const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
        out.row(i) = z.row(i).array() - lse;
    }
    return out;
}

struct ForwardTrace {
    MatrixXd logits;         // L x V; row i predicts target i
    MatrixXd attention_maps; // M x K, each row a H' x W' map flattened row-major
    int map_height = 0;
    int map_width = 0;

    std::vector<int> prompt_ids, prev_ids, target_ids;
    MatrixXd patches;  // K x P
    MatrixXd patch_z;  // K x d
    MatrixXd context;  // L x d
    MatrixXd hidden;   // L x 2d
    std::vector<MatrixXd> queries, keys, values, attention; // per head

    int length() const { return static_cast<int>(target_ids.size()); }
    double map_at(int head, int row, int col) const { return attention_maps(head, row * map_width + col); }
};

namespace detail {

struct ImageSide {
    MatrixXd patches, z;
    std::vector<MatrixXd> keys, values;
};

inline ImageSide encode_image(const TinyVlm &m, const ImageGrid &image) {
    if (image.channels() != m.config.channels) throw Error("tiny_vlm: image channel count mismatch");
    ImageSide s;
    s.patches = extract_patches(image, m.config.patch);
    s.z = s.patches * m.params.patch_embed.transpose();
    for (int h = 0; h < m.config.heads; ++h) {
        s.keys.push_back(s.z * m.params.w_k[static_cast<std::size_t>(h)].transpose());
        s.values.push_back(s.z * m.params.w_v[static_cast<std::size_t>(h)].transpose());
    }
    return s;
}

inline Eigen::RowVectorXd prompt_mean(const TinyVlm &m, const std::vector<int> &prompt) {
    Eigen::RowVectorXd q = Eigen::RowVectorXd::Zero(m.config.d);
    if (prompt.empty()) return q;
    for (int id : prompt) q += m.params.token_embed.row(id);
    return q / static_cast<double>(prompt.size());
}

} // namespace detail

/// Teacher-forced pass. Position i sees the prompt mean plus the embedding of the
/// previous answer token (<s> for the first) and predicts answer[i].
inline ForwardTrace forward(const TinyVlm &m, const ImageGrid &image, const TokenSequence &question,
                            const TokenSequence &answer) {
    if (answer.empty()) throw Error("forward: empty answer");
    const auto &cfg = m.config;
    ForwardTrace t;
    auto img = detail::encode_image(m, image);
    t.map_height = image.height() / cfg.patch;
    t.map_width = image.width() / cfg.patch;
    t.prompt_ids = m.vocab.encode(question);
    t.target_ids = m.vocab.encode(answer);
    t.prev_ids.push_back(m.vocab.bos());
    for (std::size_t i = 0; i + 1 < t.target_ids.size(); ++i) t.prev_ids.push_back(t.target_ids[i]);

    const int L = t.length(), d = cfg.d, dh = cfg.head_dim();
    const auto qbar = detail::prompt_mean(m, t.prompt_ids);
    t.context.resize(L, d);
    for (int i = 0; i < L; ++i) t.context.row(i) = qbar + m.params.token_embed.row(t.prev_ids[static_cast<std::size_t>(i)]);

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    t.hidden.resize(L, 2 * d);
    t.hidden.leftCols(d) = t.context;
    const auto K = img.z.rows();
    t.attention_maps.resize(cfg.heads, K);
    for (int h = 0; h < cfg.heads; ++h) {
        const auto hs = static_cast<std::size_t>(h);
        MatrixXd q = t.context * m.params.w_q[hs].transpose();
        MatrixXd a = softmax_rows(scale * q * img.keys[hs].transpose());
        t.hidden.block(0, d + h * dh, L, dh) = a * img.values[hs];
        t.attention_maps.row(h) = a.colwise().mean();
        t.queries.push_back(std::move(q));
        t.attention.push_back(std::move(a));
    }
    t.logits = t.hidden * m.params.w_out.transpose();
    t.logits.rowwise() += m.params.b_out.col(0).transpose();

    t.patches = std::move(img.patches);
    t.patch_z = std::move(img.z);
    t.keys = std::move(img.keys);
    t.values = std::move(img.values);
    return t;
}

// ---------------------------------------------------------------------------
// Losses. Each returns its value; the *_grad variants give the derivative with
// respect to the student-side quantity they consume.

/// Mean over positions of -log softmax(logits_i)[target_i].
inline double lm_loss(const ForwardTrace &t) {
    const MatrixXd lp = log_softmax_rows(t.logits);
    double s = 0.0;
    for (int i = 0; i < t.length(); ++i) s -= lp(i, t.target_ids[static_cast<std::size_t>(i)]);
    return s / t.length();
}

/// Overload that checks the trace was built for this answer.
inline double lm_loss(const ForwardTrace &t, const TokenSequence &answer, const Vocabulary &vocab) {
    if (vocab.encode(answer) != t.target_ids) throw Error("lm_loss: trace was built for a different answer");
    return lm_loss(t);
}

inline MatrixXd lm_loss_grad(const ForwardTrace &t) {
    MatrixXd g = softmax_rows(t.logits);
    for (int i = 0; i < t.length(); ++i) g(i, t.target_ids[static_cast<std::size_t>(i)]) -= 1.0;
    return g / t.length();
}

inline void require_same_shape(const MatrixXd &a, const MatrixXd &b, const char *what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw Error(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
}

/// Mean squared difference over all M * H' * W' entries.
inline double attn_loss(const MatrixXd &teacher_maps, const MatrixXd &student_maps) {
    require_same_shape(teacher_maps, student_maps, "attn_loss");
    return (student_maps - teacher_maps).squaredNorm() / static_cast<double>(student_maps.size());
}

inline MatrixXd attn_loss_grad(const MatrixXd &teacher_maps, const MatrixXd &student_maps) {
    require_same_shape(teacher_maps, student_maps, "attn_loss");
    return 2.0 * (student_maps - teacher_maps) / static_cast<double>(student_maps.size());
}

/// (1/L) sum_i KL(softmax(z_T,i / T) || softmax(z_S,i / T)). With t2_scale the value is
/// multiplied by T^2.
inline double logits_distill_loss(const MatrixXd &teacher_logits, const MatrixXd &student_logits, double temperature,
                                  bool t2_scale = false) {
    require_same_shape(teacher_logits, student_logits, "logits_distill_loss");
    if (!(temperature > 0.0)) throw Error("logits_distill_loss: temperature must be positive");
    const MatrixXd lt = log_softmax_rows(teacher_logits / temperature);
    const MatrixXd ls = log_softmax_rows(student_logits / temperature);
    const double kl = (lt.array().exp() * (lt - ls).array()).sum() / static_cast<double>(teacher_logits.rows());
    return t2_scale ? kl * temperature * temperature : kl;
}

/// d/dz_S = (p_S - p_T) / (T L), times T^2 when scaled.
inline MatrixXd logits_distill_grad(const MatrixXd &teacher_logits, const MatrixXd &student_logits, double temperature,
                                    bool t2_scale = false) {
    require_same_shape(teacher_logits, student_logits, "logits_distill_loss");
    if (!(temperature > 0.0)) throw Error("logits_distill_loss: temperature must be positive");
    MatrixXd g = (softmax_rows(student_logits / temperature) - softmax_rows(teacher_logits / temperature)) /
                 (temperature * static_cast<double>(teacher_logits.rows()));
    return t2_scale ? MatrixXd(g * temperature * temperature) : g;
}

/// Per-position attention MSE, used when maps are aligned token by token.
inline double token_attn_loss(const ForwardTrace &teacher, const ForwardTrace &student) {
    if (teacher.attention.size() != student.attention.size()) throw Error("token_attn_loss: head count mismatch");
    double s = 0.0;
    double n = 0.0;
    for (std::size_t h = 0; h < student.attention.size(); ++h) {
        require_same_shape(teacher.attention[h], student.attention[h], "token_attn_loss");
        s += (student.attention[h] - teacher.attention[h]).squaredNorm();
        n += static_cast<double>(student.attention[h].size());
    }
    return s / n;
}

// ---------------------------------------------------------------------------
// Reverse mode

/// Upstream derivatives flowing into one trace. Empty members contribute nothing.
struct TraceGrad {
    MatrixXd d_logits;                // L x V
    MatrixXd d_maps;                  // M x K
    std::vector<MatrixXd> d_attention; // per head, L x K
};

/// Accumulates the parameter gradient implied by `up` into `grads`.
inline void backward(const TinyVlm &m, const ForwardTrace &t, const TraceGrad &up, GradientSet &grads) {
    const auto &cfg = m.config;
    const auto &P = m.params;
    const int L = t.length(), d = cfg.d, dh = cfg.head_dim();
    const auto K = t.patch_z.rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    MatrixXd d_hidden = MatrixXd::Zero(L, 2 * d);
    if (up.d_logits.size() > 0) {
        require_same_shape(up.d_logits, t.logits, "backward");
        grads.w_out += up.d_logits.transpose() * t.hidden;
        grads.b_out.col(0) += up.d_logits.colwise().sum().transpose();
        d_hidden = up.d_logits * P.w_out;
    }

    MatrixXd d_context = d_hidden.leftCols(d);
    MatrixXd d_z = MatrixXd::Zero(K, d);
    for (int h = 0; h < cfg.heads; ++h) {
        const auto hs = static_cast<std::size_t>(h);
        const MatrixXd &a = t.attention[hs];
        const MatrixXd d_out = d_hidden.block(0, d + h * dh, L, dh);

        MatrixXd d_a = d_out * t.values[hs].transpose();
        if (up.d_maps.size() > 0) d_a.rowwise() += up.d_maps.row(h) / static_cast<double>(L);
        if (!up.d_attention.empty()) d_a += up.d_attention[hs];
        const MatrixXd d_v = a.transpose() * d_out;

        const Eigen::VectorXd row_dot = (d_a.array() * a.array()).rowwise().sum();
        const MatrixXd d_s = (a.array() * (d_a.colwise() - row_dot).array()).matrix();
        const MatrixXd d_q = scale * d_s * t.keys[hs];
        const MatrixXd d_k = scale * d_s.transpose() * t.queries[hs];

        grads.w_q[hs] += d_q.transpose() * t.context;
        grads.w_k[hs] += d_k.transpose() * t.patch_z;
        grads.w_v[hs] += d_v.transpose() * t.patch_z;
        d_context += d_q * P.w_q[hs];
        d_z += d_k * P.w_k[hs] + d_v * P.w_v[hs];
    }
    grads.patch_embed += d_z.transpose() * t.patches;

    for (int i = 0; i < L; ++i) grads.token_embed.row(t.prev_ids[static_cast<std::size_t>(i)]) += d_context.row(i);
    if (!t.prompt_ids.empty()) {
        const Eigen::RowVectorXd share = d_context.colwise().sum() / static_cast<double>(t.prompt_ids.size());
        for (int id : t.prompt_ids) grads.token_embed.row(id) += share;
    }
}

inline GradientSet backward(const TinyVlm &m, const ForwardTrace &t, const TraceGrad &up) {
    auto g = GradientSet::zeros(m.config, m.vocab_size());
    backward(m, t, up, g);
    return g;
}

// ---------------------------------------------------------------------------
// Greedy decoding

struct DecodeOptions {
    int max_length = 16;
    /// Forbid emitting a token that would repeat an n-gram already produced; 0 disables.
    int no_repeat_ngram = 2;
};

/// Argmax decoding from <s> until </s> or max_length. <s> and <unk> are never emitted.
inline TokenSequence greedy_decode(const TinyVlm &m, const ImageGrid &image, const TokenSequence &prompt,
                                   const DecodeOptions &opts = {}) {
    const auto &cfg = m.config;
    const auto img = detail::encode_image(m, image);
    const auto qbar = detail::prompt_mean(m, m.vocab.encode(prompt));
    const int d = cfg.d, dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto n = static_cast<std::size_t>(std::max(0, opts.no_repeat_ngram));

    std::vector<int> ids;
    int prev = m.vocab.bos();
    Eigen::RowVectorXd hidden(2 * d);
    for (int step = 0; step < opts.max_length; ++step) {
        const Eigen::RowVectorXd c = qbar + m.params.token_embed.row(prev);
        hidden.head(d) = c;
        for (int h = 0; h < cfg.heads; ++h) {
            const auto hs = static_cast<std::size_t>(h);
            const Eigen::RowVectorXd q = c * m.params.w_q[hs].transpose();
            const MatrixXd a = softmax_rows(scale * q * img.keys[hs].transpose());
            hidden.segment(d + h * dh, dh) = a * img.values[hs];
        }
        Eigen::RowVectorXd logits = hidden * m.params.w_out.transpose() + m.params.b_out.col(0).transpose();
        logits(m.vocab.bos()) = -INFINITY;
        logits(m.vocab.unk()) = -INFINITY;
        if (n > 0 && ids.size() + 1 >= n) {
            // ban every token that completes an n-gram seen earlier in the output
            const std::vector<int> tail(ids.end() - static_cast<std::ptrdiff_t>(n - 1), ids.end());
            for (std::size_t s = 0; s + n <= ids.size(); ++s)
                if (std::equal(tail.begin(), tail.end(), ids.begin() + static_cast<std::ptrdiff_t>(s)))
                    logits(ids[s + n - 1]) = -INFINITY;
        }
        Eigen::Index best = 0;
        logits.maxCoeff(&best);
        if (static_cast<int>(best) == m.vocab.eos()) break;
        ids.push_back(static_cast<int>(best));
        prev = static_cast<int>(best);
    }
    TokenSequence out;
    for (int id : ids) out.push_back(m.vocab.token(id));
    return out;
}

} // namespace bdlab
