#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "pam/checkpoint.hpp"
#include "pam/model.hpp"
#include "pam/rng.hpp"
#include "pam/tape.hpp"
#include "pam/tensor.hpp"

namespace pam {

// ---- loss ----

/// Mean next-token cross-entropy in nats. logits: [N, V] (callers flatten
/// batch and time), targets: N ids. Stable log-sum-exp, accumulated in
/// double regardless of T.
template <typename T>
VarId cross_entropy(Tape<T>& tape, VarId logits, std::vector<int32_t> targets) {
    const Tensor<T>& lv = tape.val(logits);
    check(lv.rank() == 2, "cross_entropy: logits must be [N, V], got " + shape_string(lv.shape));
    const int64_t n = lv.shape[0], v = lv.shape[1];
    check(static_cast<int64_t>(targets.size()) == n,
          "cross_entropy: target count does not match logit rows");
    for (size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0 || targets[i] >= v) {
            throw std::out_of_range("cross_entropy: target id " + std::to_string(targets[i]) +
                                    " at position " + std::to_string(i) + " outside vocab " +
                                    std::to_string(v));
        }
    }

    std::vector<double> lse(static_cast<size_t>(n));
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const T* row = lv.data() + i * v;
        double mx = static_cast<double>(row[0]);
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double s = 0.0;
        for (int64_t j = 0; j < v; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
        lse[static_cast<size_t>(i)] = mx + std::log(s);
        total += lse[static_cast<size_t>(i)] - static_cast<double>(row[targets[static_cast<size_t>(i)]]);
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n)));

    return tape.push(std::move(out), tape.requires_grad(logits),
                     [logits, targets = std::move(targets), lse = std::move(lse), n,
                      v](Tape<T>& t, VarId self) {
                         const double g = static_cast<double>(t.grad(self)[0]) /
                                          static_cast<double>(n);
                         const Tensor<T>& lval = t.val(logits);
                         Tensor<T>& lg = t.grad(logits);
                         for (int64_t i = 0; i < n; ++i) {
                             const T* row = lval.data() + i * v;
                             T* gout = lg.data() + i * v;
                             const double z = lse[static_cast<size_t>(i)];
                             for (int64_t j = 0; j < v; ++j) {
                                 const double p = std::exp(static_cast<double>(row[j]) - z);
                                 gout[j] += static_cast<T>(g * p);
                             }
                             gout[targets[static_cast<size_t>(i)]] -= static_cast<T>(g);
                         }
                     });
}

// ---- data ----

/// Token stream with one contiguous train/validation boundary: ids [0, split)
/// train, [split, end) validation.
struct Corpus {
    std::vector<int32_t> tokens;
    int64_t split = 0;

    int64_t train_size() const { return split; }
    int64_t val_size() const { return static_cast<int64_t>(tokens.size()) - split; }
};

inline Corpus make_corpus(std::vector<int32_t> tokens, double val_fraction = 0.1) {
    check(val_fraction > 0.0 && val_fraction < 1.0, "corpus: val_fraction must be in (0, 1)");
    const int64_t n = static_cast<int64_t>(tokens.size());
    check(n >= 4, "corpus: need at least 4 tokens");
    int64_t split = n - static_cast<int64_t>(std::llround(static_cast<double>(n) * val_fraction));
    split = std::min(std::max(split, int64_t{2}), n - 2);
    Corpus c;
    c.tokens = std::move(tokens);
    c.split = split;
    return c;
}

inline constexpr char kTokenMagic[8] = {'P', 'A', 'M', 'T', 'O', 'K', '1', '\0'};

/// Reads a corpus file: raw bytes become ids 0..255; a "PAMTOK1\0" prefix
/// marks little-endian 32-bit pre-tokenized ids instead.
inline Corpus load_corpus(const std::string& path, double val_fraction = 0.1) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("corpus: cannot open: " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::vector<int32_t> toks;
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kTokenMagic, 8) == 0) {
        const size_t payload = bytes.size() - 8;
        check(payload % 4 == 0, "corpus: pre-tokenized payload is not a multiple of 4 bytes");
        toks.resize(payload / 4);
        std::memcpy(toks.data(), bytes.data() + 8, payload);
        for (size_t i = 0; i < toks.size(); ++i) {
            if (toks[i] < 0) {
                throw std::runtime_error("corpus: negative token id at index " + std::to_string(i));
            }
        }
    } else {
        toks.reserve(bytes.size());
        for (char b : bytes) toks.push_back(static_cast<int32_t>(static_cast<unsigned char>(b)));
    }
    return make_corpus(std::move(toks), val_fraction);
}

inline void save_tokens(const std::string& path, const std::vector<int32_t>& toks) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("corpus: cannot open for write: " + path);
    out.write(kTokenMagic, 8);
    out.write(reinterpret_cast<const char*>(toks.data()),
              static_cast<std::streamsize>(toks.size() * 4));
}

/// Seeded English-like filler text (weighted common words, sentence and
/// paragraph structure). Deterministic, so training fixtures need no bundled
/// data files.
inline std::string make_synthetic_corpus(uint64_t seed, int64_t target_bytes) {
    static const char* kWords[] = {
        "the", "of", "and", "to", "a", "in", "is", "was", "that", "for", "it", "on", "with",
        "as", "his", "her", "they", "at", "be", "this", "have", "from", "or", "one", "had",
        "by", "word", "but", "not", "what", "all", "were", "we", "when", "your", "can", "said",
        "there", "use", "an", "each", "which", "she", "do", "how", "their", "if", "will", "up",
        "other", "about", "out", "many", "then", "them", "these", "so", "some", "would", "make",
        "like", "him", "into", "time", "has", "look", "two", "more", "write", "go", "see",
        "number", "no", "way", "could", "people", "my", "than", "first", "water", "been",
        "call", "who", "oil", "its", "now", "find", "long", "down", "day", "did", "get",
        "come", "made", "may", "part", "over", "new", "sound", "take", "only", "little",
        "work", "know", "place", "year", "live", "me", "back", "give", "most", "very",
        "after", "thing", "our", "just", "name", "good", "sentence", "man", "think", "say",
        "great", "where", "help", "through", "much", "before", "line", "right", "too", "mean",
        "old", "any", "same", "tell", "boy", "follow", "came", "want", "show", "also",
        "around", "form", "three", "small", "set", "put", "end", "does", "another", "well",
        "large", "must", "big", "even", "such", "because", "turn", "here", "why", "ask",
        "went", "men", "read", "need", "land", "different", "home", "us", "move", "try",
        "kind", "hand", "picture", "again", "change", "off", "play", "spell", "air", "away",
        "animal", "house", "point", "page", "letter", "mother", "answer", "found", "study",
        "still", "learn", "should", "america", "world", "high", "every", "near", "add",
        "food", "between", "own", "below", "country", "plant", "last", "school", "father",
        "keep", "tree", "never", "start", "city", "earth", "eye", "light", "thought", "head",
        "under", "story", "saw", "left", "dont", "few", "while", "along", "might", "close",
        "something", "seem", "next", "hard", "open", "example", "begin", "life", "always",
        "those", "both", "paper", "together", "got", "group", "often", "run"};
    constexpr int64_t kNumWords = static_cast<int64_t>(sizeof(kWords) / sizeof(kWords[0]));

    CounterRng rng = CounterRng::for_path(seed, "synthetic-corpus");
    // Zipf-ish weights: early (more common) words drawn more often.
    std::vector<double> cum(static_cast<size_t>(kNumWords));
    double acc = 0.0;
    for (int64_t i = 0; i < kNumWords; ++i) {
        acc += 1.0 / static_cast<double>(i + 3);
        cum[static_cast<size_t>(i)] = acc;
    }
    auto draw_word = [&]() -> const char* {
        const double r = rng.uniform() * acc;
        const auto it = std::lower_bound(cum.begin(), cum.end(), r);
        return kWords[it - cum.begin()];
    };

    std::string out;
    out.reserve(static_cast<size_t>(target_bytes) + 128);
    int64_t sentences_in_par = 0;
    int64_t par_len = 4 + static_cast<int64_t>(rng.below(5));
    while (static_cast<int64_t>(out.size()) < target_bytes) {
        const int64_t words = 4 + static_cast<int64_t>(rng.below(9));
        const int64_t comma_at = words > 6 ? 3 + static_cast<int64_t>(rng.below(3)) : -1;
        for (int64_t w = 0; w < words; ++w) {
            std::string word = draw_word();
            if (w == 0) word[0] = static_cast<char>(std::toupper(word[0]));
            out += word;
            if (w == comma_at) out += ',';
            out += (w + 1 < words) ? " " : (rng.below(12) == 0 ? "? " : ". ");
        }
        if (++sentences_in_par >= par_len) {
            out.pop_back();
            out += "\n\n";
            sentences_in_par = 0;
            par_len = 4 + static_cast<int64_t>(rng.below(5));
        }
    }
    out.resize(static_cast<size_t>(target_bytes));
    return out;
}

// ---- schedule and optimizer ----

struct TrainConfig {
    double lr = 3e-5;
    double weight_decay = 0.01;
    int64_t warmup_steps = 500;
    int64_t batch = 8;
    int64_t seq_len = 128;
    int64_t epochs = 10;
    double grad_clip = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    uint64_t seed = 42;
    int64_t max_steps = -1;  // caps epochs * steps_per_epoch when positive

    void validate() const {
        check(lr > 0 && weight_decay >= 0 && warmup_steps >= 0 && batch > 0 && seq_len >= 1 &&
                  epochs > 0 && grad_clip > 0 && eps > 0,
              "train config: values must be positive");
        check(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1,
              "train config: betas must lie in [0, 1)");
    }
};

/// Linear ramp 0 -> lr over warmup_steps, then cosine lr -> 0 at total_steps.
inline double lr_at(int64_t step, const TrainConfig& cfg, int64_t total_steps) {
    check(step >= 0, "lr_at: negative step");
    check(total_steps > 0, "lr_at: total_steps must be positive");
    const int64_t w = std::min(cfg.warmup_steps, total_steps);
    if (step < w) {
        return cfg.lr * static_cast<double>(step) / static_cast<double>(w);
    }
    if (step >= total_steps || total_steps == w) return 0.0;
    const double phase =
        static_cast<double>(step - w) / static_cast<double>(total_steps - w);
    return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * phase));
}

/// Scales all gradients so the global L2 norm is at most max_norm; returns
/// the pre-clip norm. Accumulation in double, fixed store order.
template <typename T>
double clip_global_norm(std::vector<Tensor<T>>& grads, double max_norm) {
    double sq = 0.0;
    for (const Tensor<T>& g : grads) {
        for (int64_t i = 0; i < g.numel(); ++i) {
            const double x = static_cast<double>(g[i]);
            sq += x * x;
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const T s = static_cast<T>(max_norm / norm);
        for (Tensor<T>& g : grads) {
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= s;
        }
    }
    return norm;
}

/// AdamW with decoupled weight decay and bias correction. Moment buffers
/// parallel the parameter store by index.
template <typename T>
struct AdamW {
    double beta1, beta2, eps, weight_decay;
    int64_t t = 0;
    std::vector<Tensor<T>> m, v;

    AdamW(const ParamStore<T>& store, const TrainConfig& cfg)
        : beta1(cfg.beta1), beta2(cfg.beta2), eps(cfg.eps), weight_decay(cfg.weight_decay) {
        m.reserve(static_cast<size_t>(store.size()));
        v.reserve(static_cast<size_t>(store.size()));
        for (int64_t i = 0; i < store.size(); ++i) {
            m.push_back(Tensor<T>::zeros(store[i].value.shape));
            v.push_back(Tensor<T>::zeros(store[i].value.shape));
        }
    }

    void update(ParamStore<T>& store, const std::vector<Tensor<T>>& grads, double lr) {
        t += 1;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (int64_t i = 0; i < store.size(); ++i) {
            Tensor<T>& p = store[i].value;
            Tensor<T>& mi = m[static_cast<size_t>(i)];
            Tensor<T>& vi = v[static_cast<size_t>(i)];
            const Tensor<T>& g = grads[static_cast<size_t>(i)];
            for (int64_t j = 0; j < p.numel(); ++j) {
                const double gj = static_cast<double>(g[j]);
                const double mj = beta1 * static_cast<double>(mi[j]) + (1.0 - beta1) * gj;
                const double vj = beta2 * static_cast<double>(vi[j]) + (1.0 - beta2) * gj * gj;
                mi[j] = static_cast<T>(mj);
                vi[j] = static_cast<T>(vj);
                const double mhat = mj / bc1;
                const double vhat = vj / bc2;
                const double pj = static_cast<double>(p[j]);
                p[j] = static_cast<T>(pj - lr * (mhat / (std::sqrt(vhat) + eps) +
                                                 weight_decay * pj));
            }
        }
    }
};

// ---- training driver ----

/// Owns the optimizer and the seeded data order. Deterministic: the batch at
/// a given global step is a pure function of (corpus, config), so restoring
/// a checkpoint and continuing reproduces the uninterrupted run bit for bit.
template <typename T>
class Trainer {
  public:
    Trainer(Model<T>& model, const Corpus& data, TrainConfig cfg)
        : model_(model), data_(data), cfg_(cfg), opt_(model.store, cfg) {
        cfg_.validate();
        const int64_t stride = cfg_.seq_len + 1;
        n_windows_ = data_.train_size() / stride;
        steps_per_epoch_ = n_windows_ / cfg_.batch;
        check(steps_per_epoch_ >= 1,
              "trainer: corpus too small for one batch of seq_len+1 windows");
        total_steps_ = cfg_.epochs * steps_per_epoch_;
        if (cfg_.max_steps > 0) total_steps_ = std::min(total_steps_, cfg_.max_steps);
    }

    int64_t step() const { return step_; }
    int64_t total_steps() const { return total_steps_; }
    int64_t steps_per_epoch() const { return steps_per_epoch_; }
    int64_t tokens_seen() const { return step_ * cfg_.batch * cfg_.seq_len; }
    double last_grad_norm() const { return last_grad_norm_; }
    double last_lr() const { return last_lr_; }
    const TrainConfig& config() const { return cfg_; }

    /// Mid-epoch evaluation landmark: halfway through each epoch.
    bool at_mid_epoch() const {
        return steps_per_epoch_ >= 2 && step_ % steps_per_epoch_ == steps_per_epoch_ / 2;
    }
    bool at_epoch_end() const { return step_ % steps_per_epoch_ == 0 && step_ > 0; }

    /// Tokens and shifted targets for a global step, in fixed order.
    void batch_at(int64_t step, std::vector<int32_t>& tokens, std::vector<int32_t>& targets) const {
        const int64_t stride = cfg_.seq_len + 1;
        const int64_t epoch = step / steps_per_epoch_;
        const int64_t k = step % steps_per_epoch_;
        if (perm_epoch_ != epoch) {
            CounterRng rng = CounterRng::for_path(cfg_.seed, "epoch." + std::to_string(epoch));
            perm_ = rng.permutation(n_windows_);
            perm_epoch_ = epoch;
        }
        tokens.clear();
        targets.clear();
        tokens.reserve(static_cast<size_t>(cfg_.batch * cfg_.seq_len));
        targets.reserve(static_cast<size_t>(cfg_.batch * cfg_.seq_len));
        for (int64_t b = 0; b < cfg_.batch; ++b) {
            const int64_t w = perm_[static_cast<size_t>(k * cfg_.batch + b)];
            const int32_t* base = data_.tokens.data() + w * stride;
            tokens.insert(tokens.end(), base, base + cfg_.seq_len);
            targets.insert(targets.end(), base + 1, base + 1 + cfg_.seq_len);
        }
    }

    /// One optimization step; returns the batch loss in nats. Throws when the
    /// loss or gradients go non-finite, naming the step and parameter.
    double train_step() {
        std::vector<int32_t> tokens, targets;
        batch_at(step_, tokens, targets);

        Tape<T> tape(true);
        auto fwd = model_.forward(tape, tokens, cfg_.batch, cfg_.seq_len);
        VarId flat = reshape(tape, fwd.logits,
                             {cfg_.batch * cfg_.seq_len, model_.cfg.vocab_size});
        VarId loss_var = cross_entropy(tape, flat, targets);
        const double loss = static_cast<double>(tape.val(loss_var)[0]);
        tape.backward(loss_var);

        std::vector<Tensor<T>> grads;
        grads.reserve(static_cast<size_t>(model_.store.size()));
        for (int64_t i = 0; i < model_.store.size(); ++i) {
            grads.push_back(tape.grad(fwd.param_vars[static_cast<size_t>(i)]));
        }
        const double norm = clip_global_norm(grads, cfg_.grad_clip);
        if (!std::isfinite(loss) || !std::isfinite(norm)) {
            throw std::runtime_error("training diverged at step " + std::to_string(step_) +
                                     ": non-finite loss (first affected parameter: " +
                                     first_non_finite(grads) + ")");
        }
        const double lr = lr_at(step_, cfg_, total_steps_);
        opt_.update(model_.store, grads, lr);
        step_ += 1;
        last_grad_norm_ = norm;
        last_lr_ = lr;
        return loss;
    }

    /// Mean validation loss in nats and its perplexity. Pure: batches the
    /// full windows of the validation split with fresh states.
    std::pair<double, double> evaluate() {
        const int64_t stride = cfg_.seq_len + 1;
        const int64_t base = data_.split;
        int64_t n_windows = data_.val_size() / stride;
        int64_t win_len = cfg_.seq_len;  // predicted positions per window
        if (n_windows == 0) {
            check(data_.val_size() >= 2, "evaluate: validation split has nothing to predict");
            n_windows = 1;
            win_len = data_.val_size() - 1;
        }
        double total = 0.0;
        int64_t positions = 0;
        for (int64_t w0 = 0; w0 < n_windows; w0 += cfg_.batch) {
            const int64_t bsz = std::min(cfg_.batch, n_windows - w0);
            std::vector<int32_t> tokens, targets;
            for (int64_t b = 0; b < bsz; ++b) {
                const int32_t* p = data_.tokens.data() + base + (w0 + b) * (win_len + 1);
                tokens.insert(tokens.end(), p, p + win_len);
                targets.insert(targets.end(), p + 1, p + 1 + win_len);
            }
            Tape<T> tape(false);
            auto fwd = model_.forward(tape, tokens, bsz, win_len);
            VarId flat = reshape(tape, fwd.logits, {bsz * win_len, model_.cfg.vocab_size});
            VarId loss_var = cross_entropy(tape, flat, targets);
            total += static_cast<double>(tape.val(loss_var)[0]) *
                     static_cast<double>(bsz * win_len);
            positions += bsz * win_len;
        }
        const double loss = total / static_cast<double>(positions);
        return {loss, std::exp(loss)};
    }

    /// Checkpoint with optimizer moments, so a resumed run is bit-identical.
    void save(const std::string& path) const {
        std::vector<std::pair<std::string, Tensor<float>>> extra;
        for (int64_t i = 0; i < model_.store.size(); ++i) {
            extra.emplace_back("opt.m." + model_.store[i].name, to_f32(opt_.m[static_cast<size_t>(i)]));
            extra.emplace_back("opt.v." + model_.store[i].name, to_f32(opt_.v[static_cast<size_t>(i)]));
        }
        save_checkpoint(path, model_.cfg, as_f32_store(), step_, extra);
    }

    void restore(const LoadedCheckpoint& ck) {
        fill_model_params(model_, ck);
        for (int64_t i = 0; i < model_.store.size(); ++i) {
            const std::string& name = model_.store[i].name;
            const Tensor<float>* tm = ck.find("opt.m." + name);
            const Tensor<float>* tv = ck.find("opt.v." + name);
            if (!tm || !tv) {
                throw std::runtime_error("checkpoint: missing optimizer state for " + name);
            }
            copy_into(opt_.m[static_cast<size_t>(i)], *tm);
            copy_into(opt_.v[static_cast<size_t>(i)], *tv);
        }
        opt_.t = ck.step;
        step_ = ck.step;
    }

  private:
    std::string first_non_finite(const std::vector<Tensor<T>>& grads) const {
        for (int64_t i = 0; i < model_.store.size(); ++i) {
            if (!model_.store[i].value.all_finite() ||
                !grads[static_cast<size_t>(i)].all_finite()) {
                return model_.store[i].name;
            }
        }
        return "logits";
    }

    static Tensor<float> to_f32(const Tensor<T>& t) {
        if constexpr (std::is_same_v<T, float>) return t;
        Tensor<float> out = Tensor<float>::zeros(t.shape);
        for (int64_t i = 0; i < t.numel(); ++i) out[i] = static_cast<float>(t[i]);
        return out;
    }

    static void copy_into(Tensor<T>& dst, const Tensor<float>& src) {
        check(dst.shape == src.shape, "checkpoint: optimizer moment shape mismatch");
        for (int64_t i = 0; i < dst.numel(); ++i) dst[i] = static_cast<T>(src[i]);
    }

    ParamStore<float> as_f32_store() const {
        if constexpr (std::is_same_v<T, float>) {
            return model_.store;
        } else {
            ParamStore<float> s;
            for (int64_t i = 0; i < model_.store.size(); ++i) {
                s.add(model_.store[i].name, to_f32(model_.store[i].value));
            }
            return s;
        }
    }

    Model<T>& model_;
    const Corpus& data_;
    TrainConfig cfg_;
    AdamW<T> opt_;
    int64_t n_windows_ = 0;
    int64_t steps_per_epoch_ = 0;
    int64_t total_steps_ = 0;
    int64_t step_ = 0;
    double last_grad_norm_ = 0.0;
    double last_lr_ = 0.0;
    mutable std::vector<int64_t> perm_;
    mutable int64_t perm_epoch_ = -1;
};

// ---- metrics log ----

/// Append-only CSV with commented header lines. Schema:
/// step,split,loss_nats,ppl,lr,grad_norm,tokens_seen,wallclock_s
class MetricsWriter {
  public:
    MetricsWriter(const std::string& path, const std::vector<std::string>& header_lines) {
        const bool fresh = [&] {
            std::ifstream probe(path, std::ios::binary | std::ios::ate);
            return !probe.good() || probe.tellg() == 0;
        }();
        out_.open(path, std::ios::app);
        if (!out_) throw std::runtime_error("metrics: cannot open for append: " + path);
        if (fresh) {
            for (const std::string& line : header_lines) out_ << "# " << line << "\n";
            out_ << "step,split,loss_nats,ppl,lr,grad_norm,tokens_seen,wallclock_s\n";
        }
    }

    void row(int64_t step, const std::string& split, double loss, double ppl, double lr,
             double grad_norm, int64_t tokens_seen, double wall_s) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%lld,%s,%.6f,%.4f,%.8g,%.6g,%lld,%.3f\n",
                      static_cast<long long>(step), split.c_str(), loss, ppl, lr, grad_norm,
                      static_cast<long long>(tokens_seen), wall_s);
        out_ << buf;
        out_.flush();
    }

  private:
    std::ofstream out_;
};

}  // namespace pam
