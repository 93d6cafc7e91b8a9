#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "pam/model.hpp"
#include "pam/rng.hpp"

namespace pam {

struct SamplerConfig {
    double temperature = 1.0;
    int64_t top_k = 50;
    double top_p = 0.9;
    double repetition_penalty = 1.2;
    int64_t max_new_tokens = 64;
    bool greedy = false;
    uint64_t seed = 42;

    void validate() const {
        check(temperature > 0.0, "sampler: temperature must be positive");
        check(top_p > 0.0 && top_p <= 1.0, "sampler: top_p must be in (0, 1]");
        check(top_k >= 1, "sampler: top_k must be at least 1");
        check(repetition_penalty >= 1.0, "sampler: repetition penalty must be at least 1");
        check(max_new_tokens >= 0, "sampler: max_new_tokens must be nonnegative");
    }
};

/// Full filter chain on one logits row: repetition penalty on seen tokens
/// (divide positive logits, multiply negative ones), temperature, top-k,
/// smallest nucleus with cumulative mass >= top_p, renormalize. Returns the
/// final distribution; entries outside the surviving support are exactly 0.
inline std::vector<double> sampling_distribution(std::vector<double> logits,
                                                 const SamplerConfig& cfg,
                                                 const std::vector<bool>& seen) {
    cfg.validate();
    const int64_t v = static_cast<int64_t>(logits.size());
    check(static_cast<int64_t>(seen.size()) == v, "sampler: seen mask size mismatch");

    for (int64_t i = 0; i < v; ++i) {
        if (!seen[static_cast<size_t>(i)]) continue;
        double& l = logits[static_cast<size_t>(i)];
        l = l > 0.0 ? l / cfg.repetition_penalty : l * cfg.repetition_penalty;
    }
    for (double& l : logits) l /= cfg.temperature;

    // Order candidates by logit; ties break toward the lower token id so the
    // chain is deterministic.
    std::vector<int64_t> order(static_cast<size_t>(v));
    std::iota(order.begin(), order.end(), int64_t{0});
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
    });
    const int64_t keep_k = std::min(cfg.top_k, v);

    // Softmax over the top-k survivors only.
    double mx = logits[static_cast<size_t>(order[0])];
    std::vector<double> probs(static_cast<size_t>(v), 0.0);
    double z = 0.0;
    for (int64_t r = 0; r < keep_k; ++r) {
        const double p = std::exp(logits[static_cast<size_t>(order[static_cast<size_t>(r)])] - mx);
        probs[static_cast<size_t>(order[static_cast<size_t>(r)])] = p;
        z += p;
    }

    // Smallest prefix of the sorted survivors reaching top_p.
    double cum = 0.0;
    int64_t keep_p = keep_k;
    for (int64_t r = 0; r < keep_k; ++r) {
        cum += probs[static_cast<size_t>(order[static_cast<size_t>(r)])] / z;
        if (cum >= cfg.top_p - 1e-12) {
            keep_p = r + 1;
            break;
        }
    }
    double z2 = 0.0;
    for (int64_t r = keep_p; r < keep_k; ++r) probs[static_cast<size_t>(order[static_cast<size_t>(r)])] = 0.0;
    for (int64_t r = 0; r < keep_p; ++r) z2 += probs[static_cast<size_t>(order[static_cast<size_t>(r)])];
    for (double& p : probs) p /= z2;
    return probs;
}

/// Autoregressive generation through the recurrent O(1)/token path. The
/// prompt is consumed token by token; the fixed-size layer states are the
/// only sequence memory.
template <typename T>
std::vector<int32_t> generate(Model<T>& model, const std::vector<int32_t>& prompt,
                              const SamplerConfig& cfg) {
    cfg.validate();
    check(!prompt.empty(), "generate: prompt must be nonempty");
    const int64_t v = model.cfg.vocab_size;
    CounterRng rng = CounterRng::for_path(cfg.seed, "generate");

    auto states = model.initial_states(1);
    std::vector<bool> seen(static_cast<size_t>(v), false);
    Tensor<T> logits;
    for (int32_t tok : prompt) {
        logits = model.step(states, {tok});
        seen[static_cast<size_t>(tok)] = true;
    }

    std::vector<int32_t> out;
    out.reserve(static_cast<size_t>(cfg.max_new_tokens));
    for (int64_t n = 0; n < cfg.max_new_tokens; ++n) {
        std::vector<double> row(static_cast<size_t>(v));
        for (int64_t i = 0; i < v; ++i) row[static_cast<size_t>(i)] = static_cast<double>(logits[i]);
        const std::vector<double> probs = sampling_distribution(std::move(row), cfg, seen);

        int32_t next = 0;
        if (cfg.greedy) {
            for (int64_t i = 1; i < v; ++i) {
                if (probs[static_cast<size_t>(i)] > probs[static_cast<size_t>(next)]) {
                    next = static_cast<int32_t>(i);
                }
            }
        } else {
            const double r = rng.uniform();
            double cum = 0.0;
            next = -1;
            for (int64_t i = 0; i < v; ++i) {
                cum += probs[static_cast<size_t>(i)];
                if (r < cum) {
                    next = static_cast<int32_t>(i);
                    break;
                }
            }
            if (next < 0) {  // r landed in rounding slack past the last entry
                for (int64_t i = v - 1; i >= 0; --i) {
                    if (probs[static_cast<size_t>(i)] > 0.0) {
                        next = static_cast<int32_t>(i);
                        break;
                    }
                }
            }
        }
        out.push_back(next);
        seen[static_cast<size_t>(next)] = true;
        logits = model.step(states, {next});
    }
    return out;
}

struct RepetitionMetrics {
    double rep3 = 0.0;
    double rep4 = 0.0;
    double unique_ratio = 0.0;
};

/// rep_n = 1 - distinct/total n-grams; unique_ratio = distinct tokens / total.
inline RepetitionMetrics repetition_metrics(const std::vector<int32_t>& tokens) {
    const int64_t n = static_cast<int64_t>(tokens.size());
    check(n >= 4, "repetition metrics: need at least 4 tokens, got " + std::to_string(n));
    auto rep = [&](int64_t len) {
        std::set<std::vector<int32_t>> grams;
        const int64_t total = n - len + 1;
        for (int64_t i = 0; i < total; ++i) {
            grams.insert(std::vector<int32_t>(tokens.begin() + i, tokens.begin() + i + len));
        }
        return 1.0 - static_cast<double>(grams.size()) / static_cast<double>(total);
    };
    RepetitionMetrics m;
    m.rep3 = rep(3);
    m.rep4 = rep(4);
    std::set<int32_t> distinct(tokens.begin(), tokens.end());
    m.unique_ratio = static_cast<double>(distinct.size()) / static_cast<double>(n);
    return m;
}

}  // namespace pam
