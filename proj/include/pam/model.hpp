#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pam/ccore.hpp"
#include "pam/layers.hpp"
#include "pam/pam.hpp"
#include "pam/rng.hpp"
#include "pam/tape.hpp"
#include "pam/tensor.hpp"

namespace pam {

enum class Arith { complex_valued, real_valued };

inline const char* arith_name(Arith a) {
    return a == Arith::complex_valued ? "complex" : "real";
}

inline Arith arith_from_name(const std::string& s) {
    if (s == "complex") return Arith::complex_valued;
    if (s == "real") return Arith::real_valued;
    throw std::invalid_argument("arith must be 'complex' or 'real', got '" + s + "'");
}

struct ModelConfig {
    int64_t dim = 64;
    int64_t n_layers = 4;
    int64_t n_heads = 2;
    int64_t head_dim = 16;
    int64_t vocab_size = 256;
    int64_t expansion = 3;
    Arith arith = Arith::complex_valued;
    uint64_t seed = 42;

    void validate() const {
        check(dim > 0 && n_layers > 0 && n_heads > 0 && head_dim > 0 && vocab_size > 0 &&
                  expansion > 0,
              "model config: all dimensions must be positive");
        check(arith == Arith::complex_valued || head_dim % 2 == 0,
              "model config: real arithmetic needs an even head_dim for paired rotations");
    }
};

/// Exact trainable-scalar count for a configuration. The embedding is tied
/// to the output head, so it is counted once.
inline int64_t count_params(const ModelConfig& c) {
    const int64_t D = c.dim, e = c.expansion, H = c.n_heads, d = c.head_dim;
    const int64_t hd = H * d;
    int64_t block;
    if (c.arith == Arith::complex_valued) {
        const int64_t cgu = 6 * e * D * D + e * D;           // up/gate/down factors + act bias
        const int64_t mix = 8 * hd * D + 3 * H * D + 2 * H;  // qkv/out factors + gate projections
        block = 2 * D + cgu + mix + 2;
    } else {
        const int64_t rgu = 3 * e * D * D + e * D;
        const int64_t mix = 4 * hd * D + 2 * H * D + 2 * H;
        block = 2 * D + rgu + mix + 2;
    }
    const int64_t embed = (c.arith == Arith::complex_valued ? 2 : 1) * c.vocab_size * D;
    return embed + c.n_layers * block + D;
}

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
};

template <typename T>
class ParamStore {
  public:
    int64_t add(std::string name, Tensor<T> value) {
        index_[name] = static_cast<int64_t>(items_.size());
        items_.push_back(Parameter<T>{std::move(name), std::move(value)});
        return static_cast<int64_t>(items_.size()) - 1;
    }
    Parameter<T>& operator[](int64_t i) { return items_[static_cast<size_t>(i)]; }
    const Parameter<T>& operator[](int64_t i) const { return items_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(items_.size()); }
    int64_t find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }
    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& p : items_) n += p.value.numel();
        return n;
    }

  private:
    std::vector<Parameter<T>> items_;
    std::map<std::string, int64_t> index_;
};

/// Sequence model: interleaved gated-unit and associative-memory blocks on a
/// residual stream, tied input/output embedding, learned residual scales.
template <typename T>
class Model {
  public:
    struct BlockIdx {
        int64_t norm1_s = -1, norm2_s = -1, act_b = -1, alpha_cgu = -1, alpha_pam = -1;
        int64_t up_wr = -1, up_wi = -1, gate_wr = -1, gate_wi = -1, down_wr = -1, down_wi = -1;
        int64_t qkv_wr = -1, qkv_wi = -1, out_wr = -1, out_wi = -1;
        int64_t dt_w = -1, dt_b = -1, prot_w = -1, prot_b = -1;
    };

    explicit Model(ModelConfig cfg) : cfg(cfg) {
        cfg.validate();
        const bool cplx = cfg.arith == Arith::complex_valued;
        rope = RopeTable(cfg.head_dim, !cplx);
        build_params();
    }

    ModelConfig cfg;
    ParamStore<T> store;
    RopeTable rope;
    int64_t embed_idx = -1;
    int64_t final_norm_idx = -1;
    std::vector<BlockIdx> blocks;

    bool is_complex() const { return cfg.arith == Arith::complex_valued; }

    PamLayerWeights<T> pam_weights(int64_t l) const {
        const BlockIdx& b = blocks[static_cast<size_t>(l)];
        return PamLayerWeights<T>{&store[b.qkv_wr].value, &store[b.qkv_wi].value,
                                  &store[b.out_wr].value, &store[b.out_wi].value,
                                  &store[b.dt_w].value,   &store[b.dt_b].value,
                                  &store[b.prot_w].value, &store[b.prot_b].value,
                                  cfg.n_heads,            cfg.head_dim};
    }

    SamLayerWeights<T> sam_weights(int64_t l) const {
        const BlockIdx& b = blocks[static_cast<size_t>(l)];
        return SamLayerWeights<T>{&store[b.qkv_wr].value, &store[b.out_wr].value,
                                  &store[b.dt_w].value,   &store[b.dt_b].value,
                                  &store[b.prot_w].value, &store[b.prot_b].value,
                                  cfg.n_heads,            cfg.head_dim};
    }

    std::vector<PamState<T>> initial_states(int64_t batch) const {
        std::vector<PamState<T>> s;
        s.reserve(static_cast<size_t>(cfg.n_layers));
        for (int64_t l = 0; l < cfg.n_layers; ++l) {
            s.push_back(is_complex() ? PamState<T>::zeros_complex(batch, cfg.n_heads, cfg.head_dim)
                                     : PamState<T>::zeros_real(batch, cfg.n_heads, cfg.head_dim));
        }
        return s;
    }

    struct ForwardResult {
        VarId logits;                  // [B, T, vocab]
        std::vector<VarId> param_vars; // aligned with store indices
    };

    /// Windowed forward in the chunked parallel form. tokens: B*T ids,
    /// row-major [B, T]. States are optional carry-in/out (fresh zeros when
    /// s_in is null); gradients do not flow across window boundaries.
    ForwardResult forward(Tape<T>& tape, const std::vector<int32_t>& tokens, int64_t batch,
                          int64_t t_len, const std::vector<PamState<T>>* s_in = nullptr,
                          std::vector<PamState<T>>* s_out = nullptr) {
        check(static_cast<int64_t>(tokens.size()) == batch * t_len,
              "forward: token count does not match batch * t_len");
        if (s_in) {
            check(static_cast<int64_t>(s_in->size()) == cfg.n_layers,
                  "forward: carry state count does not match layer count");
        }
        if (s_out) s_out->resize(static_cast<size_t>(cfg.n_layers));

        ForwardResult res;
        res.param_vars.reserve(static_cast<size_t>(store.size()));
        for (int64_t i = 0; i < store.size(); ++i) {
            res.param_vars.push_back(tape.leaf(store[i].value, true));
        }
        auto pv = [&](int64_t i) { return res.param_vars[static_cast<size_t>(i)]; };

        const int64_t D = cfg.dim, V = cfg.vocab_size;
        const bool cplx = is_complex();
        const int64_t flat = cplx ? 2 * D : D;
        VarId e_flat = cplx ? reshape(tape, pv(embed_idx), {V, flat}) : pv(embed_idx);
        VarId z = embedding_rows(tape, e_flat, tokens);  // [B*T, flat]
        z = reshape(tape, z,
                    cplx ? std::vector<int64_t>{batch, t_len, D, 2}
                         : std::vector<int64_t>{batch, t_len, D});

        std::vector<PamState<T>> fresh;
        if (!s_in) fresh = initial_states(batch);
        const std::vector<PamState<T>>& states = s_in ? *s_in : fresh;

        for (int64_t l = 0; l < cfg.n_layers; ++l) {
            const BlockIdx& b = blocks[static_cast<size_t>(l)];
            PamState<T>* so = s_out ? &(*s_out)[static_cast<size_t>(l)] : nullptr;
            if (cplx) {
                VarId zn = complex_norm(tape, z, pv(b.norm1_s));
                CguIds cg{pv(b.up_wr),   pv(b.up_wi),   pv(b.gate_wr), pv(b.gate_wi),
                          pv(b.down_wr), pv(b.down_wi), pv(b.act_b)};
                z = residual_scale(tape, z, pv(b.alpha_cgu), cgu_forward(tape, zn, cg));
                VarId zn2 = complex_norm(tape, z, pv(b.norm2_s));
                PamVarIds pp{pv(b.qkv_wr), pv(b.qkv_wi), pv(b.out_wr), pv(b.out_wi),
                             pv(b.dt_w),   pv(b.dt_b),   pv(b.prot_w), pv(b.prot_b)};
                VarId y = pam_parallel(tape, zn2, pp, rope, cfg.n_heads, cfg.head_dim,
                                       states[static_cast<size_t>(l)], so);
                z = residual_scale(tape, z, pv(b.alpha_pam), y);
            } else {
                VarId zn = rmsnorm_real(tape, z, pv(b.norm1_s));
                RguIds rg{pv(b.up_wr), pv(b.gate_wr), pv(b.down_wr), pv(b.act_b)};
                z = residual_scale(tape, z, pv(b.alpha_cgu), rgu_forward(tape, zn, rg));
                VarId zn2 = rmsnorm_real(tape, z, pv(b.norm2_s));
                SamVarIds sp{pv(b.qkv_wr), pv(b.out_wr), pv(b.dt_w),
                             pv(b.dt_b),   pv(b.prot_w), pv(b.prot_b)};
                VarId y = sam_parallel(tape, zn2, sp, rope, cfg.n_heads, cfg.head_dim,
                                       states[static_cast<size_t>(l)], so);
                z = residual_scale(tape, z, pv(b.alpha_pam), y);
            }
        }
        z = cplx ? complex_norm(tape, z, pv(final_norm_idx))
                 : rmsnorm_real(tape, z, pv(final_norm_idx));
        // Tied head: logits[t, v] = Re<z_t, E_v> in split layout, which is a
        // plain dot product of the flattened rows.
        VarId z_flat = reshape(tape, z, {batch, t_len, flat});
        res.logits = real_linear(tape, e_flat, VarId{}, z_flat);
        return res;
    }

    /// One recurrent token for a batch. tokens: B ids; states advance by one
    /// position. Returns logits [B, vocab]. The mixing layers run the true
    /// recurrence; the per-token layers share the windowed implementations.
    Tensor<T> step(std::vector<PamState<T>>& states, const std::vector<int32_t>& tokens) {
        check(static_cast<int64_t>(states.size()) == cfg.n_layers,
              "step: state count does not match layer count");
        const int64_t B = static_cast<int64_t>(tokens.size());
        const int64_t D = cfg.dim, V = cfg.vocab_size;
        const bool cplx = is_complex();
        const int64_t flat = cplx ? 2 * D : D;

        Tape<T> tape(false);
        std::vector<VarId> pvars;
        pvars.reserve(static_cast<size_t>(store.size()));
        for (int64_t i = 0; i < store.size(); ++i) pvars.push_back(tape.constant(store[i].value));
        auto pv = [&](int64_t i) { return pvars[static_cast<size_t>(i)]; };

        VarId e_flat = cplx ? reshape(tape, pv(embed_idx), {V, flat}) : pv(embed_idx);
        VarId z = embedding_rows(tape, e_flat, tokens);
        z = reshape(tape, z, cplx ? std::vector<int64_t>{B, D, 2} : std::vector<int64_t>{B, D});

        for (int64_t l = 0; l < cfg.n_layers; ++l) {
            const BlockIdx& b = blocks[static_cast<size_t>(l)];
            PamState<T>& st = states[static_cast<size_t>(l)];
            try {
                if (cplx) {
                    VarId zn = complex_norm(tape, z, pv(b.norm1_s));
                    CguIds cg{pv(b.up_wr),   pv(b.up_wi),   pv(b.gate_wr), pv(b.gate_wi),
                              pv(b.down_wr), pv(b.down_wi), pv(b.act_b)};
                    z = residual_scale(tape, z, pv(b.alpha_cgu), cgu_forward(tape, zn, cg));
                    VarId zn2 = complex_norm(tape, z, pv(b.norm2_s));
                    Tensor<T> y = pam_step(pam_weights(l), rope, st, tape.val(zn2));
                    z = residual_scale(tape, z, pv(b.alpha_pam), tape.constant(std::move(y)));
                } else {
                    VarId zn = rmsnorm_real(tape, z, pv(b.norm1_s));
                    RguIds rg{pv(b.up_wr), pv(b.gate_wr), pv(b.down_wr), pv(b.act_b)};
                    z = residual_scale(tape, z, pv(b.alpha_cgu), rgu_forward(tape, zn, rg));
                    VarId zn2 = rmsnorm_real(tape, z, pv(b.norm2_s));
                    Tensor<T> y = sam_step(sam_weights(l), rope, st, tape.val(zn2));
                    z = residual_scale(tape, z, pv(b.alpha_pam), tape.constant(std::move(y)));
                }
            } catch (const std::runtime_error& err) {
                throw std::runtime_error("layer " + std::to_string(l) + ": " + err.what());
            }
        }
        z = cplx ? complex_norm(tape, z, pv(final_norm_idx))
                 : rmsnorm_real(tape, z, pv(final_norm_idx));
        VarId z_flat = reshape(tape, z, {B, flat});
        VarId logits = real_linear(tape, e_flat, VarId{}, z_flat);
        return tape.val(logits);
    }

  private:
    void build_params() {
        const int64_t D = cfg.dim, e = cfg.expansion;
        const int64_t H = cfg.n_heads, d = cfg.head_dim, hd = H * d;
        const bool cplx = is_complex();

        embed_idx = store.add("embed", init_embedding());

        for (int64_t l = 0; l < cfg.n_layers; ++l) {
            const std::string pre = "blocks." + std::to_string(l) + ".";
            BlockIdx b;
            b.norm1_s = store.add(pre + "norm1.s", Tensor<T>::full({D}, T(1)));
            if (cplx) {
                auto add_pair = [&](const std::string& group, int64_t m, int64_t n, int64_t& ir,
                                    int64_t& ii) {
                    CounterRng rng = CounterRng::for_path(cfg.seed, group);
                    auto [wr, wi] = orthogonal_init<T>(m, n, rng);
                    ir = store.add(group + ".wr", std::move(wr));
                    ii = store.add(group + ".wi", std::move(wi));
                };
                add_pair(pre + "cgu.up", e * D, D, b.up_wr, b.up_wi);
                add_pair(pre + "cgu.gate", e * D, D, b.gate_wr, b.gate_wi);
                add_pair(pre + "cgu.down", D, e * D, b.down_wr, b.down_wi);
                b.act_b = store.add(pre + "cgu.act_b", Tensor<T>::zeros({e * D}));
                b.norm2_s = store.add(pre + "norm2.s", Tensor<T>::full({D}, T(1)));
                add_pair(pre + "pam.qkv", 3 * hd, D, b.qkv_wr, b.qkv_wi);
                add_pair(pre + "pam.out", D, hd, b.out_wr, b.out_wi);
                b.dt_w = store.add(pre + "pam.dt.w", gaussian_init({H, 2 * D}, pre + "pam.dt.w"));
                b.dt_b = store.add(pre + "pam.dt.b", Tensor<T>::full({H}, T(-4)));
                b.prot_w = store.add(pre + "pam.protect.w",
                                     gaussian_init({H, D}, pre + "pam.protect.w"));
                b.prot_b = store.add(pre + "pam.protect.b", Tensor<T>::full({H}, T(-3)));
            } else {
                auto add_single = [&](const std::string& group, int64_t m, int64_t n) {
                    CounterRng rng = CounterRng::for_path(cfg.seed, group);
                    return store.add(group + ".w", real_orthogonal<T>(m, n, rng));
                };
                b.up_wr = add_single(pre + "rgu.up", e * D, D);
                b.gate_wr = add_single(pre + "rgu.gate", e * D, D);
                b.down_wr = add_single(pre + "rgu.down", D, e * D);
                b.act_b = store.add(pre + "rgu.act_b", Tensor<T>::zeros({e * D}));
                b.norm2_s = store.add(pre + "norm2.s", Tensor<T>::full({D}, T(1)));
                b.qkv_wr = add_single(pre + "sam.qkv", 3 * hd, D);
                b.out_wr = add_single(pre + "sam.out", D, hd);
                b.dt_w = store.add(pre + "sam.dt.w", gaussian_init({H, D}, pre + "sam.dt.w"));
                b.dt_b = store.add(pre + "sam.dt.b", Tensor<T>::full({H}, T(-4)));
                b.prot_w = store.add(pre + "sam.protect.w",
                                     gaussian_init({H, D}, pre + "sam.protect.w"));
                b.prot_b = store.add(pre + "sam.protect.b", Tensor<T>::full({H}, T(-3)));
            }
            b.alpha_cgu = store.add(pre + "alpha_cgu", Tensor<T>::full({1}, T(1)));
            b.alpha_pam = store.add(pre + "alpha_pam", Tensor<T>::full({1}, static_cast<T>(0.1)));
            blocks.push_back(b);
        }
        // Small pre-head gain keeps the tied-head logits near uniform at
        // init, so an untrained model starts at the ln(vocab) baseline.
        final_norm_idx = store.add(
            "final_norm.s",
            Tensor<T>::full({D}, static_cast<T>(1.0 / std::sqrt(static_cast<double>(D)))));
    }

    Tensor<T> gaussian_init(std::vector<int64_t> shape, const std::string& path,
                            double std_dev = 0.02) {
        CounterRng rng = CounterRng::for_path(cfg.seed, path);
        Tensor<T> t = Tensor<T>::zeros(std::move(shape));
        for (int64_t i = 0; i < t.numel(); ++i) {
            t[i] = static_cast<T>(std_dev * rng.gaussian());
        }
        return t;
    }

    /// Orthogonal-style embedding, each row rescaled to unit norm so every
    /// token starts at the same magnitude under the tied head.
    Tensor<T> init_embedding() {
        const int64_t V = cfg.vocab_size, D = cfg.dim;
        CounterRng rng = CounterRng::for_path(cfg.seed, "embed");
        if (is_complex()) {
            auto [wr, wi] = orthogonal_init<T>(V, D, rng);
            Tensor<T> e = Tensor<T>::zeros({V, D, 2});
            for (int64_t v = 0; v < V; ++v) {
                double norm2 = 0.0;
                for (int64_t j = 0; j < D; ++j) {
                    const double a = wr[v * D + j], b = wi[v * D + j];
                    norm2 += a * a + b * b;
                }
                const double inv = norm2 > 1e-24 ? 1.0 / std::sqrt(norm2) : 0.0;
                for (int64_t j = 0; j < D; ++j) {
                    e[(v * D + j) * 2] = static_cast<T>(wr[v * D + j] * inv);
                    e[(v * D + j) * 2 + 1] = static_cast<T>(wi[v * D + j] * inv);
                }
            }
            return e;
        }
        Tensor<T> w = real_orthogonal<T>(V, D, rng);
        for (int64_t v = 0; v < V; ++v) {
            double norm2 = 0.0;
            for (int64_t j = 0; j < D; ++j) norm2 += static_cast<double>(w[v * D + j]) * w[v * D + j];
            const double inv = norm2 > 1e-24 ? 1.0 / std::sqrt(norm2) : 0.0;
            for (int64_t j = 0; j < D; ++j) w[v * D + j] = static_cast<T>(w[v * D + j] * inv);
        }
        return w;
    }
};

// ---- ablation sizing ----

struct SamMatch {
    ModelConfig config;
    int64_t params = 0;
    int64_t target = 0;
    bool within_tol = false;
};

/// Real-arithmetic configuration matching a complex one in parameter count,
/// found by widening dim and/or heads. Deterministic: smallest dim meeting
/// the tolerance wins, then smallest heads. Falls back to the nearest
/// candidate (within_tol = false) when nothing lands inside the tolerance.
inline SamMatch match_sam_config(const ModelConfig& pam_cfg, double tol = 0.02) {
    check(pam_cfg.arith == Arith::complex_valued, "match_sam_config: source must be complex");
    const int64_t target = count_params(pam_cfg);
    SamMatch best;
    best.target = target;
    double best_err = -1.0;
    for (int64_t dim = pam_cfg.dim; dim <= 2 * pam_cfg.dim; ++dim) {
        for (int64_t heads = pam_cfg.n_heads; heads <= 2 * pam_cfg.n_heads; ++heads) {
            ModelConfig c = pam_cfg;
            c.arith = Arith::real_valued;
            c.dim = dim;
            c.n_heads = heads;
            const int64_t n = count_params(c);
            const double err =
                std::abs(static_cast<double>(n - target)) / static_cast<double>(target);
            if (err <= tol) {
                return SamMatch{c, n, target, true};
            }
            if (best_err < 0.0 || err < best_err) {
                best_err = err;
                best = SamMatch{c, n, target, false};
            }
        }
    }
    return best;
}

}  // namespace pam
