#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pam/analysis.hpp"
#include "pam/model.hpp"
#include "pam/train.hpp"

namespace pam {

/// One self-check outcome: the worst deviation actually observed against the
/// bound it must stay under.
struct PropertyResult {
    std::string name;
    std::string detail;
    double measured = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

inline PropertyResult make_result(std::string name, double measured, double tolerance,
                                  std::string detail) {
    PropertyResult r;
    r.name = std::move(name);
    r.measured = measured;
    r.tolerance = tolerance;
    r.pass = measured < tolerance;
    r.detail = std::move(detail);
    return r;
}

namespace detail {

template <typename T>
Tensor<T> gaussian_tensor(const std::vector<int64_t>& shape, CounterRng& rng, double scale) {
    Tensor<T> t = Tensor<T>::zeros(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(scale * rng.gaussian());
    return t;
}

inline double wrap_angle(double x) { return std::atan2(std::sin(x), std::cos(x)); }

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

template <typename T>
struct RandomPamLayer {
    Tensor<T> qkv_wr, qkv_wi, out_wr, out_wi, dt_w, dt_b, prot_w, prot_b;
    int64_t heads, head_dim;

    RandomPamLayer(int64_t dim, int64_t H, int64_t d, uint64_t seed) : heads(H), head_dim(d) {
        CounterRng rng = CounterRng::for_path(seed, "verify.pam-layer");
        qkv_wr = gaussian_tensor<T>({3 * H * d, dim}, rng, 0.3);
        qkv_wi = gaussian_tensor<T>({3 * H * d, dim}, rng, 0.3);
        out_wr = gaussian_tensor<T>({dim, H * d}, rng, 0.3);
        out_wi = gaussian_tensor<T>({dim, H * d}, rng, 0.3);
        dt_w = gaussian_tensor<T>({H, 2 * dim}, rng, 0.2);
        dt_b = Tensor<T>::full({H}, static_cast<T>(-1.0));
        prot_w = gaussian_tensor<T>({H, dim}, rng, 0.2);
        prot_b = Tensor<T>::full({H}, static_cast<T>(-1.5));
    }

    PamLayerWeights<T> weights() const {
        return {&qkv_wr, &qkv_wi, &out_wr, &out_wi, &dt_w, &dt_b, &prot_w, &prot_b, heads,
                head_dim};
    }

    PamVarIds vars(Tape<T>& t) const {
        return {t.constant(qkv_wr.clone()), t.constant(qkv_wi.clone()),
                t.constant(out_wr.clone()), t.constant(out_wi.clone()),
                t.constant(dt_w.clone()),   t.constant(dt_b.clone()),
                t.constant(prot_w.clone()), t.constant(prot_b.clone())};
    }
};

template <typename T>
struct RandomSamLayer {
    Tensor<T> qkv_w, out_w, dt_w, dt_b, prot_w, prot_b;
    int64_t heads, head_dim;

    RandomSamLayer(int64_t dim, int64_t H, int64_t d, uint64_t seed) : heads(H), head_dim(d) {
        CounterRng rng = CounterRng::for_path(seed, "verify.sam-layer");
        qkv_w = gaussian_tensor<T>({3 * H * d, dim}, rng, 0.3);
        out_w = gaussian_tensor<T>({dim, H * d}, rng, 0.3);
        dt_w = gaussian_tensor<T>({H, dim}, rng, 0.2);
        dt_b = Tensor<T>::full({H}, static_cast<T>(-1.0));
        prot_w = gaussian_tensor<T>({H, dim}, rng, 0.2);
        prot_b = Tensor<T>::full({H}, static_cast<T>(-1.5));
    }

    SamLayerWeights<T> weights() const {
        return {&qkv_w, &out_w, &dt_w, &dt_b, &prot_w, &prot_b, heads, head_dim};
    }

    SamVarIds vars(Tape<T>& t) const {
        return {t.constant(qkv_w.clone()), t.constant(out_w.clone()),
                t.constant(dt_w.clone()),  t.constant(dt_b.clone()),
                t.constant(prot_w.clone()), t.constant(prot_b.clone())};
    }
};

}  // namespace detail

/// Parallel decay-masked evaluation against the folded per-token recurrence,
/// complex arithmetic. Reports the worst output/state deviation.
template <typename T>
PropertyResult dual_form_pam_property(int n_seeds, const std::vector<int64_t>& lens, double tol,
                                      int64_t dim = 64, int64_t heads = 2, int64_t head_dim = 16) {
    double worst = 0.0;
    for (int seed = 0; seed < n_seeds; ++seed) {
        const detail::RandomPamLayer<T> layer(dim, heads, head_dim,
                                              static_cast<uint64_t>(seed) + 1);
        CounterRng rng = CounterRng::for_path(static_cast<uint64_t>(seed) + 1, "verify.pam-x");
        for (int64_t t_len : lens) {
            const Tensor<T> x = detail::gaussian_tensor<T>({1, t_len, dim, 2}, rng, 0.5);

            PamState<T> rec = PamState<T>::zeros_complex(1, heads, head_dim);
            RopeTable rope_r(head_dim, false);
            Tensor<T> rec_y = Tensor<T>::zeros({1, t_len, dim, 2});
            for (int64_t t = 0; t < t_len; ++t) {
                Tensor<T> xt = Tensor<T>::zeros({1, dim, 2});
                for (int64_t i = 0; i < 2 * dim; ++i) xt[i] = x[t * 2 * dim + i];
                const Tensor<T> yt = pam_step(layer.weights(), rope_r, rec, xt);
                for (int64_t i = 0; i < 2 * dim; ++i) rec_y[t * 2 * dim + i] = yt[i];
            }

            RopeTable rope_p(head_dim, false);
            Tape<T> tape(false);
            PamState<T> par_s;
            const VarId y = pam_parallel(tape, tape.constant(x.clone()), layer.vars(tape), rope_p,
                                         heads, head_dim,
                                         PamState<T>::zeros_complex(1, heads, head_dim), &par_s);
            worst = std::max(worst, detail::max_abs_diff(tape.val(y), rec_y));
            worst = std::max(worst, detail::max_abs_diff(par_s.s, rec.s));
        }
    }
    return make_result("dual_form_pam", worst, tol,
                       std::to_string(n_seeds) + " seeds, T up to " +
                           std::to_string(lens.back()));
}

/// Same check for the real-valued ablation.
template <typename T>
PropertyResult dual_form_sam_property(int n_seeds, const std::vector<int64_t>& lens, double tol,
                                      int64_t dim = 64, int64_t heads = 2, int64_t head_dim = 16) {
    double worst = 0.0;
    for (int seed = 0; seed < n_seeds; ++seed) {
        const detail::RandomSamLayer<T> layer(dim, heads, head_dim,
                                              static_cast<uint64_t>(seed) + 1);
        CounterRng rng = CounterRng::for_path(static_cast<uint64_t>(seed) + 1, "verify.sam-x");
        for (int64_t t_len : lens) {
            const Tensor<T> x = detail::gaussian_tensor<T>({1, t_len, dim}, rng, 0.5);

            PamState<T> rec = PamState<T>::zeros_real(1, heads, head_dim);
            RopeTable rope_r(head_dim, true);
            Tensor<T> rec_y = Tensor<T>::zeros({1, t_len, dim});
            for (int64_t t = 0; t < t_len; ++t) {
                Tensor<T> xt = Tensor<T>::zeros({1, dim});
                for (int64_t i = 0; i < dim; ++i) xt[i] = x[t * dim + i];
                const Tensor<T> yt = sam_step(layer.weights(), rope_r, rec, xt);
                for (int64_t i = 0; i < dim; ++i) rec_y[t * dim + i] = yt[i];
            }

            RopeTable rope_p(head_dim, true);
            Tape<T> tape(false);
            PamState<T> par_s;
            const VarId y = sam_parallel(tape, tape.constant(x.clone()), layer.vars(tape), rope_p,
                                         heads, head_dim,
                                         PamState<T>::zeros_real(1, heads, head_dim), &par_s);
            worst = std::max(worst, detail::max_abs_diff(tape.val(y), rec_y));
            worst = std::max(worst, detail::max_abs_diff(par_s.s, rec.s));
        }
    }
    return make_result("dual_form_sam", worst, tol,
                       std::to_string(n_seeds) + " seeds, T up to " +
                           std::to_string(lens.back()));
}

/// Whole-model check: windowed forward vs token-at-a-time stepping must give
/// the same logits.
template <typename T>
PropertyResult model_equivalence_property(ModelConfig cfg, int n_seeds,
                                          const std::vector<int64_t>& lens, double tol) {
    double worst = 0.0;
    for (int seed = 0; seed < n_seeds; ++seed) {
        cfg.seed = 1000 + static_cast<uint64_t>(seed);
        Model<T> m(cfg);
        CounterRng rng = CounterRng::for_path(cfg.seed, "verify.model-tokens");
        for (int64_t t_len : lens) {
            std::vector<int32_t> tokens;
            for (int64_t t = 0; t < t_len; ++t) {
                tokens.push_back(static_cast<int32_t>(rng.below(static_cast<uint64_t>(cfg.vocab_size))));
            }
            Tape<T> tape(false);
            const auto fwd = m.forward(tape, tokens, 1, t_len);
            const Tensor<T> logits = tape.val(fwd.logits);

            auto states = m.initial_states(1);
            for (int64_t t = 0; t < t_len; ++t) {
                const Tensor<T> row = m.step(states, {tokens[static_cast<size_t>(t)]});
                for (int64_t v = 0; v < cfg.vocab_size; ++v) {
                    worst = std::max(worst, std::abs(static_cast<double>(row[v]) -
                                                     static_cast<double>(logits[t * cfg.vocab_size + v])));
                }
            }
        }
    }
    return make_result(cfg.arith == Arith::complex_valued ? "model_equivalence_pam"
                                                          : "model_equivalence_sam",
                       worst, tol, std::to_string(n_seeds) + " seeds, full model");
}

/// Central finite differences over every parameter tensor of a small model,
/// 64-bit. Relative error against the tape gradient of the mean
/// cross-entropy.
inline PropertyResult gradient_property(double tol, Arith arith = Arith::complex_valued) {
    ModelConfig cfg;
    cfg.dim = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.head_dim = 2;
    cfg.vocab_size = 8;
    cfg.expansion = 2;
    cfg.arith = arith;
    cfg.seed = 17;
    Model<double> m(cfg);

    const int64_t batch = 2, t_len = 4;
    CounterRng rng = CounterRng::for_path(23, "verify.grad-tokens");
    std::vector<int32_t> tokens, targets;
    for (int64_t i = 0; i < batch * t_len; ++i) {
        tokens.push_back(static_cast<int32_t>(rng.below(static_cast<uint64_t>(cfg.vocab_size))));
        targets.push_back(static_cast<int32_t>(rng.below(static_cast<uint64_t>(cfg.vocab_size))));
    }

    auto loss_value = [&]() {
        Tape<double> tape(false);
        const auto fwd = m.forward(tape, tokens, batch, t_len);
        const VarId flat = reshape(tape, fwd.logits, {batch * t_len, cfg.vocab_size});
        return tape.val(cross_entropy(tape, flat, targets))[0];
    };

    Tape<double> tape(true);
    const auto fwd = m.forward(tape, tokens, batch, t_len);
    const VarId flat = reshape(tape, fwd.logits, {batch * t_len, cfg.vocab_size});
    tape.backward(cross_entropy(tape, flat, targets));

    const double eps = 1e-5;
    double worst = 0.0;
    for (int64_t pi = 0; pi < m.store.size(); ++pi) {
        const Tensor<double> grad = tape.grad(fwd.param_vars[static_cast<size_t>(pi)]);
        Tensor<double>& value = m.store[pi].value;
        for (int64_t i = 0; i < value.numel(); ++i) {
            const double keep = value[i];
            value[i] = keep + eps;
            const double up = loss_value();
            value[i] = keep - eps;
            const double down = loss_value();
            value[i] = keep;
            const double fd = (up - down) / (2.0 * eps);
            const double an = grad[i];
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
            worst = std::max(worst, rel);
        }
    }
    return make_result(arith == Arith::complex_valued ? "gradients_pam" : "gradients_sam", worst,
                       tol, std::to_string(m.store.scalar_count()) + " parameters, eps 1e-5");
}

/// modReLU and the norm must leave channel phases untouched; the rotary map
/// must shift them by exactly (start + t) * theta_j.
template <typename T>
PropertyResult phase_preservation_property(int64_t n_channels, double tol) {
    double worst = 0.0;
    CounterRng rng = CounterRng::for_path(31, "verify.phase");

    {
        const Tensor<T> z = detail::gaussian_tensor<T>({n_channels, 2}, rng, 1.0);
        Tape<T> tape(false);
        const VarId out = modrelu(tape, tape.constant(z.clone()),
                                  tape.constant(Tensor<T>::full({n_channels}, static_cast<T>(0.1))));
        const Tensor<T>& o = tape.val(out);
        for (int64_t i = 0; i < n_channels; ++i) {
            const double pin = std::atan2(static_cast<double>(z[2 * i + 1]),
                                          static_cast<double>(z[2 * i]));
            const double pout = std::atan2(static_cast<double>(o[2 * i + 1]),
                                           static_cast<double>(o[2 * i]));
            worst = std::max(worst, std::abs(detail::wrap_angle(pout - pin)));
        }
    }
    {
        const int64_t rows = 10, c = n_channels / 10;
        const Tensor<T> z = detail::gaussian_tensor<T>({rows, c, 2}, rng, 1.0);
        Tape<T> tape(false);
        const VarId out = complex_norm(tape, tape.constant(z.clone()),
                                       tape.constant(Tensor<T>::full({c}, static_cast<T>(1.3))));
        const Tensor<T>& o = tape.val(out);
        for (int64_t i = 0; i < rows * c; ++i) {
            const double pin = std::atan2(static_cast<double>(z[2 * i + 1]),
                                          static_cast<double>(z[2 * i]));
            const double pout = std::atan2(static_cast<double>(o[2 * i + 1]),
                                           static_cast<double>(o[2 * i]));
            worst = std::max(worst, std::abs(detail::wrap_angle(pout - pin)));
        }
    }
    {
        const int64_t t_len = 125, heads = 2, d = 40, start = 7;
        const Tensor<T> x = detail::gaussian_tensor<T>({1, t_len, heads, d, 2}, rng, 1.0);
        RopeTable table(d, false);
        Tape<T> tape(false);
        const VarId out = rope_complex(tape, tape.constant(x.clone()), table, start);
        const Tensor<T>& o = tape.val(out);
        for (int64_t t = 0; t < t_len; ++t) {
            for (int64_t h = 0; h < heads; ++h) {
                for (int64_t j = 0; j < d; ++j) {
                    const int64_t base = ((t * heads + h) * d + j) * 2;
                    const double pin = std::atan2(static_cast<double>(x[base + 1]),
                                                  static_cast<double>(x[base]));
                    const double pout = std::atan2(static_cast<double>(o[base + 1]),
                                                   static_cast<double>(o[base]));
                    const double theta =
                        std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(d));
                    const double want = static_cast<double>(start + t) * theta;
                    worst = std::max(worst, std::abs(detail::wrap_angle(pout - pin - want)));
                }
            }
        }
    }
    return make_result("phase_preservation", worst, tol,
                       std::to_string(3 * n_channels) + " channels across modReLU/norm/rotary");
}

struct RetrievalOutcome {
    double clean_err = 0.0;     // worst reconstruction error over d bindings
    double overload_err = 0.0;  // worst error after the (d+1)-th binding
};

/// With decay frozen open (gamma = 1) and writes unprotected, d orthonormal
/// keys store d values losslessly; one more superposed binding must disturb
/// at least one retrieval.
template <typename T>
RetrievalOutcome retrieval_outcome(int64_t d) {
    std::vector<std::vector<T>> keys;
    for (int64_t j = 0; j < d; ++j) {
        std::vector<T> k(static_cast<size_t>(2 * d));
        for (int64_t a = 0; a < d; ++a) {
            const double ang =
                2.0 * 3.14159265358979323846 * static_cast<double>(j * a) / static_cast<double>(d);
            k[static_cast<size_t>(2 * a)] =
                static_cast<T>(std::cos(ang) / std::sqrt(static_cast<double>(d)));
            k[static_cast<size_t>(2 * a + 1)] =
                static_cast<T>(std::sin(ang) / std::sqrt(static_cast<double>(d)));
        }
        keys.push_back(std::move(k));
    }
    CounterRng rng = CounterRng::for_path(41, "verify.retrieval");
    std::vector<std::vector<T>> values;
    for (int64_t j = 0; j < d; ++j) {
        std::vector<T> v(static_cast<size_t>(2 * d));
        for (auto& e : v) e = static_cast<T>(rng.gaussian());
        values.push_back(std::move(v));
    }

    std::vector<T> s(static_cast<size_t>(2 * d * d), T(0));
    std::vector<T> scratch(static_cast<size_t>(2 * d));
    for (int64_t j = 0; j < d; ++j) {
        pam_recurrence_step(s.data(), keys[static_cast<size_t>(j)].data(),
                            keys[static_cast<size_t>(j)].data(),
                            values[static_cast<size_t>(j)].data(), 1.0, d, scratch.data());
    }

    const std::vector<T> zero(static_cast<size_t>(2 * d), T(0));
    auto worst_err = [&]() {
        double worst = 0.0;
        std::vector<T> y(static_cast<size_t>(2 * d));
        for (int64_t j = 0; j < d; ++j) {
            // A zero write leaves the state alone and just reads it back.
            pam_recurrence_step(s.data(), keys[static_cast<size_t>(j)].data(),
                                keys[static_cast<size_t>(j)].data(), zero.data(), 1.0, d,
                                y.data());
            for (int64_t i = 0; i < 2 * d; ++i) {
                worst = std::max(worst, std::abs(static_cast<double>(
                                            y[static_cast<size_t>(i)] -
                                            values[static_cast<size_t>(j)][static_cast<size_t>(i)])));
            }
        }
        return worst;
    };

    RetrievalOutcome out;
    out.clean_err = worst_err();

    std::vector<T> extra_key(static_cast<size_t>(2 * d));
    for (int64_t i = 0; i < 2 * d; ++i) {
        extra_key[static_cast<size_t>(i)] =
            static_cast<T>((keys[0][static_cast<size_t>(i)] + keys[1][static_cast<size_t>(i)]) /
                           std::sqrt(2.0));
    }
    std::vector<T> extra_val(static_cast<size_t>(2 * d));
    for (auto& e : extra_val) e = static_cast<T>(rng.gaussian());
    pam_recurrence_step(s.data(), extra_key.data(), extra_key.data(), extra_val.data(), 1.0, d,
                        scratch.data());
    out.overload_err = worst_err();
    return out;
}

template <typename T>
PropertyResult retrieval_property(double tol, int64_t d = 16) {
    const RetrievalOutcome out = retrieval_outcome<T>(d);
    PropertyResult r = make_result("lossless_retrieval", out.clean_err, tol,
                                   std::to_string(d) + " orthonormal bindings");
    // The capacity edge is part of the property: overloading must hurt.
    if (out.overload_err <= 0.01) {
        r.pass = false;
        r.detail += "; overload failed to degrade (err " + std::to_string(out.overload_err) + ")";
    } else {
        r.detail += "; overload err " + std::to_string(out.overload_err);
    }
    return r;
}

/// Closed-form entropy checks on the worked three-state example.
inline std::vector<PropertyResult> entropy_properties() {
    std::vector<PropertyResult> out;
    const double ln3 = std::log(3.0);

    out.push_back(make_result("entropy_shannon_ln3",
                              std::abs(shannon_diag(example_state(0.0)) - ln3), 1e-12,
                              "uniform diagonal of the pure state"));
    out.push_back(make_result("entropy_vn_pure", std::abs(von_neumann(example_state(0.0))), 1e-9,
                              "rank-one projector"));
    out.push_back(make_result("entropy_gap_ln3",
                              std::abs(decoherence_gap(example_state(0.0)) - ln3), 1e-9,
                              "whole gap lives off-diagonal"));

    double eig_dev = 0.0, worst_rise = -1.0, prev_gap = 0.0;
    for (int i = 0; i <= 10; ++i) {
        const double p = static_cast<double>(i) / 10.0;
        const DensityMatrix d = example_state(p);
        const auto eigs = hermitian_eigenvalues(d.rho, d.n);
        eig_dev = std::max(eig_dev, std::abs(eigs[0] - (1.0 - 2.0 * p / 3.0)));
        eig_dev = std::max(eig_dev, std::abs(eigs[1] - p / 3.0));
        eig_dev = std::max(eig_dev, std::abs(eigs[2] - p / 3.0));
        const double gap = decoherence_gap(d);
        if (i > 0) worst_rise = std::max(worst_rise, gap - prev_gap);
        prev_gap = gap;
    }
    out.push_back(make_result("entropy_spectrum_grid", eig_dev, 1e-10,
                              "eigenvalues vs (1-2p/3, p/3, p/3) on p = 0..1"));
    out.push_back(make_result("entropy_gap_monotone", worst_rise, 1e-12,
                              "largest increase along the mixing grid"));

    const double floor_dev = std::max(std::abs(floor_bound(1.69, 2.0) - 1.00),
                                      std::abs(floor_bound(1.69, 4.0) - 0.30));
    out.push_back(make_result("entropy_floor_bounds", floor_dev, 0.005,
                              "1.69-nat anchor at d_eff 2 and 4"));
    return out;
}

}  // namespace pam
