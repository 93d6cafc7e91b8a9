#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "pam/ccore.hpp"
#include "pam/hermitian_eig.hpp"
#include "pam/layers.hpp"
#include "pam/tape.hpp"
#include "pam/tensor.hpp"

namespace pam {

/// Decay products accumulate in log space; per-token log gamma is floored
/// here so long products cannot reach -inf.
inline constexpr double kLogGammaFloor = -60.0;

/// Test hook: when set, the parallel path perturbs one decay-matrix entry.
/// Lets the self-check command demonstrate that the dual-form equivalence
/// property actually detects faults.
inline bool g_inject_decay_fault = false;

inline double softplus_d(double a) { return a > 30.0 ? a : std::log1p(std::exp(a)); }
inline double sigmoid_d(double a) { return 1.0 / (1.0 + std::exp(-a)); }

/// gamma = e^{-dt}(1-p) + p with dt = softplus(dt_raw), p = sigmoid(p_raw).
/// Note e^{-softplus(a)} = sigmoid(-a). Returns floored log gamma.
inline double log_gamma_d(double dt_raw, double p_raw) {
    const double e = sigmoid_d(-dt_raw);
    const double p = sigmoid_d(p_raw);
    const double gamma = e * (1.0 - p) + p;
    return std::max(std::log(gamma), kLogGammaFloor);
}

// ---- gate tape ops ----

/// Floored log of the retention gate, elementwise over [..., H].
template <typename T>
VarId gate_log_gamma(Tape<T>& tape, VarId dt_raw, VarId p_raw) {
    const Tensor<T>& av = tape.val(dt_raw);
    const Tensor<T>& bv = tape.val(p_raw);
    check(av.shape == bv.shape, "gate_log_gamma: shape mismatch");
    const int64_t n = av.numel();
    Tensor<T> out = Tensor<T>::zeros(av.shape);
    for (int64_t i = 0; i < n; ++i) {
        out[i] = static_cast<T>(log_gamma_d(av[i], bv[i]));
    }
    const bool req = tape.requires_grad(dt_raw) || tape.requires_grad(p_raw);
    return tape.push(std::move(out), req, [dt_raw, p_raw, n](Tape<T>& tp, VarId self) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& av = tp.val(dt_raw);
        const Tensor<T>& bv = tp.val(p_raw);
        for (int64_t i = 0; i < n; ++i) {
            const double a = av[i], b = bv[i];
            const double e = sigmoid_d(-a);
            const double p = sigmoid_d(b);
            const double gamma = e * (1.0 - p) + p;
            if (std::log(gamma) < kLogGammaFloor) continue;  // flat below the floor
            const double gi = static_cast<double>(g[i]) / gamma;
            if (tp.requires_grad(dt_raw)) {
                // d gamma / d a = -(1-p) sigmoid(-a) sigmoid(a)
                tp.grad(dt_raw)[i] += static_cast<T>(-gi * (1.0 - p) * e * sigmoid_d(a));
            }
            if (tp.requires_grad(p_raw)) {
                // d gamma / d b = (1 - e^{-dt}) p (1-p)
                tp.grad(p_raw)[i] += static_cast<T>(gi * (1.0 - e) * p * (1.0 - p));
            }
        }
    });
}

/// Write-protect factor (1 - p) applied to values, elementwise over [..., H].
template <typename T>
VarId one_minus_sigmoid(Tape<T>& tape, VarId p_raw) {
    const Tensor<T>& bv = tape.val(p_raw);
    const int64_t n = bv.numel();
    Tensor<T> out = Tensor<T>::zeros(bv.shape);
    for (int64_t i = 0; i < n; ++i) out[i] = static_cast<T>(1.0 - sigmoid_d(bv[i]));
    return tape.push(std::move(out), tape.requires_grad(p_raw),
                     [p_raw, n](Tape<T>& tp, VarId self) {
                         if (!tp.requires_grad(p_raw)) return;
                         const Tensor<T>& g = tp.grad(self);
                         const Tensor<T>& bv = tp.val(p_raw);
                         Tensor<T>& db = tp.grad(p_raw);
                         for (int64_t i = 0; i < n; ++i) {
                             const double p = sigmoid_d(bv[i]);
                             db[i] += static_cast<T>(-static_cast<double>(g[i]) * p * (1.0 - p));
                         }
                     });
}

// ---- associative state ----

/// Per-layer recurrent state: one matrix per head plus the absolute position
/// of the next token. Complex layout [B, H, d, d, 2]; real layout [B, H, d, d].
template <typename T>
struct PamState {
    Tensor<T> s;
    int64_t pos = 0;

    static PamState zeros_complex(int64_t batch, int64_t heads, int64_t head_dim) {
        return PamState{Tensor<T>::zeros({batch, heads, head_dim, head_dim, 2}), 0};
    }
    static PamState zeros_real(int64_t batch, int64_t heads, int64_t head_dim) {
        return PamState{Tensor<T>::zeros({batch, heads, head_dim, head_dim}), 0};
    }
};

// ---- parallel dual form, complex ----

/// Chunked form of the recurrence S_t = gamma_t S_{t-1} + V'_t (x) K_t^*,
/// Y_t = S_t Q~_t, evaluated as a decay-masked score matrix:
///
///   A[t,i] = K_i^* . Q~_t          (conjugated inner product)
///   D[t,i] = exp(c_t - c_i),  c_t = sum_{j<=t} log gamma_j   (i <= t)
///   Y_t    = sum_{i<=t} A[t,i] D[t,i] V'_i  +  exp(c_t) S0 Q~_t
///
/// qs/k/vp: [B,T,H,d,2] (qs already rotated and scaled by 1/sqrt(d), k rotated,
/// vp protected), lg: [B,T,H] floored log gamma. s0 may be undefined for a
/// zero carry-in; it participates as a constant. The final state lands in
/// *s_out (shape [B,H,d,d,2]) when s_out is non-null.
template <typename T>
VarId pam_core(Tape<T>& tape, VarId qs, VarId k, VarId vp, VarId lg, const Tensor<T>& s0,
               Tensor<T>* s_out) {
    const Tensor<T>& qv = tape.val(qs);
    const Tensor<T>& kv = tape.val(k);
    const Tensor<T>& vv = tape.val(vp);
    const Tensor<T>& lv = tape.val(lg);
    check_complex(qv, "pam_core");
    check(qv.rank() == 5, "pam_core: expected [B,T,H,d,2], got " + shape_string(qv.shape));
    check(qv.shape == kv.shape && qv.shape == vv.shape, "pam_core: q/k/v shape mismatch");
    const int64_t B = qv.shape[0], Tn = qv.shape[1], H = qv.shape[2], d = qv.shape[3];
    check(lv.shape == std::vector<int64_t>({B, Tn, H}), "pam_core: log-gamma shape " +
                                                            shape_string(lv.shape) +
                                                            " does not match q " +
                                                            shape_string(qv.shape));
    const bool carry = s0.defined();
    if (carry) {
        check(s0.shape == std::vector<int64_t>({B, H, d, d, 2}),
              "pam_core: carry state shape " + shape_string(s0.shape));
    }

    Tensor<T> y = Tensor<T>::zeros(qv.shape);
    if (s_out) *s_out = Tensor<T>::zeros({B, H, d, d, 2});

    const int64_t row = H * d * 2;  // stride between consecutive t for fixed (h, j)
    std::vector<double> c(static_cast<size_t>(Tn));
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t h = 0; h < H; ++h) {
            double acc = 0.0;
            for (int64_t t = 0; t < Tn; ++t) {
                acc += static_cast<double>(lv[(b * Tn + t) * H + h]);
                c[static_cast<size_t>(t)] = acc;
            }
            const T* qp = qv.data() + (b * Tn * H + h) * d * 2;
            const T* kp = kv.data() + (b * Tn * H + h) * d * 2;
            const T* vpp = vv.data() + (b * Tn * H + h) * d * 2;
            T* yp = y.data() + (b * Tn * H + h) * d * 2;
            for (int64_t t = 0; t < Tn; ++t) {
                const T* qt = qp + t * row;
                T* yt = yp + t * row;
                for (int64_t i = 0; i <= t; ++i) {
                    const T* ki = kp + i * row;
                    T ar = T(0), ai = T(0);
                    for (int64_t j = 0; j < d; ++j) {
                        const T kr = ki[2 * j], kim = ki[2 * j + 1];
                        const T qr = qt[2 * j], qi = qt[2 * j + 1];
                        ar += kr * qr + kim * qi;
                        ai += kr * qi - kim * qr;
                    }
                    double m = std::exp(c[static_cast<size_t>(t)] - c[static_cast<size_t>(i)]);
                    if (g_inject_decay_fault && t == Tn / 2 && i == 0) m *= 1.001;
                    const T pr = static_cast<T>(m) * ar;
                    const T pi = static_cast<T>(m) * ai;
                    const T* vi = vpp + i * row;
                    for (int64_t j = 0; j < d; ++j) {
                        yt[2 * j] += pr * vi[2 * j] - pi * vi[2 * j + 1];
                        yt[2 * j + 1] += pr * vi[2 * j + 1] + pi * vi[2 * j];
                    }
                }
                if (carry) {
                    const T* s0p = s0.data() + ((b * H + h) * d * d) * 2;
                    const T e = static_cast<T>(std::exp(c[static_cast<size_t>(t)]));
                    for (int64_t a = 0; a < d; ++a) {
                        const T* srow = s0p + a * d * 2;
                        T accr = T(0), acci = T(0);
                        for (int64_t j = 0; j < d; ++j) {
                            const T sr = srow[2 * j], si = srow[2 * j + 1];
                            const T qr = qt[2 * j], qi = qt[2 * j + 1];
                            accr += sr * qr - si * qi;
                            acci += sr * qi + si * qr;
                        }
                        yt[2 * a] += e * accr;
                        yt[2 * a + 1] += e * acci;
                    }
                }
            }
            if (s_out) {
                T* so = s_out->data() + ((b * H + h) * d * d) * 2;
                const double ct = c[static_cast<size_t>(Tn - 1)];
                if (carry) {
                    const T* s0p = s0.data() + ((b * H + h) * d * d) * 2;
                    const T e = static_cast<T>(std::exp(ct));
                    for (int64_t x = 0; x < d * d * 2; ++x) so[x] = e * s0p[x];
                } else {
                    std::fill(so, so + d * d * 2, T(0));
                }
                for (int64_t i = 0; i < Tn; ++i) {
                    const T w = static_cast<T>(std::exp(ct - c[static_cast<size_t>(i)]));
                    const T* vi = vpp + i * row;
                    const T* ki = kp + i * row;
                    for (int64_t a = 0; a < d; ++a) {
                        const T vr = w * vi[2 * a], vim = w * vi[2 * a + 1];
                        T* srow = so + a * d * 2;
                        for (int64_t j = 0; j < d; ++j) {
                            const T kr = ki[2 * j], kim = ki[2 * j + 1];
                            // v (x) conj(k)
                            srow[2 * j] += vr * kr + vim * kim;
                            srow[2 * j + 1] += vim * kr - vr * kim;
                        }
                    }
                }
            }
        }
    }

    const bool req = tape.requires_grad(qs) || tape.requires_grad(k) || tape.requires_grad(vp) ||
                     tape.requires_grad(lg);
    Tensor<T> s0_copy = s0;  // shared buffer, kept alive for the backward pass
    return tape.push(
        std::move(y), req, [qs, k, vp, lg, s0_copy, B, Tn, H, d, row](Tape<T>& tp, VarId self) {
            const Tensor<T>& g = tp.grad(self);
            const Tensor<T>& qv = tp.val(qs);
            const Tensor<T>& kv = tp.val(k);
            const Tensor<T>& vv = tp.val(vp);
            const Tensor<T>& lv = tp.val(lg);
            const bool carry = s0_copy.defined();
            const bool need_q = tp.requires_grad(qs);
            const bool need_k = tp.requires_grad(k);
            const bool need_v = tp.requires_grad(vp);
            const bool need_lg = tp.requires_grad(lg);
            Tensor<T>* dq = need_q ? &tp.grad(qs) : nullptr;
            Tensor<T>* dk = need_k ? &tp.grad(k) : nullptr;
            Tensor<T>* dv = need_v ? &tp.grad(vp) : nullptr;
            Tensor<T>* dl = need_lg ? &tp.grad(lg) : nullptr;

            std::vector<double> c(static_cast<size_t>(Tn)), dc(static_cast<size_t>(Tn));
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t h = 0; h < H; ++h) {
                    double acc = 0.0;
                    for (int64_t t = 0; t < Tn; ++t) {
                        acc += static_cast<double>(lv[(b * Tn + t) * H + h]);
                        c[static_cast<size_t>(t)] = acc;
                    }
                    std::fill(dc.begin(), dc.end(), 0.0);
                    const int64_t base = (b * Tn * H + h) * d * 2;
                    const T* qp = qv.data() + base;
                    const T* kp = kv.data() + base;
                    const T* vpp = vv.data() + base;
                    const T* gp = g.data() + base;
                    for (int64_t t = 0; t < Tn; ++t) {
                        const T* qt = qp + t * row;
                        const T* gt = gp + t * row;
                        for (int64_t i = 0; i <= t; ++i) {
                            const T* ki = kp + i * row;
                            const T* vi = vpp + i * row;
                            // Recompute the score and decay weight for (t, i).
                            T ar = T(0), ai = T(0);
                            for (int64_t j = 0; j < d; ++j) {
                                const T kr = ki[2 * j], kim = ki[2 * j + 1];
                                const T qr = qt[2 * j], qi = qt[2 * j + 1];
                                ar += kr * qr + kim * qi;
                                ai += kr * qi - kim * qr;
                            }
                            const double m =
                                std::exp(c[static_cast<size_t>(t)] - c[static_cast<size_t>(i)]);
                            // dP = gY . conj(V'),  dA = dP m,  dm = Re(dP conj(A))
                            T dpr = T(0), dpi = T(0);
                            for (int64_t j = 0; j < d; ++j) {
                                const T vr = vi[2 * j], vim = vi[2 * j + 1];
                                const T gr = gt[2 * j], gi = gt[2 * j + 1];
                                dpr += gr * vr + gi * vim;
                                dpi += gi * vr - gr * vim;
                            }
                            const T dar = static_cast<T>(m) * dpr;
                            const T dai = static_cast<T>(m) * dpi;
                            if (need_lg && i != t) {
                                const double dm = static_cast<double>(dpr * ar + dpi * ai) * m;
                                dc[static_cast<size_t>(t)] += dm;
                                dc[static_cast<size_t>(i)] -= dm;
                            }
                            if (need_q) {
                                T* dqt = dq->data() + base + t * row;
                                for (int64_t j = 0; j < d; ++j) {
                                    const T kr = ki[2 * j], kim = ki[2 * j + 1];
                                    dqt[2 * j] += dar * kr - dai * kim;
                                    dqt[2 * j + 1] += dar * kim + dai * kr;
                                }
                            }
                            if (need_k) {
                                T* dki = dk->data() + base + i * row;
                                for (int64_t j = 0; j < d; ++j) {
                                    const T qr = qt[2 * j], qi = qt[2 * j + 1];
                                    dki[2 * j] += dar * qr + dai * qi;
                                    dki[2 * j + 1] += dar * qi - dai * qr;
                                }
                            }
                            if (need_v) {
                                const T pr = static_cast<T>(m) * ar;
                                const T pi = static_cast<T>(m) * ai;
                                T* dvi = dv->data() + base + i * row;
                                for (int64_t j = 0; j < d; ++j) {
                                    const T gr = gt[2 * j], gi = gt[2 * j + 1];
                                    dvi[2 * j] += pr * gr + pi * gi;
                                    dvi[2 * j + 1] += pr * gi - pi * gr;
                                }
                            }
                        }
                        if (carry) {
                            const T* s0p = s0_copy.data() + ((b * H + h) * d * d) * 2;
                            const double e = std::exp(c[static_cast<size_t>(t)]);
                            double dct = 0.0;
                            for (int64_t a = 0; a < d; ++a) {
                                const T* srow = s0p + a * d * 2;
                                const T gr = gt[2 * a], gi = gt[2 * a + 1];
                                if (need_q) {
                                    T* dqt = dq->data() + base + t * row;
                                    for (int64_t j = 0; j < d; ++j) {
                                        const T sr = srow[2 * j], si = srow[2 * j + 1];
                                        dqt[2 * j] += static_cast<T>(e) * (gr * sr + gi * si);
                                        dqt[2 * j + 1] += static_cast<T>(e) * (gi * sr - gr * si);
                                    }
                                }
                                if (need_lg) {
                                    T accr = T(0), acci = T(0);
                                    for (int64_t j = 0; j < d; ++j) {
                                        const T sr = srow[2 * j], si = srow[2 * j + 1];
                                        const T qr = qt[2 * j], qi = qt[2 * j + 1];
                                        accr += sr * qr - si * qi;
                                        acci += sr * qi + si * qr;
                                    }
                                    dct += static_cast<double>(gr * accr + gi * acci) * e;
                                }
                            }
                            dc[static_cast<size_t>(t)] += dct;
                        }
                    }
                    if (need_lg) {
                        // c is an inclusive prefix sum of lg, so d lg_j = sum_{t>=j} dc_t.
                        double suffix = 0.0;
                        for (int64_t t = Tn - 1; t >= 0; --t) {
                            suffix += dc[static_cast<size_t>(t)];
                            (*dl)[(b * Tn + t) * H + h] += static_cast<T>(suffix);
                        }
                    }
                }
            }
        });
}

// ---- parallel dual form, real ----

/// Real ablation of pam_core: plain dot-product scores, real outer products.
/// qs/k/vp: [B,T,H,d], lg: [B,T,H], s0: [B,H,d,d].
template <typename T>
VarId sam_core(Tape<T>& tape, VarId qs, VarId k, VarId vp, VarId lg, const Tensor<T>& s0,
               Tensor<T>* s_out) {
    const Tensor<T>& qv = tape.val(qs);
    const Tensor<T>& kv = tape.val(k);
    const Tensor<T>& vv = tape.val(vp);
    const Tensor<T>& lv = tape.val(lg);
    check(qv.rank() == 4, "sam_core: expected [B,T,H,d], got " + shape_string(qv.shape));
    check(qv.shape == kv.shape && qv.shape == vv.shape, "sam_core: q/k/v shape mismatch");
    const int64_t B = qv.shape[0], Tn = qv.shape[1], H = qv.shape[2], d = qv.shape[3];
    check(lv.shape == std::vector<int64_t>({B, Tn, H}), "sam_core: log-gamma shape mismatch");
    const bool carry = s0.defined();
    if (carry) {
        check(s0.shape == std::vector<int64_t>({B, H, d, d}),
              "sam_core: carry state shape " + shape_string(s0.shape));
    }

    Tensor<T> y = Tensor<T>::zeros(qv.shape);
    if (s_out) *s_out = Tensor<T>::zeros({B, H, d, d});

    const int64_t row = H * d;
    std::vector<double> c(static_cast<size_t>(Tn));
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t h = 0; h < H; ++h) {
            double acc = 0.0;
            for (int64_t t = 0; t < Tn; ++t) {
                acc += static_cast<double>(lv[(b * Tn + t) * H + h]);
                c[static_cast<size_t>(t)] = acc;
            }
            const int64_t base = (b * Tn * H + h) * d;
            const T* qp = qv.data() + base;
            const T* kp = kv.data() + base;
            const T* vpp = vv.data() + base;
            T* yp = y.data() + base;
            for (int64_t t = 0; t < Tn; ++t) {
                const T* qt = qp + t * row;
                T* yt = yp + t * row;
                for (int64_t i = 0; i <= t; ++i) {
                    const T* ki = kp + i * row;
                    T a = T(0);
                    for (int64_t j = 0; j < d; ++j) a += ki[j] * qt[j];
                    double m = std::exp(c[static_cast<size_t>(t)] - c[static_cast<size_t>(i)]);
                    if (g_inject_decay_fault && t == Tn / 2 && i == 0) m *= 1.001;
                    const T p = static_cast<T>(m) * a;
                    const T* vi = vpp + i * row;
                    for (int64_t j = 0; j < d; ++j) yt[j] += p * vi[j];
                }
                if (carry) {
                    const T* s0p = s0.data() + (b * H + h) * d * d;
                    const T e = static_cast<T>(std::exp(c[static_cast<size_t>(t)]));
                    for (int64_t a = 0; a < d; ++a) {
                        const T* srow = s0p + a * d;
                        T accv = T(0);
                        for (int64_t j = 0; j < d; ++j) accv += srow[j] * qt[j];
                        yt[a] += e * accv;
                    }
                }
            }
            if (s_out) {
                T* so = s_out->data() + (b * H + h) * d * d;
                const double ct = c[static_cast<size_t>(Tn - 1)];
                if (carry) {
                    const T* s0p = s0.data() + (b * H + h) * d * d;
                    const T e = static_cast<T>(std::exp(ct));
                    for (int64_t x = 0; x < d * d; ++x) so[x] = e * s0p[x];
                } else {
                    std::fill(so, so + d * d, T(0));
                }
                for (int64_t i = 0; i < Tn; ++i) {
                    const T w = static_cast<T>(std::exp(ct - c[static_cast<size_t>(i)]));
                    const T* vi = vpp + i * row;
                    const T* ki = kp + i * row;
                    for (int64_t a = 0; a < d; ++a) {
                        const T vw = w * vi[a];
                        T* srow = so + a * d;
                        for (int64_t j = 0; j < d; ++j) srow[j] += vw * ki[j];
                    }
                }
            }
        }
    }

    const bool req = tape.requires_grad(qs) || tape.requires_grad(k) || tape.requires_grad(vp) ||
                     tape.requires_grad(lg);
    Tensor<T> s0_copy = s0;
    return tape.push(
        std::move(y), req, [qs, k, vp, lg, s0_copy, B, Tn, H, d, row](Tape<T>& tp, VarId self) {
            const Tensor<T>& g = tp.grad(self);
            const Tensor<T>& qv = tp.val(qs);
            const Tensor<T>& kv = tp.val(k);
            const Tensor<T>& vv = tp.val(vp);
            const Tensor<T>& lv = tp.val(lg);
            const bool carry = s0_copy.defined();
            const bool need_q = tp.requires_grad(qs);
            const bool need_k = tp.requires_grad(k);
            const bool need_v = tp.requires_grad(vp);
            const bool need_lg = tp.requires_grad(lg);
            Tensor<T>* dq = need_q ? &tp.grad(qs) : nullptr;
            Tensor<T>* dk = need_k ? &tp.grad(k) : nullptr;
            Tensor<T>* dv = need_v ? &tp.grad(vp) : nullptr;
            Tensor<T>* dl = need_lg ? &tp.grad(lg) : nullptr;

            std::vector<double> c(static_cast<size_t>(Tn)), dc(static_cast<size_t>(Tn));
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t h = 0; h < H; ++h) {
                    double acc = 0.0;
                    for (int64_t t = 0; t < Tn; ++t) {
                        acc += static_cast<double>(lv[(b * Tn + t) * H + h]);
                        c[static_cast<size_t>(t)] = acc;
                    }
                    std::fill(dc.begin(), dc.end(), 0.0);
                    const int64_t base = (b * Tn * H + h) * d;
                    const T* qp = qv.data() + base;
                    const T* kp = kv.data() + base;
                    const T* vpp = vv.data() + base;
                    const T* gp = g.data() + base;
                    for (int64_t t = 0; t < Tn; ++t) {
                        const T* qt = qp + t * row;
                        const T* gt = gp + t * row;
                        for (int64_t i = 0; i <= t; ++i) {
                            const T* ki = kp + i * row;
                            const T* vi = vpp + i * row;
                            T a = T(0), dp = T(0);
                            for (int64_t j = 0; j < d; ++j) {
                                a += ki[j] * qt[j];
                                dp += gt[j] * vi[j];
                            }
                            const double m =
                                std::exp(c[static_cast<size_t>(t)] - c[static_cast<size_t>(i)]);
                            const T da = static_cast<T>(m) * dp;
                            if (need_lg && i != t) {
                                const double dm = static_cast<double>(dp * a) * m;
                                dc[static_cast<size_t>(t)] += dm;
                                dc[static_cast<size_t>(i)] -= dm;
                            }
                            if (need_q) {
                                T* dqt = dq->data() + base + t * row;
                                for (int64_t j = 0; j < d; ++j) dqt[j] += da * ki[j];
                            }
                            if (need_k) {
                                T* dki = dk->data() + base + i * row;
                                for (int64_t j = 0; j < d; ++j) dki[j] += da * qt[j];
                            }
                            if (need_v) {
                                const T p = static_cast<T>(m) * a;
                                T* dvi = dv->data() + base + i * row;
                                for (int64_t j = 0; j < d; ++j) dvi[j] += p * gt[j];
                            }
                        }
                        if (carry) {
                            const T* s0p = s0_copy.data() + (b * H + h) * d * d;
                            const double e = std::exp(c[static_cast<size_t>(t)]);
                            double dct = 0.0;
                            for (int64_t a = 0; a < d; ++a) {
                                const T* srow = s0p + a * d;
                                const T ga = gt[a];
                                if (need_q) {
                                    T* dqt = dq->data() + base + t * row;
                                    for (int64_t j = 0; j < d; ++j) {
                                        dqt[j] += static_cast<T>(e) * ga * srow[j];
                                    }
                                }
                                if (need_lg) {
                                    T accv = T(0);
                                    for (int64_t j = 0; j < d; ++j) accv += srow[j] * qt[j];
                                    dct += static_cast<double>(ga * accv) * e;
                                }
                            }
                            dc[static_cast<size_t>(t)] += dct;
                        }
                    }
                    if (need_lg) {
                        double suffix = 0.0;
                        for (int64_t t = Tn - 1; t >= 0; --t) {
                            suffix += dc[static_cast<size_t>(t)];
                            (*dl)[(b * Tn + t) * H + h] += static_cast<T>(suffix);
                        }
                    }
                }
            }
        });
}

// ---- bare recurrence (gates supplied by the caller) ----

/// One update of a single head: S <- gamma S + v' (x) conj(k); y = S qs.
/// s: [d,d,2] row-major; qs is the already-scaled query. The building block
/// for pam_step and for capacity experiments that force the gates.
template <typename T>
void pam_recurrence_step(T* s, const T* qs, const T* k, const T* vp, double gamma, int64_t d,
                         T* y) {
    const T gt = static_cast<T>(gamma);
    for (int64_t a = 0; a < d; ++a) {
        const T vr = vp[2 * a], vi = vp[2 * a + 1];
        T* srow = s + a * d * 2;
        for (int64_t j = 0; j < d; ++j) {
            const T kr = k[2 * j], ki = k[2 * j + 1];
            srow[2 * j] = gt * srow[2 * j] + (vr * kr + vi * ki);
            srow[2 * j + 1] = gt * srow[2 * j + 1] + (vi * kr - vr * ki);
        }
    }
    for (int64_t a = 0; a < d; ++a) {
        const T* srow = s + a * d * 2;
        T accr = T(0), acci = T(0);
        for (int64_t j = 0; j < d; ++j) {
            const T sr = srow[2 * j], si = srow[2 * j + 1];
            const T qr = qs[2 * j], qi = qs[2 * j + 1];
            accr += sr * qr - si * qi;
            acci += sr * qi + si * qr;
        }
        y[2 * a] = accr;
        y[2 * a + 1] = acci;
    }
}

/// Real counterpart: S <- gamma S + v' (x) k; y = S qs. s: [d,d].
template <typename T>
void sam_recurrence_step(T* s, const T* qs, const T* k, const T* vp, double gamma, int64_t d,
                         T* y) {
    const T gt = static_cast<T>(gamma);
    for (int64_t a = 0; a < d; ++a) {
        const T va = vp[a];
        T* srow = s + a * d;
        for (int64_t j = 0; j < d; ++j) srow[j] = gt * srow[j] + va * k[j];
    }
    for (int64_t a = 0; a < d; ++a) {
        const T* srow = s + a * d;
        T accv = T(0);
        for (int64_t j = 0; j < d; ++j) accv += srow[j] * qs[j];
        y[a] = accv;
    }
}

// ---- layer weights and the recurrent path ----

/// Raw parameter views for one mixing layer, complex arithmetic.
/// qkv: [3Hd, D] factors; out: [D, Hd] factors; dt: [H, 2D] + [H];
/// protect: [H, D] + [H].
template <typename T>
struct PamLayerWeights {
    const Tensor<T>* qkv_wr = nullptr;
    const Tensor<T>* qkv_wi = nullptr;
    const Tensor<T>* out_wr = nullptr;
    const Tensor<T>* out_wi = nullptr;
    const Tensor<T>* dt_w = nullptr;
    const Tensor<T>* dt_b = nullptr;
    const Tensor<T>* prot_w = nullptr;
    const Tensor<T>* prot_b = nullptr;
    int64_t heads = 0;
    int64_t head_dim = 0;
};

/// Real ablation weights: qkv [3Hd, D], out [D, Hd], dt [H, D] + [H],
/// protect [H, D] + [H].
template <typename T>
struct SamLayerWeights {
    const Tensor<T>* qkv_w = nullptr;
    const Tensor<T>* out_w = nullptr;
    const Tensor<T>* dt_w = nullptr;
    const Tensor<T>* dt_b = nullptr;
    const Tensor<T>* prot_w = nullptr;
    const Tensor<T>* prot_b = nullptr;
    int64_t heads = 0;
    int64_t head_dim = 0;
};

/// Per-head gate values for one token.
struct GateValues {
    std::vector<double> dt, p, gamma, log_gamma;
};

/// Gates from one complex input row x (planar xr/xi of length D).
/// dt feeds on concat(re, im); the protect gate on per-channel magnitudes.
template <typename T>
GateValues compute_gates_planar(const PamLayerWeights<T>& w, const T* xr, const T* xi,
                                int64_t dim) {
    const int64_t H = w.heads;
    GateValues gv;
    gv.dt.resize(static_cast<size_t>(H));
    gv.p.resize(static_cast<size_t>(H));
    gv.gamma.resize(static_cast<size_t>(H));
    gv.log_gamma.resize(static_cast<size_t>(H));
    for (int64_t h = 0; h < H; ++h) {
        double a = static_cast<double>((*w.dt_b)[h]);
        const T* dw = w.dt_w->data() + h * 2 * dim;
        for (int64_t j = 0; j < dim; ++j) {
            a += static_cast<double>(dw[j]) * xr[j] + static_cast<double>(dw[dim + j]) * xi[j];
        }
        double b = static_cast<double>((*w.prot_b)[h]);
        const T* pw = w.prot_w->data() + h * dim;
        for (int64_t j = 0; j < dim; ++j) {
            const double mr = xr[j], mi = xi[j];
            b += static_cast<double>(pw[j]) * std::sqrt(mr * mr + mi * mi);
        }
        const size_t hs = static_cast<size_t>(h);
        gv.dt[hs] = softplus_d(a);
        gv.p[hs] = sigmoid_d(b);
        gv.log_gamma[hs] = log_gamma_d(a, b);
        gv.gamma[hs] = std::exp(gv.log_gamma[hs]);
    }
    return gv;
}

/// Gate values for one token of a complex input x: [D, 2].
template <typename T>
GateValues compute_gates(const PamLayerWeights<T>& w, const Tensor<T>& x) {
    check_complex(x, "compute_gates");
    const int64_t dim = x.dim(-2);
    std::vector<T> xr(static_cast<size_t>(dim)), xi(static_cast<size_t>(dim));
    for (int64_t j = 0; j < dim; ++j) {
        xr[static_cast<size_t>(j)] = x[2 * j];
        xi[static_cast<size_t>(j)] = x[2 * j + 1];
    }
    return compute_gates_planar(w, xr.data(), xi.data(), dim);
}

/// Real-input gates: dt feeds on x directly, protect on |x| per channel.
template <typename T>
GateValues compute_gates_real(const SamLayerWeights<T>& w, const T* x, int64_t dim) {
    const int64_t H = w.heads;
    GateValues gv;
    gv.dt.resize(static_cast<size_t>(H));
    gv.p.resize(static_cast<size_t>(H));
    gv.gamma.resize(static_cast<size_t>(H));
    gv.log_gamma.resize(static_cast<size_t>(H));
    for (int64_t h = 0; h < H; ++h) {
        double a = static_cast<double>((*w.dt_b)[h]);
        const T* dw = w.dt_w->data() + h * dim;
        for (int64_t j = 0; j < dim; ++j) a += static_cast<double>(dw[j]) * x[j];
        double b = static_cast<double>((*w.prot_b)[h]);
        const T* pw = w.prot_w->data() + h * dim;
        for (int64_t j = 0; j < dim; ++j) {
            b += static_cast<double>(pw[j]) * std::abs(static_cast<double>(x[j]));
        }
        const size_t hs = static_cast<size_t>(h);
        gv.dt[hs] = softplus_d(a);
        gv.p[hs] = sigmoid_d(b);
        gv.log_gamma[hs] = log_gamma_d(a, b);
        gv.gamma[hs] = std::exp(gv.log_gamma[hs]);
    }
    return gv;
}

/// One recurrent token for a whole layer: projections, rotary factors, gates,
/// per-head state update and retrieval, output projection.
/// x: [B, D, 2]; state.s: [B, H, d, d, 2]. Returns y: [B, D, 2].
/// Throws on non-finite state entries, naming the head.
template <typename T>
Tensor<T> pam_step(const PamLayerWeights<T>& w, RopeTable& rope, PamState<T>& state,
                   const Tensor<T>& x) {
    check_complex(x, "pam_step");
    const int64_t dim = x.dim(-2);
    const int64_t B = x.numel() / (dim * 2);
    const int64_t H = w.heads, d = w.head_dim, hd = H * d;
    check(w.qkv_wr->shape == std::vector<int64_t>({3 * hd, dim}), "pam_step: qkv weight shape");
    check(state.s.shape == std::vector<int64_t>({B, H, d, d, 2}),
          "pam_step: state shape " + shape_string(state.s.shape));
    rope.ensure(state.pos + 1);
    const double* f = rope.cs.data() + state.pos * d * 2;
    const T qscale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));

    Tensor<T> y = Tensor<T>::zeros({B, dim, 2});
    std::vector<T> xr(static_cast<size_t>(dim)), xi(static_cast<size_t>(dim));
    std::vector<T> qkr(static_cast<size_t>(3 * hd)), qki(static_cast<size_t>(3 * hd));
    std::vector<T> yh(static_cast<size_t>(hd * 2));
    for (int64_t b = 0; b < B; ++b) {
        const T* xp = x.data() + b * dim * 2;
        for (int64_t j = 0; j < dim; ++j) {
            xr[static_cast<size_t>(j)] = xp[2 * j];
            xi[static_cast<size_t>(j)] = xp[2 * j + 1];
        }
        for (int64_t o = 0; o < 3 * hd; ++o) {
            const T* wr = w.qkv_wr->data() + o * dim;
            const T* wi = w.qkv_wi->data() + o * dim;
            T ar = T(0), ai = T(0);
            for (int64_t j = 0; j < dim; ++j) {
                ar += wr[j] * xr[static_cast<size_t>(j)] - wi[j] * xi[static_cast<size_t>(j)];
                ai += wi[j] * xr[static_cast<size_t>(j)] + wr[j] * xi[static_cast<size_t>(j)];
            }
            qkr[static_cast<size_t>(o)] = ar;
            qki[static_cast<size_t>(o)] = ai;
        }
        const GateValues gv = compute_gates_planar(w, xr.data(), xi.data(), dim);
        for (int64_t h = 0; h < H; ++h) {
            T q[2 * 256], k[2 * 256], vp[2 * 256];
            check(d <= 256, "pam_step: head_dim above the recurrent-path buffer size");
            // Rotate q and k by the position factor, scale q, protect v.
            for (int64_t j = 0; j < d; ++j) {
                const T co = static_cast<T>(f[2 * j]), si = static_cast<T>(f[2 * j + 1]);
                const int64_t qo = h * d + j, ko = hd + h * d + j, vo = 2 * hd + h * d + j;
                const T qr = qkr[static_cast<size_t>(qo)], qi = qki[static_cast<size_t>(qo)];
                const T kr = qkr[static_cast<size_t>(ko)], ki = qki[static_cast<size_t>(ko)];
                q[2 * j] = (qr * co - qi * si) * qscale;
                q[2 * j + 1] = (qi * co + qr * si) * qscale;
                k[2 * j] = kr * co - ki * si;
                k[2 * j + 1] = ki * co + kr * si;
                const T pv = static_cast<T>(1.0 - gv.p[static_cast<size_t>(h)]);
                vp[2 * j] = qkr[static_cast<size_t>(vo)] * pv;
                vp[2 * j + 1] = qki[static_cast<size_t>(vo)] * pv;
            }
            T* sp = state.s.data() + ((b * H + h) * d * d) * 2;
            pam_recurrence_step(sp, q, k, vp, gv.gamma[static_cast<size_t>(h)], d,
                                yh.data() + h * d * 2);
            for (int64_t j = 0; j < d * d * 2; ++j) {
                if (!std::isfinite(static_cast<double>(sp[j]))) {
                    throw std::runtime_error("pam_step: non-finite state in head " +
                                             std::to_string(h) + " at position " +
                                             std::to_string(state.pos));
                }
            }
        }
        T* yp = y.data() + b * dim * 2;
        for (int64_t o = 0; o < dim; ++o) {
            const T* wr = w.out_wr->data() + o * hd;
            const T* wi = w.out_wi->data() + o * hd;
            T ar = T(0), ai = T(0);
            for (int64_t j = 0; j < hd; ++j) {
                const T hr = yh[static_cast<size_t>(2 * j)], hi = yh[static_cast<size_t>(2 * j + 1)];
                ar += wr[j] * hr - wi[j] * hi;
                ai += wi[j] * hr + wr[j] * hi;
            }
            yp[2 * o] = ar;
            yp[2 * o + 1] = ai;
        }
    }
    state.pos += 1;
    return y;
}

/// Real ablation of pam_step. x: [B, D]; state.s: [B, H, d, d].
template <typename T>
Tensor<T> sam_step(const SamLayerWeights<T>& w, RopeTable& rope, PamState<T>& state,
                   const Tensor<T>& x) {
    const int64_t dim = x.dim(-1);
    const int64_t B = x.numel() / dim;
    const int64_t H = w.heads, d = w.head_dim, hd = H * d;
    check(state.s.shape == std::vector<int64_t>({B, H, d, d}), "sam_step: state shape");
    rope.ensure(state.pos + 1);
    const int64_t pairs = d / 2;
    const double* f = rope.cs.data() + state.pos * pairs * 2;
    const T qscale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));

    Tensor<T> y = Tensor<T>::zeros({B, dim});
    std::vector<T> qk(static_cast<size_t>(3 * hd));
    std::vector<T> yh(static_cast<size_t>(hd));
    for (int64_t b = 0; b < B; ++b) {
        const T* xp = x.data() + b * dim;
        for (int64_t o = 0; o < 3 * hd; ++o) {
            const T* wrow = w.qkv_w->data() + o * dim;
            T a = T(0);
            for (int64_t j = 0; j < dim; ++j) a += wrow[j] * xp[j];
            qk[static_cast<size_t>(o)] = a;
        }
        const GateValues gv = compute_gates_real(w, xp, dim);
        for (int64_t h = 0; h < H; ++h) {
            T q[512], k[512], vp[512];
            check(d <= 512, "sam_step: head_dim above the recurrent-path buffer size");
            for (int64_t j = 0; j < pairs; ++j) {
                const T co = static_cast<T>(f[2 * j]), si = static_cast<T>(f[2 * j + 1]);
                const int64_t qo = h * d + 2 * j, ko = hd + h * d + 2 * j;
                const T q0 = qk[static_cast<size_t>(qo)], q1 = qk[static_cast<size_t>(qo + 1)];
                const T k0 = qk[static_cast<size_t>(ko)], k1 = qk[static_cast<size_t>(ko + 1)];
                q[2 * j] = (q0 * co - q1 * si) * qscale;
                q[2 * j + 1] = (q1 * co + q0 * si) * qscale;
                k[2 * j] = k0 * co - k1 * si;
                k[2 * j + 1] = k1 * co + k0 * si;
            }
            const T pv = static_cast<T>(1.0 - gv.p[static_cast<size_t>(h)]);
            for (int64_t j = 0; j < d; ++j) {
                vp[j] = qk[static_cast<size_t>(2 * hd + h * d + j)] * pv;
            }
            T* sp = state.s.data() + (b * H + h) * d * d;
            sam_recurrence_step(sp, q, k, vp, gv.gamma[static_cast<size_t>(h)], d,
                                yh.data() + h * d);
            for (int64_t j = 0; j < d * d; ++j) {
                if (!std::isfinite(static_cast<double>(sp[j]))) {
                    throw std::runtime_error("sam_step: non-finite state in head " +
                                             std::to_string(h) + " at position " +
                                             std::to_string(state.pos));
                }
            }
        }
        T* yp = y.data() + b * dim;
        for (int64_t o = 0; o < dim; ++o) {
            const T* wrow = w.out_w->data() + o * hd;
            T a = T(0);
            for (int64_t j = 0; j < hd; ++j) a += wrow[j] * yh[static_cast<size_t>(j)];
            yp[o] = a;
        }
    }
    state.pos += 1;
    return y;
}

// ---- parallel layer assembly (tape) ----

struct PamVarIds {
    VarId qkv_wr, qkv_wi, out_wr, out_wi, dt_w, dt_b, prot_w, prot_b;
};

struct SamVarIds {
    VarId qkv_w, out_w, dt_w, dt_b, prot_w, prot_b;
};

/// Full mixing layer over a window in the chunked dual form. x: [B,T,D,2];
/// s0.pos fixes the rotary offset; s_out (optional) receives the advanced
/// state as a constant (gradients do not flow across window boundaries).
template <typename T>
VarId pam_parallel(Tape<T>& tape, VarId x, const PamVarIds& p, RopeTable& rope, int64_t heads,
                   int64_t head_dim, const PamState<T>& s0, PamState<T>* s_out) {
    const Tensor<T>& xv = tape.val(x);
    check_complex(xv, "pam_parallel");
    const int64_t B = xv.shape[0], Tn = xv.shape[1];
    const int64_t hd = heads * head_dim;

    VarId qkv = complex_linear(tape, p.qkv_wr, p.qkv_wi, x);  // [B,T,3Hd,2]
    VarId q = reshape(tape, slice_channels(tape, qkv, 0, hd), {B, Tn, heads, head_dim, 2});
    VarId k = reshape(tape, slice_channels(tape, qkv, hd, 2 * hd), {B, Tn, heads, head_dim, 2});
    VarId v = reshape(tape, slice_channels(tape, qkv, 2 * hd, 3 * hd), {B, Tn, heads, head_dim, 2});
    q = rope_complex(tape, q, rope, s0.pos);
    k = rope_complex(tape, k, rope, s0.pos);
    VarId qs = scale_const(tape, q, static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim))));

    VarId dt_raw = real_linear(tape, p.dt_w, p.dt_b, concat_reim(tape, x));      // [B,T,H]
    VarId p_raw = real_linear(tape, p.prot_w, p.prot_b, complex_abs(tape, x));   // [B,T,H]
    VarId lg = gate_log_gamma(tape, dt_raw, p_raw);
    VarId vp = scale_complex_by_real(tape, v, one_minus_sigmoid(tape, p_raw));

    Tensor<T> s_next;
    VarId y = pam_core(tape, qs, k, vp, lg, s0.s, s_out ? &s_next : nullptr);
    if (s_out) {
        s_out->s = std::move(s_next);
        s_out->pos = s0.pos + Tn;
    }
    VarId merged = reshape(tape, y, {B, Tn, hd, 2});
    return complex_linear(tape, p.out_wr, p.out_wi, merged);
}

/// Real ablation of pam_parallel. x: [B,T,D].
template <typename T>
VarId sam_parallel(Tape<T>& tape, VarId x, const SamVarIds& p, RopeTable& rope, int64_t heads,
                   int64_t head_dim, const PamState<T>& s0, PamState<T>* s_out) {
    const Tensor<T>& xv = tape.val(x);
    const int64_t B = xv.shape[0], Tn = xv.shape[1];
    const int64_t hd = heads * head_dim;

    VarId qkv = real_linear(tape, p.qkv_w, VarId{}, x);  // [B,T,3Hd]
    VarId q = reshape(tape, slice_last(tape, qkv, 0, hd), {B, Tn, heads, head_dim});
    VarId k = reshape(tape, slice_last(tape, qkv, hd, 2 * hd), {B, Tn, heads, head_dim});
    VarId v = reshape(tape, slice_last(tape, qkv, 2 * hd, 3 * hd), {B, Tn, heads, head_dim});
    q = rope_real(tape, q, rope, s0.pos);
    k = rope_real(tape, k, rope, s0.pos);
    VarId qs = scale_const(tape, q, static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim))));

    VarId dt_raw = real_linear(tape, p.dt_w, p.dt_b, x);
    VarId p_raw = real_linear(tape, p.prot_w, p.prot_b, abs_ew(tape, x));
    VarId lg = gate_log_gamma(tape, dt_raw, p_raw);
    VarId vp = scale_real_by_real(tape, v, one_minus_sigmoid(tape, p_raw));

    Tensor<T> s_next;
    VarId y = sam_core(tape, qs, k, vp, lg, s0.s, s_out ? &s_next : nullptr);
    if (s_out) {
        s_out->s = std::move(s_next);
        s_out->pos = s0.pos + Tn;
    }
    VarId merged = reshape(tape, y, {B, Tn, hd});
    return real_linear(tape, p.out_w, VarId{}, merged);
}

// ---- effective rank ----

/// exp of the entropy of the normalized singular value distribution of S.
/// Accepts a complex [d,d,2] or real [d,d] matrix; returns 0 for a zero
/// matrix, d for any unitary scaling of an isometry.
template <typename T>
double effective_rank(const Tensor<T>& s) {
    check(s.rank() == 2 || (s.rank() == 3 && s.shape[2] == 2),
          "effective_rank: expected [d,d] or [d,d,2], got " + shape_string(s.shape));
    const bool cplx = s.rank() == 3;
    const int64_t d = s.shape[0];
    check(s.shape[1] == d, "effective_rank: matrix must be square");
    // Singular values via the Hermitian eigenvalues of S^H S.
    std::vector<std::complex<double>> gram(static_cast<size_t>(d * d));
    for (int64_t a = 0; a < d; ++a) {
        for (int64_t b = 0; b < d; ++b) {
            std::complex<double> acc = 0.0;
            for (int64_t r = 0; r < d; ++r) {
                std::complex<double> sra, srb;
                if (cplx) {
                    sra = {static_cast<double>(s[(r * d + a) * 2]),
                           static_cast<double>(s[(r * d + a) * 2 + 1])};
                    srb = {static_cast<double>(s[(r * d + b) * 2]),
                           static_cast<double>(s[(r * d + b) * 2 + 1])};
                } else {
                    sra = static_cast<double>(s[r * d + a]);
                    srb = static_cast<double>(s[r * d + b]);
                }
                acc += std::conj(sra) * srb;
            }
            gram[static_cast<size_t>(a * d + b)] = acc;
        }
    }
    std::vector<double> ev = hermitian_eigenvalues(std::move(gram), d);
    double total = 0.0;
    for (double& l : ev) {
        l = std::sqrt(std::max(l, 0.0));
        total += l;
    }
    if (total <= 0.0) return 0.0;
    double h = 0.0;
    for (double l : ev) {
        const double p = l / total;
        if (p > 0.0) h -= p * std::log(p);
    }
    return std::exp(h);
}

}  // namespace pam
