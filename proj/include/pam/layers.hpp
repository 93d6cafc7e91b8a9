#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "pam/ccore.hpp"
#include "pam/tape.hpp"
#include "pam/tensor.hpp"

namespace pam {

/// Magnitude guard below which a unit-phase factor z/|z| is treated as zero.
inline constexpr double kPhaseEps = 1e-8;

// ---- modReLU ----

/// modReLU(z) = ReLU(|z| + b) * z/|z| per channel; preserves phase, thresholds
/// magnitude. z: [..., C, 2], b: [C]. Exact zeros where |z| + b <= 0.
template <typename T>
VarId modrelu(Tape<T>& tape, VarId z, VarId b) {
    const Tensor<T>& zv = tape.val(z);
    const Tensor<T>& bv = tape.val(b);
    check_complex(zv, "modrelu");
    const int64_t c = zv.dim(-2);
    check(bv.numel() == c, "modrelu: bias length " + shape_string(bv.shape) +
                               " does not match channels of " + shape_string(zv.shape));
    const int64_t rows = zv.numel() / (2 * c);
    Tensor<T> out = Tensor<T>::zeros(zv.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* zp = zv.data() + r * 2 * c;
        T* op = out.data() + r * 2 * c;
        for (int64_t j = 0; j < c; ++j) {
            const T zr = zp[2 * j], zi = zp[2 * j + 1];
            const T mag = std::sqrt(zr * zr + zi * zi);
            if (static_cast<double>(mag) < kPhaseEps) continue;
            const T m = mag + bv[j];
            if (m <= T(0)) continue;
            const T f = m / mag;
            op[2 * j] = f * zr;
            op[2 * j + 1] = f * zi;
        }
    }
    const bool req = tape.requires_grad(z) || tape.requires_grad(b);
    return tape.push(std::move(out), req, [z, b, c, rows](Tape<T>& tp, VarId self) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& zv = tp.val(z);
        const Tensor<T>& bv = tp.val(b);
        const bool need_z = tp.requires_grad(z);
        const bool need_b = tp.requires_grad(b);
        for (int64_t r = 0; r < rows; ++r) {
            const T* zp = zv.data() + r * 2 * c;
            const T* gp = g.data() + r * 2 * c;
            for (int64_t j = 0; j < c; ++j) {
                const T zr = zp[2 * j], zi = zp[2 * j + 1];
                const T mag = std::sqrt(zr * zr + zi * zi);
                if (static_cast<double>(mag) < kPhaseEps) continue;
                const T m = mag + bv[j];
                if (m <= T(0)) continue;
                const T gr = gp[2 * j], gi = gp[2 * j + 1];
                if (need_z) {
                    // out = (1 + b/|z|) z, so d out_r / d z_r = 1 + (b/|z|)(1 - zr^2/|z|^2)
                    // and the cross terms carry -(b/|z|) zr zi / |z|^2.
                    const T br = bv[j] / mag;
                    const T inv2 = T(1) / (mag * mag);
                    Tensor<T>& dz = tp.grad(z);
                    T* dzp = dz.data() + r * 2 * c;
                    const T dot = (gr * zr + gi * zi) * inv2;
                    dzp[2 * j] += gr * (T(1) + br) - br * zr * dot;
                    dzp[2 * j + 1] += gi * (T(1) + br) - br * zi * dot;
                }
                if (need_b) {
                    tp.grad(b)[j] += (gr * zr + gi * zi) / mag;
                }
            }
        }
    });
}

// ---- norms ----

/// Complex RMS norm: out_c = s_c * z_c / RMS(|z|), RMS over the channel axis.
/// Phase of every channel is untouched; an all-zero row stays zero.
template <typename T>
VarId complex_norm(Tape<T>& tape, VarId z, VarId s) {
    const Tensor<T>& zv = tape.val(z);
    const Tensor<T>& sv = tape.val(s);
    check_complex(zv, "complex_norm");
    const int64_t c = zv.dim(-2);
    check(sv.numel() == c, "complex_norm: scale length " + shape_string(sv.shape) +
                               " does not match channels of " + shape_string(zv.shape));
    const int64_t rows = zv.numel() / (2 * c);
    Tensor<T> out = Tensor<T>::zeros(zv.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* zp = zv.data() + r * 2 * c;
        T* op = out.data() + r * 2 * c;
        double acc = 0.0;
        for (int64_t k = 0; k < 2 * c; ++k) acc += static_cast<double>(zp[k]) * zp[k];
        const double rms = std::sqrt(acc / static_cast<double>(c));
        if (rms < kPhaseEps) continue;
        for (int64_t j = 0; j < c; ++j) {
            const T f = static_cast<T>(sv[j] / rms);
            op[2 * j] = f * zp[2 * j];
            op[2 * j + 1] = f * zp[2 * j + 1];
        }
    }
    const bool req = tape.requires_grad(z) || tape.requires_grad(s);
    return tape.push(std::move(out), req, [z, s, c, rows](Tape<T>& tp, VarId self) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& zv = tp.val(z);
        const Tensor<T>& sv = tp.val(s);
        const bool need_z = tp.requires_grad(z);
        const bool need_s = tp.requires_grad(s);
        for (int64_t r = 0; r < rows; ++r) {
            const T* zp = zv.data() + r * 2 * c;
            const T* gp = g.data() + r * 2 * c;
            double acc = 0.0;
            for (int64_t k = 0; k < 2 * c; ++k) acc += static_cast<double>(zp[k]) * zp[k];
            const double rms = std::sqrt(acc / static_cast<double>(c));
            if (rms < kPhaseEps) continue;
            if (need_s) {
                Tensor<T>& ds = tp.grad(s);
                for (int64_t j = 0; j < c; ++j) {
                    ds[j] += static_cast<T>(
                        (gp[2 * j] * zp[2 * j] + gp[2 * j + 1] * zp[2 * j + 1]) / rms);
                }
            }
            if (need_z) {
                // With x the 2C real components: out_k = s_k x_k / rms and
                // d rms / d x_j = x_j / (C rms), hence
                // dx_j = s_j g_j / rms - x_j * sum_k(g_k s_k x_k) / (C rms^3).
                double t = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    t += static_cast<double>(sv[j]) *
                         (static_cast<double>(gp[2 * j]) * zp[2 * j] +
                          static_cast<double>(gp[2 * j + 1]) * zp[2 * j + 1]);
                }
                const double inv = 1.0 / rms;
                const double corr = t / (static_cast<double>(c) * rms * rms * rms);
                Tensor<T>& dz = tp.grad(z);
                T* dzp = dz.data() + r * 2 * c;
                for (int64_t j = 0; j < c; ++j) {
                    const double sj = static_cast<double>(sv[j]);
                    dzp[2 * j] += static_cast<T>(sj * gp[2 * j] * inv - zp[2 * j] * corr);
                    dzp[2 * j + 1] +=
                        static_cast<T>(sj * gp[2 * j + 1] * inv - zp[2 * j + 1] * corr);
                }
            }
        }
    });
}

/// Real RMS norm: out_c = s_c * x_c / RMS(x) over the channel axis.
template <typename T>
VarId rmsnorm_real(Tape<T>& tape, VarId x, VarId s) {
    const Tensor<T>& xv = tape.val(x);
    const Tensor<T>& sv = tape.val(s);
    const int64_t c = xv.dim(-1);
    check(sv.numel() == c, "rmsnorm_real: scale length mismatch");
    const int64_t rows = xv.numel() / c;
    Tensor<T> out = Tensor<T>::zeros(xv.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xp = xv.data() + r * c;
        T* op = out.data() + r * c;
        double acc = 0.0;
        for (int64_t j = 0; j < c; ++j) acc += static_cast<double>(xp[j]) * xp[j];
        const double rms = std::sqrt(acc / static_cast<double>(c));
        if (rms < kPhaseEps) continue;
        for (int64_t j = 0; j < c; ++j) op[j] = static_cast<T>(sv[j] * xp[j] / rms);
    }
    const bool req = tape.requires_grad(x) || tape.requires_grad(s);
    return tape.push(std::move(out), req, [x, s, c, rows](Tape<T>& tp, VarId self) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& xv = tp.val(x);
        const Tensor<T>& sv = tp.val(s);
        for (int64_t r = 0; r < rows; ++r) {
            const T* xp = xv.data() + r * c;
            const T* gp = g.data() + r * c;
            double acc = 0.0;
            for (int64_t j = 0; j < c; ++j) acc += static_cast<double>(xp[j]) * xp[j];
            const double rms = std::sqrt(acc / static_cast<double>(c));
            if (rms < kPhaseEps) continue;
            if (tp.requires_grad(s)) {
                Tensor<T>& ds = tp.grad(s);
                for (int64_t j = 0; j < c; ++j) ds[j] += static_cast<T>(gp[j] * xp[j] / rms);
            }
            if (tp.requires_grad(x)) {
                double t = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    t += static_cast<double>(sv[j]) * gp[j] * xp[j];
                }
                const double inv = 1.0 / rms;
                const double corr = t / (static_cast<double>(c) * rms * rms * rms);
                Tensor<T>& dx = tp.grad(x);
                T* dxp = dx.data() + r * c;
                for (int64_t j = 0; j < c; ++j) {
                    dxp[j] += static_cast<T>(sv[j] * gp[j] * inv - xp[j] * corr);
                }
            }
        }
    });
}

// ---- rotary position factors ----

/// Per-position unit complex factors e^{i m theta_j}, theta_j = base^(-j/F).
/// F is the channel count in complex mode and the pair count in real mode.
/// The table grows on demand; growth is not thread-safe.
struct RopeTable {
    double base = 10000.0;
    int64_t head_dim = 0;
    bool real_pairs = false;
    int64_t positions = 0;
    std::vector<double> cs;  // [pos][freq][2] = (cos, sin)

    RopeTable() = default;
    RopeTable(int64_t head_dim_, bool real_pairs_, double base_ = 10000.0)
        : base(base_), head_dim(head_dim_), real_pairs(real_pairs_) {
        check(head_dim > 0, "rope: head_dim must be positive");
        check(!real_pairs || head_dim % 2 == 0, "rope: real mode needs even head_dim");
    }

    int64_t nfreq() const { return real_pairs ? head_dim / 2 : head_dim; }

    void ensure(int64_t upto) {
        if (upto <= positions) return;
        const int64_t f = nfreq();
        cs.resize(static_cast<size_t>(upto * f * 2));
        for (int64_t m = positions; m < upto; ++m) {
            for (int64_t j = 0; j < f; ++j) {
                const double theta =
                    std::pow(base, -static_cast<double>(j) / static_cast<double>(f));
                const double a = static_cast<double>(m) * theta;
                cs[static_cast<size_t>((m * f + j) * 2)] = std::cos(a);
                cs[static_cast<size_t>((m * f + j) * 2 + 1)] = std::sin(a);
            }
        }
        positions = upto;
    }
};

/// Rotary factors applied per complex channel: out[t,h,j] = x * e^{i(start+t)theta_j}.
/// x: [..., T, H, d, 2]; magnitudes are preserved exactly up to rounding.
template <typename T>
VarId rope_complex(Tape<T>& tape, VarId x, RopeTable& table, int64_t start) {
    const Tensor<T>& xv = tape.val(x);
    check_complex(xv, "rope_complex");
    check(!table.real_pairs, "rope_complex: table is configured for real pairs");
    const int64_t d = xv.dim(-2), h = xv.dim(-3), t = xv.dim(-4);
    check(d == table.head_dim, "rope_complex: head_dim mismatch");
    table.ensure(start + t);
    const int64_t lead = xv.numel() / (t * h * d * 2);
    // Snapshot the needed slice so later table growth cannot invalidate it.
    auto slice = std::make_shared<std::vector<double>>(
        table.cs.begin() + static_cast<int64_t>(start * d * 2),
        table.cs.begin() + static_cast<int64_t>((start + t) * d * 2));
    Tensor<T> out = Tensor<T>::zeros(xv.shape);
    for (int64_t r = 0; r < lead; ++r) {
        for (int64_t ti = 0; ti < t; ++ti) {
            const double* f = slice->data() + ti * d * 2;
            for (int64_t hi = 0; hi < h; ++hi) {
                const int64_t off = (((r * t + ti) * h + hi) * d) * 2;
                const T* xp = xv.data() + off;
                T* op = out.data() + off;
                for (int64_t j = 0; j < d; ++j) {
                    const T co = static_cast<T>(f[2 * j]), si = static_cast<T>(f[2 * j + 1]);
                    const T a = xp[2 * j], b = xp[2 * j + 1];
                    op[2 * j] = a * co - b * si;
                    op[2 * j + 1] = b * co + a * si;
                }
            }
        }
    }
    return tape.push(std::move(out), tape.requires_grad(x),
                     [x, slice, t, h, d, lead](Tape<T>& tp, VarId self) {
                         if (!tp.requires_grad(x)) return;
                         const Tensor<T>& g = tp.grad(self);
                         Tensor<T>& dx = tp.grad(x);
                         // Unit factor, so the adjoint is rotation by the conjugate.
                         for (int64_t r = 0; r < lead; ++r) {
                             for (int64_t ti = 0; ti < t; ++ti) {
                                 const double* f = slice->data() + ti * d * 2;
                                 for (int64_t hi = 0; hi < h; ++hi) {
                                     const int64_t off = (((r * t + ti) * h + hi) * d) * 2;
                                     const T* gp = g.data() + off;
                                     T* dp = dx.data() + off;
                                     for (int64_t j = 0; j < d; ++j) {
                                         const T co = static_cast<T>(f[2 * j]);
                                         const T si = static_cast<T>(f[2 * j + 1]);
                                         const T a = gp[2 * j], b = gp[2 * j + 1];
                                         dp[2 * j] += a * co + b * si;
                                         dp[2 * j + 1] += b * co - a * si;
                                     }
                                 }
                             }
                         }
                     });
}

/// Standard rotary rotation over adjacent dimension pairs of a real tensor.
/// x: [..., T, H, d] with even d; pair j spans channels (2j, 2j+1).
template <typename T>
VarId rope_real(Tape<T>& tape, VarId x, RopeTable& table, int64_t start) {
    const Tensor<T>& xv = tape.val(x);
    check(table.real_pairs, "rope_real: table is configured for complex channels");
    const int64_t d = xv.dim(-1), h = xv.dim(-2), t = xv.dim(-3);
    check(d == table.head_dim, "rope_real: head_dim mismatch");
    table.ensure(start + t);
    const int64_t pairs = d / 2;
    const int64_t lead = xv.numel() / (t * h * d);
    auto slice = std::make_shared<std::vector<double>>(
        table.cs.begin() + static_cast<int64_t>(start * pairs * 2),
        table.cs.begin() + static_cast<int64_t>((start + t) * pairs * 2));
    Tensor<T> out = Tensor<T>::zeros(xv.shape);
    for (int64_t r = 0; r < lead; ++r) {
        for (int64_t ti = 0; ti < t; ++ti) {
            const double* f = slice->data() + ti * pairs * 2;
            for (int64_t hi = 0; hi < h; ++hi) {
                const int64_t off = ((r * t + ti) * h + hi) * d;
                const T* xp = xv.data() + off;
                T* op = out.data() + off;
                for (int64_t j = 0; j < pairs; ++j) {
                    const T co = static_cast<T>(f[2 * j]), si = static_cast<T>(f[2 * j + 1]);
                    const T a = xp[2 * j], b = xp[2 * j + 1];
                    op[2 * j] = a * co - b * si;
                    op[2 * j + 1] = b * co + a * si;
                }
            }
        }
    }
    return tape.push(std::move(out), tape.requires_grad(x),
                     [x, slice, t, h, d, pairs, lead](Tape<T>& tp, VarId self) {
                         if (!tp.requires_grad(x)) return;
                         const Tensor<T>& g = tp.grad(self);
                         Tensor<T>& dx = tp.grad(x);
                         for (int64_t r = 0; r < lead; ++r) {
                             for (int64_t ti = 0; ti < t; ++ti) {
                                 const double* f = slice->data() + ti * pairs * 2;
                                 for (int64_t hi = 0; hi < h; ++hi) {
                                     const int64_t off = ((r * t + ti) * h + hi) * d;
                                     const T* gp = g.data() + off;
                                     T* dp = dx.data() + off;
                                     for (int64_t j = 0; j < pairs; ++j) {
                                         const T co = static_cast<T>(f[2 * j]);
                                         const T si = static_cast<T>(f[2 * j + 1]);
                                         const T a = gp[2 * j], b = gp[2 * j + 1];
                                         dp[2 * j] += a * co + b * si;
                                         dp[2 * j + 1] += b * co - a * si;
                                     }
                                 }
                             }
                         }
                     });
}

// ---- gated unit ----

/// u = sigmoid(|g|) * g/|g| per channel: magnitude squashed through a sigmoid,
/// phase kept. Channels with |g| < eps output exactly zero.
template <typename T>
VarId phase_sigmoid_gate(Tape<T>& tape, VarId g) {
    const Tensor<T>& gv = tape.val(g);
    check_complex(gv, "phase_sigmoid_gate");
    const int64_t n = gv.numel() / 2;
    Tensor<T> out = Tensor<T>::zeros(gv.shape);
    for (int64_t i = 0; i < n; ++i) {
        const double zr = gv[2 * i], zi = gv[2 * i + 1];
        const double r = std::sqrt(zr * zr + zi * zi);
        if (r < kPhaseEps) continue;
        const double w = 1.0 / (1.0 + std::exp(-r)) / r;
        out[2 * i] = static_cast<T>(w * zr);
        out[2 * i + 1] = static_cast<T>(w * zi);
    }
    return tape.push(std::move(out), tape.requires_grad(g), [g, n](Tape<T>& tp, VarId self) {
        if (!tp.requires_grad(g)) return;
        const Tensor<T>& t = tp.grad(self);
        const Tensor<T>& gv = tp.val(g);
        Tensor<T>& dg = tp.grad(g);
        for (int64_t i = 0; i < n; ++i) {
            const double zr = gv[2 * i], zi = gv[2 * i + 1];
            const double r = std::sqrt(zr * zr + zi * zi);
            if (r < kPhaseEps) continue;
            const double sig = 1.0 / (1.0 + std::exp(-r));
            const double w = sig / r;
            // d/dr [sigmoid(r)/r] = (sigmoid'(r) r - sigmoid(r)) / r^2
            const double wp = (sig * (1.0 - sig) * r - sig) / (r * r);
            const double tr = t[2 * i], ti = t[2 * i + 1];
            const double dot = (tr * zr + ti * zi) * (wp / r);
            dg[2 * i] += static_cast<T>(w * tr + zr * dot);
            dg[2 * i + 1] += static_cast<T>(w * ti + zi * dot);
        }
    });
}

struct CguIds {
    VarId up_wr, up_wi, gate_wr, gate_wi, down_wr, down_wi, act_b;
};

/// Complex gated unit:
///   CGU(z) = W_down( phase(W_g z) . modReLU(W_up z) . sigmoid(|W_g z|) )
/// where . is elementwise complex product over the expanded channels.
template <typename T>
VarId cgu_forward(Tape<T>& tape, VarId z, const CguIds& p) {
    VarId h = modrelu(tape, complex_linear(tape, p.up_wr, p.up_wi, z), p.act_b);
    VarId gate = phase_sigmoid_gate(tape, complex_linear(tape, p.gate_wr, p.gate_wi, z));
    return complex_linear(tape, p.down_wr, p.down_wi, cmul_ew(tape, gate, h));
}

struct RguIds {
    VarId up_w, gate_w, down_w, act_b;
};

/// Real ablation of the gated unit: ReLU activation, sigmoid magnitude gate,
/// no phase factor.
template <typename T>
VarId rgu_forward(Tape<T>& tape, VarId x, const RguIds& p) {
    VarId h = relu(tape, real_linear(tape, p.up_w, p.act_b, x));
    VarId gate = sigmoid(tape, real_linear(tape, p.gate_w, VarId{}, x));
    return real_linear(tape, p.down_w, VarId{}, mul_ew(tape, gate, h));
}

}  // namespace pam
