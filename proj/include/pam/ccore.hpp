#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "pam/rng.hpp"
#include "pam/tape.hpp"
#include "pam/tensor.hpp"

namespace pam {

// ---- scalar complex helpers (split components) ----

template <typename T>
inline void cmul(T ar, T ai, T br, T bi, T& cr, T& ci) {
    cr = ar * br - ai * bi;
    ci = ar * bi + ai * br;
}

/// Elementwise complex multiply of two same-shape complex tensors.
template <typename T>
Tensor<T> cmul_values(const Tensor<T>& a, const Tensor<T>& b) {
    check_complex(a, "cmul");
    check_complex(b, "cmul");
    check(a.shape == b.shape, "cmul: shape mismatch " + shape_string(a.shape) + " vs " +
                                  shape_string(b.shape));
    Tensor<T> out = Tensor<T>::zeros(a.shape);
    const int64_t n = a.numel() / 2;
    for (int64_t i = 0; i < n; ++i) {
        cmul(a[2 * i], a[2 * i + 1], b[2 * i], b[2 * i + 1], out[2 * i], out[2 * i + 1]);
    }
    return out;
}

/// sum_j conj(a_j) * b_j over all channels, accumulated in double.
template <typename T>
std::pair<double, double> conj_inner(const Tensor<T>& a, const Tensor<T>& b) {
    check_complex(a, "conj_inner");
    check(a.shape == b.shape, "conj_inner: shape mismatch " + shape_string(a.shape) + " vs " +
                                  shape_string(b.shape));
    double re = 0.0, im = 0.0;
    const int64_t n = a.numel() / 2;
    for (int64_t i = 0; i < n; ++i) {
        const double ar = a[2 * i], ai = a[2 * i + 1];
        const double br = b[2 * i], bi = b[2 * i + 1];
        re += ar * br + ai * bi;
        im += ar * bi - ai * br;
    }
    return {re, im};
}

// ---- orthogonal initialization ----

namespace detail {

/// Thin Householder QR in double; returns Q (m x n, m >= n) with orthonormal
/// columns and a deterministic orientation (R diagonal >= 0).
inline std::vector<double> householder_q(std::vector<double> a, int64_t m, int64_t n) {
    std::vector<double> betas(static_cast<size_t>(n), 0.0);
    std::vector<double> diag_sign(static_cast<size_t>(n), 1.0);
    for (int64_t k = 0; k < n; ++k) {
        double norm2 = 0.0;
        for (int64_t i = k; i < m; ++i) norm2 += a[i * n + k] * a[i * n + k];
        const double norm = std::sqrt(norm2);
        const double x0 = a[k * n + k];
        const double alpha = (x0 >= 0.0) ? -norm : norm;
        diag_sign[static_cast<size_t>(k)] = (alpha >= 0.0) ? 1.0 : -1.0;
        // v = x - alpha*e1, stored in place of the eliminated column.
        a[k * n + k] = x0 - alpha;
        double vnorm2 = 0.0;
        for (int64_t i = k; i < m; ++i) vnorm2 += a[i * n + k] * a[i * n + k];
        const double beta = vnorm2 > 0.0 ? 2.0 / vnorm2 : 0.0;
        betas[static_cast<size_t>(k)] = beta;
        for (int64_t j = k + 1; j < n; ++j) {
            double dot = 0.0;
            for (int64_t i = k; i < m; ++i) dot += a[i * n + k] * a[i * n + j];
            const double s = beta * dot;
            for (int64_t i = k; i < m; ++i) a[i * n + j] -= s * a[i * n + k];
        }
    }
    // Accumulate Q = H_0 ... H_{n-1} applied to the first n columns of I.
    std::vector<double> q(static_cast<size_t>(m * n), 0.0);
    for (int64_t k = 0; k < n; ++k) q[k * n + k] = 1.0;
    for (int64_t k = n - 1; k >= 0; --k) {
        const double beta = betas[static_cast<size_t>(k)];
        if (beta == 0.0) continue;
        for (int64_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (int64_t i = k; i < m; ++i) dot += a[i * n + k] * q[i * n + j];
            const double s = beta * dot;
            for (int64_t i = k; i < m; ++i) q[i * n + j] -= s * a[i * n + k];
        }
    }
    for (int64_t j = 0; j < n; ++j) {
        if (diag_sign[static_cast<size_t>(j)] < 0.0) {
            for (int64_t i = 0; i < m; ++i) q[i * n + j] = -q[i * n + j];
        }
    }
    return q;
}

}  // namespace detail

/// Random matrix with orthonormal rows (m <= n) or orthonormal columns
/// (m > n), drawn in double and cast to T.
template <typename T>
Tensor<T> real_orthogonal(int64_t m, int64_t n, CounterRng& rng) {
    check(m > 0 && n > 0, "real_orthogonal: dimensions must be positive");
    const int64_t big = std::max(m, n), small = std::min(m, n);
    std::vector<double> g(static_cast<size_t>(big * small));
    for (double& v : g) v = rng.gaussian();
    std::vector<double> q = detail::householder_q(std::move(g), big, small);  // big x small
    Tensor<T> w = Tensor<T>::zeros({m, n});
    if (m <= n) {
        // q is n x m with orthonormal columns; W = q^T has orthonormal rows.
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) w[i * n + j] = static_cast<T>(q[j * m + i]);
    } else {
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) w[i * n + j] = static_cast<T>(q[i * n + j]);
    }
    return w;
}

/// Two independent orthogonal factors scaled by 1/sqrt(2), so the induced
/// complex map W_r + i*W_i is approximately magnitude preserving.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> orthogonal_init(int64_t m, int64_t n, CounterRng& rng) {
    const T s = static_cast<T>(1.0 / std::sqrt(2.0));
    Tensor<T> wr = real_orthogonal<T>(m, n, rng);
    Tensor<T> wi = real_orthogonal<T>(m, n, rng);
    for (int64_t i = 0; i < wr.numel(); ++i) {
        wr[i] *= s;
        wi[i] *= s;
    }
    return {std::move(wr), std::move(wi)};
}

// ---- tape ops: linear maps ----

/// y = W x + b over the last axis. x: [..., n] -> y: [..., m]; W: [m, n].
/// Pass an invalid VarId for b to skip the bias.
template <typename T>
VarId real_linear(Tape<T>& tape, VarId w, VarId b, VarId x) {
    const Tensor<T>& wv = tape.val(w);
    const Tensor<T>& xv = tape.val(x);
    check(wv.rank() == 2, "real_linear: W must be rank 2, got " + shape_string(wv.shape));
    const int64_t m = wv.shape[0], n = wv.shape[1];
    check(xv.rank() >= 1 && xv.dim(-1) == n,
          "real_linear: x " + shape_string(xv.shape) + " incompatible with W " +
              shape_string(wv.shape));
    const int64_t rows = xv.numel() / n;

    std::vector<int64_t> out_shape(xv.shape.begin(), xv.shape.end() - 1);
    out_shape.push_back(m);
    Tensor<T> y = Tensor<T>::zeros(out_shape);

    // Transposed weight copy keeps the inner loop contiguous in the output.
    std::vector<T> wt(static_cast<size_t>(n * m));
    for (int64_t o = 0; o < m; ++o)
        for (int64_t j = 0; j < n; ++j) wt[j * m + o] = wv[o * n + j];

    const T* bp = b.valid() ? tape.val(b).data() : nullptr;
    if (bp) check(tape.val(b).numel() == m, "real_linear: bias length mismatch");
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * n;
        T* yr = y.data() + r * m;
        if (bp) {
            for (int64_t o = 0; o < m; ++o) yr[o] = bp[o];
        }
        for (int64_t j = 0; j < n; ++j) {
            const T a = xr[j];
            const T* wj = wt.data() + j * m;
            for (int64_t o = 0; o < m; ++o) yr[o] += a * wj[o];
        }
    }

    const bool req = tape.requires_grad(w) || tape.requires_grad(x) ||
                     (b.valid() && tape.requires_grad(b));
    return tape.push(std::move(y), req, [w, b, x, m, n, rows](Tape<T>& tp, VarId self) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& wv = tp.val(w);
        const Tensor<T>& xv = tp.val(x);
        if (tp.requires_grad(w)) {
            Tensor<T>& dw = tp.grad(w);
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = g.data() + r * m;
                const T* xr = xv.data() + r * n;
                for (int64_t o = 0; o < m; ++o) {
                    const T go = gr[o];
                    if (go == T(0)) continue;
                    T* dwo = dw.data() + o * n;
                    for (int64_t j = 0; j < n; ++j) dwo[j] += go * xr[j];
                }
            }
        }
        if (b.valid() && tp.requires_grad(b)) {
            Tensor<T>& db = tp.grad(b);
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = g.data() + r * m;
                for (int64_t o = 0; o < m; ++o) db[o] += gr[o];
            }
        }
        if (tp.requires_grad(x)) {
            Tensor<T>& dx = tp.grad(x);
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = g.data() + r * m;
                T* dxr = dx.data() + r * n;
                for (int64_t o = 0; o < m; ++o) {
                    const T go = gr[o];
                    if (go == T(0)) continue;
                    const T* wo = wv.data() + o * n;
                    for (int64_t j = 0; j < n; ++j) dxr[j] += go * wo[j];
                }
            }
        }
    });
}

/// Complex linear map y = (W_r + i W_i)(x_r + i x_i) over the channel axis.
/// x: [..., n, 2] -> y: [..., m, 2]; W_r, W_i: [m, n].
template <typename T>
VarId complex_linear(Tape<T>& tape, VarId wr, VarId wi, VarId x) {
    const Tensor<T>& wrv = tape.val(wr);
    const Tensor<T>& wiv = tape.val(wi);
    const Tensor<T>& xv = tape.val(x);
    check_complex(xv, "complex_linear");
    check(wrv.rank() == 2 && wrv.shape == wiv.shape,
          "complex_linear: weight factors must be equal rank-2 shapes");
    const int64_t m = wrv.shape[0], n = wrv.shape[1];
    check(xv.dim(-2) == n, "complex_linear: x " + shape_string(xv.shape) +
                               " incompatible with W " + shape_string(wrv.shape));
    const int64_t rows = xv.numel() / (2 * n);

    std::vector<int64_t> out_shape(xv.shape.begin(), xv.shape.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(2);
    Tensor<T> y = Tensor<T>::zeros(out_shape);

    std::vector<T> wrt(static_cast<size_t>(n * m)), wit(static_cast<size_t>(n * m));
    for (int64_t o = 0; o < m; ++o) {
        for (int64_t j = 0; j < n; ++j) {
            wrt[j * m + o] = wrv[o * n + j];
            wit[j * m + o] = wiv[o * n + j];
        }
    }

    std::vector<T> yr(static_cast<size_t>(m)), yi(static_cast<size_t>(m));
    for (int64_t r = 0; r < rows; ++r) {
        const T* xp = xv.data() + r * n * 2;
        std::fill(yr.begin(), yr.end(), T(0));
        std::fill(yi.begin(), yi.end(), T(0));
        for (int64_t j = 0; j < n; ++j) {
            const T a = xp[2 * j], b = xp[2 * j + 1];
            const T* wrj = wrt.data() + j * m;
            const T* wij = wit.data() + j * m;
            for (int64_t o = 0; o < m; ++o) {
                yr[static_cast<size_t>(o)] += a * wrj[o] - b * wij[o];
                yi[static_cast<size_t>(o)] += b * wrj[o] + a * wij[o];
            }
        }
        T* yp = y.data() + r * m * 2;
        for (int64_t o = 0; o < m; ++o) {
            yp[2 * o] = yr[static_cast<size_t>(o)];
            yp[2 * o + 1] = yi[static_cast<size_t>(o)];
        }
    }

    const bool req = tape.requires_grad(wr) || tape.requires_grad(wi) || tape.requires_grad(x);
    return tape.push(std::move(y), req, [wr, wi, x, m, n, rows](Tape<T>& tp, VarId self) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& wrv = tp.val(wr);
        const Tensor<T>& wiv = tp.val(wi);
        const Tensor<T>& xv = tp.val(x);
        const bool need_w = tp.requires_grad(wr) || tp.requires_grad(wi);
        const bool need_x = tp.requires_grad(x);
        // y_r = Wr x_r - Wi x_i, y_i = Wi x_r + Wr x_i, hence:
        //   dWr = g_r x_r^T + g_i x_i^T      dWi = -g_r x_i^T + g_i x_r^T
        //   dx_r = Wr^T g_r + Wi^T g_i       dx_i = -Wi^T g_r + Wr^T g_i
        for (int64_t r = 0; r < rows; ++r) {
            const T* gp = g.data() + r * m * 2;
            const T* xp = xv.data() + r * n * 2;
            if (need_w) {
                Tensor<T>& dwr = tp.grad(wr);
                Tensor<T>& dwi = tp.grad(wi);
                for (int64_t o = 0; o < m; ++o) {
                    const T gr = gp[2 * o], gi = gp[2 * o + 1];
                    T* dwro = dwr.data() + o * n;
                    T* dwio = dwi.data() + o * n;
                    for (int64_t j = 0; j < n; ++j) {
                        const T a = xp[2 * j], b = xp[2 * j + 1];
                        dwro[j] += gr * a + gi * b;
                        dwio[j] += gi * a - gr * b;
                    }
                }
            }
            if (need_x) {
                Tensor<T>& dx = tp.grad(x);
                T* dxp = dx.data() + r * n * 2;
                for (int64_t o = 0; o < m; ++o) {
                    const T gr = gp[2 * o], gi = gp[2 * o + 1];
                    const T* wro = wrv.data() + o * n;
                    const T* wio = wiv.data() + o * n;
                    for (int64_t j = 0; j < n; ++j) {
                        dxp[2 * j] += gr * wro[j] + gi * wio[j];
                        dxp[2 * j + 1] += gi * wro[j] - gr * wio[j];
                    }
                }
            }
        }
    });
}

// ---- tape ops: structure ----

/// Row gather: E: [V, C], ids in [0, V) -> out: [len(ids), C].
template <typename T>
VarId embedding_rows(Tape<T>& tape, VarId e, std::vector<int32_t> ids) {
    const Tensor<T>& ev = tape.val(e);
    check(ev.rank() == 2, "embedding_rows: table must be rank 2");
    const int64_t v = ev.shape[0], c = ev.shape[1];
    for (size_t p = 0; p < ids.size(); ++p) {
        if (ids[p] < 0 || ids[p] >= v) {
            throw std::out_of_range("embedding_rows: token id " + std::to_string(ids[p]) +
                                    " at position " + std::to_string(p) + " outside vocab " +
                                    std::to_string(v));
        }
    }
    const int64_t rows = static_cast<int64_t>(ids.size());
    Tensor<T> out = Tensor<T>::zeros({rows, c});
    for (int64_t r = 0; r < rows; ++r) {
        const T* src = ev.data() + static_cast<int64_t>(ids[static_cast<size_t>(r)]) * c;
        std::copy(src, src + c, out.data() + r * c);
    }
    return tape.push(std::move(out), tape.requires_grad(e),
                     [e, ids = std::move(ids), c](Tape<T>& tp, VarId self) {
                         if (!tp.requires_grad(e)) return;
                         const Tensor<T>& g = tp.grad(self);
                         Tensor<T>& de = tp.grad(e);
                         for (size_t r = 0; r < ids.size(); ++r) {
                             const T* gr = g.data() + static_cast<int64_t>(r) * c;
                             T* dst = de.data() + static_cast<int64_t>(ids[r]) * c;
                             for (int64_t j = 0; j < c; ++j) dst[j] += gr[j];
                         }
                     });
}

template <typename T>
VarId reshape(Tape<T>& tape, VarId x, std::vector<int64_t> shape) {
    Tensor<T> out = tape.val(x).reshaped(std::move(shape));
    return tape.push(std::move(out), tape.requires_grad(x), [x](Tape<T>& tp, VarId self) {
        if (!tp.requires_grad(x)) return;
        const Tensor<T>& g = tp.grad(self);
        Tensor<T>& dx = tp.grad(x);
        for (int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
    });
}

namespace detail {

template <typename T>
VarId slice_axis(Tape<T>& tape, VarId x, int axis_from_end, int64_t c0, int64_t c1) {
    const Tensor<T>& xv = tape.val(x);
    const int axis = xv.rank() - 1 - axis_from_end;
    check(axis >= 0, "slice: rank too small");
    const int64_t extent = xv.shape[static_cast<size_t>(axis)];
    check(0 <= c0 && c0 < c1 && c1 <= extent, "slice: range out of bounds");
    int64_t inner = 1;
    for (int a = axis + 1; a < xv.rank(); ++a) inner *= xv.shape[static_cast<size_t>(a)];
    const int64_t outer = xv.numel() / (extent * inner);
    std::vector<int64_t> out_shape = xv.shape;
    out_shape[static_cast<size_t>(axis)] = c1 - c0;
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const int64_t span = (c1 - c0) * inner;
    for (int64_t r = 0; r < outer; ++r) {
        const T* src = xv.data() + (r * extent + c0) * inner;
        std::copy(src, src + span, out.data() + r * span);
    }
    return tape.push(std::move(out), tape.requires_grad(x),
                     [x, extent, inner, outer, c0, span](Tape<T>& tp, VarId self) {
                         if (!tp.requires_grad(x)) return;
                         const Tensor<T>& g = tp.grad(self);
                         Tensor<T>& dx = tp.grad(x);
                         for (int64_t r = 0; r < outer; ++r) {
                             const T* gr = g.data() + r * span;
                             T* dst = dx.data() + (r * extent + c0) * inner;
                             for (int64_t j = 0; j < span; ++j) dst[j] += gr[j];
                         }
                     });
}

}  // namespace detail

/// Channel-range slice of a complex tensor along axis -2.
template <typename T>
VarId slice_channels(Tape<T>& tape, VarId x, int64_t c0, int64_t c1) {
    check_complex(tape.val(x), "slice_channels");
    return detail::slice_axis(tape, x, 1, c0, c1);
}

/// Range slice of a real tensor along its last axis.
template <typename T>
VarId slice_last(Tape<T>& tape, VarId x, int64_t c0, int64_t c1) {
    return detail::slice_axis(tape, x, 0, c0, c1);
}

/// [..., D, 2] -> [..., 2D] with real parts first, imaginary parts second.
template <typename T>
VarId concat_reim(Tape<T>& tape, VarId x) {
    const Tensor<T>& xv = tape.val(x);
    check_complex(xv, "concat_reim");
    const int64_t d = xv.dim(-2);
    const int64_t rows = xv.numel() / (2 * d);
    std::vector<int64_t> out_shape(xv.shape.begin(), xv.shape.end() - 2);
    out_shape.push_back(2 * d);
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xp = xv.data() + r * 2 * d;
        T* op = out.data() + r * 2 * d;
        for (int64_t j = 0; j < d; ++j) {
            op[j] = xp[2 * j];
            op[d + j] = xp[2 * j + 1];
        }
    }
    return tape.push(std::move(out), tape.requires_grad(x), [x, d, rows](Tape<T>& tp, VarId self) {
        if (!tp.requires_grad(x)) return;
        const Tensor<T>& g = tp.grad(self);
        Tensor<T>& dx = tp.grad(x);
        for (int64_t r = 0; r < rows; ++r) {
            const T* gp = g.data() + r * 2 * d;
            T* dxp = dx.data() + r * 2 * d;
            for (int64_t j = 0; j < d; ++j) {
                dxp[2 * j] += gp[j];
                dxp[2 * j + 1] += gp[d + j];
            }
        }
    });
}

// ---- tape ops: elementwise ----

/// Per-channel magnitude: [..., C, 2] -> [..., C]. Gradient is zeroed where
/// |z| < eps (the usual guard for the phase singularity at the origin).
template <typename T>
VarId complex_abs(Tape<T>& tape, VarId x, double eps = 1e-8) {
    const Tensor<T>& xv = tape.val(x);
    check_complex(xv, "complex_abs");
    const int64_t n = xv.numel() / 2;
    std::vector<int64_t> out_shape(xv.shape.begin(), xv.shape.end() - 1);
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    for (int64_t i = 0; i < n; ++i) {
        const T a = xv[2 * i], b = xv[2 * i + 1];
        out[i] = std::sqrt(a * a + b * b);
    }
    return tape.push(std::move(out), tape.requires_grad(x), [x, n, eps](Tape<T>& tp, VarId self) {
        if (!tp.requires_grad(x)) return;
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& r = tp.val(self);
        const Tensor<T>& xv = tp.val(x);
        Tensor<T>& dx = tp.grad(x);
        for (int64_t i = 0; i < n; ++i) {
            const T ri = r[i];
            if (static_cast<double>(ri) < eps) continue;
            const T s = g[i] / ri;
            dx[2 * i] += s * xv[2 * i];
            dx[2 * i + 1] += s * xv[2 * i + 1];
        }
    });
}

/// Broadcast scale of complex vectors by a per-head real factor:
/// v: [..., H, d, 2], s: [..., H] -> v * s.
template <typename T>
VarId scale_complex_by_real(Tape<T>& tape, VarId v, VarId s) {
    const Tensor<T>& vv = tape.val(v);
    const Tensor<T>& sv = tape.val(s);
    check_complex(vv, "scale_complex_by_real");
    const int64_t d = vv.dim(-2);
    const int64_t groups = sv.numel();
    check(vv.numel() == groups * d * 2, "scale_complex_by_real: shape mismatch " +
                                            shape_string(vv.shape) + " vs " +
                                            shape_string(sv.shape));
    Tensor<T> out = Tensor<T>::zeros(vv.shape);
    for (int64_t gi = 0; gi < groups; ++gi) {
        const T f = sv[gi];
        const T* vp = vv.data() + gi * d * 2;
        T* op = out.data() + gi * d * 2;
        for (int64_t j = 0; j < 2 * d; ++j) op[j] = f * vp[j];
    }
    const bool req = tape.requires_grad(v) || tape.requires_grad(s);
    return tape.push(std::move(out), req, [v, s, d, groups](Tape<T>& tp, VarId self) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& vv = tp.val(v);
        const Tensor<T>& sv = tp.val(s);
        if (tp.requires_grad(v)) {
            Tensor<T>& dv = tp.grad(v);
            for (int64_t gi = 0; gi < groups; ++gi) {
                const T f = sv[gi];
                const T* gp = g.data() + gi * d * 2;
                T* dp = dv.data() + gi * d * 2;
                for (int64_t j = 0; j < 2 * d; ++j) dp[j] += f * gp[j];
            }
        }
        if (tp.requires_grad(s)) {
            Tensor<T>& ds = tp.grad(s);
            for (int64_t gi = 0; gi < groups; ++gi) {
                const T* gp = g.data() + gi * d * 2;
                const T* vp = vv.data() + gi * d * 2;
                T acc = T(0);
                for (int64_t j = 0; j < 2 * d; ++j) acc += gp[j] * vp[j];
                ds[gi] += acc;
            }
        }
    });
}

/// Real analogue of scale_complex_by_real: v: [..., H, d], s: [..., H].
template <typename T>
VarId scale_real_by_real(Tape<T>& tape, VarId v, VarId s) {
    const Tensor<T>& vv = tape.val(v);
    const Tensor<T>& sv = tape.val(s);
    const int64_t d = vv.dim(-1);
    const int64_t groups = sv.numel();
    check(vv.numel() == groups * d, "scale_real_by_real: shape mismatch " +
                                        shape_string(vv.shape) + " vs " + shape_string(sv.shape));
    Tensor<T> out = Tensor<T>::zeros(vv.shape);
    for (int64_t gi = 0; gi < groups; ++gi) {
        const T f = sv[gi];
        const T* vp = vv.data() + gi * d;
        T* op = out.data() + gi * d;
        for (int64_t j = 0; j < d; ++j) op[j] = f * vp[j];
    }
    const bool req = tape.requires_grad(v) || tape.requires_grad(s);
    return tape.push(std::move(out), req, [v, s, d, groups](Tape<T>& tp, VarId self) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& vv = tp.val(v);
        const Tensor<T>& sv = tp.val(s);
        if (tp.requires_grad(v)) {
            Tensor<T>& dv = tp.grad(v);
            for (int64_t gi = 0; gi < groups; ++gi) {
                const T f = sv[gi];
                const T* gp = g.data() + gi * d;
                T* dp = dv.data() + gi * d;
                for (int64_t j = 0; j < d; ++j) dp[j] += f * gp[j];
            }
        }
        if (tp.requires_grad(s)) {
            Tensor<T>& ds = tp.grad(s);
            for (int64_t gi = 0; gi < groups; ++gi) {
                const T* gp = g.data() + gi * d;
                const T* vp = vv.data() + gi * d;
                T acc = T(0);
                for (int64_t j = 0; j < d; ++j) acc += gp[j] * vp[j];
                ds[gi] += acc;
            }
        }
    });
}

/// Residual with a learned scalar: out = x + alpha * branch. alpha: [1].
template <typename T>
VarId residual_scale(Tape<T>& tape, VarId x, VarId alpha, VarId branch) {
    const Tensor<T>& xv = tape.val(x);
    const Tensor<T>& bv = tape.val(branch);
    const Tensor<T>& av = tape.val(alpha);
    check(av.numel() == 1, "residual_scale: alpha must be scalar");
    check(xv.shape == bv.shape, "residual_scale: shape mismatch " + shape_string(xv.shape) +
                                    " vs " + shape_string(bv.shape));
    const T a = av[0];
    Tensor<T> out = Tensor<T>::zeros(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] + a * bv[i];
    const bool req =
        tape.requires_grad(x) || tape.requires_grad(alpha) || tape.requires_grad(branch);
    return tape.push(std::move(out), req, [x, alpha, branch](Tape<T>& tp, VarId self) {
        const Tensor<T>& g = tp.grad(self);
        if (tp.requires_grad(x)) {
            Tensor<T>& dx = tp.grad(x);
            for (int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
        }
        if (tp.requires_grad(branch)) {
            const T a = tp.val(alpha)[0];
            Tensor<T>& db = tp.grad(branch);
            for (int64_t i = 0; i < g.numel(); ++i) db[i] += a * g[i];
        }
        if (tp.requires_grad(alpha)) {
            const Tensor<T>& bv = tp.val(branch);
            T acc = T(0);
            for (int64_t i = 0; i < g.numel(); ++i) acc += g[i] * bv[i];
            tp.grad(alpha)[0] += acc;
        }
    });
}

template <typename T>
VarId scale_const(Tape<T>& tape, VarId x, T c) {
    const Tensor<T>& xv = tape.val(x);
    Tensor<T> out = Tensor<T>::zeros(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = c * xv[i];
    return tape.push(std::move(out), tape.requires_grad(x), [x, c](Tape<T>& tp, VarId self) {
        if (!tp.requires_grad(x)) return;
        const Tensor<T>& g = tp.grad(self);
        Tensor<T>& dx = tp.grad(x);
        for (int64_t i = 0; i < g.numel(); ++i) dx[i] += c * g[i];
    });
}

template <typename T>
VarId mul_ew(Tape<T>& tape, VarId a, VarId b) {
    const Tensor<T>& av = tape.val(a);
    const Tensor<T>& bv = tape.val(b);
    check(av.shape == bv.shape, "mul_ew: shape mismatch " + shape_string(av.shape) + " vs " +
                                    shape_string(bv.shape));
    Tensor<T> out = Tensor<T>::zeros(av.shape);
    for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
    const bool req = tape.requires_grad(a) || tape.requires_grad(b);
    return tape.push(std::move(out), req, [a, b](Tape<T>& tp, VarId self) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& av = tp.val(a);
        const Tensor<T>& bv = tp.val(b);
        if (tp.requires_grad(a)) {
            Tensor<T>& da = tp.grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] * bv[i];
        }
        if (tp.requires_grad(b)) {
            Tensor<T>& db = tp.grad(b);
            for (int64_t i = 0; i < g.numel(); ++i) db[i] += g[i] * av[i];
        }
    });
}

/// Elementwise complex product of two same-shape complex tensors (tape op).
template <typename T>
VarId cmul_ew(Tape<T>& tape, VarId a, VarId b) {
    const Tensor<T>& av = tape.val(a);
    const Tensor<T>& bv = tape.val(b);
    Tensor<T> out = cmul_values(av, bv);
    const int64_t n = av.numel() / 2;
    const bool req = tape.requires_grad(a) || tape.requires_grad(b);
    // Holomorphic product: split-real gradient flows as grad * conj(other).
    return tape.push(std::move(out), req, [a, b, n](Tape<T>& tp, VarId self) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& av = tp.val(a);
        const Tensor<T>& bv = tp.val(b);
        if (tp.requires_grad(a)) {
            Tensor<T>& da = tp.grad(a);
            for (int64_t i = 0; i < n; ++i) {
                const T gr = g[2 * i], gi = g[2 * i + 1];
                const T br = bv[2 * i], bi = bv[2 * i + 1];
                da[2 * i] += gr * br + gi * bi;
                da[2 * i + 1] += gi * br - gr * bi;
            }
        }
        if (tp.requires_grad(b)) {
            Tensor<T>& db = tp.grad(b);
            for (int64_t i = 0; i < n; ++i) {
                const T gr = g[2 * i], gi = g[2 * i + 1];
                const T ar = av[2 * i], ai = av[2 * i + 1];
                db[2 * i] += gr * ar + gi * ai;
                db[2 * i + 1] += gi * ar - gr * ai;
            }
        }
    });
}

/// Elementwise |x| for real tensors; subgradient 0 at the origin.
template <typename T>
VarId abs_ew(Tape<T>& tape, VarId x) {
    const Tensor<T>& xv = tape.val(x);
    Tensor<T> out = Tensor<T>::zeros(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] < T(0) ? -xv[i] : xv[i];
    return tape.push(std::move(out), tape.requires_grad(x), [x](Tape<T>& tp, VarId self) {
        if (!tp.requires_grad(x)) return;
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& xv = tp.val(x);
        Tensor<T>& dx = tp.grad(x);
        for (int64_t i = 0; i < g.numel(); ++i) {
            if (xv[i] > T(0)) {
                dx[i] += g[i];
            } else if (xv[i] < T(0)) {
                dx[i] -= g[i];
            }
        }
    });
}

template <typename T>
VarId relu(Tape<T>& tape, VarId x) {
    const Tensor<T>& xv = tape.val(x);
    Tensor<T> out = Tensor<T>::zeros(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
    return tape.push(std::move(out), tape.requires_grad(x), [x](Tape<T>& tp, VarId self) {
        if (!tp.requires_grad(x)) return;
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& xv = tp.val(x);
        Tensor<T>& dx = tp.grad(x);
        for (int64_t i = 0; i < g.numel(); ++i) {
            if (xv[i] > T(0)) dx[i] += g[i];
        }
    });
}

template <typename T>
VarId sigmoid(Tape<T>& tape, VarId x) {
    const Tensor<T>& xv = tape.val(x);
    Tensor<T> out = Tensor<T>::zeros(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) {
        out[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(xv[i]))));
    }
    return tape.push(std::move(out), tape.requires_grad(x), [x](Tape<T>& tp, VarId self) {
        if (!tp.requires_grad(x)) return;
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& y = tp.val(self);
        Tensor<T>& dx = tp.grad(x);
        for (int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * y[i] * (T(1) - y[i]);
    });
}

/// Sum of all entries -> scalar. Mostly a test utility for building losses.
template <typename T>
VarId sum_all(Tape<T>& tape, VarId x) {
    const Tensor<T>& xv = tape.val(x);
    double acc = 0.0;
    for (int64_t i = 0; i < xv.numel(); ++i) acc += static_cast<double>(xv[i]);
    return tape.push(Tensor<T>::scalar(static_cast<T>(acc)), tape.requires_grad(x),
                     [x](Tape<T>& tp, VarId self) {
                         if (!tp.requires_grad(x)) return;
                         const T g = tp.grad(self)[0];
                         Tensor<T>& dx = tp.grad(x);
                         for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += g;
                     });
}

}  // namespace pam
