#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

namespace pam {

/// Eigenvalues of a Hermitian matrix by cyclic Jacobi with complex rotations,
/// descending order. Self-contained so entropy computations carry no external
/// solver dependency. a is row-major n*n; only the Hermitian part is assumed
/// meaningful. Converges quadratically; sweeps cap defends against stalls.
inline std::vector<double> hermitian_eigenvalues(std::vector<std::complex<double>> a, int64_t n) {
    if (static_cast<int64_t>(a.size()) != n * n) {
        throw std::invalid_argument("hermitian_eigenvalues: buffer size mismatch");
    }
    auto at = [&](int64_t i, int64_t j) -> std::complex<double>& { return a[i * n + j]; };

    double scale = 0.0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) scale = std::max(scale, std::abs(at(i, j)));
    if (scale == 0.0) return std::vector<double>(static_cast<size_t>(n), 0.0);
    const double tol = 1e-15 * scale;

    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) off += std::norm(at(p, q));
        if (std::sqrt(off) <= tol * n) break;

        for (int64_t p = 0; p < n; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                const std::complex<double> apq = at(p, q);
                const double mag = std::abs(apq);
                if (mag <= tol * 1e-2) continue;
                const std::complex<double> phase = apq / mag;
                const double app = at(p, p).real();
                const double aqq = at(q, q).real();
                const double tau = (aqq - app) / (2.0 * mag);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                // Unitary rotation R: R[p][p]=c, R[p][q]=s*phase,
                // R[q][p]=-s*conj(phase), R[q][q]=c; apply A <- R^H A R.
                for (int64_t i = 0; i < n; ++i) {
                    if (i == p || i == q) continue;
                    const std::complex<double> aip = at(i, p);
                    const std::complex<double> aiq = at(i, q);
                    at(i, p) = c * aip - s * std::conj(phase) * aiq;
                    at(i, q) = s * phase * aip + c * aiq;
                    at(p, i) = std::conj(at(i, p));
                    at(q, i) = std::conj(at(i, q));
                }
                const double app2 = c * c * app - 2.0 * c * s * mag + s * s * aqq;
                const double aqq2 = s * s * app + 2.0 * c * s * mag + c * c * aqq;
                at(p, p) = app2;
                at(q, q) = aqq2;
                at(p, q) = 0.0;
                at(q, p) = 0.0;
            }
        }
    }

    std::vector<double> ev(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) ev[static_cast<size_t>(i)] = at(i, i).real();
    std::sort(ev.begin(), ev.end(), std::greater<double>());
    return ev;
}

}  // namespace pam
