#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pam/hermitian_eig.hpp"
#include "pam/tensor.hpp"

namespace pam {

inline double nats_to_bits(double nats) { return nats / std::log(2.0); }

// ---- density matrices and entropies ----

/// Row-major complex n x n state. All entropy routines validate before
/// computing: Hermitian within 1e-10, unit trace within 1e-10, eigenvalues
/// >= -1e-10.
struct DensityMatrix {
    int64_t n = 0;
    std::vector<std::complex<double>> rho;

    std::complex<double>& at(int64_t i, int64_t j) { return rho[static_cast<size_t>(i * n + j)]; }
    const std::complex<double>& at(int64_t i, int64_t j) const {
        return rho[static_cast<size_t>(i * n + j)];
    }

    static DensityMatrix zeros(int64_t n) {
        DensityMatrix d;
        d.n = n;
        d.rho.assign(static_cast<size_t>(n * n), {0.0, 0.0});
        return d;
    }

    void validate() const {
        check(n >= 1 && static_cast<int64_t>(rho.size()) == n * n,
              "density matrix: buffer does not match dimension");
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                if (std::abs(at(i, j) - std::conj(at(j, i))) > 1e-10) {
                    throw std::invalid_argument("density matrix: not Hermitian at (" +
                                                std::to_string(i) + "," + std::to_string(j) + ")");
                }
            }
        }
        double tr = 0.0;
        for (int64_t i = 0; i < n; ++i) tr += at(i, i).real();
        if (std::abs(tr - 1.0) > 1e-10) {
            throw std::invalid_argument("density matrix: trace " + std::to_string(tr) +
                                        " is not 1");
        }
        for (double ev : hermitian_eigenvalues(rho, n)) {
            if (ev < -1e-10) {
                throw std::invalid_argument("density matrix: negative eigenvalue " +
                                            std::to_string(ev));
            }
        }
    }
};

/// Shannon entropy of the diagonal in nats, with 0 log 0 := 0.
inline double shannon_diag(const DensityMatrix& d) {
    d.validate();
    double h = 0.0;
    for (int64_t i = 0; i < d.n; ++i) {
        const double p = d.at(i, i).real();
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

/// von Neumann entropy in nats: -sum lambda ln lambda over the spectrum,
/// with eigenvalues clamped into [0, 1] within a 1e-10 tolerance.
inline double von_neumann(const DensityMatrix& d) {
    d.validate();
    double s = 0.0;
    for (double ev : hermitian_eigenvalues(d.rho, d.n)) {
        if (ev > 1.0 + 1e-10) {
            throw std::invalid_argument("density matrix: eigenvalue " + std::to_string(ev) +
                                        " above 1");
        }
        const double lam = std::min(std::max(ev, 0.0), 1.0);
        if (lam > 0.0) s -= lam * std::log(lam);
    }
    return s;
}

/// Relative entropy of decoherence: H(diag rho) - S_VN(rho) >= 0, equality
/// iff rho is diagonal.
inline double decoherence_gap(const DensityMatrix& d) { return shannon_diag(d) - von_neumann(d); }

/// The worked 3-state example: a maximally coherent rank-one projector with
/// phase steps of pi/3, mixed with the maximally mixed state by fraction p.
/// Eigenvalues are (1 - 2p/3, p/3, p/3); the diagonal stays uniform.
inline DensityMatrix example_state(double p) {
    if (!(p >= 0.0 && p <= 1.0)) {
        throw std::invalid_argument("example_state: mixing fraction must lie in [0, 1], got " +
                                    std::to_string(p));
    }
    DensityMatrix d = DensityMatrix::zeros(3);
    for (int64_t a = 0; a < 3; ++a) {
        for (int64_t b = 0; b < 3; ++b) {
            const double ang = static_cast<double>(a - b) * 3.14159265358979323846 / 3.0;
            const double w = (1.0 - p) / 3.0;
            d.at(a, b) = {w * std::cos(ang), w * std::sin(ang)};
            if (a == b) d.at(a, b) += p / 3.0;
        }
    }
    return d;
}

/// Predicted complex-architecture loss floor: E_real - ln(d_eff), clamped
/// at zero.
inline double floor_bound(double e_real_nats, double d_eff) {
    check(d_eff >= 1.0, "floor_bound: d_eff must be at least 1");
    return std::max(0.0, e_real_nats - std::log(d_eff));
}

// ---- scaling-law fits ----

struct ScalingPoint {
    double params = 0.0;
    double metric = 0.0;
    double std_dev = 0.0;
    std::string label;
};

struct FitResult {
    double slope = 0.0;      // in log10-log10 coordinates
    double intercept = 0.0;
    double residual_se = 0.0;
    std::vector<double> sigma_log10;  // per point: sigma_y / (y ln 10)
    std::string space = "loss";
};

/// Unweighted OLS of log10(metric) on log10(params). Reported sigmas are
/// propagated per point but do not weight the fit.
inline FitResult fit_power_law(const std::vector<ScalingPoint>& pts,
                               const std::string& space = "loss") {
    check(pts.size() >= 2, "fit_power_law: need at least 2 points");
    const double ln10 = std::log(10.0);
    std::vector<double> xs, ys;
    FitResult r;
    r.space = space;
    for (const ScalingPoint& p : pts) {
        if (!(p.params > 0.0) || !(p.metric > 0.0)) {
            throw std::invalid_argument("fit_power_law: params and metric must be positive");
        }
        check(p.std_dev >= 0.0, "fit_power_law: negative std");
        xs.push_back(std::log10(p.params));
        ys.push_back(std::log10(p.metric));
        r.sigma_log10.push_back(p.std_dev / (p.metric * ln10));
    }
    const double n = static_cast<double>(xs.size());
    double sx = 0.0, sy = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        sx += xs[i];
        sy += ys[i];
    }
    const double mx = sx / n, my = sy / n;
    double sxx = 0.0, sxy = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    check(sxx > 0.0, "fit_power_law: parameter counts are all identical");
    r.slope = sxy / sxx;
    r.intercept = my - r.slope * mx;
    if (xs.size() > 2) {
        double rss = 0.0;
        for (size_t i = 0; i < xs.size(); ++i) {
            const double e = ys[i] - (r.slope * xs[i] + r.intercept);
            rss += e * e;
        }
        r.residual_se = std::sqrt(rss / (n - 2.0));
    }
    return r;
}

struct Crossover {
    bool parallel = false;
    double log10_params = 0.0;
    double log10_metric = 0.0;
    double params = 0.0;
    double metric = 0.0;
};

/// Intersection of two fitted lines in log10-log10 space. Fits from
/// different spaces (loss vs ppl) do not intersect meaningfully and are
/// rejected.
inline Crossover fit_crossover(const FitResult& a, const FitResult& b) {
    check(a.space == b.space,
          "fit_crossover: fits live in different spaces (" + a.space + " vs " + b.space + ")");
    Crossover c;
    if (std::abs(a.slope - b.slope) < 1e-12) {
        c.parallel = true;
        return c;
    }
    c.log10_params = (b.intercept - a.intercept) / (a.slope - b.slope);
    c.log10_metric = a.slope * c.log10_params + a.intercept;
    c.params = std::pow(10.0, c.log10_params);
    c.metric = std::pow(10.0, c.log10_metric);
    return c;
}

/// CSV rows "params,metric,std,label"; a non-numeric first field (header) is
/// skipped.
inline std::vector<ScalingPoint> parse_scaling_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("scaling csv: cannot open: " + path);
    std::vector<ScalingPoint> pts;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream row(line);
        std::string f0, f1, f2, f3;
        std::getline(row, f0, ',');
        std::getline(row, f1, ',');
        std::getline(row, f2, ',');
        std::getline(row, f3);
        ScalingPoint p;
        try {
            p.params = std::stod(f0);
        } catch (const std::exception&) {
            if (lineno == 1) continue;  // header row
            throw std::runtime_error("scaling csv: bad number at line " + std::to_string(lineno));
        }
        try {
            p.metric = std::stod(f1);
            p.std_dev = f2.empty() ? 0.0 : std::stod(f2);
        } catch (const std::exception&) {
            throw std::runtime_error("scaling csv: bad number at line " + std::to_string(lineno));
        }
        p.label = f3;
        pts.push_back(std::move(p));
    }
    return pts;
}

// ---- embedding phase coherence ----

struct PairRecord {
    std::string word_a, word_b;
    std::vector<int32_t> ids_a, ids_b;
    std::string label;
    double phase_diff = 0.0;
    double coherence = 0.0;
    bool skipped = false;
};

struct LabelStats {
    std::string label;
    int64_t pairs = 0;
    int64_t skipped = 0;
    double mean_phase = 0.0;      // circular mean
    double mean_coherence = 0.0;  // arithmetic mean
};

/// UTF-8 lines "word_a<TAB>word_b<TAB>label". Words are mapped to their
/// UTF-8 byte ids (the byte-level tokenizer), ready for embedding lookup.
inline std::vector<PairRecord> parse_pair_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("pair file: cannot open: " + path);
    std::vector<PairRecord> out;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const size_t t1 = line.find('\t');
        const size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t2 == std::string::npos) {
            throw std::runtime_error("pair file: line " + std::to_string(lineno) +
                                     " is not word_a<TAB>word_b<TAB>label");
        }
        PairRecord r;
        r.word_a = line.substr(0, t1);
        r.word_b = line.substr(t1 + 1, t2 - t1 - 1);
        r.label = line.substr(t2 + 1);
        for (unsigned char c : r.word_a) r.ids_a.push_back(static_cast<int32_t>(c));
        for (unsigned char c : r.word_b) r.ids_b.push_back(static_cast<int32_t>(c));
        out.push_back(std::move(r));
    }
    return out;
}

/// Annotates each pair with the phase and magnitude of the normalized
/// conjugate inner product of its two word vectors (mean of the words'
/// complex embedding rows), then aggregates per label: circular mean phase,
/// arithmetic mean coherence. Zero-norm vectors skip the pair but count it.
inline std::vector<LabelStats> phase_coherence(const Tensor<double>& embed,
                                               std::vector<PairRecord>& pairs) {
    check(embed.rank() == 3 && embed.dim(-1) == 2,
          "phase_coherence: embedding must be [V, D, 2], got " + shape_string(embed.shape));
    const int64_t v = embed.shape[0], dim = embed.shape[1];

    auto word_vector = [&](const std::vector<int32_t>& ids) {
        std::vector<std::complex<double>> z(static_cast<size_t>(dim), {0.0, 0.0});
        check(!ids.empty(), "phase_coherence: empty word");
        for (int32_t id : ids) {
            if (id < 0 || id >= v) {
                throw std::out_of_range("phase_coherence: token id " + std::to_string(id) +
                                        " outside vocab " + std::to_string(v));
            }
            for (int64_t j = 0; j < dim; ++j) {
                z[static_cast<size_t>(j)] += std::complex<double>(embed[(id * dim + j) * 2],
                                                                  embed[(id * dim + j) * 2 + 1]);
            }
        }
        for (auto& c : z) c /= static_cast<double>(ids.size());
        return z;
    };

    std::vector<LabelStats> stats;
    auto stat_for = [&](const std::string& label) -> LabelStats& {
        for (LabelStats& s : stats) {
            if (s.label == label) return s;
        }
        stats.push_back(LabelStats{label, 0, 0, 0.0, 0.0});
        return stats.back();
    };
    struct Accum {
        double sin_sum = 0.0, cos_sum = 0.0, coh_sum = 0.0;
        int64_t n = 0;
    };
    std::vector<Accum> acc;

    for (PairRecord& r : pairs) {
        LabelStats& s = stat_for(r.label);
        const size_t si = static_cast<size_t>(&s - stats.data());
        if (acc.size() < stats.size()) acc.resize(stats.size());
        s.pairs += 1;

        const auto z1 = word_vector(r.ids_a);
        const auto z2 = word_vector(r.ids_b);
        double n1 = 0.0, n2 = 0.0;
        std::complex<double> inner{0.0, 0.0};
        for (int64_t j = 0; j < dim; ++j) {
            n1 += std::norm(z1[static_cast<size_t>(j)]);
            n2 += std::norm(z2[static_cast<size_t>(j)]);
            inner += std::conj(z1[static_cast<size_t>(j)]) * z2[static_cast<size_t>(j)];
        }
        if (n1 <= 0.0 || n2 <= 0.0) {
            r.skipped = true;
            s.skipped += 1;
            continue;
        }
        const std::complex<double> c = inner / std::sqrt(n1 * n2);
        r.phase_diff = std::atan2(c.imag(), c.real());
        r.coherence = std::abs(c);
        acc[si].sin_sum += std::sin(r.phase_diff);
        acc[si].cos_sum += std::cos(r.phase_diff);
        acc[si].coh_sum += r.coherence;
        acc[si].n += 1;
    }
    acc.resize(stats.size());
    for (size_t i = 0; i < stats.size(); ++i) {
        if (acc[i].n > 0) {
            stats[i].mean_phase = std::atan2(acc[i].sin_sum, acc[i].cos_sum);
            stats[i].mean_coherence = acc[i].coh_sum / static_cast<double>(acc[i].n);
        }
    }
    return stats;
}

/// Output schema for annotated pairs.
inline void write_pair_csv(std::ostream& out, const std::vector<PairRecord>& pairs) {
    out << "word_a,word_b,label,phase_diff_rad,coherence\n";
    char buf[128];
    for (const PairRecord& r : pairs) {
        if (r.skipped) continue;
        std::snprintf(buf, sizeof(buf), ",%.9f,%.9f\n", r.phase_diff, r.coherence);
        out << r.word_a << ',' << r.word_b << ',' << r.label << buf;
    }
}

}  // namespace pam
