#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pam/analysis.hpp"
#include "pam/rng.hpp"

using namespace pam;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct TempFile {
    fs::path path;
    explicit TempFile(const std::string& stem) {
        path = fs::temp_directory_path() / (stem + "-" + std::to_string(::getpid()));
    }
    ~TempFile() {
        std::error_code ec;
        fs::remove(path, ec);
    }
    std::string str() const { return path.string(); }
};

DensityMatrix diag_state(const std::vector<double>& p) {
    DensityMatrix d = DensityMatrix::zeros(static_cast<int64_t>(p.size()));
    for (size_t i = 0; i < p.size(); ++i) d.at(static_cast<int64_t>(i), static_cast<int64_t>(i)) = p[i];
    return d;
}

// Gram-Schmidt on a random complex matrix: unitary to machine precision.
std::vector<std::complex<double>> random_unitary(int64_t n, uint64_t seed) {
    CounterRng rng = CounterRng::for_path(seed, "unitary");
    std::vector<std::complex<double>> u(static_cast<size_t>(n * n));
    for (auto& c : u) c = {rng.gaussian(), rng.gaussian()};
    for (int64_t j = 0; j < n; ++j) {
        for (int64_t k = 0; k < j; ++k) {
            std::complex<double> proj{0.0, 0.0};
            for (int64_t i = 0; i < n; ++i) proj += std::conj(u[i * n + k]) * u[i * n + j];
            for (int64_t i = 0; i < n; ++i) u[i * n + j] -= proj * u[i * n + k];
        }
        double nrm = 0.0;
        for (int64_t i = 0; i < n; ++i) nrm += std::norm(u[i * n + j]);
        nrm = std::sqrt(nrm);
        for (int64_t i = 0; i < n; ++i) u[i * n + j] /= nrm;
    }
    return u;
}

DensityMatrix conjugate(const DensityMatrix& d, const std::vector<std::complex<double>>& u) {
    const int64_t n = d.n;
    std::vector<std::complex<double>> tmp(static_cast<size_t>(n * n));
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            std::complex<double> s{0.0, 0.0};
            for (int64_t k = 0; k < n; ++k) s += u[i * n + k] * d.at(k, j);
            tmp[i * n + j] = s;
        }
    }
    DensityMatrix out = DensityMatrix::zeros(n);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            std::complex<double> s{0.0, 0.0};
            for (int64_t k = 0; k < n; ++k) s += tmp[i * n + k] * std::conj(u[j * n + k]);
            out.at(i, j) = s;
        }
    }
    return out;
}

double wrap_angle(double x) { return std::atan2(std::sin(x), std::cos(x)); }

// Unit-row embedding table for hand-built coherence cases.
Tensor<double> unit_embed(int64_t v, int64_t dim) {
    Tensor<double> e = Tensor<double>::zeros({v, dim, 2});
    for (int64_t r = 0; r < v; ++r) e[(r * dim) * 2] = 1.0;  // e_r = (1, 0, 0, ...)
    return e;
}

void scale_row(Tensor<double>& e, int64_t row, std::complex<double> z) {
    const int64_t dim = e.shape[1];
    for (int64_t j = 0; j < dim; ++j) {
        const std::complex<double> c{e[(row * dim + j) * 2], e[(row * dim + j) * 2 + 1]};
        const std::complex<double> out = c * z;
        e[(row * dim + j) * 2] = out.real();
        e[(row * dim + j) * 2 + 1] = out.imag();
    }
}

PairRecord pair_of(int32_t a, int32_t b, const std::string& label) {
    PairRecord r;
    r.word_a = std::to_string(a);
    r.word_b = std::to_string(b);
    r.ids_a = {a};
    r.ids_b = {b};
    r.label = label;
    return r;
}

}  // namespace

TEST_CASE("the worked three-state example has the closed-form spectrum") {
    for (int i = 0; i <= 10; ++i) {
        const double p = static_cast<double>(i) / 10.0;
        const DensityMatrix d = example_state(p);
        d.validate();
        const auto eigs = hermitian_eigenvalues(d.rho, d.n);
        REQUIRE(eigs.size() == 3);
        CHECK(eigs[0] == Catch::Approx(1.0 - 2.0 * p / 3.0).margin(1e-10));
        CHECK(eigs[1] == Catch::Approx(p / 3.0).margin(1e-10));
        CHECK(eigs[2] == Catch::Approx(p / 3.0).margin(1e-10));
        // The diagonal stays uniform regardless of mixing.
        for (int64_t a = 0; a < 3; ++a) {
            CHECK(d.at(a, a).real() == Catch::Approx(1.0 / 3.0).margin(1e-15));
            CHECK(d.at(a, a).imag() == 0.0);
        }
    }
    CHECK(example_state(0.5).at(0, 1) ==
          std::complex<double>(0.5 / 3.0 * std::cos(-kPi / 3.0), 0.5 / 3.0 * std::sin(-kPi / 3.0)));
    CHECK_THROWS_AS(example_state(-0.01), std::invalid_argument);
    CHECK_THROWS_AS(example_state(1.01), std::invalid_argument);
}

TEST_CASE("entropies of the pure and mixed endpoints") {
    const DensityMatrix pure = example_state(0.0);
    CHECK(shannon_diag(pure) == Catch::Approx(std::log(3.0)).margin(1e-12));
    CHECK(von_neumann(pure) == Catch::Approx(0.0).margin(1e-9));
    CHECK(decoherence_gap(pure) == Catch::Approx(std::log(3.0)).margin(1e-9));

    const DensityMatrix mixed = example_state(1.0);
    CHECK(shannon_diag(mixed) == Catch::Approx(std::log(3.0)).margin(1e-12));
    CHECK(von_neumann(mixed) == Catch::Approx(std::log(3.0)).margin(1e-9));
    CHECK(decoherence_gap(mixed) == Catch::Approx(0.0).margin(1e-9));

    // rho(0.3) has eigenvalues (0.8, 0.1, 0.1).
    const double expect = -(0.8 * std::log(0.8) + 0.2 * std::log(0.1));
    CHECK(von_neumann(example_state(0.3)) == Catch::Approx(expect).margin(1e-9));
    CHECK(von_neumann(example_state(0.3)) == Catch::Approx(0.639).margin(5e-4));
}

TEST_CASE("decoherence gap interpolates monotonically and stays nonnegative") {
    double prev = std::log(3.0) + 1e-12;
    for (int i = 0; i <= 10; ++i) {
        const double p = static_cast<double>(i) / 10.0;
        const double gap = decoherence_gap(example_state(p));
        CHECK(gap >= -1e-9);
        CHECK(gap <= prev + 1e-12);
        prev = gap;
    }
}

TEST_CASE("von Neumann entropy is basis invariant, Shannon is not below it") {
    const DensityMatrix d = example_state(0.3);
    const double s_ref = von_neumann(d);
    for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        const DensityMatrix rotated = conjugate(d, random_unitary(3, seed));
        rotated.validate();
        CHECK(std::abs(von_neumann(rotated) - s_ref) < 1e-8);
        CHECK(shannon_diag(rotated) >= von_neumann(rotated) - 1e-9);
    }

    // A 5-state mixed case with a planted spectrum.
    std::vector<double> lam = {0.4, 0.3, 0.15, 0.1, 0.05};
    const DensityMatrix planted = conjugate(diag_state(lam), random_unitary(5, 7));
    planted.validate();
    const auto eigs = hermitian_eigenvalues(planted.rho, 5);
    for (size_t i = 0; i < lam.size(); ++i) CHECK(eigs[i] == Catch::Approx(lam[i]).margin(1e-10));
    double expect = 0.0;
    for (double l : lam) expect -= l * std::log(l);
    CHECK(von_neumann(planted) == Catch::Approx(expect).margin(1e-9));
    CHECK(shannon_diag(planted) >= von_neumann(planted) - 1e-9);
}

TEST_CASE("density matrix validation rejects broken states") {
    DensityMatrix skew = DensityMatrix::zeros(2);
    skew.at(0, 0) = 0.5;
    skew.at(1, 1) = 0.5;
    skew.at(0, 1) = 0.3;
    skew.at(1, 0) = 0.1;
    CHECK_THROWS_WITH(skew.validate(), Catch::Matchers::ContainsSubstring("Hermitian"));

    CHECK_THROWS_WITH(diag_state({0.5, 0.5, 0.5}).validate(),
                      Catch::Matchers::ContainsSubstring("trace"));
    CHECK_THROWS_WITH(diag_state({1.5, -0.5}).validate(),
                      Catch::Matchers::ContainsSubstring("negative eigenvalue"));

    DensityMatrix short_buf;
    short_buf.n = 2;
    short_buf.rho.assign(3, {0.0, 0.0});
    CHECK_THROWS_AS(short_buf.validate(), std::invalid_argument);
}

TEST_CASE("shannon entropy of the diagonal handles degenerate weights") {
    CHECK(shannon_diag(diag_state({1.0, 0.0})) == 0.0);  // 0 log 0 term dropped
    CHECK(shannon_diag(diag_state({0.5, 0.5})) == Catch::Approx(std::log(2.0)).margin(1e-15));
    CHECK(von_neumann(diag_state({1.0, 0.0})) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("floor bound from the real-valued asymptote") {
    CHECK(floor_bound(1.69, 2.0) == Catch::Approx(1.00).margin(0.005));
    CHECK(floor_bound(1.69, 4.0) == Catch::Approx(0.30).margin(0.005));
    CHECK(floor_bound(1.69, 1.0) == 1.69);  // ln 1 = 0 leaves the anchor untouched
    CHECK(floor_bound(0.5, 4.0) == 0.0);    // clamped at zero
    CHECK_THROWS_AS(floor_bound(1.69, 0.5), std::invalid_argument);
    CHECK(nats_to_bits(std::log(2.0)) == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("power-law fit recovers a planted slope exactly") {
    const double slope = -0.125, intercept = 1.3;
    std::vector<ScalingPoint> pts;
    for (double n : {1e6, 3.16e6, 1e7, 5e7, 2e8}) {
        pts.push_back({n, std::pow(10.0, intercept + slope * std::log10(n)), 0.05, "pam"});
    }
    const FitResult r = fit_power_law(pts);
    CHECK(std::abs(r.slope - slope) < 1e-9);
    CHECK(std::abs(r.intercept - intercept) < 1e-9);
    CHECK(r.residual_se < 1e-9);
    CHECK(r.space == "loss");
    REQUIRE(r.sigma_log10.size() == pts.size());
    for (size_t i = 0; i < pts.size(); ++i) {
        CHECK(r.sigma_log10[i] == pts[i].std_dev / (pts[i].metric * std::log(10.0)));
    }

    std::vector<ScalingPoint> shuffled = {pts[3], pts[0], pts[4], pts[2], pts[1]};
    const FitResult r2 = fit_power_law(shuffled);
    CHECK(std::abs(r2.slope - r.slope) < 1e-12);
    CHECK(std::abs(r2.intercept - r.intercept) < 1e-12);
}

TEST_CASE("log-space error propagation") {
    std::vector<ScalingPoint> pts = {{1e6, 8.0, 0.0, ""}, {1e7, 4.0, 0.1, ""}};
    const FitResult r = fit_power_law(pts, "ppl");
    CHECK(r.space == "ppl");
    CHECK(r.sigma_log10[0] == 0.0);
    CHECK(r.sigma_log10[1] == Catch::Approx(0.010857362).margin(1e-8));
    CHECK(r.sigma_log10[1] == 0.1 / (4.0 * std::log(10.0)));
}

TEST_CASE("two-point fit on the published loss endpoints") {
    std::vector<ScalingPoint> pts = {{5e6, 5.56, 0.0, "pam"}, {1e8, 3.56, 0.0, "pam"}};
    const FitResult r = fit_power_law(pts);
    CHECK(r.slope == Catch::Approx(std::log10(3.56 / 5.56) / std::log10(20.0)).margin(1e-12));
    CHECK(r.slope == Catch::Approx(-0.148).margin(0.002));
    CHECK(r.residual_se == 0.0);
}

TEST_CASE("power-law fit rejects unusable input") {
    CHECK_THROWS_AS(fit_power_law({{1e6, 5.0, 0.0, ""}}), std::invalid_argument);
    CHECK_THROWS_AS(fit_power_law({{1e6, 5.0, 0.0, ""}, {1e7, 0.0, 0.0, ""}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(fit_power_law({{-1e6, 5.0, 0.0, ""}, {1e7, 4.0, 0.0, ""}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(fit_power_law({{1e6, 5.0, 0.0, ""}, {1e6, 4.0, 0.0, ""}}),
                    std::invalid_argument);
}

TEST_CASE("crossover of two fitted lines") {
    FitResult a, b;
    a.slope = -1.0;
    a.intercept = 0.0;
    b.slope = -2.0;
    b.intercept = 1.0;
    const Crossover c = fit_crossover(a, b);
    CHECK_FALSE(c.parallel);
    CHECK(c.log10_params == Catch::Approx(1.0).margin(1e-15));
    CHECK(c.log10_metric == Catch::Approx(-1.0).margin(1e-15));
    CHECK(c.params == Catch::Approx(10.0).margin(1e-12));
    CHECK(c.metric == Catch::Approx(0.1).margin(1e-14));

    const Crossover swapped = fit_crossover(b, a);
    CHECK(swapped.log10_params == Catch::Approx(c.log10_params).margin(1e-15));
    CHECK(swapped.log10_metric == Catch::Approx(c.log10_metric).margin(1e-15));

    CHECK(fit_crossover(a, a).parallel);
    FitResult near_a = a;
    near_a.slope = a.slope + 1e-13;
    near_a.intercept = 5.0;
    CHECK(fit_crossover(a, near_a).parallel);

    FitResult ppl = b;
    ppl.space = "ppl";
    CHECK_THROWS_WITH(fit_crossover(a, ppl), Catch::Matchers::ContainsSubstring("spaces"));
}

TEST_CASE("published slopes and anchors put the loss crossover past a billion parameters") {
    // Slopes -0.15 and -0.12 with each line pinned at its 100M loss.
    FitResult pam, sam;
    pam.slope = -0.15;
    pam.intercept = std::log10(3.56) + 0.15 * 8.0;
    sam.slope = -0.12;
    sam.intercept = std::log10(3.26) + 0.12 * 8.0;
    const Crossover c = fit_crossover(pam, sam);
    REQUIRE_FALSE(c.parallel);
    CHECK(c.log10_params > 9.0);
    CHECK(c.log10_params < 10.0);
    CHECK(c.metric > 1.5);
    CHECK(c.metric < 3.5);
}

TEST_CASE("scaling csv parsing") {
    TempFile f("pam-scaling");
    {
        std::ofstream out(f.str());
        out << "params,metric,std,label\n";
        out << "# comment\n";
        out << "5000000,5.56,0.10,pam\n";
        out << "100000000,3.56,0.08,pam\n";
        out << "5000000,4.78,,sam\n";
    }
    const auto pts = parse_scaling_csv(f.str());
    REQUIRE(pts.size() == 3);
    CHECK(pts[0].params == 5e6);
    CHECK(pts[0].metric == 5.56);
    CHECK(pts[0].std_dev == 0.10);
    CHECK(pts[0].label == "pam");
    CHECK(pts[2].std_dev == 0.0);
    CHECK(pts[2].label == "sam");

    {
        std::ofstream out(f.str());
        out << "1000,4.0,0.1,a\n";
        out << "x,4.0,0.1,a\n";
    }
    CHECK_THROWS_WITH(parse_scaling_csv(f.str()), Catch::Matchers::ContainsSubstring("line 2"));
    CHECK_THROWS_WITH(parse_scaling_csv("/nonexistent/scaling.csv"),
                      Catch::Matchers::ContainsSubstring("cannot open"));
}

TEST_CASE("pair file parsing maps words to byte ids") {
    TempFile f("pam-pairs");
    {
        std::ofstream out(f.str());
        out << "good\tnice\tsynonym\n";
        out << "# header comment\n";
        out << "hot\tcold\tantonym\n";
    }
    const auto pairs = parse_pair_file(f.str());
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[0].word_a == "good");
    CHECK(pairs[0].word_b == "nice");
    CHECK(pairs[0].label == "synonym");
    CHECK(pairs[0].ids_a == std::vector<int32_t>{103, 111, 111, 100});
    CHECK(pairs[1].label == "antonym");

    {
        std::ofstream out(f.str());
        out << "good\tnice\tsynonym\n";
        out << "missing tabs here\n";
    }
    CHECK_THROWS_WITH(parse_pair_file(f.str()), Catch::Matchers::ContainsSubstring("line 2"));
    CHECK_THROWS_WITH(parse_pair_file("/nonexistent/pairs.tsv"),
                      Catch::Matchers::ContainsSubstring("cannot open"));
}

TEST_CASE("phase coherence on hand-built vectors") {
    Tensor<double> e = unit_embed(8, 4);
    scale_row(e, 1, std::complex<double>(0.0, 1.0));           // e_1 = i * e_0
    scale_row(e, 2, std::polar(1.0, 0.7));                     // e_2 = exp(i 0.7) e_0
    scale_row(e, 3, std::polar(2.0, 3.0));                     // magnitude must not matter
    scale_row(e, 4, std::polar(1.0, -3.0));
    scale_row(e, 5, 0.0);                                      // zero vector

    std::vector<PairRecord> pairs = {
        pair_of(0, 0, "self"),     pair_of(0, 1, "quarter"),  pair_of(0, 2, "shift"),
        pair_of(0, 3, "circ"),     pair_of(0, 4, "circ"),     pair_of(0, 5, "dead"),
        pair_of(6, 7, "parallel"),
    };
    const auto stats = phase_coherence(e, pairs);

    CHECK(pairs[0].phase_diff == Catch::Approx(0.0).margin(1e-12));
    CHECK(pairs[0].coherence == Catch::Approx(1.0).margin(1e-12));
    CHECK(pairs[1].phase_diff == Catch::Approx(kPi / 2.0).margin(1e-12));
    CHECK(pairs[1].coherence == Catch::Approx(1.0).margin(1e-12));
    CHECK(pairs[2].phase_diff == Catch::Approx(0.7).margin(1e-12));
    CHECK(pairs[3].phase_diff == Catch::Approx(3.0).margin(1e-12));
    CHECK(pairs[3].coherence == Catch::Approx(1.0).margin(1e-12));  // |2 e^{3i}| normalizes away
    CHECK(pairs[4].phase_diff == Catch::Approx(-3.0).margin(1e-12));
    CHECK(pairs[5].skipped);
    CHECK(pairs[6].coherence == Catch::Approx(1.0).margin(1e-12));  // two copies of e_0

    // Circular mean of +3 and -3 rad is pi, not the arithmetic 0.
    bool found_circ = false, found_dead = false;
    for (const LabelStats& s : stats) {
        if (s.label == "circ") {
            found_circ = true;
            CHECK(s.pairs == 2);
            CHECK(s.skipped == 0);
            CHECK(std::abs(s.mean_phase) == Catch::Approx(kPi).margin(1e-9));
            CHECK(s.mean_coherence == Catch::Approx(1.0).margin(1e-12));
        }
        if (s.label == "dead") {
            found_dead = true;
            CHECK(s.pairs == 1);
            CHECK(s.skipped == 1);
        }
    }
    CHECK(found_circ);
    CHECK(found_dead);
}

TEST_CASE("multi-token words average their byte embeddings") {
    Tensor<double> e = unit_embed(8, 4);
    scale_row(e, 1, std::complex<double>(3.0, 0.0));
    // mean(e_0, e_1) = 2 e_0, still phase 0 against e_0.
    PairRecord r;
    r.ids_a = {0};
    r.ids_b = {0, 1};
    r.label = "avg";
    std::vector<PairRecord> pairs = {r};
    phase_coherence(e, pairs);
    CHECK(pairs[0].phase_diff == Catch::Approx(0.0).margin(1e-12));
    CHECK(pairs[0].coherence == Catch::Approx(1.0).margin(1e-12));

    std::vector<PairRecord> bad = {pair_of(0, 9, "oob")};
    CHECK_THROWS_AS(phase_coherence(e, bad), std::out_of_range);
}

TEST_CASE("a global phase shifts the phase difference and nothing else") {
    const int64_t dim = 16;
    Tensor<double> e = Tensor<double>::zeros({4, dim, 2});
    CounterRng rng = CounterRng::for_path(5, "phase-shift");
    for (int64_t i = 0; i < e.numel(); ++i) e[i] = rng.gaussian();
    // Row 2 = row 1 rotated by a global phase.
    const double phi = 1.234;
    for (int64_t j = 0; j < dim; ++j) {
        const std::complex<double> z{e[(1 * dim + j) * 2], e[(1 * dim + j) * 2 + 1]};
        const std::complex<double> out = z * std::polar(1.0, phi);
        e[(2 * dim + j) * 2] = out.real();
        e[(2 * dim + j) * 2 + 1] = out.imag();
    }
    std::vector<PairRecord> pairs = {pair_of(0, 1, "base"), pair_of(0, 2, "shifted")};
    phase_coherence(e, pairs);
    CHECK(pairs[1].coherence == Catch::Approx(pairs[0].coherence).margin(1e-12));
    CHECK(pairs[1].phase_diff ==
          Catch::Approx(wrap_angle(pairs[0].phase_diff + phi)).margin(1e-12));
}

TEST_CASE("random high-dimensional pairs decohere toward the 1/sqrt(d) law") {
    const int64_t dim = 64, n_pairs = 1000;
    Tensor<double> e = Tensor<double>::zeros({2 * n_pairs, dim, 2});
    CounterRng rng = CounterRng::for_path(11, "coherence-mc");
    for (int64_t i = 0; i < e.numel(); ++i) e[i] = rng.gaussian();
    std::vector<PairRecord> pairs;
    for (int32_t i = 0; i < n_pairs; ++i) pairs.push_back(pair_of(2 * i, 2 * i + 1, "random"));
    const auto stats = phase_coherence(e, pairs);
    REQUIRE(stats.size() == 1);
    CHECK(stats[0].pairs == n_pairs);
    CHECK(stats[0].skipped == 0);
    // E|<z1,z2>|/(|z1||z2|) = sqrt(pi/4)/sqrt(d) for isotropic complex vectors.
    CHECK(stats[0].mean_coherence == Catch::Approx(0.111).margin(0.01));
    for (const PairRecord& r : pairs) {
        CHECK(r.coherence <= 1.0 + 1e-9);
        CHECK(r.phase_diff >= -kPi);
        CHECK(r.phase_diff <= kPi);
    }
}

TEST_CASE("pair csv schema") {
    Tensor<double> e = unit_embed(4, 2);
    std::vector<PairRecord> pairs = {pair_of(0, 1, "synonym")};
    pairs[0].word_a = "good";
    pairs[0].word_b = "nice";
    phase_coherence(e, pairs);
    std::ostringstream out;
    write_pair_csv(out, pairs);
    std::istringstream lines(out.str());
    std::string header, row;
    REQUIRE(std::getline(lines, header));
    CHECK(header == "word_a,word_b,label,phase_diff_rad,coherence");
    REQUIRE(std::getline(lines, row));
    CHECK(row.rfind("good,nice,synonym,", 0) == 0);
}

TEST_CASE("embedding shape is checked") {
    Tensor<double> flat = Tensor<double>::zeros({4, 8});
    std::vector<PairRecord> pairs = {pair_of(0, 1, "x")};
    CHECK_THROWS_AS(phase_coherence(flat, pairs), std::invalid_argument);
}
