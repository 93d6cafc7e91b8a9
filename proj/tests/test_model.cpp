#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pam/checkpoint.hpp"
#include "pam/model.hpp"
#include "test_helpers.hpp"

using namespace pam;
namespace fs = std::filesystem;

namespace {

struct TempFile {
    fs::path path;
    explicit TempFile(const std::string& stem) {
        path = fs::temp_directory_path() / (stem + "-" + std::to_string(::getpid()) + ".bin");
    }
    ~TempFile() {
        std::error_code ec;
        fs::remove(path, ec);
    }
    std::string str() const { return path.string(); }
};

std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

ModelConfig tiny_complex() {
    ModelConfig c;
    c.dim = 8;
    c.n_layers = 2;
    c.n_heads = 2;
    c.head_dim = 2;
    c.vocab_size = 8;
    c.expansion = 2;
    c.seed = 99;
    return c;
}

template <typename T>
void zero_alphas(Model<T>& m) {
    for (int64_t l = 0; l < m.cfg.n_layers; ++l) {
        m.store[m.blocks[static_cast<size_t>(l)].alpha_cgu].value[0] = T(0);
        m.store[m.blocks[static_cast<size_t>(l)].alpha_pam].value[0] = T(0);
    }
}

}  // namespace

TEST_CASE("parameter count matches the instantiated store") {
    SECTION("desk configuration") {
        ModelConfig c;  // defaults: 64 / 4 layers / 2 heads / 16 / vocab 256
        CHECK(count_params(c) == 396120);
        Model<float> m(c);
        CHECK(m.store.scalar_count() == 396120);
    }
    SECTION("assorted shapes, both arithmetics") {
        std::vector<ModelConfig> cfgs;
        for (int64_t dim : {8, 24}) {
            for (int64_t layers : {1, 3}) {
                ModelConfig c;
                c.dim = dim;
                c.n_layers = layers;
                c.n_heads = 2;
                c.head_dim = 4;
                c.vocab_size = 16;
                c.expansion = 2;
                cfgs.push_back(c);
                c.arith = Arith::real_valued;
                cfgs.push_back(c);
            }
        }
        for (const auto& c : cfgs) {
            Model<float> m(c);
            INFO("dim=" << c.dim << " layers=" << c.n_layers << " arith=" << arith_name(c.arith));
            CHECK(m.store.scalar_count() == count_params(c));
        }
    }
    SECTION("parameter names are unique and indexed") {
        Model<float> m(tiny_complex());
        for (int64_t i = 0; i < m.store.size(); ++i) {
            CHECK(m.store.find(m.store[i].name) == i);
        }
    }
}

TEST_CASE("published size ladder lands near its labels") {
    struct Row {
        int64_t dim, layers, heads, head_dim;
        double label;
    };
    // vocab 50257, expansion 3 throughout
    const Row rows[] = {
        {44, 12, 2, 16, 5e6},   {80, 12, 4, 16, 1e7},  {200, 6, 4, 16, 2.5e7},
        {292, 12, 4, 16, 5e7},  {384, 16, 6, 64, 1e8},
    };
    for (const Row& r : rows) {
        ModelConfig c;
        c.dim = r.dim;
        c.n_layers = r.layers;
        c.n_heads = r.heads;
        c.head_dim = r.head_dim;
        c.vocab_size = 50257;
        c.expansion = 3;
        const int64_t n = count_params(c);
        INFO("dim=" << r.dim << " layers=" << r.layers << " -> " << n);
        CHECK(std::abs(static_cast<double>(n) / r.label - 1.0) < 0.15);

        SamMatch m = match_sam_config(c);
        INFO("matched dim=" << m.config.dim << " heads=" << m.config.n_heads
                            << " params=" << m.params << " target=" << m.target);
        CHECK(m.within_tol);
        CHECK(std::abs(static_cast<double>(m.params - m.target)) / static_cast<double>(m.target) <=
              0.02);
    }
}

TEST_CASE("real-arithmetic size matching") {
    SECTION("desk model finds the smallest widened dim within tolerance") {
        ModelConfig c;
        SamMatch m = match_sam_config(c);
        CHECK(m.within_tol);
        CHECK(m.config.arith == Arith::real_valued);
        CHECK(m.params == count_params(m.config));
        CHECK(std::abs(static_cast<double>(m.params - m.target)) / static_cast<double>(m.target) <=
              0.02);

        // Independent brute force: smallest dim meeting the tolerance, then
        // smallest heads at that dim.
        const int64_t target = count_params(c);
        int64_t want_dim = -1, want_heads = -1;
        for (int64_t dim = c.dim; dim <= 2 * c.dim && want_dim < 0; ++dim) {
            for (int64_t heads = c.n_heads; heads <= 2 * c.n_heads; ++heads) {
                ModelConfig r = c;
                r.arith = Arith::real_valued;
                r.dim = dim;
                r.n_heads = heads;
                const double err = std::abs(static_cast<double>(count_params(r) - target)) /
                                   static_cast<double>(target);
                if (err <= 0.02) {
                    want_dim = dim;
                    want_heads = heads;
                    break;
                }
            }
        }
        REQUIRE(want_dim > 0);
        CHECK(m.config.dim == want_dim);
        CHECK(m.config.n_heads == want_heads);
        CHECK(m.config.dim > c.dim);  // real maps are cheaper, so it must widen
    }
    SECTION("loose tolerance degenerates to the same dimensions") {
        ModelConfig c;
        SamMatch m = match_sam_config(c, 1.0);
        CHECK(m.within_tol);
        CHECK(m.config.dim == c.dim);
        CHECK(m.config.n_heads == c.n_heads);
        CHECK(m.config.arith == Arith::real_valued);
    }
    SECTION("matrix-dominated config widens by about sqrt(2)") {
        ModelConfig c;
        c.dim = 256;
        c.n_layers = 8;
        c.n_heads = 2;
        c.head_dim = 16;
        c.vocab_size = 32;
        c.expansion = 3;
        SamMatch m = match_sam_config(c);
        CHECK(m.within_tol);
        const double widened = static_cast<double>(m.config.dim) / (256.0 * std::sqrt(2.0));
        INFO("dim " << m.config.dim << " ratio " << widened);
        CHECK(std::abs(widened - 1.0) < 0.03);
    }
    SECTION("search is deterministic") {
        ModelConfig c;
        SamMatch a = match_sam_config(c);
        SamMatch b = match_sam_config(c);
        CHECK(a.config.dim == b.config.dim);
        CHECK(a.config.n_heads == b.config.n_heads);
        CHECK(a.params == b.params);
    }
    SECTION("rejects a real-arithmetic source") {
        ModelConfig c;
        c.arith = Arith::real_valued;
        c.head_dim = 16;
        CHECK_THROWS_AS(match_sam_config(c), std::invalid_argument);
    }
}

TEST_CASE("zeroed residual scales reduce the model to norm plus tied head") {
    Model<double> m(tiny_complex());
    zero_alphas(m);
    const std::vector<int32_t> tokens{0, 3, 7, 1, 3};
    const int64_t T = static_cast<int64_t>(tokens.size());
    const int64_t D = m.cfg.dim, V = m.cfg.vocab_size;

    Tape<double> tape(false);
    auto fwd = m.forward(tape, tokens, 1, T);
    const Tensor<double>& logits = tape.val(fwd.logits);
    REQUIRE(logits.shape == std::vector<int64_t>({1, T, V}));

    // Same pipeline with the blocks removed entirely.
    Tape<double> ref(false);
    VarId e_flat = reshape(ref, ref.constant(m.store[m.embed_idx].value), {V, 2 * D});
    VarId z = embedding_rows(ref, e_flat, tokens);
    z = reshape(ref, z, {1, T, D, 2});
    z = complex_norm(ref, z, ref.constant(m.store[m.final_norm_idx].value));
    VarId want = real_linear(ref, e_flat, VarId{}, reshape(ref, z, {1, T, 2 * D}));
    const Tensor<double>& wv = ref.val(want);

    double worst = 0.0;
    for (int64_t i = 0; i < logits.numel(); ++i) {
        worst = std::max(worst, std::abs(logits[i] - wv[i]));
    }
    CHECK(worst == 0.0);

    SECTION("per-position logits depend only on the token there") {
        Tape<double> ta(false), tb(false);
        auto a = m.forward(ta, {3, 5}, 1, 2);
        auto b = m.forward(tb, {5, 3}, 1, 2);
        const Tensor<double>& la = ta.val(a.logits);
        const Tensor<double>& lb = tb.val(b.logits);
        for (int64_t v = 0; v < V; ++v) {
            CHECK(la[0 * V + v] == lb[1 * V + v]);  // token 3
            CHECK(la[1 * V + v] == lb[0 * V + v]);  // token 5
        }
    }
}

TEST_CASE("tied head retrieves the input token on a fresh tiny model") {
    Model<double> m(tiny_complex());
    zero_alphas(m);
    const int64_t V = m.cfg.vocab_size;
    std::vector<int32_t> tokens(static_cast<size_t>(V));
    for (int32_t v = 0; v < V; ++v) tokens[static_cast<size_t>(v)] = v;

    Tape<double> tape(false);
    auto fwd = m.forward(tape, tokens, 1, V);
    const Tensor<double>& logits = tape.val(fwd.logits);
    for (int64_t t = 0; t < V; ++t) {
        int64_t best = 0;
        for (int64_t v = 1; v < V; ++v) {
            if (logits[t * V + v] > logits[t * V + best]) best = v;
        }
        CHECK(best == t);
        // Off-diagonal rows of the flattened embedding are orthogonal, so the
        // margin is the full normalized self-product.
        for (int64_t v = 0; v < V; ++v) {
            if (v == t) continue;
            CHECK(std::abs(logits[t * V + v]) < 1e-9);
        }
    }
}

TEST_CASE("construction is deterministic in the seed") {
    ModelConfig c = tiny_complex();
    Model<float> a(c), b(c);
    REQUIRE(a.store.size() == b.store.size());
    for (int64_t i = 0; i < a.store.size(); ++i) {
        REQUIRE(a.store[i].value.numel() == b.store[i].value.numel());
        CHECK(std::memcmp(a.store[i].value.data(), b.store[i].value.data(),
                          sizeof(float) * static_cast<size_t>(a.store[i].value.numel())) == 0);
    }
    c.seed = 100;
    Model<float> other(c);
    bool any_diff = false;
    const auto& ea = a.store[a.embed_idx].value;
    const auto& eo = other.store[other.embed_idx].value;
    for (int64_t i = 0; i < ea.numel() && !any_diff; ++i) any_diff = ea[i] != eo[i];
    CHECK(any_diff);
}

namespace {

template <typename T>
void check_step_matches_forward(const ModelConfig& cfg, int64_t batch, int64_t t_len,
                                double margin) {
    Model<T> m(cfg);
    CounterRng rng = CounterRng::for_path(31, "tokens");
    std::vector<int32_t> tokens(static_cast<size_t>(batch * t_len));
    for (auto& t : tokens) t = static_cast<int32_t>(rng.below(static_cast<uint64_t>(cfg.vocab_size)));

    Tape<T> tape(false);
    std::vector<PamState<T>> s_out;
    auto fwd = m.forward(tape, tokens, batch, t_len, nullptr, &s_out);
    const Tensor<T>& logits = tape.val(fwd.logits);

    auto states = m.initial_states(batch);
    double worst = 0.0;
    for (int64_t t = 0; t < t_len; ++t) {
        std::vector<int32_t> step_tokens(static_cast<size_t>(batch));
        for (int64_t b = 0; b < batch; ++b) {
            step_tokens[static_cast<size_t>(b)] = tokens[static_cast<size_t>(b * t_len + t)];
        }
        Tensor<T> lt = m.step(states, step_tokens);
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t v = 0; v < cfg.vocab_size; ++v) {
                const double par = logits[(b * t_len + t) * cfg.vocab_size + v];
                const double rec = lt[b * cfg.vocab_size + v];
                worst = std::max(worst, std::abs(par - rec));
            }
        }
    }
    INFO("worst logit gap " << worst);
    CHECK(worst < margin);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const auto& sp = s_out[static_cast<size_t>(l)];
        const auto& sr = states[static_cast<size_t>(l)];
        CHECK(sr.pos == t_len);
        CHECK(sp.pos == t_len);
        double sw = 0.0;
        for (int64_t i = 0; i < sp.s.numel(); ++i) {
            sw = std::max(sw, std::abs(static_cast<double>(sp.s[i]) - sr.s[i]));
        }
        CHECK(sw < margin);
    }
}

}  // namespace

TEST_CASE("token-at-a-time stepping matches the windowed forward") {
    SECTION("complex, small") {
        ModelConfig c;
        c.dim = 12;
        c.n_layers = 2;
        c.n_heads = 2;
        c.head_dim = 3;
        c.vocab_size = 32;
        c.expansion = 2;
        c.seed = 5;
        check_step_matches_forward<double>(c, 2, 12, 1e-8);
    }
    SECTION("complex, single token") {
        ModelConfig c;
        c.dim = 12;
        c.n_layers = 2;
        c.n_heads = 2;
        c.head_dim = 3;
        c.vocab_size = 32;
        c.expansion = 2;
        c.seed = 6;
        check_step_matches_forward<double>(c, 1, 1, 1e-10);
    }
    SECTION("real ablation") {
        ModelConfig c;
        c.dim = 12;
        c.n_layers = 2;
        c.n_heads = 2;
        c.head_dim = 4;
        c.vocab_size = 32;
        c.expansion = 2;
        c.arith = Arith::real_valued;
        c.seed = 7;
        check_step_matches_forward<double>(c, 2, 12, 1e-8);
    }
    SECTION("desk configuration, short window") {
        ModelConfig c;  // defaults
        check_step_matches_forward<double>(c, 1, 8, 1e-8);
    }
}

TEST_CASE("out-of-range tokens are rejected with their position") {
    Model<double> m(tiny_complex());
    Tape<double> tape(false);
    CHECK_THROWS_WITH(m.forward(tape, {0, 99}, 1, 2),
                      Catch::Matchers::ContainsSubstring("position 1") &&
                          Catch::Matchers::ContainsSubstring("99"));
    auto states = m.initial_states(1);
    CHECK_THROWS_AS(m.step(states, {-1}), std::out_of_range);
}

TEST_CASE("config validation") {
    ModelConfig c;
    c.dim = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    ModelConfig r;
    r.arith = Arith::real_valued;
    r.head_dim = 3;
    CHECK_THROWS_AS(r.validate(), std::invalid_argument);
    CHECK(arith_from_name("complex") == Arith::complex_valued);
    CHECK(arith_from_name("real") == Arith::real_valued);
    CHECK_THROWS_AS(arith_from_name("quaternion"), std::invalid_argument);
}

TEST_CASE("config json round trip") {
    ModelConfig c = tiny_complex();
    c.arith = Arith::real_valued;
    ModelConfig back = config_from_json(config_to_json(c));
    CHECK(back.dim == c.dim);
    CHECK(back.n_layers == c.n_layers);
    CHECK(back.n_heads == c.n_heads);
    CHECK(back.head_dim == c.head_dim);
    CHECK(back.vocab_size == c.vocab_size);
    CHECK(back.expansion == c.expansion);
    CHECK(back.arith == c.arith);
    CHECK(back.seed == c.seed);
}

TEST_CASE("checkpoint round trip is bit exact") {
    Model<float> m(tiny_complex());
    Tensor<float> mom = Tensor<float>::zeros({4});
    for (int64_t i = 0; i < 4; ++i) mom[i] = 0.25f * static_cast<float>(i) - 0.1f;
    std::vector<std::pair<std::string, Tensor<float>>> extra{{"opt.m.embed", mom},
                                                             {"opt.v.embed", mom.clone()}};

    TempFile f("pam-ckpt-roundtrip");
    save_checkpoint(f.str(), m.cfg, m.store, 123, extra);
    LoadedCheckpoint ck = load_checkpoint(f.str());

    CHECK(ck.step == 123);
    CHECK(ck.cfg.dim == m.cfg.dim);
    CHECK(ck.cfg.arith == m.cfg.arith);
    CHECK(ck.cfg.seed == m.cfg.seed);
    REQUIRE(static_cast<int64_t>(ck.tensors.size()) == m.store.size() + 2);

    for (int64_t i = 0; i < m.store.size(); ++i) {
        const Tensor<float>* t = ck.find(m.store[i].name);
        REQUIRE(t != nullptr);
        REQUIRE(t->shape == m.store[i].value.shape);
        CHECK(std::memcmp(t->data(), m.store[i].value.data(),
                          sizeof(float) * static_cast<size_t>(t->numel())) == 0);
    }
    const Tensor<float>* om = ck.find("opt.m.embed");
    REQUIRE(om != nullptr);
    CHECK(std::memcmp(om->data(), mom.data(), sizeof(float) * 4) == 0);

    SECTION("rebuilt model carries identical parameters") {
        Model<float> back = model_from_checkpoint(ck);
        REQUIRE(back.store.size() == m.store.size());
        for (int64_t i = 0; i < m.store.size(); ++i) {
            CHECK(back.store[i].name == m.store[i].name);
            CHECK(std::memcmp(back.store[i].value.data(), m.store[i].value.data(),
                              sizeof(float) * static_cast<size_t>(m.store[i].value.numel())) == 0);
        }
    }
    SECTION("save-load-save produces an identical file") {
        TempFile f2("pam-ckpt-resave");
        Model<float> back = model_from_checkpoint(ck);
        std::vector<std::pair<std::string, Tensor<float>>> extra2;
        extra2.emplace_back("opt.m.embed", *ck.find("opt.m.embed"));
        extra2.emplace_back("opt.v.embed", *ck.find("opt.v.embed"));
        save_checkpoint(f2.str(), back.cfg, back.store, ck.step, extra2);
        CHECK(slurp(f.str()) == slurp(f2.str()));
    }
}

TEST_CASE("checkpoint loading rejects damage and mismatches") {
    Model<float> m(tiny_complex());
    TempFile f("pam-ckpt-damage");
    save_checkpoint(f.str(), m.cfg, m.store, 7);

    SECTION("missing file") {
        CHECK_THROWS_WITH(load_checkpoint("/nonexistent/nowhere.ckpt"),
                          Catch::Matchers::ContainsSubstring("cannot open"));
    }
    SECTION("bad magic") {
        auto bytes = slurp(f.str());
        bytes[0] = 'X';
        std::ofstream out(f.str(), std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.close();
        CHECK_THROWS_WITH(load_checkpoint(f.str()),
                          Catch::Matchers::ContainsSubstring("bad magic"));
    }
    SECTION("truncated data") {
        auto bytes = slurp(f.str());
        std::ofstream out(f.str(), std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
        out.close();
        CHECK_THROWS_WITH(load_checkpoint(f.str()),
                          Catch::Matchers::ContainsSubstring("truncated"));
    }
    SECTION("missing parameter when the target model is deeper") {
        LoadedCheckpoint ck = load_checkpoint(f.str());
        ModelConfig deeper = m.cfg;
        deeper.n_layers = 3;
        Model<float> target(deeper);
        CHECK_THROWS_WITH(fill_model_params(target, ck),
                          Catch::Matchers::ContainsSubstring("missing parameter blocks.2"));
    }
    SECTION("shape mismatch names the parameter") {
        LoadedCheckpoint ck = load_checkpoint(f.str());
        ModelConfig wider = m.cfg;
        wider.dim = 12;
        wider.head_dim = 3;
        Model<float> target(wider);
        CHECK_THROWS_WITH(fill_model_params(target, ck),
                          Catch::Matchers::ContainsSubstring("shape mismatch") &&
                              Catch::Matchers::ContainsSubstring("embed"));
    }
}
