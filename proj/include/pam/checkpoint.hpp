#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pam/model.hpp"
#include "pam/tensor.hpp"

namespace pam {

inline constexpr char kCheckpointMagic[8] = {'P', 'A', 'M', 'C', 'K', 'P', 'T', '1'};

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"dim", c.dim},
                          {"n_layers", c.n_layers},
                          {"n_heads", c.n_heads},
                          {"head_dim", c.head_dim},
                          {"vocab_size", c.vocab_size},
                          {"expansion", c.expansion},
                          {"arith", arith_name(c.arith)},
                          {"seed", c.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.dim = j.value("dim", c.dim);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.expansion = j.value("expansion", c.expansion);
    if (j.contains("arith")) c.arith = arith_from_name(j.at("arith").get<std::string>());
    c.seed = j.value("seed", c.seed);
    return c;
}

/// Sectioned binary container: 8 magic bytes, a little-endian u64 header
/// length, a UTF-8 JSON header (config, step, seed, parameter manifest with
/// names/shapes/offsets), then raw little-endian f32 buffers in manifest
/// order. `extra` carries non-model tensors (optimizer moments) under their
/// own names so a resume is bit-exact.
inline void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                            const ParamStore<float>& store, int64_t step,
                            const std::vector<std::pair<std::string, Tensor<float>>>& extra = {}) {
    nlohmann::json manifest = nlohmann::json::array();
    int64_t offset = 0;
    auto add_entry = [&](const std::string& name, const Tensor<float>& t) {
        manifest.push_back({{"name", name},
                            {"shape", t.shape},
                            {"offset", offset},
                            {"size", t.numel()}});
        offset += t.numel() * static_cast<int64_t>(sizeof(float));
    };
    for (int64_t i = 0; i < store.size(); ++i) add_entry(store[i].name, store[i].value);
    for (const auto& [name, t] : extra) add_entry(name, t);

    nlohmann::json header{{"config", config_to_json(cfg)},
                          {"step", step},
                          {"seed", cfg.seed},
                          {"params", std::move(manifest)}};
    const std::string htext = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    out.write(kCheckpointMagic, 8);
    const uint64_t hlen = htext.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    auto write_tensor = [&](const Tensor<float>& t) {
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(float)));
    };
    for (int64_t i = 0; i < store.size(); ++i) write_tensor(store[i].value);
    for (const auto& [name, t] : extra) {
        (void)name;
        write_tensor(t);
    }
    out.flush();
    if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

struct LoadedCheckpoint {
    ModelConfig cfg;
    int64_t step = 0;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;

    const Tensor<float>* find(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) return &t;
        }
        return nullptr;
    }
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    if (!in || hlen > (1ull << 30)) throw std::runtime_error("checkpoint: bad header length");
    std::string htext(hlen, '\0');
    in.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw std::runtime_error("checkpoint: truncated header in " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(htext);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint: header parse error in " + path + ": " + e.what());
    }
    LoadedCheckpoint ck;
    ck.cfg = config_from_json(header.at("config"));
    ck.step = header.value("step", int64_t{0});
    for (const auto& entry : header.at("params")) {
        const std::string name = entry.at("name").get<std::string>();
        const std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
        const int64_t size = entry.at("size").get<int64_t>();
        Tensor<float> t = Tensor<float>::zeros(shape);
        if (t.numel() != size) {
            throw std::runtime_error("checkpoint: manifest size mismatch for " + name);
        }
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(size * static_cast<int64_t>(sizeof(float))));
        if (!in) throw std::runtime_error("checkpoint: truncated data for " + name);
        ck.tensors.emplace_back(name, std::move(t));
    }
    return ck;
}

/// Overwrites a fresh model's parameters with the checkpoint's, strictly by
/// name and shape. Extra checkpoint entries (optimizer state) are ignored.
template <typename T>
void fill_model_params(Model<T>& model, const LoadedCheckpoint& ck) {
    for (int64_t i = 0; i < model.store.size(); ++i) {
        auto& p = model.store[i];
        const Tensor<float>* src = ck.find(p.name);
        if (!src) throw std::runtime_error("checkpoint: missing parameter " + p.name);
        if (src->shape != p.value.shape) {
            throw std::runtime_error("checkpoint: shape mismatch for " + p.name + ": file " +
                                     shape_string(src->shape) + " vs model " +
                                     shape_string(p.value.shape));
        }
        for (int64_t j = 0; j < src->numel(); ++j) {
            p.value[j] = static_cast<T>((*src)[j]);
        }
    }
}

inline Model<float> model_from_checkpoint(const LoadedCheckpoint& ck) {
    Model<float> m(ck.cfg);
    fill_model_params(m, ck);
    return m;
}

}  // namespace pam
