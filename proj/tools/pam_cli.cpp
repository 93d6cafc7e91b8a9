#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "pam/analysis.hpp"
#include "pam/checkpoint.hpp"
#include "pam/model.hpp"
#include "pam/sample.hpp"
#include "pam/train.hpp"
#include "pam/verify.hpp"

using json = nlohmann::json;
using namespace pam;

namespace {

struct RunConfig {
    std::string arch = "pam";
    ModelConfig model;
    TrainConfig train;
    SamplerConfig sampler;

    std::string config_path;
    std::string corpus;
    std::string checkpoint;
    std::string out_dir = "run";
    std::string resume;
    std::string match_params;
    std::string prompt = "In 1923, the University of";
    std::string input;
    std::string output;
    std::string pairs;
    std::string space = "loss";
    std::string precision = "f64";

    double val_fraction = 0.1;
    double example_p = 0.0;
    double floor_anchor = 1.69;
    double d_eff = 0.0;  // 0 = skip the floor line
    int64_t stream_tokens = 512;
    int64_t checkpoint_every = 0;  // 0 = epoch boundaries only
    int64_t sample_every = 0;      // 0 = no generation log
    uint64_t seed = 42;
    int threads = 1;
    bool inject_fault = false;
    bool bits = false;
};

ModelConfig model_config(const RunConfig& rc) {
    ModelConfig mc = rc.model;
    mc.arith = rc.arch == "sam" ? Arith::real_valued : Arith::complex_valued;
    mc.seed = rc.seed;
    mc.validate();
    return mc;
}

json model_json(const ModelConfig& mc) { return config_to_json(mc); }

json effective_config(const RunConfig& rc) {
    json j;
    j["arch"] = rc.arch;
    j["dim"] = rc.model.dim;
    j["layers"] = rc.model.n_layers;
    j["heads"] = rc.model.n_heads;
    j["head_dim"] = rc.model.head_dim;
    j["vocab"] = rc.model.vocab_size;
    j["expansion"] = rc.model.expansion;
    j["lr"] = rc.train.lr;
    j["weight_decay"] = rc.train.weight_decay;
    j["warmup"] = rc.train.warmup_steps;
    j["batch"] = rc.train.batch;
    j["seq_len"] = rc.train.seq_len;
    j["epochs"] = rc.train.epochs;
    j["max_steps"] = rc.train.max_steps;
    j["grad_clip"] = rc.train.grad_clip;
    j["val_fraction"] = rc.val_fraction;
    j["seed"] = rc.seed;
    j["threads"] = rc.threads;
    return j;
}

/// File layer of the precedence chain: defaults < file < flags. Keys mirror
/// the long flag names; anything unrecognized is an error, not a warning.
void apply_config_file(RunConfig& rc, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config file: cannot open: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error("config file: " + std::string(e.what()));
    }
    for (const auto& [key, val] : j.items()) {
        if (key == "arch") rc.arch = val.get<std::string>();
        else if (key == "dim") rc.model.dim = val.get<int64_t>();
        else if (key == "layers") rc.model.n_layers = val.get<int64_t>();
        else if (key == "heads") rc.model.n_heads = val.get<int64_t>();
        else if (key == "head_dim") rc.model.head_dim = val.get<int64_t>();
        else if (key == "vocab") rc.model.vocab_size = val.get<int64_t>();
        else if (key == "expansion") rc.model.expansion = val.get<int64_t>();
        else if (key == "lr") rc.train.lr = val.get<double>();
        else if (key == "weight_decay") rc.train.weight_decay = val.get<double>();
        else if (key == "warmup") rc.train.warmup_steps = val.get<int64_t>();
        else if (key == "batch") rc.train.batch = val.get<int64_t>();
        else if (key == "seq_len") rc.train.seq_len = val.get<int64_t>();
        else if (key == "epochs") rc.train.epochs = val.get<int64_t>();
        else if (key == "max_steps") rc.train.max_steps = val.get<int64_t>();
        else if (key == "grad_clip") rc.train.grad_clip = val.get<double>();
        else if (key == "val_fraction") rc.val_fraction = val.get<double>();
        else if (key == "temperature") rc.sampler.temperature = val.get<double>();
        else if (key == "top_k") rc.sampler.top_k = val.get<int64_t>();
        else if (key == "top_p") rc.sampler.top_p = val.get<double>();
        else if (key == "rep_penalty") rc.sampler.repetition_penalty = val.get<double>();
        else if (key == "max_new") rc.sampler.max_new_tokens = val.get<int64_t>();
        else if (key == "greedy") rc.sampler.greedy = val.get<bool>();
        else if (key == "sample_every") rc.sample_every = val.get<int64_t>();
        else if (key == "corpus") rc.corpus = val.get<std::string>();
        else if (key == "out_dir") rc.out_dir = val.get<std::string>();
        else if (key == "seed") rc.seed = val.get<uint64_t>();
        else if (key == "threads") rc.threads = val.get<int>();
        else throw std::runtime_error("config file: unknown key '" + key + "'");
    }
}

void add_model_flags(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--arch", rc.arch, "Arithmetic: pam (complex) or sam (real)")
        ->check(CLI::IsMember({"pam", "sam"}))
        ->capture_default_str();
    cmd->add_option("--dim", rc.model.dim, "Residual width D")->capture_default_str();
    cmd->add_option("--layers", rc.model.n_layers, "Mixing blocks")->capture_default_str();
    cmd->add_option("--heads", rc.model.n_heads, "Memory banks per block")->capture_default_str();
    cmd->add_option("--head-dim", rc.model.head_dim, "Matrix-state side d")
        ->capture_default_str();
    cmd->add_option("--vocab", rc.model.vocab_size, "Vocabulary size")->capture_default_str();
    cmd->add_option("--expansion", rc.model.expansion, "Channel-mixing expansion factor")
        ->capture_default_str();
}

void add_common_flags(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--config", rc.config_path, "JSON config file (defaults < file < flags)");
    cmd->add_option("--seed", rc.seed, "Seed for all randomness; embedded in every artifact")
        ->capture_default_str();
    cmd->add_option("--threads", rc.threads, "Worker threads (1 keeps runs bit-reproducible)")
        ->capture_default_str();
}

void add_train_flags(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--lr", rc.train.lr, "Peak learning rate")->capture_default_str();
    cmd->add_option("--weight-decay", rc.train.weight_decay, "Decoupled weight decay")
        ->capture_default_str();
    cmd->add_option("--warmup", rc.train.warmup_steps, "Linear warmup steps")
        ->capture_default_str();
    cmd->add_option("--batch", rc.train.batch, "Windows per step")->capture_default_str();
    cmd->add_option("--seq-len", rc.train.seq_len, "Tokens per window")->capture_default_str();
    cmd->add_option("--epochs", rc.train.epochs, "Passes over the training split")
        ->capture_default_str();
    cmd->add_option("--max-steps", rc.train.max_steps, "Stop after this many steps (-1 = all)")
        ->capture_default_str();
    cmd->add_option("--grad-clip", rc.train.grad_clip, "Global gradient-norm ceiling")
        ->capture_default_str();
    cmd->add_option("--val-fraction", rc.val_fraction, "Tail fraction held out for validation")
        ->capture_default_str();
}

void add_sampler_flags(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--temperature", rc.sampler.temperature, "Softmax temperature")
        ->capture_default_str();
    cmd->add_option("--top-k", rc.sampler.top_k, "Keep this many highest logits")
        ->capture_default_str();
    cmd->add_option("--top-p", rc.sampler.top_p, "Nucleus mass")->capture_default_str();
    cmd->add_option("--rep-penalty", rc.sampler.repetition_penalty,
                    "Penalty on already-seen tokens")
        ->capture_default_str();
    cmd->add_option("--max-new", rc.sampler.max_new_tokens, "Tokens to generate")
        ->capture_default_str();
    cmd->add_flag("--greedy", rc.sampler.greedy, "Always take the argmax");
}

double elapsed_s(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<int32_t> prompt_to_ids(const std::string& prompt, int64_t vocab) {
    std::vector<int32_t> ids;
    for (unsigned char c : prompt) {
        if (static_cast<int64_t>(c) >= vocab) {
            throw std::runtime_error("prompt byte " + std::to_string(int(c)) +
                                     " outside vocab " + std::to_string(vocab));
        }
        ids.push_back(static_cast<int32_t>(c));
    }
    return ids;
}

std::string ids_to_text(const std::vector<int32_t>& ids) {
    std::string text;
    for (int32_t t : ids) text.push_back(static_cast<char>(static_cast<unsigned char>(t & 0xff)));
    return text;
}

// ---- train ----

int cmd_train(RunConfig& rc) {
    if (rc.corpus.empty()) throw std::runtime_error("train: --corpus is required");
    const Corpus corpus = load_corpus(rc.corpus, rc.val_fraction);

    ModelConfig mc = model_config(rc);

    if (!rc.match_params.empty()) {
        if (rc.arch != "sam") {
            throw std::runtime_error("train: --match-params only applies with --arch sam");
        }
        std::ifstream in(rc.match_params);
        if (!in) throw std::runtime_error("train: cannot open " + rc.match_params);
        json j = json::parse(in);
        if (j.contains("config")) j = j["config"];  // accept a checkpoint header too
        const ModelConfig pam_cfg = config_from_json(j);
        const SamMatch match = match_sam_config(pam_cfg);
        const double off = 100.0 * std::abs(static_cast<double>(match.params - match.target)) /
                           static_cast<double>(match.target);
        std::printf("matching %lld complex params: dim %lld heads %lld -> %lld real params (%.3f%% off)\n",
                    static_cast<long long>(match.target), static_cast<long long>(match.config.dim),
                    static_cast<long long>(match.config.n_heads),
                    static_cast<long long>(match.params), off);
        if (!match.within_tol) {
            throw std::runtime_error("train: no real config within 2% of the target count");
        }
        mc = match.config;
        mc.seed = rc.seed;
        rc.model = mc;
    }

    TrainConfig tc = rc.train;
    tc.seed = rc.seed;

    std::unique_ptr<Model<float>> model;
    LoadedCheckpoint ck;
    if (!rc.resume.empty()) {
        ck = load_checkpoint(rc.resume);
        model = std::make_unique<Model<float>>(ck.cfg);
    } else {
        model = std::make_unique<Model<float>>(mc);
    }

    Trainer<float> trainer(*model, corpus, tc);
    if (!rc.resume.empty()) trainer.restore(ck);

    std::filesystem::create_directories(rc.out_dir);
    {
        // Round-trips into --match-params and `match-sam --input`.
        std::ofstream cfg_out(rc.out_dir + "/config.json");
        cfg_out << model_json(model->cfg).dump(2) << "\n";
    }
    MetricsWriter metrics(rc.out_dir + "/metrics.csv",
                          {"seed: " + std::to_string(rc.seed),
                           "config: " + effective_config(rc).dump()});

    std::ofstream samples;
    std::vector<int32_t> sample_prompt;
    if (rc.sample_every > 0) {
        sample_prompt = prompt_to_ids(rc.prompt, model->cfg.vocab_size);
        samples.open(rc.out_dir + "/samples.txt", std::ios::app);
        const json sj{{"temperature", rc.sampler.temperature},
                      {"top_k", rc.sampler.top_k},
                      {"top_p", rc.sampler.top_p},
                      {"rep_penalty", rc.sampler.repetition_penalty},
                      {"max_new", rc.sampler.max_new_tokens},
                      {"greedy", rc.sampler.greedy}};
        samples << "# seed: " << rc.seed << "  sampler: " << sj.dump() << "\n";
    }

    std::printf("%s %lld params, %lld steps (%lld/epoch), corpus %lld train / %lld val tokens\n",
                rc.arch.c_str(), static_cast<long long>(model->store.scalar_count()),
                static_cast<long long>(trainer.total_steps()),
                static_cast<long long>(trainer.steps_per_epoch()),
                static_cast<long long>(corpus.train_size()),
                static_cast<long long>(corpus.val_size()));

    const auto t0 = std::chrono::steady_clock::now();
    while (trainer.step() < trainer.total_steps()) {
        const double loss = trainer.train_step();
        metrics.row(trainer.step(), "train", loss, std::exp(loss), trainer.last_lr(),
                    trainer.last_grad_norm(), trainer.tokens_seen(), elapsed_s(t0));
        if (trainer.at_mid_epoch() || trainer.at_epoch_end()) {
            const auto [vl, vp] = trainer.evaluate();
            metrics.row(trainer.step(), "val", vl, vp, trainer.last_lr(), 0.0,
                        trainer.tokens_seen(), elapsed_s(t0));
            std::printf("step %lld  train %.4f  val %.4f (ppl %.2f)  %.1fs\n",
                        static_cast<long long>(trainer.step()), loss, vl, vp, elapsed_s(t0));
        }
        const bool periodic =
            rc.checkpoint_every > 0 && trainer.step() % rc.checkpoint_every == 0;
        if (trainer.at_epoch_end() || periodic) {
            trainer.save(rc.out_dir + "/step-" + std::to_string(trainer.step()) + ".ckpt");
        }
        if (samples.is_open() && trainer.step() % rc.sample_every == 0) {
            SamplerConfig sc = rc.sampler;
            sc.seed = rc.seed + static_cast<uint64_t>(trainer.step());
            const std::string text = ids_to_text(generate(*model, sample_prompt, sc));
            samples << "## step " << trainer.step() << "\n" << rc.prompt << text << "\n";
            samples.flush();
        }
    }
    trainer.save(rc.out_dir + "/final.ckpt");
    std::printf("done: %lld steps, %lld tokens, %.1fs; final checkpoint %s/final.ckpt\n",
                static_cast<long long>(trainer.step()),
                static_cast<long long>(trainer.tokens_seen()), elapsed_s(t0),
                rc.out_dir.c_str());
    return 0;
}

// ---- eval ----

int cmd_eval(RunConfig& rc) {
    if (rc.checkpoint.empty()) throw std::runtime_error("eval: --checkpoint is required");
    if (rc.corpus.empty()) throw std::runtime_error("eval: --corpus is required");
    const LoadedCheckpoint ck = load_checkpoint(rc.checkpoint);
    Model<float> model = model_from_checkpoint(ck);
    const Corpus corpus = load_corpus(rc.corpus, rc.val_fraction);
    TrainConfig tc = rc.train;
    tc.seed = rc.seed;
    Trainer<float> trainer(model, corpus, tc);
    const auto [loss, ppl] = trainer.evaluate();
    std::printf("val loss %.6f nats, ppl %.4f  (checkpoint step %lld, seed %llu)\n", loss, ppl,
                static_cast<long long>(ck.step),
                static_cast<unsigned long long>(model.cfg.seed));
    return 0;
}

// ---- generate ----

int cmd_generate(RunConfig& rc) {
    if (rc.checkpoint.empty()) throw std::runtime_error("generate: --checkpoint is required");
    const LoadedCheckpoint ck = load_checkpoint(rc.checkpoint);
    Model<float> model = model_from_checkpoint(ck);
    if (rc.prompt.empty()) throw std::runtime_error("generate: --prompt must be nonempty");

    const std::vector<int32_t> prompt_ids = prompt_to_ids(rc.prompt, model.cfg.vocab_size);
    SamplerConfig sc = rc.sampler;
    sc.seed = rc.seed;
    const std::vector<int32_t> out = generate(model, prompt_ids, sc);
    std::printf("%s%s\n", rc.prompt.c_str(), ids_to_text(out).c_str());
    if (out.size() >= 4) {
        const RepetitionMetrics m = repetition_metrics(out);
        std::printf("rep3=%.3f rep4=%.3f unique=%.3f  (%zu tokens, seed %llu)\n", m.rep3, m.rep4,
                    m.unique_ratio, out.size(), static_cast<unsigned long long>(rc.seed));
    } else {
        std::printf("rep3=n/a rep4=n/a unique=n/a  (%zu tokens, seed %llu)\n", out.size(),
                    static_cast<unsigned long long>(rc.seed));
    }
    return 0;
}

// ---- verify ----

void print_result(const PropertyResult& r) {
    std::printf("[%s] %-24s measured %.3e  tol %.0e  (%s)\n", r.pass ? "PASS" : "FAIL",
                r.name.c_str(), r.measured, r.tolerance, r.detail.c_str());
}

int cmd_verify(RunConfig& rc) {
    const bool f64 = rc.precision == "f64";
    g_inject_decay_fault = rc.inject_fault;
    std::printf("property suite, %s%s\n", rc.precision.c_str(),
                rc.inject_fault ? ", decay fault injected" : "");

    ModelConfig desk;  // D 64, 4 blocks, 2 banks of d 16, byte vocab
    desk.seed = rc.seed;
    ModelConfig desk_sam = desk;
    desk_sam.arith = Arith::real_valued;

    std::vector<PropertyResult> results;
    const std::vector<int64_t> lens = {1, 7, 32};
    if (f64) {
        results.push_back(dual_form_pam_property<double>(10, lens, 1e-10));
        results.push_back(dual_form_sam_property<double>(10, lens, 1e-10));
        results.push_back(model_equivalence_property<double>(desk, 2, lens, 1e-8));
        results.push_back(model_equivalence_property<double>(desk_sam, 2, lens, 1e-8));
        results.push_back(phase_preservation_property<double>(10000, 1e-5));
        results.push_back(retrieval_property<double>(1e-6));
    } else {
        results.push_back(dual_form_pam_property<float>(10, lens, 1e-3));
        results.push_back(dual_form_sam_property<float>(10, lens, 1e-3));
        results.push_back(model_equivalence_property<float>(desk, 2, lens, 1e-2));
        results.push_back(model_equivalence_property<float>(desk_sam, 2, lens, 1e-2));
        results.push_back(phase_preservation_property<float>(10000, 1e-2));
        results.push_back(retrieval_property<float>(1e-3));
    }
    g_inject_decay_fault = false;

    // Finite differences and the entropy identities always run in 64-bit.
    results.push_back(gradient_property(1e-4, Arith::complex_valued));
    results.push_back(gradient_property(1e-4, Arith::real_valued));
    for (const PropertyResult& r : entropy_properties()) results.push_back(r);

    bool all = true;
    for (const PropertyResult& r : results) {
        print_result(r);
        all = all && r.pass;
    }
    std::printf("%s\n", all ? "all properties hold" : "PROPERTY FAILURES");
    return all ? 0 : 1;
}

// ---- analyze ----

int cmd_analyze_decoherence(RunConfig& rc) {
    const DensityMatrix d = example_state(rc.example_p);
    const double h = shannon_diag(d), s = von_neumann(d), gap = decoherence_gap(d);
    std::printf("H = %.4f\n", h);
    std::printf("S_VN = %.4f\n", s);
    std::printf("gap = %.4f\n", gap);
    if (rc.bits) {
        std::printf("H_bits = %.4f, S_VN_bits = %.4f, gap_bits = %.4f\n", nats_to_bits(h),
                    nats_to_bits(s), nats_to_bits(gap));
    }
    if (rc.d_eff > 0.0) {
        std::printf("floor(%.2f nats, d_eff %.1f) = %.4f\n", rc.floor_anchor, rc.d_eff,
                    floor_bound(rc.floor_anchor, rc.d_eff));
    }
    return 0;
}

int cmd_analyze_scaling(RunConfig& rc) {
    if (rc.input.empty()) throw std::runtime_error("analyze scaling: --input is required");
    const std::vector<ScalingPoint> pts = parse_scaling_csv(rc.input);

    std::vector<std::string> labels;
    for (const ScalingPoint& p : pts) {
        if (std::find(labels.begin(), labels.end(), p.label) == labels.end()) {
            labels.push_back(p.label);
        }
    }

    json report;
    report["seed"] = rc.seed;
    report["space"] = rc.space;
    report["fits"] = json::array();
    std::vector<FitResult> fits;
    for (const std::string& label : labels) {
        std::vector<ScalingPoint> group;
        for (const ScalingPoint& p : pts) {
            if (p.label == label) group.push_back(p);
        }
        if (group.size() < 2) {
            throw std::runtime_error("analyze scaling: label '" + label +
                                     "' has fewer than 2 points");
        }
        const FitResult fit = fit_power_law(group, rc.space);
        json jf;
        jf["label"] = label;
        jf["n_points"] = group.size();
        jf["slope"] = fit.slope;
        jf["intercept"] = fit.intercept;
        jf["residual_se"] = fit.residual_se;
        jf["sigma_log10"] = fit.sigma_log10;
        report["fits"].push_back(jf);
        fits.push_back(fit);
    }
    if (fits.size() >= 2) {
        const Crossover c = fit_crossover(fits[0], fits[1]);
        json jc;
        jc["between"] = {labels[0], labels[1]};
        jc["parallel"] = c.parallel;
        if (!c.parallel) {
            jc["log10_params"] = c.log10_params;
            jc["params"] = c.params;
            jc["metric"] = c.metric;
        }
        report["crossover"] = jc;
    }

    std::printf("%s\n", report.dump(2).c_str());
    if (!rc.output.empty()) {
        std::ofstream out(rc.output);
        if (!out) throw std::runtime_error("analyze scaling: cannot write " + rc.output);
        out << report.dump(2) << "\n";
    }
    return 0;
}

int cmd_analyze_phase(RunConfig& rc) {
    if (rc.checkpoint.empty()) throw std::runtime_error("analyze phase: --checkpoint is required");
    if (rc.pairs.empty()) throw std::runtime_error("analyze phase: --pairs is required");
    const LoadedCheckpoint ck = load_checkpoint(rc.checkpoint);
    const Tensor<float>* embed = ck.find("embed");
    if (!embed) throw std::runtime_error("analyze phase: checkpoint has no embedding table");
    if (embed->rank() != 3 || embed->dim(-1) != 2) {
        throw std::runtime_error("analyze phase: embeddings are not complex (real model?)");
    }
    Tensor<double> e = Tensor<double>::zeros(embed->shape);
    for (int64_t i = 0; i < e.numel(); ++i) e[i] = static_cast<double>((*embed)[i]);

    std::vector<PairRecord> records = parse_pair_file(rc.pairs);
    const std::vector<LabelStats> stats = phase_coherence(e, records);

    const std::string out_path = rc.output.empty() ? "phase.csv" : rc.output;
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("analyze phase: cannot write " + out_path);
    out << "# seed: " << ck.cfg.seed << "\n";
    out << "# checkpoint step: " << ck.step << "\n";
    write_pair_csv(out, records);

    for (const LabelStats& s : stats) {
        std::printf("label=%s pairs=%lld skipped=%lld mean_phase=%.4f mean_coherence=%.4f\n",
                    s.label.c_str(), static_cast<long long>(s.pairs),
                    static_cast<long long>(s.skipped), s.mean_phase, s.mean_coherence);
    }
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
}

int cmd_analyze_state_rank(RunConfig& rc) {
    std::unique_ptr<Model<float>> model;
    uint64_t seed = rc.seed;
    if (!rc.checkpoint.empty()) {
        const LoadedCheckpoint ck = load_checkpoint(rc.checkpoint);
        model = std::make_unique<Model<float>>(model_from_checkpoint(ck));
        seed = ck.cfg.seed;
    } else {
        model = std::make_unique<Model<float>>(model_config(rc));
    }
    const ModelConfig& mc = model->cfg;

    std::vector<int32_t> stream;
    if (!rc.corpus.empty()) {
        const Corpus corpus = load_corpus(rc.corpus, rc.val_fraction);
        check(corpus.train_size() >= rc.stream_tokens, "state-rank: corpus shorter than stream");
        stream.assign(corpus.tokens.begin(), corpus.tokens.begin() + rc.stream_tokens);
    } else {
        const std::string syn = make_synthetic_corpus(rc.seed, rc.stream_tokens);
        for (char c : syn) stream.push_back(static_cast<int32_t>(static_cast<unsigned char>(c)));
    }
    for (int32_t& t : stream) t = t % static_cast<int32_t>(mc.vocab_size);

    const std::string out_path = rc.output.empty() ? "state_rank.csv" : rc.output;
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("state-rank: cannot write " + out_path);
    out << "# seed: " << seed << "\n";
    out << "position,layer,head,effective_rank\n";

    const int64_t d = mc.head_dim;
    const bool cx = mc.arith == Arith::complex_valued;
    auto states = model->initial_states(1);
    std::vector<std::vector<double>> history(
        static_cast<size_t>(mc.n_layers * mc.n_heads));  // rank trace per (layer, head)

    for (int64_t t = 0; t < rc.stream_tokens; ++t) {
        model->step(states, {stream[static_cast<size_t>(t)]});
        for (int64_t l = 0; l < mc.n_layers; ++l) {
            for (int64_t h = 0; h < mc.n_heads; ++h) {
                const int64_t per_head = cx ? d * d * 2 : d * d;
                Tensor<float> s = cx ? Tensor<float>::zeros({d, d, 2})
                                     : Tensor<float>::zeros({d, d});
                const float* src = states[static_cast<size_t>(l)].s.data() + h * per_head;
                for (int64_t i = 0; i < per_head; ++i) s[i] = src[i];
                const double r = effective_rank(s);
                history[static_cast<size_t>(l * mc.n_heads + h)].push_back(r);
                char buf[96];
                std::snprintf(buf, sizeof(buf), "%lld,%lld,%lld,%.6f\n",
                              static_cast<long long>(t), static_cast<long long>(l),
                              static_cast<long long>(h), r);
                out << buf;
            }
        }
    }

    for (int64_t l = 0; l < mc.n_layers; ++l) {
        for (int64_t h = 0; h < mc.n_heads; ++h) {
            const auto& tr = history[static_cast<size_t>(l * mc.n_heads + h)];
            const double last = tr.back();
            const int64_t tail = std::min<int64_t>(100, static_cast<int64_t>(tr.size()));
            double lo = last, hi = last;
            for (int64_t i = static_cast<int64_t>(tr.size()) - tail;
                 i < static_cast<int64_t>(tr.size()); ++i) {
                lo = std::min(lo, tr[static_cast<size_t>(i)]);
                hi = std::max(hi, tr[static_cast<size_t>(i)]);
            }
            const double var_pct = last > 0.0 ? 100.0 * (hi - lo) / last : 0.0;
            std::printf("layer %lld head %lld: rank %.3f of %lld, final-%lld variation %.2f%%\n",
                        static_cast<long long>(l), static_cast<long long>(h), last,
                        static_cast<long long>(d), static_cast<long long>(tail), var_pct);
        }
    }
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
}

// ---- sizing ----

int cmd_count_params(RunConfig& rc) {
    const ModelConfig mc = model_config(rc);
    std::printf("arch=%s dim=%lld layers=%lld heads=%lld head_dim=%lld vocab=%lld expansion=%lld "
                "params=%lld\n",
                rc.arch.c_str(), static_cast<long long>(mc.dim),
                static_cast<long long>(mc.n_layers), static_cast<long long>(mc.n_heads),
                static_cast<long long>(mc.head_dim), static_cast<long long>(mc.vocab_size),
                static_cast<long long>(mc.expansion), static_cast<long long>(count_params(mc)));
    return 0;
}

int cmd_match_sam(RunConfig& rc) {
    ModelConfig mc;
    if (!rc.input.empty()) {
        std::ifstream in(rc.input);
        if (!in) throw std::runtime_error("match-sam: cannot open " + rc.input);
        json j = json::parse(in);
        if (j.contains("config")) j = j["config"];
        mc = config_from_json(j);
    } else {
        if (rc.arch != "pam") throw std::runtime_error("match-sam: source must be --arch pam");
        mc = model_config(rc);
    }
    const SamMatch m = match_sam_config(mc);
    const double off = 100.0 * std::abs(static_cast<double>(m.params - m.target)) /
                       static_cast<double>(m.target);
    std::printf("complex: dim=%lld heads=%lld params=%lld\n", static_cast<long long>(mc.dim),
                static_cast<long long>(mc.n_heads), static_cast<long long>(m.target));
    std::printf("real:    dim=%lld heads=%lld params=%lld (%.3f%% off, %s)\n",
                static_cast<long long>(m.config.dim), static_cast<long long>(m.config.n_heads),
                static_cast<long long>(m.params), off,
                m.within_tol ? "within 2%" : "OUTSIDE 2%");
    if (!rc.output.empty()) {
        std::ofstream out(rc.output);
        if (!out) throw std::runtime_error("match-sam: cannot write " + rc.output);
        out << model_json(m.config).dump(2) << "\n";
    }
    return m.within_tol ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    RunConfig rc;

    // File layer first, so flag parsing overrides it and --help shows the
    // effective defaults.
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        try {
            if (a == "--config" && i + 1 < argc) {
                apply_config_file(rc, argv[i + 1]);
            } else if (a.rfind("--config=", 0) == 0) {
                apply_config_file(rc, a.substr(9));
            }
        } catch (const std::exception& e) {
            std::fprintf(stderr, "error: %s\n", e.what());
            return 1;
        }
    }

    CLI::App app{"Complex matrix-state sequence model workbench"};
    app.require_subcommand(1);

    CLI::App* train = app.add_subcommand("train", "Train a model and write checkpoints + metrics");
    add_common_flags(train, rc);
    add_model_flags(train, rc);
    add_train_flags(train, rc);
    train->add_option("--corpus", rc.corpus, "Training text (raw bytes or token file)");
    train->add_option("--out-dir", rc.out_dir, "Artifact directory")->capture_default_str();
    train->add_option("--resume", rc.resume, "Checkpoint to continue from");
    train->add_option("--checkpoint-every", rc.checkpoint_every,
                      "Extra checkpoint cadence in steps (0 = epoch ends only)")
        ->capture_default_str();
    train->add_option("--match-params", rc.match_params,
                      "With --arch sam: match parameter count to this complex config JSON");
    train->add_option("--sample-every", rc.sample_every,
                      "Log a generation sample to samples.txt every N steps (0 = off)")
        ->capture_default_str();
    add_sampler_flags(train, rc);
    train->add_option("--prompt", rc.prompt, "Prompt for the generation log")
        ->capture_default_str();

    CLI::App* eval = app.add_subcommand("eval", "Validation loss of a checkpoint on a corpus");
    add_common_flags(eval, rc);
    eval->add_option("--checkpoint", rc.checkpoint, "Model checkpoint");
    eval->add_option("--corpus", rc.corpus, "Evaluation text");
    eval->add_option("--batch", rc.train.batch, "Windows per forward")->capture_default_str();
    eval->add_option("--seq-len", rc.train.seq_len, "Tokens per window")->capture_default_str();
    eval->add_option("--val-fraction", rc.val_fraction, "Tail fraction used for validation")
        ->capture_default_str();

    CLI::App* gen = app.add_subcommand("generate", "Sample text from a checkpoint");
    add_common_flags(gen, rc);
    add_sampler_flags(gen, rc);
    gen->add_option("--checkpoint", rc.checkpoint, "Model checkpoint");
    gen->add_option("--prompt", rc.prompt, "Prompt text")->capture_default_str();

    CLI::App* verify = app.add_subcommand("verify", "Run the numerical property suite");
    add_common_flags(verify, rc);
    verify->add_option("--precision", rc.precision, "Arithmetic width for the checks")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();
    verify->add_flag("--inject-fault", rc.inject_fault,
                     "Perturb the decay mask to prove the equivalence check bites");

    CLI::App* analyze = app.add_subcommand("analyze", "Diagnostics and paper-style analyses");
    analyze->require_subcommand(1);

    CLI::App* rank = analyze->add_subcommand("state-rank",
                                             "Effective rank of the memory state over a stream");
    add_common_flags(rank, rc);
    add_model_flags(rank, rc);
    rank->add_option("--checkpoint", rc.checkpoint, "Model checkpoint (fresh model if omitted)");
    rank->add_option("--corpus", rc.corpus, "Token source (synthetic text if omitted)");
    rank->add_option("--tokens", rc.stream_tokens, "Stream length")->capture_default_str();
    rank->add_option("--output", rc.output, "CSV path (default state_rank.csv)");

    CLI::App* phase = analyze->add_subcommand("phase", "Embedding phase coherence on word pairs");
    add_common_flags(phase, rc);
    phase->add_option("--checkpoint", rc.checkpoint, "Model checkpoint");
    phase->add_option("--pairs", rc.pairs, "word_a<TAB>word_b<TAB>label file");
    phase->add_option("--output", rc.output, "CSV path (default phase.csv)");

    CLI::App* deco = analyze->add_subcommand("decoherence",
                                             "Entropies of the worked three-state example");
    add_common_flags(deco, rc);
    deco->add_option("--example-p", rc.example_p, "Mixing fraction toward the identity")
        ->capture_default_str();
    deco->add_flag("--bits", rc.bits, "Also print the entropies in bits");
    deco->add_option("--d-eff", rc.d_eff, "If > 0, print the floor bound for this dimension")
        ->capture_default_str();
    deco->add_option("--floor-anchor", rc.floor_anchor, "Real-valued asymptote in nats")
        ->capture_default_str();

    CLI::App* scaling = analyze->add_subcommand("scaling", "Power-law fits and crossover");
    add_common_flags(scaling, rc);
    scaling->add_option("--input", rc.input, "CSV: params,metric,std,label");
    scaling->add_option("--output", rc.output, "Write the JSON report here too");
    scaling->add_option("--space", rc.space, "Metric space of the fit")
        ->check(CLI::IsMember({"loss", "ppl"}))
        ->capture_default_str();

    CLI::App* count = app.add_subcommand("count-params", "Parameter count for a configuration");
    add_common_flags(count, rc);
    add_model_flags(count, rc);

    CLI::App* match = app.add_subcommand("match-sam",
                                         "Real config matching a complex parameter count");
    add_common_flags(match, rc);
    add_model_flags(match, rc);
    match->add_option("--input", rc.input, "Complex config JSON (flags used if omitted)");
    match->add_option("--output", rc.output, "Write the matched config JSON here");

    CLI11_PARSE(app, argc, argv);

    if (rc.threads != 1) {
        std::fprintf(stderr, "note: --threads %d requested; running single-threaded for "
                             "bit-reproducibility\n",
                     rc.threads);
        rc.threads = 1;
    }

    try {
        if (train->parsed()) return cmd_train(rc);
        if (eval->parsed()) return cmd_eval(rc);
        if (gen->parsed()) return cmd_generate(rc);
        if (verify->parsed()) return cmd_verify(rc);
        if (analyze->parsed()) {
            if (rank->parsed()) return cmd_analyze_state_rank(rc);
            if (phase->parsed()) return cmd_analyze_phase(rc);
            if (deco->parsed()) return cmd_analyze_decoherence(rc);
            if (scaling->parsed()) return cmd_analyze_scaling(rc);
        }
        if (count->parsed()) return cmd_count_params(rc);
        if (match->parsed()) return cmd_match_sam(rc);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
