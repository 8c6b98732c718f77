// trsp: pretrain, prune, evaluate, benchmark and compare small decoder
// models with two-stage regularized layer pruning.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "trsp/baselines.hpp"
#include "trsp/config.hpp"
#include "trsp/eval.hpp"
#include "trsp/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace trsp;

namespace {

struct CliArgs {
    std::string checkpoint;    // input model
    std::string baseline_ckpt; // second model for eval deltas
};

std::string args_to_json(const CliArgs& a) {
    json j;
    j["checkpoint"] = a.checkpoint;
    j["baseline_checkpoint"] = a.baseline_ckpt;
    return j.dump();
}

CliArgs args_from_json(const json& j) {
    CliArgs a;
    a.checkpoint = j.value("checkpoint", "");
    a.baseline_ckpt = j.value("baseline_checkpoint", "");
    return a;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write file: " + path.string());
    os << text;
}

std::uint64_t fnv1a_tokens(std::span<const std::size_t> tokens) {
    std::uint64_t h = 14695981039346656037ull;
    for (std::size_t t : tokens) {
        for (int b = 0; b < 8; ++b) {
            h ^= (t >> (8 * b)) & 0xff;
            h *= 1099511628211ull;
        }
    }
    return h;
}

ModelState load_model(const std::string& path) {
    if (path.empty()) throw ConfigError("missing required checkpoint path (--checkpoint)");
    if (!fs::exists(path)) throw DataError("checkpoint not found: " + path);
    return load_checkpoint(path);
}

Corpus load_checked_corpus(const RunConfig& cfg, const ModelState& model) {
    Corpus corpus = load_configured_corpus(cfg);
    if (corpus.tokenizer.vocab_size() != model.config.vocab) {
        throw DataError("corpus vocabulary (" + std::to_string(corpus.tokenizer.vocab_size()) +
                        ") does not match checkpoint vocabulary (" +
                        std::to_string(model.config.vocab) + ")");
    }
    return corpus;
}

std::string similarity_csv(const std::map<std::size_t, double>& before,
                           const std::map<std::size_t, double>& after) {
    std::ostringstream os;
    os << "layer,before,after\n";
    for (const auto& [layer, sim] : before) {
        os << layer << "," << sim << ",";
        const auto it = after.find(layer);
        if (it != after.end()) os << it->second;
        os << "\n";
    }
    return os.str();
}

/// Baseline counterpart of run_trsp: identical calibration sample and
/// evaluation protocol, only the selection rule differs.
TrspResult run_baseline(const ModelState& dense, const Corpus& corpus,
                        const RunSettings& settings, SelectionStrategy strategy) {
    const std::size_t n = prune_count(settings.ratio, dense.n_layers());
    CalibrationSet calib = sample_calibration(corpus, settings.calib_sequences,
                                              settings.calib_len,
                                              Rng::derive(settings.seed, "trsp-calib"));
    TrspResult result;
    result.report.settings = settings;
    ModelState working = dense;
    result.report.ppl_before = perplexity(working, corpus.test(), settings.eval_seq_len);
    result.report.prune_set = select_layers(strategy, working, calib, n, settings.seed);
    result.pruned = prune(working, result.report.prune_set);
    result.report.ppl_after = perplexity(result.pruned, corpus.test(), settings.eval_seq_len);
    return result;
}

SelectionStrategy parse_strategy(const std::string& name) {
    if (name == "similarity") return SelectionStrategy::SimilarityRank;
    if (name == "loss-impact") return SelectionStrategy::LossImpact;
    if (name == "random") return SelectionStrategy::Random;
    throw ConfigError("unknown strategy: " + name);
}

int cmd_pretrain(const RunConfig& cfg, const CliArgs& args) {
    Corpus corpus = load_configured_corpus(cfg);
    ModelState model = ModelState::init(cfg.model_config(corpus.tokenizer.vocab_size()), cfg.seed);
    PretrainConfig pc = cfg.pretrain;
    pc.seed = Rng::derive(cfg.seed, "pretrain");
    std::vector<LossCurvePoint> curve = pretrain(model, corpus.train(), corpus.val(), pc);

    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    save_checkpoint(model, out / "dense.ckpt");

    std::ostringstream csv;
    csv << "step,train_loss,val_loss\n";
    for (const LossCurvePoint& p : curve) {
        csv << p.step << "," << p.train_loss << "," << p.val_loss << "\n";
    }
    write_text(out / "loss_curve.csv", csv.str());

    const double val_ppl = std::exp(mean_nll(model, corpus.val(), pc.seq_len));
    json results;
    results["checkpoint"] = (out / "dense.ckpt").string();
    results["final_val_ppl"] = val_ppl;
    results["steps_run"] = curve.empty() ? 0 : curve.back().step;
    write_manifest(out / "pretrain_manifest.json", "pretrain", cfg, args_to_json(args),
                   results.dump());
    std::cout << "final validation ppl: " << val_ppl << "\n";
    return 0;
}

int cmd_prune(const RunConfig& cfg, const CliArgs& args) {
    ModelState dense = load_model(args.checkpoint);
    Corpus corpus = load_checked_corpus(cfg, dense);
    const RunSettings settings = cfg.run_settings();

    TrspResult result = cfg.strategy == "trsp"
                            ? run_trsp(dense, corpus, settings, cfg.stage1, cfg.stage2)
                            : run_baseline(dense, corpus, settings,
                                           parse_strategy(cfg.strategy));

    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    save_checkpoint(result.pruned, out / "pruned.ckpt");
    write_text(out / "prune_report.json", result.report.to_json() + "\n");
    if (cfg.strategy == "trsp") {
        write_text(out / "similarity_trace.csv",
                   similarity_csv(result.report.sim_before, result.report.sim_after));
    }

    json results;
    results["strategy"] = cfg.strategy;
    results["prune_set"] = result.report.prune_set;
    results["layers_pruned"] = result.report.prune_set.size();
    results["ppl_before"] = result.report.ppl_before;
    results["ppl_after"] = result.report.ppl_after;
    results["checkpoint"] = (out / "pruned.ckpt").string();
    write_manifest(out / "prune_manifest.json", "prune", cfg, args_to_json(args),
                   results.dump());

    std::cout << "pruned layers:";
    for (std::size_t layer : result.report.prune_set) std::cout << " " << layer;
    std::cout << "\nppl before: " << result.report.ppl_before
              << "\nppl after:  " << result.report.ppl_after << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const CliArgs& args) {
    ModelState model = load_model(args.checkpoint);
    Corpus corpus = load_checked_corpus(cfg, model);

    EvalReport report;
    report.ppl = perplexity(model, corpus.test(), cfg.eval_seq_len);
    report.config_echo = cfg.to_json();
    std::cout << "ppl: " << report.ppl << "\n";

    json results;
    results["ppl"] = report.ppl;
    if (!args.baseline_ckpt.empty()) {
        ModelState base = load_model(args.baseline_ckpt);
        if (base.config.vocab != model.config.vocab) {
            throw DataError("baseline checkpoint vocabulary differs from --checkpoint");
        }
        const double base_ppl = perplexity(base, corpus.test(), cfg.eval_seq_len);
        const double delta = report.ppl - base_ppl;
        results["baseline_ppl"] = base_ppl;
        results["ppl_delta"] = delta;
        std::cout << "baseline ppl: " << base_ppl << "\nppl delta: " << std::showpos << delta
                  << std::noshowpos << "\n";
    }

    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    write_text(out / "eval_report.json", report.to_json() + "\n");
    write_manifest(out / "eval_manifest.json", "eval", cfg, args_to_json(args), results.dump());
    return 0;
}

int cmd_bench(const RunConfig& cfg, const CliArgs& args) {
    ModelState model = load_model(args.checkpoint);
    BenchmarkResult bench =
        benchmark(model, cfg.bench_batch, cfg.bench_gen_len, cfg.bench_prompt_len,
                  cfg.bench_repeats, Rng::derive(cfg.seed, "benchmark"));

    json results;
    results["tokens_per_second"] = bench.tokens_per_second;
    results["latency_ms"] = bench.latency_ms;
    results["repeats"] = bench.repeats;
    results["throughput_samples"] = bench.throughput_samples;
    results["latency_samples"] = bench.latency_samples;

    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    write_text(out / "bench_report.json", results.dump(2) + "\n");
    write_manifest(out / "bench_manifest.json", "bench", cfg, args_to_json(args),
                   results.dump());
    std::cout << "tokens/s: " << bench.tokens_per_second
              << "\nprompt latency: " << bench.latency_ms << " ms\n";
    return 0;
}

int cmd_grid(const RunConfig& cfg, const CliArgs& args) {
    ModelState dense = load_model(args.checkpoint);
    Corpus corpus = load_checked_corpus(cfg, dense);
    GridResult grid = lambda_grid(dense, corpus, cfg.lambda1_list, cfg.lambda2_list,
                                  cfg.run_settings(), cfg.stage1, cfg.stage2);

    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    write_text(out / "grid.csv", grid.to_csv());

    json results;
    results["lambda1"] = grid.lambda1s;
    results["lambda2"] = grid.lambda2s;
    results["ppl"] = grid.ppl;
    write_manifest(out / "grid_manifest.json", "grid", cfg, args_to_json(args), results.dump());
    std::cout << grid.to_csv();
    return 0;
}

int cmd_compare(const RunConfig& cfg, const CliArgs& args) {
    ModelState dense = load_model(args.checkpoint);
    Corpus corpus = load_checked_corpus(cfg, dense);
    const RunSettings settings = cfg.run_settings();
    const std::uint64_t split_hash = fnv1a_tokens(corpus.test());

    struct Row {
        std::string name;
        std::vector<std::size_t> prune_set;
        double ppl = 0.0;
        double tokens_per_second = 0.0;
    };
    std::vector<Row> rows;
    auto add_row = [&](const std::string& name, TrspResult r) {
        BenchmarkResult bench = benchmark(r.pruned, cfg.bench_batch, cfg.bench_gen_len,
                                          cfg.bench_prompt_len, cfg.bench_repeats,
                                          Rng::derive(cfg.seed, "benchmark"));
        rows.push_back({name, r.report.prune_set, r.report.ppl_after, bench.tokens_per_second});
    };
    add_row("trsp", run_trsp(dense, corpus, settings, cfg.stage1, cfg.stage2));
    add_row("similarity", run_baseline(dense, corpus, settings, SelectionStrategy::SimilarityRank));
    add_row("loss-impact", run_baseline(dense, corpus, settings, SelectionStrategy::LossImpact));
    add_row("random", run_baseline(dense, corpus, settings, SelectionStrategy::Random));
    std::stable_sort(rows.begin(), rows.end(),
                     [](const Row& a, const Row& b) { return a.ppl < b.ppl; });

    json results;
    results["eval_split_hash"] = split_hash;
    json table = json::array();
    std::cout << std::left << std::setw(14) << "strategy" << std::setw(12) << "ppl"
              << std::setw(14) << "tokens/s" << "prune set\n";
    for (const Row& row : rows) {
        std::ostringstream set;
        for (std::size_t i = 0; i < row.prune_set.size(); ++i) {
            set << (i ? " " : "") << row.prune_set[i];
        }
        std::cout << std::left << std::setw(14) << row.name << std::setw(12) << row.ppl
                  << std::setw(14) << row.tokens_per_second << set.str() << "\n";
        table.push_back({{"strategy", row.name},
                         {"prune_set", row.prune_set},
                         {"ppl", row.ppl},
                         {"tokens_per_second", row.tokens_per_second},
                         {"eval_split_hash", split_hash}});
    }
    results["table"] = table;

    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    write_text(out / "compare_report.json", results.dump(2) + "\n");
    write_manifest(out / "compare_manifest.json", "compare", cfg, args_to_json(args),
                   results.dump());
    return 0;
}

int cmd_diagnose(const RunConfig& cfg, const CliArgs& args) {
    ModelState model = load_model(args.checkpoint);
    Corpus corpus = load_checked_corpus(cfg, model);
    CalibrationSet calib = sample_calibration(corpus, cfg.calib_sequences, cfg.calib_len,
                                              Rng::derive(cfg.seed, "trsp-calib"));
    SimilarityTrace trace = cosine_similarity_trace(model, calib);

    std::ostringstream csv;
    csv << "layer,cosine,gate,masked\n";
    for (std::size_t pos = 0; pos < model.n_layers(); ++pos) {
        const std::size_t orig = model.layer_origin[pos];
        csv << orig << ",";
        if (!model.is_masked(orig)) csv << trace.by_layer.at(orig);
        csv << "," << model.gates.value[pos] << "," << (model.is_masked(orig) ? 1 : 0) << "\n";
    }

    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    write_text(out / "diagnostics.csv", csv.str());

    json results;
    results["n_layers"] = model.n_layers();
    results["layer_origin"] = model.layer_origin;
    results["masked"] = std::vector<std::size_t>(model.mask_set.begin(), model.mask_set.end());
    results["zero_norm_warnings"] = trace.zero_norm_count;
    json sims = json::object();
    for (const auto& [layer, sim] : trace.by_layer) sims[std::to_string(layer)] = sim;
    results["cosine"] = sims;
    write_manifest(out / "diagnose_manifest.json", "diagnose", cfg, args_to_json(args),
                   results.dump());
    std::cout << csv.str();
    return 0;
}

int dispatch(const std::string& command, const RunConfig& cfg, const CliArgs& args) {
    cfg.validate();
    if (command == "pretrain") return cmd_pretrain(cfg, args);
    if (command == "prune") return cmd_prune(cfg, args);
    if (command == "eval") return cmd_eval(cfg, args);
    if (command == "bench") return cmd_bench(cfg, args);
    if (command == "grid") return cmd_grid(cfg, args);
    if (command == "compare") return cmd_compare(cfg, args);
    if (command == "diagnose") return cmd_diagnose(cfg, args);
    throw ConfigError("unknown command: " + command);
}

int replay_manifest(const std::string& path, const std::string& out_override) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open manifest: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    json m;
    try {
        m = json::parse(ss.str());
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad manifest JSON: ") + e.what());
    }
    RunConfig cfg = RunConfig::from_json_text(m.at("config").dump());
    if (!out_override.empty()) cfg.out_dir = out_override;
    return dispatch(m.at("command").get<std::string>(), cfg, args_from_json(m.value("args", json::object())));
}

int run(int argc, char** argv) {
    CLI::App app{"layer pruning toolkit for small decoder language models"};
    app.require_subcommand(0, 1);

    std::string config_path;
    std::string manifest_path;
    std::string out_dir;
    std::string seed_str;
    app.add_option("--config", config_path, "INI config file");
    app.add_option("--manifest", manifest_path, "replay a previously written manifest");
    app.add_option("--out", out_dir, "output directory (overrides config)");
    app.add_option("--seed", seed_str, "root seed (overrides config)");

    CliArgs args;
    std::string ratio_str;
    std::string mode;
    std::string strategy;
    bool no_stage2 = false;

    CLI::App* p_pre = app.add_subcommand("pretrain", "train the dense baseline model");
    CLI::App* p_prune = app.add_subcommand("prune", "select, regularize and remove layers");
    CLI::App* p_eval = app.add_subcommand("eval", "perplexity on the test split");
    CLI::App* p_bench = app.add_subcommand("bench", "throughput and latency benchmark");
    CLI::App* p_grid = app.add_subcommand("grid", "lambda1 x lambda2 perplexity grid");
    CLI::App* p_cmp = app.add_subcommand("compare", "TRSP vs baselines on identical data");
    CLI::App* p_diag = app.add_subcommand("diagnose", "per-layer similarity and gate dump");
    for (CLI::App* sub : {p_prune, p_eval, p_bench, p_grid, p_cmp, p_diag}) {
        sub->add_option("--checkpoint", args.checkpoint, "input model checkpoint");
    }
    p_eval->add_option("--baseline", args.baseline_ckpt, "second checkpoint for the PPL delta");
    p_prune->add_option("--ratio", ratio_str, "fraction of layers to remove");
    p_prune->add_option("--mode", mode, "iterative or one_shot");
    p_prune->add_option("--strategy", strategy, "trsp, similarity, loss-impact or random");
    p_prune->add_flag("--no-stage2", no_stage2, "skip second-stage regularization");
    (void)p_pre;

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (!manifest_path.empty()) {
        if (app.get_subcommands().size() > 0) {
            throw ConfigError("--manifest replaces the subcommand; give one or the other");
        }
        return replay_manifest(manifest_path, out_dir);
    }
    if (app.get_subcommands().empty()) {
        std::cout << app.help();
        return 2;
    }

    RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::from_ini_file(config_path);
    // flags win over the config file
    if (!seed_str.empty()) cfg.set("global", "seed", seed_str);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (!ratio_str.empty()) cfg.set("run", "ratio", ratio_str);
    if (!mode.empty()) cfg.set("run", "mode", mode);
    if (!strategy.empty()) cfg.set("run", "strategy", strategy);
    if (no_stage2) cfg.regularize = false;

    return dispatch(app.get_subcommands()[0]->get_name(), cfg, args);
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const InvariantError& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
