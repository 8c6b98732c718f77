#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "trsp/data.hpp"
#include "trsp/model.hpp"
#include "trsp/pipeline.hpp"

namespace trsp {

/// Effective configuration for a CLI command: Table-9-style training
/// defaults plus model/data/run settings. Parsed from an INI-style file
/// ([section] + key = value, '#' comments), then overridden by flags;
/// unknown sections or keys are rejected.
struct RunConfig {
    // [model]
    std::size_t n_layers = 8;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t ff_dim = 256;
    std::size_t max_seq = 128;
    double layernorm_eps = 1e-5;
    bool gate_full_stream = true;
    std::string tokenizer = "char";  // "char" or "byte"

    // [data]
    std::string corpus_path;          // empty -> deterministic synthetic corpus
    std::size_t synthetic_chars = 1 << 20;
    double train_frac = 0.90;
    double val_frac = 0.05;
    double test_frac = 0.05;

    // [pretrain]
    PretrainConfig pretrain;

    // [stage1] / [stage2]
    Stage1Config stage1;
    Stage2Config stage2;

    // [run]
    double ratio = 0.25;
    std::string mode = "iterative";  // or "one_shot"
    bool regularize = true;
    std::size_t calib_sequences = 32;
    std::size_t calib_len = 128;
    std::size_t eval_seq_len = 64;
    std::string strategy = "trsp";   // trsp | similarity | loss-impact | random

    // [bench]
    std::size_t bench_batch = 8;
    std::size_t bench_gen_len = 32;
    std::size_t bench_prompt_len = 64;
    std::size_t bench_repeats = 5;

    // [grid]
    std::vector<double> lambda1_list{5e-3};
    std::vector<double> lambda2_list{1e-3};

    // global flags
    std::uint64_t seed = 0;
    std::string out_dir = "out";

    static RunConfig from_ini_file(const std::filesystem::path& path);
    /// Load the effective config embedded in a previously written manifest.
    static RunConfig from_manifest(const std::filesystem::path& path);

    /// Apply one "section.key" assignment; throws ConfigError if unknown.
    void set(const std::string& section, const std::string& key, const std::string& value);

    void validate() const;

    ModelConfig model_config(std::size_t vocab) const;
    RunSettings run_settings() const;
    TokenizerMode tokenizer_mode() const;

    std::string to_json() const;
    static RunConfig from_json_text(const std::string& text);
};

/// Load the configured corpus (file or synthetic).
Corpus load_configured_corpus(const RunConfig& cfg);

/// Write a manifest: command name, effective config, command arguments
/// (file paths etc., enough to replay), and result payload.
void write_manifest(const std::filesystem::path& path, const std::string& command,
                    const RunConfig& cfg, const std::string& args_json,
                    const std::string& results_json);

}  // namespace trsp
