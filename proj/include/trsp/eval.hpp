#pragma once

#include <map>
#include <string>
#include <vector>

#include "trsp/data.hpp"
#include "trsp/model.hpp"
#include "trsp/pipeline.hpp"

namespace trsp {

/// exp(mean next-token NLL) over windows of the token stream.
/// stride 0 means non-overlapping (stride = seq_len).
double perplexity(ModelState& state, std::span<const std::size_t> tokens,
                  std::size_t seq_len, std::size_t stride = 0);

/// Mean over all leading positions of the cosine between corresponding
/// last-axis vectors of a and b. Positions where either vector has zero
/// norm contribute 0 and bump zero_norm_count.
double mean_vector_cosine(const Tensor& a, const Tensor& b, std::size_t& zero_norm_count);

struct SimilarityTrace {
    /// Mean per-position cosine between layer input and output, keyed by
    /// ORIGINAL layer index.
    std::map<std::size_t, double> by_layer;
    /// Positions whose input or output vector had zero norm (contributed 0).
    std::size_t zero_norm_count = 0;

    double mean_over(const std::vector<std::size_t>& layers) const;
};

/// CosSim(X_in, X_out) per requested layer (original indices; empty =
/// every unmasked layer), averaged over all calibration positions.
SimilarityTrace cosine_similarity_trace(ModelState& state, const CalibrationSet& calib,
                                        const std::vector<std::size_t>& layers = {});

struct BenchmarkResult {
    double tokens_per_second = 0.0;
    double latency_ms = 0.0;
    std::size_t repeats = 0;
    std::vector<double> throughput_samples;
    std::vector<double> latency_samples;
};

/// Token generation throughput (sequential single-token decodes of
/// gen_len tokens at the given batch size) and prompt-processing latency
/// (one full-sequence forward). Median over repeats after one discarded
/// warmup run.
BenchmarkResult benchmark(ModelState& state, std::size_t batch, std::size_t gen_len,
                          std::size_t prompt_len, std::size_t repeats,
                          std::uint64_t seed = 0);

struct EvalReport {
    double ppl = 0.0;
    std::map<std::size_t, double> sim_before;
    std::map<std::size_t, double> sim_after;
    double tokens_per_second = 0.0;
    double latency_ms = 0.0;
    std::vector<std::size_t> prune_set;
    std::string config_echo;

    std::string to_json() const;
};

struct GridResult {
    std::vector<double> lambda1s;
    std::vector<double> lambda2s;
    std::vector<std::vector<double>> ppl;  // [lambda1][lambda2]

    std::string to_csv() const;
};

/// Full TRSP run per (lambda1, lambda2) cell, all cells sharing the same
/// seed and dense model.
GridResult lambda_grid(const ModelState& dense, const Corpus& corpus,
                       const std::vector<double>& lambda1s, const std::vector<double>& lambda2s,
                       const RunSettings& settings, const Stage1Config& s1_base,
                       const Stage2Config& s2_base);

}  // namespace trsp
