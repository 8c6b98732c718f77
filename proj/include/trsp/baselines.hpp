#pragma once

#include <cstdint>
#include <vector>

#include "trsp/data.hpp"
#include "trsp/model.hpp"

namespace trsp {

enum class SelectionStrategy { SimilarityRank, LossImpact, Random };

/// ShortGPT-style: rank layers by mean input/output cosine similarity on
/// calibration data; the n most similar layers (most redundant) form the
/// prune set, ordered by descending similarity.
std::vector<std::size_t> similarity_rank_selection(ModelState& state, const CalibrationSet& calib,
                                                   std::size_t n);

/// SLEB-style: n greedy iterations, each masking the layer whose
/// individual removal yields the smallest calibration LM loss.
std::vector<std::size_t> loss_impact_selection(ModelState& state, const CalibrationSet& calib,
                                               std::size_t n);

/// Uniform n-subset of {0..l-1} without replacement, seed-reproducible.
std::vector<std::size_t> random_selection(std::size_t l, std::size_t n, std::uint64_t seed);

std::vector<std::size_t> select_layers(SelectionStrategy kind, ModelState& state,
                                       const CalibrationSet& calib, std::size_t n,
                                       std::uint64_t seed);

}  // namespace trsp
