#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "trsp/data.hpp"
#include "trsp/model.hpp"

namespace trsp {

struct Stage1Config {
    double lambda1 = 5e-3;
    std::size_t steps = 200;      // optimization steps per outer iteration
    double lr = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 8;
    bool joint_weights = true;    // update model weights together with gates
    bool reinit_gates = false;    // reset surviving gates to 1 each iteration
    bool select_by_magnitude = true;  // false: raw signed gate values

    void validate() const;
};

struct Stage2Config {
    double lambda2 = 1e-3;
    Norm norm = Norm::L2;
    std::size_t steps = 500;
    double lr = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 8;

    void validate() const;
};

enum class SelectionMode { Iterative, OneShot };

struct SelectionRecord {
    std::size_t iteration = 0;
    /// Gate value per ORIGINAL layer index at the moment of choice
    /// (masked layers report their inert carried value).
    std::vector<double> gates_by_original;
    std::size_t chosen_original_index = 0;
    double gate_value = 0.0;
};

/// Ordered prune set with per-iteration provenance.
struct PruneSelection {
    std::vector<std::size_t> indices;  // original indices, selection order
    std::vector<SelectionRecord> history;
};

/// One pass of gate learning: minimizes LM loss + lambda1 * sum |S[i]|
/// over unmasked layers for cfg.steps steps. Returns the total loss per
/// step. Masked layers' gates (and weights) are untouched.
/// Minibatches cycle through the calibration set in fixed order, so the
/// pass is fully deterministic for a given state and config.
std::vector<double> learn_layer_weights(ModelState& state, const CalibrationSet& calib,
                                        const Stage1Config& cfg);

/// Unmasked layer with the smallest gate (|gate| by default); ties break
/// to the lowest original index. gates are indexed by original layer id.
std::size_t select_min_gate(const std::vector<double>& gates_by_original,
                            const std::set<std::size_t>& mask_set,
                            bool by_magnitude = true);
std::size_t select_min_gate(const ModelState& state, bool by_magnitude = true);

/// Greedy loop: learn gates, mask the minimum, repeat n times. Leaves the
/// chosen layers masked in `state`.
PruneSelection iterative_selection(ModelState& state, const CalibrationSet& calib,
                                   std::size_t n, const Stage1Config& cfg);

/// Single learning pass; the n smallest gates form the prune set
/// (ascending gate order). Leaves the chosen layers masked.
PruneSelection one_shot_selection(ModelState& state, const CalibrationSet& calib,
                                  std::size_t n, const Stage1Config& cfg);

/// Longest run of adjacent original indices within the prune set.
std::size_t max_consecutive_run(std::vector<std::size_t> indices);

/// Second-stage regularization: clears the mask set, then minimizes
/// LM loss + lambda2 * sum over P of ||X_out - X_in|| (per-position
/// vectors averaged) over all model parameters, where X_out is the
/// post-gate stream a structural removal would replace with X_in.
/// Returns the penalty value per step (index 0 is the pre-update value
/// of step 1).
std::vector<double> stage2_regularize(ModelState& state, const std::vector<std::size_t>& prune_set,
                                      const CalibrationSet& calib, const Stage2Config& cfg);

/// Eq.-style penalty evaluated without updating anything (diagnostics).
double stage2_penalty_value(ModelState& state, const std::vector<std::size_t>& prune_set,
                            const CalibrationSet& calib, Norm norm);

struct RunSettings {
    double ratio = 0.25;
    SelectionMode mode = SelectionMode::Iterative;
    bool regularize = true;
    std::size_t calib_sequences = 32;
    std::size_t calib_len = 128;
    std::size_t eval_seq_len = 64;
    std::uint64_t seed = 0;
};

struct TrspReport {
    std::vector<std::size_t> prune_set;
    std::vector<SelectionRecord> history;
    double ppl_before = 0.0;
    double ppl_after = 0.0;
    std::vector<double> penalty_trajectory;
    /// Mean input/output cosine per original layer index, measured with
    /// masks cleared, before and after stage 2.
    std::map<std::size_t, double> sim_before;
    std::map<std::size_t, double> sim_after;
    std::size_t warning_zero_norm_vectors = 0;
    RunSettings settings;
    std::string to_json() const;
};

struct TrspResult {
    ModelState pruned;
    TrspReport report;
};

/// Full Algorithm-1 pipeline: sample calibration, select, optionally
/// regularize, prune, evaluate.
TrspResult run_trsp(const ModelState& dense, const Corpus& corpus, const RunSettings& settings,
                    const Stage1Config& s1, const Stage2Config& s2);

/// round(ratio * l) with the degenerate-zero guard.
std::size_t prune_count(double ratio, std::size_t n_layers);

}  // namespace trsp
