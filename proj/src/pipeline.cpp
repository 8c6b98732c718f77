#include "trsp/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "trsp/eval.hpp"

namespace trsp {

using nlohmann::json;

void Stage1Config::validate() const {
    if (lambda1 < 0.0) throw ConfigError("stage1: lambda1 must be non-negative");
    if (steps < 1) throw ConfigError("stage1: steps must be >= 1");
    if (lr <= 0.0) throw ConfigError("stage1: lr must be positive");
    if (batch_size < 1) throw ConfigError("stage1: batch_size must be >= 1");
}

void Stage2Config::validate() const {
    if (lambda2 < 0.0) throw ConfigError("stage2: lambda2 must be non-negative");
    if (steps < 1) throw ConfigError("stage2: steps must be >= 1");
    if (lr <= 0.0) throw ConfigError("stage2: lr must be positive");
    if (batch_size < 1) throw ConfigError("stage2: batch_size must be >= 1");
}

namespace {

/// Cyclic minibatch over calibration sequences; deterministic by step.
TokenBatch calibration_batch(const CalibrationSet& calib, std::size_t step,
                             std::size_t batch_size, std::vector<std::size_t>& targets) {
    const std::size_t seq = calib.seq_len - 1;  // next-token shift
    TokenBatch b;
    b.batch = batch_size;
    b.seq = seq;
    b.tokens.resize(batch_size * seq);
    targets.resize(batch_size * seq);
    for (std::size_t i = 0; i < batch_size; ++i) {
        const auto row = calib.sequence((step * batch_size + i) % calib.n_sequences);
        for (std::size_t s = 0; s < seq; ++s) {
            b.tokens[i * seq + s] = row[s];
            targets[i * seq + s] = row[s + 1];
        }
    }
    return b;
}

std::vector<double> gates_by_original(const ModelState& state) {
    std::size_t max_orig = 0;
    for (std::size_t o : state.layer_origin) max_orig = std::max(max_orig, o);
    std::vector<double> out(max_orig + 1, 0.0);
    for (std::size_t pos = 0; pos < state.n_layers(); ++pos) {
        out[state.layer_origin[pos]] = state.gates.value[pos];
    }
    return out;
}

void zero_all_grads(ModelState& state) {
    for (Parameter* p : state.parameters()) p->zero_grad();
}

}  // namespace

std::vector<double> learn_layer_weights(ModelState& state, const CalibrationSet& calib,
                                        const Stage1Config& cfg) {
    cfg.validate();
    if (calib.n_sequences == 0) throw DataError("stage1: calibration set is empty");
    if (calib.seq_len < 2) throw DataError("stage1: calibration sequences too short");

    std::vector<std::size_t> active_positions;
    for (std::size_t pos = 0; pos < state.n_layers(); ++pos) {
        if (!state.is_masked(state.layer_origin[pos])) active_positions.push_back(pos);
    }
    if (active_positions.empty()) throw InvariantError("stage1: all layers are masked");

    if (cfg.reinit_gates) {
        for (std::size_t pos : active_positions) state.gates.value[pos] = 1.0;
    }

    std::vector<Parameter*> params;
    if (cfg.joint_weights) {
        params = state.parameters();
    } else {
        params = {&state.gates};
    }
    Adam opt(params, {.lr = cfg.lr, .beta1 = cfg.beta1, .beta2 = cfg.beta2, .eps = cfg.adam_eps});

    std::vector<double> losses;
    losses.reserve(cfg.steps);
    std::vector<std::size_t> targets;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        TokenBatch batch = calibration_batch(calib, step, cfg.batch_size, targets);
        Tape tape;
        ForwardGraph g = forward_graph(tape, state, batch);
        Tape::NodeId ce = tape.cross_entropy(g.logits, targets);
        Tape::NodeId penalty = tape.l1_subset(tape.leaf(state.gates), active_positions);
        Tape::NodeId loss = tape.add(ce, tape.scale(penalty, cfg.lambda1));
        losses.push_back(tape.value(loss)[0]);
        tape.backward(loss);
        opt.step();
        zero_all_grads(state);  // drop grads of params outside the optimizer
    }
    return losses;
}

std::size_t select_min_gate(const std::vector<double>& gates, const std::set<std::size_t>& mask_set,
                            bool by_magnitude) {
    bool found = false;
    std::size_t best = 0;
    double best_key = 0.0;
    for (std::size_t i = 0; i < gates.size(); ++i) {
        if (mask_set.count(i)) continue;
        const double key = by_magnitude ? std::abs(gates[i]) : gates[i];
        if (!found || key < best_key) {
            found = true;
            best = i;
            best_key = key;
        }
    }
    if (!found) throw InvariantError("select_min_gate: no unmasked layer");
    return best;
}

std::size_t select_min_gate(const ModelState& state, bool by_magnitude) {
    return select_min_gate(gates_by_original(state), state.mask_set, by_magnitude);
}

namespace {

void check_selection_count(const ModelState& state, std::size_t n) {
    const std::size_t unmasked = state.unmasked_original_indices().size();
    if (n < 1 || n >= unmasked) {
        throw ConfigError("selection: n must satisfy 1 <= n < number of unmasked layers");
    }
}

}  // namespace

PruneSelection iterative_selection(ModelState& state, const CalibrationSet& calib, std::size_t n,
                                   const Stage1Config& cfg) {
    check_selection_count(state, n);
    PruneSelection sel;
    for (std::size_t it = 0; it < n; ++it) {
        learn_layer_weights(state, calib, cfg);
        SelectionRecord rec;
        rec.iteration = it;
        rec.gates_by_original = gates_by_original(state);
        rec.chosen_original_index = select_min_gate(state, cfg.select_by_magnitude);
        rec.gate_value = rec.gates_by_original[rec.chosen_original_index];
        mask_layer(state, rec.chosen_original_index);
        sel.indices.push_back(rec.chosen_original_index);
        sel.history.push_back(std::move(rec));
    }
    return sel;
}

PruneSelection one_shot_selection(ModelState& state, const CalibrationSet& calib, std::size_t n,
                                  const Stage1Config& cfg) {
    check_selection_count(state, n);
    learn_layer_weights(state, calib, cfg);

    const std::vector<double> gates = gates_by_original(state);
    std::vector<std::size_t> candidates = state.unmasked_original_indices();
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](std::size_t a, std::size_t b) {
                         const double ka = cfg.select_by_magnitude ? std::abs(gates[a]) : gates[a];
                         const double kb = cfg.select_by_magnitude ? std::abs(gates[b]) : gates[b];
                         if (ka != kb) return ka < kb;
                         return a < b;
                     });

    PruneSelection sel;
    for (std::size_t it = 0; it < n; ++it) {
        const std::size_t idx = candidates[it];
        SelectionRecord rec;
        rec.iteration = it;
        rec.gates_by_original = gates;
        rec.chosen_original_index = idx;
        rec.gate_value = gates[idx];
        mask_layer(state, idx);
        sel.indices.push_back(idx);
        sel.history.push_back(std::move(rec));
    }
    return sel;
}

std::size_t max_consecutive_run(std::vector<std::size_t> indices) {
    if (indices.empty()) return 0;
    std::sort(indices.begin(), indices.end());
    std::size_t best = 1;
    std::size_t run = 1;
    for (std::size_t i = 1; i < indices.size(); ++i) {
        run = (indices[i] == indices[i - 1] + 1) ? run + 1 : 1;
        best = std::max(best, run);
    }
    return best;
}

namespace {

Tape::NodeId stage2_loss(Tape& tape, ModelState& state, const TokenBatch& batch,
                         const std::vector<std::size_t>& targets,
                         const std::vector<std::size_t>& prune_positions, Norm norm,
                         double lambda2, Tape::NodeId* penalty_out) {
    ForwardOptions opts;
    opts.trace = true;
    ForwardGraph g = forward_graph(tape, state, batch, opts);
    Tape::NodeId ce = tape.cross_entropy(g.logits, targets);
    // The penalty targets the post-gate stream: removing the layer replaces
    // stream_out with layer_in, so that is the gap knowledge transfer must
    // close.
    Tape::NodeId penalty = Tape::kInvalid;
    for (std::size_t pos : prune_positions) {
        Tape::NodeId term =
            tape.norm_penalty(tape.sub(g.stream_out[pos], g.layer_in[pos]), norm);
        penalty = penalty == Tape::kInvalid ? term : tape.add(penalty, term);
    }
    *penalty_out = penalty;
    return tape.add(ce, tape.scale(penalty, lambda2));
}

std::vector<std::size_t> prune_positions_of(const ModelState& state,
                                            const std::vector<std::size_t>& prune_set) {
    std::vector<std::size_t> positions;
    for (std::size_t orig : prune_set) {
        auto pos = state.position_of(orig);
        if (!pos) throw InvariantError("stage2: prune-set index not present in model");
        positions.push_back(*pos);
    }
    return positions;
}

}  // namespace

std::vector<double> stage2_regularize(ModelState& state, const std::vector<std::size_t>& prune_set,
                                      const CalibrationSet& calib, const Stage2Config& cfg) {
    cfg.validate();
    if (prune_set.empty()) throw ConfigError("stage2: empty prune set");
    // Layers in P must execute so X_out - X_in is defined.
    state.mask_set.clear();
    const std::vector<std::size_t> positions = prune_positions_of(state, prune_set);

    Adam opt(state.parameters(),
             {.lr = cfg.lr, .beta1 = cfg.beta1, .beta2 = cfg.beta2, .eps = cfg.adam_eps});
    std::vector<double> penalties;
    penalties.reserve(cfg.steps);
    std::vector<std::size_t> targets;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        TokenBatch batch = calibration_batch(calib, step, cfg.batch_size, targets);
        Tape tape;
        Tape::NodeId penalty = Tape::kInvalid;
        Tape::NodeId loss = stage2_loss(tape, state, batch, targets, positions, cfg.norm,
                                        cfg.lambda2, &penalty);
        penalties.push_back(tape.value(penalty)[0]);
        tape.backward(loss);
        opt.step();
    }
    return penalties;
}

double stage2_penalty_value(ModelState& state, const std::vector<std::size_t>& prune_set,
                            const CalibrationSet& calib, Norm norm) {
    if (prune_set.empty()) throw ConfigError("stage2: empty prune set");
    const std::vector<std::size_t> positions = prune_positions_of(state, prune_set);
    double total = 0.0;
    for (std::size_t i = 0; i < calib.n_sequences; ++i) {
        const auto row = calib.sequence(i);
        TokenBatch batch;
        batch.batch = 1;
        batch.seq = calib.seq_len;
        batch.tokens.assign(row.begin(), row.end());
        Tape tape;
        ForwardOptions opts;
        opts.trace = true;
        ForwardGraph g = forward_graph(tape, state, batch, opts);
        for (std::size_t pos : positions) {
            total += tape.value(
                tape.norm_penalty(tape.sub(g.stream_out[pos], g.layer_in[pos]), norm))[0];
        }
    }
    return total / static_cast<double>(calib.n_sequences);
}

std::size_t prune_count(double ratio, std::size_t n_layers) {
    if (ratio <= 0.0 || ratio >= 1.0) throw ConfigError("pruning ratio must be in (0, 1)");
    const std::size_t n = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n_layers)));
    if (n < 1) throw ConfigError("pruning ratio rounds to zero layers");
    if (n >= n_layers) throw ConfigError("pruning ratio rounds to all layers");
    return n;
}

TrspResult run_trsp(const ModelState& dense, const Corpus& corpus, const RunSettings& settings,
                    const Stage1Config& s1, const Stage2Config& s2) {
    const std::size_t n = prune_count(settings.ratio, dense.n_layers());
    CalibrationSet calib = sample_calibration(corpus, settings.calib_sequences,
                                              settings.calib_len,
                                              Rng::derive(settings.seed, "trsp-calib"));

    TrspResult result;
    result.report.settings = settings;

    ModelState working = dense;
    result.report.ppl_before =
        perplexity(working, corpus.test(), settings.eval_seq_len);

    PruneSelection sel = settings.mode == SelectionMode::Iterative
                             ? iterative_selection(working, calib, n, s1)
                             : one_shot_selection(working, calib, n, s1);
    result.report.prune_set = sel.indices;
    result.report.history = std::move(sel.history);

    working.mask_set.clear();
    SimilarityTrace before = cosine_similarity_trace(working, calib);
    result.report.sim_before = before.by_layer;
    result.report.warning_zero_norm_vectors += before.zero_norm_count;

    if (settings.regularize) {
        result.report.penalty_trajectory =
            stage2_regularize(working, result.report.prune_set, calib, s2);
    }
    SimilarityTrace after = cosine_similarity_trace(working, calib);
    result.report.sim_after = after.by_layer;
    result.report.warning_zero_norm_vectors += after.zero_norm_count;

    result.pruned = prune(working, result.report.prune_set);
    result.report.ppl_after =
        perplexity(result.pruned, corpus.test(), settings.eval_seq_len);
    return result;
}

std::string TrspReport::to_json() const {
    json j;
    j["prune_set"] = prune_set;
    j["ppl_before"] = ppl_before;
    j["ppl_after"] = ppl_after;
    j["penalty_trajectory"] = penalty_trajectory;
    json hist = json::array();
    for (const SelectionRecord& r : history) {
        hist.push_back({{"iteration", r.iteration},
                        {"chosen", r.chosen_original_index},
                        {"gate_value", r.gate_value},
                        {"gates", r.gates_by_original}});
    }
    j["history"] = hist;
    json sb = json::object();
    for (const auto& [layer, sim] : sim_before) sb[std::to_string(layer)] = sim;
    j["sim_before"] = sb;
    json sa = json::object();
    for (const auto& [layer, sim] : sim_after) sa[std::to_string(layer)] = sim;
    j["sim_after"] = sa;
    j["zero_norm_warnings"] = warning_zero_norm_vectors;
    j["settings"] = {{"ratio", settings.ratio},
                     {"mode", settings.mode == SelectionMode::Iterative ? "iterative" : "one_shot"},
                     {"regularize", settings.regularize},
                     {"calib_sequences", settings.calib_sequences},
                     {"calib_len", settings.calib_len},
                     {"eval_seq_len", settings.eval_seq_len},
                     {"seed", settings.seed}};
    return j.dump(2);
}

}  // namespace trsp
