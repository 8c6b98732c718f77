#include "trsp/baselines.hpp"

#include <algorithm>

#include "trsp/eval.hpp"

namespace trsp {

namespace {

double calibration_loss(ModelState& state, const CalibrationSet& calib) {
    const std::size_t seq = calib.seq_len - 1;
    double total = 0.0;
    for (std::size_t i = 0; i < calib.n_sequences; ++i) {
        const auto row = calib.sequence(i);
        TokenBatch batch;
        batch.batch = 1;
        batch.seq = seq;
        batch.tokens.assign(row.begin(), row.end() - 1);
        std::vector<std::size_t> targets(row.begin() + 1, row.end());
        Tape tape;
        ForwardGraph g = forward_graph(tape, state, batch);
        total += tape.value(tape.cross_entropy(g.logits, std::move(targets)))[0];
    }
    return total / static_cast<double>(calib.n_sequences);
}

void check_n(const ModelState& state, std::size_t n) {
    if (n < 1 || n >= state.n_layers()) {
        throw ConfigError("baseline selection: n must satisfy 1 <= n < l");
    }
}

}  // namespace

std::vector<std::size_t> similarity_rank_selection(ModelState& state, const CalibrationSet& calib,
                                                   std::size_t n) {
    check_n(state, n);
    SimilarityTrace trace = cosine_similarity_trace(state, calib);
    std::vector<std::size_t> order;
    for (const auto& [layer, sim] : trace.by_layer) order.push_back(layer);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double sa = trace.by_layer.at(a);
        const double sb = trace.by_layer.at(b);
        if (sa != sb) return sa > sb;  // most similar first
        return a < b;
    });
    order.resize(n);
    return order;
}

std::vector<std::size_t> loss_impact_selection(ModelState& state, const CalibrationSet& calib,
                                               std::size_t n) {
    check_n(state, n);
    std::vector<std::size_t> picked;
    for (std::size_t it = 0; it < n; ++it) {
        double best_loss = 0.0;
        std::size_t best_layer = 0;
        bool found = false;
        for (std::size_t orig : state.unmasked_original_indices()) {
            mask_layer(state, orig);
            const double loss = calibration_loss(state, calib);
            unmask_layer(state, orig);
            if (!found || loss < best_loss) {  // ties keep the lowest index
                found = true;
                best_loss = loss;
                best_layer = orig;
            }
        }
        mask_layer(state, best_layer);
        picked.push_back(best_layer);
    }
    for (std::size_t orig : picked) unmask_layer(state, orig);
    return picked;
}

std::vector<std::size_t> random_selection(std::size_t l, std::size_t n, std::uint64_t seed) {
    if (n > l) throw ConfigError("random selection: n exceeds layer count");
    Rng rng(Rng::derive(seed, "random-selection"));
    // Fisher-Yates prefix of a fresh index array.
    std::vector<std::size_t> pool(l);
    for (std::size_t i = 0; i < l; ++i) pool[i] = i;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + rng.uniform_below(l - i);
        std::swap(pool[i], pool[j]);
    }
    pool.resize(n);
    return pool;
}

std::vector<std::size_t> select_layers(SelectionStrategy kind, ModelState& state,
                                       const CalibrationSet& calib, std::size_t n,
                                       std::uint64_t seed) {
    switch (kind) {
        case SelectionStrategy::SimilarityRank:
            return similarity_rank_selection(state, calib, n);
        case SelectionStrategy::LossImpact:
            return loss_impact_selection(state, calib, n);
        case SelectionStrategy::Random:
            return random_selection(state.n_layers(), n, seed);
    }
    throw InvariantError("select_layers: unknown strategy");
}

}  // namespace trsp
