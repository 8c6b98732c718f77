#include <doctest.h>

#include <cmath>
#include <set>

#include "trsp/eval.hpp"
#include "trsp/pipeline.hpp"
#include "test_util.hpp"

using namespace trsp;
using namespace trsp::testutil;

namespace {

Corpus tiny_corpus(std::uint64_t seed, std::size_t chars = 12000) {
    return corpus_from_text(synthetic_corpus(chars, seed), TokenizerMode::Char, "synthetic");
}

/// Mean cross-entropy over the whole calibration set (shift by one token).
double calib_ce(ModelState& state, const CalibrationSet& calib) {
    double total = 0.0;
    for (std::size_t i = 0; i < calib.n_sequences; ++i) {
        auto row = calib.sequence(i);
        TokenBatch b;
        b.batch = 1;
        b.seq = calib.seq_len - 1;
        b.tokens.assign(row.begin(), row.end() - 1);
        std::vector<std::size_t> targets(row.begin() + 1, row.end());
        Tape tape;
        ForwardGraph g = forward_graph(tape, state, b);
        total += tape.value(tape.cross_entropy(g.logits, std::move(targets)))[0];
    }
    return total / static_cast<double>(calib.n_sequences);
}

}  // namespace

TEST_CASE("select_min_gate: smallest gate wins") {
    const std::vector<double> gates{1.0, 0.2, 0.9};
    CHECK(select_min_gate(gates, std::set<std::size_t>{}) == 1);
}

TEST_CASE("select_min_gate: ties break to the lowest index") {
    const std::vector<double> gates{0.2, 0.2, 0.9};
    CHECK(select_min_gate(gates, std::set<std::size_t>{}) == 0);
}

TEST_CASE("select_min_gate: masked layers are skipped") {
    const std::vector<double> gates{0.2, 0.1, 0.9};
    CHECK(select_min_gate(gates, std::set<std::size_t>{1}) == 0);
}

TEST_CASE("select_min_gate: magnitude vs raw-value mode") {
    // -0.8 has the smallest raw value but not the smallest magnitude
    const std::vector<double> gates{-0.8, 0.1, 0.9};
    CHECK(select_min_gate(gates, std::set<std::size_t>{}, /*by_magnitude=*/true) == 1);
    CHECK(select_min_gate(gates, std::set<std::size_t>{}, /*by_magnitude=*/false) == 0);
}

TEST_CASE("select_min_gate on a state with equal gates picks index 0") {
    ModelState m = small_model(3, 16, 2, 20, 32, 40);
    m.gates.value.fill(0.5);
    CHECK(select_min_gate(m) == 0);
}

TEST_CASE("learn_layer_weights: lambda1 = 0 reduces to the pure LM loss") {
    Corpus corpus = tiny_corpus(41);
    ModelState m = small_model(2, 16, 2, corpus.tokenizer.vocab_size(), 64, 41);
    CalibrationSet calib = sample_calibration(corpus, 2, 33, 41);

    const double ce0 = calib_ce(m, calib);  // first minibatch == whole set here
    Stage1Config cfg;
    cfg.lambda1 = 0.0;
    cfg.steps = 1;
    cfg.batch_size = 2;
    auto losses = learn_layer_weights(m, calib, cfg);
    REQUIRE(losses.size() == 1);
    CHECK(losses[0] == doctest::Approx(ce0).epsilon(1e-12));
}

TEST_CASE("learn_layer_weights: large lambda1 drives a single gate down") {
    Corpus corpus = tiny_corpus(42);
    ModelState m = small_model(1, 16, 2, corpus.tokenizer.vocab_size(), 64, 42);
    CalibrationSet calib = sample_calibration(corpus, 2, 33, 42);
    const double initial = m.gates.value[0];
    Stage1Config cfg;
    cfg.lambda1 = 10.0;
    cfg.steps = 60;
    cfg.lr = 1e-2;
    cfg.batch_size = 2;
    learn_layer_weights(m, calib, cfg);
    CHECK(m.gates.value[0] < initial);
}

TEST_CASE("learn_layer_weights: loss descends on a fixed batch") {
    Corpus corpus = tiny_corpus(43);
    ModelState m = small_model(2, 16, 2, corpus.tokenizer.vocab_size(), 64, 43);
    CalibrationSet calib = sample_calibration(corpus, 2, 33, 43);
    Stage1Config cfg;
    cfg.steps = 40;
    cfg.lr = 1e-3;
    cfg.batch_size = 2;  // every step sees the identical batch
    auto losses = learn_layer_weights(m, calib, cfg);
    CHECK(losses.back() < losses.front());
}

TEST_CASE("learn_layer_weights: masked layers' gates and weights are untouched") {
    Corpus corpus = tiny_corpus(44);
    ModelState m = small_model(3, 16, 2, corpus.tokenizer.vocab_size(), 64, 44);
    mask_layer(m, 1);
    const double gate_before = m.gates.value[1];
    const Tensor wq_before = m.layers[1].wq.value;
    Stage1Config cfg;
    cfg.steps = 5;
    cfg.lr = 1e-3;
    cfg.batch_size = 2;
    learn_layer_weights(m, sample_calibration(corpus, 2, 33, 44), cfg);
    CHECK(m.gates.value[1] == gate_before);
    CHECK(m.layers[1].wq.value == wq_before);
}

TEST_CASE("learn_layer_weights: gates-only mode keeps model weights frozen") {
    Corpus corpus = tiny_corpus(45);
    ModelState m = small_model(2, 16, 2, corpus.tokenizer.vocab_size(), 64, 45);
    const Tensor tok_before = m.tok_emb.value;
    const Tensor gates_before = m.gates.value;
    Stage1Config cfg;
    cfg.joint_weights = false;
    cfg.steps = 10;
    cfg.lr = 1e-2;
    cfg.batch_size = 2;
    learn_layer_weights(m, sample_calibration(corpus, 2, 33, 45), cfg);
    CHECK(m.tok_emb.value == tok_before);
    CHECK(m.gates.value != gates_before);
}

TEST_CASE("learn_layer_weights: all layers masked is an error") {
    Corpus corpus = tiny_corpus(46);
    ModelState m = small_model(2, 16, 2, corpus.tokenizer.vocab_size(), 64, 46);
    mask_layer(m, 0);
    mask_layer(m, 1);
    CHECK_THROWS_AS(learn_layer_weights(m, sample_calibration(corpus, 2, 33, 46), {}),
                    InvariantError);
}

TEST_CASE("iterative_selection: n = 1 collapses to one pass plus min gate") {
    Corpus corpus = tiny_corpus(47);
    CalibrationSet calib = sample_calibration(corpus, 2, 33, 47);
    Stage1Config cfg;
    cfg.steps = 8;
    cfg.batch_size = 2;

    ModelState a = small_model(3, 16, 2, corpus.tokenizer.vocab_size(), 64, 47);
    ModelState b = a;
    PruneSelection sel = iterative_selection(a, calib, 1, cfg);
    learn_layer_weights(b, calib, cfg);
    CHECK(sel.indices.size() == 1);
    CHECK(sel.indices[0] == select_min_gate(b));
    CHECK(a.mask_set == std::set<std::size_t>{sel.indices[0]});
}

TEST_CASE("iterative_selection: deterministic and distinct indices") {
    Corpus corpus = tiny_corpus(48);
    CalibrationSet calib = sample_calibration(corpus, 2, 33, 48);
    Stage1Config cfg;
    cfg.steps = 5;
    cfg.batch_size = 2;
    auto run = [&] {
        ModelState m = small_model(4, 16, 2, corpus.tokenizer.vocab_size(), 64, 48);
        return iterative_selection(m, calib, 2, cfg).indices;
    };
    const auto p1 = run();
    const auto p2 = run();
    CHECK(p1 == p2);
    CHECK(p1.size() == 2);
    CHECK(p1[0] != p1[1]);
}

TEST_CASE("iterative_selection: greedy regret vs the exhaustive C(4,2) oracle") {
    Corpus corpus = tiny_corpus(49);
    CalibrationSet calib = sample_calibration(corpus, 2, 33, 49);
    Stage1Config cfg;
    cfg.steps = 10;
    cfg.batch_size = 2;

    ModelState dense = small_model(4, 16, 2, corpus.tokenizer.vocab_size(), 64, 49);
    ModelState greedy_state = dense;
    PruneSelection sel = iterative_selection(greedy_state, calib, 2, cfg);
    ModelState greedy_pruned = prune(dense, sel.indices);
    const double greedy_loss = calib_ce(greedy_pruned, calib);

    double best_loss = 1e300;
    std::vector<std::size_t> best_subset;
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = i + 1; j < 4; ++j) {
            ModelState cand = prune(dense, {i, j});
            const double loss = calib_ce(cand, calib);
            if (loss < best_loss) {
                best_loss = loss;
                best_subset = {i, j};
            }
        }
    }
    const double regret = greedy_loss - best_loss;
    MESSAGE("greedy loss ", greedy_loss, " best subset loss ", best_loss, " regret ", regret);
    CHECK(regret >= -1e-12);  // greedy can never beat the exhaustive optimum
    CHECK(std::isfinite(regret));
}

TEST_CASE("one_shot_selection: n = l-1 leaves only the max-gate layer") {
    Corpus corpus = tiny_corpus(50);
    CalibrationSet calib = sample_calibration(corpus, 2, 33, 50);
    Stage1Config cfg;
    cfg.steps = 8;
    cfg.batch_size = 2;
    ModelState m = small_model(4, 16, 2, corpus.tokenizer.vocab_size(), 64, 50);
    PruneSelection sel = one_shot_selection(m, calib, 3, cfg);
    REQUIRE(sel.indices.size() == 3);
    // the survivor is the layer with the largest |gate| in the snapshot
    const std::vector<double>& gates = sel.history[0].gates_by_original;
    std::size_t survivor = 0;
    for (std::size_t i = 1; i < gates.size(); ++i) {
        if (std::abs(gates[i]) > std::abs(gates[survivor])) survivor = i;
    }
    CHECK(std::find(sel.indices.begin(), sel.indices.end(), survivor) == sel.indices.end());
    // chosen set is in ascending gate-magnitude order
    for (std::size_t i = 1; i < 3; ++i) {
        CHECK(std::abs(sel.history[i - 1].gate_value) <= std::abs(sel.history[i].gate_value));
    }
}

TEST_CASE("selection: n out of range is rejected") {
    Corpus corpus = tiny_corpus(51);
    CalibrationSet calib = sample_calibration(corpus, 2, 33, 51);
    ModelState m = small_model(3, 16, 2, corpus.tokenizer.vocab_size(), 64, 51);
    CHECK_THROWS_AS(iterative_selection(m, calib, 0, {}), ConfigError);
    CHECK_THROWS_AS(iterative_selection(m, calib, 3, {}), ConfigError);
    CHECK_THROWS_AS(one_shot_selection(m, calib, 3, {}), ConfigError);
}

TEST_CASE("max_consecutive_run") {
    CHECK(max_consecutive_run({}) == 0);
    CHECK(max_consecutive_run({4}) == 1);
    CHECK(max_consecutive_run({1, 3, 5}) == 1);
    CHECK(max_consecutive_run({5, 4, 1}) == 2);
    CHECK(max_consecutive_run({2, 0, 1, 3, 7}) == 4);
}

TEST_CASE("stage2: lambda2 = 0 is exactly pure LM fine-tuning") {
    Corpus corpus = tiny_corpus(52);
    CalibrationSet calib = sample_calibration(corpus, 2, 33, 52);
    ModelState a = small_model(2, 16, 2, corpus.tokenizer.vocab_size(), 64, 52);
    ModelState b = a;

    Stage2Config cfg;
    cfg.lambda2 = 0.0;
    cfg.steps = 1;
    cfg.lr = 1e-3;
    cfg.batch_size = 2;
    stage2_regularize(a, {0}, calib, cfg);

    // manual pure-CE step on the identical first minibatch
    TokenBatch batch;
    batch.batch = 2;
    batch.seq = 32;
    std::vector<std::size_t> targets;
    for (std::size_t i = 0; i < 2; ++i) {
        auto row = calib.sequence(i);
        for (std::size_t s = 0; s < 32; ++s) {
            batch.tokens.push_back(row[s]);
            targets.push_back(row[s + 1]);
        }
    }
    Adam opt(b.parameters(), {.lr = cfg.lr, .beta1 = cfg.beta1, .beta2 = cfg.beta2,
                              .eps = cfg.adam_eps});
    Tape tape;
    ForwardGraph g = forward_graph(tape, b, batch);
    tape.backward(tape.cross_entropy(g.logits, targets));
    opt.step();

    std::vector<Parameter*> pa = a.parameters();
    std::vector<Parameter*> pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
}

TEST_CASE("stage2: penalty decreases from start to end at a fixed seed") {
    Corpus corpus = tiny_corpus(53);
    CalibrationSet calib = sample_calibration(corpus, 2, 33, 53);
    ModelState m = small_model(3, 16, 2, corpus.tokenizer.vocab_size(), 64, 53);
    Stage2Config cfg;
    cfg.lambda2 = 1.0;
    cfg.steps = 60;
    cfg.lr = 1e-3;
    cfg.batch_size = 2;
    const double before = stage2_penalty_value(m, {1}, calib, cfg.norm);
    auto trajectory = stage2_regularize(m, {1}, calib, cfg);
    const double after = stage2_penalty_value(m, {1}, calib, cfg.norm);
    CHECK(trajectory.size() == cfg.steps);
    CHECK(after < before);
    CHECK(trajectory.back() < trajectory.front());
}

TEST_CASE("stage2: clears the mask set before training") {
    Corpus corpus = tiny_corpus(54);
    CalibrationSet calib = sample_calibration(corpus, 2, 33, 54);
    ModelState m = small_model(3, 16, 2, corpus.tokenizer.vocab_size(), 64, 54);
    mask_layer(m, 1);
    Stage2Config cfg;
    cfg.steps = 1;
    cfg.batch_size = 2;
    stage2_regularize(m, {1}, calib, cfg);
    CHECK(m.mask_set.empty());
}

TEST_CASE("stage2: empty prune set is an error") {
    Corpus corpus = tiny_corpus(55);
    CalibrationSet calib = sample_calibration(corpus, 2, 33, 55);
    ModelState m = small_model(2, 16, 2, corpus.tokenizer.vocab_size(), 64, 55);
    CHECK_THROWS_AS(stage2_regularize(m, {}, calib, {}), ConfigError);
}

TEST_CASE("lambda1 scale covariance: subgradient path is exactly linear") {
    // scaling lambda1 by a power of two scales the gate-penalty gradient
    // by exactly that factor, bit for bit
    Parameter gates("gates", Tensor({4}, {0.5, -1.25, 0.0, 2.0}));
    const double lambda1 = 0.0078125;  // 2^-7
    const double c = 4.0;

    auto grad_with = [&](double lam) {
        gates.zero_grad();
        Tape tape;
        tape.backward(tape.scale(tape.l1_subset(tape.leaf(gates), {0, 1, 2, 3}), lam));
        return gates.grad;
    };
    const Tensor g1 = grad_with(lambda1);
    const Tensor g2 = grad_with(c * lambda1);
    for (std::size_t i = 0; i < 4; ++i) CHECK(g2[i] == c * g1[i]);
}

TEST_CASE("prune_count: rounding and guard rails") {
    CHECK(prune_count(0.25, 8) == 2);
    CHECK(prune_count(0.5, 8) == 4);
    CHECK(prune_count(0.3, 4) == 1);
    CHECK_THROWS_AS(prune_count(0.05, 8), ConfigError);  // rounds to zero layers
    CHECK_THROWS_AS(prune_count(0.0, 8), ConfigError);
    CHECK_THROWS_AS(prune_count(1.0, 8), ConfigError);
    CHECK_THROWS_AS(prune_count(0.95, 8), ConfigError);  // rounds to all layers
}

TEST_CASE("run_trsp: ablation flag and full-run determinism") {
    Corpus corpus = tiny_corpus(56, 16000);
    ModelState dense = small_model(4, 16, 2, corpus.tokenizer.vocab_size(), 64, 56);

    RunSettings settings;
    settings.ratio = 0.25;
    settings.calib_sequences = 2;
    settings.calib_len = 33;
    settings.eval_seq_len = 32;
    settings.seed = 56;
    Stage1Config s1;
    s1.steps = 5;
    s1.batch_size = 2;
    Stage2Config s2;
    s2.steps = 5;
    s2.batch_size = 2;

    settings.regularize = false;
    TrspResult ablation = run_trsp(dense, corpus, settings, s1, s2);
    CHECK(ablation.report.penalty_trajectory.empty());
    CHECK(ablation.report.prune_set.size() == 1);
    CHECK(ablation.pruned.n_layers() == 3);

    settings.regularize = true;
    TrspResult a = run_trsp(dense, corpus, settings, s1, s2);
    TrspResult b = run_trsp(dense, corpus, settings, s1, s2);
    CHECK(a.report.prune_set == b.report.prune_set);
    CHECK(a.report.ppl_after == b.report.ppl_after);
    CHECK(a.report.penalty_trajectory == b.report.penalty_trajectory);
    // selection itself does not depend on the stage-2 flag
    CHECK(a.report.prune_set == ablation.report.prune_set);
    // report invariants
    CHECK(a.report.ppl_before > 1.0);
    CHECK(a.report.ppl_after > 1.0);
    for (const auto& [layer, sim] : a.report.sim_before) CHECK(std::abs(sim) <= 1.0 + 1e-9);
    CHECK(!a.report.to_json().empty());
}
