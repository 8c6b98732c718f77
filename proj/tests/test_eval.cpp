#include <doctest.h>

#include <cmath>
#include <sstream>

#include "trsp/eval.hpp"
#include "test_util.hpp"

using namespace trsp;
using namespace trsp::testutil;

namespace {

Corpus tiny_corpus(std::uint64_t seed, std::size_t chars = 12000) {
    return corpus_from_text(synthetic_corpus(chars, seed), TokenizerMode::Char, "synthetic");
}

void make_identity_layer(ModelState& m, std::size_t pos) {
    m.layers[pos].wo.value.fill(0.0);
    m.layers[pos].bo.value.fill(0.0);
    m.layers[pos].w2.value.fill(0.0);
    m.layers[pos].b2.value.fill(0.0);
}

}  // namespace

TEST_CASE("perplexity: uniform-logits model scores exactly the vocab size") {
    Corpus corpus = tiny_corpus(70);
    const std::size_t vocab = corpus.tokenizer.vocab_size();
    ModelState m = small_model(2, 16, 2, vocab, 64, 70);
    m.head_w.value.fill(0.0);
    m.head_b.value.fill(0.0);  // all-zero logits -> uniform distribution
    const double ppl = perplexity(m, corpus.test(), 32);
    CHECK(std::abs(ppl - static_cast<double>(vocab)) < 1e-9);
}

TEST_CASE("perplexity equals exp(mean cross-entropy) on the same windows") {
    Corpus corpus = tiny_corpus(71);
    ModelState m = small_model(2, 16, 2, corpus.tokenizer.vocab_size(), 64, 71);
    const std::size_t seq = 32;
    auto tokens = corpus.test();

    double total = 0.0;
    std::size_t windows = 0;
    for (std::size_t off = 0; off + seq < tokens.size(); off += seq) {
        TokenBatch b;
        b.batch = 1;
        b.seq = seq;
        b.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(off),
                        tokens.begin() + static_cast<std::ptrdiff_t>(off + seq));
        std::vector<std::size_t> targets(tokens.begin() + static_cast<std::ptrdiff_t>(off + 1),
                                         tokens.begin() + static_cast<std::ptrdiff_t>(off + seq + 1));
        Tape tape;
        ForwardGraph g = forward_graph(tape, m, b);
        total += tape.value(tape.cross_entropy(g.logits, std::move(targets)))[0];
        ++windows;
    }
    const double expected = std::exp(total / static_cast<double>(windows));
    CHECK(std::abs(perplexity(m, tokens, seq) - expected) < 1e-10);
}

TEST_CASE("perplexity: stride overrides the window step") {
    Corpus corpus = tiny_corpus(72);
    ModelState m = small_model(2, 16, 2, corpus.tokenizer.vocab_size(), 64, 72);
    // overlapping windows give a different (but finite) estimate
    const double non_overlap = perplexity(m, corpus.test(), 32);
    const double overlap = perplexity(m, corpus.test(), 32, 16);
    CHECK(non_overlap > 1.0);
    CHECK(overlap > 1.0);
}

TEST_CASE("perplexity: split shorter than one window is an error") {
    Corpus corpus = tiny_corpus(73);
    ModelState m = small_model(2, 16, 2, corpus.tokenizer.vocab_size(), 64, 73);
    std::vector<std::size_t> few(corpus.tokens.begin(), corpus.tokens.begin() + 10);
    CHECK_THROWS_AS(perplexity(m, few, 32), DataError);
}

TEST_CASE("cosine: identical vectors give exactly 1, negated exactly -1") {
    Rng rng(74);
    Tensor x({4, 8});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    Tensor neg = x;
    for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -neg[i];

    std::size_t zeros = 0;
    CHECK(std::abs(mean_vector_cosine(x, x, zeros) - 1.0) < 1e-9);
    CHECK(std::abs(mean_vector_cosine(x, neg, zeros) - (-1.0)) < 1e-9);
    CHECK(zeros == 0);
}

TEST_CASE("cosine: zero-norm vectors contribute 0 with a warning count") {
    Tensor a({2, 3}, {0, 0, 0, 1, 2, 2});
    Tensor b({2, 3}, {5, 5, 5, 1, 2, 2});
    std::size_t zeros = 0;
    const double sim = mean_vector_cosine(a, b, zeros);
    CHECK(zeros == 1);
    CHECK(sim == doctest::Approx(0.5).epsilon(1e-12));  // (0 + 1) / 2 rows
}

TEST_CASE("cosine: matches an independent scalar-loop reference within 1e-12") {
    Rng rng(75);
    Tensor a({6, 10});
    Tensor b({6, 10});
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = rng.normal();
        b[i] = rng.normal();
    }
    // reference in long double with reversed iteration order
    long double total = 0.0L;
    for (std::size_t r = 0; r < 6; ++r) {
        long double dot = 0.0L, na = 0.0L, nb = 0.0L;
        for (std::size_t j = 10; j-- > 0;) {
            dot += static_cast<long double>(a[r * 10 + j]) * b[r * 10 + j];
            na += static_cast<long double>(a[r * 10 + j]) * a[r * 10 + j];
            nb += static_cast<long double>(b[r * 10 + j]) * b[r * 10 + j];
        }
        total += dot / (std::sqrt(na) * std::sqrt(nb));
    }
    std::size_t zeros = 0;
    CHECK(std::abs(mean_vector_cosine(a, b, zeros) - static_cast<double>(total / 6.0L)) < 1e-12);
}

TEST_CASE("cosine_similarity_trace: identity layer reports 1, all values bounded") {
    Corpus corpus = tiny_corpus(76);
    ModelState m = small_model(3, 16, 2, corpus.tokenizer.vocab_size(), 64, 76);
    make_identity_layer(m, 2);
    CalibrationSet calib = sample_calibration(corpus, 3, 32, 76);
    SimilarityTrace trace = cosine_similarity_trace(m, calib);
    CHECK(trace.by_layer.at(2) == doctest::Approx(1.0).epsilon(1e-12));
    for (const auto& [layer, sim] : trace.by_layer) CHECK(std::abs(sim) <= 1.0 + 1e-9);
}

TEST_CASE("cosine_similarity_trace: masked layer is an error") {
    Corpus corpus = tiny_corpus(77);
    ModelState m = small_model(3, 16, 2, corpus.tokenizer.vocab_size(), 64, 77);
    mask_layer(m, 1);
    CalibrationSet calib = sample_calibration(corpus, 3, 32, 77);
    CHECK_THROWS_AS(cosine_similarity_trace(m, calib, {1}), InvariantError);
    // defaulting to unmasked layers skips it cleanly
    SimilarityTrace trace = cosine_similarity_trace(m, calib);
    CHECK(trace.by_layer.count(1) == 0);
}

TEST_CASE("benchmark: repeats = 1 equals the single measurement") {
    ModelState m = small_model(2, 16, 2, 20, 64, 78);
    BenchmarkResult r = benchmark(m, 1, 4, 8, 1, 1);
    REQUIRE(r.throughput_samples.size() == 1);
    REQUIRE(r.latency_samples.size() == 1);
    CHECK(r.tokens_per_second == r.throughput_samples[0]);
    CHECK(r.latency_ms == r.latency_samples[0]);
}

TEST_CASE("benchmark: generation longer than the context is rejected") {
    ModelState m = small_model(2, 16, 2, 20, 16, 79);
    CHECK_THROWS_AS(benchmark(m, 1, 16, 8, 1, 0), ConfigError);
    CHECK_THROWS_AS(benchmark(m, 1, 4, 8, 0, 0), ConfigError);
}

TEST_CASE("benchmark: dense throughput is stable across reruns within 15 percent") {
    ModelState m = small_model(2, 24, 2, 30, 64, 80);
    const double a = benchmark(m, 2, 8, 16, 5, 1).tokens_per_second;
    const double b = benchmark(m, 2, 8, 16, 5, 1).tokens_per_second;
    CHECK(std::abs(a - b) / std::max(a, b) < 0.15);
}

TEST_CASE("lambda_grid: 1x1 grid equals a single pipeline run") {
    Corpus corpus = tiny_corpus(81, 16000);
    ModelState dense = small_model(4, 16, 2, corpus.tokenizer.vocab_size(), 64, 81);
    RunSettings settings;
    settings.ratio = 0.25;
    settings.calib_sequences = 2;
    settings.calib_len = 33;
    settings.eval_seq_len = 32;
    settings.seed = 81;
    Stage1Config s1;
    s1.steps = 4;
    s1.batch_size = 2;
    Stage2Config s2;
    s2.steps = 4;
    s2.batch_size = 2;

    GridResult grid = lambda_grid(dense, corpus, {s1.lambda1}, {s2.lambda2}, settings, s1, s2);
    TrspResult single = run_trsp(dense, corpus, settings, s1, s2);
    REQUIRE(grid.ppl.size() == 1);
    REQUIRE(grid.ppl[0].size() == 1);
    CHECK(grid.ppl[0][0] == single.report.ppl_after);
}

TEST_CASE("lambda_grid: zero-lambda2 cell matches the no-stage-2 ablation") {
    Corpus corpus = tiny_corpus(82, 16000);
    ModelState dense = small_model(4, 16, 2, corpus.tokenizer.vocab_size(), 64, 82);
    RunSettings settings;
    settings.ratio = 0.25;
    settings.calib_sequences = 2;
    settings.calib_len = 33;
    settings.eval_seq_len = 32;
    settings.seed = 82;
    Stage1Config s1;
    s1.steps = 4;
    s1.batch_size = 2;
    Stage2Config s2;
    s2.steps = 4;
    s2.batch_size = 2;

    GridResult grid = lambda_grid(dense, corpus, {0.0, s1.lambda1}, {0.0}, settings, s1, s2);
    RunSettings ablation = settings;
    ablation.regularize = false;
    Stage1Config s1_zero = s1;
    s1_zero.lambda1 = 0.0;
    CHECK(grid.ppl[0][0] == run_trsp(dense, corpus, ablation, s1_zero, s2).report.ppl_after);
    CHECK(grid.ppl[1][0] == run_trsp(dense, corpus, ablation, s1, s2).report.ppl_after);
}

TEST_CASE("lambda_grid: csv layout carries the input headers") {
    GridResult grid;
    grid.lambda1s = {0.001, 0.005, 0.01};
    grid.lambda2s = {0.0005, 0.001, 0.002};
    grid.ppl = {{1, 2, 3}, {4, 5, 6}, {7, 8, 9}};
    std::istringstream csv(grid.to_csv());
    std::string line;
    std::getline(csv, line);
    CHECK(line == "lambda1\\lambda2,0.0005,0.001,0.002");
    std::getline(csv, line);
    CHECK(line == "0.001,1,2,3");
    std::getline(csv, line);
    CHECK(line == "0.005,4,5,6");
    std::getline(csv, line);
    CHECK(line == "0.01,7,8,9");
}

TEST_CASE("lambda_grid: empty lists are rejected") {
    Corpus corpus = tiny_corpus(83);
    ModelState dense = small_model(2, 16, 2, corpus.tokenizer.vocab_size(), 64, 83);
    CHECK_THROWS_AS(lambda_grid(dense, corpus, {}, {1e-3}, {}, {}, {}), ConfigError);
}

TEST_CASE("EvalReport serializes to JSON with the expected fields") {
    EvalReport r;
    r.ppl = 12.5;
    r.sim_before[0] = 0.9;
    r.sim_after[0] = 0.95;
    r.prune_set = {2, 5};
    const std::string j = r.to_json();
    CHECK(j.find("\"ppl\"") != std::string::npos);
    CHECK(j.find("\"sim_before\"") != std::string::npos);
    CHECK(j.find("\"prune_set\"") != std::string::npos);
}
