#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "trsp/baselines.hpp"
#include "trsp/eval.hpp"
#include "test_util.hpp"

using namespace trsp;
using namespace trsp::testutil;

namespace {

Corpus tiny_corpus(std::uint64_t seed) {
    return corpus_from_text(synthetic_corpus(12000, seed), TokenizerMode::Char, "synthetic");
}

/// Zero a layer's output projections so its residual deltas vanish and it
/// computes the identity.
void make_identity_layer(ModelState& m, std::size_t pos) {
    m.layers[pos].wo.value.fill(0.0);
    m.layers[pos].bo.value.fill(0.0);
    m.layers[pos].w2.value.fill(0.0);
    m.layers[pos].b2.value.fill(0.0);
}

double masked_calib_ce(ModelState& state, const CalibrationSet& calib, std::size_t masked) {
    mask_layer(state, masked);
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
    unmask_layer(state, masked);
    return total / static_cast<double>(calib.n_sequences);
}

}  // namespace

TEST_CASE("similarity_rank: an identity layer is selected first") {
    Corpus corpus = tiny_corpus(60);
    ModelState m = small_model(3, 16, 2, corpus.tokenizer.vocab_size(), 64, 60);
    make_identity_layer(m, 1);
    CalibrationSet calib = sample_calibration(corpus, 3, 32, 60);
    auto p = similarity_rank_selection(m, calib, 1);
    REQUIRE(p.size() == 1);
    CHECK(p[0] == 1);
    // and its similarity really is 1
    SimilarityTrace trace = cosine_similarity_trace(m, calib);
    CHECK(trace.by_layer.at(1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("similarity_rank: n = l-1 keeps only the least similar layer") {
    Corpus corpus = tiny_corpus(61);
    ModelState m = small_model(4, 16, 2, corpus.tokenizer.vocab_size(), 64, 61);
    CalibrationSet calib = sample_calibration(corpus, 3, 32, 61);
    SimilarityTrace trace = cosine_similarity_trace(m, calib);
    std::size_t least = 0;
    for (const auto& [layer, sim] : trace.by_layer) {
        if (sim < trace.by_layer.at(least)) least = layer;
    }
    auto p = similarity_rank_selection(m, calib, 3);
    CHECK(std::find(p.begin(), p.end(), least) == p.end());
}

TEST_CASE("similarity_rank: order agrees with the similarity trace") {
    Corpus corpus = tiny_corpus(62);
    ModelState m = small_model(4, 16, 2, corpus.tokenizer.vocab_size(), 64, 62);
    CalibrationSet calib = sample_calibration(corpus, 3, 32, 62);
    SimilarityTrace trace = cosine_similarity_trace(m, calib);
    auto p = similarity_rank_selection(m, calib, 3);
    for (std::size_t i = 1; i < p.size(); ++i) {
        CHECK(trace.by_layer.at(p[i - 1]) >= trace.by_layer.at(p[i]) - 1e-10);
    }
}

TEST_CASE("loss_impact: 2-layer pick matches the exhaustive dual evaluation") {
    Corpus corpus = tiny_corpus(63);
    ModelState m = small_model(2, 16, 2, corpus.tokenizer.vocab_size(), 64, 63);
    CalibrationSet calib = sample_calibration(corpus, 3, 32, 63);
    const double loss0 = masked_calib_ce(m, calib, 0);
    const double loss1 = masked_calib_ce(m, calib, 1);
    auto p = loss_impact_selection(m, calib, 1);
    REQUIRE(p.size() == 1);
    CHECK(p[0] == (loss0 <= loss1 ? 0u : 1u));
    CHECK(m.mask_set.empty());  // selection leaves the model unmasked
}

TEST_CASE("loss_impact: deterministic under a fixed calibration set") {
    Corpus corpus = tiny_corpus(64);
    ModelState m = small_model(4, 16, 2, corpus.tokenizer.vocab_size(), 64, 64);
    CalibrationSet calib = sample_calibration(corpus, 3, 32, 64);
    CHECK(loss_impact_selection(m, calib, 2) == loss_impact_selection(m, calib, 2));
}

TEST_CASE("loss_impact: twin layers tie to the lowest index") {
    Corpus corpus = tiny_corpus(65);
    ModelState m = small_model(2, 16, 2, corpus.tokenizer.vocab_size(), 64, 65);
    // layer 1 becomes an exact copy of layer 0 (names aside), so masking
    // either one leaves the same computation
    LayerParams copy = m.layers[0];
    Parameter* src[] = {&copy.ln1_g, &copy.ln1_b, &copy.wq, &copy.bq, &copy.wk, &copy.bk,
                        &copy.wv,    &copy.bv,    &copy.wo, &copy.bo, &copy.ln2_g, &copy.ln2_b,
                        &copy.w1,    &copy.b1,    &copy.w2, &copy.b2};
    Parameter* dst[] = {&m.layers[1].ln1_g, &m.layers[1].ln1_b, &m.layers[1].wq, &m.layers[1].bq,
                        &m.layers[1].wk,    &m.layers[1].bk,    &m.layers[1].wv, &m.layers[1].bv,
                        &m.layers[1].wo,    &m.layers[1].bo,    &m.layers[1].ln2_g,
                        &m.layers[1].ln2_b, &m.layers[1].w1,    &m.layers[1].b1,
                        &m.layers[1].w2,    &m.layers[1].b2};
    for (std::size_t i = 0; i < 16; ++i) dst[i]->value = src[i]->value;

    CalibrationSet calib = sample_calibration(corpus, 3, 32, 65);
    auto p = loss_impact_selection(m, calib, 1);
    REQUIRE(p.size() == 1);
    CHECK(p[0] == 0);
}

TEST_CASE("random_selection: n = l returns every layer") {
    auto p = random_selection(6, 6, 1);
    std::set<std::size_t> s(p.begin(), p.end());
    CHECK(s == std::set<std::size_t>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("random_selection: seed reproducible, n > l rejected") {
    CHECK(random_selection(8, 3, 42) == random_selection(8, 3, 42));
    CHECK_THROWS_AS(random_selection(4, 5, 0), ConfigError);
}

TEST_CASE("random_selection: inclusion frequencies are uniform within 3 sigma") {
    const std::size_t l = 8, n = 2, draws = 10000;
    std::vector<std::size_t> counts(l, 0);
    for (std::size_t d = 0; d < draws; ++d) {
        for (std::size_t layer : random_selection(l, n, d)) ++counts[layer];
    }
    const double p = static_cast<double>(n) / static_cast<double>(l);
    const double mean = draws * p;
    const double sigma = std::sqrt(draws * p * (1.0 - p));
    for (std::size_t layer = 0; layer < l; ++layer) {
        CHECK(std::abs(static_cast<double>(counts[layer]) - mean) <= 3.0 * sigma);
    }
}

TEST_CASE("all strategies return distinct in-range indices of size n") {
    Corpus corpus = tiny_corpus(66);
    ModelState m = small_model(4, 16, 2, corpus.tokenizer.vocab_size(), 64, 66);
    CalibrationSet calib = sample_calibration(corpus, 3, 32, 66);
    for (SelectionStrategy kind : {SelectionStrategy::SimilarityRank, SelectionStrategy::LossImpact,
                                   SelectionStrategy::Random}) {
        auto p = select_layers(kind, m, calib, 2, 66);
        REQUIRE(p.size() == 2);
        CHECK(p[0] != p[1]);
        CHECK(p[0] < 4);
        CHECK(p[1] < 4);
    }
}

TEST_CASE("baseline selection: n out of range is rejected") {
    Corpus corpus = tiny_corpus(67);
    ModelState m = small_model(3, 16, 2, corpus.tokenizer.vocab_size(), 64, 67);
    CalibrationSet calib = sample_calibration(corpus, 3, 32, 67);
    CHECK_THROWS_AS(similarity_rank_selection(m, calib, 3), ConfigError);
    CHECK_THROWS_AS(loss_impact_selection(m, calib, 0), ConfigError);
}
