#include "trsp/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace trsp {

using nlohmann::json;

double perplexity(ModelState& state, std::span<const std::size_t> tokens, std::size_t seq_len,
                  std::size_t stride) {
    if (stride == 0) stride = seq_len;  // non-overlapping windows
    if (tokens.size() < seq_len + 1) throw DataError("perplexity: eval split shorter than one window");
    double total = 0.0;
    std::size_t windows = 0;
    for (std::size_t off = 0; off + seq_len < tokens.size(); off += stride) {
        TokenBatch b;
        b.batch = 1;
        b.seq = seq_len;
        b.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(off),
                        tokens.begin() + static_cast<std::ptrdiff_t>(off + seq_len));
        std::vector<std::size_t> targets(
            tokens.begin() + static_cast<std::ptrdiff_t>(off + 1),
            tokens.begin() + static_cast<std::ptrdiff_t>(off + seq_len + 1));
        Tape tape;
        ForwardGraph g = forward_graph(tape, state, b);
        total += tape.value(tape.cross_entropy(g.logits, std::move(targets)))[0];
        ++windows;
    }
    return std::exp(total / static_cast<double>(windows));
}

double mean_vector_cosine(const Tensor& a, const Tensor& b, std::size_t& zero_norm_count) {
    if (!a.same_shape(b)) throw InvariantError("cosine: shape mismatch");
    const std::size_t d = a.last_extent();
    const std::size_t rows = a.size() / d;
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* pa = a.data() + r * d;
        const double* pb = b.data() + r * d;
        double dot = 0.0;
        double na = 0.0;
        double nb = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dot += pa[j] * pb[j];
            na += pa[j] * pa[j];
            nb += pb[j] * pb[j];
        }
        if (na == 0.0 || nb == 0.0) {
            ++zero_norm_count;  // contributes 0
        } else {
            total += dot / (std::sqrt(na) * std::sqrt(nb));
        }
    }
    return total / static_cast<double>(rows);
}

double SimilarityTrace::mean_over(const std::vector<std::size_t>& layers) const {
    double total = 0.0;
    for (std::size_t layer : layers) total += by_layer.at(layer);
    return total / static_cast<double>(layers.size());
}

SimilarityTrace cosine_similarity_trace(ModelState& state, const CalibrationSet& calib,
                                        const std::vector<std::size_t>& layers) {
    std::vector<std::size_t> requested = layers;
    if (requested.empty()) requested = state.unmasked_original_indices();
    for (std::size_t orig : requested) {
        if (!state.position_of(orig)) throw InvariantError("cosine trace: layer not in model");
        if (state.is_masked(orig)) throw InvariantError("cosine trace: layer is masked");
    }

    SimilarityTrace trace;
    std::map<std::size_t, double> sums;

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
        for (std::size_t orig : requested) {
            const std::size_t pos = *state.position_of(orig);
            sums[orig] += mean_vector_cosine(tape.value(g.layer_in[pos]),
                                             tape.value(g.layer_out[pos]),
                                             trace.zero_norm_count);
        }
    }
    for (const auto& [orig, sum] : sums) {
        trace.by_layer[orig] = sum / static_cast<double>(calib.n_sequences);
    }
    return trace;
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

TokenBatch random_batch(std::size_t batch, std::size_t seq, std::size_t vocab, Rng& rng) {
    TokenBatch b;
    b.batch = batch;
    b.seq = seq;
    b.tokens.resize(batch * seq);
    for (std::size_t& t : b.tokens) t = rng.uniform_below(vocab);
    return b;
}

/// Generate gen_len tokens greedily from a 1-token prompt, recomputing the
/// full forward each step (no KV cache).
void generate_tokens(ModelState& state, std::size_t batch, std::size_t gen_len, Rng& rng) {
    TokenBatch b = random_batch(batch, 1, state.config.vocab, rng);
    const std::size_t vocab = state.config.vocab;
    for (std::size_t step = 0; step < gen_len; ++step) {
        Tensor logits = forward_logits(state, b);
        const std::size_t seq = b.seq;
        TokenBatch next;
        next.batch = batch;
        next.seq = seq + 1;
        next.tokens.resize(batch * (seq + 1));
        for (std::size_t i = 0; i < batch; ++i) {
            const double* last = logits.data() + ((i * seq) + (seq - 1)) * vocab;
            std::size_t best = 0;
            for (std::size_t vtok = 1; vtok < vocab; ++vtok) {
                if (last[vtok] > last[best]) best = vtok;
            }
            std::copy(b.tokens.begin() + static_cast<std::ptrdiff_t>(i * seq),
                      b.tokens.begin() + static_cast<std::ptrdiff_t>((i + 1) * seq),
                      next.tokens.begin() + static_cast<std::ptrdiff_t>(i * (seq + 1)));
            next.tokens[i * (seq + 1) + seq] = best;
        }
        b = std::move(next);
    }
}

}  // namespace

BenchmarkResult benchmark(ModelState& state, std::size_t batch, std::size_t gen_len,
                          std::size_t prompt_len, std::size_t repeats, std::uint64_t seed) {
    if (gen_len + 1 > state.config.max_seq || prompt_len > state.config.max_seq) {
        throw ConfigError("benchmark: generation/prompt length exceeds max_seq");
    }
    if (repeats < 1) throw ConfigError("benchmark: repeats must be >= 1");
    using clock = std::chrono::steady_clock;
    Rng rng(Rng::derive(seed, "benchmark"));

    BenchmarkResult result;
    result.repeats = repeats;

    // warmup, discarded
    generate_tokens(state, batch, gen_len, rng);
    for (std::size_t r = 0; r < repeats; ++r) {
        const auto t0 = clock::now();
        generate_tokens(state, batch, gen_len, rng);
        const auto t1 = clock::now();
        const double secs = std::chrono::duration<double>(t1 - t0).count();
        result.throughput_samples.push_back(static_cast<double>(batch * gen_len) / secs);
    }

    TokenBatch prompt = random_batch(1, prompt_len, state.config.vocab, rng);
    forward_logits(state, prompt);  // warmup
    for (std::size_t r = 0; r < repeats; ++r) {
        const auto t0 = clock::now();
        forward_logits(state, prompt);
        const auto t1 = clock::now();
        result.latency_samples.push_back(
            std::chrono::duration<double, std::milli>(t1 - t0).count());
    }

    result.tokens_per_second = median(result.throughput_samples);
    result.latency_ms = median(result.latency_samples);
    return result;
}

std::string EvalReport::to_json() const {
    json j;
    j["ppl"] = ppl;
    json sb = json::object();
    for (const auto& [layer, sim] : sim_before) sb[std::to_string(layer)] = sim;
    j["sim_before"] = sb;
    json sa = json::object();
    for (const auto& [layer, sim] : sim_after) sa[std::to_string(layer)] = sim;
    j["sim_after"] = sa;
    j["tokens_per_second"] = tokens_per_second;
    j["latency_ms"] = latency_ms;
    j["prune_set"] = prune_set;
    if (!config_echo.empty()) j["config"] = json::parse(config_echo);
    return j.dump(2);
}

std::string GridResult::to_csv() const {
    std::ostringstream os;
    os << "lambda1\\lambda2";
    for (double l2 : lambda2s) os << "," << l2;
    os << "\n";
    for (std::size_t i = 0; i < lambda1s.size(); ++i) {
        os << lambda1s[i];
        for (std::size_t jcol = 0; jcol < lambda2s.size(); ++jcol) os << "," << ppl[i][jcol];
        os << "\n";
    }
    return os.str();
}

GridResult lambda_grid(const ModelState& dense, const Corpus& corpus,
                       const std::vector<double>& lambda1s, const std::vector<double>& lambda2s,
                       const RunSettings& settings, const Stage1Config& s1_base,
                       const Stage2Config& s2_base) {
    if (lambda1s.empty() || lambda2s.empty()) throw ConfigError("lambda grid: empty lambda list");
    GridResult grid;
    grid.lambda1s = lambda1s;
    grid.lambda2s = lambda2s;
    grid.ppl.assign(lambda1s.size(), std::vector<double>(lambda2s.size(), 0.0));
    for (std::size_t i = 0; i < lambda1s.size(); ++i) {
        for (std::size_t jcol = 0; jcol < lambda2s.size(); ++jcol) {
            Stage1Config s1 = s1_base;
            s1.lambda1 = lambda1s[i];
            Stage2Config s2 = s2_base;
            s2.lambda2 = lambda2s[jcol];
            RunSettings cell = settings;
            // lambda2 = 0 means no second-stage training at all, identical
            // to the regularize=false ablation arm.
            cell.regularize = settings.regularize && s2.lambda2 != 0.0;
            TrspResult r = run_trsp(dense, corpus, cell, s1, s2);
            grid.ppl[i][jcol] = r.report.ppl_after;
        }
    }
    return grid;
}

}  // namespace trsp
