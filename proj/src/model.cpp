#include "trsp/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace trsp {

using nlohmann::json;

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || ff_dim < 1 || vocab < 1 || max_seq < 1) {
        throw ConfigError("model config: all counts must be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("model config: d_model must be divisible by n_heads");
    }
    if (layernorm_eps <= 0.0) {
        throw ConfigError("model config: layernorm_eps must be positive");
    }
}

namespace {

Tensor random_normal(std::vector<std::size_t> shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * stddev;
    return t;
}

LayerParams init_layer(const ModelConfig& cfg, std::size_t idx, Rng& rng) {
    const std::size_t d = cfg.d_model;
    const std::size_t f = cfg.ff_dim;
    const std::string p = "layers." + std::to_string(idx) + ".";
    const double std0 = 0.02;
    LayerParams lp{
        {p + "ln1_g", Tensor::full({d}, 1.0)},
        {p + "ln1_b", Tensor::zeros({d})},
        {p + "wq", random_normal({d, d}, rng, std0)},
        {p + "bq", Tensor::zeros({d})},
        {p + "wk", random_normal({d, d}, rng, std0)},
        {p + "bk", Tensor::zeros({d})},
        {p + "wv", random_normal({d, d}, rng, std0)},
        {p + "bv", Tensor::zeros({d})},
        {p + "wo", random_normal({d, d}, rng, std0)},
        {p + "bo", Tensor::zeros({d})},
        {p + "ln2_g", Tensor::full({d}, 1.0)},
        {p + "ln2_b", Tensor::zeros({d})},
        {p + "w1", random_normal({d, f}, rng, std0)},
        {p + "b1", Tensor::zeros({f})},
        {p + "w2", random_normal({f, d}, rng, std0)},
        {p + "b2", Tensor::zeros({d})},
    };
    return lp;
}

}  // namespace

ModelState ModelState::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(Rng::derive(seed, "model-init"));
    ModelState s;
    s.config = cfg;
    s.tok_emb = Parameter("tok_emb", random_normal({cfg.vocab, cfg.d_model}, rng, 0.02));
    s.pos_emb = Parameter("pos_emb", random_normal({cfg.max_seq, cfg.d_model}, rng, 0.02));
    s.layers.reserve(cfg.n_layers);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        s.layers.push_back(init_layer(cfg, i, rng));
    }
    s.final_ln_g = Parameter("final_ln_g", Tensor::full({cfg.d_model}, 1.0));
    s.final_ln_b = Parameter("final_ln_b", Tensor::zeros({cfg.d_model}));
    s.head_w = Parameter("head_w", random_normal({cfg.d_model, cfg.vocab}, rng, 0.02));
    s.head_b = Parameter("head_b", Tensor::zeros({cfg.vocab}));
    s.gates = Parameter("gates", Tensor::full({cfg.n_layers}, 1.0));
    s.layer_origin.resize(cfg.n_layers);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) s.layer_origin[i] = i;
    return s;
}

std::optional<std::size_t> ModelState::position_of(std::size_t original_idx) const {
    for (std::size_t i = 0; i < layer_origin.size(); ++i) {
        if (layer_origin[i] == original_idx) return i;
    }
    return std::nullopt;
}

std::vector<std::size_t> ModelState::unmasked_original_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t orig : layer_origin) {
        if (!is_masked(orig)) out.push_back(orig);
    }
    return out;
}

std::vector<Parameter*> ModelState::layer_parameters(std::size_t position) {
    LayerParams& lp = layers[position];
    return {&lp.ln1_g, &lp.ln1_b, &lp.wq, &lp.bq, &lp.wk, &lp.bk, &lp.wv, &lp.bv,
            &lp.wo,    &lp.bo,    &lp.ln2_g, &lp.ln2_b, &lp.w1, &lp.b1, &lp.w2, &lp.b2};
}

std::vector<Parameter*> ModelState::parameters() {
    std::vector<Parameter*> out{&tok_emb, &pos_emb};
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto lp = layer_parameters(i);
        out.insert(out.end(), lp.begin(), lp.end());
    }
    out.push_back(&final_ln_g);
    out.push_back(&final_ln_b);
    out.push_back(&head_w);
    out.push_back(&head_b);
    out.push_back(&gates);
    return out;
}

ForwardGraph forward_graph(Tape& tape, ModelState& state, const TokenBatch& batch,
                           const ForwardOptions& opts) {
    const ModelConfig& cfg = state.config;
    if (batch.seq > cfg.max_seq) throw DataError("forward: sequence longer than max_seq");
    if (batch.tokens.size() != batch.batch * batch.seq) {
        throw InvariantError("forward: token buffer size mismatch");
    }
    for (std::size_t t : batch.tokens) {
        if (t >= cfg.vocab) throw DataError("forward: token id out of vocab range");
    }

    const std::size_t B = batch.batch;
    const std::size_t S = batch.seq;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model / cfg.n_heads));

    Tape::NodeId tok_table = tape.leaf(state.tok_emb);
    Tape::NodeId pos_table = tape.leaf(state.pos_emb);
    std::vector<std::size_t> pos_ids(B * S);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < S; ++s) pos_ids[b * S + s] = s;

    Tape::NodeId x = tape.add(
        tape.gather_rows(tok_table, batch.tokens, {B, S, cfg.d_model}),
        tape.gather_rows(pos_table, std::move(pos_ids), {B, S, cfg.d_model}));

    Tape::NodeId gates_node = Tape::kInvalid;
    if (opts.apply_gates) gates_node = tape.leaf(state.gates);

    ForwardGraph graph;
    graph.layer_in.assign(state.n_layers(), Tape::kInvalid);
    graph.layer_out.assign(state.n_layers(), Tape::kInvalid);
    graph.stream_out.assign(state.n_layers(), Tape::kInvalid);

    for (std::size_t pos = 0; pos < state.n_layers(); ++pos) {
        if (state.is_masked(state.layer_origin[pos])) continue;  // full bypass
        LayerParams& lp = state.layers[pos];

        Tape::NodeId h = tape.layernorm(x, tape.leaf(lp.ln1_g), tape.leaf(lp.ln1_b),
                                        cfg.layernorm_eps);
        Tape::NodeId q = tape.split_heads(
            tape.add_bias(tape.matmul(h, tape.leaf(lp.wq)), tape.leaf(lp.bq)), cfg.n_heads);
        Tape::NodeId k = tape.split_heads(
            tape.add_bias(tape.matmul(h, tape.leaf(lp.wk)), tape.leaf(lp.bk)), cfg.n_heads);
        Tape::NodeId v = tape.split_heads(
            tape.add_bias(tape.matmul(h, tape.leaf(lp.wv)), tape.leaf(lp.bv)), cfg.n_heads);
        Tape::NodeId scores = tape.scale(tape.matmul(q, k, /*trans_b=*/true), attn_scale);
        Tape::NodeId probs = tape.softmax_lastaxis(scores, /*causal=*/true);
        Tape::NodeId ctx = tape.merge_heads(tape.matmul(probs, v));
        Tape::NodeId attn = tape.add_bias(tape.matmul(ctx, tape.leaf(lp.wo)), tape.leaf(lp.bo));
        Tape::NodeId a = tape.add(x, attn);

        Tape::NodeId m = tape.layernorm(a, tape.leaf(lp.ln2_g), tape.leaf(lp.ln2_b),
                                        cfg.layernorm_eps);
        Tape::NodeId ff = tape.add_bias(
            tape.matmul(tape.gelu(tape.add_bias(tape.matmul(m, tape.leaf(lp.w1)),
                                                tape.leaf(lp.b1))),
                        tape.leaf(lp.w2)),
            tape.leaf(lp.b2));
        Tape::NodeId out = tape.add(a, ff);

        if (opts.trace) {
            graph.layer_in[pos] = x;
            graph.layer_out[pos] = out;
        }

        if (opts.apply_gates) {
            if (cfg.gate_full_stream) {
                x = tape.scale_by_element(out, gates_node, pos);
            } else {
                x = tape.add(x, tape.scale_by_element(tape.sub(out, x), gates_node, pos));
            }
        } else {
            x = out;
        }
        if (opts.trace) graph.stream_out[pos] = x;
    }

    Tape::NodeId normed = tape.layernorm(x, tape.leaf(state.final_ln_g),
                                         tape.leaf(state.final_ln_b), cfg.layernorm_eps);
    graph.logits = tape.add_bias(tape.matmul(normed, tape.leaf(state.head_w)),
                                 tape.leaf(state.head_b));
    return graph;
}

Tensor forward_logits(ModelState& state, const TokenBatch& batch, const ForwardOptions& opts) {
    Tape tape;
    ForwardGraph g = forward_graph(tape, state, batch, opts);
    return tape.value(g.logits);
}

void mask_layer(ModelState& state, std::size_t original_idx) {
    if (!state.position_of(original_idx)) {
        throw InvariantError("mask_layer: index not present in model");
    }
    if (state.is_masked(original_idx)) {
        throw InvariantError("mask_layer: layer already masked");
    }
    state.mask_set.insert(original_idx);
}

void unmask_layer(ModelState& state, std::size_t original_idx) {
    if (state.mask_set.erase(original_idx) == 0) {
        throw InvariantError("unmask_layer: layer not masked");
    }
}

ModelState prune(const ModelState& state, const std::vector<std::size_t>& prune_set) {
    std::set<std::size_t> removal(prune_set.begin(), prune_set.end());
    if (removal.size() != prune_set.size()) {
        throw InvariantError("prune: duplicate indices in prune set");
    }
    for (std::size_t orig : prune_set) {
        if (!state.position_of(orig)) {
            throw InvariantError("prune: index not present in model");
        }
    }

    ModelState out;
    out.config = state.config;
    out.config.n_layers = state.n_layers() - removal.size();
    out.tok_emb = state.tok_emb;
    out.pos_emb = state.pos_emb;
    out.final_ln_g = state.final_ln_g;
    out.final_ln_b = state.final_ln_b;
    out.head_w = state.head_w;
    out.head_b = state.head_b;

    std::vector<double> kept_gates;
    for (std::size_t pos = 0; pos < state.n_layers(); ++pos) {
        const std::size_t orig = state.layer_origin[pos];
        if (removal.count(orig)) continue;
        out.layers.push_back(state.layers[pos]);
        out.layer_origin.push_back(orig);
        kept_gates.push_back(state.gates.value[pos]);
        if (state.is_masked(orig)) out.mask_set.insert(orig);
    }
    // Parameter names are keyed by current position; re-key the survivors.
    for (std::size_t pos = 0; pos < out.layers.size(); ++pos) {
        const std::string prefix = "layers." + std::to_string(pos) + ".";
        LayerParams& lp = out.layers[pos];
        Parameter* ps[] = {&lp.ln1_g, &lp.ln1_b, &lp.wq, &lp.bq, &lp.wk, &lp.bk,
                           &lp.wv,    &lp.bv,    &lp.wo, &lp.bo, &lp.ln2_g, &lp.ln2_b,
                           &lp.w1,    &lp.b1,    &lp.w2, &lp.b2};
        for (Parameter* p : ps) {
            const std::size_t dot = p->name.rfind('.');
            p->name = prefix + p->name.substr(dot + 1);
        }
    }
    const std::size_t n_kept = kept_gates.size();
    out.gates = Parameter("gates", Tensor({n_kept}, std::move(kept_gates)));
    return out;
}

// ---------------------------------------------------------------------------
// checkpoint IO
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'T', 'R', 'S', 'P'};
constexpr std::uint32_t kFormatVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char buf[4];
    for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

void write_f64(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    write_u64(os, bits);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char buf[4];
    is.read(reinterpret_cast<char*>(buf), 4);
    if (!is) throw DataError("checkpoint: truncated file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is) throw DataError("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

double read_f64(std::istream& is) {
    std::uint64_t bits = read_u64(is);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

void write_tensor_record(std::ostream& os, const std::string& name, const Tensor& t) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) write_u64(os, e);
    for (std::size_t i = 0; i < t.size(); ++i) write_f64(os, t[i]);
}

json config_to_json(const ModelState& state) {
    const ModelConfig& c = state.config;
    json j;
    j["n_layers"] = c.n_layers;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["ff_dim"] = c.ff_dim;
    j["vocab"] = c.vocab;
    j["max_seq"] = c.max_seq;
    j["layernorm_eps"] = c.layernorm_eps;
    j["gate_full_stream"] = c.gate_full_stream;
    j["mask_set"] = std::vector<std::size_t>(state.mask_set.begin(), state.mask_set.end());
    return j;
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("checkpoint: cannot open for writing: " + path.string());

    os.write(kMagic, 4);
    write_u32(os, kFormatVersion);

    const std::string cfg = config_to_json(state).dump();
    write_u64(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

    write_u32(os, static_cast<std::uint32_t>(state.layer_origin.size()));
    for (std::size_t orig : state.layer_origin) write_u64(os, orig);

    // ModelState is logically const here; parameters() needs a non-const ref.
    ModelState& s = const_cast<ModelState&>(state);
    std::vector<Parameter*> params = s.parameters();
    write_u64(os, params.size());
    for (const Parameter* p : params) write_tensor_record(os, p->name, p->value);
    if (!os) throw DataError("checkpoint: write failed: " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open: " + path.string());

    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw DataError("checkpoint: bad magic bytes (not a TRSP checkpoint)");
    }
    const std::uint32_t version = read_u32(is);
    if (version != kFormatVersion) {
        throw DataError("checkpoint: unsupported format version " + std::to_string(version));
    }

    const std::uint64_t cfg_len = read_u64(is);
    std::string cfg_str(cfg_len, '\0');
    is.read(cfg_str.data(), static_cast<std::streamsize>(cfg_len));
    if (!is) throw DataError("checkpoint: truncated file");

    json j;
    try {
        j = json::parse(cfg_str);
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint: bad config blob: ") + e.what());
    }
    ModelConfig cfg;
    cfg.n_layers = j.at("n_layers").get<std::size_t>();
    cfg.d_model = j.at("d_model").get<std::size_t>();
    cfg.n_heads = j.at("n_heads").get<std::size_t>();
    cfg.ff_dim = j.at("ff_dim").get<std::size_t>();
    cfg.vocab = j.at("vocab").get<std::size_t>();
    cfg.max_seq = j.at("max_seq").get<std::size_t>();
    cfg.layernorm_eps = j.at("layernorm_eps").get<double>();
    cfg.gate_full_stream = j.at("gate_full_stream").get<bool>();
    cfg.validate();

    ModelState state = ModelState::init(cfg, 0);
    state.mask_set.clear();
    for (std::size_t m : j.at("mask_set").get<std::vector<std::size_t>>()) {
        state.mask_set.insert(m);
    }

    const std::uint32_t n_prov = read_u32(is);
    if (n_prov != cfg.n_layers) throw DataError("checkpoint: provenance/config layer count mismatch");
    state.layer_origin.resize(n_prov);
    for (std::size_t i = 0; i < n_prov; ++i) state.layer_origin[i] = read_u64(is);

    std::vector<Parameter*> params = state.parameters();
    const std::uint64_t n_tensors = read_u64(is);
    if (n_tensors != params.size()) throw DataError("checkpoint: tensor count mismatch");
    for (Parameter* p : params) {
        const std::uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw DataError("checkpoint: truncated file");
        if (name != p->name) throw DataError("checkpoint: unexpected tensor '" + name + "'");
        const std::uint32_t rank = read_u32(is);
        std::vector<std::size_t> shape(rank);
        for (std::uint32_t r = 0; r < rank; ++r) shape[r] = read_u64(is);
        if (shape != p->value.shape()) {
            throw DataError("checkpoint: shape mismatch for tensor '" + name + "'");
        }
        for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = read_f64(is);
    }
    return state;
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

namespace {

TokenBatch sample_lm_batch(std::span<const std::size_t> tokens, std::size_t batch_size,
                           std::size_t seq_len, Rng& rng, std::vector<std::size_t>& targets) {
    TokenBatch b;
    b.batch = batch_size;
    b.seq = seq_len;
    b.tokens.resize(batch_size * seq_len);
    targets.resize(batch_size * seq_len);
    const std::size_t span = tokens.size() - seq_len - 1;
    for (std::size_t i = 0; i < batch_size; ++i) {
        const std::size_t off = rng.uniform_below(span + 1);
        for (std::size_t s = 0; s < seq_len; ++s) {
            b.tokens[i * seq_len + s] = tokens[off + s];
            targets[i * seq_len + s] = tokens[off + s + 1];
        }
    }
    return b;
}

}  // namespace

double mean_nll(ModelState& state, std::span<const std::size_t> tokens, std::size_t seq_len,
                std::size_t max_windows) {
    if (tokens.size() < seq_len + 1) throw DataError("mean_nll: token stream shorter than one window");
    double total = 0.0;
    std::size_t windows = 0;
    for (std::size_t off = 0; off + seq_len < tokens.size(); off += seq_len) {
        TokenBatch b;
        b.batch = 1;
        b.seq = seq_len;
        b.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(off),
                        tokens.begin() + static_cast<std::ptrdiff_t>(off + seq_len));
        std::vector<std::size_t> targets(tokens.begin() + static_cast<std::ptrdiff_t>(off + 1),
                                         tokens.begin() + static_cast<std::ptrdiff_t>(off + seq_len + 1));
        Tape tape;
        ForwardGraph g = forward_graph(tape, state, b);
        total += tape.value(tape.cross_entropy(g.logits, std::move(targets)))[0];
        ++windows;
        if (max_windows > 0 && windows >= max_windows) break;
    }
    return total / static_cast<double>(windows);
}

std::vector<LossCurvePoint> pretrain(ModelState& state,
                                     std::span<const std::size_t> train_tokens,
                                     std::span<const std::size_t> val_tokens,
                                     const PretrainConfig& cfg) {
    if (train_tokens.size() < cfg.seq_len + 1) {
        throw DataError("pretrain: corpus shorter than one sequence");
    }
    std::vector<LossCurvePoint> curve;
    if (cfg.max_steps == 0) return curve;

    Rng rng(Rng::derive(cfg.seed, "pretrain"));
    Adam opt(state.parameters(), {.lr = cfg.lr});

    double best_val = std::numeric_limits<double>::infinity();
    std::size_t evals_without_improvement = 0;
    std::vector<std::size_t> targets;

    for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
        TokenBatch batch = sample_lm_batch(train_tokens, cfg.batch_size, cfg.seq_len, rng, targets);
        Tape tape;
        ForwardGraph g = forward_graph(tape, state, batch);
        Tape::NodeId loss = tape.cross_entropy(g.logits, targets);
        const double train_loss = tape.value(loss)[0];
        tape.backward(loss);
        opt.step();

        if (step % cfg.eval_interval == 0 || step == cfg.max_steps) {
            const double val_loss = mean_nll(state, val_tokens, cfg.seq_len, cfg.eval_windows);
            curve.push_back({step, train_loss, val_loss});
            if (val_loss < best_val - cfg.min_delta) {
                best_val = val_loss;
                evals_without_improvement = 0;
            } else {
                ++evals_without_improvement;
                if (evals_without_improvement >= cfg.early_stop_threshold) break;
            }
        }
    }
    return curve;
}

}  // namespace trsp
