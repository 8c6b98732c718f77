#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "trsp/tape.hpp"
#include "trsp/tensor.hpp"

namespace trsp {

struct ModelConfig {
    std::size_t n_layers = 8;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t ff_dim = 256;
    std::size_t vocab = 257;
    std::size_t max_seq = 128;
    double layernorm_eps = 1e-5;
    /// true: the gate scales the whole post-residual layer output;
    /// false: the gate scales only the layer's residual delta.
    bool gate_full_stream = true;

    void validate() const;
};

/// Parameters of one pre-norm decoder block.
struct LayerParams {
    Parameter ln1_g, ln1_b;
    Parameter wq, bq, wk, bk, wv, bv, wo, bo;
    Parameter ln2_g, ln2_b;
    Parameter w1, b1, w2, b2;
};

/// Full model: embeddings, blocks, head, per-layer gates, and the mask set.
/// mask_set and all pruning bookkeeping use ORIGINAL layer indices; the
/// layer_origin array maps current positions back to them.
struct ModelState {
    ModelConfig config;
    Parameter tok_emb;            // [vocab, d]
    Parameter pos_emb;            // [max_seq, d]
    std::vector<LayerParams> layers;
    Parameter final_ln_g, final_ln_b;
    Parameter head_w;             // [d, vocab]
    Parameter head_b;             // [vocab]
    Parameter gates;              // [n_layers], one scalar per current layer
    std::vector<std::size_t> layer_origin;
    std::set<std::size_t> mask_set;

    static ModelState init(const ModelConfig& cfg, std::uint64_t seed);

    std::size_t n_layers() const { return layers.size(); }
    bool is_masked(std::size_t original_idx) const { return mask_set.count(original_idx) > 0; }
    /// Current position of a layer given its original index.
    std::optional<std::size_t> position_of(std::size_t original_idx) const;
    /// Original indices of layers not currently masked, ascending.
    std::vector<std::size_t> unmasked_original_indices() const;

    /// Every parameter in a fixed traversal order (checkpoint/optimizer order).
    std::vector<Parameter*> parameters();
    std::vector<Parameter*> layer_parameters(std::size_t position);
};

struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::size_t> tokens;  // batch*seq, row-major

    std::size_t id(std::size_t b, std::size_t s) const { return tokens[b * seq + s]; }
};

struct ForwardOptions {
    bool apply_gates = true;  // false selects the ungated reference path
    bool trace = false;       // record per-layer input/output nodes
};

struct ForwardGraph {
    Tape::NodeId logits = Tape::kInvalid;
    // Indexed by current layer position; kInvalid for masked layers or when
    // tracing is off. layer_out is the raw block output (pre-gate);
    // stream_out is what actually enters the next layer (post-gate), i.e.
    // the quantity a structural removal would replace with layer_in.
    std::vector<Tape::NodeId> layer_in;
    std::vector<Tape::NodeId> layer_out;
    std::vector<Tape::NodeId> stream_out;
};

/// Build the forward computation on the tape. Masked layers are skipped
/// entirely: the residual stream passes through unchanged and no gate is
/// applied.
ForwardGraph forward_graph(Tape& tape, ModelState& state, const TokenBatch& batch,
                           const ForwardOptions& opts = {});

/// Convenience: forward only, returning the logits tensor [B, S, vocab].
Tensor forward_logits(ModelState& state, const TokenBatch& batch,
                      const ForwardOptions& opts = {});

/// Bypass a layer (by original index). Masking an already-masked layer is
/// an error, not a no-op.
void mask_layer(ModelState& state, std::size_t original_idx);
void unmask_layer(ModelState& state, std::size_t original_idx);

/// Structurally remove the given layers (original indices, distinct).
/// Surviving layers keep their relative order, gates and provenance.
ModelState prune(const ModelState& state, const std::vector<std::size_t>& prune_set);

// Checkpoint format: "TRSP" magic, u32 format version, length-prefixed JSON
// config blob, layer-provenance array, then per-tensor records
// (name, rank, extents, little-endian f64 data).
void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);

struct PretrainConfig {
    std::size_t max_steps = 2000;
    std::size_t batch_size = 8;
    std::size_t seq_len = 64;
    double lr = 1e-3;
    std::size_t eval_interval = 50;
    std::size_t eval_windows = 16;
    double min_delta = 1e-4;
    std::size_t early_stop_threshold = 5;
    std::uint64_t seed = 0;
};

struct LossCurvePoint {
    std::size_t step = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

/// Language-model training with cross-entropy on next-token targets.
/// Stops early once validation loss has failed to improve by min_delta for
/// early_stop_threshold consecutive evaluations.
std::vector<LossCurvePoint> pretrain(ModelState& state,
                                     std::span<const std::size_t> train_tokens,
                                     std::span<const std::size_t> val_tokens,
                                     const PretrainConfig& cfg);

/// Mean next-token NLL over fixed non-overlapping windows of a token stream.
double mean_nll(ModelState& state, std::span<const std::size_t> tokens,
                std::size_t seq_len, std::size_t max_windows = 0);

}  // namespace trsp
