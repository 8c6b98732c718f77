#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "trsp/tensor.hpp"

namespace trsp {

enum class TokenizerMode { Byte, Char };

/// Byte mode: ids 0..255 are raw bytes, 256 is the pad/bos special
/// (vocab 257). Char mode: corpus-derived vocabulary over Unicode
/// codepoints, so token boundaries can never split a multi-byte character.
class Tokenizer {
public:
    static Tokenizer byte_level();
    static Tokenizer char_level(const std::string& corpus_text);

    TokenizerMode mode() const { return mode_; }
    std::size_t vocab_size() const;

    std::vector<std::size_t> encode(const std::string& text) const;
    std::string decode(std::span<const std::size_t> ids) const;

    static constexpr std::size_t kByteSpecialPad = 256;

private:
    TokenizerMode mode_ = TokenizerMode::Byte;
    std::vector<std::uint32_t> id_to_codepoint_;  // char mode only, sorted
};

struct SplitFractions {
    double train = 0.90;
    double val = 0.05;
    double test = 0.05;
};

/// Tokenized corpus with contiguous train/validation/test splits.
struct Corpus {
    Tokenizer tokenizer;
    std::vector<std::size_t> tokens;
    std::size_t train_end = 0;  // [0, train_end)
    std::size_t val_end = 0;    // [train_end, val_end); test is the tail
    std::string source;
    std::uint64_t seed = 0;

    std::span<const std::size_t> train() const {
        return {tokens.data(), train_end};
    }
    std::span<const std::size_t> val() const {
        return {tokens.data() + train_end, val_end - train_end};
    }
    std::span<const std::size_t> test() const {
        return {tokens.data() + val_end, tokens.size() - val_end};
    }
};

Corpus load_corpus(const std::filesystem::path& path, TokenizerMode mode,
                   SplitFractions fractions = {}, std::uint64_t seed = 0);
Corpus corpus_from_text(const std::string& text, TokenizerMode mode, std::string source_name,
                        SplitFractions fractions = {}, std::uint64_t seed = 0);

/// Fixed sample of contiguous train-split windows driving both
/// regularization stages.
struct CalibrationSet {
    std::size_t n_sequences = 0;
    std::size_t seq_len = 0;
    std::vector<std::size_t> offsets;  // into the train split, pairwise non-overlapping
    std::vector<std::size_t> tokens;   // n_sequences x seq_len, row-major
    std::string source;
    std::uint64_t seed = 0;

    std::span<const std::size_t> sequence(std::size_t i) const {
        return {tokens.data() + i * seq_len, seq_len};
    }

    std::string to_json() const;
};

/// Draw n non-overlapping contiguous windows of length len from the train
/// split, uniformly over all non-overlapping placements; reproducible by
/// seed.
CalibrationSet sample_calibration(const Corpus& corpus, std::size_t n, std::size_t len,
                                  std::uint64_t seed);

/// Rebuild a calibration set from exported offsets (exact rerun support).
CalibrationSet calibration_from_offsets(const Corpus& corpus, std::span<const std::size_t> offsets,
                                        std::size_t len, std::uint64_t seed);

/// Deterministic synthetic character corpus with learnable order-2
/// structure; used for desk-scale experiments when no text file is given.
std::string synthetic_corpus(std::size_t n_chars, std::uint64_t seed);

}  // namespace trsp
