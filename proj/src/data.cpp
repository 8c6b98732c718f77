#include "trsp/data.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "trsp/errors.hpp"

namespace trsp {

namespace {

/// Decode UTF-8 into codepoints; throws DataError on malformed input.
std::vector<std::uint32_t> decode_utf8(const std::string& text) {
    std::vector<std::uint32_t> out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        const unsigned char c0 = static_cast<unsigned char>(text[i]);
        std::size_t extra = 0;
        std::uint32_t cp = 0;
        if (c0 < 0x80) {
            cp = c0;
        } else if ((c0 & 0xe0) == 0xc0) {
            cp = c0 & 0x1f;
            extra = 1;
        } else if ((c0 & 0xf0) == 0xe0) {
            cp = c0 & 0x0f;
            extra = 2;
        } else if ((c0 & 0xf8) == 0xf0) {
            cp = c0 & 0x07;
            extra = 3;
        } else {
            throw DataError("invalid UTF-8 byte in corpus");
        }
        if (i + extra >= text.size()) throw DataError("truncated UTF-8 sequence in corpus");
        for (std::size_t k = 1; k <= extra; ++k) {
            const unsigned char c = static_cast<unsigned char>(text[i + k]);
            if ((c & 0xc0) != 0x80) throw DataError("invalid UTF-8 continuation byte in corpus");
            cp = (cp << 6) | (c & 0x3f);
        }
        out.push_back(cp);
        i += extra + 1;
    }
    return out;
}

void encode_utf8(std::uint32_t cp, std::string& out) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else {
        out.push_back(static_cast<char>(0xf0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    }
}

}  // namespace

Tokenizer Tokenizer::byte_level() {
    Tokenizer t;
    t.mode_ = TokenizerMode::Byte;
    return t;
}

Tokenizer Tokenizer::char_level(const std::string& corpus_text) {
    Tokenizer t;
    t.mode_ = TokenizerMode::Char;
    std::vector<std::uint32_t> cps = decode_utf8(corpus_text);
    std::sort(cps.begin(), cps.end());
    cps.erase(std::unique(cps.begin(), cps.end()), cps.end());
    t.id_to_codepoint_ = std::move(cps);
    return t;
}

std::size_t Tokenizer::vocab_size() const {
    return mode_ == TokenizerMode::Byte ? 257 : id_to_codepoint_.size();
}

std::vector<std::size_t> Tokenizer::encode(const std::string& text) const {
    std::vector<std::size_t> out;
    if (mode_ == TokenizerMode::Byte) {
        out.reserve(text.size());
        for (char c : text) out.push_back(static_cast<unsigned char>(c));
        return out;
    }
    for (std::uint32_t cp : decode_utf8(text)) {
        auto it = std::lower_bound(id_to_codepoint_.begin(), id_to_codepoint_.end(), cp);
        if (it == id_to_codepoint_.end() || *it != cp) {
            throw DataError("tokenizer: codepoint not in corpus-derived vocabulary");
        }
        out.push_back(static_cast<std::size_t>(it - id_to_codepoint_.begin()));
    }
    return out;
}

std::string Tokenizer::decode(std::span<const std::size_t> ids) const {
    std::string out;
    if (mode_ == TokenizerMode::Byte) {
        for (std::size_t id : ids) {
            if (id < 256) out.push_back(static_cast<char>(id));
            // specials decode to nothing
        }
        return out;
    }
    for (std::size_t id : ids) {
        if (id >= id_to_codepoint_.size()) throw DataError("tokenizer: id out of vocabulary");
        encode_utf8(id_to_codepoint_[id], out);
    }
    return out;
}

Corpus corpus_from_text(const std::string& text, TokenizerMode mode, std::string source_name,
                        SplitFractions fractions, std::uint64_t seed) {
    if (text.empty()) throw DataError("corpus is empty: " + source_name);
    Corpus c;
    c.tokenizer = mode == TokenizerMode::Byte ? Tokenizer::byte_level()
                                              : Tokenizer::char_level(text);
    c.tokens = c.tokenizer.encode(text);
    c.source = std::move(source_name);
    c.seed = seed;
    const double total = fractions.train + fractions.val + fractions.test;
    if (total <= 0.0 || fractions.train <= 0.0) {
        throw ConfigError("corpus: split fractions must be positive");
    }
    const std::size_t n = c.tokens.size();
    c.train_end = static_cast<std::size_t>(static_cast<double>(n) * fractions.train / total);
    c.val_end = c.train_end + static_cast<std::size_t>(static_cast<double>(n) * fractions.val / total);
    c.val_end = std::min(c.val_end, n);
    return c;
}

Corpus load_corpus(const std::filesystem::path& path, TokenizerMode mode,
                   SplitFractions fractions, std::uint64_t seed) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open corpus file: " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return corpus_from_text(ss.str(), mode, path.string(), fractions, seed);
}

std::string CalibrationSet::to_json() const {
    nlohmann::json j;
    j["n_sequences"] = n_sequences;
    j["seq_len"] = seq_len;
    j["offsets"] = offsets;
    j["source"] = source;
    j["seed"] = seed;
    return j.dump(2);
}

CalibrationSet calibration_from_offsets(const Corpus& corpus, std::span<const std::size_t> offsets,
                                        std::size_t len, std::uint64_t seed) {
    CalibrationSet set;
    set.n_sequences = offsets.size();
    set.seq_len = len;
    set.offsets.assign(offsets.begin(), offsets.end());
    set.source = corpus.source;
    set.seed = seed;
    auto train = corpus.train();
    set.tokens.reserve(set.n_sequences * len);
    for (std::size_t off : offsets) {
        if (off + len > train.size()) throw DataError("calibration: offset outside train split");
        set.tokens.insert(set.tokens.end(), train.begin() + static_cast<std::ptrdiff_t>(off),
                          train.begin() + static_cast<std::ptrdiff_t>(off + len));
    }
    return set;
}

CalibrationSet sample_calibration(const Corpus& corpus, std::size_t n, std::size_t len,
                                  std::uint64_t seed) {
    auto train = corpus.train();
    if (n == 0 || len == 0) throw ConfigError("calibration: n and len must be positive");
    if (train.size() < n * len) {
        throw DataError("calibration: train split too small for without-replacement sampling");
    }
    // Uniform non-overlapping placement: draw n slack values in [0, free],
    // sort, then shift the i-th window right by i*len.
    Rng rng(Rng::derive(seed, "calibration"));
    const std::size_t free_slack = train.size() - n * len;
    std::vector<std::size_t> slack(n);
    for (std::size_t i = 0; i < n; ++i) slack[i] = rng.uniform_below(free_slack + 1);
    std::sort(slack.begin(), slack.end());
    std::vector<std::size_t> offsets(n);
    for (std::size_t i = 0; i < n; ++i) offsets[i] = slack[i] + i * len;
    return calibration_from_offsets(corpus, offsets, len, seed);
}

std::string synthetic_corpus(std::size_t n_chars, std::uint64_t seed) {
    // Order-2 Markov chain over a small alphabet. Successor candidates are
    // drawn from a skewed global popularity so the text has strong order-1
    // structure (cheap early wins for a briefly trained model) on top of
    // the order-2 structure that rewards attention.
    static constexpr char kAlphabet[] = "abcdefghijklmnopqrstuvwxyz .";
    constexpr std::size_t kA = sizeof(kAlphabet) - 1;
    Rng rng(Rng::derive(seed, "synthetic-corpus"));

    // Zipf-like popularity over a seeded permutation of the alphabet.
    std::array<std::size_t, kA> perm;
    for (std::size_t i = 0; i < kA; ++i) perm[i] = i;
    for (std::size_t i = kA; i > 1; --i) {
        std::swap(perm[i - 1], perm[rng.uniform_below(i)]);
    }
    std::array<double, kA> pop_cum;
    double pop_total = 0.0;
    for (std::size_t r = 0; r < kA; ++r) {
        pop_total += 1.0 / static_cast<double>(r + 2);
        pop_cum[r] = pop_total;
    }
    auto draw_popular = [&]() {
        const double u = rng.uniform() * pop_total;
        std::size_t r = 0;
        while (r < kA - 1 && u > pop_cum[r]) ++r;
        return perm[r];
    };

    // successors[c1*kA+c2] -> 4 candidate next symbols + cumulative weights
    struct Succ {
        std::array<std::uint8_t, 4> next;
        std::array<double, 4> cum;
    };
    std::vector<Succ> table(kA * kA);
    for (Succ& s : table) {
        double total = 0.0;
        std::array<double, 4> w;
        for (int k = 0; k < 4; ++k) {
            s.next[k] = static_cast<std::uint8_t>(draw_popular());
            const double u = rng.uniform();
            w[k] = 0.05 + u * u;  // skewed weights keep per-context entropy low
            total += w[k];
        }
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) {
            acc += w[k] / total;
            s.cum[k] = acc;
        }
    }

    std::string out;
    out.reserve(n_chars);
    std::size_t c1 = 0;
    std::size_t c2 = 1;
    for (std::size_t i = 0; i < n_chars; ++i) {
        const Succ& s = table[c1 * kA + c2];
        const double u = rng.uniform();
        std::size_t k = 0;
        while (k < 3 && u > s.cum[k]) ++k;
        const std::size_t c3 = s.next[k];
        out.push_back(kAlphabet[c3]);
        c1 = c2;
        c2 = c3;
    }
    return out;
}

}  // namespace trsp
