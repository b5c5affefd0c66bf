#pragma once

#include "musekit/rng.hpp"
#include "musekit/tensor.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace musekit {

constexpr int kTextDim = 64;
constexpr int kTextLen = 8;
constexpr uint64_t kDefaultEmbedSeed = 0x6d75736b6974ULL;

// Fixed caption-grammar vocabulary. Ids are dense from 0; [PAD]=0, [EMPTY]=1.
struct Vocabulary {
    std::vector<std::string> words;
    std::unordered_map<std::string, int> ids;

    static Vocabulary build();
    int id(const std::string & word) const;    // vocabulary error naming the word
    int pad_id() const { return 0; }
    int empty_id() const { return 1; }
    int size() const { return (int)words.size(); }
    std::string joined() const;
};

// Length-8 padded embedding sequence; padding rows are zero and flagged
// invalid for attention masking.
struct TextEmbeddingSeq {
    Tensor vectors;                // [kTextLen, kTextDim]
    std::vector<uint8_t> valid;    // 1 = real token
};

// Frozen pseudo-random word table: one Gaussian vector per word (component
// stddev 1/sqrt(D) so the expected norm is 1), drawn once from a constant
// seed. Never updated by training. The empty caption embeds as [EMPTY].
struct FrozenEmbedder {
    Vocabulary vocab;
    uint64_t seed = kDefaultEmbedSeed;
    Tensor table;    // [V, kTextDim], [PAD] row all zero

    static FrozenEmbedder build(uint64_t seed = kDefaultEmbedSeed);
    TextEmbeddingSeq embed(const std::string & caption) const;
};

// adds the fixed sinusoidal caption-position code (scaled by 0.25) to the
// non-padding rows; this is what gives relations their word order
TextEmbeddingSeq with_positions(const TextEmbeddingSeq & seq);

// plain per-position matrix product, padding flags pass through; models run
// the same product on-tape so the projection trains
Tensor project(const TextEmbeddingSeq & seq, const Tensor & W);

} // namespace musekit
