#include "musekit/text_encoder.hpp"

#include "musekit/shapes.hpp"
#include "musekit/tape.hpp"

#include <cmath>
#include <sstream>

namespace musekit {

Vocabulary Vocabulary::build() {
    Vocabulary v;
    auto add = [&](const std::string & w) {
        v.ids[w] = (int)v.words.size();
        v.words.push_back(w);
    };
    add("[PAD]");
    add("[EMPTY]");
    for (const char * w : {"one", "two", "three", "four"}) add(w);
    for (int i = 0; i < 4; ++i) add(color_name((obj_color)i));
    for (int i = 0; i < 3; ++i) {
        add(shape_name((obj_shape)i));
        add(std::string(shape_name((obj_shape)i)) + "s");
    }
    for (int i = 0; i < 4; ++i) add(relation_name((relation)i));
    return v;
}

int Vocabulary::id(const std::string & word) const {
    auto it = ids.find(word);
    if (it == ids.end()) fail(error_kind::vocab, "word not in vocabulary: '" + word + "'");
    return it->second;
}

std::string Vocabulary::joined() const {
    std::string out;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) out += " ";
        out += words[i];
    }
    return out;
}

FrozenEmbedder FrozenEmbedder::build(uint64_t seed) {
    FrozenEmbedder e;
    e.vocab = Vocabulary::build();
    e.seed = seed;
    e.table = Tensor::zeros({e.vocab.size(), kTextDim});
    RngState rng = RngState::seeded(seed);
    const float sd = 1.0f / std::sqrt((float)kTextDim);
    // [PAD] row stays zero; remaining rows drawn in id order
    for (int w = 1; w < e.vocab.size(); ++w) {
        for (int d = 0; d < kTextDim; ++d) e.table.at2(w, d) = sd * (float)rng.normal();
    }
    return e;
}

TextEmbeddingSeq FrozenEmbedder::embed(const std::string & caption) const {
    std::istringstream is(caption);
    std::vector<int> tokens;
    std::string w;
    while (is >> w) tokens.push_back(vocab.id(w));
    if (tokens.empty()) tokens.push_back(vocab.empty_id());
    require((int)tokens.size() <= kTextLen, error_kind::vocab,
            "caption longer than " + std::to_string(kTextLen) + " words: '" + caption + "'");
    TextEmbeddingSeq seq;
    seq.vectors = Tensor::zeros({kTextLen, kTextDim});
    seq.valid.assign(kTextLen, 0);
    for (size_t i = 0; i < tokens.size(); ++i) {
        seq.valid[i] = 1;
        for (int d = 0; d < kTextDim; ++d) seq.vectors.at2((int)i, d) = table.at2(tokens[i], d);
    }
    return seq;
}

TextEmbeddingSeq with_positions(const TextEmbeddingSeq & seq) {
    TextEmbeddingSeq out = seq;
    const float scale = 0.25f;
    for (int pos = 0; pos < kTextLen; ++pos) {
        if (!seq.valid[(size_t)pos]) continue;
        for (int i = 0; i < kTextDim / 2; ++i) {
            const double freq = std::pow(10000.0, -2.0 * i / kTextDim);
            out.vectors.at2(pos, 2 * i) += scale * (float)std::sin(pos * freq);
            out.vectors.at2(pos, 2 * i + 1) += scale * (float)std::cos(pos * freq);
        }
    }
    return out;
}

Tensor project(const TextEmbeddingSeq & seq, const Tensor & W) {
    require(W.rank() == 2 && W.rows() == kTextDim, error_kind::shape,
            "project: W must be [" + std::to_string(kTextDim) + ", D_model]");
    Tensor out = Tensor::zeros({kTextLen, W.cols()});
    mm_acc_nn(seq.vectors.data.data(), W.data.data(), out.data.data(), kTextLen, kTextDim, W.cols());
    return out;
}

} // namespace musekit
