#pragma once

#include "musekit/base_model.hpp"

namespace musekit {

struct SuperResConfig {
    int enc_layers = 2;
    int dec_layers = 4;
    int dim = 128;
    int mlp_dim = 512;
    int heads = 4;
    int codebook_size = 256;        // high-res codebook K_hi
    int low_codebook_size = 256;    // base tokenizer codebook
    int low_h = 8, low_w = 8;
    int high_h = 16, high_w = 16;

    int mask_token() const { return codebook_size; }
    int low_cells() const { return low_h * low_w; }
    int high_cells() const { return high_h * high_w; }
    int cond_len() const { return low_cells() + kTextLen; }
    void check() const {
        require(mlp_dim == 4 * dim, error_kind::config, "mlp_dim must equal 4*dim");
        require(dim % heads == 0 && heads >= 1, error_kind::config, "dim must divide by heads");
        require(enc_layers >= 1 && dec_layers >= 1, error_kind::config, "need >=1 layer");
        require(codebook_size >= 2 && low_codebook_size >= 2, error_kind::config, "bad codebooks");
        require(low_h >= 1 && low_w >= 1 && high_h >= 1 && high_w >= 1, error_kind::config, "bad grids");
    }
};

inline void declare_superres_config(Config & c) {
    SuperResConfig d;
    c.declare_int("superres.enc_layers", d.enc_layers);
    c.declare_int("superres.dec_layers", d.dec_layers);
    c.declare_int("superres.dim", d.dim);
    c.declare_int("superres.mlp_dim", d.mlp_dim);
    c.declare_int("superres.heads", d.heads);
}

inline SuperResConfig superres_config_from(const Config & c, int hi_codebook, int low_codebook,
                                           int low_h, int low_w, int high_h, int high_w) {
    SuperResConfig s;
    s.enc_layers = (int)c.get_int("superres.enc_layers");
    s.dec_layers = (int)c.get_int("superres.dec_layers");
    s.dim = (int)c.get_int("superres.dim");
    s.mlp_dim = (int)c.get_int("superres.mlp_dim");
    s.heads = (int)c.get_int("superres.heads");
    s.codebook_size = hi_codebook;
    s.low_codebook_size = low_codebook;
    s.low_h = low_h;
    s.low_w = low_w;
    s.high_h = high_h;
    s.high_w = high_w;
    s.check();
    return s;
}

// token-space super-resolution: a self-attention encoder over the complete
// low-res grid feeds a conditioning sequence [64 low-res rows || 8 text rows]
// with learned segment offsets; the masked high-res stream cross-attends to it
template <class T>
struct SuperResModelT {
    SuperResConfig cfg;
    ParamStoreT<T> ps;
    FrozenEmbedder embedder;

    static SuperResModelT init(const SuperResConfig & cfg, uint64_t seed,
                               uint64_t embed_seed = kDefaultEmbedSeed) {
        cfg.check();
        SuperResModelT m;
        m.cfg = cfg;
        m.embedder = FrozenEmbedder::build(embed_seed);
        RngState rng = RngState::seeded(seed);
        m.ps.add("low.emb", gaussian_init<T>({cfg.low_codebook_size, cfg.dim}, rng, 0.02), false);
        m.ps.add("low.pos", gaussian_init<T>({cfg.low_cells(), cfg.dim}, rng, 0.02), false);
        for (int l = 0; l < cfg.enc_layers; ++l) {
            register_transformer_layer(m.ps, rng, "enc" + std::to_string(l), cfg.dim, cfg.mlp_dim,
                                       false);
        }
        register_layernorm(m.ps, "enc.ln", cfg.dim);
        register_linear(m.ps, rng, "text.proj", kTextDim, cfg.dim);
        m.ps.add("seg.low", gaussian_init<T>({cfg.dim}, rng, 0.02), false);
        m.ps.add("seg.text", gaussian_init<T>({cfg.dim}, rng, 0.02), false);
        m.ps.add("hi.emb", gaussian_init<T>({cfg.codebook_size + 1, cfg.dim}, rng, 0.02), false);
        m.ps.add("hi.pos", gaussian_init<T>({cfg.high_cells(), cfg.dim}, rng, 0.02), false);
        for (int l = 0; l < cfg.dec_layers; ++l) {
            register_transformer_layer(m.ps, rng, "dec" + std::to_string(l), cfg.dim, cfg.mlp_dim,
                                       true);
        }
        register_layernorm(m.ps, "ln_f", cfg.dim);
        register_linear(m.ps, rng, "head.fc1", cfg.dim, cfg.dim);
        register_linear(m.ps, rng, "head.fc2", cfg.dim, cfg.codebook_size);
        return m;
    }

    TextEmbeddingSeq encode_text(const std::string & caption) const {
        return with_positions(embedder.embed(caption));
    }

    // low-res conditioning must be complete (no mask ids); hires may be masked
    Var forward_fw(TapeT<T> & tape, const TokenGrid & low, const TextEmbeddingSeq & text,
                   const TokenGrid & hires, bool drop_text) const {
        require(low.h == cfg.low_h && low.w == cfg.low_w, error_kind::contract,
                "superres: low-res grid shape mismatch");
        require(hires.h == cfg.high_h && hires.w == cfg.high_w, error_kind::contract,
                "superres: high-res grid shape mismatch");
        for (int t : low.tokens) {
            require(t >= 0 && t < cfg.low_codebook_size, error_kind::contract,
                    "superres: low-res conditioning must be complete (unmasked)");
        }
        for (int t : hires.tokens) {
            require(t >= 0 && t <= cfg.mask_token(), error_kind::token,
                    "superres: high-res token id out of range");
        }
        const TextEmbeddingSeq & seq = drop_text ? empty_text() : text;
        auto & ps_m = const_cast<ParamStoreT<T> &>(ps);

        Var xl = tape.add(tape.embed_rows(ps_m.var("low.emb"), low.tokens), ps_m.var("low.pos"));
        for (int l = 0; l < cfg.enc_layers; ++l) {
            xl = transformer_layer_fw(tape, ps_m, "enc" + std::to_string(l), xl, cfg.heads);
        }
        xl = layernorm_fw(tape, ps_m, "enc.ln", xl);
        xl = tape.bias_add(xl, ps_m.var("seg.low"));

        Var traw = tape.constant(seq.vectors.template cast<T>());
        Var tproj = tape.bias_add(linear_fw(tape, ps_m, "text.proj", traw), ps_m.var("seg.text"));

        Var cond = tape.concat_rows(xl, tproj);    // low-res first, fixed convention
        std::vector<uint8_t> cond_valid((size_t)cfg.cond_len(), 1);
        for (int i = 0; i < kTextLen; ++i) {
            cond_valid[(size_t)(cfg.low_cells() + i)] = seq.valid[(size_t)i];
        }

        Var x = tape.add(tape.embed_rows(ps_m.var("hi.emb"), hires.tokens), ps_m.var("hi.pos"));
        for (int l = 0; l < cfg.dec_layers; ++l) {
            x = transformer_layer_fw(tape, ps_m, "dec" + std::to_string(l), x, cfg.heads, cond,
                                     cond_valid);
        }
        x = layernorm_fw(tape, ps_m, "ln_f", x);
        Var h = tape.gelu(linear_fw(tape, ps_m, "head.fc1", x));
        return linear_fw(tape, ps_m, "head.fc2", h);
    }

    DTensor logits(const TokenGrid & low, const TextEmbeddingSeq & text, const TokenGrid & hires,
                   bool drop_text) const {
        TapeT<T> tape(false);
        const_cast<ParamStoreT<T> &>(ps).stage(tape, false);
        Var out = forward_fw(tape, low, text, hires, drop_text);
        return tape.value(out).template cast<double>();
    }

private:
    const TextEmbeddingSeq & empty_text() const {
        if (empty_.vectors.size() == 0) {
            const_cast<SuperResModelT *>(this)->empty_ = encode_text("");
        }
        return empty_;
    }
    TextEmbeddingSeq empty_;
};

using SuperResModel = SuperResModelT<float>;

} // namespace musekit
