#pragma once

#include "musekit/config.hpp"
#include "musekit/nn.hpp"
#include "musekit/text_encoder.hpp"
#include "musekit/vq_tokenizer.hpp"

namespace musekit {

struct MaskGrid {
    int h = 0, w = 0;
    std::vector<uint8_t> on;    // true = hidden

    static MaskGrid filled(int h, int w, bool v) {
        MaskGrid m;
        m.h = h;
        m.w = w;
        m.on.assign((size_t)h * w, v ? 1 : 0);
        return m;
    }
    uint8_t & at(int r, int c) { return on[(size_t)r * w + c]; }
    uint8_t at(int r, int c) const { return on[(size_t)r * w + c]; }
    int count() const {
        int n = 0;
        for (uint8_t b : on) n += b ? 1 : 0;
        return n;
    }
    bool operator==(const MaskGrid &) const = default;
};

// inverse CDF of the arccos masking density p(r) = (2/pi) / sqrt(1 - r^2)
inline double sample_mask_rate(double u) {
    require(u >= 0.0 && u < 1.0, error_kind::contract, "sample_mask_rate: u outside [0,1)");
    return std::sin(kPi * u / 2.0);
}
inline double sample_mask_rate(RngState & rng) { return sample_mask_rate(rng.uniform()); }

// replace exactly ceil(r*h*w) uniformly chosen cells with mask_id
inline std::pair<TokenGrid, MaskGrid> apply_mask(const TokenGrid & g, double r, RngState & rng,
                                                 int mask_id) {
    require(r >= 0.0 && r <= 1.0, error_kind::contract, "apply_mask: rate outside [0,1]");
    const int total = g.count();
    const int n = (int)std::ceil(r * total);
    TokenGrid out = g;
    MaskGrid mask = MaskGrid::filled(g.h, g.w, false);
    std::vector<int> cells(total);
    for (int i = 0; i < total; ++i) cells[i] = i;
    for (int i = 0; i < n; ++i) {
        const int j = i + (int)rng.below((uint32_t)(total - i));
        std::swap(cells[i], cells[j]);
        out.tokens[(size_t)cells[i]] = mask_id;
        mask.on[(size_t)cells[i]] = 1;
    }
    return {out, mask};
}

struct BaseModelConfig {
    int layers = 4;
    int dim = 128;
    int mlp_dim = 512;
    int heads = 4;
    int codebook_size = 256;
    int grid_h = 8;
    int grid_w = 8;

    int mask_token() const { return codebook_size; }    // one row past the codebook
    int cells() const { return grid_h * grid_w; }
    void check() const {
        require(mlp_dim == 4 * dim, error_kind::config, "mlp_dim must equal 4*dim");
        require(dim % heads == 0 && heads >= 1, error_kind::config, "dim must divide by heads");
        require(layers >= 1, error_kind::config, "need >=1 layer");
        require(codebook_size >= 2 && grid_h >= 1 && grid_w >= 1, error_kind::config, "bad dims");
    }
};

inline void declare_base_config(Config & c) {
    BaseModelConfig d;
    c.declare_int("base.layers", d.layers);
    c.declare_int("base.dim", d.dim);
    c.declare_int("base.mlp_dim", d.mlp_dim);
    c.declare_int("base.heads", d.heads);
}

inline BaseModelConfig base_config_from(const Config & c, int codebook_size, int grid_h, int grid_w) {
    BaseModelConfig b;
    b.layers = (int)c.get_int("base.layers");
    b.dim = (int)c.get_int("base.dim");
    b.mlp_dim = (int)c.get_int("base.mlp_dim");
    b.heads = (int)c.get_int("base.heads");
    b.codebook_size = codebook_size;
    b.grid_h = grid_h;
    b.grid_w = grid_w;
    b.check();
    return b;
}

// masked token predictor: self-attention over grid cells with learned 2D
// positions, cross-attention to the projected caption sequence, GELU MLPs
template <class T>
struct BaseModelT {
    BaseModelConfig cfg;
    ParamStoreT<T> ps;
    FrozenEmbedder embedder;

    static BaseModelT init(const BaseModelConfig & cfg, uint64_t seed,
                           uint64_t embed_seed = kDefaultEmbedSeed) {
        cfg.check();
        BaseModelT m;
        m.cfg = cfg;
        m.embedder = FrozenEmbedder::build(embed_seed);
        RngState rng = RngState::seeded(seed);
        m.ps.add("tok.emb", gaussian_init<T>({cfg.codebook_size + 1, cfg.dim}, rng, 0.02), false);
        m.ps.add("pos.emb", gaussian_init<T>({cfg.cells(), cfg.dim}, rng, 0.02), false);
        register_linear(m.ps, rng, "text.proj", kTextDim, cfg.dim);
        for (int l = 0; l < cfg.layers; ++l) {
            register_transformer_layer(m.ps, rng, "l" + std::to_string(l), cfg.dim, cfg.mlp_dim, true);
        }
        register_layernorm(m.ps, "ln_f", cfg.dim);
        register_linear(m.ps, rng, "head.fc1", cfg.dim, cfg.dim);
        register_linear(m.ps, rng, "head.fc2", cfg.dim, cfg.codebook_size);
        return m;
    }

    TextEmbeddingSeq encode_text(const std::string & caption) const {
        return with_positions(embedder.embed(caption));
    }

    // grid may contain mask ids; returns [h*w, K] logits; assumes ps staged
    Var forward_fw(TapeT<T> & tape, const TokenGrid & grid, const TextEmbeddingSeq & text,
                   bool drop_text) const {
        require(grid.h == cfg.grid_h && grid.w == cfg.grid_w, error_kind::contract,
                "base forward: grid shape mismatch");
        for (int t : grid.tokens) {
            require(t >= 0 && t <= cfg.mask_token(), error_kind::token,
                    "base forward: token id out of range");
        }
        const TextEmbeddingSeq & seq = drop_text ? empty_text() : text;
        auto & ps_m = const_cast<ParamStoreT<T> &>(ps);
        Var x = tape.add(tape.embed_rows(ps_m.var("tok.emb"), grid.tokens), ps_m.var("pos.emb"));
        Var traw = tape.constant(seq.vectors.template cast<T>());
        Var tproj = linear_fw(tape, ps_m, "text.proj", traw);
        for (int l = 0; l < cfg.layers; ++l) {
            x = transformer_layer_fw(tape, ps_m, "l" + std::to_string(l), x, cfg.heads, tproj,
                                     seq.valid);
        }
        x = layernorm_fw(tape, ps_m, "ln_f", x);
        Var h = tape.gelu(linear_fw(tape, ps_m, "head.fc1", x));
        return linear_fw(tape, ps_m, "head.fc2", h);
    }

    // inference helper: fresh constant tape, logits as doubles for guidance math
    DTensor logits(const TokenGrid & grid, const TextEmbeddingSeq & text, bool drop_text) const {
        TapeT<T> tape(false);
        const_cast<ParamStoreT<T> &>(ps).stage(tape, false);
        Var out = forward_fw(tape, grid, text, drop_text);
        return tape.value(out).template cast<double>();
    }

private:
    const TextEmbeddingSeq & empty_text() const {
        if (empty_.vectors.size() == 0) {
            const_cast<BaseModelT *>(this)->empty_ = encode_text("");
        }
        return empty_;
    }
    TextEmbeddingSeq empty_;
};

using BaseModel = BaseModelT<float>;

} // namespace musekit
