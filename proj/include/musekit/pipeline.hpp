#pragma once

#include "musekit/editing.hpp"
#include "musekit/trainer.hpp"

namespace musekit {

// the four trained pieces a generation run needs, role-checked on load
struct Pipeline {
    Tokenizer tok_base, tok_hi;
    BaseModel base;
    SuperResModel superres;

    static Pipeline load(const std::string & tok_base_path, const std::string & tok_hi_path,
                         const std::string & base_path, const std::string & superres_path) {
        Pipeline p;
        p.tok_base = load_tokenizer(tok_base_path, "tokenizer.base");
        p.tok_hi = load_tokenizer(tok_hi_path, "tokenizer.highres");
        p.base = load_base_model(base_path);
        p.superres = load_superres_model(superres_path);
        p.validate();
        return p;
    }

    // untrained pipeline at the default desk shapes (counters and shape tests
    // do not depend on weights)
    static Pipeline random_init(uint64_t seed) {
        Pipeline p;
        TokenizerConfig tc;
        p.tok_base = Tokenizer::init(tc, seed);
        p.tok_hi = Tokenizer::init(tc, seed + 1);
        BaseModelConfig bc;
        bc.codebook_size = tc.codebook_size;
        bc.grid_h = kLowSize / tc.f;
        bc.grid_w = kLowSize / tc.f;
        p.base = BaseModel::init(bc, seed + 2);
        SuperResConfig sc;
        sc.codebook_size = tc.codebook_size;
        sc.low_codebook_size = tc.codebook_size;
        sc.low_h = bc.grid_h;
        sc.low_w = bc.grid_w;
        sc.high_h = kHighSize / tc.f;
        sc.high_w = kHighSize / tc.f;
        p.superres = SuperResModel::init(sc, seed + 3);
        p.validate();
        return p;
    }

    void validate() const {
        require(base.cfg.codebook_size == tok_base.cfg.codebook_size, error_kind::checkpoint,
                "base model / base tokenizer codebook mismatch");
        require(superres.cfg.codebook_size == tok_hi.cfg.codebook_size, error_kind::checkpoint,
                "superres model / highres tokenizer codebook mismatch");
        require(superres.cfg.low_codebook_size == tok_base.cfg.codebook_size, error_kind::checkpoint,
                "superres conditioning / base tokenizer codebook mismatch");
        require(superres.cfg.low_h == base.cfg.grid_h && superres.cfg.low_w == base.cfg.grid_w,
                error_kind::checkpoint, "superres low grid / base grid mismatch");
    }

    GenerateResult generate(const std::string & caption, const SamplerConfig & cfg,
                            RngState & rng) const {
        return musekit::generate(caption, base, superres, tok_base, tok_hi, cfg, rng);
    }

    InpaintResult inpaint(const SceneImage & image, const PixelMask & mask,
                          const std::string & caption, const SamplerConfig & cfg,
                          RngState & rng) const {
        return musekit::inpaint(image, mask, caption, base, superres, tok_base, tok_hi, cfg, rng);
    }

    InpaintResult outpaint(const SceneImage & image, const std::array<int, 4> & bands,
                           const std::string & caption, const SamplerConfig & cfg,
                           RngState & rng) const {
        return musekit::outpaint(image, bands, caption, base, superres, tok_base, tok_hi, cfg, rng);
    }

    EditResult edit(const SceneImage & image, const std::string & caption, const EditConfig & ecfg,
                    const SamplerConfig & scfg, RngState & rng,
                    const std::vector<int> & snapshot_iters = {}) const {
        return mask_free_edit(image, caption, ecfg, scfg, base, superres, tok_base, tok_hi, rng,
                              snapshot_iters);
    }
};

} // namespace musekit
