#pragma once

#include "musekit/sampler.hpp"
#include "musekit/shapes.hpp"

#include <array>

namespace musekit {

struct EditConfig {
    double resample_fraction = 0.08;
    int iterations = 100;
    double guidance = 4.0;    // constant, no ramp
    int top_k = 3;

    void check() const {
        require(resample_fraction > 0.0 && resample_fraction <= 1.0, error_kind::config,
                "resample fraction must be in (0,1]");
        require(iterations >= 0, error_kind::config, "iterations must be >=0");
        require(guidance >= 0.0, error_kind::config, "guidance must be >=0");
        require(top_k >= 1, error_kind::config, "top_k must be >=1");
    }
};

inline void declare_edit_config(Config & c) {
    EditConfig d;
    c.declare_double("edit.resample_fraction", d.resample_fraction);
    c.declare_int("edit.iterations", d.iterations);
    c.declare_double("edit.guidance", d.guidance);
    c.declare_int("edit.top_k", d.top_k);
}

inline EditConfig edit_config_from(const Config & c) {
    EditConfig e;
    e.resample_fraction = c.get_double("edit.resample_fraction");
    e.iterations = (int)c.get_int("edit.iterations");
    e.guidance = c.get_double("edit.guidance");
    e.top_k = (int)c.get_int("edit.top_k");
    e.check();
    return e;
}

// a token cell is masked iff ANY pixel of its f x f footprint is masked; the
// low-res mask is computed the same way on the 2x-decimated pixel mask
inline std::pair<MaskGrid, MaskGrid> pixel_mask_to_token_masks(const PixelMask & mask, int f) {
    require(mask.width % (2 * f) == 0 && mask.height % (2 * f) == 0, error_kind::shape,
            "pixel mask dims must divide by 2f");
    const int hh = mask.height / f, hw = mask.width / f;
    MaskGrid high = MaskGrid::filled(hh, hw, false);
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            if (mask.at(x, y)) high.at(y / f, x / f) = 1;
        }
    }
    PixelMask half;
    half.width = mask.width / 2;
    half.height = mask.height / 2;
    half.bits.assign((size_t)half.width * half.height, 0);
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            if (mask.at(x, y)) half.bits[(size_t)(y / 2) * half.width + x / 2] = 1;
        }
    }
    const int lh = half.height / f, lw = half.width / f;
    MaskGrid low = MaskGrid::filled(lh, lw, false);
    for (int y = 0; y < half.height; ++y) {
        for (int x = 0; x < half.width; ++x) {
            if (half.at(x, y)) low.at(y / f, x / f) = 1;
        }
    }
    return {low, high};
}

struct InpaintResult {
    SceneImage image;
    bool no_op = false;
    TokenGrid low_in, high_in;      // encoded source tokens
    TokenGrid low_out, high_out;    // after regeneration
    MaskGrid low_mask, high_mask;
    DecodeCounters base_counters, sr_counters;
};

// regenerate the masked region in token space: unmasked cells stay bitwise
// fixed as decoding context at both scales
inline InpaintResult inpaint(const SceneImage & image, const PixelMask & mask,
                             const std::string & caption, const BaseModel & base,
                             const SuperResModel & sr, const Tokenizer & tok_base,
                             const Tokenizer & tok_hi, const SamplerConfig & cfg, RngState & rng) {
    cfg.check();
    require(image.width == kHighSize && image.height == kHighSize, error_kind::shape,
            "inpaint wants a 64x64 image");
    require(mask.width == image.width && mask.height == image.height, error_kind::shape,
            "mask dims must match the image");
    InpaintResult out;
    const SceneImage low_img = decimate2x(image);
    out.low_in = tok_base.encode(low_img).second;
    out.high_in = tok_hi.encode(image).second;
    auto [mlow, mhigh] = pixel_mask_to_token_masks(mask, tok_hi.cfg.f);
    out.low_mask = mlow;
    out.high_mask = mhigh;

    if (mask.count() == 0) {
        out.no_op = true;
        out.low_out = out.low_in;
        out.high_out = out.high_in;
        out.image = tok_hi.decode(out.high_in);
        return out;
    }

    const TextEmbeddingSeq text = base.encode_text(caption);
    const bool neg = !cfg.negative_prompt.empty();
    const TextEmbeddingSeq neg_text = base.encode_text(cfg.negative_prompt);
    const TextEmbeddingSeq sr_text = sr.encode_text(caption);
    const TextEmbeddingSeq sr_neg_text = sr.encode_text(cfg.negative_prompt);

    const int mask_lo = base.cfg.mask_token();
    TokenGrid lo = out.low_in;
    for (int i = 0; i < lo.count(); ++i) {
        if (mlow.on[(size_t)i]) lo.tokens[(size_t)i] = mask_lo;
    }
    LogitsFn lo_cond = [&](const TokenGrid & g) { return base.logits(g, text, false); };
    LogitsFn lo_uncond = [&](const TokenGrid & g) {
        return neg ? base.logits(g, neg_text, false) : base.logits(g, text, true);
    };
    out.low_out = run_parallel_decode(lo, mlow, mask_lo, cfg.steps_base, cfg, lo_cond, lo_uncond,
                                      rng, out.base_counters)
                      .grid;

    const int mask_hi = sr.cfg.mask_token();
    TokenGrid hi = out.high_in;
    for (int i = 0; i < hi.count(); ++i) {
        if (mhigh.on[(size_t)i]) hi.tokens[(size_t)i] = mask_hi;
    }
    LogitsFn hi_cond = [&](const TokenGrid & g) { return sr.logits(out.low_out, sr_text, g, false); };
    LogitsFn hi_uncond = [&](const TokenGrid & g) {
        return neg ? sr.logits(out.low_out, sr_neg_text, g, false)
                   : sr.logits(out.low_out, sr_text, g, true);
    };
    out.high_out = run_parallel_decode(hi, mhigh, mask_hi, cfg.steps_superres, cfg, hi_cond,
                                       hi_uncond, rng, out.sr_counters)
                       .grid;
    out.image = tok_hi.decode(out.high_out);
    return out;
}

// border widths in pixels, order left/right/top/bottom; 0 skips a side but at
// least one side must extend, and a nonzero band must cover whole token cells
inline PixelMask border_mask(int width, int height, const std::array<int, 4> & bands, int f) {
    int nonzero = 0;
    for (int b : bands) {
        require(b >= 0, error_kind::config, "outpaint band must be >=0");
        if (b > 0) {
            require(b >= f, error_kind::config,
                    "outpaint band thinner than f=" + std::to_string(f) +
                        " covers no whole token cell");
            ++nonzero;
        }
    }
    require(nonzero > 0, error_kind::config, "outpaint needs at least one nonzero band");
    PixelMask m;
    m.width = width;
    m.height = height;
    m.bits.assign((size_t)width * height, 0);
    m.set_rect(0, 0, bands[0], height, true);                       // left
    m.set_rect(width - bands[1], 0, bands[1], height, true);        // right
    m.set_rect(0, 0, width, bands[2], true);                        // top
    m.set_rect(0, height - bands[3], width, bands[3], true);        // bottom
    return m;
}

inline InpaintResult outpaint(const SceneImage & image, const std::array<int, 4> & bands,
                              const std::string & caption, const BaseModel & base,
                              const SuperResModel & sr, const Tokenizer & tok_base,
                              const Tokenizer & tok_hi, const SamplerConfig & cfg, RngState & rng) {
    const PixelMask m = border_mask(image.width, image.height, bands, tok_hi.cfg.f);
    return inpaint(image, m, caption, base, sr, tok_base, tok_hi, cfg, rng);
}

struct EditResult {
    SceneImage image;
    TokenGrid low_in, low_out, high_out;
    std::vector<std::pair<int, SceneImage>> snapshots;    // (iteration, low-res decode)
    DecodeCounters base_counters, sr_counters;
};

// Gibbs-style mask-free editing on the low-res grid: per iteration a uniform
// subset of ceil(rho*cells) cells is re-masked, one guided forward scores
// them, and each commits a draw restricted to the top-k guided logits. The
// edited grid then goes through super-resolution under the same caption.
inline EditResult mask_free_edit(const SceneImage & image, const std::string & caption,
                                 const EditConfig & ecfg, const SamplerConfig & scfg,
                                 const BaseModel & base, const SuperResModel & sr,
                                 const Tokenizer & tok_base, const Tokenizer & tok_hi,
                                 RngState & rng, const std::vector<int> & snapshot_iters = {}) {
    ecfg.check();
    scfg.check();
    require(image.width == kHighSize && image.height == kHighSize, error_kind::shape,
            "edit wants a 64x64 image");
    EditResult out;
    const SceneImage low_img = decimate2x(image);
    out.low_in = tok_base.encode(low_img).second;
    TokenGrid cur = out.low_in;
    const int total = cur.count();
    const int n = (int)std::ceil(ecfg.resample_fraction * total);
    const int mask_id = base.cfg.mask_token();
    const TextEmbeddingSeq text = base.encode_text(caption);

    std::vector<int> cells(total);
    std::vector<double> row;
    std::vector<int> top((size_t)ecfg.top_k);
    for (int it = 0; it < ecfg.iterations; ++it) {
        for (int i = 0; i < total; ++i) cells[(size_t)i] = i;
        for (int i = 0; i < n; ++i) {    // uniform subset, independent each iteration
            const int j = i + (int)rng.below((uint32_t)(total - i));
            std::swap(cells[(size_t)i], cells[(size_t)j]);
        }
        std::vector<int> chosen(cells.begin(), cells.begin() + n);
        std::sort(chosen.begin(), chosen.end());    // draws consumed in raster order

        TokenGrid masked = cur;
        for (int c : chosen) masked.tokens[(size_t)c] = mask_id;
        DTensor lc = base.logits(masked, text, false);
        ++out.base_counters.cond_forwards;
        DTensor lg;
        if (ecfg.guidance > 0.0) {
            DTensor lu = base.logits(masked, text, true);
            ++out.base_counters.uncond_forwards;
            lg = cfg_logits(lc, lu, ecfg.guidance);
        } else {
            lg = std::move(lc);
        }
        const int K = lg.cols();
        const int k_eff = std::min(ecfg.top_k, K);
        for (int c : chosen) {
            // top-k by guided logit, ties to the lower token id
            top.assign((size_t)k_eff, -1);
            for (int cand = 0; cand < K; ++cand) {
                int pos = -1;
                for (int j = 0; j < k_eff; ++j) {
                    if (top[(size_t)j] < 0 || lg.at2(c, cand) > lg.at2(c, top[(size_t)j])) {
                        pos = j;
                        break;
                    }
                }
                if (pos >= 0) {
                    for (int j = k_eff - 1; j > pos; --j) top[(size_t)j] = top[(size_t)j - 1];
                    top[(size_t)pos] = cand;
                }
            }
            row.assign((size_t)k_eff, 0.0);
            double mx = -1e300;
            for (int j = 0; j < k_eff; ++j) mx = std::max(mx, lg.at2(c, top[(size_t)j]));
            double z = 0;
            for (int j = 0; j < k_eff; ++j) {
                row[(size_t)j] = std::exp(lg.at2(c, top[(size_t)j]) - mx);
                z += row[(size_t)j];
            }
            const double u = rng.uniform() * z;
            double acc = 0;
            int pick = k_eff - 1;
            for (int j = 0; j < k_eff; ++j) {
                acc += row[(size_t)j];
                if (u < acc) {
                    pick = j;
                    break;
                }
            }
            cur.tokens[(size_t)c] = top[(size_t)pick];
        }
        for (int snap : snapshot_iters) {
            if (snap == it + 1) out.snapshots.emplace_back(it + 1, tok_base.decode(cur));
        }
    }
    out.low_out = cur;

    const TextEmbeddingSeq sr_text = sr.encode_text(caption);
    const int mask_hi = sr.cfg.mask_token();
    TokenGrid hi = TokenGrid::filled(sr.cfg.high_h, sr.cfg.high_w, mask_hi);
    MaskGrid mhi = MaskGrid::filled(hi.h, hi.w, true);
    LogitsFn hi_cond = [&](const TokenGrid & g) { return sr.logits(cur, sr_text, g, false); };
    LogitsFn hi_uncond = [&](const TokenGrid & g) { return sr.logits(cur, sr_text, g, true); };
    out.high_out = run_parallel_decode(hi, mhi, mask_hi, scfg.steps_superres, scfg, hi_cond,
                                       hi_uncond, rng, out.sr_counters)
                       .grid;
    out.image = tok_hi.decode(out.high_out);
    return out;
}

} // namespace musekit
