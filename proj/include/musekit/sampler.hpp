#pragma once

#include "musekit/base_model.hpp"
#include "musekit/superres_model.hpp"

#include <algorithm>
#include <cfloat>
#include <functional>

namespace musekit {

enum class guidance_ramp { constant, linear };

inline const char * ramp_name(guidance_ramp r) {
    return r == guidance_ramp::constant ? "constant" : "linear";
}
inline guidance_ramp ramp_from_name(const std::string & s) {
    if (s == "constant") return guidance_ramp::constant;
    if (s == "linear") return guidance_ramp::linear;
    fail(error_kind::config, "unknown guidance ramp '" + s + "' (want constant|linear)");
}

struct SamplerConfig {
    int steps_base = 12;
    int steps_superres = 6;
    double t_max = 4.0;
    guidance_ramp ramp = guidance_ramp::constant;
    double temperature = 1.0;           // applied to guided logits
    double choice_temperature = 1.0;    // confidence noise scale, annealed to 0
    std::string negative_prompt;        // empty = plain unconditional branch

    void check() const {
        require(steps_base >= 1 && steps_superres >= 1, error_kind::config, "sampler steps must be >=1");
        require(t_max >= 0.0, error_kind::config, "guidance scale must be >=0");
        require(temperature > 0.0, error_kind::config, "temperature must be >0");
        require(choice_temperature >= 0.0, error_kind::config, "choice temperature must be >=0");
    }
};

inline void declare_sampler_config(Config & c) {
    SamplerConfig d;
    c.declare_int("sampler.steps_base", d.steps_base);
    c.declare_int("sampler.steps_superres", d.steps_superres);
    c.declare_double("sampler.t_max", d.t_max);
    c.declare_string("sampler.ramp", ramp_name(d.ramp));
    c.declare_double("sampler.temperature", d.temperature);
    c.declare_double("sampler.choice_temperature", d.choice_temperature);
    c.declare_string("sampler.negative_prompt", d.negative_prompt);
}

inline SamplerConfig sampler_config_from(const Config & c) {
    SamplerConfig s;
    s.steps_base = (int)c.get_int("sampler.steps_base");
    s.steps_superres = (int)c.get_int("sampler.steps_superres");
    s.t_max = c.get_double("sampler.t_max");
    s.ramp = ramp_from_name(c.get_string("sampler.ramp"));
    s.temperature = c.get_double("sampler.temperature");
    s.choice_temperature = c.get_double("sampler.choice_temperature");
    s.negative_prompt = c.get_string("sampler.negative_prompt");
    s.check();
    return s;
}

// guided logits (1+t)*lc - t*lu, elementwise
inline DTensor cfg_logits(const DTensor & lc, const DTensor & lu, double t) {
    require(lc.same_shape(lu), error_kind::contract, "cfg_logits: shape mismatch");
    require(t >= 0.0, error_kind::contract, "cfg_logits: negative guidance scale");
    DTensor out = lc;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = (1.0 + t) * lc[i] - t * lu[i];
    return out;
}

// constant ramp holds t_max; linear ramp runs 0 -> t_max across the steps
inline double guidance_at_step(int s, int S, double t_max, guidance_ramp ramp) {
    require(s >= 0 && s < S, error_kind::contract, "guidance_at_step: step outside schedule");
    if (ramp == guidance_ramp::constant || S == 1) return t_max;
    return t_max * (double)s / (double)(S - 1);
}

// cells still masked after step s of S on an N-cell schedule; the min(prev-1,.)
// clamp forces >=1 commit per step so decoding always terminates
inline int masked_count(int s, int S, int N, int prev_masked) {
    require(s >= 0 && s < S, error_kind::contract, "masked_count: step outside schedule");
    if (s == S - 1) return 0;
    const int sched = (int)std::floor((double)N * std::cos(kPi / 2.0 * (double)(s + 1) / (double)S));
    return std::max(0, std::min(prev_masked - 1, sched));
}

inline double gumbel_draw(RngState & rng) {
    double u = rng.uniform();
    if (u == 0.0) u = DBL_MIN;    // -log(-log u) stays finite
    return -std::log(-std::log(u));
}

using LogitsFn = std::function<DTensor(const TokenGrid &)>;

struct DecodeCounters {
    int64_t cond_forwards = 0;
    int64_t uncond_forwards = 0;
    int64_t total() const { return cond_forwards + uncond_forwards; }
};

struct DecodeResult {
    TokenGrid grid;
    int steps_taken = 0;
};

// confidence-ranked parallel decoding over the masked cells of `grid`.
// Per step the RNG is consumed in a fixed documented order: one categorical
// draw per masked cell in raster order, then one Gumbel draw per masked cell
// in raster order. Committed cells never change.
inline DecodeResult run_parallel_decode(const TokenGrid & grid_in, const MaskGrid & mask_in,
                                        int mask_id, int S, const SamplerConfig & cfg,
                                        const LogitsFn & cond, const LogitsFn & uncond,
                                        RngState & rng, DecodeCounters & counters) {
    cfg.check();
    require(grid_in.h == mask_in.h && grid_in.w == mask_in.w, error_kind::contract,
            "decode: grid/mask shape mismatch");
    DecodeResult res;
    res.grid = grid_in;
    MaskGrid mask = mask_in;
    const int total = grid_in.count();
    const int N = mask.count();
    for (int i = 0; i < total; ++i) {
        if (mask.on[(size_t)i]) {
            require(res.grid.tokens[(size_t)i] == mask_id, error_kind::contract,
                    "decode: masked cell does not hold the mask token");
        }
    }
    if (N == 0) return res;

    int prev_masked = N;
    for (int s = 0; s < S && prev_masked > 0; ++s) {
        const double t = guidance_at_step(s, S, cfg.t_max, cfg.ramp);
        DTensor lc = cond(res.grid);
        ++counters.cond_forwards;
        DTensor lg;
        if (t > 0.0) {
            DTensor lu = uncond(res.grid);
            ++counters.uncond_forwards;
            lg = cfg_logits(lc, lu, t);
        } else {
            lg = std::move(lc);    // unconditional forward skipped entirely
        }
        require(lg.rank() == 2 && lg.rows() == total, error_kind::contract,
                "decode: logits shape mismatch");
        const int K = lg.cols();

        std::vector<int> cells;
        cells.reserve((size_t)prev_masked);
        for (int i = 0; i < total; ++i) {
            if (mask.on[(size_t)i]) cells.push_back(i);
        }

        // categorical draws, raster order
        std::vector<int> picked(cells.size(), 0);
        std::vector<double> logp(cells.size(), 0.0);
        std::vector<double> row((size_t)K);
        for (size_t ci = 0; ci < cells.size(); ++ci) {
            const int cell = cells[ci];
            double mx = -1e300;
            for (int k = 0; k < K; ++k) {
                row[(size_t)k] = lg.at2(cell, k) / cfg.temperature;
                mx = std::max(mx, row[(size_t)k]);
            }
            double z = 0;
            for (int k = 0; k < K; ++k) {
                row[(size_t)k] = std::exp(row[(size_t)k] - mx);
                z += row[(size_t)k];
            }
            require(std::isfinite(z) && z > 0, error_kind::numeric, "decode: degenerate softmax row");
            const double u = rng.uniform() * z;
            double acc = 0;
            int pick = K - 1;
            for (int k = 0; k < K; ++k) {
                acc += row[(size_t)k];
                if (u < acc) {
                    pick = k;
                    break;
                }
            }
            picked[ci] = pick;
            logp[ci] = std::log(row[(size_t)pick] / z);
        }

        // confidence draws, raster order; noise anneals to zero at the last step
        const double anneal = cfg.choice_temperature * (1.0 - (double)(s + 1) / (double)S);
        std::vector<double> conf(cells.size());
        for (size_t ci = 0; ci < cells.size(); ++ci) {
            conf[ci] = logp[ci] + gumbel_draw(rng) * anneal;
        }

        const int target = masked_count(s, S, N, prev_masked);
        const int commit = prev_masked - target;
        std::vector<size_t> order(cells.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            if (conf[a] != conf[b]) return conf[a] > conf[b];
            return cells[a] < cells[b];    // ties resolve to the earlier cell
        });
        for (int j = 0; j < commit; ++j) {
            const size_t ci = order[(size_t)j];
            res.grid.tokens[(size_t)cells[ci]] = picked[ci];
            mask.on[(size_t)cells[ci]] = 0;
        }
        prev_masked = target;
        ++res.steps_taken;
    }
    require(mask.count() == 0, error_kind::contract, "decode: cells left masked after schedule");
    for (int tkn : res.grid.tokens) {
        require(tkn != mask_id, error_kind::contract, "decode: mask token survived decoding");
    }
    return res;
}

struct GenerateResult {
    SceneImage image;
    TokenGrid low, high;
    DecodeCounters base_counters, sr_counters;
    int base_steps = 0, sr_steps = 0;
};

// full cascade: all-masked 8x8 grid -> base decode -> all-masked 16x16 grid
// conditioned on the low-res result -> superres decode -> tokenizer decode
inline GenerateResult generate(const std::string & caption, const BaseModel & base,
                               const SuperResModel & sr, const Tokenizer & tok_base,
                               const Tokenizer & tok_hi, const SamplerConfig & cfg, RngState & rng) {
    cfg.check();
    const TextEmbeddingSeq text = base.encode_text(caption);
    const bool neg = !cfg.negative_prompt.empty();
    const TextEmbeddingSeq neg_text = base.encode_text(cfg.negative_prompt);
    const TextEmbeddingSeq sr_text = sr.encode_text(caption);
    const TextEmbeddingSeq sr_neg_text = sr.encode_text(cfg.negative_prompt);

    GenerateResult out;
    const int mask_lo = base.cfg.mask_token();
    TokenGrid lo = TokenGrid::filled(base.cfg.grid_h, base.cfg.grid_w, mask_lo);
    MaskGrid mlo = MaskGrid::filled(lo.h, lo.w, true);
    LogitsFn lo_cond = [&](const TokenGrid & g) { return base.logits(g, text, false); };
    LogitsFn lo_uncond = [&](const TokenGrid & g) {
        return neg ? base.logits(g, neg_text, false) : base.logits(g, text, true);
    };
    DecodeResult rl = run_parallel_decode(lo, mlo, mask_lo, cfg.steps_base, cfg, lo_cond, lo_uncond,
                                          rng, out.base_counters);
    out.low = rl.grid;
    out.base_steps = rl.steps_taken;

    const int mask_hi = sr.cfg.mask_token();
    TokenGrid hi = TokenGrid::filled(sr.cfg.high_h, sr.cfg.high_w, mask_hi);
    MaskGrid mhi = MaskGrid::filled(hi.h, hi.w, true);
    LogitsFn hi_cond = [&](const TokenGrid & g) { return sr.logits(out.low, sr_text, g, false); };
    LogitsFn hi_uncond = [&](const TokenGrid & g) {
        return neg ? sr.logits(out.low, sr_neg_text, g, false) : sr.logits(out.low, sr_text, g, true);
    };
    DecodeResult rh = run_parallel_decode(hi, mhi, mask_hi, cfg.steps_superres, cfg, hi_cond,
                                          hi_uncond, rng, out.sr_counters);
    out.high = rh.grid;
    out.sr_steps = rh.steps_taken;

    (void)tok_base;
    out.image = tok_hi.decode(out.high);
    return out;
}

// raster-order one-token-per-forward decoding with the same masked model;
// exists to make the forward-pass count comparison concrete
inline TokenGrid autoregressive_baseline(const std::string & caption, const BaseModel & base,
                                         const SamplerConfig & cfg, RngState & rng,
                                         DecodeCounters & counters) {
    cfg.check();
    const TextEmbeddingSeq text = base.encode_text(caption);
    const bool neg = !cfg.negative_prompt.empty();
    const TextEmbeddingSeq neg_text = base.encode_text(cfg.negative_prompt);
    const int mask_id = base.cfg.mask_token();
    TokenGrid grid = TokenGrid::filled(base.cfg.grid_h, base.cfg.grid_w, mask_id);
    const int total = grid.count();
    std::vector<double> row;
    for (int cell = 0; cell < total; ++cell) {
        DTensor lc = base.logits(grid, text, false);
        ++counters.cond_forwards;
        DTensor lg;
        if (cfg.t_max > 0.0) {
            DTensor lu = neg ? base.logits(grid, neg_text, false) : base.logits(grid, text, true);
            ++counters.uncond_forwards;
            lg = cfg_logits(lc, lu, cfg.t_max);
        } else {
            lg = std::move(lc);
        }
        const int K = lg.cols();
        row.assign((size_t)K, 0.0);
        double mx = -1e300;
        for (int k = 0; k < K; ++k) {
            row[(size_t)k] = lg.at2(cell, k) / cfg.temperature;
            mx = std::max(mx, row[(size_t)k]);
        }
        double z = 0;
        for (int k = 0; k < K; ++k) {
            row[(size_t)k] = std::exp(row[(size_t)k] - mx);
            z += row[(size_t)k];
        }
        const double u = rng.uniform() * z;
        double acc = 0;
        int pick = K - 1;
        for (int k = 0; k < K; ++k) {
            acc += row[(size_t)k];
            if (u < acc) {
                pick = k;
                break;
            }
        }
        grid.tokens[(size_t)cell] = pick;
    }
    return grid;
}

} // namespace musekit
