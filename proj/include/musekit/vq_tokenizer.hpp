#pragma once

#include "musekit/checkpoint.hpp"
#include "musekit/config.hpp"
#include "musekit/image.hpp"
#include "musekit/nn.hpp"
#include "musekit/perceptual.hpp"

#include <utility>

namespace musekit {

struct TokenGrid {
    int h = 0, w = 0;
    std::vector<int> tokens;

    static TokenGrid filled(int h, int w, int v) {
        TokenGrid g;
        g.h = h;
        g.w = w;
        g.tokens.assign((size_t)h * w, v);
        return g;
    }
    int & at(int r, int c) { return tokens[(size_t)r * w + c]; }
    int at(int r, int c) const { return tokens[(size_t)r * w + c]; }
    int count() const { return h * w; }
    bool operator==(const TokenGrid &) const = default;
};

struct TokenizerConfig {
    int f = 4;    // image-to-grid downsampling ratio
    int res_blocks = 2;
    int channels = 16;
    int dec_blocks = 2;    // finetuning doubles these two
    int dec_channels = 16;
    int disc_channels = 32;
    int codebook_size = 256;
    int code_dim = 32;
    double w_recon = 1.0;
    double w_perceptual = 0.05;
    double w_adversarial = 0.1;
    double w_commit = 0.25;

    int stages() const {
        int s = 0, v = f;
        while (v > 1) {
            v >>= 1;
            ++s;
        }
        return s;
    }
    void check() const {
        require(f >= 2 && (f & (f - 1)) == 0, error_kind::config, "tokenizer f must be a power of 2");
        require(res_blocks >= 1 && dec_blocks >= 1, error_kind::config, "tokenizer needs >=1 residual block");
        require(channels >= 4 && dec_channels >= 4, error_kind::config, "tokenizer channels too small");
        require(codebook_size >= 2 && code_dim >= 1, error_kind::config, "bad codebook dims");
        require(w_recon >= 0 && w_perceptual >= 0 && w_adversarial >= 0 && w_commit >= 0,
                error_kind::config, "loss weights must be nonnegative");
    }
};

inline void declare_tokenizer_config(Config & c) {
    TokenizerConfig d;
    c.declare_int("tokenizer.f", d.f);
    c.declare_int("tokenizer.res_blocks", d.res_blocks);
    c.declare_int("tokenizer.channels", d.channels);
    c.declare_int("tokenizer.dec_blocks", d.dec_blocks);
    c.declare_int("tokenizer.dec_channels", d.dec_channels);
    c.declare_int("tokenizer.disc_channels", d.disc_channels);
    c.declare_int("tokenizer.codebook_size", d.codebook_size);
    c.declare_int("tokenizer.code_dim", d.code_dim);
    c.declare_double("tokenizer.w_recon", d.w_recon);
    c.declare_double("tokenizer.w_perceptual", d.w_perceptual);
    c.declare_double("tokenizer.w_adversarial", d.w_adversarial);
    c.declare_double("tokenizer.w_commit", d.w_commit);
}

inline TokenizerConfig tokenizer_config_from(const Config & c) {
    TokenizerConfig t;
    t.f = (int)c.get_int("tokenizer.f");
    t.res_blocks = (int)c.get_int("tokenizer.res_blocks");
    t.channels = (int)c.get_int("tokenizer.channels");
    t.dec_blocks = (int)c.get_int("tokenizer.dec_blocks");
    t.dec_channels = (int)c.get_int("tokenizer.dec_channels");
    t.disc_channels = (int)c.get_int("tokenizer.disc_channels");
    t.codebook_size = (int)c.get_int("tokenizer.codebook_size");
    t.code_dim = (int)c.get_int("tokenizer.code_dim");
    t.w_recon = c.get_double("tokenizer.w_recon");
    t.w_perceptual = c.get_double("tokenizer.w_perceptual");
    t.w_adversarial = c.get_double("tokenizer.w_adversarial");
    t.w_commit = c.get_double("tokenizer.w_commit");
    t.check();
    return t;
}

template <class T>
struct TokenizerT {
    TokenizerConfig cfg;
    ParamStoreT<T> ps;

    static TokenizerT init(const TokenizerConfig & cfg, uint64_t seed) {
        cfg.check();
        TokenizerT tok;
        tok.cfg = cfg;
        RngState rng = RngState::seeded(seed);
        const int S = cfg.stages();
        int ch = cfg.channels;
        register_conv(tok.ps, rng, "enc.stem", ch, 3, 3);
        for (int s = 0; s < S; ++s) {
            for (int j = 0; j < cfg.res_blocks; ++j) {
                register_resblock(tok.ps, rng, "enc.s" + std::to_string(s) + ".r" + std::to_string(j), ch);
            }
            register_conv(tok.ps, rng, "enc.s" + std::to_string(s) + ".down", ch * 2, ch, 3);
            ch *= 2;
        }
        for (int j = 0; j < cfg.res_blocks; ++j) {
            register_resblock(tok.ps, rng, "enc.mid.r" + std::to_string(j), ch);
        }
        register_conv(tok.ps, rng, "enc.out", cfg.code_dim, ch, 3);
        tok.ps.add("codebook", gaussian_init<T>({cfg.codebook_size, cfg.code_dim}, rng, 0.1), false);
        register_decoder(tok.ps, rng, cfg);
        return tok;
    }

    static void register_decoder(ParamStoreT<T> & ps, RngState & rng, const TokenizerConfig & cfg) {
        const int S = cfg.stages();
        int ch = cfg.dec_channels << S;
        register_conv(ps, rng, "dec.in", ch, cfg.code_dim, 3);
        for (int j = 0; j < cfg.dec_blocks; ++j) {
            register_resblock(ps, rng, "dec.mid.r" + std::to_string(j), ch);
        }
        for (int s = 0; s < S; ++s) {
            register_conv(ps, rng, "dec.s" + std::to_string(s) + ".up", ch / 2, ch, 3);
            ch /= 2;
            for (int j = 0; j < cfg.dec_blocks; ++j) {
                register_resblock(ps, rng, "dec.s" + std::to_string(s) + ".r" + std::to_string(j), ch);
            }
        }
        register_conv(ps, rng, "dec.out", 3, ch, 3);
    }

    // image tensor [3,H,W] -> latent rows [h*w, code_dim]; assumes ps staged
    Var encode_fw(TapeT<T> & tape, Var img) const {
        const auto & shape = tape.value(img).shape;
        require(shape.size() == 3 && shape[0] == 3, error_kind::shape, "encode: want [3,H,W]");
        require(shape[1] % cfg.f == 0 && shape[2] % cfg.f == 0, error_kind::shape,
                "encode: image dims must be divisible by f=" + std::to_string(cfg.f));
        auto & ps_m = const_cast<ParamStoreT<T> &>(ps);
        Var x = conv_fw(tape, ps_m, "enc.stem", img, 1, 1);
        for (int s = 0; s < cfg.stages(); ++s) {
            for (int j = 0; j < cfg.res_blocks; ++j) {
                x = resblock_fw(tape, ps_m, "enc.s" + std::to_string(s) + ".r" + std::to_string(j), x);
            }
            x = conv_fw(tape, ps_m, "enc.s" + std::to_string(s) + ".down", x, 2, 1);
        }
        for (int j = 0; j < cfg.res_blocks; ++j) {
            x = resblock_fw(tape, ps_m, "enc.mid.r" + std::to_string(j), x);
        }
        x = conv_fw(tape, ps_m, "enc.out", tape.leaky_relu(x, 0.2), 1, 1);
        return tape.chw_to_rows(x);
    }

    // nearest codebook row per latent; exact ties break to the lowest index
    TokenGrid nearest_tokens(const TensorT<T> & ze_rows, int h, int w) const {
        const TensorT<T> & book = ps.value("codebook");
        const int K = cfg.codebook_size, D = cfg.code_dim;
        require(ze_rows.rank() == 2 && ze_rows.rows() == h * w && ze_rows.cols() == D,
                error_kind::shape, "nearest_tokens: latent shape mismatch");
        TokenGrid grid = TokenGrid::filled(h, w, 0);
        for (int i = 0; i < h * w; ++i) {
            double best = 0;
            int arg = -1;
            for (int k = 0; k < K; ++k) {
                double d = 0;
                for (int c = 0; c < D; ++c) {
                    const double diff = (double)ze_rows.at2(i, c) - (double)book.at2(k, c);
                    d += diff * diff;
                }
                if (arg < 0 || d < best) {
                    best = d;
                    arg = k;
                }
            }
            grid.tokens[(size_t)i] = arg;
        }
        return grid;
    }

    struct Quantized {
        Var zq_rows;
        TokenGrid grid;
        Var codebook_loss;
        Var commitment_loss;
    };

    // straight-through estimator: forward takes the codebook row, backward
    // passes the reconstruction gradient to the encoder latents unchanged
    Quantized quantize_st(TapeT<T> & tape, Var ze_rows, int h, int w) const {
        Quantized q;
        q.grid = nearest_tokens(tape.value(ze_rows), h, w);
        auto & ps_m = const_cast<ParamStoreT<T> &>(ps);
        Var e = tape.embed_rows(ps_m.var("codebook"), q.grid.tokens);
        q.zq_rows = tape.add(ze_rows, tape.stopgrad(tape.sub(e, ze_rows)));
        q.codebook_loss = tape.mse_loss(tape.stopgrad(ze_rows), e);
        q.commitment_loss = tape.mse_loss(ze_rows, tape.stopgrad(e));
        return q;
    }

    // latent rows -> image tensor [3, f*h, f*w] in [0,1]
    Var decode_fw(TapeT<T> & tape, Var zq_rows, int h, int w) const {
        auto & ps_m = const_cast<ParamStoreT<T> &>(ps);
        Var x = tape.rows_to_chw(zq_rows, h, w);
        x = conv_fw(tape, ps_m, "dec.in", x, 1, 1);
        for (int j = 0; j < cfg.dec_blocks; ++j) {
            x = resblock_fw(tape, ps_m, "dec.mid.r" + std::to_string(j), x);
        }
        for (int s = 0; s < cfg.stages(); ++s) {
            x = conv_fw(tape, ps_m, "dec.s" + std::to_string(s) + ".up", tape.upsample2x(x), 1, 1);
            for (int j = 0; j < cfg.dec_blocks; ++j) {
                x = resblock_fw(tape, ps_m, "dec.s" + std::to_string(s) + ".r" + std::to_string(j), x);
            }
        }
        x = conv_fw(tape, ps_m, "dec.out", tape.leaky_relu(x, 0.2), 1, 1);
        return tape.sigmoid(x);
    }

    std::pair<TensorT<T>, TokenGrid> encode(const SceneImage & img) const {
        TapeT<T> tape(false);
        const_cast<ParamStoreT<T> &>(ps).stage(tape, false);
        Var x = tape.constant(image_to_tensor(img).template cast<T>());
        Var rows = encode_fw(tape, x);
        const int h = img.height / cfg.f, w = img.width / cfg.f;
        TokenGrid grid = nearest_tokens(tape.value(rows), h, w);
        return {tape.value(rows), grid};
    }

    SceneImage decode(const TokenGrid & grid) const {
        const TensorT<T> & book = ps.value("codebook");
        TensorT<T> rows = TensorT<T>::zeros({grid.count(), cfg.code_dim});
        for (int i = 0; i < grid.count(); ++i) {
            const int tok = grid.tokens[(size_t)i];
            require(tok >= 0 && tok < cfg.codebook_size, error_kind::token,
                    "token " + std::to_string(tok) + " outside codebook of size " +
                        std::to_string(cfg.codebook_size));
            for (int c = 0; c < cfg.code_dim; ++c) rows.at2(i, c) = book.at2(tok, c);
        }
        TapeT<T> tape(false);
        const_cast<ParamStoreT<T> &>(ps).stage(tape, false);
        Var img = decode_fw(tape, tape.constant(rows), grid.h, grid.w);
        return tensor_to_image(tape.value(img).template cast<float>());
    }
};

template <class T>
struct PatchDiscT {
    ParamStoreT<T> ps;
    int channels = 32;

    static PatchDiscT init(int channels, uint64_t seed) {
        PatchDiscT d;
        d.channels = channels;
        RngState rng = RngState::seeded(seed);
        register_conv(d.ps, rng, "disc.c0", channels, 3, 3);
        register_conv(d.ps, rng, "disc.c1", channels * 2, channels, 3);
        register_conv(d.ps, rng, "disc.c2", 1, channels * 2, 3);
        return d;
    }

    Var forward(TapeT<T> & tape, Var img) const {
        auto & ps_m = const_cast<ParamStoreT<T> &>(ps);
        Var x = tape.leaky_relu(conv_fw(tape, ps_m, "disc.c0", img, 2, 1), 0.2);
        x = tape.leaky_relu(conv_fw(tape, ps_m, "disc.c1", x, 2, 1), 0.2);
        return conv_fw(tape, ps_m, "disc.c2", x, 1, 1);
    }
};

struct TokenizerTrainStats {
    bool g_step = true;
    double recon = 0, perceptual = 0, adversarial = 0, commit = 0, codebook = 0, total = 0;
    double d_loss = 0;
    int reseeded = 0;
};

// Generator and discriminator strictly alternate (G on even steps); with
// adversarial weight 0 every step trains the generator and the discriminator
// is never touched. Dead codebook rows (unused for reseed_window steps) are
// re-seeded from the current batch's encoder outputs, greedy farthest-first.
template <class T>
struct TokenizerTrainerT {
    TokenizerT<T> model;
    PatchDiscT<T> disc;
    PerceptualNetT<T> percep;
    AdamWT<T> opt_g;
    AdamWT<T> opt_d;
    int64_t step = 0;
    int64_t reseed_window = 2000;
    bool data_init = true;    // seed the codebook from the first batch
    std::vector<int64_t> last_used;

    static TokenizerTrainerT make(const TokenizerConfig & cfg, uint64_t seed) {
        TokenizerTrainerT tr;
        tr.model = TokenizerT<T>::init(cfg, seed);
        tr.disc = PatchDiscT<T>::init(cfg.disc_channels, seed ^ 0x9e3779b97f4a7c15ULL);
        tr.percep = PerceptualNetT<T>::build();
        AdamWConfig ac;
        ac.beta2 = 0.99;    // tokenizer optimizer runs plain Adam settings
        ac.weight_decay = 0.0;
        tr.opt_g = AdamWT<T>(ac);
        tr.opt_d = AdamWT<T>(ac);
        tr.last_used.assign((size_t)cfg.codebook_size, 0);
        return tr;
    }

    static TokenizerTrainerT for_finetune(const TokenizerT<T> & trained, uint64_t seed) {
        TokenizerConfig cfg = trained.cfg;
        cfg.dec_blocks *= 2;
        cfg.dec_channels *= 2;
        cfg.w_adversarial = 0.0;    // finetune optimizes reconstruction only
        TokenizerTrainerT tr = make(cfg, seed);
        for (size_t i = 0; i < tr.model.ps.count(); ++i) {
            auto & e = tr.model.ps.entry(i);
            if (e.name.rfind("enc.", 0) == 0 || e.name == "codebook") {
                e.value = trained.ps.value(e.name);
                e.frozen = true;
            }
        }
        tr.data_init = false;    // codebook arrives trained and frozen
        return tr;
    }

    bool is_g_step() const { return model.cfg.w_adversarial == 0.0 || step % 2 == 0; }

    TokenizerTrainStats train_step(const std::vector<TensorT<T>> & batch, double lr, RngState & rng) {
        require(!batch.empty(), error_kind::contract, "empty batch");
        const int H = batch[0].dim(1), W = batch[0].dim(2);
        for (const auto & img : batch) {
            require(img.dim(1) == H && img.dim(2) == W, error_kind::shape,
                    "batch images must share one resolution");
        }
        const int h = H / model.cfg.f, w = W / model.cfg.f;
        TokenizerTrainStats st;
        st.g_step = is_g_step();

        std::vector<TensorT<T>> ze_rows_batch;
        if (st.g_step) {
            model.ps.zero_grad();
            TapeT<T> tape;
            for (const auto & img : batch) {
                tape.reset();
                model.ps.stage(tape, true);
                if (model.cfg.w_adversarial > 0) disc.ps.stage(tape, false);
                Var x = tape.constant(img);
                Var ze = model.encode_fw(tape, x);
                if (data_init && step == 0) {
                    ze_rows_batch.push_back(tape.value(ze));
                    continue;    // first pass only harvests latents for codebook init
                }
                auto q = model.quantize_st(tape, ze, h, w);
                mark_used(q.grid);
                ze_rows_batch.push_back(tape.value(ze));
                Var recon = model.decode_fw(tape, q.zq_rows, h, w);
                Var loss = tape.scale(tape.l1_loss(recon, x), model.cfg.w_recon);
                st.recon += tape.scalar(tape.l1_loss(recon, x)) / batch.size();
                if (model.cfg.w_perceptual > 0) {
                    Var p = percep.loss_fw(tape, recon, x);
                    st.perceptual += tape.scalar(p) / batch.size();
                    loss = tape.add(loss, tape.scale(p, model.cfg.w_perceptual));
                }
                if (model.cfg.w_adversarial > 0) {
                    Var adv = tape.scale(tape.mean_all(disc.forward(tape, recon)), -1.0);
                    st.adversarial += tape.scalar(adv) / batch.size();
                    loss = tape.add(loss, tape.scale(adv, model.cfg.w_adversarial));
                }
                loss = tape.add(loss, tape.scale(q.commitment_loss, model.cfg.w_commit));
                loss = tape.add(loss, q.codebook_loss);
                st.commit += tape.scalar(q.commitment_loss) / batch.size();
                st.codebook += tape.scalar(q.codebook_loss) / batch.size();
                const double lv = tape.scalar(loss);
                require(std::isfinite(lv), error_kind::numeric,
                        "non-finite tokenizer loss at step " + std::to_string(step));
                st.total += lv / batch.size();
                tape.backward(loss);
                model.ps.collect(tape);
            }
            if (data_init && step == 0) {
                init_codebook_from(ze_rows_batch, rng);
                st.reseeded = model.cfg.codebook_size;
            } else {
                model.ps.scale_grad(1.0 / batch.size());
                opt_g.step(model.ps, lr);
                st.reseeded = reseed_dead_rows(ze_rows_batch);
            }
        } else {
            disc.ps.zero_grad();
            TapeT<T> tape;
            for (const auto & img : batch) {
                tape.reset();
                model.ps.stage(tape, false);
                disc.ps.stage(tape, true);
                Var x = tape.constant(img);
                Var ze = model.encode_fw(tape, x);
                auto q = model.quantize_st(tape, ze, h, w);
                mark_used(q.grid);
                Var fake = model.decode_fw(tape, q.zq_rows, h, w);
                Var loss = tape.add(tape.hinge(disc.forward(tape, x), +1.0),
                                    tape.hinge(disc.forward(tape, fake), -1.0));
                const double lv = tape.scalar(loss);
                require(std::isfinite(lv), error_kind::numeric,
                        "non-finite discriminator loss at step " + std::to_string(step));
                st.d_loss += lv / batch.size();
                tape.backward(loss);
                disc.ps.collect(tape);
            }
            disc.ps.scale_grad(1.0 / batch.size());
            opt_d.step(disc.ps, lr);
        }
        ++step;
        return st;
    }

    int64_t used_recently(int64_t window) const {
        int64_t n = 0;
        for (int64_t lu : last_used) n += (step - lu < window) ? 1 : 0;
        return n;
    }

private:
    void mark_used(const TokenGrid & grid) {
        for (int t : grid.tokens) last_used[(size_t)t] = step;
    }

    static double dist2(const TensorT<T> & rows, int i, const TensorT<T> & book, int k) {
        double d = 0;
        for (int c = 0; c < rows.cols(); ++c) {
            const double diff = (double)rows.at2(i, c) - (double)book.at2(k, c);
            d += diff * diff;
        }
        return d;
    }

    // flatten batch latents into one row pool
    static TensorT<T> pool_rows(const std::vector<TensorT<T>> & batch_rows) {
        int total = 0;
        for (const auto & r : batch_rows) total += r.rows();
        TensorT<T> pool = TensorT<T>::zeros({total, batch_rows[0].cols()});
        int at = 0;
        for (const auto & r : batch_rows) {
            std::copy(r.data.begin(), r.data.end(), pool.data.begin() + (size_t)at * r.cols());
            at += r.rows();
        }
        return pool;
    }

    void init_codebook_from(const std::vector<TensorT<T>> & batch_rows, RngState & rng) {
        TensorT<T> pool = pool_rows(batch_rows);
        TensorT<T> & book = model.ps.value("codebook");
        const int K = model.cfg.codebook_size, D = model.cfg.code_dim;
        std::vector<double> min_d((size_t)pool.rows(), 1e300);
        int pick = (int)rng.below((uint32_t)pool.rows());
        for (int k = 0; k < K; ++k) {
            if (k > 0) {
                // farthest-first traversal keeps the rows spread out
                pick = 0;
                for (int i = 1; i < pool.rows(); ++i) {
                    if (min_d[(size_t)i] > min_d[(size_t)pick]) pick = i;
                }
                if (min_d[(size_t)pick] == 0.0) {
                    // pool exhausted; jitter a random row instead of duplicating
                    pick = (int)rng.below((uint32_t)pool.rows());
                    for (int c = 0; c < D; ++c) {
                        book.at2(k, c) = pool.at2(pick, c) + (T)(0.01 * rng.normal());
                    }
                    last_used[(size_t)k] = step;
                    continue;
                }
            }
            for (int c = 0; c < D; ++c) book.at2(k, c) = pool.at2(pick, c);
            last_used[(size_t)k] = step;
            for (int i = 0; i < pool.rows(); ++i) {
                min_d[(size_t)i] = std::min(min_d[(size_t)i], dist2(pool, i, book, k));
            }
        }
    }

    int reseed_dead_rows(const std::vector<TensorT<T>> & batch_rows) {
        if (batch_rows.empty()) return 0;
        std::vector<int> dead;
        for (int k = 0; k < model.cfg.codebook_size; ++k) {
            if (step - last_used[(size_t)k] >= reseed_window) dead.push_back(k);
        }
        if (dead.empty()) return 0;
        TensorT<T> pool = pool_rows(batch_rows);
        TensorT<T> & book = model.ps.value("codebook");
        int reseeded = 0;
        for (int k : dead) {
            if (reseeded >= pool.rows()) break;
            // latent farthest from its nearest live row becomes the new row
            int pick = 0;
            double best = -1;
            for (int i = 0; i < pool.rows(); ++i) {
                double nearest = 1e300;
                for (int j = 0; j < model.cfg.codebook_size; ++j) {
                    nearest = std::min(nearest, dist2(pool, i, book, j));
                }
                if (nearest > best) {
                    best = nearest;
                    pick = i;
                }
            }
            for (int c = 0; c < model.cfg.code_dim; ++c) book.at2(k, c) = pool.at2(pick, c);
            last_used[(size_t)k] = step;
            ++reseeded;
        }
        return reseeded;
    }
};

using Tokenizer = TokenizerT<float>;
using TokenizerTrainer = TokenizerTrainerT<float>;

} // namespace musekit
