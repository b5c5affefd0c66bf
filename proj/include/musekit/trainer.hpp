#pragma once

#include "musekit/checkpoint.hpp"
#include "musekit/eval.hpp"
#include "musekit/superres_model.hpp"
#include "musekit/vq_tokenizer.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <unordered_map>

namespace musekit {

// streaming CSV with a fixed header row
class MetricsLog {
public:
    MetricsLog() = default;
    MetricsLog(const std::string & path, const std::vector<std::string> & header)
        : width_(header.size()) {
        f_.open(path, std::ios::binary);
        require(f_.good(), error_kind::io, "cannot open for write: " + path);
        emit(header);
    }
    void row(const std::vector<std::string> & cells) {
        require(cells.size() == width_, error_kind::contract, "csv row width mismatch");
        emit(cells);
    }
    bool open() const { return f_.is_open(); }

private:
    std::ofstream f_;
    size_t width_ = 0;
    void emit(const std::vector<std::string> & cells) {
        for (size_t i = 0; i < cells.size(); ++i) {
            if (i) f_ << ',';
            f_ << csv_quote(cells[i]);
        }
        f_ << '\n';
        f_.flush();
    }
};

inline std::string fmt_f(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.8g", v);
    return buf;
}

struct TrainOptions {
    int64_t steps = 20000;
    int batch = 8;
    double lr = 1e-4;
    int64_t warmup = 5000;
    int64_t checkpoint_every = 500;
    double early_stop_accuracy = 0.0;    // 0 disables; checked on running window
    std::string out_dir = "out";
    uint64_t seed = 0;
};

inline void declare_train_config(Config & c) {
    TrainOptions d;
    c.declare_int("train.steps", d.steps);
    c.declare_int("train.batch", d.batch);
    c.declare_double("train.lr", d.lr);
    c.declare_int("train.warmup", d.warmup);
    c.declare_int("train.checkpoint_every", d.checkpoint_every);
    c.declare_double("train.early_stop_accuracy", d.early_stop_accuracy);
}

inline TrainOptions train_options_from(const Config & c) {
    TrainOptions o;
    o.steps = c.get_int("train.steps");
    o.batch = (int)c.get_int("train.batch");
    o.lr = c.get_double("train.lr");
    o.warmup = c.get_int("train.warmup");
    o.checkpoint_every = c.get_int("train.checkpoint_every");
    o.early_stop_accuracy = c.get_double("train.early_stop_accuracy");
    require(o.steps >= 1 && o.batch >= 1, error_kind::config, "train: bad steps/batch");
    require(o.lr > 0, error_kind::config, "train: lr must be >0");
    require(o.early_stop_accuracy >= 0 && o.early_stop_accuracy <= 1, error_kind::config,
            "train: early_stop_accuracy outside [0,1]");
    return o;
}

// warmup must stay below total for the cosine schedule; shrink it for short runs
inline int64_t effective_warmup(int64_t warmup, int64_t total) {
    return std::min(warmup, total / 2);
}

// ---- config snapshots (embedded in checkpoints) ----

inline std::string tokenizer_snapshot(const TokenizerConfig & c) {
    Config s;
    declare_tokenizer_config(s);
    s.set_int("tokenizer.f", c.f);
    s.set_int("tokenizer.res_blocks", c.res_blocks);
    s.set_int("tokenizer.channels", c.channels);
    s.set_int("tokenizer.dec_blocks", c.dec_blocks);
    s.set_int("tokenizer.dec_channels", c.dec_channels);
    s.set_int("tokenizer.disc_channels", c.disc_channels);
    s.set_int("tokenizer.codebook_size", c.codebook_size);
    s.set_int("tokenizer.code_dim", c.code_dim);
    s.set_double("tokenizer.w_recon", c.w_recon);
    s.set_double("tokenizer.w_perceptual", c.w_perceptual);
    s.set_double("tokenizer.w_adversarial", c.w_adversarial);
    s.set_double("tokenizer.w_commit", c.w_commit);
    return s.serialize();
}

inline TokenizerConfig tokenizer_config_from_snapshot(const std::string & text) {
    Config s;
    declare_tokenizer_config(s);
    s.parse_text(text, "checkpoint snapshot", true);
    return tokenizer_config_from(s);
}

inline std::string base_snapshot(const BaseModelConfig & c) {
    Config s;
    declare_base_config(s);
    s.declare_int("base.codebook_size", c.codebook_size);
    s.declare_int("base.grid_h", c.grid_h);
    s.declare_int("base.grid_w", c.grid_w);
    s.set_int("base.layers", c.layers);
    s.set_int("base.dim", c.dim);
    s.set_int("base.mlp_dim", c.mlp_dim);
    s.set_int("base.heads", c.heads);
    return s.serialize();
}

inline BaseModelConfig base_config_from_snapshot(const std::string & text) {
    Config s;
    declare_base_config(s);
    BaseModelConfig d;
    s.declare_int("base.codebook_size", d.codebook_size);
    s.declare_int("base.grid_h", d.grid_h);
    s.declare_int("base.grid_w", d.grid_w);
    s.parse_text(text, "checkpoint snapshot", true);
    return base_config_from(s, (int)s.get_int("base.codebook_size"), (int)s.get_int("base.grid_h"),
                            (int)s.get_int("base.grid_w"));
}

inline std::string superres_snapshot(const SuperResConfig & c) {
    Config s;
    declare_superres_config(s);
    s.declare_int("superres.codebook_size", c.codebook_size);
    s.declare_int("superres.low_codebook_size", c.low_codebook_size);
    s.declare_int("superres.low_h", c.low_h);
    s.declare_int("superres.low_w", c.low_w);
    s.declare_int("superres.high_h", c.high_h);
    s.declare_int("superres.high_w", c.high_w);
    s.set_int("superres.enc_layers", c.enc_layers);
    s.set_int("superres.dec_layers", c.dec_layers);
    s.set_int("superres.dim", c.dim);
    s.set_int("superres.mlp_dim", c.mlp_dim);
    s.set_int("superres.heads", c.heads);
    return s.serialize();
}

inline SuperResConfig superres_config_from_snapshot(const std::string & text) {
    Config s;
    declare_superres_config(s);
    SuperResConfig d;
    s.declare_int("superres.codebook_size", d.codebook_size);
    s.declare_int("superres.low_codebook_size", d.low_codebook_size);
    s.declare_int("superres.low_h", d.low_h);
    s.declare_int("superres.low_w", d.low_w);
    s.declare_int("superres.high_h", d.high_h);
    s.declare_int("superres.high_w", d.high_w);
    s.parse_text(text, "checkpoint snapshot", true);
    return superres_config_from(
        s, (int)s.get_int("superres.codebook_size"), (int)s.get_int("superres.low_codebook_size"),
        (int)s.get_int("superres.low_h"), (int)s.get_int("superres.low_w"),
        (int)s.get_int("superres.high_h"), (int)s.get_int("superres.high_w"));
}

// ---- checkpoint packing ----

inline Checkpoint tokenizer_checkpoint(const TokenizerTrainer & tr, const std::string & role) {
    require(role == "tokenizer.base" || role == "tokenizer.highres", error_kind::checkpoint,
            "bad tokenizer role: " + role);
    Checkpoint c;
    c.role = role;
    c.config_text = tokenizer_snapshot(tr.model.cfg);
    store_to_checkpoint(tr.model.ps, c);
    store_to_checkpoint(tr.disc.ps, c);
    optimizer_to_checkpoint(tr.opt_g, tr.model.ps, c);
    optimizer_to_checkpoint(tr.opt_d, tr.disc.ps, c, "opt.step.disc");
    return c;
}

inline Tokenizer tokenizer_from_checkpoint(const Checkpoint & c) {
    Tokenizer tok = Tokenizer::init(tokenizer_config_from_snapshot(c.config_text), 0);
    checkpoint_to_store(c, tok.ps);
    return tok;
}

inline Tokenizer load_tokenizer(const std::string & path, const std::string & expected_role) {
    return tokenizer_from_checkpoint(Checkpoint::load(path, expected_role));
}

inline Checkpoint base_checkpoint(const BaseModel & m, const AdamW & opt) {
    Checkpoint c;
    c.role = "model.base";
    c.config_text = base_snapshot(m.cfg);
    store_to_checkpoint(m.ps, c);
    optimizer_to_checkpoint(opt, m.ps, c);
    return c;
}

inline BaseModel base_from_checkpoint(const Checkpoint & c) {
    BaseModel m = BaseModel::init(base_config_from_snapshot(c.config_text), 0);
    checkpoint_to_store(c, m.ps);
    return m;
}

inline BaseModel load_base_model(const std::string & path) {
    return base_from_checkpoint(Checkpoint::load(path, "model.base"));
}

inline Checkpoint superres_checkpoint(const SuperResModel & m, const AdamW & opt) {
    Checkpoint c;
    c.role = "model.superres";
    c.config_text = superres_snapshot(m.cfg);
    store_to_checkpoint(m.ps, c);
    optimizer_to_checkpoint(opt, m.ps, c);
    return c;
}

inline SuperResModel superres_from_checkpoint(const Checkpoint & c) {
    SuperResModel m = SuperResModel::init(superres_config_from_snapshot(c.config_text), 0);
    checkpoint_to_store(c, m.ps);
    return m;
}

inline SuperResModel load_superres_model(const std::string & path) {
    return superres_from_checkpoint(Checkpoint::load(path, "model.superres"));
}

// ---- tokenizer training loop ----

struct TokenizerTrainRun {
    TokenizerTrainer trainer;
    std::string final_checkpoint;
};

inline TokenizerTrainRun train_tokenizer(const Dataset & data, resolution_role res_role,
                                         const TokenizerConfig & cfg, const TrainOptions & opt,
                                         bool log_to_stdout = true) {
    require(!data.items.empty(), error_kind::contract, "empty dataset");
    const std::string role =
        res_role == resolution_role::low ? "tokenizer.base" : "tokenizer.highres";
    std::filesystem::create_directories(opt.out_dir);

    std::vector<Tensor> images;
    images.reserve(data.items.size());
    for (size_t i = 0; i < data.items.size(); ++i) {
        images.push_back(image_to_tensor(res_role == resolution_role::low ? data.load_low(i)
                                                                          : data.load_high(i)));
    }

    TokenizerTrainRun run;
    run.trainer = TokenizerTrainer::make(cfg, opt.seed);
    RngState rng = RngState::seeded(opt.seed).split(0x746f6b);
    MetricsLog log(opt.out_dir + "/tokenizer_" +
                       (res_role == resolution_role::low ? "base" : "highres") + "_metrics.csv",
                   {"step", "phase", "lr", "recon", "perceptual", "adversarial", "commit",
                    "codebook", "total", "d_loss", "reseeded"});
    const int64_t warmup = effective_warmup(opt.warmup, opt.steps);
    for (int64_t s = 0; s < opt.steps; ++s) {
        std::vector<Tensor> batch;
        batch.reserve((size_t)opt.batch);
        for (int b = 0; b < opt.batch; ++b) {
            batch.push_back(images[rng.below((uint32_t)images.size())]);
        }
        const double lr = cosine_lr(s, opt.steps, warmup, opt.lr);
        TokenizerTrainStats st = run.trainer.train_step(batch, lr, rng);
        log.row({std::to_string(s), st.g_step ? "G" : "D", fmt_f(lr), fmt_f(st.recon),
                 fmt_f(st.perceptual), fmt_f(st.adversarial), fmt_f(st.commit), fmt_f(st.codebook),
                 fmt_f(st.total), fmt_f(st.d_loss), std::to_string(st.reseeded)});
        if (log_to_stdout && (s % 100 == 0 || s + 1 == opt.steps)) {
            std::printf("[%s] step %lld/%lld recon %.4f total %.4f d %.4f\n", role.c_str(),
                        (long long)s, (long long)opt.steps, st.recon, st.total, st.d_loss);
            std::fflush(stdout);
        }
        if (opt.checkpoint_every > 0 && (s + 1) % opt.checkpoint_every == 0 && s + 1 < opt.steps) {
            tokenizer_checkpoint(run.trainer, role)
                .save(opt.out_dir + "/" + role + ".step" + std::to_string(s + 1) + ".ckpt");
        }
    }
    run.final_checkpoint = opt.out_dir + "/" + role + ".ckpt";
    tokenizer_checkpoint(run.trainer, role).save(run.final_checkpoint);
    return run;
}

// decoder finetuning: encoder and codebook bitwise frozen, widened decoder
// trains on reconstruction + perceptual only
inline TokenizerTrainRun finetune_decoder(const Dataset & data, resolution_role res_role,
                                          const Tokenizer & trained, const TrainOptions & opt,
                                          bool log_to_stdout = true) {
    require(!data.items.empty(), error_kind::contract, "empty dataset");
    const std::string role =
        res_role == resolution_role::low ? "tokenizer.base" : "tokenizer.highres";
    std::filesystem::create_directories(opt.out_dir);
    std::vector<Tensor> images;
    for (size_t i = 0; i < data.items.size(); ++i) {
        images.push_back(image_to_tensor(res_role == resolution_role::low ? data.load_low(i)
                                                                          : data.load_high(i)));
    }
    TokenizerTrainRun run;
    run.trainer = TokenizerTrainer::for_finetune(trained, opt.seed);
    RngState rng = RngState::seeded(opt.seed).split(0x66746e65);
    MetricsLog log(opt.out_dir + "/finetune_" +
                       (res_role == resolution_role::low ? "base" : "highres") + "_metrics.csv",
                   {"step", "lr", "recon", "perceptual", "commit", "total"});
    const int64_t warmup = effective_warmup(opt.warmup, opt.steps);
    for (int64_t s = 0; s < opt.steps; ++s) {
        std::vector<Tensor> batch;
        for (int b = 0; b < opt.batch; ++b) {
            batch.push_back(images[rng.below((uint32_t)images.size())]);
        }
        const double lr = cosine_lr(s, opt.steps, warmup, opt.lr);
        TokenizerTrainStats st = run.trainer.train_step(batch, lr, rng);
        log.row({std::to_string(s), fmt_f(lr), fmt_f(st.recon), fmt_f(st.perceptual),
                 fmt_f(st.commit), fmt_f(st.total)});
        if (log_to_stdout && (s % 100 == 0 || s + 1 == opt.steps)) {
            std::printf("[finetune %s] step %lld/%lld recon %.4f\n", role.c_str(), (long long)s,
                        (long long)opt.steps, st.recon);
            std::fflush(stdout);
        }
    }
    run.final_checkpoint = opt.out_dir + "/" + role + ".finetuned.ckpt";
    tokenizer_checkpoint(run.trainer, role).save(run.final_checkpoint);
    return run;
}

// ---- masked-transformer training ----

struct MaskedTrainSample {
    TokenGrid tokens;      // complete grid (targets)
    TokenGrid low;         // superres conditioning; unused for the base model
    std::string caption;
};

struct MaskedTrainResult {
    double last_loss = 0;
    double last_accuracy = 0;
    int64_t steps_run = 0;
    int64_t drops = 0;        // conditioning-drop count across sampled items
    int64_t samples = 0;
    std::string final_checkpoint;
};

// shared loop body: per sample draw a mask rate, mask the target grid, drop
// conditioning with probability 0.1, accumulate masked cross-entropy grads;
// one optimizer step per batch. forward() returns the masked-position logits.
template <class Model>
MaskedTrainResult train_masked_model(
    Model & model, AdamW & opt, const std::vector<MaskedTrainSample> & samples,
    const TrainOptions & topt, const std::string & role,
    const std::function<Var(Tape &, const MaskedTrainSample &, const TokenGrid &, bool)> & forward,
    const std::function<Checkpoint()> & snapshot, bool log_to_stdout = true) {
    require(!samples.empty(), error_kind::contract, "empty training set");
    std::filesystem::create_directories(topt.out_dir);
    const std::string tag = role == "model.base" ? "base" : "superres";
    MetricsLog log(topt.out_dir + "/" + tag + "_metrics.csv",
                   {"step", "lr", "loss", "masked_accuracy", "drop_rate"});
    RngState rng = RngState::seeded(topt.seed).split(role == "model.base" ? 0x62617365 : 0x73757072);
    const int mask_id = model.cfg.mask_token();
    const int64_t warmup = effective_warmup(topt.warmup, topt.steps);

    MaskedTrainResult res;
    Tape tape;
    for (int64_t s = 0; s < topt.steps; ++s) {
        model.ps.zero_grad();
        const double lr = cosine_lr(s, topt.steps, warmup, topt.lr);
        double loss_sum = 0;
        int64_t correct = 0, masked_total = 0;
        for (int b = 0; b < topt.batch; ++b) {
            const MaskedTrainSample & item = samples[rng.below((uint32_t)samples.size())];
            const double r = sample_mask_rate(rng);
            auto [masked, mask] = apply_mask(item.tokens, r, rng, mask_id);
            const bool drop = rng.uniform() < 0.1;
            res.drops += drop ? 1 : 0;
            ++res.samples;

            tape.reset();
            model.ps.stage(tape, true);
            Var logits = forward(tape, item, masked, drop);
            bool empty_mask = false;
            Var loss = tape.masked_cross_entropy(logits, item.tokens.tokens,
                                                 mask.on, &empty_mask);
            const double lv = tape.scalar(loss);
            require(std::isfinite(lv), error_kind::numeric,
                    "non-finite loss at step " + std::to_string(s) + " (" + role + ")");
            loss_sum += lv;
            if (!empty_mask) {
                tape.backward(loss);
                model.ps.collect(tape);
            }
            const Tensor & lv2 = tape.value(logits);
            for (int i = 0; i < item.tokens.count(); ++i) {
                if (!mask.on[(size_t)i]) continue;
                ++masked_total;
                int arg = 0;
                for (int k = 1; k < lv2.cols(); ++k) {
                    if (lv2.at2(i, k) > lv2.at2(i, arg)) arg = k;
                }
                correct += (arg == item.tokens.tokens[(size_t)i]) ? 1 : 0;
            }
        }
        model.ps.scale_grad(1.0 / topt.batch);
        opt.step(model.ps, lr);
        res.last_loss = loss_sum / topt.batch;
        res.last_accuracy = masked_total > 0 ? (double)correct / (double)masked_total : 0.0;
        res.steps_run = s + 1;
        log.row({std::to_string(s), fmt_f(lr), fmt_f(res.last_loss), fmt_f(res.last_accuracy),
                 fmt_f((double)res.drops / (double)res.samples)});
        if (log_to_stdout && (s % 100 == 0 || s + 1 == topt.steps)) {
            std::printf("[%s] step %lld/%lld loss %.4f acc %.3f\n", role.c_str(), (long long)s,
                        (long long)topt.steps, res.last_loss, res.last_accuracy);
            std::fflush(stdout);
        }
        if (topt.checkpoint_every > 0 && (s + 1) % topt.checkpoint_every == 0 &&
            s + 1 < topt.steps) {
            snapshot().save(topt.out_dir + "/" + role + ".step" + std::to_string(s + 1) + ".ckpt");
        }
        if (topt.early_stop_accuracy > 0 && res.last_accuracy >= topt.early_stop_accuracy) break;
    }
    res.final_checkpoint = topt.out_dir + "/" + role + ".ckpt";
    snapshot().save(res.final_checkpoint);
    return res;
}

inline MaskedTrainResult train_base_model(BaseModel & model, AdamW & opt,
                                          const std::vector<MaskedTrainSample> & samples,
                                          const TrainOptions & topt, bool log_to_stdout = true) {
    // caption embeddings are deterministic; cache per unique caption
    std::unordered_map<std::string, TextEmbeddingSeq> text_cache;
    auto forward = [&](Tape & tape, const MaskedTrainSample & item, const TokenGrid & masked,
                       bool drop) {
        auto it = text_cache.find(item.caption);
        if (it == text_cache.end()) {
            it = text_cache.emplace(item.caption, model.encode_text(item.caption)).first;
        }
        return model.forward_fw(tape, masked, it->second, drop);
    };
    auto snapshot = [&]() { return base_checkpoint(model, opt); };
    return train_masked_model<BaseModel>(model, opt, samples, topt, "model.base", forward, snapshot,
                                         log_to_stdout);
}

inline MaskedTrainResult train_superres_model(SuperResModel & model, AdamW & opt,
                                              const std::vector<MaskedTrainSample> & samples,
                                              const TrainOptions & topt, bool log_to_stdout = true) {
    std::unordered_map<std::string, TextEmbeddingSeq> text_cache;
    auto forward = [&](Tape & tape, const MaskedTrainSample & item, const TokenGrid & masked,
                       bool drop) {
        auto it = text_cache.find(item.caption);
        if (it == text_cache.end()) {
            it = text_cache.emplace(item.caption, model.encode_text(item.caption)).first;
        }
        return model.forward_fw(tape, item.low, it->second, masked, drop);
    };
    auto snapshot = [&]() { return superres_checkpoint(model, opt); };
    return train_masked_model<SuperResModel>(model, opt, samples, topt, "model.superres", forward,
                                             snapshot, log_to_stdout);
}

// tokenize every dataset item once with the frozen tokenizers
inline std::vector<MaskedTrainSample> tokenize_dataset(const Dataset & data,
                                                       const Tokenizer & tok_base,
                                                       const Tokenizer * tok_hi) {
    std::vector<MaskedTrainSample> out;
    out.reserve(data.items.size());
    for (size_t i = 0; i < data.items.size(); ++i) {
        MaskedTrainSample s;
        s.caption = data.items[i].caption;
        s.low = tok_base.encode(data.load_low(i)).second;
        if (tok_hi) {
            s.tokens = tok_hi->encode(data.load_high(i)).second;
        } else {
            s.tokens = s.low;
        }
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace musekit
