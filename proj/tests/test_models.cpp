#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "musekit/base_model.hpp"
#include "musekit/perceptual.hpp"
#include "musekit/superres_model.hpp"
#include "musekit/vq_tokenizer.hpp"
#include "fd_check.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

using namespace musekit;
using musekit::testing::catch_error;

namespace {

TokenizerConfig tiny_tok_cfg() {
    TokenizerConfig cfg;
    cfg.f = 2;
    cfg.res_blocks = 1;
    cfg.channels = 4;
    cfg.dec_blocks = 1;
    cfg.dec_channels = 4;
    cfg.disc_channels = 4;
    cfg.codebook_size = 8;
    cfg.code_dim = 4;
    return cfg;
}

SceneImage random_image(int w, int h, uint64_t seed) {
    SceneImage img = SceneImage::filled(w, h, 0, 0, 0);
    RngState rng(seed);
    for (auto & p : img.pixels) p = (uint8_t)rng.below(256);
    return img;
}

// central-difference probe of collected parameter gradients through an
// arbitrary staged-model loss; T=double keeps the probes tight
template <class T, class BuildLoss>
double model_fd_max_rel(ParamStoreT<T> & ps, const std::vector<std::string> & names,
                        BuildLoss && build, RngState & rng, int probes = 4, double eps = 1e-4) {
    ps.zero_grad();
    {
        TapeT<T> tape(true);
        ps.stage(tape, true);
        Var loss = build(tape);
        tape.backward(loss);
        ps.collect(tape);
    }
    auto eval = [&]() {
        TapeT<T> tape(false);
        ps.stage(tape, false);
        return (double)tape.scalar(build(tape));
    };
    double max_rel = 0;
    for (const auto & name : names) {
        TensorT<T> & v = ps.value(name);
        const TensorT<T> & g = ps.grad(name);
        for (int p = 0; p < probes; ++p) {
            const int64_t idx = (int64_t)rng.below((uint32_t)v.size());
            const T keep = v[idx];
            v[idx] = keep + (T)eps;
            const double up = eval();
            v[idx] = keep - (T)eps;
            const double dn = eval();
            v[idx] = keep;
            const double fd = (up - dn) / (2.0 * eps);
            const double an = (double)g[idx];
            const double rel =
                std::fabs(fd - an) / std::max({1e-6, std::fabs(fd), std::fabs(an)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

} // namespace

// ---- tokenizer ----

TEST_CASE("tokenizer config: stages and validation") {
    TokenizerConfig c = tiny_tok_cfg();
    CHECK(c.stages() == 1);
    c.f = 4;
    CHECK(c.stages() == 2);
    c.f = 8;
    CHECK(c.stages() == 3);

    c.f = 3;
    auto r = catch_error([&] { c.check(); });
    CHECK(r.threw);
    CHECK(r.kind == error_kind::config);

    c = tiny_tok_cfg();
    c.w_commit = -1;
    CHECK(catch_error([&] { c.check(); }).kind == error_kind::config);
}

TEST_CASE("tokenizer encode/decode shapes and round trip plumbing") {
    Tokenizer tok = Tokenizer::init(tiny_tok_cfg(), 99);
    SceneImage img = random_image(8, 8, 5);

    auto [rows, grid] = tok.encode(img);
    CHECK(rows.shape == std::vector<int>{16, 4});
    CHECK(grid.h == 4);
    CHECK(grid.w == 4);
    for (int t : grid.tokens) {
        CHECK(t >= 0);
        CHECK(t < 8);
    }

    SceneImage out = tok.decode(grid);
    CHECK(out.width == 8);
    CHECK(out.height == 8);

    // same image encodes to the same grid
    auto [rows2, grid2] = tok.encode(img);
    CHECK(grid2 == grid);
    CHECK(rows2.data == rows.data);
}

TEST_CASE("tokenizer rejects bad inputs") {
    Tokenizer tok = Tokenizer::init(tiny_tok_cfg(), 99);

    // dims must divide by f
    auto r = catch_error([&] { (void)tok.encode(random_image(7, 8, 1)); });
    CHECK(r.threw);
    CHECK(r.kind == error_kind::shape);

    TokenGrid bad = TokenGrid::filled(4, 4, 0);
    bad.at(2, 2) = 99;
    auto d = catch_error([&] { (void)tok.decode(bad); });
    CHECK(d.threw);
    CHECK(d.kind == error_kind::token);
    CHECK(d.message.find("99") != std::string::npos);
    CHECK(d.message.find("outside codebook") != std::string::npos);
}

TEST_CASE("nearest token assignment: exact ties break to the lowest index") {
    Tokenizer tok = Tokenizer::init(tiny_tok_cfg(), 7);
    Tensor & book = tok.ps.value("codebook");
    // rows 2 and 5 identical; rows spread elsewhere
    for (int k = 0; k < 8; ++k) {
        for (int c = 0; c < 4; ++c) book.at2(k, c) = (float)k;
    }
    for (int c = 0; c < 4; ++c) book.at2(5, c) = book.at2(2, c);

    Tensor ze = Tensor::zeros({1, 4});
    for (int c = 0; c < 4; ++c) ze.at2(0, c) = 2.0f;    // exactly on rows 2 and 5
    TokenGrid g = tok.nearest_tokens(ze, 1, 1);
    CHECK(g.tokens[0] == 2);

    Tensor bad = Tensor::zeros({2, 4});
    CHECK(catch_error([&] { (void)tok.nearest_tokens(bad, 1, 1); }).kind == error_kind::shape);
}

TEST_CASE("quantize_st: forward snaps to codebook, gradient passes straight through") {
    Tokenizer tok = Tokenizer::init(tiny_tok_cfg(), 7);
    Tensor & book = tok.ps.value("codebook");
    for (int k = 0; k < 8; ++k) {
        for (int c = 0; c < 4; ++c) book.at2(k, c) = (float)(3 * k);
    }

    Tape tape;
    tok.ps.stage(tape, true);
    Tensor ze_t = Tensor::from({2, 4}, {0.4f, -0.2f, 0.1f, 0.3f, 3.2f, 2.9f, 3.1f, 2.8f});
    Var ze = tape.leaf(ze_t, true);
    auto q = tok.quantize_st(tape, ze, 1, 2);
    CHECK(q.grid.tokens == std::vector<int>{0, 1});

    // forward value is exactly the selected codebook rows
    const Tensor & zq = tape.value(q.zq_rows);
    for (int c = 0; c < 4; ++c) {
        CHECK(zq.at2(0, c) == book.at2(0, c));
        CHECK(zq.at2(1, c) == book.at2(1, c));
    }

    // d sum(w * zq) / d ze == w exactly: the quantizer is gradient-transparent
    Tensor w_t = Tensor::from({2, 4}, {1.f, -2.f, 3.f, 0.5f, -1.f, 4.f, 0.25f, 2.f});
    Var loss = tape.sum_all(tape.mul(tape.constant(w_t), q.zq_rows));
    tape.backward(loss);
    const Tensor & gze = tape.grad(ze);
    for (int64_t i = 0; i < w_t.size(); ++i) CHECK(gze[i] == w_t[i]);

    // commitment and codebook losses agree in value (same squared distance)
    CHECK(tape.scalar(q.codebook_loss) == doctest::Approx(tape.scalar(q.commitment_loss)));
}

TEST_CASE("quantize_st loss terms route gradients to the right side") {
    TokenizerT<double> tok = TokenizerT<double>::init(tiny_tok_cfg(), 7);
    DTensor & book = tok.ps.value("codebook");
    for (int k = 0; k < 8; ++k) {
        for (int c = 0; c < 4; ++c) book.at2(k, c) = 3.0 * k;
    }

    DTape tape;
    tok.ps.stage(tape, true);
    Var ze = tape.leaf(DTensor::from({1, 4}, {0.4, -0.2, 0.1, 0.3}), true);
    auto q = tok.quantize_st(tape, ze, 1, 1);

    SUBCASE("codebook loss moves only the codebook") {
        tape.backward(q.codebook_loss);
        CHECK(!tape.has_grad(ze));
        tok.ps.collect(tape);
        const DTensor & g = tok.ps.grad("codebook");
        double row0 = 0, rest = 0;
        for (int c = 0; c < 4; ++c) row0 += std::fabs(g.at2(0, c));
        for (int k = 1; k < 8; ++k) {
            for (int c = 0; c < 4; ++c) rest += std::fabs(g.at2(k, c));
        }
        CHECK(row0 > 0);
        CHECK(rest == 0);
    }
    SUBCASE("commitment loss moves only the encoder side") {
        tape.backward(q.commitment_loss);
        CHECK(tape.has_grad(ze));
        tok.ps.collect(tape);
        const DTensor & g = tok.ps.grad("codebook");
        for (int64_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
    }
}

TEST_CASE("tokenizer autoencoder path: finite differences through conv stack") {
    TokenizerConfig cfg = tiny_tok_cfg();
    TokenizerT<double> tok = TokenizerT<double>::init(cfg, 21);
    DTensor img = image_to_tensor(random_image(4, 4, 3)).cast<double>();

    RngState rng(11);
    auto build = [&](DTape & tape) {
        Var x = tape.constant(img);
        Var rows = tok.encode_fw(tape, x);
        Var recon = tok.decode_fw(tape, rows, 2, 2);
        return tape.l1_loss(recon, x);
    };
    const double rel = model_fd_max_rel(
        tok.ps, {"enc.stem.w", "enc.s0.down.w", "enc.out.w", "dec.in.b", "dec.out.w"}, build, rng);
    CHECK(rel < 1e-5);
}

TEST_CASE("perceptual net: frozen, deterministic, zero self-distance") {
    PerceptualNet a = PerceptualNet::build();
    PerceptualNet b = PerceptualNet::build();
    for (size_t i = 0; i < a.ps.count(); ++i) {
        CHECK(a.ps.entry(i).value.data == b.ps.entry(i).value.data);
    }

    Tensor x = image_to_tensor(random_image(16, 16, 9));
    Tensor y = image_to_tensor(random_image(16, 16, 10));
    Tape tape(false);
    CHECK(tape.scalar(a.loss_fw(tape, tape.constant(x), tape.constant(x))) == 0.0f);
    CHECK(tape.scalar(a.loss_fw(tape, tape.constant(x), tape.constant(y))) > 0.0f);

    std::vector<double> f = a.feature_vec(x);
    CHECK(f.size() == 64);
    CHECK(f == a.feature_vec(x));
}

TEST_CASE("tokenizer trainer: G/D alternation and data-driven codebook init") {
    TokenizerConfig cfg = tiny_tok_cfg();
    cfg.codebook_size = 32;
    TokenizerTrainer tr = TokenizerTrainer::make(cfg, 33);
    RngState rng(1);

    std::vector<Tensor> batch = {image_to_tensor(random_image(8, 8, 41))};
    Tensor book_before = tr.model.ps.value("codebook");
    Tensor stem_before = tr.model.ps.value("enc.stem.w");

    // step 0 only harvests latents and seeds the codebook; no optimizer step
    CHECK(tr.is_g_step());
    TokenizerTrainStats s0 = tr.train_step(batch, 1e-3, rng);
    CHECK(s0.g_step);
    CHECK(s0.reseeded == 32);
    CHECK(tr.model.ps.value("codebook").data != book_before.data);
    CHECK(tr.model.ps.value("enc.stem.w").data == stem_before.data);
    CHECK(tr.used_recently(2) == 32);    // init marks every row used

    // step 1 is a discriminator step: disc moves, generator does not
    CHECK(!tr.is_g_step());
    Tensor disc_before = tr.disc.ps.value("disc.c0.w");
    Tensor gen_before = tr.model.ps.value("dec.out.w");
    TokenizerTrainStats s1 = tr.train_step(batch, 1e-3, rng);
    CHECK(!s1.g_step);
    CHECK(tr.disc.ps.value("disc.c0.w").data != disc_before.data);
    CHECK(tr.model.ps.value("dec.out.w").data == gen_before.data);

    // step 2 is a generator step: generator moves, disc does not
    CHECK(tr.is_g_step());
    disc_before = tr.disc.ps.value("disc.c0.w");
    gen_before = tr.model.ps.value("dec.out.w");
    TokenizerTrainStats s2 = tr.train_step(batch, 1e-3, rng);
    CHECK(s2.g_step);
    CHECK(s2.total != 0.0);
    CHECK(tr.model.ps.value("dec.out.w").data != gen_before.data);
    CHECK(tr.disc.ps.value("disc.c0.w").data == disc_before.data);
}

TEST_CASE("tokenizer trainer: adversarial weight 0 trains generator every step") {
    TokenizerConfig cfg = tiny_tok_cfg();
    cfg.w_adversarial = 0.0;
    TokenizerTrainer tr = TokenizerTrainer::make(cfg, 33);
    RngState rng(1);
    std::vector<Tensor> batch = {image_to_tensor(random_image(8, 8, 42))};

    Tensor disc_before = tr.disc.ps.value("disc.c0.w");
    for (int i = 0; i < 4; ++i) {
        CHECK(tr.is_g_step());
        TokenizerTrainStats st = tr.train_step(batch, 1e-3, rng);
        CHECK(st.g_step);
        CHECK(st.adversarial == 0.0);
    }
    CHECK(tr.disc.ps.value("disc.c0.w").data == disc_before.data);
}

TEST_CASE("tokenizer trainer: dead codebook rows are reseeded from the batch") {
    TokenizerConfig cfg = tiny_tok_cfg();
    cfg.codebook_size = 32;
    cfg.w_adversarial = 0.0;    // G every step keeps the bookkeeping simple
    TokenizerTrainer tr = TokenizerTrainer::make(cfg, 33);
    tr.reseed_window = 1;
    RngState rng(1);
    std::vector<Tensor> batch = {image_to_tensor(random_image(8, 8, 43))};

    (void)tr.train_step(batch, 1e-3, rng);    // data init
    // one image gives 16 latent rows; at most 16 of 32 rows can be in use, so
    // a window of 1 leaves >=16 dead rows and the pool caps the reseed at 16
    TokenizerTrainStats st = tr.train_step(batch, 1e-3, rng);
    CHECK(st.reseeded == 16);
    CHECK(tr.used_recently(2) > 16);
}

TEST_CASE("finetune trainer: frozen encoder and codebook, doubled decoder") {
    TokenizerConfig cfg = tiny_tok_cfg();
    Tokenizer trained = Tokenizer::init(cfg, 55);
    TokenizerTrainer ft = TokenizerTrainer::for_finetune(trained, 56);

    CHECK(ft.model.cfg.dec_blocks == 2 * cfg.dec_blocks);
    CHECK(ft.model.cfg.dec_channels == 2 * cfg.dec_channels);
    CHECK(ft.model.cfg.w_adversarial == 0.0);
    CHECK(!ft.data_init);

    for (size_t i = 0; i < ft.model.ps.count(); ++i) {
        const auto & e = ft.model.ps.entry(i);
        const bool shared = e.name.rfind("enc.", 0) == 0 || e.name == "codebook";
        CHECK(e.frozen == shared);
        if (shared) CHECK(e.value.data == trained.ps.value(e.name).data);
    }

    // identical encoder + codebook means identical token grids
    SceneImage img = random_image(8, 8, 77);
    CHECK(ft.model.encode(img).second == trained.encode(img).second);

    // training steps must leave the shared weights untouched
    RngState rng(3);
    std::vector<Tensor> batch = {image_to_tensor(img)};
    Tensor enc_before = ft.model.ps.value("enc.stem.w");
    Tensor book_before = ft.model.ps.value("codebook");
    Tensor dec_before = ft.model.ps.value("dec.out.w");
    (void)ft.train_step(batch, 1e-3, rng);
    CHECK(ft.model.ps.value("enc.stem.w").data == enc_before.data);
    CHECK(ft.model.ps.value("codebook").data == book_before.data);
    CHECK(ft.model.ps.value("dec.out.w").data != dec_before.data);
}

// ---- masking ----

TEST_CASE("mask rate law: arcsine density via sin transform") {
    CHECK(sample_mask_rate(0.0) == 0.0);
    CHECK(sample_mask_rate(0.5) == doctest::Approx(std::sin(kPi / 4)).epsilon(1e-12));

    RngState rng(2024);
    const int n = 200000;
    std::vector<double> rs((size_t)n);
    double mean = 0;
    for (auto & r : rs) {
        r = sample_mask_rate(rng);
        CHECK(r >= 0.0);
        CHECK(r < 1.0);
        mean += r;
    }
    mean /= n;
    CHECK(mean == doctest::Approx(2.0 / kPi).epsilon(0.01));

    // KS distance against the exact CDF F(r) = (2/pi) asin(r)
    std::sort(rs.begin(), rs.end());
    double ks = 0;
    for (int i = 0; i < n; ++i) {
        const double f = (2.0 / kPi) * std::asin(rs[(size_t)i]);
        ks = std::max(ks, std::fabs(f - (double)(i + 1) / n));
        ks = std::max(ks, std::fabs(f - (double)i / n));
    }
    CHECK(ks < 0.01);

    CHECK(catch_error([&] { (void)sample_mask_rate(1.0); }).kind == error_kind::contract);
    CHECK(catch_error([&] { (void)sample_mask_rate(-0.1); }).kind == error_kind::contract);
}

TEST_CASE("apply_mask: exact count, consistency, determinism") {
    TokenGrid g = TokenGrid::filled(8, 8, 5);
    const int mask_id = 256;

    RngState rng(7);
    auto [m641, mask641] = apply_mask(g, 0.64, rng, mask_id);
    CHECK(mask641.count() == 41);    // ceil(0.64 * 64)
    int masked = 0;
    for (int i = 0; i < 64; ++i) {
        if (mask641.on[(size_t)i]) {
            ++masked;
            CHECK(m641.tokens[(size_t)i] == mask_id);
        } else {
            CHECK(m641.tokens[(size_t)i] == 5);
        }
    }
    CHECK(masked == 41);

    RngState rng2(7);
    auto [m2, mask2] = apply_mask(g, 0.64, rng2, mask_id);
    CHECK(m2 == m641);
    CHECK(mask2 == mask641);

    RngState rng3(8);
    auto [m0, k0] = apply_mask(g, 0.0, rng3, mask_id);
    CHECK(k0.count() == 0);
    CHECK(m0 == g);
    auto [m1, k1] = apply_mask(g, 1.0, rng3, mask_id);
    CHECK(k1.count() == 64);
    for (int t : m1.tokens) CHECK(t == mask_id);

    CHECK(catch_error([&] { (void)apply_mask(g, 1.5, rng3, mask_id); }).kind ==
          error_kind::contract);
}

// ---- base transformer ----

namespace {

BaseModelConfig tiny_base_cfg(int codebook = 64) {
    BaseModelConfig cfg;
    cfg.layers = 1;
    cfg.dim = 32;
    cfg.mlp_dim = 128;
    cfg.heads = 2;
    cfg.codebook_size = codebook;
    cfg.grid_h = 4;
    cfg.grid_w = 4;
    return cfg;
}

TokenGrid random_grid(int h, int w, int k, uint64_t seed) {
    TokenGrid g = TokenGrid::filled(h, w, 0);
    RngState rng(seed);
    for (auto & t : g.tokens) t = (int)rng.below((uint32_t)k);
    return g;
}

} // namespace

TEST_CASE("base config validation") {
    BaseModelConfig cfg = tiny_base_cfg();
    cfg.mlp_dim = 100;    // not 4*dim
    CHECK(catch_error([&] { cfg.check(); }).kind == error_kind::config);
    cfg = tiny_base_cfg();
    cfg.heads = 3;    // 32 % 3 != 0
    CHECK(catch_error([&] { cfg.check(); }).kind == error_kind::config);
    CHECK(tiny_base_cfg().mask_token() == 64);
}

TEST_CASE("base model: parameter layout and logits shape") {
    BaseModel m = BaseModel::init(tiny_base_cfg(), 101);
    CHECK(m.ps.value("tok.emb").shape == std::vector<int>{65, 32});    // +1 mask row
    CHECK(m.ps.value("pos.emb").shape == std::vector<int>{16, 32});
    CHECK(m.ps.has("l0.attn.q.w"));
    CHECK(m.ps.has("l0.xattn.q.w"));    // caption cross-attention
    CHECK(m.ps.has("head.fc2.w"));
    CHECK(!m.ps.has("l1.attn.q.w"));

    TokenGrid g = random_grid(4, 4, 64, 3);
    DTensor lg = m.logits(g, m.encode_text("one red circle"), false);
    CHECK(lg.shape == std::vector<int>{16, 64});
    CHECK(lg.all_finite());
}

TEST_CASE("base model: input contracts") {
    BaseModel m = BaseModel::init(tiny_base_cfg(), 101);
    TextEmbeddingSeq text = m.encode_text("one red circle");

    TokenGrid wrong = TokenGrid::filled(2, 8, 0);
    CHECK(catch_error([&] { (void)m.logits(wrong, text, false); }).kind == error_kind::contract);

    TokenGrid oob = TokenGrid::filled(4, 4, 0);
    oob.at(0, 0) = 66;    // beyond the mask id 64
    CHECK(catch_error([&] { (void)m.logits(oob, text, false); }).kind == error_kind::token);

    // the mask id itself is a legal input token
    TokenGrid masked = TokenGrid::filled(4, 4, 64);
    CHECK(m.logits(masked, text, false).all_finite());
}

TEST_CASE("base model: init loss sits at ln K over masked cells") {
    BaseModelConfig cfg = tiny_base_cfg(256);
    BaseModel m = BaseModel::init(cfg, 11);
    TokenGrid target = random_grid(4, 4, 256, 4);
    RngState rng(5);
    auto [masked, mask] = apply_mask(target, 0.7, rng, cfg.mask_token());

    Tape tape(false);
    m.ps.stage(tape, false);
    Var logits = m.forward_fw(tape, masked, m.encode_text("two blue squares"), false);
    Var loss = tape.masked_cross_entropy(logits, target.tokens, mask.on);
    // fresh 0.02-scale weights keep the head near uniform over 256 classes
    CHECK(tape.scalar(loss) == doctest::Approx(std::log(256.0)).epsilon(0.05));
}

TEST_CASE("base model: padding rows beyond the caption cannot influence logits") {
    BaseModel m = BaseModel::init(tiny_base_cfg(), 101);
    TokenGrid g = random_grid(4, 4, 64, 9);
    TextEmbeddingSeq text = m.encode_text("one red circle");
    DTensor ref = m.logits(g, text, false);

    TextEmbeddingSeq scribbled = text;
    for (int i = 3; i < kTextLen; ++i) {
        for (int j = 0; j < kTextDim; ++j) scribbled.vectors.at2(i, j) = 123.0f + i + j;
    }
    DTensor out = m.logits(g, scribbled, false);
    CHECK(out.data == ref.data);    // invalid keys are skipped, not just downweighted
}

TEST_CASE("base model: captions steer logits, word order matters, drop ignores text") {
    BaseModel m = BaseModel::init(tiny_base_cfg(), 101);
    TokenGrid g = TokenGrid::filled(4, 4, 64);

    DTensor a = m.logits(g, m.encode_text("one red circle"), false);
    DTensor b = m.logits(g, m.encode_text("two blue squares"), false);
    CHECK(a.data != b.data);

    DTensor lr = m.logits(g, m.encode_text("above left-of"), false);
    DTensor rl = m.logits(g, m.encode_text("left-of above"), false);
    CHECK(lr.data != rl.data);    // position code reaches the grid stream

    DTensor da = m.logits(g, m.encode_text("one red circle"), true);
    DTensor db = m.logits(g, m.encode_text("two blue squares"), true);
    CHECK(da.data == db.data);    // dropped text is replaced by the empty caption
    DTensor de = m.logits(g, m.encode_text(""), false);
    CHECK(da.data == de.data);
}

TEST_CASE("base model: finite differences through the full transformer") {
    BaseModelConfig cfg = tiny_base_cfg(16);
    BaseModelT<double> m = BaseModelT<double>::init(cfg, 77);
    TokenGrid target = random_grid(4, 4, 16, 6);
    RngState mrng(8);
    auto [masked, mask] = apply_mask(target, 0.5, mrng, cfg.mask_token());
    TextEmbeddingSeq text = m.encode_text("three green triangles");

    auto build = [&](DTape & tape) {
        Var logits = m.forward_fw(tape, masked, text, false);
        return tape.masked_cross_entropy(logits, target.tokens, mask.on);
    };
    RngState rng(12);
    const double rel = model_fd_max_rel(
        m.ps,
        {"tok.emb", "pos.emb", "text.proj.w", "l0.attn.q.w", "l0.xattn.v.w", "l0.mlp.fc1.w",
         "ln_f.g", "head.fc2.b"},
        build, rng);
    CHECK(rel < 1e-5);
}

TEST_CASE("base model: a tiny model can memorize one grid") {
    BaseModelConfig cfg = tiny_base_cfg(64);
    BaseModel m = BaseModel::init(cfg, 303);
    TokenGrid target = random_grid(4, 4, 64, 44);
    TokenGrid masked = TokenGrid::filled(4, 4, cfg.mask_token());
    std::vector<uint8_t> all((size_t)16, 1);
    TextEmbeddingSeq text = m.encode_text("four yellow circles");

    AdamW opt;
    double first = 0, last = 0;
    for (int it = 0; it < 150; ++it) {
        m.ps.zero_grad();
        Tape tape;
        m.ps.stage(tape, true);
        Var logits = m.forward_fw(tape, masked, text, false);
        Var loss = tape.masked_cross_entropy(logits, target.tokens, all);
        last = tape.scalar(loss);
        if (it == 0) first = last;
        tape.backward(loss);
        m.ps.collect(tape);
        opt.step(m.ps, 3e-3);
    }
    CHECK(first == doctest::Approx(std::log(64.0)).epsilon(0.1));
    CHECK(last < first / 4);

    // greedy readout should reproduce most of the memorized grid
    DTensor lg = m.logits(masked, text, false);
    int hits = 0;
    for (int i = 0; i < 16; ++i) {
        int arg = 0;
        for (int k = 1; k < 64; ++k) {
            if (lg.at2(i, k) > lg.at2(i, arg)) arg = k;
        }
        hits += (arg == target.tokens[(size_t)i]) ? 1 : 0;
    }
    CHECK(hits >= 12);
}

// ---- super-resolution transformer ----

namespace {

SuperResConfig tiny_sr_cfg() {
    SuperResConfig cfg;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.dim = 32;
    cfg.mlp_dim = 128;
    cfg.heads = 2;
    cfg.codebook_size = 32;
    cfg.low_codebook_size = 8;
    cfg.low_h = 2;
    cfg.low_w = 2;
    cfg.high_h = 4;
    cfg.high_w = 4;
    return cfg;
}

} // namespace

TEST_CASE("superres: conditioning layout and parameter shapes") {
    SuperResConfig cfg = tiny_sr_cfg();
    CHECK(cfg.cond_len() == 4 + kTextLen);
    SuperResModel m = SuperResModel::init(cfg, 202);
    CHECK(m.ps.value("low.emb").shape == std::vector<int>{8, 32});
    CHECK(m.ps.value("hi.emb").shape == std::vector<int>{33, 32});    // +1 mask row
    CHECK(m.ps.value("seg.low").shape == std::vector<int>{32});
    CHECK(m.ps.has("enc0.attn.q.w"));
    CHECK(!m.ps.has("enc0.xattn.q.w"));    // encoder is self-attention only
    CHECK(m.ps.has("dec0.xattn.q.w"));

    TokenGrid low = random_grid(2, 2, 8, 1);
    TokenGrid hi = TokenGrid::filled(4, 4, cfg.mask_token());
    DTensor lg = m.logits(low, m.encode_text("one red square"), hi, false);
    CHECK(lg.shape == std::vector<int>{16, 32});
    CHECK(lg.all_finite());
}

TEST_CASE("superres: contracts on the two grids") {
    SuperResConfig cfg = tiny_sr_cfg();
    SuperResModel m = SuperResModel::init(cfg, 202);
    TextEmbeddingSeq text = m.encode_text("one red square");
    TokenGrid low = random_grid(2, 2, 8, 1);
    TokenGrid hi = TokenGrid::filled(4, 4, cfg.mask_token());

    // low-res conditioning must be complete: a mask id there is a contract bug
    TokenGrid low_masked = low;
    low_masked.at(0, 0) = 8;
    auto r = catch_error([&] { (void)m.logits(low_masked, text, hi, false); });
    CHECK(r.kind == error_kind::contract);
    CHECK(r.message.find("complete") != std::string::npos);

    TokenGrid low_wrong = TokenGrid::filled(4, 4, 0);
    CHECK(catch_error([&] { (void)m.logits(low_wrong, text, hi, false); }).kind ==
          error_kind::contract);

    TokenGrid hi_oob = hi;
    hi_oob.at(0, 0) = cfg.mask_token() + 1;
    CHECK(catch_error([&] { (void)m.logits(low, text, hi_oob, false); }).kind ==
          error_kind::token);
}

TEST_CASE("superres: logits respond to low-res tokens, captions, and segments") {
    SuperResConfig cfg = tiny_sr_cfg();
    SuperResModel m = SuperResModel::init(cfg, 202);
    TextEmbeddingSeq text = m.encode_text("one red square");
    TokenGrid low = random_grid(2, 2, 8, 1);
    TokenGrid hi = TokenGrid::filled(4, 4, cfg.mask_token());

    DTensor ref = m.logits(low, text, hi, false);

    TokenGrid low2 = low;
    low2.at(1, 1) = (low2.at(1, 1) + 1) % 8;
    CHECK(m.logits(low2, text, hi, false).data != ref.data);

    CHECK(m.logits(low, m.encode_text("two blue circles"), hi, false).data != ref.data);

    DTensor da = m.logits(low, text, hi, true);
    DTensor db = m.logits(low, m.encode_text("two blue circles"), hi, true);
    CHECK(da.data == db.data);    // text drop keeps the low-res conditioning only

    // the segment offsets take part in the forward pass
    m.ps.value("seg.low")[0] += 1.0f;
    CHECK(m.logits(low, text, hi, false).data != ref.data);
}

TEST_CASE("superres: gradient reaches encoder, segments, and projections") {
    SuperResConfig cfg = tiny_sr_cfg();
    SuperResModelT<double> m = SuperResModelT<double>::init(cfg, 404);
    TokenGrid low = random_grid(2, 2, 8, 2);
    TokenGrid target = random_grid(4, 4, 32, 3);
    RngState mrng(6);
    auto [masked, mask] = apply_mask(target, 0.6, mrng, cfg.mask_token());
    TextEmbeddingSeq text = m.encode_text("two green squares");

    m.ps.zero_grad();
    DTape tape;
    m.ps.stage(tape, true);
    Var logits = m.forward_fw(tape, low, text, masked, false);
    Var loss = tape.masked_cross_entropy(logits, target.tokens, mask.on);
    tape.backward(loss);
    m.ps.collect(tape);

    // a trained conditioning path needs nonzero gradient on every piece of it
    for (const char * name : {"low.emb", "low.pos", "seg.low", "seg.text", "text.proj.w",
                              "enc0.attn.q.w", "dec0.xattn.k.w"}) {
        double s = 0;
        for (double g : m.ps.grad(name).data) s += std::fabs(g);
        INFO(name);
        CHECK(s > 0.0);
    }
}

TEST_CASE("superres: finite differences through encoder and decoder") {
    SuperResConfig cfg = tiny_sr_cfg();
    SuperResModelT<double> m = SuperResModelT<double>::init(cfg, 404);
    TokenGrid low = random_grid(2, 2, 8, 2);
    TokenGrid target = random_grid(4, 4, 32, 3);
    RngState mrng(6);
    auto [masked, mask] = apply_mask(target, 0.6, mrng, cfg.mask_token());
    TextEmbeddingSeq text = m.encode_text("two green squares");

    auto build = [&](DTape & tape) {
        Var logits = m.forward_fw(tape, low, text, masked, false);
        return tape.masked_cross_entropy(logits, target.tokens, mask.on);
    };
    RngState rng(13);
    const double rel = model_fd_max_rel(
        m.ps,
        {"low.emb", "seg.low", "seg.text", "text.proj.w", "enc0.attn.q.w", "enc0.mlp.fc1.w",
         "hi.emb", "dec0.xattn.k.w", "head.fc1.w"},
        build, rng);
    CHECK(rel < 1e-5);
}
