// musekit command-line tool: dataset generation, tokenizer/transformer
// training, checkpoint averaging, sampling, editing, evaluation, benchmarks.

#include "musekit/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace musekit;

namespace {

int exit_code_for(error_kind k) {
    switch (k) {
        case error_kind::config: return 2;
        case error_kind::checkpoint: return 3;
        case error_kind::shape: return 4;
        case error_kind::numeric: return 5;
        case error_kind::vocab: return 6;
        case error_kind::render: return 7;
        case error_kind::token: return 8;
        case error_kind::format: return 9;
        case error_kind::contract: return 10;
        case error_kind::graph: return 11;
        case error_kind::stat: return 12;
        case error_kind::io: return 13;
    }
    return 1;
}

std::vector<std::string> split_list(const std::string & s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty() || !out.empty()) out.push_back(cur);
    return out;
}

std::vector<int> int_list(const std::string & s, const std::string & what) {
    std::vector<int> out;
    for (const std::string & part : split_list(s, ',')) {
        require(!part.empty(), error_kind::config, what + ": empty list entry");
        char * end = nullptr;
        const long v = std::strtol(part.c_str(), &end, 10);
        require(end && *end == '\0', error_kind::config, what + ": bad integer '" + part + "'");
        out.push_back((int)v);
    }
    return out;
}

void declare_common(Config & c) {
    c.declare_int("seed", 0, "run seed");
    c.declare_string("config", "", "config file path");
}

void declare_ckpt_paths(Config & c) {
    c.declare_string("ckpt.tokenizer_base", "out/tokenizer.base.ckpt");
    c.declare_string("ckpt.tokenizer_highres", "out/tokenizer.highres.ckpt");
    c.declare_string("ckpt.base", "out/model.base.ckpt");
    c.declare_string("ckpt.superres", "out/model.superres.ckpt");
}

// `--config file` is honored before every other flag so flags override the file
void finish_config(Config & c, const std::vector<std::string> & args) {
    for (size_t i = 0; i < args.size(); ++i) {
        std::string val;
        if (args[i] == "--config" && i + 1 < args.size()) val = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0) val = args[i].substr(9);
        if (!val.empty()) {
            c.set_string("config", val);
            c.parse_file(val);
        }
    }
    c.apply_flags(args);
}

Pipeline load_pipeline(const Config & c) {
    return Pipeline::load(c.get_string("ckpt.tokenizer_base"), c.get_string("ckpt.tokenizer_highres"),
                          c.get_string("ckpt.base"), c.get_string("ckpt.superres"));
}

resolution_role role_from(const Config & c) {
    const std::string & r = c.get_string("role");
    if (r == "base") return resolution_role::low;
    if (r == "highres") return resolution_role::high;
    fail(error_kind::config, "unknown --role '" + r + "' (want base|highres)");
}

PixelMask mask_from_config(const Config & c, const SceneImage & img, const std::string & prefix) {
    const std::string & mask_path = c.get_string(prefix + ".mask");
    const std::string & rect = c.get_string(prefix + ".rect");
    require(mask_path.empty() != rect.empty(), error_kind::config,
            prefix + " needs exactly one of --" + prefix + ".mask / --" + prefix + ".rect");
    if (!mask_path.empty()) return read_pbm(mask_path);
    std::vector<int> r = int_list(rect, prefix + ".rect");
    require(r.size() == 4, error_kind::config, prefix + ".rect wants x,y,w,h");
    PixelMask m = PixelMask::empty(img.width, img.height);
    m.set_rect(r[0], r[1], r[2], r[3], true);
    return m;
}

// ---- commands ----

int cmd_gen_data(const std::vector<std::string> & args) {
    Config c;
    declare_common(c);
    c.declare_string("data.dir", "data");
    c.declare_int("data.count", 512);
    finish_config(c, args);
    generate_dataset(c.get_string("data.dir"), (int)c.get_int("data.count"),
                     (uint64_t)c.get_int("seed"));
    std::printf("wrote %lld items to %s\n", (long long)c.get_int("data.count"),
                c.get_string("data.dir").c_str());
    return 0;
}

int cmd_train_tokenizer(const std::vector<std::string> & args) {
    Config c;
    declare_common(c);
    c.declare_string("data.dir", "data");
    c.declare_string("out.dir", "out");
    c.declare_string("role", "base", "base|highres");
    declare_tokenizer_config(c);
    declare_train_config(c);
    finish_config(c, args);

    const resolution_role role = role_from(c);
    Dataset data = load_dataset(c.get_string("data.dir"));
    TrainOptions opt = train_options_from(c);
    opt.out_dir = c.get_string("out.dir");
    opt.seed = (uint64_t)c.get_int("seed");
    TokenizerTrainRun run = train_tokenizer(data, role, tokenizer_config_from(c), opt);
    std::printf("saved %s\n", run.final_checkpoint.c_str());
    return 0;
}

int cmd_finetune_decoder(const std::vector<std::string> & args) {
    Config c;
    declare_common(c);
    c.declare_string("data.dir", "data");
    c.declare_string("out.dir", "out");
    c.declare_string("role", "base", "base|highres");
    c.declare_string("ckpt.tokenizer", "out/tokenizer.base.ckpt");
    declare_train_config(c);
    finish_config(c, args);

    const resolution_role role = role_from(c);
    const std::string expect =
        role == resolution_role::low ? "tokenizer.base" : "tokenizer.highres";
    Tokenizer trained = load_tokenizer(c.get_string("ckpt.tokenizer"), expect);
    Dataset data = load_dataset(c.get_string("data.dir"));
    TrainOptions opt = train_options_from(c);
    opt.out_dir = c.get_string("out.dir");
    opt.seed = (uint64_t)c.get_int("seed");
    TokenizerTrainRun run = finetune_decoder(data, role, trained, opt);
    std::printf("saved %s\n", run.final_checkpoint.c_str());
    return 0;
}

int cmd_train_base(const std::vector<std::string> & args) {
    Config c;
    declare_common(c);
    c.declare_string("data.dir", "data");
    c.declare_string("out.dir", "out");
    c.declare_string("ckpt.tokenizer_base", "out/tokenizer.base.ckpt");
    declare_base_config(c);
    declare_train_config(c);
    finish_config(c, args);

    Tokenizer tok = load_tokenizer(c.get_string("ckpt.tokenizer_base"), "tokenizer.base");
    Dataset data = load_dataset(c.get_string("data.dir"));
    std::vector<MaskedTrainSample> samples = tokenize_dataset(data, tok, nullptr);
    const int grid = kLowSize / tok.cfg.f;
    BaseModel model =
        BaseModel::init(base_config_from(c, tok.cfg.codebook_size, grid, grid),
                        (uint64_t)c.get_int("seed"));
    AdamW opt;
    TrainOptions topt = train_options_from(c);
    topt.out_dir = c.get_string("out.dir");
    topt.seed = (uint64_t)c.get_int("seed");
    MaskedTrainResult res = train_base_model(model, opt, samples, topt);
    std::printf("saved %s (loss %.4f acc %.3f after %lld steps)\n", res.final_checkpoint.c_str(),
                res.last_loss, res.last_accuracy, (long long)res.steps_run);
    return 0;
}

int cmd_train_superres(const std::vector<std::string> & args) {
    Config c;
    declare_common(c);
    c.declare_string("data.dir", "data");
    c.declare_string("out.dir", "out");
    c.declare_string("ckpt.tokenizer_base", "out/tokenizer.base.ckpt");
    c.declare_string("ckpt.tokenizer_highres", "out/tokenizer.highres.ckpt");
    declare_superres_config(c);
    declare_train_config(c);
    finish_config(c, args);

    Tokenizer tok_base = load_tokenizer(c.get_string("ckpt.tokenizer_base"), "tokenizer.base");
    Tokenizer tok_hi = load_tokenizer(c.get_string("ckpt.tokenizer_highres"), "tokenizer.highres");
    Dataset data = load_dataset(c.get_string("data.dir"));
    std::vector<MaskedTrainSample> samples = tokenize_dataset(data, tok_base, &tok_hi);
    const int lo = kLowSize / tok_base.cfg.f, hi = kHighSize / tok_hi.cfg.f;
    SuperResModel model = SuperResModel::init(
        superres_config_from(c, tok_hi.cfg.codebook_size, tok_base.cfg.codebook_size, lo, lo, hi, hi),
        (uint64_t)c.get_int("seed"));
    AdamW opt;
    TrainOptions topt = train_options_from(c);
    topt.out_dir = c.get_string("out.dir");
    topt.seed = (uint64_t)c.get_int("seed");
    MaskedTrainResult res = train_superres_model(model, opt, samples, topt);
    std::printf("saved %s (loss %.4f acc %.3f after %lld steps)\n", res.final_checkpoint.c_str(),
                res.last_loss, res.last_accuracy, (long long)res.steps_run);
    return 0;
}

int cmd_ema(const std::vector<std::string> & args) {
    Config c;
    declare_common(c);
    c.declare_string("ema.inputs", "", "comma-separated checkpoint paths, oldest first");
    c.declare_double("ema.decay", 0.7);
    c.declare_string("ema.out", "out/ema.ckpt");
    finish_config(c, args);

    std::vector<std::string> paths = split_list(c.get_string("ema.inputs"), ',');
    require(!paths.empty() && !paths[0].empty(), error_kind::config, "ema.inputs is empty");
    std::vector<Checkpoint> ckpts;
    for (const std::string & p : paths) ckpts.push_back(Checkpoint::load(p));
    Checkpoint avg = ema_average(ckpts, c.get_double("ema.decay"));
    avg.save(c.get_string("ema.out"));
    std::printf("averaged %zu checkpoints (decay %.3f) -> %s\n", ckpts.size(),
                c.get_double("ema.decay"), c.get_string("ema.out").c_str());
    return 0;
}

int cmd_sample(const std::vector<std::string> & args) {
    Config c;
    declare_common(c);
    declare_ckpt_paths(c);
    declare_sampler_config(c);
    c.declare_string("sample.caption", "two red squares");
    c.declare_int("sample.count", 1);
    c.declare_string("sample.out", "out/samples");
    finish_config(c, args);

    Pipeline p = load_pipeline(c);
    SamplerConfig scfg = sampler_config_from(c);
    const std::string out_dir = c.get_string("sample.out");
    fs::create_directories(out_dir);
    const int count = (int)c.get_int("sample.count");
    require(count >= 1, error_kind::config, "sample.count must be >=1");
    RngState rng = RngState::seeded((uint64_t)c.get_int("seed"));
    std::vector<std::vector<std::string>> rows;
    for (int i = 0; i < count; ++i) {
        RngState r = rng.split((uint64_t)i);
        GenerateResult g = p.generate(c.get_string("sample.caption"), scfg, r);
        char name[64];
        std::snprintf(name, sizeof name, "sample_%04d.ppm", i);
        write_ppm(g.image, out_dir + "/" + name);
        rows.push_back({std::to_string(i), c.get_string("sample.caption"),
                        std::to_string(c.get_int("seed")),
                        std::to_string(g.base_counters.cond_forwards),
                        std::to_string(g.base_counters.uncond_forwards),
                        std::to_string(g.sr_counters.cond_forwards),
                        std::to_string(g.sr_counters.uncond_forwards)});
    }
    write_csv(out_dir + "/sample_metrics.csv",
              {"index", "caption", "seed", "base_cond_forwards", "base_uncond_forwards",
               "sr_cond_forwards", "sr_uncond_forwards"},
              rows);
    std::printf("wrote %d samples to %s\n", count, out_dir.c_str());
    return 0;
}

int cmd_inpaint(const std::vector<std::string> & args) {
    Config c;
    declare_common(c);
    declare_ckpt_paths(c);
    declare_sampler_config(c);
    c.declare_string("inpaint.image", "");
    c.declare_string("inpaint.mask", "", "PBM mask path");
    c.declare_string("inpaint.rect", "", "x,y,w,h alternative to a mask file");
    c.declare_string("inpaint.caption", "");
    c.declare_string("inpaint.out", "out/inpaint.ppm");
    finish_config(c, args);

    Pipeline p = load_pipeline(c);
    SceneImage img = read_ppm(c.get_string("inpaint.image"));
    PixelMask mask = mask_from_config(c, img, "inpaint");
    RngState rng = RngState::seeded((uint64_t)c.get_int("seed"));
    InpaintResult r =
        p.inpaint(img, mask, c.get_string("inpaint.caption"), sampler_config_from(c), rng);
    write_ppm(r.image, c.get_string("inpaint.out"));
    std::printf("%s -> %s%s\n", c.get_string("inpaint.image").c_str(),
                c.get_string("inpaint.out").c_str(), r.no_op ? " (empty mask: no-op)" : "");
    return 0;
}

int cmd_outpaint(const std::vector<std::string> & args) {
    Config c;
    declare_common(c);
    declare_ckpt_paths(c);
    declare_sampler_config(c);
    c.declare_string("outpaint.image", "");
    c.declare_string("outpaint.bands", "4", "pixels: one value or left,right,top,bottom");
    c.declare_string("outpaint.caption", "");
    c.declare_string("outpaint.out", "out/outpaint.ppm");
    finish_config(c, args);

    Pipeline p = load_pipeline(c);
    SceneImage img = read_ppm(c.get_string("outpaint.image"));
    std::vector<int> b = int_list(c.get_string("outpaint.bands"), "outpaint.bands");
    std::array<int, 4> bands{};
    if (b.size() == 1) bands = {b[0], b[0], b[0], b[0]};
    else if (b.size() == 4) bands = {b[0], b[1], b[2], b[3]};
    else fail(error_kind::config, "outpaint.bands wants 1 or 4 integers");
    RngState rng = RngState::seeded((uint64_t)c.get_int("seed"));
    InpaintResult r =
        p.outpaint(img, bands, c.get_string("outpaint.caption"), sampler_config_from(c), rng);
    write_ppm(r.image, c.get_string("outpaint.out"));
    std::printf("%s -> %s\n", c.get_string("outpaint.image").c_str(),
                c.get_string("outpaint.out").c_str());
    return 0;
}

int cmd_edit(const std::vector<std::string> & args) {
    Config c;
    declare_common(c);
    declare_ckpt_paths(c);
    declare_sampler_config(c);
    declare_edit_config(c);
    c.declare_string("edit.image", "");
    c.declare_string("edit.caption", "");
    c.declare_string("edit.out", "out/edit.ppm");
    c.declare_string("edit.snapshots", "", "comma-separated iteration numbers");
    finish_config(c, args);

    Pipeline p = load_pipeline(c);
    SceneImage img = read_ppm(c.get_string("edit.image"));
    std::vector<int> snaps;
    if (!c.get_string("edit.snapshots").empty()) {
        snaps = int_list(c.get_string("edit.snapshots"), "edit.snapshots");
    }
    RngState rng = RngState::seeded((uint64_t)c.get_int("seed"));
    EditResult r = p.edit(img, c.get_string("edit.caption"), edit_config_from(c),
                          sampler_config_from(c), rng, snaps);
    write_ppm(r.image, c.get_string("edit.out"));
    const std::string stem = c.get_string("edit.out").substr(0, c.get_string("edit.out").rfind('.'));
    for (const auto & [iter, snap] : r.snapshots) {
        char name[64];
        std::snprintf(name, sizeof name, "_iter%03d.ppm", iter);
        write_ppm(snap, stem + name);
    }
    std::printf("%s -> %s (%zu snapshots)\n", c.get_string("edit.image").c_str(),
                c.get_string("edit.out").c_str(), r.snapshots.size());
    return 0;
}

int cmd_eval(const std::vector<std::string> & args) {
    Config c;
    declare_common(c);
    declare_ckpt_paths(c);
    declare_sampler_config(c);
    c.declare_string("data.dir", "", "reference dataset for the feature distance (optional)");
    c.declare_int("eval.captions", 64);
    c.declare_int("eval.samples_per", 16);
    c.declare_string("eval.out", "out/eval");
    finish_config(c, args);

    Pipeline p = load_pipeline(c);
    SamplerConfig scfg = sampler_config_from(c);
    const int n_captions = (int)c.get_int("eval.captions");
    const int per = (int)c.get_int("eval.samples_per");
    require(n_captions >= 2 && per >= 1, error_kind::config, "eval wants >=2 captions, >=1 sample");
    fs::create_directories(c.get_string("eval.out"));
    const uint64_t seed = (uint64_t)c.get_int("seed");

    RngState cap_rng = RngState::seeded(seed).split(0x636170);
    std::vector<CaptionSpec> specs;
    for (int i = 0; i < n_captions; ++i) specs.push_back(sample_single_group_spec(cap_rng));
    std::vector<std::string> captions;
    for (const auto & s : specs) captions.push_back(caption_text(s));

    RngState gen_root = RngState::seeded(seed).split(0x67656e);
    std::vector<std::vector<SceneImage>> images((size_t)n_captions);
    std::vector<std::vector<AlignmentReport>> true_reports((size_t)n_captions);
    for (int i = 0; i < n_captions; ++i) {
        for (int j = 0; j < per; ++j) {
            RngState r = gen_root.split(((uint64_t)i << 20) | (uint64_t)j);
            GenerateResult g = p.generate(captions[(size_t)i], scfg, r);
            images[(size_t)i].push_back(g.image);
            true_reports[(size_t)i].push_back(verify(g.image, specs[(size_t)i]));
        }
        std::printf("eval caption %d/%d: %s\n", i + 1, n_captions, captions[(size_t)i].c_str());
        std::fflush(stdout);
    }

    // control: the same images verified against rotated (mismatched) captions
    std::vector<std::vector<AlignmentReport>> control_reports((size_t)n_captions);
    for (int i = 0; i < n_captions; ++i) {
        int k = (i + 1) % n_captions;
        if (captions[(size_t)k] == captions[(size_t)i]) {
            for (int step = 2; step < n_captions; ++step) {
                k = (i + step) % n_captions;
                if (captions[(size_t)k] != captions[(size_t)i]) break;
            }
        }
        for (const SceneImage & img : images[(size_t)i]) {
            control_reports[(size_t)i].push_back(verify(img, specs[(size_t)k]));
        }
    }

    AlignmentSummary truth = alignment_from_verifications(captions, true_reports);
    AlignmentSummary control = alignment_from_verifications(captions, control_reports);
    const double z = two_proportion_z(truth.hits, truth.trials, control.hits, control.trials);

    std::vector<std::vector<std::string>> rows;
    for (int i = 0; i < n_captions; ++i) {
        rows.push_back({captions[(size_t)i], fmt_f(truth.per_caption[(size_t)i]),
                        fmt_f(control.per_caption[(size_t)i])});
    }
    write_csv(c.get_string("eval.out") + "/alignment.csv", {"caption", "aligned", "control"}, rows);

    std::printf("alignment %.4f (count %.4f color %.4f shape %.4f) over %lld trials\n",
                truth.overall, truth.count_rate, truth.color_rate, truth.shape_rate,
                (long long)truth.trials);
    std::printf("shuffled-caption control %.4f, two-proportion z = %.2f\n", control.overall, z);

    if (!c.get_string("data.dir").empty()) {
        Dataset data = load_dataset(c.get_string("data.dir"));
        PerceptualNet net = PerceptualNet::build();
        std::vector<SceneImage> gen_flat, ref;
        for (auto & v : images) {
            for (auto & img : v) gen_flat.push_back(img);
        }
        const size_t n_ref = std::min(data.items.size(), gen_flat.size());
        for (size_t i = 0; i < n_ref; ++i) ref.push_back(data.load_high(i));
        const double fd = frechet_distance(feature_stats(gen_flat, net), feature_stats(ref, net));
        std::printf("feature distance to data: %.4f\n", fd);
    }
    return 0;
}

int cmd_bench(const std::vector<std::string> & args) {
    Config c;
    declare_common(c);
    declare_ckpt_paths(c);
    declare_sampler_config(c);
    c.declare_string("bench.steps", "4,8,12,24");
    c.declare_string("bench.out", "out/bench.csv");
    c.declare_string("bench.caption", "two red squares");
    finish_config(c, args);

    const bool have_ckpts = fs::exists(c.get_string("ckpt.tokenizer_base")) &&
                            fs::exists(c.get_string("ckpt.tokenizer_highres")) &&
                            fs::exists(c.get_string("ckpt.base")) &&
                            fs::exists(c.get_string("ckpt.superres"));
    Pipeline p = have_ckpts ? load_pipeline(c)
                            : Pipeline::random_init((uint64_t)c.get_int("seed"));
    if (!have_ckpts) std::printf("checkpoints missing; benchmarking a random-init pipeline\n");

    SamplerConfig scfg = sampler_config_from(c);
    const std::string caption = c.get_string("bench.caption");
    const uint64_t seed = (uint64_t)c.get_int("seed");
    std::vector<BenchRecord> records;
    for (int S : int_list(c.get_string("bench.steps"), "bench.steps")) {
        SamplerConfig sc = scfg;
        sc.steps_base = S;
        sc.check();
        RngState r = RngState::seeded(seed).split((uint64_t)S);
        const auto t0 = std::chrono::steady_clock::now();
        GenerateResult g = p.generate(caption, sc, r);
        const auto t1 = std::chrono::steady_clock::now();
        BenchRecord rec;
        rec.method = "parallel_S" + std::to_string(S);
        rec.forwards = g.base_counters.total();
        rec.tokens = (int64_t)g.low.count();
        rec.seconds = std::chrono::duration<double>(t1 - t0).count();
        rec.seed = seed;
        records.push_back(rec);
    }
    {
        RngState r = RngState::seeded(seed).split(0xa5);
        DecodeCounters counters;
        const auto t0 = std::chrono::steady_clock::now();
        TokenGrid g = autoregressive_baseline(caption, p.base, scfg, r, counters);
        const auto t1 = std::chrono::steady_clock::now();
        BenchRecord rec;
        rec.method = "autoregressive";
        rec.forwards = counters.total();
        rec.tokens = (int64_t)g.count();
        rec.seconds = std::chrono::duration<double>(t1 - t0).count();
        rec.seed = seed;
        records.push_back(rec);
    }
    std::vector<std::vector<std::string>> rows;
    for (const BenchRecord & rec : records) {
        rows.push_back({rec.method, std::to_string(rec.forwards), std::to_string(rec.tokens),
                        fmt_f(rec.seconds), std::to_string(rec.seed)});
        std::printf("%-16s forwards %5lld tokens %3lld %8.3fs\n", rec.method.c_str(),
                    (long long)rec.forwards, (long long)rec.tokens, rec.seconds);
    }
    const std::string out = c.get_string("bench.out");
    if (out.rfind('/') != std::string::npos) {
        fs::create_directories(out.substr(0, out.rfind('/')));
    }
    write_csv(out, {"method", "forwards", "tokens", "seconds", "seed"}, rows);
    return 0;
}

int usage() {
    std::fprintf(stderr,
                 "usage: musekit <command> [--key value | --key=value]...\n"
                 "\n"
                 "commands:\n"
                 "  gen-data          render a caption+image dataset\n"
                 "  train-tokenizer   train a VQ tokenizer (--role base|highres)\n"
                 "  finetune-decoder  widen and finetune a tokenizer decoder (encoder frozen)\n"
                 "  train-base        train the masked base transformer\n"
                 "  train-superres    train the token super-resolution transformer\n"
                 "  ema               average checkpoints (--ema.inputs a,b,c --ema.decay 0.7)\n"
                 "  sample            generate images from a caption\n"
                 "  inpaint           regenerate a masked region under a caption\n"
                 "  outpaint          extend image borders under a caption\n"
                 "  edit              mask-free iterative editing\n"
                 "  eval              alignment scoring + feature distance\n"
                 "  bench             forward-count / latency benchmark\n"
                 "\n"
                 "every command accepts --seed N and --config FILE\n");
    return 1;
}

} // namespace

int main(int argc, char ** argv) {
    if (argc < 2) return usage();
    const std::string cmd = argv[1];
    std::vector<std::string> args(argv + 2, argv + argc);
    try {
        if (cmd == "gen-data") return cmd_gen_data(args);
        if (cmd == "train-tokenizer") return cmd_train_tokenizer(args);
        if (cmd == "finetune-decoder") return cmd_finetune_decoder(args);
        if (cmd == "train-base") return cmd_train_base(args);
        if (cmd == "train-superres") return cmd_train_superres(args);
        if (cmd == "ema") return cmd_ema(args);
        if (cmd == "sample") return cmd_sample(args);
        if (cmd == "inpaint") return cmd_inpaint(args);
        if (cmd == "outpaint") return cmd_outpaint(args);
        if (cmd == "edit") return cmd_edit(args);
        if (cmd == "eval") return cmd_eval(args);
        if (cmd == "bench") return cmd_bench(args);
        std::fprintf(stderr, "unknown command '%s'\n", cmd.c_str());
        return usage();
    } catch (const musekit::error & e) {
        std::fprintf(stderr, "error (%s): %s\n", error_kind_name(e.kind), e.what());
        return exit_code_for(e.kind);
    } catch (const std::exception & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
