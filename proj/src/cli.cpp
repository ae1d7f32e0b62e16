#include "hgen/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <new>

#include <CLI11.hpp>
#include <json.hpp>

#include "hgen/config.hpp"
#include "hgen/data_synth.hpp"
#include "hgen/eval_metrics.hpp"
#include "hgen/image.hpp"
#include "hgen/training.hpp"

namespace hgen::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "hgen 0.1.0";

void log_line(const std::string& event, json fields = json::object()) {
    fields["event"] = event;
    std::cout << fields.dump() << "\n";
}

cfg::RunConfig load_run_config(const std::string& path) {
    std::string text;
    if (path.empty()) {
        text = cfg::save_config(cfg::RunConfig::defaults());
    } else {
        std::ifstream in(path);
        if (!in) throw SchemaError("config: cannot open " + path);
        std::ostringstream ss;
        ss << in.rdbuf();
        text = ss.str();
    }
    return cfg::apply_env_overrides(text);
}

class Timer {
  public:
    double ms() const {
        return std::chrono::duration<double, std::milli>(
                   std::chrono::steady_clock::now() - start_)
            .count();
    }

  private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_run_manifest(const fs::path& dir, const std::string& command,
                        const cfg::RunConfig& rc, uint64_t seed, double elapsed_ms,
                        json extra = json::object()) {
    fs::create_directories(dir);
    json m;
    m["command"] = command;
    m["code_version"] = kVersion;
    m["config_fingerprint"] = cfg::config_fingerprint(rc);
    m["master_seed"] = seed;
    m["elapsed_ms"] = elapsed_ms;
    m["config"] = json::parse(cfg::save_config(rc));
    for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = *it;
    std::ofstream f(dir / "run_manifest.json");
    f << m.dump(1) << "\n";
    if (!f) throw SchemaError("run manifest write failed: " + dir.string());
}

train::CondVariant parse_variant(const std::string& s) {
    if (s == "full") return train::CondVariant::kFull;
    if (s == "no-joints") return train::CondVariant::kNoJoints2d;
    if (s == "no-shape") return train::CondVariant::kNoRotVert;
    if (s == "none") return train::CondVariant::kUnconditional;
    throw SchemaError("config: unknown conditioning variant " + s);
}

pipe::Checkpoints load_or_init(const std::string& path, const cfg::RunConfig& rc) {
    pipe::Checkpoints ck;
    Rng rng(rc.master_seed);
    pipe::init_checkpoints(ck, rc.pipeline, rng);
    if (!path.empty()) {
        if (!fs::exists(path)) throw SchemaError("checkpoint: cannot open " + path);
        pipe::load_checkpoints(ck, path);
    }
    return ck;
}

std::vector<data::DatasetRecord> load_records(const std::string& dir) {
    if (!fs::exists(fs::path(dir) / "manifest.json"))
        throw SchemaError("dataset: no manifest in " + dir);
    return data::read_dataset(dir);
}

// ---- subcommand bodies ----

int cmd_make_data(const cfg::RunConfig& rc, uint64_t seed, int64_t count,
                  const std::string& out) {
    Timer t;
    pipe::RigSet rigs = pipe::build_scene_rigs(rc.pipeline.rig_seed);
    fs::create_directories(out);
    data::DatasetWriter writer(out, data::config_hash(rc.data), rc.data.records_per_shard);
    for (int64_t i = 0; i < count; ++i) {
        writer.add(data::make_record(rigs, rc.data, seed, i));
        if ((i + 1) % 1000 == 0) log_line("make-data.progress", {{"records", i + 1}});
    }
    writer.finish();
    write_run_manifest(out, "make-data", rc, seed, t.ms(), {{"count", count}});
    log_line("make-data.done", {{"count", count}, {"elapsed_ms", t.ms()}});
    return kOk;
}

int cmd_train(const std::string& which, const cfg::RunConfig& rc,
              const std::string& data_dir, const std::string& init_ckpt,
              const std::string& ae_ckpt, const std::string& variant,
              const std::string& out) {
    Timer t;
    auto records = load_records(data_dir);
    pipe::Checkpoints ck = load_or_init(init_ckpt, rc);
    auto log = [&](int64_t step, double loss) {
        if ((step + 1) % 50 == 0 || step == 0)
            log_line("train.step", {{"stage", which}, {"step", step}, {"loss", loss}});
    };
    double final_loss = 0.0;
    if (which == "t2h") {
        final_loss = train::train_t2h(rc.pipeline, ck.t2h, records, rc.train,
                                      rc.master_seed, log);
    } else if (which == "ae") {
        final_loss = train::train_ae(rc.pipeline, ck.ae, records, rc.train,
                                     rc.master_seed, log);
    } else {  // th2i
        if (!ae_ckpt.empty()) {
            pipe::Checkpoints donor = load_or_init(ae_ckpt, rc);
            ck.ae = std::move(donor.ae);
        }
        final_loss = train::train_th2i(rc.pipeline, ck.th2i, ck.encoder, ck.ae, records,
                                       rc.train, rc.master_seed, parse_variant(variant),
                                       log);
    }
    fs::create_directories(fs::path(out).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(out).parent_path());
    pipe::save_checkpoints(ck, out);
    write_run_manifest(fs::path(out).parent_path().empty()
                           ? fs::path(".")
                           : fs::path(out).parent_path(),
                       "train-" + which, rc, rc.master_seed, t.ms(),
                       {{"final_loss", final_loss}, {"records", records.size()}});
    log_line("train.done", {{"stage", which},
                            {"final_loss", final_loss},
                            {"elapsed_ms", t.ms()},
                            {"checkpoint", out}});
    return kOk;
}

int cmd_sample_t2h(const cfg::RunConfig& rc, const std::string& ckpt,
                   const std::string& text, uint64_t seed, int64_t count,
                   const std::string& out) {
    Timer t;
    pipe::Checkpoints ck = load_or_init(ckpt, rc);
    auto sched = diff::build_schedule(rc.pipeline.sched_steps,
                                      diff::ScheduleKind::kLinearBeta,
                                      rc.pipeline.beta_start, rc.pipeline.beta_end);
    const auto& vocab = enc::TextVocab::standard();
    auto toks = vocab.tokenize(text, rc.pipeline.t2h.text_len);
    std::vector<int64_t> tokens;
    for (int64_t b = 0; b < count; ++b)
        tokens.insert(tokens.end(), toks.begin(), toks.end());
    ad::NoGradGuard ng;
    Rng rng = Rng::stream(seed, "t2h");
    ad::Arr states = t2h::sample_t2h(rc.pipeline.t2h, ck.t2h, tokens, count, sched,
                                     rc.pipeline.t2h.guidance_scale, rng);
    TensorStore store;
    for (int64_t b = 0; b < count; ++b) {
        Tensor s({rc.pipeline.t2h.state_dim});
        for (int64_t i = 0; i < rc.pipeline.t2h.state_dim; ++i)
            s.data[static_cast<size_t>(i)] =
                static_cast<float>(states.at(b * rc.pipeline.t2h.state_dim + i));
        store.put("state" + std::to_string(b), s);
    }
    fs::path dir = fs::path(out).parent_path();
    if (!dir.empty()) fs::create_directories(dir);
    store.save(out);
    write_run_manifest(dir.empty() ? fs::path(".") : dir, "sample-t2h", rc, seed, t.ms(),
                       {{"text", text}, {"count", count}});
    log_line("sample-t2h.done", {{"count", count}, {"out", out}});
    return kOk;
}

int cmd_generate(const cfg::RunConfig& rc, const std::string& ckpt,
                 const std::string& prompt, uint64_t seed, const std::string& out_dir) {
    Timer t;
    pipe::Checkpoints ck = load_or_init(ckpt, rc);
    pipe::RigSet rigs = pipe::build_scene_rigs(rc.pipeline.rig_seed);
    pipe::InferenceTrace trace =
        pipe::generate_image_from_text(prompt, seed, ck, rc.pipeline, rigs);
    fs::create_directories(out_dir);
    pipe::save_trace(trace, out_dir);
    write_run_manifest(out_dir, "generate", rc, seed, t.ms(),
                       {{"prompt", prompt},
                        {"unconditional", trace.unconditional},
                        {"camera_fallback", trace.camera_fallback}});
    log_line("generate.done",
             {{"prompt", prompt}, {"seed", seed}, {"out_dir", out_dir}});
    return kOk;
}

// Items from a directory of inference traces (tensors.bin) or bare PNGs.
std::vector<metrics::EvalItem> load_generated_items(const std::string& dir) {
    std::vector<metrics::EvalItem> items;
    std::vector<fs::path> entries;
    for (const auto& e : fs::directory_iterator(dir)) entries.push_back(e.path());
    std::sort(entries.begin(), entries.end());
    for (const auto& p : entries) {
        if (fs::is_directory(p) && fs::exists(p / "tensors.bin")) {
            TensorStore store = TensorStore::load((p / "tensors.bin").string());
            metrics::EvalItem it;
            it.image = store.get("image");
            for (const char* k : {"l.joints2d", "r.joints2d"})
                if (const Tensor* j = store.find(k)) it.joints2d.push_back(*j);
            items.push_back(std::move(it));
        } else if (p.extension() == ".png") {
            metrics::EvalItem it;
            it.image = img::read_png_rgb(p.string());
            items.push_back(std::move(it));
        }
    }
    if (items.empty()) throw SchemaError("eval: no images under " + dir);
    return items;
}

std::vector<metrics::EvalItem> load_reference_items(const std::string& dir) {
    auto records = load_records(dir);
    std::vector<metrics::EvalItem> items;
    for (const auto& r : records) {
        metrics::EvalItem it;
        it.image = r.image;
        if (r.left.reliable) it.joints2d.push_back(r.left.joints2d);
        if (r.right.reliable) it.joints2d.push_back(r.right.joints2d);
        items.push_back(std::move(it));
    }
    return items;
}

int cmd_eval(const cfg::RunConfig& rc, const std::string& generated,
             const std::string& reference, const std::string& ckpt,
             const std::string& out) {
    Timer t;
    pipe::Checkpoints ck = load_or_init(ckpt, rc);
    auto gen = load_generated_items(generated);
    auto ref = load_reference_items(reference);
    metrics::EvalConfig ec;
    ec.seed = rc.master_seed;
    metrics::MetricTable table =
        metrics::eval_suite(gen, ref, metrics::ae_feature_extractor(rc.pipeline.ae, ck.ae), ec);
    fs::path dir = fs::path(out).parent_path();
    if (!dir.empty()) fs::create_directories(dir);
    std::ofstream f(out);
    f << table.to_json() << "\n";
    if (!f) throw SchemaError("eval: cannot write " + out);
    std::cout << table.to_text();
    write_run_manifest(dir.empty() ? fs::path(".") : dir, "eval", rc, rc.master_seed,
                       t.ms(), {{"generated", generated}, {"reference", reference}});
    log_line("eval.done", {{"out", out}, {"fid", table.fid}});
    return kOk;
}

int cmd_selftest() {
    Timer t;
    // quick invariants across the stack; each throws on violation
    auto sched = diff::build_schedule(1000);
    sched.validate();

    pipe::RigSet rigs = pipe::build_scene_rigs(2024);
    kin::PoseShapeState rest;
    pipe::SceneHands hands = pipe::extract_hands(rest, rigs);
    if (hands.left.joints3d.shape != std::vector<int64_t>({21, 3}))
        throw NumericError("selftest: hand joint layout");

    cfg::RunConfig rc = cfg::RunConfig::defaults();
    if (cfg::save_config(cfg::load_config_text(cfg::save_config(rc))) !=
        cfg::save_config(rc))
        throw NumericError("selftest: config round trip");

    auto cloud = std::vector<std::vector<double>>{{0, 1}, {1, 0}, {0.5, 0.5}, {1, 1}};
    auto stats = metrics::accumulate_stats(cloud);
    if (metrics::frechet_distance(stats, stats) > 1e-6)
        throw NumericError("selftest: metric self-distance");
    if (std::abs(metrics::kid_mmd(cloud, cloud)) > 1e-6)
        throw NumericError("selftest: kernel self-comparison");

    Tensor png({3, 8, 8});
    for (size_t i = 0; i < png.data.size(); ++i)
        png.data[i] = static_cast<float>(i) / 255.0f;
    Tensor back = img::decode_png_rgb(img::encode_png_rgb(png));
    for (size_t i = 0; i < png.data.size(); ++i)
        if (std::abs(back.data[i] - png.data[i]) > 0.51f / 255.0f)
            throw NumericError("selftest: image codec round trip");

    log_line("selftest.done", {{"elapsed_ms", t.ms()}});
    return kOk;
}

}  // namespace

int run_command(const std::vector<std::string>& argv) {
    CLI::App app{"Two-stage text-conditioned pose and image generation toolkit"};
    app.require_subcommand(1);

    std::string config_path, data_dir, ckpt, ae_ckpt, init_ckpt, out, out_dir;
    std::string text, prompt, variant = "full";
    uint64_t seed = 0;
    bool seed_set = false;
    int64_t count = -1;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        if (needs_config) sub->add_option("--config", config_path, "run config JSON");
    };

    auto* mk = app.add_subcommand("make-data", "synthesize a paired dataset");
    add_common(mk, true);
    mk->add_option("--seed", seed, "master seed")->required();
    mk->add_option("--count", count, "record count");
    mk->add_option("--out", out, "dataset directory")->required();

    auto* tt = app.add_subcommand("train-t2h", "train the text-to-state stage");
    add_common(tt, true);
    tt->add_option("--data", data_dir, "dataset directory")->required();
    tt->add_option("--init", init_ckpt, "checkpoint to continue from");
    tt->add_option("--out", out, "output checkpoint")->required();

    auto* ta = app.add_subcommand("train-ae", "train the image autoencoder");
    add_common(ta, true);
    ta->add_option("--data", data_dir, "dataset directory")->required();
    ta->add_option("--init", init_ckpt, "checkpoint to continue from");
    ta->add_option("--out", out, "output checkpoint")->required();

    auto* ti = app.add_subcommand("train-th2i", "train the conditional image stage");
    add_common(ti, true);
    ti->add_option("--data", data_dir, "dataset directory")->required();
    ti->add_option("--ae-ckpt", ae_ckpt, "checkpoint providing autoencoder weights");
    ti->add_option("--init", init_ckpt, "checkpoint to continue from");
    ti->add_option("--condition", variant, "full|no-joints|no-shape|none");
    ti->add_option("--out", out, "output checkpoint")->required();

    auto* st = app.add_subcommand("sample-t2h", "sample pose/shape states from text");
    add_common(st, true);
    st->add_option("--ckpt", ckpt, "checkpoint file");
    st->add_option("--text", text, "caption")->required();
    st->add_option("--seed", seed, "sampling seed")->required();
    st->add_option("--count", count, "sample count");
    st->add_option("--out", out, "output tensor archive")->required();

    auto* si = app.add_subcommand("sample-th2i", "full two-stage sampling to an image");
    add_common(si, true);
    si->add_option("--ckpt", ckpt, "checkpoint file");
    si->add_option("--prompt", prompt, "text prompt")->required();
    si->add_option("--seed", seed, "sampling seed")->required();
    si->add_option("--out-dir", out_dir, "trace output directory")->required();

    auto* ge = app.add_subcommand("generate", "text to image with full trace output");
    add_common(ge, true);
    ge->add_option("--ckpt", ckpt, "checkpoint file");
    ge->add_option("--prompt", prompt, "text prompt")->required();
    ge->add_option("--seed", seed, "generation seed")->required();
    ge->add_option("--out-dir", out_dir, "trace output directory")->required();

    auto* ev = app.add_subcommand("eval", "distribution metrics generated vs reference");
    add_common(ev, true);
    ev->add_option("--ckpt", ckpt, "checkpoint providing the feature embedder");
    ev->add_option("--generated", data_dir, "directory of traces or PNGs")->required();
    ev->add_option("--reference", out_dir, "reference dataset directory")->required();
    ev->add_option("--out", out, "metrics JSON path")->required();

    auto* se = app.add_subcommand("selftest", "fast cross-module health checks");
    (void)se;
    (void)seed_set;

    std::vector<std::string> args(argv.begin() + 1, argv.end());
    std::reverse(args.begin(), args.end());  // CLI11 parses reversed vectors
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    cfg::RunConfig rc;
    try {
        rc = load_run_config(config_path);
    } catch (const std::exception& e) {
        log_line("error", {{"category", "config"}, {"what", e.what()}});
        return kConfig;
    }

    try {
        if (mk->parsed())
            return cmd_make_data(rc, seed, count < 0 ? rc.data_count : count, out);
        if (tt->parsed())
            return cmd_train("t2h", rc, data_dir, init_ckpt, "", "full", out);
        if (ta->parsed()) return cmd_train("ae", rc, data_dir, init_ckpt, "", "full", out);
        if (ti->parsed())
            return cmd_train("th2i", rc, data_dir, init_ckpt, ae_ckpt, variant, out);
        if (st->parsed())
            return cmd_sample_t2h(rc, ckpt, text, seed, count < 0 ? 1 : count, out);
        if (si->parsed() || ge->parsed()) return cmd_generate(rc, ckpt, prompt, seed, out_dir);
        if (ev->parsed()) return cmd_eval(rc, data_dir, out_dir, ckpt, out);
        return cmd_selftest();
    } catch (const NumericError& e) {
        log_line("error", {{"category", "numeric"}, {"what", e.what()}});
        return kNumeric;
    } catch (const DimensionError& e) {
        log_line("error", {{"category", "numeric"}, {"what", e.what()}});
        return kNumeric;
    } catch (const SchemaError& e) {
        log_line("error", {{"category", "data"}, {"what", e.what()}});
        return kData;
    } catch (const std::bad_alloc& e) {
        log_line("error", {{"category", "resource"}, {"what", e.what()}});
        return kResource;
    } catch (const fs::filesystem_error& e) {
        log_line("error", {{"category", "resource"}, {"what", e.what()}});
        return kResource;
    } catch (const std::exception& e) {
        log_line("error", {{"category", "data"}, {"what", e.what()}});
        return kData;
    }
}

int run_command(int argc, const char* const* argv) {
    return run_command(std::vector<std::string>(argv, argv + argc));
}

}  // namespace hgen::cli
