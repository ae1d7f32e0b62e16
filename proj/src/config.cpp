#include "hgen/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace hgen::cfg {

using nlohmann::json;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
    if (lr <= 0.0) throw SchemaError("train.lr must be positive");
    if (weight_decay < 0.0) throw SchemaError("train.weight_decay must be >= 0");
    for (int64_t v : {t2h_steps, t2h_batch, ae_steps, ae_batch, th2i_steps, th2i_batch})
        if (v < 1) throw SchemaError("train step/batch counts must be >= 1");
}

ad::AdamHyper TrainConfig::adam() const {
    ad::AdamHyper h;
    h.lr = lr;
    h.weight_decay = weight_decay;
    return h;
}

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.sync_data_camera();
    return c;
}

void RunConfig::sync_data_camera() {
    data.camera_ranges = pipeline.camera_ranges;
    data.intrinsics = pipeline.intrinsics;
    data.camera_max_tries = pipeline.camera_max_tries;
}

void RunConfig::validate() const {
    if (data_count < 1) throw SchemaError("data_count must be >= 1");
    pipeline.validate();
    data.validate();
    train.validate();
}

namespace {

// strict object view: every key must be consumed exactly once
class Strict {
  public:
    Strict(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw SchemaError("config: " + path_ + " must be an object");
    }

    const json& key(const std::string& k) {
        auto it = j_.find(k);
        if (it == j_.end()) throw SchemaError("config: missing key " + path_ + k);
        seen_.insert(k);
        return *it;
    }

    Strict child(const std::string& k) { return Strict(key(k), path_ + k + "."); }

    double num(const std::string& k) {
        const json& v = key(k);
        if (!v.is_number()) throw SchemaError("config: " + path_ + k + " must be a number");
        return v.get<double>();
    }
    int64_t integer(const std::string& k) {
        const json& v = key(k);
        if (!v.is_number_integer())
            throw SchemaError("config: " + path_ + k + " must be an integer");
        return v.get<int64_t>();
    }
    uint64_t uinteger(const std::string& k) {
        const json& v = key(k);
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<int64_t>() >= 0))
            throw SchemaError("config: " + path_ + k + " must be a non-negative integer");
        return v.get<uint64_t>();
    }
    std::string str(const std::string& k) {
        const json& v = key(k);
        if (!v.is_string()) throw SchemaError("config: " + path_ + k + " must be a string");
        return v.get<std::string>();
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw SchemaError("config: unknown key " + path_ + it.key());
    }

  private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace

std::string save_config(const RunConfig& c) {
    ordered_json j;
    j["master_seed"] = c.master_seed;
    j["out_dir"] = c.out_dir;
    j["data_count"] = c.data_count;

    ordered_json t;
    t["state_dim"] = c.pipeline.t2h.state_dim;
    t["model_dim"] = c.pipeline.t2h.model_dim;
    t["head_count"] = c.pipeline.t2h.head_count;
    t["ff_dim"] = c.pipeline.t2h.ff_dim;
    t["block_count"] = c.pipeline.t2h.block_count;
    t["vocab_size"] = c.pipeline.t2h.vocab_size;
    t["text_len"] = c.pipeline.t2h.text_len;
    t["guidance_scale"] = c.pipeline.t2h.guidance_scale;
    t["drop_prob"] = c.pipeline.t2h.drop_prob;
    j["state_stage"] = t;

    ordered_json e;
    e["n_bins"] = c.pipeline.encoder.n_bins;
    e["bps_count"] = c.pipeline.encoder.bps_count;
    e["bps_seed"] = c.pipeline.encoder.bps_seed;
    e["bps_radius"] = c.pipeline.encoder.bps_radius;
    e["canonical_hand_scale"] = c.pipeline.encoder.canonical_hand_scale;
    e["embed_dim"] = c.pipeline.encoder.embed_dim;
    e["max_text_len"] = c.pipeline.encoder.max_text_len;
    e["joints_per_hand"] = c.pipeline.encoder.joints_per_hand;
    e["rot_joints_per_hand"] = c.pipeline.encoder.rot_joints_per_hand;
    e["mlp_hidden"] = c.pipeline.encoder.mlp_hidden;
    j["condition_encoder"] = e;

    ordered_json i;
    i["latent_channels"] = c.pipeline.th2i.latent_channels;
    i["latent_hw"] = c.pipeline.th2i.latent_hw;
    i["base_width"] = c.pipeline.th2i.base_width;
    i["mid_width"] = c.pipeline.th2i.mid_width;
    i["cond_dim"] = c.pipeline.th2i.cond_dim;
    i["head_count"] = c.pipeline.th2i.head_count;
    i["drop_prob"] = c.pipeline.th2i.drop_prob;
    i["guidance"] = c.pipeline.th2i.guidance;
    i["plms_steps"] = c.pipeline.th2i.plms_steps;
    j["image_stage"] = i;

    ordered_json a;
    a["image_channels"] = c.pipeline.ae.image_channels;
    a["latent_channels"] = c.pipeline.ae.latent_channels;
    a["width"] = c.pipeline.ae.width;
    j["autoencoder"] = a;

    ordered_json cam;
    cam["fx"] = c.pipeline.intrinsics.fx;
    cam["fy"] = c.pipeline.intrinsics.fy;
    cam["cx"] = c.pipeline.intrinsics.cx;
    cam["cy"] = c.pipeline.intrinsics.cy;
    cam["width"] = c.pipeline.intrinsics.width;
    cam["height"] = c.pipeline.intrinsics.height;
    cam["distance_min"] = c.pipeline.camera_ranges.distance_min;
    cam["distance_max"] = c.pipeline.camera_ranges.distance_max;
    cam["azimuth_min"] = c.pipeline.camera_ranges.azimuth_min;
    cam["azimuth_max"] = c.pipeline.camera_ranges.azimuth_max;
    cam["elevation_min"] = c.pipeline.camera_ranges.elevation_min;
    cam["elevation_max"] = c.pipeline.camera_ranges.elevation_max;
    cam["min_fraction"] = c.pipeline.camera_ranges.min_fraction;
    cam["frame_margin"] = c.pipeline.camera_ranges.frame_margin;
    cam["max_tries"] = c.pipeline.camera_max_tries;
    j["camera"] = cam;

    ordered_json s;
    s["rig_seed"] = c.pipeline.rig_seed;
    s["steps"] = c.pipeline.sched_steps;
    s["beta_start"] = c.pipeline.beta_start;
    s["beta_end"] = c.pipeline.beta_end;
    j["schedule"] = s;

    ordered_json d;
    d["category_weights"] = c.data.category_weights;
    d["unreliable_fraction"] = c.data.unreliable_fraction;
    d["records_per_shard"] = c.data.records_per_shard;
    j["data"] = d;

    ordered_json tr;
    tr["lr"] = c.train.lr;
    tr["weight_decay"] = c.train.weight_decay;
    tr["t2h_steps"] = c.train.t2h_steps;
    tr["t2h_batch"] = c.train.t2h_batch;
    tr["ae_steps"] = c.train.ae_steps;
    tr["ae_batch"] = c.train.ae_batch;
    tr["th2i_steps"] = c.train.th2i_steps;
    tr["th2i_batch"] = c.train.th2i_batch;
    j["train"] = tr;

    return j.dump(2) + "\n";
}

namespace {

RunConfig parse(const json& j) {
    RunConfig c;
    Strict root(j, "");
    c.master_seed = root.uinteger("master_seed");
    c.out_dir = root.str("out_dir");
    c.data_count = root.integer("data_count");

    {
        Strict t = root.child("state_stage");
        c.pipeline.t2h.state_dim = t.integer("state_dim");
        c.pipeline.t2h.model_dim = t.integer("model_dim");
        c.pipeline.t2h.head_count = t.integer("head_count");
        c.pipeline.t2h.ff_dim = t.integer("ff_dim");
        c.pipeline.t2h.block_count = t.integer("block_count");
        c.pipeline.t2h.vocab_size = t.integer("vocab_size");
        c.pipeline.t2h.text_len = t.integer("text_len");
        c.pipeline.t2h.guidance_scale = t.num("guidance_scale");
        c.pipeline.t2h.drop_prob = t.num("drop_prob");
        t.finish();
    }
    {
        Strict e = root.child("condition_encoder");
        c.pipeline.encoder.n_bins = e.integer("n_bins");
        c.pipeline.encoder.bps_count = e.integer("bps_count");
        c.pipeline.encoder.bps_seed = e.uinteger("bps_seed");
        c.pipeline.encoder.bps_radius = e.num("bps_radius");
        c.pipeline.encoder.canonical_hand_scale = e.num("canonical_hand_scale");
        c.pipeline.encoder.embed_dim = e.integer("embed_dim");
        c.pipeline.encoder.max_text_len = e.integer("max_text_len");
        c.pipeline.encoder.joints_per_hand = e.integer("joints_per_hand");
        c.pipeline.encoder.rot_joints_per_hand = e.integer("rot_joints_per_hand");
        c.pipeline.encoder.mlp_hidden = e.integer("mlp_hidden");
        e.finish();
    }
    {
        Strict i = root.child("image_stage");
        c.pipeline.th2i.latent_channels = i.integer("latent_channels");
        c.pipeline.th2i.latent_hw = i.integer("latent_hw");
        c.pipeline.th2i.base_width = i.integer("base_width");
        c.pipeline.th2i.mid_width = i.integer("mid_width");
        c.pipeline.th2i.cond_dim = i.integer("cond_dim");
        c.pipeline.th2i.head_count = i.integer("head_count");
        c.pipeline.th2i.drop_prob = i.num("drop_prob");
        c.pipeline.th2i.guidance = i.num("guidance");
        c.pipeline.th2i.plms_steps = i.integer("plms_steps");
        i.finish();
    }
    {
        Strict a = root.child("autoencoder");
        c.pipeline.ae.image_channels = a.integer("image_channels");
        c.pipeline.ae.latent_channels = a.integer("latent_channels");
        c.pipeline.ae.width = a.integer("width");
        a.finish();
    }
    {
        Strict cam = root.child("camera");
        c.pipeline.intrinsics.fx = cam.num("fx");
        c.pipeline.intrinsics.fy = cam.num("fy");
        c.pipeline.intrinsics.cx = cam.num("cx");
        c.pipeline.intrinsics.cy = cam.num("cy");
        c.pipeline.intrinsics.width = cam.integer("width");
        c.pipeline.intrinsics.height = cam.integer("height");
        c.pipeline.camera_ranges.distance_min = cam.num("distance_min");
        c.pipeline.camera_ranges.distance_max = cam.num("distance_max");
        c.pipeline.camera_ranges.azimuth_min = cam.num("azimuth_min");
        c.pipeline.camera_ranges.azimuth_max = cam.num("azimuth_max");
        c.pipeline.camera_ranges.elevation_min = cam.num("elevation_min");
        c.pipeline.camera_ranges.elevation_max = cam.num("elevation_max");
        c.pipeline.camera_ranges.min_fraction = cam.num("min_fraction");
        c.pipeline.camera_ranges.frame_margin = cam.num("frame_margin");
        c.pipeline.camera_max_tries = cam.integer("max_tries");
        cam.finish();
    }
    {
        Strict s = root.child("schedule");
        c.pipeline.rig_seed = s.uinteger("rig_seed");
        c.pipeline.sched_steps = s.integer("steps");
        c.pipeline.beta_start = s.num("beta_start");
        c.pipeline.beta_end = s.num("beta_end");
        s.finish();
    }
    {
        Strict d = root.child("data");
        const json& w = d.key("category_weights");
        if (!w.is_array() || w.size() != static_cast<size_t>(data::kCategoryCount))
            throw SchemaError("config: data.category_weights must hold " +
                              std::to_string(data::kCategoryCount) + " numbers");
        for (size_t i = 0; i < w.size(); ++i) {
            if (!w[i].is_number())
                throw SchemaError("config: data.category_weights entries must be numbers");
            c.data.category_weights[i] = w[i].get<double>();
        }
        c.data.unreliable_fraction = d.num("unreliable_fraction");
        c.data.records_per_shard = d.integer("records_per_shard");
        d.finish();
    }
    {
        Strict tr = root.child("train");
        c.train.lr = tr.num("lr");
        c.train.weight_decay = tr.num("weight_decay");
        c.train.t2h_steps = tr.integer("t2h_steps");
        c.train.t2h_batch = tr.integer("t2h_batch");
        c.train.ae_steps = tr.integer("ae_steps");
        c.train.ae_batch = tr.integer("ae_batch");
        c.train.th2i_steps = tr.integer("th2i_steps");
        c.train.th2i_batch = tr.integer("th2i_batch");
        tr.finish();
    }
    root.finish();

    c.sync_data_camera();
    c.validate();
    return c;
}

json parse_json(const std::string& text, const char* what) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw SchemaError(std::string(what) + ": malformed JSON");
    return j;
}

void merge_over(json& base, const json& over, const std::string& path) {
    if (!over.is_object() || !base.is_object())
        throw SchemaError("config override at " + path + " must merge object onto object");
    for (auto it = over.begin(); it != over.end(); ++it) {
        if (base.contains(it.key()) && base[it.key()].is_object() && it->is_object())
            merge_over(base[it.key()], *it, path + it.key() + ".");
        else
            base[it.key()] = *it;
    }
}

}  // namespace

RunConfig load_config_text(const std::string& text) {
    return parse(parse_json(text, "config"));
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return load_config_text(ss.str());
}

void save_config_file(const RunConfig& c, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw SchemaError("config: cannot write " + path);
    out << save_config(c);
}

RunConfig apply_env_overrides(const std::string& config_text) {
    json j = parse_json(config_text, "config");
    if (const char* env = std::getenv("HGEN_OVERRIDES")) {
        json over = parse_json(env, "HGEN_OVERRIDES");
        merge_over(j, over, "");
    }
    return parse(j);
}

uint64_t config_fingerprint(const RunConfig& c) { return fnv1a64(save_config(c)); }

}  // namespace hgen::cfg
