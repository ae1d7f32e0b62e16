#pragma once

// Run configuration: one strict nested key-value document covering every
// tunable, serialized as JSON. Unknown keys are fatal, load(save(c)) == c,
// and shipped defaults match the documented model hyperparameters.

#include <string>

#include "hgen/ad.hpp"
#include "hgen/data_synth.hpp"
#include "hgen/pipeline.hpp"

namespace hgen::cfg {

struct TrainConfig {
    double lr = 1e-4;  // constant rate, shared by all stages
    double weight_decay = 0.0;
    int64_t t2h_steps = 400;
    int64_t t2h_batch = 16;
    int64_t ae_steps = 400;
    int64_t ae_batch = 8;
    int64_t th2i_steps = 400;
    int64_t th2i_batch = 8;

    void validate() const;
    ad::AdamHyper adam() const;
};

struct RunConfig {
    uint64_t master_seed = 2024;
    std::string out_dir = "runs";
    int64_t data_count = 1000;  // records for make-data
    pipe::PipelineConfig pipeline = pipe::PipelineConfig::defaults();
    data::DataConfig data;  // camera/intrinsics mirror the pipeline section
    TrainConfig train;

    static RunConfig defaults();
    void validate() const;

    // Dataset generation reuses the pipeline camera model; this keeps the two
    // sections consistent after edits.
    void sync_data_camera();
};

// JSON text, stable key order, newline terminated.
std::string save_config(const RunConfig& c);
// Strict parse: wrong types, missing keys and unknown keys all throw
// SchemaError naming the offending path.
RunConfig load_config_text(const std::string& text);
RunConfig load_config_file(const std::string& path);
void save_config_file(const RunConfig& c, const std::string& path);

// Overrides from the environment: when HGEN_OVERRIDES holds a JSON object, it
// is merged over the document (recursively for objects) before parsing.
RunConfig apply_env_overrides(const std::string& config_text);

uint64_t config_fingerprint(const RunConfig& c);  // hash of the serialized form

}  // namespace hgen::cfg
