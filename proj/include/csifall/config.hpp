#pragma once

// Run configuration: one JSON document with a section per module. Unknown keys and
// out-of-range values are rejected with ConfigError.

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "csifall/model.hpp"
#include "csifall/stream.hpp"
#include "csifall/synthcsi.hpp"
#include "csifall/training.hpp"

namespace csifall {

struct RunConfig {
    // Shared by synthetic generation and the live path (copied into synth and stream).
    PreprocessOptions preprocess = StreamConfig{}.preprocess;
    ModelConfig model{};
    TrainConfig training{};  // training.augment is the "augment" section
    StreamConfig stream{};
    SynthSpec synth = make_synth_spec(4, 1, 40, 40, 0);

    void validate() const;
    // Sets every module seed; a top-level "seed" key in a config file does the same.
    void apply_seed(std::uint64_t s);
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AugmentPolicy& p);
AugmentPolicy augment_policy_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SynthSpec& s);
SynthSpec synth_spec_from_json(const nlohmann::json& j);

// Short stable hex digest of a JSON document (FNV-1a over its compact dump).
std::string config_hash(const nlohmann::json& j);

}  // namespace csifall
