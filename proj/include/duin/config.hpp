#pragma once

#include "duin/model.hpp"
#include "duin/optim.hpp"
#include "duin/preprocess.hpp"
#include "duin/signal.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

namespace duin {

struct TrainParams {
    int batch_size = 64;
    double max_lr = 3e-4;
    double min_lr = 5e-5;
    double weight_decay = 0.01;
    int epochs = 400;
    int warmup_epochs = 40;

    CosineWarmupSchedule schedule() const { return {max_lr, min_lr, warmup_epochs, epochs}; }
};

/// One resolved run. Defaults reproduce the paper-scale training tables;
/// JSON configs override selectively and unknown keys are rejected.
struct RunConfig {
    std::string stage;
    std::uint64_t seed = 0;

    struct Paths {
        std::string recording;         // input recording (.duin)
        std::string out;               // output directory
        std::string vqvae_checkpoint;  // stage-1 artifact
        std::string mae_checkpoint;    // stage-2 artifact
        std::string checkpoint;        // generic model checkpoint (eval/contrib)
    } paths;

    SyntheticSpec synthetic;
    FilterSpec preprocess;
    EncoderConfig encoder;
    QuantizerConfig quantizer;
    RegressorConfig regressor;

    TrainParams vqvae_train{64, 3e-4, 5e-5, 0.01, 400, 40};
    TrainParams mae_train{64, 3e-4, 5e-5, 0.05, 400, 40};
    TrainParams cls_train{32, 2e-4, 5e-6, 0.05, 200, 20};

    double mask_ratio = 0.5;
    std::string init_mode = "random";
    Index head_hidden = 128;
    bool augment = true;
    double window_s = 3.0;

    SplitSpec split;

    // Dotted config key -> list of values; the runner executes the cartesian
    // product, one output subdirectory per combination.
    std::map<std::string, std::vector<nlohmann::json>> sweep;

    nlohmann::json resolved() const;
    void validate() const;
};

RunConfig parse_config(const std::string& path);
RunConfig parse_config_json(const nlohmann::json& j);

/// Applies {"a.b.c": value} onto a config JSON (used by sweeps).
nlohmann::json apply_override(nlohmann::json base, const std::string& dotted_key,
                              const nlohmann::json& value);

}  // namespace duin
