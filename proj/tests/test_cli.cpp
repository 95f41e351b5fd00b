// End-to-end exercise of the command-line surface: synth -> preprocess ->
// train-vqvae -> train-mae -> finetune -> eval -> contrib on a miniature
// corpus, plus prerequisite failures and sweep output layout.

#include "duin/signal.hpp"

#include <nlohmann/json.hpp>

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string work_root() {
    static std::string root = [] {
        auto path = fs::temp_directory_path() / "duin_cli_test";
        fs::remove_all(path);
        fs::create_directories(path);
        return path.string();
    }();
    return root;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(DUIN_CLI_PATH) + " " + args + " >> " + work_root() +
                            "/cli.log 2>&1";
    return std::system(cmd.c_str());
}

void write_json(const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2) << "\n";
}

json base_config() {
    // 3-channel, 100 Hz corpus and the smallest model that satisfies the
    // geometry laws (W = 10 samples, d = 8).
    json j;
    j["seed"] = 3;
    j["synthetic"] = {{"n_channels", 3},       {"sample_rate_hz", 200.0},
                      {"n_classes", 2},        {"n_trials_per_class", 5},
                      {"informative_channels", {0, 1}}, {"noise_sigma", 0.4},
                      {"seed", 12}};
    j["preprocess"] = {{"low_hz", 0.5},   {"high_hz", 40.0},       {"notch_hz", 25.0},
                       {"notch_q", 35.0}, {"target_rate_hz", 100.0}, {"bipolar", false}};
    j["encoder"] = {{"in_channels", 3},
                    {"patch_samples", 10},
                    {"proj_dim", 4},
                    {"conv", {{4, 8, 10, 10, 0}}},
                    {"model_dim", 8},
                    {"n_layers", 2},
                    {"ffn_dim", 16},
                    {"heads", 2},
                    {"head_dim", 4},
                    {"t_max", 40},
                    {"attn_dropout", 0.0},
                    {"mlp_dropout1", 0.0},
                    {"mlp_dropout2", 0.0}};
    j["quantizer"] = {{"n_codex", 16}, {"d_codex", 6}};
    j["regressor"] = {{"n_layers", 1},
                      {"deconv", {{8, 4, 10, 10, 0, 0}}},
                      {"out_channels", 3}};
    j["vqvae_train"] = {{"batch_size", 8}, {"max_lr", 1e-3},      {"min_lr", 1e-4},
                        {"weight_decay", 0.01}, {"epochs", 2},    {"warmup_epochs", 1}};
    j["mae_train"] = {{"batch_size", 8}, {"max_lr", 1e-3},        {"min_lr", 1e-4},
                      {"weight_decay", 0.05}, {"epochs", 2},      {"warmup_epochs", 1}};
    j["cls_train"] = {{"batch_size", 4}, {"max_lr", 1e-3},        {"min_lr", 1e-5},
                      {"weight_decay", 0.05}, {"epochs", 2},      {"warmup_epochs", 1}};
    j["head_hidden"] = 8;
    return j;
}

}  // namespace

TEST_CASE("full synthetic pipeline completes with exit 0") {
    const std::string root = work_root();

    json synth = base_config();
    synth["stage"] = "synth";
    synth["paths"] = {{"out", root + "/synth"}};
    write_json(root + "/synth.json", synth);
    REQUIRE(run_cli("synth --config " + root + "/synth.json") == 0);
    REQUIRE(fs::exists(root + "/synth/synthetic.duin"));

    json prep = base_config();
    prep["stage"] = "preprocess";
    prep["paths"] = {{"recording", root + "/synth/synthetic.duin"}, {"out", root + "/prep"}};
    write_json(root + "/prep.json", prep);
    REQUIRE(run_cli("preprocess --config " + root + "/prep.json") == 0);
    REQUIRE(fs::exists(root + "/prep/preprocessed.duin"));
    const duin::Recording rec = duin::load_recording(root + "/prep/preprocessed.duin");
    CHECK(rec.sample_rate_hz == 100.0);
    CHECK(rec.trials.size() == 10);

    json vq = base_config();
    vq["stage"] = "train-vqvae";
    vq["paths"] = {{"recording", root + "/prep/preprocessed.duin"}, {"out", root + "/vqvae"}};
    write_json(root + "/vqvae.json", vq);
    REQUIRE(run_cli("train-vqvae --config " + root + "/vqvae.json") == 0);
    REQUIRE(fs::exists(root + "/vqvae/final/tensors.bin"));
    REQUIRE(fs::exists(root + "/vqvae/metrics.jsonl"));
    REQUIRE(fs::exists(root + "/vqvae/resolved-config.json"));

    json mae = base_config();
    mae["stage"] = "train-mae";
    mae["paths"] = {{"recording", root + "/prep/preprocessed.duin"},
                    {"vqvae_checkpoint", root + "/vqvae/final"},
                    {"out", root + "/mae"}};
    write_json(root + "/mae.json", mae);
    REQUIRE(run_cli("train-mae --config " + root + "/mae.json") == 0);
    REQUIRE(fs::exists(root + "/mae/final/tensors.bin"));

    json cls = base_config();
    cls["stage"] = "finetune";
    cls["init_mode"] = "mae";
    cls["paths"] = {{"recording", root + "/prep/preprocessed.duin"},
                    {"mae_checkpoint", root + "/mae/final"},
                    {"out", root + "/cls"}};
    write_json(root + "/cls.json", cls);
    REQUIRE(run_cli("finetune --config " + root + "/cls.json") == 0);
    REQUIRE(fs::exists(root + "/cls/best/tensors.bin"));

    json ev = base_config();
    ev["stage"] = "eval";
    ev["init_mode"] = "mae";
    ev["paths"] = {{"recording", root + "/prep/preprocessed.duin"},
                   {"checkpoint", root + "/cls/best"},
                   {"out", root + "/eval"}};
    write_json(root + "/eval.json", ev);
    REQUIRE(run_cli("eval --config " + root + "/eval.json") == 0);
    REQUIRE(fs::exists(root + "/eval/metrics.json"));
    {
        std::ifstream in(root + "/eval/metrics.json");
        json metrics = json::parse(in);
        CHECK(metrics.contains("top1"));
        CHECK(metrics.contains("ce"));
    }

    json contrib = base_config();
    contrib["stage"] = "contrib";
    contrib["paths"] = {{"recording", root + "/prep/preprocessed.duin"},
                        {"checkpoint", root + "/cls/best"},
                        {"out", root + "/contrib"}};
    write_json(root + "/contrib.json", contrib);
    REQUIRE(run_cli("contrib --config " + root + "/contrib.json") == 0);
    {
        std::ifstream in(root + "/contrib/contrib.csv");
        std::string header;
        std::getline(in, header);
        CHECK(header == "channel_name,score,rank");
        int rows = 0;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) ++rows;
        }
        CHECK(rows == 3);
    }
}

TEST_CASE("missing vqvae checkpoint is a prerequisite error") {
    const std::string root = work_root();
    json mae = base_config();
    mae["stage"] = "train-mae";
    mae["paths"] = {{"recording", root + "/prep/preprocessed.duin"},
                    {"vqvae_checkpoint", root + "/nowhere"},
                    {"out", root + "/mae_bad"}};
    write_json(root + "/mae_bad.json", mae);
    CHECK(run_cli("train-mae --config " + root + "/mae_bad.json") != 0);
}

TEST_CASE("config rejections surface as nonzero exits") {
    const std::string root = work_root();
    json bad = base_config();
    bad["stage"] = "train-mae";
    bad["mask_ratio"] = 1.5;
    write_json(root + "/bad.json", bad);
    CHECK(run_cli("train-mae --config " + root + "/bad.json") != 0);

    json unknown = base_config();
    unknown["stage"] = "train-vqvae";
    unknown["vqvae_train"]["lr_max"] = 1e-3;
    write_json(root + "/unknown.json", unknown);
    CHECK(run_cli("train-vqvae --config " + root + "/unknown.json") != 0);
}

TEST_CASE("sweep emits one metrics file per setting") {
    const std::string root = work_root();
    json sweep = base_config();
    sweep["stage"] = "train-vqvae";
    sweep["paths"] = {{"recording", root + "/prep/preprocessed.duin"},
                      {"out", root + "/sweep"}};
    sweep["sweep"] = {{"quantizer.n_codex", {8, 16}}};
    write_json(root + "/sweep.json", sweep);
    REQUIRE(run_cli("train-vqvae --config " + root + "/sweep.json") == 0);
    int found = 0;
    for (const auto& entry : fs::directory_iterator(root + "/sweep")) {
        if (entry.is_directory() && fs::exists(entry.path() / "metrics.jsonl")) ++found;
    }
    CHECK(found == 2);
}
