// duin: discrete codex-guided masked modeling for multichannel intracranial
// time series. Stages: synth, preprocess, train-vqvae, train-mae, finetune,
// eval, contrib, gradcheck.

#include "duin/pipelines.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace {

int threads_from_env() {
    const char* env = std::getenv("DUIN_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n >= 1 ? n : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"duin: region-level decoding of multichannel intracranial time series"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::int64_t seed_override = -1;

    const std::vector<std::string> stages = {"synth",     "preprocess", "train-vqvae",
                                             "train-mae", "finetune",   "eval",
                                             "contrib",   "gradcheck"};
    std::string chosen;
    for (const auto& stage : stages) {
        CLI::App* sub = app.add_subcommand(stage, "run the " + stage + " stage");
        sub->add_option("--config", config_path, "run-config JSON")->required();
        sub->add_option("--out", out_dir, "output directory (overrides paths.out)");
        sub->add_option("--seed", seed_override, "seed override");
        sub->callback([&chosen, stage] { chosen = stage; });
    }

    CLI11_PARSE(app, argc, argv);

    // DUIN_THREADS caps internal parallelism; all current kernels are
    // single-threaded, so any value is bitwise deterministic.
    (void)threads_from_env();

    try {
        duin::RunConfig cfg = duin::parse_config(config_path);
        if (cfg.stage != chosen) {
            std::cerr << "error: config stage '" << cfg.stage << "' does not match subcommand '"
                      << chosen << "'\n";
            return 2;
        }
        if (!out_dir.empty()) cfg.paths.out = out_dir;
        if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
        return duin::run_stage(cfg, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
