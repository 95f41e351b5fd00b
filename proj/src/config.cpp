#include "duin/config.hpp"

#include <fstream>
#include <set>

namespace duin {

using nlohmann::json;

namespace {

const std::set<std::string> kStages = {"synth",    "preprocess", "train-vqvae", "train-mae",
                                       "finetune", "eval",       "contrib",     "gradcheck"};

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("config: " + msg); }

void check_keys(const json& obj, const std::string& scope, const std::set<std::string>& allowed) {
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (!allowed.count(key)) {
            fail("unknown key '" + (scope.empty() ? key : scope + "." + key) + "'");
        }
    }
}

template <typename T>
T get_or(const json& obj, const std::string& scope, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        fail("wrong type for '" + (scope.empty() ? key : scope + "." + key) + "'");
    }
}

void parse_paths(const json& j, RunConfig::Paths& paths) {
    check_keys(j, "paths",
               {"recording", "out", "vqvae_checkpoint", "mae_checkpoint", "checkpoint"});
    paths.recording = get_or<std::string>(j, "paths", "recording", paths.recording);
    paths.out = get_or<std::string>(j, "paths", "out", paths.out);
    paths.vqvae_checkpoint =
        get_or<std::string>(j, "paths", "vqvae_checkpoint", paths.vqvae_checkpoint);
    paths.mae_checkpoint = get_or<std::string>(j, "paths", "mae_checkpoint", paths.mae_checkpoint);
    paths.checkpoint = get_or<std::string>(j, "paths", "checkpoint", paths.checkpoint);
}

void parse_synthetic(const json& j, SyntheticSpec& s) {
    check_keys(j, "synthetic",
               {"n_channels", "sample_rate_hz", "n_classes", "n_trials_per_class",
                "informative_channels", "noise_sigma", "seed"});
    s.n_channels = get_or<Index>(j, "synthetic", "n_channels", s.n_channels);
    s.sample_rate_hz = get_or<double>(j, "synthetic", "sample_rate_hz", s.sample_rate_hz);
    s.n_classes = get_or<int>(j, "synthetic", "n_classes", s.n_classes);
    s.n_trials_per_class = get_or<int>(j, "synthetic", "n_trials_per_class", s.n_trials_per_class);
    s.informative_channels =
        get_or<std::vector<Index>>(j, "synthetic", "informative_channels", s.informative_channels);
    s.noise_sigma = get_or<double>(j, "synthetic", "noise_sigma", s.noise_sigma);
    s.seed = get_or<std::uint64_t>(j, "synthetic", "seed", s.seed);
}

void parse_preprocess(const json& j, FilterSpec& f) {
    check_keys(j, "preprocess",
               {"low_hz", "high_hz", "notch_hz", "notch_q", "target_rate_hz", "bipolar",
                "keep_channels"});
    f.low_hz = get_or<double>(j, "preprocess", "low_hz", f.low_hz);
    f.high_hz = get_or<double>(j, "preprocess", "high_hz", f.high_hz);
    f.notch_hz = get_or<double>(j, "preprocess", "notch_hz", f.notch_hz);
    f.notch_q = get_or<double>(j, "preprocess", "notch_q", f.notch_q);
    f.target_rate_hz = get_or<double>(j, "preprocess", "target_rate_hz", f.target_rate_hz);
    f.bipolar = get_or<bool>(j, "preprocess", "bipolar", f.bipolar);
    f.keep_channels =
        get_or<std::vector<Index>>(j, "preprocess", "keep_channels", f.keep_channels);
}

std::vector<ConvSpec> parse_conv_list(const json& arr, const std::string& scope) {
    std::vector<ConvSpec> out;
    for (const auto& row : arr) {
        if (!row.is_array() || row.size() != 5) {
            fail("'" + scope + "' rows must be [in, out, kernel, stride, padding]");
        }
        out.push_back({row[0].get<Index>(), row[1].get<Index>(), row[2].get<Index>(),
                       row[3].get<Index>(), row[4].get<Index>()});
    }
    return out;
}

std::vector<DeconvSpec> parse_deconv_list(const json& arr, const std::string& scope) {
    std::vector<DeconvSpec> out;
    for (const auto& row : arr) {
        if (!row.is_array() || row.size() != 6) {
            fail("'" + scope + "' rows must be [in, out, kernel, stride, padding, output_padding]");
        }
        out.push_back({row[0].get<Index>(), row[1].get<Index>(), row[2].get<Index>(),
                       row[3].get<Index>(), row[4].get<Index>(), row[5].get<Index>()});
    }
    return out;
}

void parse_encoder(const json& j, EncoderConfig& e) {
    check_keys(j, "encoder",
               {"in_channels", "patch_samples", "proj_dim", "conv", "model_dim", "n_layers",
                "ffn_dim", "heads", "head_dim", "t_max", "attn_dropout", "mlp_dropout1",
                "mlp_dropout2", "bn_momentum", "conv_activation"});
    e.in_channels = get_or<Index>(j, "encoder", "in_channels", e.in_channels);
    e.patch_samples = get_or<Index>(j, "encoder", "patch_samples", e.patch_samples);
    e.proj_dim = get_or<Index>(j, "encoder", "proj_dim", e.proj_dim);
    if (j.contains("conv")) e.conv = parse_conv_list(j.at("conv"), "encoder.conv");
    e.model_dim = get_or<Index>(j, "encoder", "model_dim", e.model_dim);
    e.n_layers = get_or<Index>(j, "encoder", "n_layers", e.n_layers);
    e.ffn_dim = get_or<Index>(j, "encoder", "ffn_dim", e.ffn_dim);
    e.heads = get_or<Index>(j, "encoder", "heads", e.heads);
    e.head_dim = get_or<Index>(j, "encoder", "head_dim", e.head_dim);
    e.t_max = get_or<Index>(j, "encoder", "t_max", e.t_max);
    e.attn_dropout = get_or<double>(j, "encoder", "attn_dropout", e.attn_dropout);
    e.mlp_dropout1 = get_or<double>(j, "encoder", "mlp_dropout1", e.mlp_dropout1);
    e.mlp_dropout2 = get_or<double>(j, "encoder", "mlp_dropout2", e.mlp_dropout2);
    e.bn_momentum = get_or<double>(j, "encoder", "bn_momentum", e.bn_momentum);
    if (j.contains("conv_activation")) {
        e.conv_activation = act_from_string(j.at("conv_activation").get<std::string>());
    }
    for (double d : {e.attn_dropout, e.mlp_dropout1, e.mlp_dropout2}) {
        if (d < 0.0 || d >= 1.0) fail("encoder dropout rates must be in [0, 1)");
    }
}

void parse_quantizer(const json& j, QuantizerConfig& q) {
    check_keys(j, "quantizer",
               {"n_codex", "d_codex", "beta", "decay", "eps", "reseed_after_epochs"});
    q.n_codex = get_or<Index>(j, "quantizer", "n_codex", q.n_codex);
    q.d_codex = get_or<Index>(j, "quantizer", "d_codex", q.d_codex);
    q.beta = get_or<double>(j, "quantizer", "beta", q.beta);
    q.decay = get_or<double>(j, "quantizer", "decay", q.decay);
    q.eps = get_or<double>(j, "quantizer", "eps", q.eps);
    q.reseed_after_epochs =
        get_or<Index>(j, "quantizer", "reseed_after_epochs", q.reseed_after_epochs);
    q.validate();
}

void parse_regressor(const json& j, RegressorConfig& r) {
    check_keys(j, "regressor", {"n_layers", "deconv", "out_channels", "add_temporal"});
    r.n_layers = get_or<Index>(j, "regressor", "n_layers", r.n_layers);
    if (j.contains("deconv")) r.deconv = parse_deconv_list(j.at("deconv"), "regressor.deconv");
    r.out_channels = get_or<Index>(j, "regressor", "out_channels", r.out_channels);
    r.add_temporal = get_or<bool>(j, "regressor", "add_temporal", r.add_temporal);
}

void parse_train(const json& j, const std::string& scope, TrainParams& t) {
    check_keys(j, scope,
               {"batch_size", "max_lr", "min_lr", "weight_decay", "epochs", "warmup_epochs"});
    t.batch_size = get_or<int>(j, scope, "batch_size", t.batch_size);
    t.max_lr = get_or<double>(j, scope, "max_lr", t.max_lr);
    t.min_lr = get_or<double>(j, scope, "min_lr", t.min_lr);
    t.weight_decay = get_or<double>(j, scope, "weight_decay", t.weight_decay);
    t.epochs = get_or<int>(j, scope, "epochs", t.epochs);
    t.warmup_epochs = get_or<int>(j, scope, "warmup_epochs", t.warmup_epochs);
    if (t.batch_size < 1) fail(scope + ".batch_size must be >= 1");
    if (t.epochs < 1) fail(scope + ".epochs must be >= 1");
    t.schedule().validate();
}

void parse_split(const json& j, SplitSpec& s) {
    check_keys(j, "split", {"train", "val", "test", "seed"});
    s.train_fraction = get_or<double>(j, "split", "train", s.train_fraction);
    s.val_fraction = get_or<double>(j, "split", "val", s.val_fraction);
    s.test_fraction = get_or<double>(j, "split", "test", s.test_fraction);
    s.seed = get_or<std::uint64_t>(j, "split", "seed", s.seed);
    s.validate();
}

}  // namespace

RunConfig parse_config_json(const json& j) {
    if (!j.is_object()) fail("top level must be a JSON object");
    check_keys(j, "",
               {"stage", "seed", "paths", "synthetic", "preprocess", "encoder", "quantizer",
                "regressor", "vqvae_train", "mae_train", "cls_train", "mask_ratio", "init_mode",
                "head_hidden", "augment", "window_s", "split", "sweep"});

    RunConfig cfg;
    if (!j.contains("stage")) fail("missing required key 'stage'");
    cfg.stage = j.at("stage").get<std::string>();
    if (!kStages.count(cfg.stage)) fail("unknown stage '" + cfg.stage + "'");
    cfg.seed = get_or<std::uint64_t>(j, "", "seed", cfg.seed);

    if (j.contains("paths")) parse_paths(j.at("paths"), cfg.paths);
    if (j.contains("synthetic")) parse_synthetic(j.at("synthetic"), cfg.synthetic);
    if (j.contains("preprocess")) parse_preprocess(j.at("preprocess"), cfg.preprocess);
    if (j.contains("encoder")) parse_encoder(j.at("encoder"), cfg.encoder);
    if (j.contains("quantizer")) parse_quantizer(j.at("quantizer"), cfg.quantizer);
    if (j.contains("regressor")) parse_regressor(j.at("regressor"), cfg.regressor);
    if (j.contains("vqvae_train"))
        parse_train(j.at("vqvae_train"), "vqvae_train", cfg.vqvae_train);
    if (j.contains("mae_train")) parse_train(j.at("mae_train"), "mae_train", cfg.mae_train);
    if (j.contains("cls_train")) parse_train(j.at("cls_train"), "cls_train", cfg.cls_train);

    cfg.mask_ratio = get_or<double>(j, "", "mask_ratio", cfg.mask_ratio);
    if (cfg.mask_ratio <= 0.0 || cfg.mask_ratio >= 1.0) {
        fail("mask_ratio must be in (0, 1), got " + std::to_string(cfg.mask_ratio));
    }
    cfg.init_mode = get_or<std::string>(j, "", "init_mode", cfg.init_mode);
    init_mode_from_string(cfg.init_mode);  // rejects unknown values
    cfg.head_hidden = get_or<Index>(j, "", "head_hidden", cfg.head_hidden);
    cfg.augment = get_or<bool>(j, "", "augment", cfg.augment);
    cfg.window_s = get_or<double>(j, "", "window_s", cfg.window_s);
    if (cfg.window_s <= 0.0) fail("window_s must be > 0");
    if (j.contains("split")) parse_split(j.at("split"), cfg.split);

    if (j.contains("sweep")) {
        const json& sj = j.at("sweep");
        if (!sj.is_object()) fail("'sweep' must map dotted keys to value lists");
        for (const auto& [key, values] : sj.items()) {
            if (!values.is_array() || values.empty()) {
                fail("sweep values for '" + key + "' must be a nonempty list");
            }
            cfg.sweep[key] = std::vector<json>(values.begin(), values.end());
        }
    }

    cfg.validate();
    return cfg;
}

RunConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot read " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        fail("invalid JSON in " + path + ": " + std::string(e.what()));
    }
    return parse_config_json(j);
}

void RunConfig::validate() const {
    synthetic.validate();
    encoder.validate();
    quantizer.validate();
    regressor.validate(encoder);
    split.validate();
}

json RunConfig::resolved() const {
    json j;
    j["stage"] = stage;
    j["seed"] = seed;
    j["paths"] = {{"recording", paths.recording},
                  {"out", paths.out},
                  {"vqvae_checkpoint", paths.vqvae_checkpoint},
                  {"mae_checkpoint", paths.mae_checkpoint},
                  {"checkpoint", paths.checkpoint}};
    j["synthetic"] = {{"n_channels", synthetic.n_channels},
                      {"sample_rate_hz", synthetic.sample_rate_hz},
                      {"n_classes", synthetic.n_classes},
                      {"n_trials_per_class", synthetic.n_trials_per_class},
                      {"informative_channels", synthetic.informative_channels},
                      {"noise_sigma", synthetic.noise_sigma},
                      {"seed", synthetic.seed}};
    j["preprocess"] = {{"low_hz", preprocess.low_hz},
                       {"high_hz", preprocess.high_hz},
                       {"notch_hz", preprocess.notch_hz},
                       {"notch_q", preprocess.notch_q},
                       {"target_rate_hz", preprocess.target_rate_hz},
                       {"bipolar", preprocess.bipolar},
                       {"keep_channels", preprocess.keep_channels}};
    json conv = json::array();
    for (const auto& c : encoder.conv) {
        conv.push_back({c.in_ch, c.out_ch, c.kernel, c.stride, c.padding});
    }
    j["encoder"] = {{"in_channels", encoder.in_channels},
                    {"patch_samples", encoder.patch_samples},
                    {"proj_dim", encoder.proj_dim},
                    {"conv", conv},
                    {"model_dim", encoder.model_dim},
                    {"n_layers", encoder.n_layers},
                    {"ffn_dim", encoder.ffn_dim},
                    {"heads", encoder.heads},
                    {"head_dim", encoder.head_dim},
                    {"t_max", encoder.t_max},
                    {"attn_dropout", encoder.attn_dropout},
                    {"mlp_dropout1", encoder.mlp_dropout1},
                    {"mlp_dropout2", encoder.mlp_dropout2},
                    {"bn_momentum", encoder.bn_momentum}};
    j["quantizer"] = {{"n_codex", quantizer.n_codex},
                      {"d_codex", quantizer.d_codex},
                      {"beta", quantizer.beta},
                      {"decay", quantizer.decay},
                      {"eps", quantizer.eps},
                      {"reseed_after_epochs", quantizer.reseed_after_epochs}};
    json deconv = json::array();
    for (const auto& d : regressor.deconv) {
        deconv.push_back({d.in_ch, d.out_ch, d.kernel, d.stride, d.padding, d.output_padding});
    }
    j["regressor"] = {{"n_layers", regressor.n_layers},
                      {"deconv", deconv},
                      {"out_channels", regressor.out_channels},
                      {"add_temporal", regressor.add_temporal}};
    auto train_json = [](const TrainParams& t) {
        return json{{"batch_size", t.batch_size}, {"max_lr", t.max_lr},
                    {"min_lr", t.min_lr},         {"weight_decay", t.weight_decay},
                    {"epochs", t.epochs},         {"warmup_epochs", t.warmup_epochs}};
    };
    j["vqvae_train"] = train_json(vqvae_train);
    j["mae_train"] = train_json(mae_train);
    j["cls_train"] = train_json(cls_train);
    j["mask_ratio"] = mask_ratio;
    j["init_mode"] = init_mode;
    j["head_hidden"] = head_hidden;
    j["augment"] = augment;
    j["window_s"] = window_s;
    j["split"] = {{"train", split.train_fraction},
                  {"val", split.val_fraction},
                  {"test", split.test_fraction},
                  {"seed", split.seed}};
    if (!sweep.empty()) {
        json sj = json::object();
        for (const auto& [key, values] : sweep) sj[key] = values;
        j["sweep"] = sj;
    }
    return j;
}

json apply_override(json base, const std::string& dotted_key, const json& value) {
    json* node = &base;
    std::string rest = dotted_key;
    while (true) {
        const auto dot = rest.find('.');
        if (dot == std::string::npos) break;
        const std::string head = rest.substr(0, dot);
        rest = rest.substr(dot + 1);
        if (!node->contains(head)) (*node)[head] = json::object();
        node = &(*node)[head];
    }
    (*node)[rest] = value;
    return base;
}

}  // namespace duin
