#include "duin/pipelines.hpp"

#include "duin/gradcheck.hpp"
#include "duin/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

namespace duin {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

std::vector<bool> sample_mask(Index n, double ratio, Rng& rng) {
    if (n < 2) throw std::invalid_argument("sample_mask: need at least 2 positions");
    const Index m = static_cast<Index>(std::llround(ratio * static_cast<double>(n)));
    if (m <= 0 || m >= n) {
        throw std::invalid_argument("sample_mask: round(ratio*n) = " + std::to_string(m) +
                                    " leaves an empty mask or complement");
    }
    // Seeded partial Fisher-Yates over position indices.
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index(0));
    for (Index i = 0; i < m; ++i) {
        const Index j = rng.uniform_int(i, n - 1);
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    std::vector<bool> mask(static_cast<std::size_t>(n), false);
    for (Index i = 0; i < m; ++i) mask[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = true;
    return mask;
}

std::vector<bool> complement_mask(const std::vector<bool>& mask) {
    std::vector<bool> out(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) out[i] = !mask[i];
    return out;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

Tensor<F> batch_from_samples(const std::vector<Sample>& samples, const std::vector<Index>& idx) {
    if (idx.empty()) throw std::invalid_argument("batch_from_samples: empty index list");
    const Index C = samples[static_cast<std::size_t>(idx[0])].data.dim(0);
    const Index T = samples[static_cast<std::size_t>(idx[0])].data.dim(1);
    Tensor<F> batch({static_cast<Index>(idx.size()), C, T});
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const Sample& s = samples[static_cast<std::size_t>(idx[b])];
        if (s.data.dim(0) != C || s.data.dim(1) != T) {
            throw std::invalid_argument("batch_from_samples: inconsistent sample shapes");
        }
        batch.item_mat(static_cast<Index>(b), C, T) = s.data.mat();
    }
    return batch;
}

namespace {

void shuffle_indices(std::vector<Index>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(idx[i - 1], idx[j]);
    }
}

std::vector<std::vector<Index>> make_batches(std::vector<Index> order, int batch_size) {
    std::vector<std::vector<Index>> batches;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
        if (end - i < 2) break;  // batch norm needs >= 2 patches; drop a trailing singleton
        batches.emplace_back(order.begin() + static_cast<long>(i),
                             order.begin() + static_cast<long>(end));
    }
    return batches;
}

void write_jsonl(std::ofstream& out, const json& j) { out << j.dump() << "\n"; }

std::string checkpoint_subdir(const std::string& out_dir, const char* which) {
    return out_dir + "/" + which;
}

}  // namespace

// ---------------------------------------------------------------------------
// VQ-VAE training
// ---------------------------------------------------------------------------

VqvaeStepStats vqvae_step(VqvaeModel<F>& model, const Tensor<F>& batch, AdamW<F>& opt, double lr,
                          Rng& rng) {
    const Index B = batch.dim(0);
    Var<F> tokens = model.encoder->forward(batch, Mode::train, rng);
    Var<F> z_c = model.proj->to_codex_space(tokens);
    QuantizeResult<F> qr = model.quantizer->quantize(z_c.value());
    VqLossTerms<F> terms = vq_loss_terms(z_c, qr, model.qcfg.beta);
    Var<F> dec_in = straight_through(z_c, qr, *model.proj);
    Var<F> recon = model.regressor->forward(dec_in, B, Mode::train, rng);

    Var<F> recon_sse = sum_squares(sub(recon, constant(batch)));
    const F inv_b = F(1) / static_cast<F>(B);
    Var<F> loss = scale(add(recon_sse, terms.commit), inv_b);
    const double loss_value = loss.value()[0] + terms.codebook_value * inv_b;
    if (!std::isfinite(loss_value)) {
        throw std::runtime_error("vqvae_step: non-finite loss (recon_sse = " +
                                 std::to_string(recon_sse.value()[0]) + ", commit = " +
                                 std::to_string(terms.commit.value()[0]) + ")");
    }

    backward(loss);
    opt.step(lr);
    model.quantizer->ema_update(qr, z_c.value());

    VqvaeStepStats stats;
    stats.loss = loss_value;
    stats.recon_mse = recon_sse.value()[0] / static_cast<double>(batch.size());
    stats.commit = terms.commit.value()[0] * inv_b;
    stats.codebook = terms.codebook_value * inv_b;
    stats.z_c_values = z_c.value();
    return stats;
}

VqvaeTrainResult train_vqvae(const RunConfig& cfg, const Recording& preprocessed,
                             const std::string& out_dir, std::ostream* log) {
    std::filesystem::create_directories(out_dir);
    VqvaeModel<F> model(cfg.encoder, cfg.quantizer, cfg.regressor, cfg.seed);
    AdamW<F> opt(model.store.trainable(), 0.9, 0.99, cfg.vqvae_train.weight_decay);
    const CosineWarmupSchedule sched = cfg.vqvae_train.schedule();

    const auto segments = segment_pretrain(preprocessed);
    std::vector<Index> order(segments.size());
    std::iota(order.begin(), order.end(), Index(0));

    std::ofstream metrics(out_dir + "/metrics.jsonl", std::ios::trunc);
    VqvaeTrainResult result;

    // Ring buffer of recent codex-space vectors for dead-code reseeding.
    Tensor<F> pool({512, cfg.quantizer.d_codex});
    Index pool_fill = 0;

    for (int epoch = 0; epoch < cfg.vqvae_train.epochs; ++epoch) {
        model.quantizer->set_epoch(epoch);
        Rng epoch_rng = Rng(cfg.seed).child("vqvae.epoch." + std::to_string(epoch));
        shuffle_indices(order, epoch_rng);
        const double lr = sched.lr_at(epoch);

        double loss_sum = 0, mse_sum = 0;
        int steps = 0;
        for (const auto& batch_idx : make_batches(order, cfg.vqvae_train.batch_size)) {
            std::vector<Sample> fetched;
            fetched.reserve(batch_idx.size());
            std::vector<Index> all(batch_idx.size());
            std::iota(all.begin(), all.end(), Index(0));
            for (Index si : batch_idx) {
                fetched.push_back(fetch_pretrain_sample(
                    preprocessed, segments[static_cast<std::size_t>(si)], epoch_rng));
            }
            Tensor<F> batch = batch_from_samples(fetched, all);
            VqvaeStepStats stats = vqvae_step(model, batch, opt, lr, epoch_rng);
            loss_sum += stats.loss;
            mse_sum += stats.recon_mse;
            ++steps;

            // Refresh part of the reseed pool from this batch's projections.
            for (Index r = 0; r < std::min<Index>(stats.z_c_values.dim(0), 64); ++r) {
                pool.mat().row(pool_fill % pool.dim(0)) = stats.z_c_values.mat().row(r);
                ++pool_fill;
            }
        }
        if (steps == 0) throw std::runtime_error("train_vqvae: no full batches; corpus too small");

        const double utilization = model.quantizer->utilization_and_reset();
        if (utilization < 0.05 && log) {
            (*log) << "warning: codex utilization " << utilization * 100.0
                   << "% at epoch " << epoch << " (possible codex collapse)\n";
        }
        if (pool_fill > 0) {
            Rng reseed_rng = Rng(cfg.seed).child("vqvae.reseed." + std::to_string(epoch));
            const Index live = std::min<Index>(pool_fill, pool.dim(0));
            Tensor<F> live_pool = Tensor<F>({live, cfg.quantizer.d_codex});
            live_pool.mat() = pool.mat().topRows(live);
            model.quantizer->dead_code_reseed(epoch, live_pool, reseed_rng);
        }

        const double mean_loss = loss_sum / steps;
        const double mean_mse = mse_sum / steps;
        result.loss_history.push_back(mean_loss);
        result.recon_mse_history.push_back(mean_mse);
        result.utilization_history.push_back(utilization);
        write_jsonl(metrics, {{"epoch", epoch},
                              {"loss", mean_loss},
                              {"recon_mse", mean_mse},
                              {"codex_utilization", utilization},
                              {"lr", lr}});

        if (result.best_epoch < 0 || mean_loss < result.best_loss) {
            result.best_loss = mean_loss;
            result.best_epoch = epoch;
            CheckpointHeader header{1, "vqvae", epoch, cfg.resolved(),
                                    {{"loss", mean_loss}, {"recon_mse", mean_mse}}};
            save_checkpoint(model.store, checkpoint_subdir(out_dir, "best"), header);
        }
        if (log) {
            (*log) << "vqvae epoch " << epoch << " loss " << mean_loss << " recon_mse "
                   << mean_mse << " util " << utilization << "\n";
        }
    }

    CheckpointHeader header{1,
                            "vqvae",
                            cfg.vqvae_train.epochs - 1,
                            cfg.resolved(),
                            {{"loss", result.loss_history.back()},
                             {"recon_mse", result.recon_mse_history.back()}}};
    save_checkpoint(model.store, checkpoint_subdir(out_dir, "final"), header);
    return result;
}

// ---------------------------------------------------------------------------
// MAE training
// ---------------------------------------------------------------------------

std::vector<Index> target_indices(VqvaeModel<F>& frozen, const Tensor<F>& batch) {
    Rng unused(0);
    Var<F> tokens = frozen.encoder->forward(batch, Mode::infer, unused);
    Var<F> z_c = frozen.proj->to_codex_space(tokens);
    return frozen.quantizer->quantize(z_c.value()).indices;
}

namespace {

// One masking pass: replace, add temporal, encode, classify masked rows.
Var<F> mae_pass(MaeModel<F>& model, const Var<F>& patch_embeddings, Index batch,
                const std::vector<bool>& mask, const std::vector<Index>& targets, Rng& rng,
                Mode mode, double* top1_hits, Index* counted) {
    Var<F> masked = mask_replace(patch_embeddings, mask, model.mask_token);
    Var<F> tokens = model.encoder->add_temporal(masked, batch);
    tokens = model.encoder->transformer_forward(tokens, batch, mode, rng);

    std::vector<Index> rows;
    std::vector<Index> row_targets;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) {
            rows.push_back(static_cast<Index>(i));
            row_targets.push_back(targets[i]);
        }
    }
    Var<F> logits = model.token_head->forward(gather_rows(tokens, rows));
    if (top1_hits) {
        const Index k = logits.value().dim(1);
        for (Index r = 0; r < logits.value().dim(0); ++r) {
            Index argmax = 0;
            for (Index c = 1; c < k; ++c) {
                if (logits.value().at2(r, c) > logits.value().at2(r, argmax)) argmax = c;
            }
            if (argmax == row_targets[static_cast<std::size_t>(r)]) *top1_hits += 1.0;
        }
        *counted += logits.value().dim(0);
    }
    return softmax_cross_entropy(logits, row_targets);
}

}  // namespace

Var<F> mae_pass_loss(MaeModel<F>& model, const Tensor<F>& batch,
                     const std::vector<Index>& targets, const std::vector<bool>& mask, Rng& rng,
                     Mode mode) {
    const Index B = batch.dim(0);
    Var<F> patches = constant(patchify_batch(batch, model.ecfg.patch_samples));
    Var<F> embedded = model.encoder->spatial_encode(patches, mode);
    return mae_pass(model, embedded, B, mask, targets, rng, mode, nullptr, nullptr);
}

Var<F> mae_symmetric_loss(MaeModel<F>& model, const Tensor<F>& batch,
                          const std::vector<Index>& targets, const std::vector<bool>& mask,
                          Rng& rng, Mode mode, MaeBatchStats* stats) {
    const Index B = batch.dim(0);
    const Index N = model.ecfg.n_patches(batch.dim(2));
    if (static_cast<Index>(targets.size()) != B * N) {
        throw std::invalid_argument("mae loss: target count mismatch");
    }
    if (mask.size() != static_cast<std::size_t>(B * N)) {
        throw std::invalid_argument("mae loss: mask length mismatch");
    }
    Var<F> patches = constant(patchify_batch(batch, model.ecfg.patch_samples));
    Var<F> embedded = model.encoder->spatial_encode(patches, mode);
    std::vector<bool> inverse = complement_mask(mask);

    double hits = 0;
    Index counted = 0;
    Var<F> loss_m = mae_pass(model, embedded, B, mask, targets, rng, mode,
                             stats ? &hits : nullptr, stats ? &counted : nullptr);
    Var<F> loss_sym = mae_pass(model, embedded, B, inverse, targets, rng, mode,
                               stats ? &hits : nullptr, stats ? &counted : nullptr);
    Var<F> total = add(loss_m, loss_sym);
    if (stats) {
        stats->loss = total.value()[0];
        stats->top1 = counted > 0 ? hits / static_cast<double>(counted) : 0.0;
        stats->masked = counted;
    }
    return total;
}

Var<F> mae_loss(MaeModel<F>& model, const Tensor<F>& batch, const std::vector<Index>& targets,
                double mask_ratio, Rng& rng, Mode mode, MaeBatchStats* stats) {
    const Index B = batch.dim(0);
    const Index N = model.ecfg.n_patches(batch.dim(2));
    std::vector<bool> mask(static_cast<std::size_t>(B * N), false);
    for (Index b = 0; b < B; ++b) {
        std::vector<bool> m = sample_mask(N, mask_ratio, rng);
        for (Index i = 0; i < N; ++i) {
            mask[static_cast<std::size_t>(b * N + i)] = m[static_cast<std::size_t>(i)];
        }
    }
    return mae_symmetric_loss(model, batch, targets, mask, rng, mode, stats);
}

MaeTrainResult train_mae(const RunConfig& cfg, const Recording& preprocessed,
                         const std::string& vqvae_dir, const std::string& out_dir,
                         std::ostream* log) {
    std::filesystem::create_directories(out_dir);

    // Frozen stage-1 model provides the prediction targets.
    VqvaeModel<F> frozen(cfg.encoder, cfg.quantizer, cfg.regressor, cfg.seed + 1);
    LoadReport report = load_checkpoint(frozen.store, vqvae_dir);
    for (const auto& entry : frozen.store.entries()) {
        const bool matched = std::find(report.matched.begin(), report.matched.end(),
                                       entry.name) != report.matched.end();
        if (!matched) {
            throw std::runtime_error("train_mae: vqvae checkpoint is missing tensor " +
                                     entry.name);
        }
    }
    frozen.store.freeze_all();

    // Trainable weights start fresh, not from the stage-1 checkpoint.
    MaeModel<F> model(cfg.encoder, cfg.quantizer.n_codex, cfg.seed);
    AdamW<F> opt(model.store.trainable(), 0.9, 0.99, cfg.mae_train.weight_decay);
    const CosineWarmupSchedule sched = cfg.mae_train.schedule();

    const auto segments = segment_pretrain(preprocessed);
    std::vector<Index> order(segments.size());
    std::iota(order.begin(), order.end(), Index(0));

    std::ofstream metrics(out_dir + "/metrics.jsonl", std::ios::trunc);
    MaeTrainResult result;

    for (int epoch = 0; epoch < cfg.mae_train.epochs; ++epoch) {
        Rng epoch_rng = Rng(cfg.seed).child("mae.epoch." + std::to_string(epoch));
        shuffle_indices(order, epoch_rng);
        const double lr = sched.lr_at(epoch);

        double loss_sum = 0, top1_sum = 0;
        int steps = 0;
        for (const auto& batch_idx : make_batches(order, cfg.mae_train.batch_size)) {
            std::vector<Sample> fetched;
            fetched.reserve(batch_idx.size());
            std::vector<Index> all(batch_idx.size());
            std::iota(all.begin(), all.end(), Index(0));
            for (Index si : batch_idx) {
                fetched.push_back(fetch_pretrain_sample(
                    preprocessed, segments[static_cast<std::size_t>(si)], epoch_rng));
            }
            Tensor<F> batch = batch_from_samples(fetched, all);
            const std::vector<Index> targets = target_indices(frozen, batch);

            MaeBatchStats stats;
            Var<F> loss = mae_loss(model, batch, targets, cfg.mask_ratio, epoch_rng, Mode::train,
                                   &stats);
            if (!std::isfinite(stats.loss)) {
                throw std::runtime_error("train_mae: non-finite loss at epoch " +
                                         std::to_string(epoch));
            }
            backward(loss);
            opt.step(lr);
            loss_sum += stats.loss;
            top1_sum += stats.top1;
            ++steps;
        }
        if (steps == 0) throw std::runtime_error("train_mae: no full batches; corpus too small");

        const double mean_loss = loss_sum / steps;
        const double mean_top1 = top1_sum / steps;
        result.loss_history.push_back(mean_loss);
        result.masked_top1_history.push_back(mean_top1);
        write_jsonl(metrics,
                    {{"epoch", epoch}, {"loss", mean_loss}, {"masked_top1", mean_top1}, {"lr", lr}});
        if (result.best_epoch < 0 || mean_top1 > result.best_top1) {
            result.best_top1 = mean_top1;
            result.best_epoch = epoch;
            CheckpointHeader header{1, "mae", epoch, cfg.resolved(),
                                    {{"loss", mean_loss}, {"masked_top1", mean_top1}}};
            save_checkpoint(model.store, checkpoint_subdir(out_dir, "best"), header);
        }
        if (log) {
            (*log) << "mae epoch " << epoch << " loss " << mean_loss << " masked_top1 "
                   << mean_top1 << "\n";
        }
    }

    CheckpointHeader header{1,
                            "mae",
                            cfg.mae_train.epochs - 1,
                            cfg.resolved(),
                            {{"loss", result.loss_history.back()},
                             {"masked_top1", result.masked_top1_history.back()}}};
    save_checkpoint(model.store, checkpoint_subdir(out_dir, "final"), header);
    return result;
}

// ---------------------------------------------------------------------------
// Downstream
// ---------------------------------------------------------------------------

ClsModel<F> init_classifier(const RunConfig& cfg, Index n_patches, Index n_classes,
                            InitMode mode) {
    const bool with_vq = (mode == InitMode::vqvae_vq);
    ClsModel<F> model(cfg.encoder, cfg.quantizer, n_patches, n_classes, with_vq,
                      cfg.head_hidden, cfg.seed);
    auto require_encoder_loaded = [&](const LoadReport& report) {
        for (const auto& entry : model.store.entries()) {
            if (entry.name.rfind("encoder.", 0) != 0) continue;
            if (std::find(report.matched.begin(), report.matched.end(), entry.name) ==
                report.matched.end()) {
                throw std::runtime_error("init_classifier: checkpoint missing tensor " +
                                         entry.name);
            }
        }
    };
    switch (mode) {
        case InitMode::random:
            break;
        case InitMode::vqvae: {
            if (cfg.paths.vqvae_checkpoint.empty()) {
                throw std::invalid_argument("init_classifier: vqvae mode needs paths.vqvae_checkpoint");
            }
            require_encoder_loaded(load_checkpoint(model.store, cfg.paths.vqvae_checkpoint));
            break;
        }
        case InitMode::vqvae_vq: {
            if (cfg.paths.vqvae_checkpoint.empty()) {
                throw std::invalid_argument(
                    "init_classifier: vqvae_vq mode needs paths.vqvae_checkpoint");
            }
            LoadReport report = load_checkpoint(model.store, cfg.paths.vqvae_checkpoint);
            require_encoder_loaded(report);
            for (const auto& entry : model.store.entries()) {
                if (entry.name.rfind("quantizer.", 0) != 0) continue;
                if (std::find(report.matched.begin(), report.matched.end(), entry.name) ==
                    report.matched.end()) {
                    throw std::runtime_error("init_classifier: checkpoint missing tensor " +
                                             entry.name);
                }
            }
            break;
        }
        case InitMode::mae: {
            if (cfg.paths.mae_checkpoint.empty()) {
                throw std::invalid_argument("init_classifier: mae mode needs paths.mae_checkpoint");
            }
            require_encoder_loaded(load_checkpoint(model.store, cfg.paths.mae_checkpoint));
            break;
        }
    }
    return model;
}

EvalMetrics evaluate(ClsModel<F>& model, const std::vector<Sample>& samples,
                     const std::vector<Index>& subset) {
    if (subset.empty()) throw std::invalid_argument("evaluate: empty sample set");
    EvalMetrics metrics;
    Rng rng(0);  // infer mode draws nothing
    const int batch_size = 32;
    double ce_sum = 0;
    Index hits = 0;
    for (std::size_t i = 0; i < subset.size(); i += batch_size) {
        const std::size_t end = std::min(subset.size(), i + batch_size);
        std::vector<Index> idx(subset.begin() + static_cast<long>(i),
                               subset.begin() + static_cast<long>(end));
        Tensor<F> batch = batch_from_samples(samples, idx);
        Var<F> logits = model.forward(batch, Mode::infer, rng);
        const Index K = logits.value().dim(1);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const int label = *samples[static_cast<std::size_t>(idx[b])].label;
            Index argmax = 0;
            double mx = logits.value().at2(static_cast<Index>(b), 0);
            for (Index c = 1; c < K; ++c) {
                if (logits.value().at2(static_cast<Index>(b), c) > mx) {
                    mx = logits.value().at2(static_cast<Index>(b), c);
                    argmax = c;
                }
            }
            if (argmax == label) ++hits;
            double z = 0;
            for (Index c = 0; c < K; ++c) {
                z += std::exp(static_cast<double>(logits.value().at2(static_cast<Index>(b), c)) - mx);
            }
            ce_sum += -(static_cast<double>(logits.value().at2(static_cast<Index>(b), label)) - mx -
                        std::log(z));
        }
    }
    metrics.count = static_cast<Index>(subset.size());
    metrics.top1 = static_cast<double>(hits) / static_cast<double>(subset.size());
    metrics.cross_entropy = ce_sum / static_cast<double>(subset.size());
    return metrics;
}

FinetuneResult finetune(const RunConfig& cfg, const Recording& recording,
                        const std::string& out_dir, std::ostream* log) {
    std::filesystem::create_directories(out_dir);
    const InitMode mode = init_mode_from_string(cfg.init_mode);

    std::vector<Sample> samples = extract_trial_samples(recording, recording.trials, cfg.window_s);
    if (samples.empty()) throw std::invalid_argument("finetune: recording has no trials");
    SplitResult split = split_dataset(samples, cfg.split);

    const Index T = samples[0].data.dim(1);
    const Index n_patches = cfg.encoder.n_patches(T);
    Index n_classes = 0;
    for (const Sample& s : samples) n_classes = std::max<Index>(n_classes, *s.label + 1);
    if (!recording.label_names.empty()) {
        n_classes = std::max<Index>(n_classes, static_cast<Index>(recording.label_names.size()));
    }

    ClsModel<F> model = init_classifier(cfg, n_patches, n_classes, mode);
    AdamW<F> opt(model.store.trainable(), 0.9, 0.99, cfg.cls_train.weight_decay);
    const CosineWarmupSchedule sched = cfg.cls_train.schedule();

    std::ofstream metrics(out_dir + "/metrics.jsonl", std::ios::trunc);
    FinetuneResult result;

    std::vector<Index> train_order = split.train;
    for (int epoch = 0; epoch < cfg.cls_train.epochs; ++epoch) {
        Rng epoch_rng = Rng(cfg.seed).child("cls.epoch." + std::to_string(epoch));
        shuffle_indices(train_order, epoch_rng);
        const double lr = sched.lr_at(epoch);

        double loss_sum = 0;
        int steps = 0;
        for (const auto& batch_idx : make_batches(train_order, cfg.cls_train.batch_size)) {
            std::vector<Sample> prepared;
            prepared.reserve(batch_idx.size());
            std::vector<Index> all(batch_idx.size());
            std::iota(all.begin(), all.end(), Index(0));
            std::vector<Index> labels;
            for (Index si : batch_idx) {
                Sample s = samples[static_cast<std::size_t>(si)];
                if (cfg.augment) s = augment_trial(s, recording.sample_rate_hz, epoch_rng);
                labels.push_back(*s.label);
                prepared.push_back(std::move(s));
            }
            Tensor<F> batch = batch_from_samples(prepared, all);
            Var<F> logits = model.forward(batch, Mode::train, epoch_rng);
            Var<F> loss = softmax_cross_entropy(logits, labels);
            if (!std::isfinite(static_cast<double>(loss.value()[0]))) {
                throw std::runtime_error("finetune: non-finite loss at epoch " +
                                         std::to_string(epoch));
            }
            backward(loss);
            opt.step(lr);
            loss_sum += loss.value()[0];
            ++steps;
        }
        if (steps == 0) throw std::runtime_error("finetune: train split has no full batches");

        const EvalMetrics val = evaluate(model, samples, split.val);
        const double mean_loss = loss_sum / steps;
        result.train_loss_history.push_back(mean_loss);
        result.val_acc_history.push_back(val.top1);
        write_jsonl(metrics, {{"epoch", epoch},
                              {"split", "val"},
                              {"top1", val.top1},
                              {"ce", val.cross_entropy},
                              {"train_loss", mean_loss},
                              {"lr", lr}});
        if (result.best_epoch < 0 || val.top1 > result.best_val_acc) {
            result.best_val_acc = val.top1;
            result.best_epoch = epoch;
            CheckpointHeader header{1, "cls", epoch, cfg.resolved(),
                                    {{"val_top1", val.top1}, {"val_ce", val.cross_entropy}}};
            save_checkpoint(model.store, checkpoint_subdir(out_dir, "best"), header);
        }
        if (log) {
            (*log) << "finetune epoch " << epoch << " train_loss " << mean_loss << " val_top1 "
                   << val.top1 << "\n";
        }
    }

    // Test metrics come from the best-validation checkpoint.
    load_checkpoint(model.store, checkpoint_subdir(out_dir, "best"));
    result.test_metrics = evaluate(model, samples, split.test);
    write_jsonl(metrics, {{"epoch", result.best_epoch},
                          {"split", "test"},
                          {"top1", result.test_metrics.top1},
                          {"ce", result.test_metrics.cross_entropy}});

    CheckpointHeader header{1,
                            "cls",
                            cfg.cls_train.epochs - 1,
                            cfg.resolved(),
                            {{"best_val_top1", result.best_val_acc},
                             {"test_top1", result.test_metrics.top1},
                             {"test_ce", result.test_metrics.cross_entropy}}};
    save_checkpoint(model.store, checkpoint_subdir(out_dir, "final"), header);
    return result;
}

// ---------------------------------------------------------------------------
// Channel contribution
// ---------------------------------------------------------------------------

std::vector<double> channel_contribution(const Tensor<F>& projection_weight, double performance) {
    const Index C = projection_weight.dim(0), D = projection_weight.dim(1);
    std::vector<double> scores(static_cast<std::size_t>(C), 0.0);
    double max_score = 0.0;
    for (Index c = 0; c < C; ++c) {
        double s = 0;
        for (Index j = 0; j < D; ++j) {
            s += std::abs(static_cast<double>(projection_weight.at2(c, j)));
        }
        s /= static_cast<double>(D);
        scores[static_cast<std::size_t>(c)] = s;
        max_score = std::max(max_score, s);
    }
    if (max_score <= 0.0) {
        throw std::invalid_argument("channel_contribution: all-zero projection weights");
    }
    for (double& s : scores) s = s / max_score * performance;
    return scores;
}

std::vector<Index> select_top_channels(const std::vector<double>& scores, Index k) {
    if (k > static_cast<Index>(scores.size())) {
        throw std::invalid_argument("select_top_channels: k exceeds channel count");
    }
    std::vector<Index> order(scores.size());
    std::iota(order.begin(), order.end(), Index(0));
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
        return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    });
    order.resize(static_cast<std::size_t>(k));
    return order;
}

// ---------------------------------------------------------------------------
// Stage runner
// ---------------------------------------------------------------------------

namespace {

void require_path(const std::string& path, const std::string& what) {
    if (path.empty()) {
        throw std::invalid_argument("run: stage requires " + what + " (config paths)");
    }
    if (!std::filesystem::exists(path)) {
        throw std::invalid_argument("run: " + what + " '" + path + "' does not exist");
    }
}

std::string out_dir_or(const RunConfig& cfg, const char* fallback) {
    return cfg.paths.out.empty() ? std::string(fallback) : cfg.paths.out;
}

void write_resolved_config(const RunConfig& cfg, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir + "/resolved-config.json", std::ios::trunc);
    out << cfg.resolved().dump(2) << "\n";
}

int run_single(const RunConfig& cfg, std::ostream& log);

int run_sweep(const RunConfig& cfg, std::ostream& log) {
    json base = cfg.resolved();
    base.erase("sweep");

    std::vector<std::pair<std::string, std::vector<json>>> axes(cfg.sweep.begin(),
                                                                cfg.sweep.end());
    std::vector<std::size_t> counter(axes.size(), 0);
    const std::string root = out_dir_or(cfg, "out");
    int status = 0;
    while (true) {
        json combo = base;
        std::string tag;
        for (std::size_t a = 0; a < axes.size(); ++a) {
            const json& value = axes[a].second[counter[a]];
            combo = apply_override(combo, axes[a].first, value);
            std::string key = axes[a].first;
            std::replace(key.begin(), key.end(), '.', '_');
            tag += (tag.empty() ? "" : "_") + key + "=" + value.dump();
        }
        combo = apply_override(combo, "paths.out", json(root + "/sweep_" + tag));
        RunConfig sub = parse_config_json(combo);
        log << "sweep run: " << tag << "\n";
        status = std::max(status, run_single(sub, log));

        std::size_t a = 0;
        for (; a < axes.size(); ++a) {
            if (++counter[a] < axes[a].second.size()) break;
            counter[a] = 0;
        }
        if (a == axes.size()) break;
    }
    return status;
}

int run_gradcheck(const RunConfig& cfg, std::ostream& log);

int run_single(const RunConfig& cfg, std::ostream& log) {
    const std::string out_dir = out_dir_or(cfg, "out");

    if (cfg.stage == "synth") {
        write_resolved_config(cfg, out_dir);
        Recording rec = generate_synthetic(cfg.synthetic);
        save_recording(rec, out_dir + "/synthetic.duin");
        log << "wrote " << out_dir << "/synthetic.duin (" << rec.n_channels() << " ch, "
            << rec.n_samples() << " samples at " << rec.sample_rate_hz << " Hz, "
            << rec.trials.size() << " trials)\n";
        return 0;
    }
    if (cfg.stage == "preprocess") {
        require_path(cfg.paths.recording, "paths.recording");
        write_resolved_config(cfg, out_dir);
        Recording rec = load_recording(cfg.paths.recording);
        Recording out = run_pipeline(rec, cfg.preprocess);
        save_recording(out, out_dir + "/preprocessed.duin");
        log << "wrote " << out_dir << "/preprocessed.duin (" << out.n_channels() << " ch at "
            << out.sample_rate_hz << " Hz)\n";
        return 0;
    }
    if (cfg.stage == "train-vqvae") {
        require_path(cfg.paths.recording, "paths.recording");
        write_resolved_config(cfg, out_dir);
        Recording rec = load_recording(cfg.paths.recording);
        VqvaeTrainResult result = train_vqvae(cfg, rec, out_dir, &log);
        log << "vqvae done: best loss " << result.best_loss << " at epoch " << result.best_epoch
            << "\n";
        return 0;
    }
    if (cfg.stage == "train-mae") {
        require_path(cfg.paths.recording, "paths.recording");
        require_path(cfg.paths.vqvae_checkpoint, "paths.vqvae_checkpoint");
        write_resolved_config(cfg, out_dir);
        Recording rec = load_recording(cfg.paths.recording);
        MaeTrainResult result = train_mae(cfg, rec, cfg.paths.vqvae_checkpoint, out_dir, &log);
        log << "mae done: best masked_top1 " << result.best_top1 << " at epoch "
            << result.best_epoch << "\n";
        return 0;
    }
    if (cfg.stage == "finetune") {
        require_path(cfg.paths.recording, "paths.recording");
        const InitMode mode = init_mode_from_string(cfg.init_mode);
        if (mode == InitMode::vqvae || mode == InitMode::vqvae_vq) {
            require_path(cfg.paths.vqvae_checkpoint, "paths.vqvae_checkpoint");
        }
        if (mode == InitMode::mae) require_path(cfg.paths.mae_checkpoint, "paths.mae_checkpoint");
        write_resolved_config(cfg, out_dir);
        Recording rec = load_recording(cfg.paths.recording);
        FinetuneResult result = finetune(cfg, rec, out_dir, &log);
        log << "finetune done: best val_top1 " << result.best_val_acc << ", test_top1 "
            << result.test_metrics.top1 << "\n";
        return 0;
    }
    if (cfg.stage == "eval") {
        require_path(cfg.paths.recording, "paths.recording");
        require_path(cfg.paths.checkpoint, "paths.checkpoint");
        write_resolved_config(cfg, out_dir);
        Recording rec = load_recording(cfg.paths.recording);
        std::vector<Sample> samples = extract_trial_samples(rec, rec.trials, cfg.window_s);
        SplitResult split = split_dataset(samples, cfg.split);
        const Index n_patches = cfg.encoder.n_patches(samples[0].data.dim(1));
        Index n_classes = 0;
        for (const Sample& s : samples) n_classes = std::max<Index>(n_classes, *s.label + 1);
        ClsModel<F> model(cfg.encoder, cfg.quantizer, n_patches, n_classes,
                          cfg.init_mode == "vqvae_vq", cfg.head_hidden, cfg.seed);
        LoadReport report = load_checkpoint(model.store, cfg.paths.checkpoint);
        if (!report.missing.empty()) {
            throw std::runtime_error("eval: checkpoint missing tensor " + report.missing.front());
        }
        EvalMetrics metrics = evaluate(model, samples, split.test);
        json out = {{"split", "test"},
                    {"top1", metrics.top1},
                    {"ce", metrics.cross_entropy},
                    {"count", metrics.count}};
        std::ofstream mout(out_dir + "/metrics.json", std::ios::trunc);
        mout << out.dump(2) << "\n";
        log << out.dump() << "\n";
        return 0;
    }
    if (cfg.stage == "contrib") {
        require_path(cfg.paths.checkpoint, "paths.checkpoint");
        write_resolved_config(cfg, out_dir);
        // A bare encoder store is enough: any checkpoint carrying encoder.*
        // tensors (cls, vqvae, mae) can be analyzed.
        ParamStore<F> store;
        Rng init = Rng(cfg.seed).child("init.encoder");
        DuinEncoder<F> enc(store, "encoder", cfg.encoder, init);
        LoadReport report = load_checkpoint(store, cfg.paths.checkpoint);
        bool has_proj = false;
        for (const auto& name : report.matched) {
            if (name == "encoder.proj.weight") has_proj = true;
        }
        if (!has_proj) {
            throw std::runtime_error("contrib: checkpoint has no encoder.proj.weight tensor");
        }
        std::vector<double> scores = channel_contribution(enc.channel_projection().value(), 1.0);
        std::vector<Index> order = select_top_channels(scores, static_cast<Index>(scores.size()));
        std::vector<std::string> names(scores.size());
        for (std::size_t c = 0; c < scores.size(); ++c) names[c] = "ch" + std::to_string(c);
        if (!cfg.paths.recording.empty() && std::filesystem::exists(cfg.paths.recording)) {
            Recording rec = load_recording(cfg.paths.recording);
            for (std::size_t c = 0; c < names.size() && c < rec.channels.size(); ++c) {
                names[c] = rec.channels[c].name;
            }
        }
        std::ofstream csv(out_dir + "/contrib.csv", std::ios::trunc);
        csv << "channel_name,score,rank\n";
        std::vector<Index> rank(scores.size());
        for (std::size_t r = 0; r < order.size(); ++r) {
            rank[static_cast<std::size_t>(order[r])] = static_cast<Index>(r);
        }
        for (std::size_t c = 0; c < scores.size(); ++c) {
            csv << names[c] << "," << scores[c] << "," << rank[c] << "\n";
        }
        log << "wrote " << out_dir << "/contrib.csv\n";
        return 0;
    }
    if (cfg.stage == "gradcheck") {
        write_resolved_config(cfg, out_dir);
        return run_gradcheck(cfg, log);
    }
    throw std::invalid_argument("run: unhandled stage " + cfg.stage);
}

int run_gradcheck(const RunConfig& cfg, std::ostream& log) {
    // Composed tiny encoder in f64; the unit suites cover individual ops.
    EncoderConfig tiny;
    tiny.in_channels = 3;
    tiny.patch_samples = 10;
    tiny.proj_dim = 4;
    tiny.conv = {{4, 8, 5, 2, 2}, {8, 4, 3, 1, 1}};
    tiny.model_dim = 4 * conv_out_len(conv_out_len(10, 5, 2, 2), 3, 1, 1);
    tiny.n_layers = 2;
    tiny.ffn_dim = 8;
    tiny.heads = 2;
    tiny.head_dim = 4;
    tiny.t_max = 8;
    tiny.attn_dropout = 0.0;
    tiny.mlp_dropout1 = 0.0;
    tiny.mlp_dropout2 = 0.0;

    ParamStore<double> store;
    Rng init = Rng(cfg.seed).child("gradcheck.init");
    DuinEncoder<double> encoder(store, "encoder", tiny, init);
    // Weights at unit-ish scale keep batch-norm variances away from eps,
    // where curvature would swamp central differences at h = 1e-4.
    Rng redraw = Rng(cfg.seed).child("gradcheck.redraw");
    for (const auto& entry : store.entries()) {
        if (!entry.trainable) continue;
        Var<double> v = entry.var;
        for (Index i = 0; i < v.value().size(); ++i) v.value()[i] = redraw.normal(0.0, 0.5);
    }

    Rng data_rng = Rng(cfg.seed).child("gradcheck.data");
    Tensor<double> batch({2, tiny.in_channels, 30});
    for (Index i = 0; i < batch.size(); ++i) batch[i] = data_rng.normal();
    Tensor<double> target({2 * 3, tiny.model_dim});
    for (Index i = 0; i < target.size(); ++i) target[i] = data_rng.normal();

    std::vector<std::pair<std::string, Var<double>>> params;
    for (const auto& entry : store.entries()) {
        if (entry.trainable) params.emplace_back(entry.name, entry.var);
    }
    auto fn = [&]() {
        Rng fwd(7);
        Var<double> out = encoder.forward(batch, Mode::train, fwd);
        return mse(out, constant(target));
    };
    GradChecker checker(1e-4, 24, cfg.seed);
    GradCheckReport report = checker.check(fn, params);
    log << "gradcheck: " << report.coords_checked << " coordinates, max rel err "
        << report.max_rel_error << " (worst " << report.worst_param << ")\n";
    return report.passed(1e-4) ? 0 : 1;
}

}  // namespace

int run_stage(const RunConfig& cfg, std::ostream& log) {
    if (!cfg.sweep.empty()) return run_sweep(cfg, log);
    return run_single(cfg, log);
}

}  // namespace duin
