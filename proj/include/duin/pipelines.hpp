#pragma once

#include "duin/checkpoint.hpp"
#include "duin/config.hpp"
#include "duin/model.hpp"
#include "duin/optim.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace duin {

// Training runs in f32; f64 is reserved for gradient checking.
using F = float;

// ---------------------------------------------------------------------------
// Masked modeling primitives
// ---------------------------------------------------------------------------

/// Uniformly random subset of round(ratio * n) positions.
std::vector<bool> sample_mask(Index n, double ratio, Rng& rng);
std::vector<bool> complement_mask(const std::vector<bool>& mask);

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Stacks samples[idx] into [B, C, T].
Tensor<F> batch_from_samples(const std::vector<Sample>& samples, const std::vector<Index>& idx);

// ---------------------------------------------------------------------------
// Stage 1: VQ-VAE
// ---------------------------------------------------------------------------

struct VqvaeStepStats {
    double loss = 0;        // batch-mean L_vqvae
    double recon_mse = 0;   // per-element reconstruction MSE
    double commit = 0;      // batch-mean commit term (beta applied)
    double codebook = 0;    // batch-mean codebook term (reported, not trained)
    Tensor<F> z_c_values;   // codex-space projections, feeds the reseed pool
};

/// One training transaction: forward, backward, AdamW step, EMA codex update.
VqvaeStepStats vqvae_step(VqvaeModel<F>& model, const Tensor<F>& batch, AdamW<F>& opt, double lr,
                          Rng& rng);

struct VqvaeTrainResult {
    std::vector<double> loss_history;
    std::vector<double> recon_mse_history;
    std::vector<double> utilization_history;
    double best_loss = 0;
    int best_epoch = -1;
};

VqvaeTrainResult train_vqvae(const RunConfig& cfg, const Recording& preprocessed,
                             const std::string& out_dir, std::ostream* log);

// ---------------------------------------------------------------------------
// Stage 2: masked modeling
// ---------------------------------------------------------------------------

/// Codex indices of every patch of the unmasked batch under the frozen
/// VQ-VAE: quantize(to_codex_space(encoder(batch))).
std::vector<Index> target_indices(VqvaeModel<F>& frozen, const Tensor<F>& batch);

struct MaeBatchStats {
    double loss = 0;    // L_M + L_M^sym, batch mean per masked position
    double top1 = 0;    // masked-token accuracy over both passes
    Index masked = 0;   // positions counted
};

/// One masking pass: cross-entropy over codex targets at the masked rows
/// only, mean per masked position.
Var<F> mae_pass_loss(MaeModel<F>& model, const Tensor<F>& batch,
                     const std::vector<Index>& targets, const std::vector<bool>& mask, Rng& rng,
                     Mode mode);

/// Both symmetric passes for an explicit mask over the B*N patch rows.
Var<F> mae_symmetric_loss(MaeModel<F>& model, const Tensor<F>& batch,
                          const std::vector<Index>& targets, const std::vector<bool>& mask,
                          Rng& rng, Mode mode, MaeBatchStats* stats);

/// Both symmetric passes on one batch with freshly drawn per-sample masks.
Var<F> mae_loss(MaeModel<F>& model, const Tensor<F>& batch, const std::vector<Index>& targets,
                double mask_ratio, Rng& rng, Mode mode, MaeBatchStats* stats);

struct MaeTrainResult {
    std::vector<double> loss_history;
    std::vector<double> masked_top1_history;
    double best_top1 = 0;
    int best_epoch = -1;
};

MaeTrainResult train_mae(const RunConfig& cfg, const Recording& preprocessed,
                         const std::string& vqvae_dir, const std::string& out_dir,
                         std::ostream* log);

// ---------------------------------------------------------------------------
// Downstream classification
// ---------------------------------------------------------------------------

/// Builds the classifier for an init mode, loading encoder (and, for
/// vqvae_vq, quantizer) tensors from the given checkpoints.
ClsModel<F> init_classifier(const RunConfig& cfg, Index n_patches, Index n_classes,
                            InitMode mode);

struct EvalMetrics {
    double top1 = 0;
    double cross_entropy = 0;
    Index count = 0;
};

EvalMetrics evaluate(ClsModel<F>& model, const std::vector<Sample>& samples,
                     const std::vector<Index>& subset);

struct FinetuneResult {
    std::vector<double> val_acc_history;
    std::vector<double> train_loss_history;
    double best_val_acc = 0;
    int best_epoch = -1;
    EvalMetrics test_metrics;
};

FinetuneResult finetune(const RunConfig& cfg, const Recording& recording,
                        const std::string& out_dir, std::ostream* log);

// ---------------------------------------------------------------------------
// Channel contribution (spatial-encoder projection analysis)
// ---------------------------------------------------------------------------

/// s_i = (1/D) sum_j |W_ij|, max-normalized, scaled by the performance
/// weight. W is the [C, D] input projection.
std::vector<double> channel_contribution(const Tensor<F>& projection_weight,
                                         double performance = 1.0);

/// Indices of the k largest scores, descending; ties -> lower index first.
std::vector<Index> select_top_channels(const std::vector<double>& scores, Index k);

// ---------------------------------------------------------------------------
// CLI orchestration
// ---------------------------------------------------------------------------

/// Executes one stage (or a sweep of runs); returns a process exit status.
int run_stage(const RunConfig& cfg, std::ostream& log);

}  // namespace duin
