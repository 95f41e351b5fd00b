#pragma once

#include "duin/nn.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace duin {

struct ConvSpec {
    Index in_ch = 0, out_ch = 0, kernel = 0, stride = 1, padding = 0;
};

struct DeconvSpec {
    Index in_ch = 0, out_ch = 0, kernel = 0, stride = 1, padding = 0, output_padding = 0;
};

/// Du-IN Encoder geometry. Defaults are the paper-scale configuration:
/// 100-sample patches, projection to 16 channels, conv chain 16-128-128-16
/// reducing 100 -> 10, model dim 160 = 16 x 10, 8-layer transformer.
struct EncoderConfig {
    Index in_channels = 10;
    Index patch_samples = 100;  // W
    Index proj_dim = 16;
    std::vector<ConvSpec> conv = {{16, 128, 19, 10, 9}, {128, 128, 3, 1, 1}, {128, 16, 3, 1, 1}};
    Index model_dim = 160;
    Index n_layers = 8;
    Index ffn_dim = 320;
    Index heads = 8;
    Index head_dim = 64;
    Index t_max = 40;
    double attn_dropout = 0.2;
    double mlp_dropout1 = 0.2;
    double mlp_dropout2 = 0.0;
    double bn_momentum = 0.1;
    Act conv_activation = Act::gelu;

    Index conv_output_len() const {
        Index len = patch_samples;
        for (const auto& c : conv) len = conv_out_len(len, c.kernel, c.stride, c.padding);
        return len;
    }

    Index n_patches(Index total_samples) const { return total_samples / patch_samples; }

    void validate() const {
        if (in_channels <= 0 || patch_samples <= 0 || proj_dim <= 0 || model_dim <= 0) {
            throw std::invalid_argument("encoder config: nonpositive dimension");
        }
        if (conv.empty()) throw std::invalid_argument("encoder config: empty conv chain");
        if (conv.front().in_ch != proj_dim) {
            throw std::invalid_argument("encoder config: first conv must consume proj_dim channels");
        }
        for (std::size_t i = 1; i < conv.size(); ++i) {
            if (conv[i].in_ch != conv[i - 1].out_ch) {
                throw std::invalid_argument("encoder config: conv channel chain mismatch at layer " +
                                            std::to_string(i));
            }
        }
        const Index flat = conv.back().out_ch * conv_output_len();
        if (flat != model_dim) {
            throw std::invalid_argument(
                "encoder config: flatten(" + std::to_string(conv.back().out_ch) + " x " +
                std::to_string(conv_output_len()) + ") = " + std::to_string(flat) +
                " != model_dim " + std::to_string(model_dim));
        }
        if (heads * head_dim <= 0 || model_dim <= 0 || t_max <= 0) {
            throw std::invalid_argument("encoder config: bad transformer geometry");
        }
    }

    TransformerLayerConfig layer_config() const {
        return {model_dim, ffn_dim, heads, head_dim, attn_dropout, mlp_dropout1, mlp_dropout2};
    }
};

struct QuantizerConfig {
    Index n_codex = 2048;
    Index d_codex = 64;
    double beta = 0.25;
    double decay = 0.99;
    double eps = 1e-5;
    Index reseed_after_epochs = 2;

    void validate() const {
        if (n_codex <= 0 || d_codex <= 0) throw std::invalid_argument("quantizer config: size");
        if (beta < 0.0) throw std::invalid_argument("quantizer config: beta must be >= 0");
        if (decay < 0.0 || decay > 1.0) {
            throw std::invalid_argument("quantizer config: decay must be in [0, 1]");
        }
    }
};

/// Du-IN Regressor geometry: transformer decoder plus a transposed-conv
/// head mapping [d, N] -> [head channels, W*N], then a per-time linear map
/// onto the output channels. Default paddings are the small-padding solution
/// inverting the encoder chain.
struct RegressorConfig {
    Index n_layers = 4;
    std::vector<DeconvSpec> deconv = {{160, 128, 3, 1, 1, 0},
                                      {128, 128, 3, 1, 1, 0},
                                      {128, 128, 10, 10, 0, 0},
                                      {128, 128, 9, 1, 4, 0},
                                      {128, 16, 19, 10, 9, 9}};
    Index out_channels = 10;
    bool add_temporal = true;

    Index upsampled_len(Index n_patches) const {
        Index len = n_patches;
        for (const auto& d : deconv) {
            len = conv_transpose_out_len(len, d.kernel, d.stride, d.padding, d.output_padding);
        }
        return len;
    }

    void validate(const EncoderConfig& enc) const {
        if (deconv.empty()) throw std::invalid_argument("regressor config: empty deconv chain");
        if (deconv.front().in_ch != enc.model_dim) {
            throw std::invalid_argument("regressor config: head must consume model_dim channels");
        }
        for (std::size_t i = 1; i < deconv.size(); ++i) {
            if (deconv[i].in_ch != deconv[i - 1].out_ch) {
                throw std::invalid_argument("regressor config: deconv channel chain mismatch");
            }
        }
        // The chain must scale token count N to exactly W*N samples.
        const Index probe = 3;
        if (upsampled_len(probe) != probe * enc.patch_samples) {
            throw std::invalid_argument("regressor config: deconv chain maps N to " +
                                        std::to_string(upsampled_len(probe)) + " for N = 3, want " +
                                        std::to_string(probe * enc.patch_samples));
        }
    }
};

/// Parameter-free sinusoidal position table [t_max, d].
template <typename T>
Tensor<T> sinusoidal_table(Index t_max, Index dim) {
    Tensor<T> table({t_max, dim});
    for (Index pos = 0; pos < t_max; ++pos) {
        for (Index j = 0; j < dim; ++j) {
            const double exponent = static_cast<double>(2 * (j / 2)) / static_cast<double>(dim);
            const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
            table.at2(pos, j) = static_cast<T>((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    }
    return table;
}

/// Non-overlapping patch segmentation: [C, T] -> [N, C, W]; the trailing
/// remainder is discarded.
template <typename T>
Tensor<T> patchify(const Tensor<T>& sample, Index window) {
    if (sample.rank() != 2) throw std::invalid_argument("patchify: want [C, T] sample");
    const Index C = sample.dim(0), total = sample.dim(1);
    if (total < window) {
        throw std::invalid_argument("patchify: sample length " + std::to_string(total) +
                                    " shorter than window " + std::to_string(window));
    }
    const Index N = total / window;
    Tensor<T> out({N, C, window});
    for (Index i = 0; i < N; ++i) {
        out.item_mat(i, C, window) = sample.mat().middleCols(i * window, window);
    }
    return out;
}

/// Batch version: [B, C, T] -> [B*N, C, W], patches of item b contiguous.
template <typename T>
Tensor<T> patchify_batch(const Tensor<T>& batch, Index window) {
    if (batch.rank() != 3) throw std::invalid_argument("patchify_batch: want [B, C, T]");
    const Index B = batch.dim(0), C = batch.dim(1), total = batch.dim(2);
    const Index N = total / window;
    if (N < 1) throw std::invalid_argument("patchify_batch: sample shorter than one window");
    Tensor<T> out({B * N, C, window});
    for (Index b = 0; b < B; ++b) {
        auto src = batch.item_mat(b, C, total);
        for (Index i = 0; i < N; ++i) {
            out.item_mat(b * N + i, C, window) = src.middleCols(i * window, window);
        }
    }
    return out;
}

/// The Du-IN Encoder: channel projection, conv blocks with batch norm, patch
/// flattening, temporal embeddings, LN-Q/K transformer.
template <typename T>
class DuinEncoder {
public:
    DuinEncoder(ParamStore<T>& store, const std::string& prefix, const EncoderConfig& cfg,
                Rng& rng)
        : cfg_(cfg) {
        cfg.validate();
        proj_w_ = store.add(prefix + ".proj.weight",
                            trunc_normal_init<T>({cfg.in_channels, cfg.proj_dim}, rng));
        proj_b_ = store.add(prefix + ".proj.bias", Tensor<T>({cfg.proj_dim}));
        for (std::size_t i = 0; i < cfg.conv.size(); ++i) {
            const auto& c = cfg.conv[i];
            const std::string cp = prefix + ".conv" + std::to_string(i);
            conv_w_.push_back(
                store.add(cp + ".weight", trunc_normal_init<T>({c.out_ch, c.in_ch, c.kernel}, rng)));
            conv_b_.push_back(store.add(cp + ".bias", Tensor<T>({c.out_ch})));
            bn_.emplace_back(store, cp + ".bn", c.out_ch, cfg.bn_momentum);
        }
        transformer_ = TransformerStack<T>(store, prefix + ".transformer", cfg.n_layers,
                                           cfg.layer_config(), rng);
        temporal_ = sinusoidal_table<T>(cfg.t_max, cfg.model_dim);
    }

    const EncoderConfig& config() const { return cfg_; }
    const Tensor<T>& temporal_table() const { return temporal_; }
    const Var<T>& channel_projection() const { return proj_w_; }

    /// Patches [P, C, W] -> embeddings [P, d].
    Var<T> spatial_encode(const Var<T>& patches, Mode mode) const {
        if (patches.value().dim(1) != cfg_.in_channels) {
            throw std::invalid_argument("spatial_encode: got " +
                                        std::to_string(patches.value().dim(1)) +
                                        " channels, config says " +
                                        std::to_string(cfg_.in_channels));
        }
        Var<T> x = channel_project(patches, proj_w_, proj_b_);
        for (std::size_t i = 0; i < conv_w_.size(); ++i) {
            x = conv1d(x, conv_w_[i], conv_b_[i], cfg_.conv[i].stride, cfg_.conv[i].padding);
            x = bn_[i].forward(x, mode);
            x = activation(x, cfg_.conv_activation);
        }
        const Index P = x.value().dim(0);
        return reshape(x, {P, cfg_.model_dim});
    }

    /// Adds e_t_i to row i of each sample's N-row block.
    Var<T> add_temporal(const Var<T>& patch_embeddings, Index batch) const {
        const Index rows = patch_embeddings.value().dim(0);
        const Index N = rows / batch;
        if (N > cfg_.t_max) {
            throw std::invalid_argument("add_temporal: " + std::to_string(N) +
                                        " patches exceed t_max " + std::to_string(cfg_.t_max));
        }
        Tensor<T> tiled({rows, cfg_.model_dim});
        for (Index r = 0; r < rows; ++r) {
            tiled.mat().row(r) = temporal_.mat().row(r % N);
        }
        return add_constant(patch_embeddings, tiled);
    }

    Var<T> transformer_forward(const Var<T>& tokens, Index batch, Mode mode, Rng& rng) const {
        return transformer_.forward(tokens, batch, mode, rng);
    }

    /// Full pass: [B, C, T] -> [B*N, d].
    Var<T> forward(const Tensor<T>& batch_data, Mode mode, Rng& rng) const {
        const Index B = batch_data.dim(0);
        Var<T> patches = constant(patchify_batch(batch_data, cfg_.patch_samples));
        Var<T> embedded = spatial_encode(patches, mode);
        Var<T> tokens = add_temporal(embedded, B);
        return transformer_forward(tokens, B, mode, rng);
    }

    const TransformerStack<T>& transformer() const { return transformer_; }

private:
    EncoderConfig cfg_;
    Var<T> proj_w_, proj_b_;
    std::vector<Var<T>> conv_w_, conv_b_;
    std::vector<BatchNorm1d<T>> bn_;
    TransformerStack<T> transformer_;
    Tensor<T> temporal_;
};

/// Embedding-to-codex and codex-to-embedding maps around the quantizer.
template <typename T>
struct CodexProjections {
    Linear<T> enc1, enc2, emb;

    CodexProjections() = default;
    CodexProjections(ParamStore<T>& store, const std::string& prefix, Index model_dim,
                     Index d_codex, Rng& rng)
        : enc1(store, prefix + ".proj_enc1", model_dim, model_dim, rng),
          enc2(store, prefix + ".proj_enc2", model_dim, d_codex, rng),
          emb(store, prefix + ".proj_emb", d_codex, model_dim, rng) {}

    Var<T> to_codex_space(const Var<T>& e) const {
        return enc2.forward(tanh_act(enc1.forward(e)));
    }
    Var<T> to_embedding(const Var<T>& z) const { return emb.forward(z); }
};

template <typename T>
struct QuantizeResult {
    std::vector<Index> indices;  // z_i per row
    Tensor<T> z_q;               // [P, d_codex], raw codex rows
};

/// EMA-maintained codex with l2-normalized nearest-neighbor lookup.
template <typename T>
class VectorQuantizer {
public:
    VectorQuantizer(ParamStore<T>& store, const std::string& prefix, const QuantizerConfig& cfg,
                    Rng& rng)
        : cfg_(cfg) {
        cfg.validate();
        Tensor<T> init = normal_init<T>({cfg.n_codex, cfg.d_codex}, rng, 0.0,
                                        1.0 / std::sqrt(static_cast<double>(cfg.d_codex)));
        codex_ = store.add(prefix + ".codex", init, false);
        ema_cluster_ = store.add(prefix + ".ema_cluster_size", ones<T>({cfg.n_codex}), false);
        ema_sum_ = store.add(prefix + ".ema_embed_sum", init, false);
        usage_.assign(static_cast<std::size_t>(cfg.n_codex), 0);
        last_used_epoch_.assign(static_cast<std::size_t>(cfg.n_codex), 0);
    }

    const QuantizerConfig& config() const { return cfg_; }
    const Tensor<T>& codex() const { return codex_.value(); }
    Tensor<T>& codex() { return codex_.value(); }
    const std::vector<std::int64_t>& usage_counters() const { return usage_; }

    /// Nearest codex row under l2-normalized distance; ties break to the
    /// lowest index. Zero vectors get an eps guard on the norm.
    QuantizeResult<T> quantize(const Tensor<T>& z_c) {
        const Index P = z_c.dim(0), d = z_c.dim(1);
        if (d != cfg_.d_codex) throw std::invalid_argument("quantize: dim mismatch");
        Tensor<T> qn = l2_rows(z_c);
        Tensor<T> cn = l2_rows(codex_.value());
        Tensor<T> sims({P, cfg_.n_codex});
        sims.mat().noalias() = qn.mat() * cn.mat().transpose();
        QuantizeResult<T> res;
        res.indices.resize(static_cast<std::size_t>(P));
        res.z_q = Tensor<T>({P, d});
        for (Index p = 0; p < P; ++p) {
            Index best = 0;
            T best_sim = sims.at2(p, 0);
            for (Index j = 1; j < cfg_.n_codex; ++j) {
                if (sims.at2(p, j) > best_sim) {
                    best_sim = sims.at2(p, j);
                    best = j;
                }
            }
            res.indices[static_cast<std::size_t>(p)] = best;
            res.z_q.mat().row(p) = codex_.value().mat().row(best);
            ++usage_[static_cast<std::size_t>(best)];
            last_used_epoch_[static_cast<std::size_t>(best)] = current_epoch_;
        }
        return res;
    }

    /// decay * state + (1 - decay) * batch statistics; codex rows become
    /// Laplace-smoothed cluster means.
    void ema_update(const QuantizeResult<T>& result, const Tensor<T>& z_c) {
        const T decay = static_cast<T>(cfg_.decay);
        const Index P = z_c.dim(0);
        Tensor<T> counts({cfg_.n_codex});
        Tensor<T> sums({cfg_.n_codex, cfg_.d_codex});
        for (Index p = 0; p < P; ++p) {
            const Index j = result.indices[static_cast<std::size_t>(p)];
            counts[j] += T(1);
            sums.mat().row(j) += z_c.mat().row(p);
        }
        ema_cluster_.value().vec() =
            decay * ema_cluster_.value().vec() + (T(1) - decay) * counts.vec();
        ema_sum_.value().mat() = decay * ema_sum_.value().mat() + (T(1) - decay) * sums.mat();

        const T eps = static_cast<T>(cfg_.eps);
        const T total = ema_cluster_.value().vec().sum();
        const T denom = total + static_cast<T>(cfg_.n_codex) * eps;
        for (Index j = 0; j < cfg_.n_codex; ++j) {
            const T smoothed = (ema_cluster_.value()[j] + eps) / denom * total;
            codex_.value().mat().row(j) = ema_sum_.value().mat().row(j) / smoothed;
        }
    }

    /// Codes idle past the threshold get overwritten with random vectors from
    /// the recent pool [M, d_codex]; returns how many were reseeded.
    Index dead_code_reseed(Index epoch, const Tensor<T>& recent_pool, Rng& rng) {
        if (recent_pool.empty() || recent_pool.dim(0) == 0) return 0;
        Index reseeded = 0;
        for (Index j = 0; j < cfg_.n_codex; ++j) {
            if (epoch - last_used_epoch_[static_cast<std::size_t>(j)] >=
                cfg_.reseed_after_epochs) {
                const Index pick = rng.uniform_int(0, recent_pool.dim(0) - 1);
                codex_.value().mat().row(j) = recent_pool.mat().row(pick);
                ema_sum_.value().mat().row(j) = recent_pool.mat().row(pick);
                ema_cluster_.value()[j] = T(1);
                usage_[static_cast<std::size_t>(j)] = 0;
                last_used_epoch_[static_cast<std::size_t>(j)] = epoch;
                ++reseeded;
            }
        }
        return reseeded;
    }

    void set_epoch(Index epoch) { current_epoch_ = epoch; }

    /// Fraction of codes used since the last reset; clears the counters.
    double utilization_and_reset() {
        Index used = 0;
        for (auto& u : usage_) {
            if (u > 0) ++used;
            u = 0;
        }
        return static_cast<double>(used) / static_cast<double>(cfg_.n_codex);
    }

private:
    Tensor<T> l2_rows(const Tensor<T>& m) const {
        Tensor<T> out = m;
        for (Index r = 0; r < m.dim(0); ++r) {
            const T norm = std::max(out.mat().row(r).norm(), static_cast<T>(1e-12));
            out.mat().row(r) /= norm;
        }
        return out;
    }

    QuantizerConfig cfg_;
    Var<T> codex_, ema_cluster_, ema_sum_;
    std::vector<std::int64_t> usage_;
    std::vector<std::int64_t> last_used_epoch_;
    Index current_epoch_ = 0;
};

/// Commitment and codebook terms of the quantizer loss. With EMA codex
/// maintenance the codebook term carries no gradient; the commit term trains
/// the encoder side.
template <typename T>
struct VqLossTerms {
    Var<T> commit;     // beta * ||z_c - sg[z_q]||^2, in the graph
    T codebook_value;  // ||sg[z_c] - z_q||^2, reported only
};

template <typename T>
VqLossTerms<T> vq_loss_terms(const Var<T>& z_c, const QuantizeResult<T>& result, double beta) {
    VqLossTerms<T> terms;
    terms.codebook_value = (z_c.value().vec() - result.z_q.vec()).squaredNorm();
    terms.commit = scale(sum_squares(sub_constant(z_c, result.z_q)), static_cast<T>(beta));
    return terms;
}

/// Straight-through estimator around the quantizer: forward value is
/// codex_to_emb(z_q); the backward pass treats the quantization step as
/// identity, so gradients reach z_c and none reach the codex.
template <typename T>
Var<T> straight_through(const Var<T>& z_c, const QuantizeResult<T>& result,
                        const CodexProjections<T>& proj) {
    Tensor<T> delta = result.z_q;
    delta.vec() -= z_c.value().vec();
    return proj.to_embedding(add_constant(z_c, delta));
}

/// Du-IN Regressor: transformer decoder over quantized embeddings, then the
/// transposed-conv head back to signal space.
template <typename T>
class Regressor {
public:
    Regressor(ParamStore<T>& store, const std::string& prefix, const RegressorConfig& cfg,
              const EncoderConfig& enc, Rng& rng)
        : cfg_(cfg) {
        cfg.validate(enc);
        decoder_ = TransformerStack<T>(store, prefix + ".decoder", cfg.n_layers,
                                       enc.layer_config(), rng);
        for (std::size_t i = 0; i < cfg.deconv.size(); ++i) {
            const auto& d = cfg.deconv[i];
            const std::string dp = prefix + ".deconv" + std::to_string(i);
            deconv_w_.push_back(
                store.add(dp + ".weight", trunc_normal_init<T>({d.in_ch, d.out_ch, d.kernel}, rng)));
            deconv_b_.push_back(store.add(dp + ".bias", Tensor<T>({d.out_ch})));
        }
        out_w_ = store.add(prefix + ".out.weight",
                           trunc_normal_init<T>({cfg.deconv.back().out_ch, cfg.out_channels}, rng));
        out_b_ = store.add(prefix + ".out.bias", Tensor<T>({cfg.out_channels}));
        temporal_ = sinusoidal_table<T>(enc.t_max, enc.model_dim);
    }

    /// Quantized embeddings [B*N, d] -> reconstruction [B, C, W*N].
    Var<T> forward(const Var<T>& z_emb, Index batch, Mode mode, Rng& rng) const {
        Var<T> tokens = z_emb;
        if (cfg_.add_temporal) {
            const Index rows = tokens.value().dim(0);
            const Index N = rows / batch;
            Tensor<T> tiled({rows, tokens.value().dim(1)});
            for (Index r = 0; r < rows; ++r) tiled.mat().row(r) = temporal_.mat().row(r % N);
            tokens = add_constant(tokens, tiled);
        }
        tokens = decoder_.forward(tokens, batch, mode, rng);
        Var<T> x = tokens_to_channels(tokens, batch);
        for (std::size_t i = 0; i < deconv_w_.size(); ++i) {
            const auto& d = cfg_.deconv[i];
            x = conv1d_transpose(x, deconv_w_[i], deconv_b_[i], d.stride, d.padding,
                                 d.output_padding);
            if (i + 1 < deconv_w_.size()) x = gelu(x);
        }
        return channel_project(x, out_w_, out_b_);
    }

private:
    RegressorConfig cfg_;
    TransformerStack<T> decoder_;
    std::vector<Var<T>> deconv_w_, deconv_b_;
    Var<T> out_w_, out_b_;
    Tensor<T> temporal_;
};

// ---------------------------------------------------------------------------
// Stage models
// ---------------------------------------------------------------------------

template <typename T>
struct VqvaeModel {
    EncoderConfig ecfg;
    QuantizerConfig qcfg;
    RegressorConfig rcfg;
    ParamStore<T> store;
    std::optional<DuinEncoder<T>> encoder;
    std::optional<CodexProjections<T>> proj;
    std::optional<VectorQuantizer<T>> quantizer;
    std::optional<Regressor<T>> regressor;

    VqvaeModel(const EncoderConfig& e, const QuantizerConfig& q, const RegressorConfig& r,
               std::uint64_t seed)
        : ecfg(e), qcfg(q), rcfg(r) {
        Rng enc_rng = Rng(seed).child("init.encoder");
        encoder.emplace(store, "encoder", ecfg, enc_rng);
        Rng proj_rng = Rng(seed).child("init.quantizer.proj");
        proj.emplace(store, "quantizer", ecfg.model_dim, qcfg.d_codex, proj_rng);
        Rng codex_rng = Rng(seed).child("init.quantizer.codex");
        quantizer.emplace(store, "quantizer", qcfg, codex_rng);
        Rng reg_rng = Rng(seed).child("init.regressor");
        regressor.emplace(store, "regressor", rcfg, ecfg, reg_rng);
    }
};

template <typename T>
struct MaeModel {
    EncoderConfig ecfg;
    Index n_codex;
    ParamStore<T> store;
    std::optional<DuinEncoder<T>> encoder;
    Var<T> mask_token;
    std::optional<Linear<T>> token_head;

    MaeModel(const EncoderConfig& e, Index codex_size, std::uint64_t seed)
        : ecfg(e), n_codex(codex_size) {
        Rng enc_rng = Rng(seed).child("init.encoder");
        encoder.emplace(store, "encoder", ecfg, enc_rng);
        Rng tok_rng = Rng(seed).child("init.mask_token");
        mask_token = store.add("mask_token", normal_init<T>({ecfg.model_dim}, tok_rng, 0.0, 0.02));
        Rng head_rng = Rng(seed).child("init.token_head");
        token_head.emplace(store, "token_head", ecfg.model_dim, n_codex, head_rng);
    }
};

enum class InitMode { random, vqvae, vqvae_vq, mae };

inline InitMode init_mode_from_string(const std::string& s) {
    if (s == "random") return InitMode::random;
    if (s == "vqvae") return InitMode::vqvae;
    if (s == "vqvae_vq" || s == "vqvae+vq") return InitMode::vqvae_vq;
    if (s == "mae") return InitMode::mae;
    throw std::invalid_argument("unknown init mode: " + s);
}

inline std::string to_string(InitMode m) {
    switch (m) {
        case InitMode::random: return "random";
        case InitMode::vqvae: return "vqvae";
        case InitMode::vqvae_vq: return "vqvae_vq";
        case InitMode::mae: return "mae";
    }
    return "?";
}

/// Classifier: encoder -> (optional frozen quantizer) -> flatten -> MLP head.
template <typename T>
struct ClsModel {
    EncoderConfig ecfg;
    QuantizerConfig qcfg;
    Index n_patches;
    Index n_classes;
    bool use_quantizer = false;
    ParamStore<T> store;
    std::optional<DuinEncoder<T>> encoder;
    std::optional<CodexProjections<T>> proj;
    std::optional<VectorQuantizer<T>> quantizer;
    std::optional<Linear<T>> head1, head2;

    ClsModel(const EncoderConfig& e, const QuantizerConfig& q, Index patches, Index classes,
             bool with_quantizer, Index hidden, std::uint64_t seed)
        : ecfg(e), qcfg(q), n_patches(patches), n_classes(classes),
          use_quantizer(with_quantizer) {
        Rng enc_rng = Rng(seed).child("init.encoder");
        encoder.emplace(store, "encoder", ecfg, enc_rng);
        if (use_quantizer) {
            Rng proj_rng = Rng(seed).child("init.quantizer.proj");
            proj.emplace(store, "quantizer", ecfg.model_dim, qcfg.d_codex, proj_rng);
            Rng codex_rng = Rng(seed).child("init.quantizer.codex");
            quantizer.emplace(store, "quantizer", qcfg, codex_rng);
        }
        Rng head_rng = Rng(seed).child("init.head");
        head1.emplace(store, "head.fc1", n_patches * ecfg.model_dim, hidden, head_rng);
        head2.emplace(store, "head.fc2", hidden, classes, head_rng);
    }

    /// [B, C, T] -> logits [B, K].
    Var<T> forward(const Tensor<T>& batch_data, Mode mode, Rng& rng) {
        const Index B = batch_data.dim(0);
        Var<T> tokens = encoder->forward(batch_data, mode, rng);
        if (use_quantizer) {
            Var<T> z_c = proj->to_codex_space(tokens);
            QuantizeResult<T> qr = quantizer->quantize(z_c.value());
            tokens = straight_through(z_c, qr, *proj);
        }
        Var<T> flat = reshape(tokens, {B, n_patches * ecfg.model_dim});
        return head2->forward(relu(head1->forward(flat)));
    }
};

}  // namespace duin
