#pragma once

#include "duin/ops.hpp"
#include "duin/params.hpp"

#include <string>
#include <vector>

namespace duin {

template <typename T>
struct Linear {
    Var<T> w;  // [in, out]
    Var<T> b;  // [out]

    Linear() = default;
    Linear(ParamStore<T>& store, const std::string& prefix, Index in, Index out, Rng& rng) {
        w = store.add(prefix + ".weight", trunc_normal_init<T>({in, out}, rng));
        b = store.add(prefix + ".bias", Tensor<T>({out}));
    }

    Var<T> forward(const Var<T>& x) const { return linear(x, w, b); }
};

template <typename T>
struct LayerNorm {
    Var<T> gain;
    Var<T> bias;
    T eps = T(1e-5);

    LayerNorm() = default;
    LayerNorm(ParamStore<T>& store, const std::string& prefix, Index dim) {
        gain = store.add(prefix + ".gain", ones<T>({dim}));
        bias = store.add(prefix + ".bias", Tensor<T>({dim}));
    }

    Var<T> forward(const Var<T>& x) const { return layer_norm(x, gain, bias, eps); }
    Var<T> forward_groups(const Var<T>& x, Index group_size) const {
        return layer_norm_groups(x, gain, bias, group_size, eps);
    }
};

/// Batch norm over [B, C, L] with persisted running statistics. The running
/// update is running <- (1 - momentum) * running + momentum * batch, so
/// momentum 0 freezes the statistics.
template <typename T>
struct BatchNorm1d {
    Var<T> gain;
    Var<T> bias;
    Var<T> running_mean;  // non-trainable store entries
    Var<T> running_var;
    double momentum = 0.1;
    T eps = T(1e-5);

    BatchNorm1d() = default;
    BatchNorm1d(ParamStore<T>& store, const std::string& prefix, Index channels,
                double momentum_in = 0.1)
        : momentum(momentum_in) {
        gain = store.add(prefix + ".gain", ones<T>({channels}));
        bias = store.add(prefix + ".bias", Tensor<T>({channels}));
        running_mean = store.add(prefix + ".running_mean", Tensor<T>({channels}), false);
        running_var = store.add(prefix + ".running_var", ones<T>({channels}), false);
    }

    Var<T> forward(const Var<T>& x, Mode mode) const {
        if (mode == Mode::train) {
            Tensor<T> mu, var;
            Var<T> y = batch_norm_train(x, gain, bias, eps, &mu, &var);
            const T m = static_cast<T>(momentum);
            Var<T> rm = running_mean, rv = running_var;  // handles share the nodes
            rm.value().vec() = (T(1) - m) * rm.value().vec() + m * mu.vec();
            rv.value().vec() = (T(1) - m) * rv.value().vec() + m * var.vec();
            return y;
        }
        return batch_norm_infer(x, gain, bias, running_mean.value(), running_var.value(), eps);
    }
};

struct TransformerLayerConfig {
    Index model_dim = 160;
    Index ffn_dim = 320;
    Index heads = 8;
    Index head_dim = 64;
    double attn_dropout = 0.2;
    double mlp_dropout1 = 0.2;
    double mlp_dropout2 = 0.0;
};

/// Pre-norm block with layer-normalized queries and keys inside the
/// attention, per-head-group gains shared across heads.
template <typename T>
struct TransformerLayer {
    TransformerLayerConfig cfg;
    LayerNorm<T> ln_attn, ln_ffn;
    Linear<T> wq, wk, wv, wo;
    LayerNorm<T> ln_q, ln_k;
    Linear<T> ffn1, ffn2;

    TransformerLayer() = default;
    TransformerLayer(ParamStore<T>& store, const std::string& prefix,
                     const TransformerLayerConfig& c, Rng& rng)
        : cfg(c),
          ln_attn(store, prefix + ".ln_attn", c.model_dim),
          ln_ffn(store, prefix + ".ln_ffn", c.model_dim),
          wq(store, prefix + ".wq", c.model_dim, c.heads * c.head_dim, rng),
          wk(store, prefix + ".wk", c.model_dim, c.heads * c.head_dim, rng),
          wv(store, prefix + ".wv", c.model_dim, c.heads * c.head_dim, rng),
          wo(store, prefix + ".wo", c.heads * c.head_dim, c.model_dim, rng),
          ln_q(store, prefix + ".ln_q", c.head_dim),
          ln_k(store, prefix + ".ln_k", c.head_dim),
          ffn1(store, prefix + ".ffn1", c.model_dim, c.ffn_dim, rng),
          ffn2(store, prefix + ".ffn2", c.ffn_dim, c.model_dim, rng) {}

    Var<T> forward(const Var<T>& x, Index batch, Mode mode, Rng& rng,
                   Tensor<T>* probs_out = nullptr) const {
        Var<T> h = ln_attn.forward(x);
        Var<T> q = ln_q.forward_groups(wq.forward(h), cfg.head_dim);
        Var<T> k = ln_k.forward_groups(wk.forward(h), cfg.head_dim);
        Var<T> v = wv.forward(h);
        Var<T> attn = attention(q, k, v, batch, cfg.heads, cfg.head_dim, cfg.attn_dropout, rng,
                                mode, probs_out);
        Var<T> x1 = add(x, wo.forward(attn));
        Var<T> f = ln_ffn.forward(x1);
        Var<T> f1 = dropout(gelu(ffn1.forward(f)), cfg.mlp_dropout1, rng, mode);
        Var<T> f2 = dropout(ffn2.forward(f1), cfg.mlp_dropout2, rng, mode);
        return add(x1, f2);
    }
};

template <typename T>
struct TransformerStack {
    std::vector<TransformerLayer<T>> layers;
    LayerNorm<T> final_ln;

    TransformerStack() = default;
    TransformerStack(ParamStore<T>& store, const std::string& prefix, Index n_layers,
                     const TransformerLayerConfig& c, Rng& rng) {
        layers.reserve(static_cast<std::size_t>(n_layers));
        for (Index i = 0; i < n_layers; ++i) {
            layers.emplace_back(store, prefix + ".layer" + std::to_string(i), c, rng);
        }
        final_ln = LayerNorm<T>(store, prefix + ".final_ln", c.model_dim);
    }

    Var<T> forward(const Var<T>& x, Index batch, Mode mode, Rng& rng) const {
        Var<T> h = x;
        for (const auto& layer : layers) h = layer.forward(h, batch, mode, rng);
        return final_ln.forward(h);
    }
};

}  // namespace duin
