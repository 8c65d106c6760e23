#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "blacksmith/common.hpp"
#include "blacksmith/nn_kernels.hpp"
#include "blacksmith/rng.hpp"
#include "blacksmith/tensor.hpp"

namespace blacksmith {

enum class Precision { fp32, fp64 };

inline std::string_view to_string(Precision p) {
  return p == Precision::fp32 ? "fp32" : "fp64";
}

// All images are RGB; CIFAR and the synthetic generator both emit 3 planes.
inline constexpr std::size_t kChannels = 3;

// Pre-norm ViT: patch embedding, class token, learned position embeddings,
// `depth` identical blocks, and a head (final norm + linear) that reads the
// class token only. depth is written 2l throughout: truncated passes stop
// after l+1 blocks and freeze masks cover blocks l+1..2l plus the head.
struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 64;
  std::size_t depth = 12;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 10;
  Precision precision = Precision::fp32;

  void validate() const {
    require(image_size > 0 && patch_size > 0 && image_size % patch_size == 0,
            ErrorCategory::config,
            "image_size must be a positive multiple of patch_size");
    require(depth >= 2 && depth % 2 == 0, ErrorCategory::config,
            "depth must be even and >= 2");
    require(num_heads > 0 && embed_dim % num_heads == 0, ErrorCategory::config,
            "embed_dim must be divisible by num_heads");
    require(mlp_ratio >= 1, ErrorCategory::config, "mlp_ratio must be >= 1");
    require(num_classes >= 2, ErrorCategory::config,
            "num_classes must be >= 2");
  }

  std::size_t half_depth() const { return depth / 2; }
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t hidden_dim() const { return mlp_ratio * embed_dim; }
  std::size_t patch_dim() const { return kChannels * patch_size * patch_size; }
};

template <typename T>
struct ImageBatch {
  Tensor<T> pixels;         // [batch, 3, H, W], values in [0,1] pre-attack
  std::vector<int> labels;  // [batch]

  std::size_t size() const { return labels.size(); }
};

// Per-layer outputs v_1..v_k, each [batch, tokens, embed_dim].
template <typename T>
struct ActivationTrace {
  std::vector<Tensor<T>> layers;
};

template <typename T>
struct Model {
  ViTConfig config;
  std::uint64_t seed = 0;
  ParamMap<T> params;
};

using NameSet = std::unordered_set<std::string>;

namespace detail {

inline std::string layer_prefix(std::size_t i) {
  return "layers." + std::to_string(i) + ".";
}

template <typename T>
void add_param(ParamMap<T>& m, const std::string& name,
               std::vector<std::size_t> shape) {
  m.add(name, Tensor<T>(std::move(shape)));
}

}  // namespace detail

// Canonical parameter layout. Checkpoints, optimizers and checksums all
// iterate in this order.
template <typename T>
ParamMap<T> make_param_map(const ViTConfig& cfg) {
  const std::size_t d = cfg.embed_dim;
  const std::size_t dh = cfg.hidden_dim();
  ParamMap<T> m;
  detail::add_param(m, "patch_embed.weight", {d, cfg.patch_dim()});
  detail::add_param(m, "patch_embed.bias", {d});
  detail::add_param(m, "cls_token", {d});
  detail::add_param(m, "pos_embed", {cfg.tokens(), d});
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string p = detail::layer_prefix(i);
    detail::add_param(m, p + "ln1.weight", {d});
    detail::add_param(m, p + "ln1.bias", {d});
    detail::add_param(m, p + "attn.qkv.weight", {3 * d, d});
    detail::add_param(m, p + "attn.qkv.bias", {3 * d});
    detail::add_param(m, p + "attn.proj.weight", {d, d});
    detail::add_param(m, p + "attn.proj.bias", {d});
    detail::add_param(m, p + "ln2.weight", {d});
    detail::add_param(m, p + "ln2.bias", {d});
    detail::add_param(m, p + "mlp.fc1.weight", {dh, d});
    detail::add_param(m, p + "mlp.fc1.bias", {dh});
    detail::add_param(m, p + "mlp.fc2.weight", {d, dh});
    detail::add_param(m, p + "mlp.fc2.bias", {d});
  }
  detail::add_param(m, "head.norm.weight", {d});
  detail::add_param(m, "head.norm.bias", {d});
  detail::add_param(m, "head.fc.weight", {cfg.num_classes, d});
  detail::add_param(m, "head.fc.bias", {cfg.num_classes});
  return m;
}

// Deterministic init: tensors are filled in canonical order from a single
// keyed stream, so equal (cfg, seed) gives bit-identical parameters.
template <typename T>
Model<T> build_model(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model<T> model;
  model.config = cfg;
  model.seed = seed;
  model.params = make_param_map<T>(cfg);
  RngStream rng = RngStream::keyed(seed, "model-init");
  constexpr double std_dev = 0.02;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const std::string& name = model.params.name(i);
    Tensor<T>& t = model.params.tensor(i);
    const bool is_norm_weight =
        name.ends_with("ln1.weight") || name.ends_with("ln2.weight") ||
        name.ends_with("norm.weight");
    const bool is_bias = name.ends_with(".bias");
    if (is_norm_weight) {
      t.fill(T(1));
    } else if (is_bias) {
      t.fill(T(0));
    } else {
      for (auto& v : t) v = T(rng.normal() * std_dev);
    }
  }
  return model;
}

// Freeze set used by the truncated-attack update: blocks l+1..2l plus the
// head. The patch embedding, class token, position embeddings and the first
// l blocks stay trainable.
inline NameSet upper_half_freeze_mask(const ViTConfig& cfg) {
  NameSet mask;
  static constexpr const char* kBlockSuffixes[] = {
      "ln1.weight",       "ln1.bias",       "attn.qkv.weight",
      "attn.qkv.bias",    "attn.proj.weight", "attn.proj.bias",
      "ln2.weight",       "ln2.bias",       "mlp.fc1.weight",
      "mlp.fc1.bias",     "mlp.fc2.weight", "mlp.fc2.bias"};
  for (std::size_t i = cfg.half_depth(); i < cfg.depth; ++i)
    for (const char* s : kBlockSuffixes)
      mask.insert(detail::layer_prefix(i) + s);
  mask.insert("head.norm.weight");
  mask.insert("head.norm.bias");
  mask.insert("head.fc.weight");
  mask.insert("head.fc.bias");
  return mask;
}

template <typename T>
void validate_mask(const Model<T>& model, const NameSet& mask) {
  for (const auto& name : mask)
    require(model.params.contains(name), ErrorCategory::name,
            "freeze mask names unknown tensor '" + name + "'");
}

// FNV-1a over the raw bytes of the named tensors, visited in canonical
// order. Used by tests and the训freeze invariant checks.
template <typename T>
std::uint64_t param_bytes_checksum(const Model<T>& model,
                                   const NameSet& names) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    if (!names.contains(model.params.name(i))) continue;
    const Tensor<T>& t = model.params.tensor(i);
    const unsigned char* bytes =
        reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t b = 0; b < t.numel() * sizeof(T); ++b) {
      h ^= bytes[b];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

namespace detail {

template <typename T>
struct BlockActs {
  Tensor<T> x_in;          // [B,T,D]
  Tensor<T> mean1, rstd1;  // [B,T]
  Tensor<T> ln1;           // [B,T,D]
  Tensor<T> qkv;           // [B,T,3D]
  Tensor<T> att;           // [B,H,T,T]
  Tensor<T> atty;          // [B,T,D]
  Tensor<T> x_mid;         // [B,T,D]
  Tensor<T> mean2, rstd2;  // [B,T]
  Tensor<T> ln2;           // [B,T,D]
  Tensor<T> fc1;           // [B,T,Dh]
  Tensor<T> gelu;          // [B,T,Dh]
};

template <typename T>
struct Workspace {
  std::size_t batch = 0;
  std::size_t depth_k = 0;
  std::vector<BlockActs<T>> blocks;
  Tensor<T> embed;          // [B,T,D]
  Tensor<T> x_final;        // [B,T,D]
  Tensor<T> meanf, rstdf;   // [B]
  Tensor<T> lnf;            // [B,D]
  Tensor<T> logits;         // [B,K]
};

template <typename T>
Workspace<T> make_workspace(const ViTConfig& cfg, std::size_t batch,
                            std::size_t depth_k) {
  const std::size_t tok = cfg.tokens();
  const std::size_t d = cfg.embed_dim;
  const std::size_t dh = cfg.hidden_dim();
  Workspace<T> ws;
  ws.batch = batch;
  ws.depth_k = depth_k;
  ws.blocks.resize(depth_k);
  for (auto& blk : ws.blocks) {
    blk.x_in = Tensor<T>({batch, tok, d});
    blk.mean1 = Tensor<T>({batch, tok});
    blk.rstd1 = Tensor<T>({batch, tok});
    blk.ln1 = Tensor<T>({batch, tok, d});
    blk.qkv = Tensor<T>({batch, tok, 3 * d});
    blk.att = Tensor<T>({batch, cfg.num_heads, tok, tok});
    blk.atty = Tensor<T>({batch, tok, d});
    blk.x_mid = Tensor<T>({batch, tok, d});
    blk.mean2 = Tensor<T>({batch, tok});
    blk.rstd2 = Tensor<T>({batch, tok});
    blk.ln2 = Tensor<T>({batch, tok, d});
    blk.fc1 = Tensor<T>({batch, tok, dh});
    blk.gelu = Tensor<T>({batch, tok, dh});
  }
  ws.embed = Tensor<T>({batch, tok, d});
  ws.x_final = Tensor<T>({batch, tok, d});
  ws.meanf = Tensor<T>({batch});
  ws.rstdf = Tensor<T>({batch});
  ws.lnf = Tensor<T>({batch, d});
  ws.logits = Tensor<T>({batch, cfg.num_classes});
  return ws;
}

constexpr double kLnEps = 1e-5;

// Embedding: class token at index 0, patch projections at 1..N, position
// embeddings added to every token.
template <typename T>
void embed_forward(const Model<T>& model, const ImageBatch<T>& batch,
                   Tensor<T>& out) {
  const ViTConfig& cfg = model.config;
  const std::size_t B = batch.size();
  const std::size_t tok = cfg.tokens();
  const std::size_t d = cfg.embed_dim;
  const std::size_t P = cfg.patch_size;
  const std::size_t G = cfg.grid();
  const std::size_t S = cfg.image_size;
  const std::size_t pd = cfg.patch_dim();
  const Tensor<T>& W = model.params.at("patch_embed.weight");
  const Tensor<T>& bias = model.params.at("patch_embed.bias");
  const Tensor<T>& cls = model.params.at("cls_token");
  const Tensor<T>& pos = model.params.at("pos_embed");

  std::vector<T> flat(pd);
  for (std::size_t b = 0; b < B; ++b) {
    T* row0 = out.data() + (b * tok) * d;
    for (std::size_t e = 0; e < d; ++e) row0[e] = cls[e] + pos[e];
    const T* img = batch.pixels.data() + b * kChannels * S * S;
    for (std::size_t gy = 0; gy < G; ++gy) {
      for (std::size_t gx = 0; gx < G; ++gx) {
        std::size_t f = 0;
        for (std::size_t c = 0; c < kChannels; ++c)
          for (std::size_t py = 0; py < P; ++py)
            for (std::size_t px = 0; px < P; ++px)
              flat[f++] = img[(c * S + gy * P + py) * S + gx * P + px];
        const std::size_t t = 1 + gy * G + gx;
        T* row = out.data() + (b * tok + t) * d;
        const T* posr = pos.data() + t * d;
        for (std::size_t e = 0; e < d; ++e) {
          const T* we = W.data() + e * pd;
          T acc = bias[e];
          for (std::size_t i = 0; i < pd; ++i) acc += we[i] * flat[i];
          row[e] = acc + posr[e];
        }
      }
    }
  }
}

// d_embed -> parameter grads (if grads) and pixel grads (if dpixels).
template <typename T>
void embed_backward(const Model<T>& model, const ImageBatch<T>& batch,
                    const Tensor<T>& d_embed, ParamMap<T>* grads,
                    const NameSet* freeze, Tensor<T>* dpixels) {
  const ViTConfig& cfg = model.config;
  const std::size_t B = batch.size();
  const std::size_t tok = cfg.tokens();
  const std::size_t d = cfg.embed_dim;
  const std::size_t P = cfg.patch_size;
  const std::size_t G = cfg.grid();
  const std::size_t S = cfg.image_size;
  const std::size_t pd = cfg.patch_dim();
  const Tensor<T>& W = model.params.at("patch_embed.weight");

  auto grad_of = [&](const char* name) -> Tensor<T>* {
    if (!grads) return nullptr;
    if (freeze && freeze->contains(name)) return nullptr;
    return &grads->at(name);
  };
  Tensor<T>* dW = grad_of("patch_embed.weight");
  Tensor<T>* db = grad_of("patch_embed.bias");
  Tensor<T>* dcls = grad_of("cls_token");
  Tensor<T>* dpos = grad_of("pos_embed");

  std::vector<T> flat(pd), dflat(pd);
  for (std::size_t b = 0; b < B; ++b) {
    const T* g0 = d_embed.data() + (b * tok) * d;
    if (dcls)
      for (std::size_t e = 0; e < d; ++e) (*dcls)[e] += g0[e];
    if (dpos)
      for (std::size_t e = 0; e < d; ++e) (*dpos)[e] += g0[e];
    const T* img = batch.pixels.data() + b * kChannels * S * S;
    T* dimg = dpixels ? dpixels->data() + b * kChannels * S * S : nullptr;
    for (std::size_t gy = 0; gy < G; ++gy) {
      for (std::size_t gx = 0; gx < G; ++gx) {
        const std::size_t t = 1 + gy * G + gx;
        const T* g = d_embed.data() + (b * tok + t) * d;
        if (dpos) {
          T* dposr = dpos->data() + t * d;
          for (std::size_t e = 0; e < d; ++e) dposr[e] += g[e];
        }
        if (dW) {
          std::size_t f = 0;
          for (std::size_t c = 0; c < kChannels; ++c)
            for (std::size_t py = 0; py < P; ++py)
              for (std::size_t px = 0; px < P; ++px)
                flat[f++] = img[(c * S + gy * P + py) * S + gx * P + px];
          for (std::size_t e = 0; e < d; ++e) {
            T* dWe = dW->data() + e * pd;
            const T ge = g[e];
            for (std::size_t i = 0; i < pd; ++i) dWe[i] += ge * flat[i];
          }
        }
        if (db)
          for (std::size_t e = 0; e < d; ++e) (*db)[e] += g[e];
        if (dimg) {
          std::fill(dflat.begin(), dflat.end(), T(0));
          for (std::size_t e = 0; e < d; ++e) {
            const T* we = W.data() + e * pd;
            const T ge = g[e];
            for (std::size_t i = 0; i < pd; ++i) dflat[i] += ge * we[i];
          }
          std::size_t f = 0;
          for (std::size_t c = 0; c < kChannels; ++c)
            for (std::size_t py = 0; py < P; ++py)
              for (std::size_t px = 0; px < P; ++px)
                dimg[(c * S + gy * P + py) * S + gx * P + px] += dflat[f++];
        }
      }
    }
  }
}

template <typename T>
void run_forward(const Model<T>& model, const ImageBatch<T>& batch,
                 Workspace<T>& ws) {
  const ViTConfig& cfg = model.config;
  const std::size_t B = batch.size();
  const std::size_t tok = cfg.tokens();
  const std::size_t d = cfg.embed_dim;
  const std::size_t dh = cfg.hidden_dim();
  const std::size_t rows = B * tok;
  const T eps = T(kLnEps);

  embed_forward(model, batch, ws.embed);

  const Tensor<T>* x = &ws.embed;
  for (std::size_t i = 0; i < ws.depth_k; ++i) {
    BlockActs<T>& blk = ws.blocks[i];
    const std::string p = layer_prefix(i);
    blk.x_in = *x;
    nn::layernorm_forward(blk.x_in.data(),
                          model.params.at(p + "ln1.weight").data(),
                          model.params.at(p + "ln1.bias").data(),
                          blk.ln1.data(), blk.mean1.data(), blk.rstd1.data(),
                          rows, d, eps);
    nn::linear_forward(blk.ln1.data(),
                       model.params.at(p + "attn.qkv.weight").data(),
                       model.params.at(p + "attn.qkv.bias").data(),
                       blk.qkv.data(), rows, d, 3 * d);
    for (std::size_t b = 0; b < B; ++b)
      nn::attention_forward(blk.qkv.data() + b * tok * 3 * d,
                            blk.att.data() + b * cfg.num_heads * tok * tok,
                            blk.atty.data() + b * tok * d, tok, d,
                            cfg.num_heads);
    // x_mid = x_in + proj(atty)
    nn::linear_forward(blk.atty.data(),
                       model.params.at(p + "attn.proj.weight").data(),
                       model.params.at(p + "attn.proj.bias").data(),
                       blk.x_mid.data(), rows, d, d);
    for (std::size_t j = 0; j < rows * d; ++j) blk.x_mid[j] += blk.x_in[j];

    nn::layernorm_forward(blk.x_mid.data(),
                          model.params.at(p + "ln2.weight").data(),
                          model.params.at(p + "ln2.bias").data(),
                          blk.ln2.data(), blk.mean2.data(), blk.rstd2.data(),
                          rows, d, eps);
    nn::linear_forward(blk.ln2.data(),
                       model.params.at(p + "mlp.fc1.weight").data(),
                       model.params.at(p + "mlp.fc1.bias").data(),
                       blk.fc1.data(), rows, d, dh);
    nn::gelu_forward(blk.fc1.data(), blk.gelu.data(), rows * dh);
    Tensor<T>& x_out =
        (i + 1 < ws.depth_k) ? ws.blocks[i + 1].x_in : ws.x_final;
    nn::linear_forward(blk.gelu.data(),
                       model.params.at(p + "mlp.fc2.weight").data(),
                       model.params.at(p + "mlp.fc2.bias").data(),
                       x_out.data(), rows, d * cfg.mlp_ratio, d);
    for (std::size_t j = 0; j < rows * d; ++j) x_out[j] += blk.x_mid[j];
    x = &x_out;
  }

  // Head reads the class token only.
  Tensor<T> cls_rows({B, d});
  for (std::size_t b = 0; b < B; ++b) {
    const T* src = ws.x_final.data() + b * tok * d;
    T* dst = cls_rows.data() + b * d;
    for (std::size_t e = 0; e < d; ++e) dst[e] = src[e];
  }
  nn::layernorm_forward(cls_rows.data(),
                        model.params.at("head.norm.weight").data(),
                        model.params.at("head.norm.bias").data(), ws.lnf.data(),
                        ws.meanf.data(), ws.rstdf.data(), B, d, eps);
  nn::linear_forward(ws.lnf.data(), model.params.at("head.fc.weight").data(),
                     model.params.at("head.fc.bias").data(), ws.logits.data(),
                     B, d, cfg.num_classes);
}

// Mean cross-entropy over the batch, computed with max subtraction.
template <typename T>
double mean_cross_entropy(const Tensor<T>& logits,
                          const std::vector<int>& labels) {
  const std::size_t B = labels.size();
  const std::size_t K = logits.dim(1);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = logits.data() + b * K;
    T m = z[0];
    for (std::size_t k = 1; k < K; ++k) m = z[k] > m ? z[k] : m;
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      sum += std::exp(static_cast<double>(z[k] - m));
    total += static_cast<double>(m) + std::log(sum) -
             static_cast<double>(z[labels[b]]);
  }
  return total / static_cast<double>(B);
}

// dlogits = (softmax(logits) - onehot) / B
template <typename T>
void cross_entropy_backward(const Tensor<T>& logits,
                            const std::vector<int>& labels,
                            Tensor<T>& dlogits) {
  const std::size_t B = labels.size();
  const std::size_t K = logits.dim(1);
  nn::softmax_rows(logits.data(), dlogits.data(), B, K);
  const T invB = T(1) / T(B);
  for (std::size_t b = 0; b < B; ++b) {
    T* row = dlogits.data() + b * K;
    row[labels[b]] -= T(1);
    for (std::size_t k = 0; k < K; ++k) row[k] *= invB;
  }
}

// Backward through head and blocks depth_k..1. Parameter grads are skipped
// entirely for frozen names; dpixels, when requested, flows through the
// patch embedding.
template <typename T>
void run_backward(const Model<T>& model, const ImageBatch<T>& batch,
                  Workspace<T>& ws, const Tensor<T>& dlogits,
                  ParamMap<T>* grads, const NameSet* freeze,
                  Tensor<T>* dpixels) {
  const ViTConfig& cfg = model.config;
  const std::size_t B = batch.size();
  const std::size_t tok = cfg.tokens();
  const std::size_t d = cfg.embed_dim;
  const std::size_t dh = cfg.hidden_dim();
  const std::size_t rows = B * tok;

  auto grad_of = [&](const std::string& name) -> T* {
    if (!grads) return nullptr;
    if (freeze && freeze->contains(name)) return nullptr;
    return grads->at(name).data();
  };

  // Head backward.
  Tensor<T> dlnf({B, d});
  nn::linear_backward(ws.lnf.data(), model.params.at("head.fc.weight").data(),
                      dlogits.data(), dlnf.data(), grad_of("head.fc.weight"),
                      grad_of("head.fc.bias"), B, d, cfg.num_classes);
  Tensor<T> cls_rows({B, d});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t e = 0; e < d; ++e)
      cls_rows.data()[b * d + e] = ws.x_final.data()[b * tok * d + e];
  Tensor<T> dcls_rows({B, d});
  nn::layernorm_backward(cls_rows.data(),
                         model.params.at("head.norm.weight").data(),
                         ws.meanf.data(), ws.rstdf.data(), dlnf.data(),
                         dcls_rows.data(), grad_of("head.norm.weight"),
                         grad_of("head.norm.bias"), B, d);

  Tensor<T> dx({B, tok, d});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t e = 0; e < d; ++e)
      dx.data()[b * tok * d + e] = dcls_rows.data()[b * d + e];

  Tensor<T> d_mid({B, tok, d});
  Tensor<T> d_ln2({B, tok, d});
  Tensor<T> d_gelu({B, tok, dh});
  Tensor<T> d_fc1({B, tok, dh});
  Tensor<T> d_atty({B, tok, d});
  Tensor<T> d_qkv({B, tok, 3 * d});
  Tensor<T> d_ln1({B, tok, d});
  std::vector<T> att_scratch(tok);

  for (std::size_t i = ws.depth_k; i-- > 0;) {
    BlockActs<T>& blk = ws.blocks[i];
    const std::string p = layer_prefix(i);
    // x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))));  dx is d(x_out).
    d_mid = dx;  // residual path
    d_gelu.zero();
    nn::linear_backward(blk.gelu.data(),
                        model.params.at(p + "mlp.fc2.weight").data(),
                        dx.data(), d_gelu.data(),
                        grad_of(p + "mlp.fc2.weight"),
                        grad_of(p + "mlp.fc2.bias"), rows, dh, d);
    d_fc1.zero();
    nn::gelu_backward(blk.fc1.data(), d_gelu.data(), d_fc1.data(), rows * dh);
    d_ln2.zero();
    nn::linear_backward(blk.ln2.data(),
                        model.params.at(p + "mlp.fc1.weight").data(),
                        d_fc1.data(), d_ln2.data(),
                        grad_of(p + "mlp.fc1.weight"),
                        grad_of(p + "mlp.fc1.bias"), rows, d, dh);
    nn::layernorm_backward(blk.x_mid.data(),
                           model.params.at(p + "ln2.weight").data(),
                           blk.mean2.data(), blk.rstd2.data(), d_ln2.data(),
                           d_mid.data(), grad_of(p + "ln2.weight"),
                           grad_of(p + "ln2.bias"), rows, d);

    // x_mid = x_in + proj(atty);  d_mid is d(x_mid).
    dx = d_mid;  // residual path
    d_atty.zero();
    nn::linear_backward(blk.atty.data(),
                        model.params.at(p + "attn.proj.weight").data(),
                        d_mid.data(), d_atty.data(),
                        grad_of(p + "attn.proj.weight"),
                        grad_of(p + "attn.proj.bias"), rows, d, d);
    d_qkv.zero();
    for (std::size_t b = 0; b < B; ++b)
      nn::attention_backward(blk.qkv.data() + b * tok * 3 * d,
                             blk.att.data() + b * cfg.num_heads * tok * tok,
                             d_atty.data() + b * tok * d,
                             d_qkv.data() + b * tok * 3 * d,
                             att_scratch.data(), tok, d, cfg.num_heads);
    d_ln1.zero();
    nn::linear_backward(blk.ln1.data(),
                        model.params.at(p + "attn.qkv.weight").data(),
                        d_qkv.data(), d_ln1.data(),
                        grad_of(p + "attn.qkv.weight"),
                        grad_of(p + "attn.qkv.bias"), rows, d, 3 * d);
    nn::layernorm_backward(blk.x_in.data(),
                           model.params.at(p + "ln1.weight").data(),
                           blk.mean1.data(), blk.rstd1.data(), d_ln1.data(),
                           dx.data(), grad_of(p + "ln1.weight"),
                           grad_of(p + "ln1.bias"), rows, d);
  }

  embed_backward(model, batch, dx, grads, freeze, dpixels);
}

}  // namespace detail

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  std::optional<ActivationTrace<T>> trace;
};

// Truncated forward: patch embedding, blocks 1..depth_k, head on the class
// token. depth_k == depth is the full network.
template <typename T>
ForwardResult<T> forward(const Model<T>& model, const ImageBatch<T>& batch,
                         std::size_t depth_k, bool capture_trace = false) {
  require(depth_k >= 1 && depth_k <= model.config.depth, ErrorCategory::bounds,
          "depth_k " + std::to_string(depth_k) + " outside [1, " +
              std::to_string(model.config.depth) + "]");
  auto ws = detail::make_workspace<T>(model.config, batch.size(), depth_k);
  detail::run_forward(model, batch, ws);
  ForwardResult<T> out;
  out.logits = std::move(ws.logits);
  if (capture_trace) {
    ActivationTrace<T> trace;
    trace.layers.reserve(depth_k);
    for (std::size_t i = 1; i < depth_k; ++i)
      trace.layers.push_back(ws.blocks[i].x_in);
    trace.layers.push_back(ws.x_final);
    out.trace = std::move(trace);
  }
  return out;
}

template <typename T>
struct LossInputGrad {
  double loss = 0.0;
  Tensor<T> grad;  // shaped like batch.pixels
};

// Mean cross-entropy of the depth_k-truncated forward and its exact
// reverse-mode gradient with respect to the input pixels.
template <typename T>
LossInputGrad<T> loss_and_input_grad(const Model<T>& model,
                                     const ImageBatch<T>& batch,
                                     std::size_t depth_k) {
  require(depth_k >= 1 && depth_k <= model.config.depth, ErrorCategory::bounds,
          "depth_k " + std::to_string(depth_k) + " outside [1, " +
              std::to_string(model.config.depth) + "]");
  auto ws = detail::make_workspace<T>(model.config, batch.size(), depth_k);
  detail::run_forward(model, batch, ws);
  LossInputGrad<T> out;
  out.loss = detail::mean_cross_entropy(ws.logits, batch.labels);
  out.grad = Tensor<T>(batch.pixels.shape());
  Tensor<T> dlogits(ws.logits.shape());
  detail::cross_entropy_backward(ws.logits, batch.labels, dlogits);
  detail::run_backward(model, batch, ws, dlogits,
                       static_cast<ParamMap<T>*>(nullptr), nullptr, &out.grad);
  return out;
}

template <typename T>
struct LossParamGrads {
  double loss = 0.0;
  ParamMap<T> grads;  // entries only for non-frozen names
};

// Full-depth loss and parameter gradients. Frozen names get no gradient
// entry and their accumulation work is skipped; the backward pass still
// propagates through them so earlier layers see the exact full-depth
// gradient.
template <typename T>
LossParamGrads<T> loss_and_param_grads(const Model<T>& model,
                                       const ImageBatch<T>& batch,
                                       const NameSet& freeze_mask) {
  validate_mask(model, freeze_mask);
  auto ws = detail::make_workspace<T>(model.config, batch.size(),
                                      model.config.depth);
  detail::run_forward(model, batch, ws);
  LossParamGrads<T> out;
  out.loss = detail::mean_cross_entropy(ws.logits, batch.labels);
  ParamMap<T> full = make_param_map<T>(model.config);
  Tensor<T> dlogits(ws.logits.shape());
  detail::cross_entropy_backward(ws.logits, batch.labels, dlogits);
  detail::run_backward(model, batch, ws, dlogits, &full, &freeze_mask,
                       static_cast<Tensor<T>*>(nullptr));
  for (std::size_t i = 0; i < full.size(); ++i) {
    const std::string& name = full.name(i);
    if (!freeze_mask.contains(name))
      out.grads.add(name, std::move(full.tensor(i)));
  }
  return out;
}

}  // namespace blacksmith
