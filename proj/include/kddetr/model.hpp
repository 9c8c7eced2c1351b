#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kddetr/box.hpp"
#include "kddetr/tensor.hpp"

namespace kddetr {

struct ModelConfig {
  int image_size = 32;
  int patch_size = 4;
  int hidden_dim = 64;
  int num_heads = 4;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int ffn_dim = 128;
  int num_queries = 10;
  int num_classes = 3;

  static ModelConfig teacher();
  static ModelConfig student();

  // Throws ConfigError when sizes are inconsistent.
  void validate() const;

  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * 3; }
  // K foreground classes plus no-object (last index).
  int num_logits() const { return num_classes + 1; }
  int no_object() const { return num_classes; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Predictions for a batch of B images and M queries per image.
struct DetrOutputs {
  ag::Tensor class_logits;  // [B, M, K+1]
  ag::Tensor boxes;         // [B, M, 4] cxcywh, strictly inside (0, 1)
  // Per decoder layer, head-averaged cross-attention [B, M, HW]; filled only
  // when requested.
  std::vector<std::vector<double>> cross_attention;

  int batch() const { return class_logits.dim(0); }
  int queries() const { return class_logits.dim(1); }
  int num_logits() const { return class_logits.dim(2); }

  std::span<const double> logits_of(int image) const;
  std::vector<BoxCxCyWH> boxes_of(int image) const;
};

struct Linear {
  ag::Tensor weight;  // [in, out]
  ag::Tensor bias;    // [out]

  ag::Tensor operator()(const ag::Tensor& x) const;
};

struct LayerNormParams {
  ag::Tensor gamma;
  ag::Tensor beta;

  ag::Tensor operator()(const ag::Tensor& x) const;
};

struct MultiHeadAttention {
  Linear q, k, v, out;
  int heads = 1;

  // query [B, M, D], memory [B, S, D] -> [B, M, D]. When `attention` is
  // non-null it receives the head-averaged weights [B, M, S].
  ag::Tensor operator()(const ag::Tensor& query, const ag::Tensor& memory,
                        std::vector<double>* attention = nullptr) const;
};

struct EncoderLayer {
  LayerNormParams norm1, norm2;
  MultiHeadAttention self_attn;
  Linear ffn1, ffn2;
};

struct DecoderLayer {
  LayerNormParams norm1, norm2, norm3;
  MultiHeadAttention self_attn, cross_attn;
  Linear ffn1, ffn2;
};

using NamedTensor = std::pair<std::string, ag::Tensor>;

// Patch-embedding DETR: linear patch projection, sinusoidal 2-D positions,
// pre-norm encoder over HW tokens, pre-norm decoder over any query set,
// class head (K+1) and a 3-layer sigmoid box head.
//
// Move-only: tensors are handles, so an implicit copy would alias the
// parameters of two models. Use clone() for an independent copy.
class DetrModel {
 public:
  DetrModel(const ModelConfig& config, std::uint64_t seed);
  DetrModel(DetrModel&&) = default;
  DetrModel& operator=(DetrModel&&) = default;
  DetrModel(const DetrModel&) = delete;
  DetrModel& operator=(const DetrModel&) = delete;

  DetrModel clone() const;

  const ModelConfig& config() const { return config_; }

  // patches [B, HW, patch_dim] -> features [B, HW, D].
  ag::Tensor encode(const ag::Tensor& patches) const;

  // features [B, HW, D], queries [M, D] -> outputs for M queries per image in
  // input order. Throws ContractError when the query width is not D.
  DetrOutputs decode(const ag::Tensor& features, const ag::Tensor& queries,
                     bool keep_attention = false) const;

  // Detection mode without queries (own learnable embeddings); distillation
  // mode with supplied queries, which are detached so gradients never reach
  // them.
  DetrOutputs forward(const ag::Tensor& patches,
                      const std::optional<ag::Tensor>& queries = std::nullopt,
                      bool keep_attention = false) const;

  const ag::Tensor& query_embeddings() const { return query_embed_; }
  ag::Tensor& query_embeddings() { return query_embed_; }
  const ag::Tensor& positional_table() const { return pos_table_; }

  std::vector<NamedTensor> named_parameters() const;
  std::vector<ag::Tensor> parameters() const;
  std::size_t parameter_count() const;

  void set_requires_grad(bool flag);
  void clear_grad();

 private:
  ModelConfig config_;
  Linear patch_proj_;
  ag::Tensor pos_table_;  // [HW, D], constant
  std::vector<EncoderLayer> encoder_;
  LayerNormParams encoder_norm_;
  std::vector<DecoderLayer> decoder_;
  LayerNormParams decoder_norm_;
  ag::Tensor query_embed_;  // [N, D]
  Linear class_head_;
  Linear box1_, box2_, box3_;
};

// Sinusoidal table [grid*grid, dim]: first half encodes rows, second half
// columns, each as interleaved sin/cos pairs. dim must be divisible by 4.
ag::Tensor sinusoidal_positions(int grid, int dim);

// Images stored HWC (image_size^2 * 3 floats each) -> patches [B, HW, p*p*3]
// with token order row-major over the patch grid.
ag::Tensor patchify(std::span<const std::span<const float>> images, const ModelConfig& config);

}  // namespace kddetr
