#include "kddetr/model.hpp"

#include <cmath>
#include <numbers>

#include "kddetr/errors.hpp"
#include "kddetr/ops.hpp"
#include "kddetr/rng.hpp"

namespace kddetr {

using ag::Tensor;

ModelConfig ModelConfig::teacher() { return ModelConfig{}; }

ModelConfig ModelConfig::student() {
  ModelConfig c;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.ffn_dim = 64;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (image_size <= 0 || patch_size <= 0) fail("image and patch size must be positive");
  if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (hidden_dim <= 0 || num_heads <= 0) fail("hidden_dim and num_heads must be positive");
  if (hidden_dim % num_heads != 0) fail("hidden_dim must be divisible by num_heads");
  if (hidden_dim % 4 != 0) fail("hidden_dim must be divisible by 4 for 2-D positions");
  if (encoder_layers < 0 || decoder_layers < 1) fail("need >= 0 encoder and >= 1 decoder layers");
  if (ffn_dim <= 0) fail("ffn_dim must be positive");
  if (num_queries <= 0) fail("num_queries must be positive");
  if (num_classes <= 0) fail("num_classes must be positive");
}

std::span<const double> DetrOutputs::logits_of(int image) const {
  const std::size_t width = static_cast<std::size_t>(queries()) * num_logits();
  return class_logits.values().subspan(static_cast<std::size_t>(image) * width, width);
}

std::vector<BoxCxCyWH> DetrOutputs::boxes_of(int image) const {
  const int m = queries();
  const auto v = boxes.values().subspan(static_cast<std::size_t>(image) * m * 4,
                                        static_cast<std::size_t>(m) * 4);
  std::vector<BoxCxCyWH> out(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) out[i] = {v[4 * i], v[4 * i + 1], v[4 * i + 2], v[4 * i + 3]};
  return out;
}

Tensor Linear::operator()(const Tensor& x) const { return ag::add(ag::matmul(x, weight), bias); }

Tensor LayerNormParams::operator()(const Tensor& x) const {
  return ag::layer_norm(x, gamma, beta);
}

namespace {

// [B, T, D] -> [B*H, T, D/H]
Tensor split_heads(const Tensor& x, int heads) {
  const int b = x.dim(0), t = x.dim(1), d = x.dim(2);
  return ag::reshape(ag::swap_axes12(ag::reshape(x, {b, t, heads, d / heads})),
                     {b * heads, t, d / heads});
}

// [B*H, T, dh] -> [B, T, H*dh]
Tensor merge_heads(const Tensor& x, int batch, int heads) {
  const int t = x.dim(1), dh = x.dim(2);
  return ag::reshape(ag::swap_axes12(ag::reshape(x, {batch, heads, t, dh})),
                     {batch, t, heads * dh});
}

Tensor ffn(const Linear& l1, const Linear& l2, const Tensor& x) {
  return l2(ag::relu(l1(x)));
}

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Linear linear(int in, int out) {
    const double bound = std::sqrt(6.0 / (in + out));
    std::vector<double> w(static_cast<std::size_t>(in) * out);
    for (auto& x : w) x = rng_.uniform(-bound, bound);
    return {Tensor::from({in, out}, std::move(w), true), Tensor::zeros({out}, true)};
  }

  LayerNormParams norm(int dim) {
    return {Tensor::full({dim}, 1.0, true), Tensor::zeros({dim}, true)};
  }

  MultiHeadAttention attention(int dim, int heads) {
    MultiHeadAttention a;
    a.q = linear(dim, dim);
    a.k = linear(dim, dim);
    a.v = linear(dim, dim);
    a.out = linear(dim, dim);
    a.heads = heads;
    return a;
  }

  Tensor uniform01(ag::Shape shape) {
    std::vector<double> v(ag::numel_of(shape));
    for (auto& x : v) x = rng_.uniform();
    return Tensor::from(std::move(shape), std::move(v), true);
  }

 private:
  Rng rng_;
};

void append(std::vector<NamedTensor>& out, const std::string& name, const Linear& l) {
  out.emplace_back(name + ".weight", l.weight);
  out.emplace_back(name + ".bias", l.bias);
}

void append(std::vector<NamedTensor>& out, const std::string& name, const LayerNormParams& n) {
  out.emplace_back(name + ".gamma", n.gamma);
  out.emplace_back(name + ".beta", n.beta);
}

void append(std::vector<NamedTensor>& out, const std::string& name,
            const MultiHeadAttention& a) {
  append(out, name + ".q", a.q);
  append(out, name + ".k", a.k);
  append(out, name + ".v", a.v);
  append(out, name + ".out", a.out);
}

}  // namespace

Tensor MultiHeadAttention::operator()(const Tensor& query, const Tensor& memory,
                                      std::vector<double>* attention) const {
  const int batch = query.dim(0);
  const int m = query.dim(1);
  const int s = memory.dim(1);
  const int dh = query.dim(2) / heads;
  const Tensor qh = split_heads(q(query), heads);
  const Tensor kh = split_heads(k(memory), heads);
  const Tensor vh = split_heads(v(memory), heads);
  const Tensor weights = ag::softmax(ag::bmm(qh, kh, true), std::sqrt(static_cast<double>(dh)));
  if (attention != nullptr) {
    attention->assign(static_cast<std::size_t>(batch) * m * s, 0.0);
    const auto w = weights.values();
    const double inv_h = 1.0 / heads;
    for (int b = 0; b < batch; ++b)
      for (int h = 0; h < heads; ++h)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < s; ++j) {
            (*attention)[(static_cast<std::size_t>(b) * m + i) * s + j] +=
                inv_h * w[((static_cast<std::size_t>(b) * heads + h) * m + i) * s + j];
          }
  }
  return out(merge_heads(ag::bmm(weights, vh), batch, heads));
}

Tensor sinusoidal_positions(int grid, int dim) {
  if (dim % 4 != 0) throw ConfigError("positional table width must be divisible by 4");
  const int half = dim / 2;
  std::vector<double> table(static_cast<std::size_t>(grid) * grid * dim);
  for (int r = 0; r < grid; ++r) {
    for (int c = 0; c < grid; ++c) {
      double* row = table.data() + (static_cast<std::size_t>(r) * grid + c) * dim;
      const double coords[2] = {(r + 0.5) / grid * 2.0 * std::numbers::pi,
                                (c + 0.5) / grid * 2.0 * std::numbers::pi};
      for (int axis = 0; axis < 2; ++axis) {
        for (int k = 0; k < half / 2; ++k) {
          const double freq = std::pow(10000.0, 2.0 * k / half);
          row[axis * half + 2 * k] = std::sin(coords[axis] / freq);
          row[axis * half + 2 * k + 1] = std::cos(coords[axis] / freq);
        }
      }
    }
  }
  return Tensor::from({grid * grid, dim}, std::move(table));
}

Tensor patchify(std::span<const std::span<const float>> images, const ModelConfig& config) {
  const int s = config.image_size;
  const int p = config.patch_size;
  const int g = config.grid();
  const int pd = config.patch_dim();
  const int batch = static_cast<int>(images.size());
  if (batch == 0) throw DimensionError("patchify: empty batch");
  std::vector<double> out(static_cast<std::size_t>(batch) * g * g * pd);
  for (int b = 0; b < batch; ++b) {
    if (images[b].size() != static_cast<std::size_t>(s) * s * 3) {
      throw ConfigError("patchify: image has " + std::to_string(images[b].size()) +
                        " values, config expects " + std::to_string(s * s * 3));
    }
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx) {
        double* dst = out.data() + ((static_cast<std::size_t>(b) * g + gy) * g + gx) * pd;
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx)
            for (int c = 0; c < 3; ++c) {
              const int y = gy * p + dy;
              const int x = gx * p + dx;
              *dst++ = images[b][(static_cast<std::size_t>(y) * s + x) * 3 + c];
            }
      }
  }
  return Tensor::from({batch, g * g, pd}, std::move(out));
}

DetrModel::DetrModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Initializer init(seed);
  const int d = config_.hidden_dim;
  patch_proj_ = init.linear(config_.patch_dim(), d);
  pos_table_ = sinusoidal_positions(config_.grid(), d);
  for (int i = 0; i < config_.encoder_layers; ++i) {
    EncoderLayer layer;
    layer.norm1 = init.norm(d);
    layer.self_attn = init.attention(d, config_.num_heads);
    layer.norm2 = init.norm(d);
    layer.ffn1 = init.linear(d, config_.ffn_dim);
    layer.ffn2 = init.linear(config_.ffn_dim, d);
    encoder_.push_back(std::move(layer));
  }
  encoder_norm_ = init.norm(d);
  for (int i = 0; i < config_.decoder_layers; ++i) {
    DecoderLayer layer;
    layer.norm1 = init.norm(d);
    layer.self_attn = init.attention(d, config_.num_heads);
    layer.norm2 = init.norm(d);
    layer.cross_attn = init.attention(d, config_.num_heads);
    layer.norm3 = init.norm(d);
    layer.ffn1 = init.linear(d, config_.ffn_dim);
    layer.ffn2 = init.linear(config_.ffn_dim, d);
    decoder_.push_back(std::move(layer));
  }
  decoder_norm_ = init.norm(d);
  // Same distribution as the general distillation points, so those points
  // look like freshly initialised queries to both models.
  query_embed_ = init.uniform01({config_.num_queries, d});
  class_head_ = init.linear(d, config_.num_logits());
  box1_ = init.linear(d, d);
  box2_ = init.linear(d, d);
  box3_ = init.linear(d, 4);
}

DetrModel DetrModel::clone() const {
  DetrModel copy(config_, 0);
  auto src = named_parameters();
  auto dst = copy.named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto values = dst[i].second.mutable_values();
    std::copy(src[i].second.values().begin(), src[i].second.values().end(), values.begin());
    dst[i].second.set_requires_grad(src[i].second.requires_grad());
  }
  return copy;
}

Tensor DetrModel::encode(const Tensor& patches) const {
  if (patches.rank() != 3 || patches.dim(1) != config_.tokens() ||
      patches.dim(2) != config_.patch_dim()) {
    throw ConfigError("encode: patches " + ag::shape_str(patches.shape()) +
                      " do not match image_size/patch_size of the model");
  }
  Tensor x = ag::add(patch_proj_(patches), pos_table_);
  for (const auto& layer : encoder_) {
    const Tensor h = layer.norm1(x);
    x = ag::add(x, layer.self_attn(h, h));
    x = ag::add(x, ffn(layer.ffn1, layer.ffn2, layer.norm2(x)));
  }
  if (!encoder_.empty()) x = encoder_norm_(x);
  return x;
}

DetrOutputs DetrModel::decode(const Tensor& features, const Tensor& queries,
                              bool keep_attention) const {
  if (queries.rank() != 2 || queries.dim(1) != config_.hidden_dim) {
    throw ContractError("decode: query width " + ag::shape_str(queries.shape()) +
                        " does not match hidden_dim " + std::to_string(config_.hidden_dim));
  }
  if (features.rank() != 3 || features.dim(2) != config_.hidden_dim) {
    throw ContractError("decode: features " + ag::shape_str(features.shape()) +
                        " do not match hidden_dim");
  }
  DetrOutputs out;
  Tensor x = ag::expand_leading(queries, features.dim(0));
  for (const auto& layer : decoder_) {
    const Tensor h = layer.norm1(x);
    x = ag::add(x, layer.self_attn(h, h));
    std::vector<double>* attention = nullptr;
    if (keep_attention) attention = &out.cross_attention.emplace_back();
    x = ag::add(x, layer.cross_attn(layer.norm2(x), features, attention));
    x = ag::add(x, ffn(layer.ffn1, layer.ffn2, layer.norm3(x)));
  }
  x = decoder_norm_(x);
  out.class_logits = class_head_(x);
  out.boxes = ag::sigmoid(box3_(ag::relu(box2_(ag::relu(box1_(x))))));
  return out;
}

DetrOutputs DetrModel::forward(const Tensor& patches, const std::optional<Tensor>& queries,
                               bool keep_attention) const {
  const Tensor features = encode(patches);
  if (queries) return decode(features, queries->detach(), keep_attention);
  return decode(features, query_embed_, keep_attention);
}

std::vector<NamedTensor> DetrModel::named_parameters() const {
  std::vector<NamedTensor> out;
  append(out, "patch_proj", patch_proj_);
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    const std::string p = "encoder." + std::to_string(i);
    append(out, p + ".norm1", encoder_[i].norm1);
    append(out, p + ".self_attn", encoder_[i].self_attn);
    append(out, p + ".norm2", encoder_[i].norm2);
    append(out, p + ".ffn1", encoder_[i].ffn1);
    append(out, p + ".ffn2", encoder_[i].ffn2);
  }
  if (!encoder_.empty()) append(out, "encoder_norm", encoder_norm_);
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const std::string p = "decoder." + std::to_string(i);
    append(out, p + ".norm1", decoder_[i].norm1);
    append(out, p + ".self_attn", decoder_[i].self_attn);
    append(out, p + ".norm2", decoder_[i].norm2);
    append(out, p + ".cross_attn", decoder_[i].cross_attn);
    append(out, p + ".norm3", decoder_[i].norm3);
    append(out, p + ".ffn1", decoder_[i].ffn1);
    append(out, p + ".ffn2", decoder_[i].ffn2);
  }
  append(out, "decoder_norm", decoder_norm_);
  out.emplace_back("query_embed", query_embed_);
  append(out, "class_head", class_head_);
  append(out, "box_head.0", box1_);
  append(out, "box_head.1", box2_);
  append(out, "box_head.2", box3_);
  return out;
}

std::vector<Tensor> DetrModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t DetrModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

void DetrModel::set_requires_grad(bool flag) {
  for (auto& t : parameters()) t.set_requires_grad(flag);
}

void DetrModel::clear_grad() {
  for (auto& t : parameters()) t.clear_grad();
}

}  // namespace kddetr
