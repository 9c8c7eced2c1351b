#include <cmath>

#include "doctest.h"
#include "kddetr/errors.hpp"
#include "kddetr/model.hpp"
#include "kddetr/ops.hpp"
#include "kddetr/rng.hpp"
#include "kddetr/scene.hpp"

using namespace kddetr;
using ag::Tensor;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.ffn_dim = 32;
  c.num_queries = 6;
  return c;
}

Tensor patches_for(const ModelConfig& c, std::uint64_t seed, int count) {
  SceneSpec spec;
  spec.image_size = c.image_size;
  const auto scenes = generate(seed, count, spec);
  std::vector<std::span<const float>> imgs;
  for (const auto& s : scenes) imgs.emplace_back(s.image);
  return patchify(imgs, c);
}

Tensor random_queries(int m, int d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(m) * d);
  for (auto& x : v) x = rng.uniform();
  return Tensor::from({m, d}, v);
}

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("default geometry: 32x32 image in 4x4 patches gives 64 tokens") {
  const ModelConfig c = ModelConfig::teacher();
  DetrModel m(c, 1);
  const Tensor f = m.encode(patches_for(c, 1, 2));
  CHECK(f.shape() == ag::Shape{2, 64, c.hidden_dim});
  const DetrOutputs out = m.forward(patches_for(c, 1, 2));
  CHECK(out.queries() == 10);
  CHECK(out.num_logits() == 4);
}

TEST_CASE("teacher and student share the query width") {
  CHECK(ModelConfig::teacher().hidden_dim == ModelConfig::student().hidden_dim);
  CHECK(ModelConfig::teacher().num_classes == ModelConfig::student().num_classes);
  CHECK(ModelConfig::student().encoder_layers == 1);
  CHECK(ModelConfig::student().ffn_dim == 64);
}

TEST_CASE("config validation") {
  ModelConfig c = small();
  c.patch_size = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small();
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("encode is deterministic and rejects mismatched images") {
  const ModelConfig c = small();
  DetrModel m(c, 2);
  const Tensor p = patches_for(c, 3, 1);
  CHECK(vals(m.encode(p)) == vals(m.encode(p)));
  ModelConfig other = c;
  other.image_size = 8;
  CHECK_THROWS_AS(m.encode(patches_for(other, 3, 1)), ConfigError);
}

TEST_CASE("zero encoder layers: features are embedded patches plus positions") {
  ModelConfig c = small();
  c.encoder_layers = 0;
  DetrModel m(c, 4);
  const Tensor p = patches_for(c, 5, 1);
  const Tensor f = m.encode(p);
  // Independent recomputation: patches * W + b + pos.
  const auto named = m.named_parameters();
  Tensor w, b;
  for (const auto& [name, t] : named) {
    if (name == "patch_proj.weight") w = t;
    if (name == "patch_proj.bias") b = t;
  }
  REQUIRE(w.defined());
  const int tokens = c.tokens(), pd = c.patch_dim(), d = c.hidden_dim;
  for (int t = 0; t < tokens; ++t) {
    for (int j = 0; j < d; ++j) {
      double acc = b.at(j) + m.positional_table().at(static_cast<std::size_t>(t) * d + j);
      for (int k = 0; k < pd; ++k) {
        acc += p.at(static_cast<std::size_t>(t) * pd + k) * w.at(static_cast<std::size_t>(k) * d + j);
      }
      CHECK(f.at(static_cast<std::size_t>(t) * d + j) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("decode shapes and width check") {
  const ModelConfig c = small();
  DetrModel m(c, 6);
  const Tensor f = m.encode(patches_for(c, 7, 1));
  const DetrOutputs one = m.decode(f, random_queries(1, c.hidden_dim, 1));
  CHECK(one.class_logits.shape() == ag::Shape{1, 1, 4});
  CHECK(one.boxes.shape() == ag::Shape{1, 1, 4});
  const DetrOutputs twenty = m.decode(f, random_queries(20, c.hidden_dim, 1));
  CHECK(twenty.queries() == 20);
  CHECK_THROWS_AS(m.decode(f, random_queries(3, c.hidden_dim + 4, 1)), ContractError);
}

TEST_CASE("boxes lie strictly inside the unit square") {
  const ModelConfig c = small();
  DetrModel m(c, 8);
  const DetrOutputs out = m.decode(m.encode(patches_for(c, 9, 3)), random_queries(30, c.hidden_dim, 2));
  for (double v : out.boxes.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("decoder is permutation equivariant in the queries") {
  const ModelConfig c = small();
  DetrModel m(c, 10);
  const Tensor f = m.encode(patches_for(c, 11, 2));
  const int q = 7, d = c.hidden_dim;
  const Tensor queries = random_queries(q, d, 3);
  const std::vector<int> perm{3, 0, 6, 1, 5, 2, 4};
  std::vector<double> pv;
  for (int i : perm) {
    for (int j = 0; j < d; ++j) pv.push_back(queries.at(static_cast<std::size_t>(i) * d + j));
  }
  const DetrOutputs base = m.decode(f, queries);
  const DetrOutputs permuted = m.decode(f, Tensor::from({q, d}, pv));
  for (int b = 0; b < 2; ++b) {
    for (int k = 0; k < q; ++k) {
      const int src = perm[static_cast<std::size_t>(k)];
      for (int j = 0; j < 4; ++j) {
        const std::size_t at_p = (static_cast<std::size_t>(b) * q + k) * 4 + j;
        const std::size_t at_b = (static_cast<std::size_t>(b) * q + src) * 4 + j;
        CHECK(std::fabs(permuted.class_logits.at(at_p) - base.class_logits.at(at_b)) < 1e-9);
        CHECK(std::fabs(permuted.boxes.at(at_p) - base.boxes.at(at_b)) < 1e-9);
      }
    }
  }
}

TEST_CASE("cross-attention rows sum to one") {
  const ModelConfig c = small();
  DetrModel m(c, 12);
  const DetrOutputs out = m.forward(patches_for(c, 13, 2), std::nullopt, true);
  REQUIRE(out.cross_attention.size() == static_cast<std::size_t>(c.decoder_layers));
  const int hw = c.tokens();
  for (const auto& layer : out.cross_attention) {
    REQUIRE(layer.size() == static_cast<std::size_t>(2 * c.num_queries * hw));
    for (std::size_t r = 0; r < layer.size() / hw; ++r) {
      double total = 0;
      for (int t = 0; t < hw; ++t) total += layer[r * hw + t];
      CHECK(std::fabs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("supplying the model's own queries reproduces detection mode") {
  const ModelConfig c = small();
  DetrModel m(c, 14);
  const Tensor p = patches_for(c, 15, 2);
  const DetrOutputs own = m.forward(p);
  const DetrOutputs given = m.forward(p, m.query_embeddings().clone());
  CHECK(vals(own.class_logits) == vals(given.class_logits));
  CHECK(vals(own.boxes) == vals(given.boxes));
}

TEST_CASE("distillation mode: gradients reach parameters but never the points") {
  const ModelConfig c = small();
  DetrModel m(c, 16);
  Tensor points = random_queries(5, c.hidden_dim, 4);
  points.set_requires_grad(true);
  const DetrOutputs out = m.forward(patches_for(c, 17, 1), points);
  ag::backward(ag::add(ag::sum(out.class_logits), ag::sum(out.boxes)));
  CHECK_FALSE(points.has_grad());
  bool any = false;
  for (const auto& [name, t] : m.named_parameters()) {
    if (name == "query_embed") {
      CHECK_FALSE(t.has_grad());
    } else if (t.has_grad()) {
      any = true;
    }
  }
  CHECK(any);
}

TEST_CASE("clone is independent and identical") {
  const ModelConfig c = small();
  DetrModel m(c, 18);
  DetrModel copy = m.clone();
  const Tensor p = patches_for(c, 19, 1);
  CHECK(vals(m.forward(p).boxes) == vals(copy.forward(p).boxes));
  copy.query_embeddings().mutable_values()[0] += 1.0;
  CHECK(vals(m.forward(p).boxes) != vals(copy.forward(p).boxes));
}

TEST_CASE("sinusoidal positions are bounded and distinct per token") {
  const Tensor pos = sinusoidal_positions(8, 16);
  CHECK(pos.shape() == ag::Shape{64, 16});
  for (double v : pos.values()) CHECK(std::fabs(v) <= 1.0);
  for (int a = 0; a < 64; ++a) {
    for (int b = a + 1; b < 64; ++b) {
      double diff = 0;
      for (int j = 0; j < 16; ++j) diff += std::fabs(pos.at(a * 16 + j) - pos.at(b * 16 + j));
      CHECK(diff > 1e-6);
    }
  }
}
