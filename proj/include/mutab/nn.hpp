#pragma once

#include <string>
#include <vector>

#include "mutab/rng.hpp"
#include "mutab/tensor.hpp"

namespace mutab {

// Named view over every learnable tensor of a network, in registration order.
// The order is deterministic, so seeded initialization and checkpoints agree
// across runs.
struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor& add(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    items.emplace_back(name, std::move(t));
    return items.back().second;
  }
  void zero_grads() {
    for (auto& [n, t] : items) t.zero_grad();
  }
  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
  }
};

Tensor xavier_init(Shape shape, Rng& rng);

struct Linear {
  Tensor w;  // [in x out]
  Tensor b;  // [out], undefined when bias-free

  static Linear create(std::size_t in, std::size_t out, Rng& rng, bool bias = true);
  void register_params(ParamRegistry& reg, const std::string& prefix);
  Tensor forward(const Tensor& x) const;  // x: [L x in]
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
  double eps = 1e-5;

  static LayerNormParams create(std::size_t dim);
  void register_params(ParamRegistry& reg, const std::string& prefix);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
};

// Residual global-context block: pools a softmax-weighted global feature over
// all pixels and adds a transformed copy back to every position.
//   y_ij = x_ij + W3 relu(LayerNorm(W2 sum_ij softmax(W1 x_ij) x_ij))
struct GcaBlock {
  Tensor w1;  // [C x 1]
  Tensor w2;  // [C x B]
  Tensor w3;  // [B x C]
  LayerNormParams ln;

  static GcaBlock create(std::size_t channels, std::size_t bottleneck, Rng& rng);
  void register_params(ParamRegistry& reg, const std::string& prefix);
  Tensor forward(const Tensor& x) const;  // x: [C x H x W]
};

struct MaskSpec {
  enum class Kind { None, CausalLocal };
  Kind kind = Kind::None;
  std::size_t window = 0;

  static MaskSpec none() { return {}; }
  static MaskSpec causal_local(std::size_t w) { return {Kind::CausalLocal, w}; }
};

// M[i][j] = 0 when 0 <= i - j <= w, -inf otherwise. Kind::None gives all 0.
Tensor local_attention_mask(std::size_t len, const MaskSpec& spec);

// Multi-head scaled dot-product attention with per-head projections.
struct AttentionLayer {
  std::size_t heads = 1;
  std::size_t d_k = 0;
  std::vector<Tensor> wq, wk, wv;  // per head, [d x d_k]
  Tensor wz;                       // [d x d]

  static AttentionLayer create(std::size_t d, std::size_t heads, Rng& rng);
  void register_params(ParamRegistry& reg, const std::string& prefix);
  // x: queries [Lx x d], y: keys/values [Ly x d]; for self attention pass the
  // same tensor twice.
  Tensor forward(const Tensor& x, const Tensor& y, const MaskSpec& mask) const;
};

// Pre-norm residual block: self attention (masked), cross attention over the
// image memory, then a two-layer feed-forward, each behind a skip connection.
struct AttentionBlock {
  AttentionLayer self_attn;
  AttentionLayer cross_attn;
  Linear ffn1, ffn2;
  LayerNormParams ln1, ln2, ln3;
  double dropout_rate = 0.0;

  static AttentionBlock create(std::size_t d, std::size_t heads, std::size_t ffn_hidden, Rng& rng);
  void register_params(ParamRegistry& reg, const std::string& prefix);
  Tensor forward(const Tensor& seq, const Tensor& memory, const MaskSpec& mask,
                 Rng* dropout_rng = nullptr) const;
};

// Interleaved sinusoid/cosine channels: [sin t0, cos t0, sin t1, cos t1, ...]
// with t_k = n / 10000^(2k/d), k in [0, d/2).
std::vector<double> positional_encoding(double n, std::size_t d);
// Concatenation [p(i); p(j)], each half d/2 wide, on raw pixel indices.
std::vector<double> positional_encoding_2d(double i, double j, std::size_t d);
// [len x d] matrix of positional_encoding(0..len-1, d); not a graph leaf.
Tensor positional_encoding_matrix(std::size_t len, std::size_t d);

}  // namespace mutab
