#include "mutab/nn.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace mutab {

Tensor xavier_init(Shape shape, Rng& rng) {
  std::size_t fan_in = shape.size() >= 2 ? shape[0] : 1;
  std::size_t fan_out = shape.size() >= 2 ? shape[1] : shape[0];
  if (shape.size() == 4) {  // conv kernels: [out, in, kh, kw]
    fan_in = shape[1] * shape[2] * shape[3];
    fan_out = shape[0] * shape[2] * shape[3];
  }
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng, bool bias) {
  Linear l;
  l.w = xavier_init({in, out}, rng);
  if (bias) l.b = Tensor::zeros({out});
  return l;
}

void Linear::register_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".w", w);
  if (b.defined()) reg.add(prefix + ".b", b);
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = matmul(x, w);
  return b.defined() ? add_rowvec(y, b) : y;
}

LayerNormParams LayerNormParams::create(std::size_t dim) {
  LayerNormParams p;
  p.gain = Tensor::full({dim}, 1.0);
  p.bias = Tensor::zeros({dim});
  return p;
}

void LayerNormParams::register_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".gain", gain);
  reg.add(prefix + ".bias", bias);
}

GcaBlock GcaBlock::create(std::size_t channels, std::size_t bottleneck, Rng& rng) {
  GcaBlock g;
  g.w1 = xavier_init({channels, 1}, rng);
  g.w2 = xavier_init({channels, bottleneck}, rng);
  g.w3 = xavier_init({bottleneck, channels}, rng);
  g.ln = LayerNormParams::create(bottleneck);
  return g;
}

void GcaBlock::register_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".w1", w1);
  reg.add(prefix + ".w2", w2);
  reg.add(prefix + ".w3", w3);
  ln.register_params(reg, prefix + ".ln");
}

Tensor GcaBlock::forward(const Tensor& x) const {
  if (x.rank() != 3 || x.size(0) != w1.size(0)) {
    throw std::invalid_argument("gca: expected [CxHxW] with C=" + std::to_string(w1.size(0)) +
                                ", got " + shape_str(x.shape()));
  }
  std::size_t c = x.size(0), h = x.size(1), w = x.size(2);
  // [C x H x W] -> [HW x C] pixel rows
  Tensor flat = transpose(reshape(x, {c, h * w}));
  Tensor logits = matmul(flat, w1);            // [HW x 1]
  Tensor alpha = softmax(logits, 0);           // attention over all pixels
  Tensor ctx = matmul(transpose(alpha), flat); // [1 x C], convex combination
  Tensor t = relu(ln.forward(matmul(ctx, w2)));
  Tensor r = matmul(t, w3);                    // [1 x C], broadcast to every pixel
  Tensor y = add_rowvec(flat, reshape(r, {c}));
  return reshape(transpose(y), {c, h, w});
}

Tensor local_attention_mask(std::size_t len, const MaskSpec& spec) {
  if (len < 1) throw std::invalid_argument("local_attention_mask: len must be >= 1");
  Tensor m = Tensor::zeros({len, len});
  if (spec.kind == MaskSpec::Kind::None) return m;
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  auto& v = m.data();
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < len; ++j) {
      bool admitted = j <= i && i - j <= spec.window;
      if (!admitted) v[i * len + j] = kNegInf;
    }
  }
  return m;
}

AttentionLayer AttentionLayer::create(std::size_t d, std::size_t heads, Rng& rng) {
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument("attention: heads must divide channels");
  }
  AttentionLayer a;
  a.heads = heads;
  a.d_k = d / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    a.wq.push_back(xavier_init({d, a.d_k}, rng));
    a.wk.push_back(xavier_init({d, a.d_k}, rng));
    a.wv.push_back(xavier_init({d, a.d_k}, rng));
  }
  a.wz = xavier_init({d, d}, rng);
  return a;
}

void AttentionLayer::register_params(ParamRegistry& reg, const std::string& prefix) {
  for (std::size_t h = 0; h < heads; ++h) {
    std::string hp = prefix + ".h" + std::to_string(h);
    reg.add(hp + ".wq", wq[h]);
    reg.add(hp + ".wk", wk[h]);
    reg.add(hp + ".wv", wv[h]);
  }
  reg.add(prefix + ".wz", wz);
}

Tensor AttentionLayer::forward(const Tensor& x, const Tensor& y, const MaskSpec& mask) const {
  if (x.rank() != 2 || y.rank() != 2 || x.size(1) != wq[0].size(0) || y.size(1) != wk[0].size(0)) {
    throw std::invalid_argument("attention: channel mismatch, x " + shape_str(x.shape()) +
                                " y " + shape_str(y.shape()));
  }
  std::size_t lx = x.size(0), ly = y.size(0);
  Tensor m;
  if (mask.kind != MaskSpec::Kind::None) {
    if (lx != ly) throw std::invalid_argument("attention: causal mask requires equal lengths");
    m = local_attention_mask(lx, mask);
  }
  double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d_k));
  std::vector<Tensor> heads_out;
  heads_out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor q = matmul(x, wq[h]);
    Tensor k = matmul(y, wk[h]);
    Tensor v = matmul(y, wv[h]);
    Tensor logits = scale(matmul(q, transpose(k)), inv_sqrt_dk);
    if (m.defined()) logits = add(logits, m);
    Tensor attn = softmax(logits, 1);
    heads_out.push_back(matmul(attn, v));
  }
  Tensor z = heads == 1 ? heads_out[0] : concat_cols(heads_out);
  return matmul(z, wz);
}

AttentionBlock AttentionBlock::create(std::size_t d, std::size_t heads, std::size_t ffn_hidden,
                                      Rng& rng) {
  AttentionBlock b;
  b.self_attn = AttentionLayer::create(d, heads, rng);
  b.cross_attn = AttentionLayer::create(d, heads, rng);
  b.ffn1 = Linear::create(d, ffn_hidden, rng);
  b.ffn2 = Linear::create(ffn_hidden, d, rng);
  b.ln1 = LayerNormParams::create(d);
  b.ln2 = LayerNormParams::create(d);
  b.ln3 = LayerNormParams::create(d);
  return b;
}

void AttentionBlock::register_params(ParamRegistry& reg, const std::string& prefix) {
  self_attn.register_params(reg, prefix + ".self");
  cross_attn.register_params(reg, prefix + ".cross");
  ffn1.register_params(reg, prefix + ".ffn1");
  ffn2.register_params(reg, prefix + ".ffn2");
  ln1.register_params(reg, prefix + ".ln1");
  ln2.register_params(reg, prefix + ".ln2");
  ln3.register_params(reg, prefix + ".ln3");
}

Tensor AttentionBlock::forward(const Tensor& seq, const Tensor& memory, const MaskSpec& mask,
                               Rng* dropout_rng) const {
  auto maybe_drop = [&](Tensor t) {
    return (dropout_rng && dropout_rate > 0.0) ? dropout(t, dropout_rate, *dropout_rng) : t;
  };
  Tensor n1 = ln1.forward(seq);
  Tensor h = add(seq, maybe_drop(self_attn.forward(n1, n1, mask)));
  h = add(h, maybe_drop(cross_attn.forward(ln2.forward(h), memory, MaskSpec::none())));
  h = add(h, maybe_drop(ffn2.forward(relu(ffn1.forward(ln3.forward(h))))));
  return h;
}

std::vector<double> positional_encoding(double n, std::size_t d) {
  if (d == 0 || d % 2 != 0) {
    throw std::invalid_argument("positional_encoding: channel count must be even, got " +
                                std::to_string(d));
  }
  std::vector<double> out(d);
  for (std::size_t k = 0; k < d / 2; ++k) {
    double theta = n / std::pow(10000.0, 2.0 * static_cast<double>(k) / static_cast<double>(d));
    out[2 * k] = std::sin(theta);
    out[2 * k + 1] = std::cos(theta);
  }
  return out;
}

std::vector<double> positional_encoding_2d(double i, double j, std::size_t d) {
  if (d == 0 || d % 4 != 0) {
    throw std::invalid_argument("positional_encoding_2d: channel count must be divisible by 4");
  }
  std::vector<double> out;
  out.reserve(d);
  auto pi = positional_encoding(i, d / 2);
  auto pj = positional_encoding(j, d / 2);
  out.insert(out.end(), pi.begin(), pi.end());
  out.insert(out.end(), pj.begin(), pj.end());
  return out;
}

Tensor positional_encoding_matrix(std::size_t len, std::size_t d) {
  Tensor t = Tensor::zeros({len, d});
  for (std::size_t n = 0; n < len; ++n) {
    auto row = positional_encoding(static_cast<double>(n), d);
    for (std::size_t c = 0; c < d; ++c) t.data()[n * d + c] = row[c];
  }
  return t;
}

}  // namespace mutab
