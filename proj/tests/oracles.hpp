// Independent reference implementations used as test oracles. Everything here
// is written with plain index loops, deliberately avoiding the library's
// tensor ops so the two routes stay independent.
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mutab/nn.hpp"
#include "mutab/rng.hpp"
#include "mutab/teds.hpp"
#include "mutab/tensor.hpp"

namespace oracle {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Six-loop cross-correlation.
inline std::vector<double> conv2d_naive(const std::vector<double>& x, int cin, int h, int w,
                                        const std::vector<double>& k, int cout, int kh, int kw,
                                        const std::vector<double>& bias, int stride, int pad,
                                        int& ho_out, int& wo_out) {
  int ho = (h + 2 * pad - kh) / stride + 1;
  int wo = (w + 2 * pad - kw) / stride + 1;
  ho_out = ho;
  wo_out = wo;
  std::vector<double> out(static_cast<std::size_t>(cout) * ho * wo, 0.0);
  for (int co = 0; co < cout; ++co)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double acc = bias.empty() ? 0.0 : bias[co];
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              int iy = oy * stride + ky - pad;
              int ix = ox * stride + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += k[((co * cin + ci) * kh + ky) * kw + kx] * x[(ci * h + iy) * w + ix];
            }
        out[(co * ho + oy) * wo + ox] = acc;
      }
  return out;
}

// Single-loop multi-head attention over row vectors; mirrors nothing from the
// library except the parameter layout it reads.
inline std::vector<double> attention_naive(const mutab::AttentionLayer& layer,
                                           const std::vector<double>& x, int lx,
                                           const std::vector<double>& y, int ly, int d,
                                           const std::vector<double>* mask /* lx*ly or null */) {
  int heads = static_cast<int>(layer.heads);
  int dk = static_cast<int>(layer.d_k);
  std::vector<double> concat(static_cast<std::size_t>(lx) * heads * dk, 0.0);
  for (int h = 0; h < heads; ++h) {
    const auto& wq = layer.wq[h].data();
    const auto& wk = layer.wk[h].data();
    const auto& wv = layer.wv[h].data();
    std::vector<double> q(static_cast<std::size_t>(lx) * dk, 0.0);
    std::vector<double> k(static_cast<std::size_t>(ly) * dk, 0.0);
    std::vector<double> v(static_cast<std::size_t>(ly) * dk, 0.0);
    for (int i = 0; i < lx; ++i)
      for (int a = 0; a < dk; ++a)
        for (int c = 0; c < d; ++c) q[i * dk + a] += x[i * d + c] * wq[c * dk + a];
    for (int j = 0; j < ly; ++j)
      for (int a = 0; a < dk; ++a)
        for (int c = 0; c < d; ++c) {
          k[j * dk + a] += y[j * d + c] * wk[c * dk + a];
          v[j * dk + a] += y[j * d + c] * wv[c * dk + a];
        }
    for (int i = 0; i < lx; ++i) {
      std::vector<double> s(ly);
      double mx = kNegInf;
      for (int j = 0; j < ly; ++j) {
        double dot = 0;
        for (int a = 0; a < dk; ++a) dot += q[i * dk + a] * k[j * dk + a];
        s[j] = dot / std::sqrt(static_cast<double>(dk));
        if (mask) s[j] += (*mask)[i * ly + j];
        mx = std::max(mx, s[j]);
      }
      double denom = 0;
      for (int j = 0; j < ly; ++j) {
        s[j] = std::exp(s[j] - mx);
        denom += s[j];
      }
      for (int j = 0; j < ly; ++j)
        for (int a = 0; a < dk; ++a)
          concat[i * heads * dk + h * dk + a] += (s[j] / denom) * v[j * dk + a];
    }
  }
  const auto& wz = layer.wz.data();
  std::vector<double> out(static_cast<std::size_t>(lx) * d, 0.0);
  for (int i = 0; i < lx; ++i)
    for (int c2 = 0; c2 < d; ++c2)
      for (int c1 = 0; c1 < d; ++c1) out[i * d + c2] += concat[i * d + c1] * wz[c1 * d + c2];
  return out;
}

// Direct transcription of the global-context residual formula.
inline std::vector<double> gca_naive(const mutab::GcaBlock& block, const std::vector<double>& x,
                                     int c, int h, int w) {
  int hw = h * w;
  const auto& w1 = block.w1.data();
  const auto& w2 = block.w2.data();
  const auto& w3 = block.w3.data();
  int b = static_cast<int>(block.w2.size(1));
  std::vector<double> logits(hw, 0.0);
  for (int p = 0; p < hw; ++p)
    for (int ci = 0; ci < c; ++ci) logits[p] += w1[ci] * x[ci * hw + p];
  double mx = kNegInf;
  for (double v : logits) mx = std::max(mx, v);
  double denom = 0;
  std::vector<double> alpha(hw);
  for (int p = 0; p < hw; ++p) {
    alpha[p] = std::exp(logits[p] - mx);
    denom += alpha[p];
  }
  for (auto& a : alpha) a /= denom;
  std::vector<double> ctx(c, 0.0);
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < hw; ++p) ctx[ci] += alpha[p] * x[ci * hw + p];
  std::vector<double> t(b, 0.0);
  for (int bi = 0; bi < b; ++bi)
    for (int ci = 0; ci < c; ++ci) t[bi] += ctx[ci] * w2[ci * b + bi];
  // layer norm over the bottleneck
  double mu = 0;
  for (double v : t) mu += v;
  mu /= b;
  double var = 0;
  for (double v : t) var += (v - mu) * (v - mu);
  var /= b;
  const auto& gain = block.ln.gain.data();
  const auto& bias = block.ln.bias.data();
  for (int bi = 0; bi < b; ++bi) {
    double nv = (t[bi] - mu) / std::sqrt(var + block.ln.eps);
    t[bi] = std::max(0.0, nv * gain[bi] + bias[bi]);
  }
  std::vector<double> r(c, 0.0);
  for (int ci = 0; ci < c; ++ci)
    for (int bi = 0; bi < b; ++bi) r[ci] += t[bi] * w3[bi * c + ci];
  std::vector<double> y(x.size());
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < hw; ++p) y[ci * hw + p] = x[ci * hw + p] + r[ci];
  return y;
}

// Brute-force strictly-causal mask (window unlimited).
inline std::vector<double> causal_mask_naive(int len) {
  std::vector<double> m(static_cast<std::size_t>(len) * len, 0.0);
  for (int i = 0; i < len; ++i)
    for (int j = 0; j < len; ++j)
      if (j > i) m[i * len + j] = kNegInf;
  return m;
}

// Windowed causal mask built from the admission rule alone.
inline std::vector<double> local_mask_naive(int len, int w) {
  std::vector<double> m(static_cast<std::size_t>(len) * len, 0.0);
  for (int i = 0; i < len; ++i)
    for (int j = 0; j < len; ++j) {
      int diff = i - j;
      if (!(diff >= 0 && diff <= w)) m[i * len + j] = kNegInf;
    }
  return m;
}

// ---- tree edit distance by exhaustive mapping enumeration ------------------

struct ONode {
  std::string tag;
  std::vector<std::string> attrs;
  std::optional<std::string> content;
  int parent = -1;
  int pre = 0;
};

inline void collect_nodes(const mutab::HtmlNode* n, int parent, std::vector<ONode>& out) {
  int me = static_cast<int>(out.size());
  out.push_back({n->tag, n->attrs, n->content, parent, me});
  for (const auto& ch : n->children) collect_nodes(ch.get(), me, out);
}

inline bool is_ancestor(const std::vector<ONode>& ns, int a, int b) {
  int cur = ns[b].parent;
  while (cur != -1) {
    if (cur == a) return true;
    cur = ns[cur].parent;
  }
  return false;
}

inline double mapping_sub_cost(const ONode& a, const ONode& b) {
  if (a.tag != b.tag) return 1.0;
  if (a.attrs != b.attrs) return 1.0;
  bool cell = a.tag == "td" || a.tag == "th";
  if (cell && (a.content || b.content)) {
    return mutab::normalized_edit_distance(a.content.value_or(""), b.content.value_or(""));
  }
  return 0.0;
}

// Minimal cost over every valid edit mapping: injective, ancestry-preserving,
// and left-right-order-preserving. Exponential; small trees only.
inline double brute_force_ted(const mutab::HtmlTree& ta, const mutab::HtmlTree& tb) {
  std::vector<ONode> a, b;
  collect_nodes(ta.root.get(), -1, a);
  collect_nodes(tb.root.get(), -1, b);
  int n = static_cast<int>(a.size());
  int m = static_cast<int>(b.size());

  auto left_of = [](const std::vector<ONode>& ns, int x, int y) {
    return ns[x].pre < ns[y].pre && !is_ancestor(ns, x, y) && !is_ancestor(ns, y, x);
  };

  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  std::vector<bool> used(static_cast<std::size_t>(m), false);
  double best = 1e18;

  std::function<void(int, double, int)> rec = [&](int i, double cost, int mapped) {
    if (cost >= best) return;
    if (i == n) {
      best = std::min(best, cost + static_cast<double>(m - mapped));
      return;
    }
    rec(i + 1, cost + 1.0, mapped);  // delete node i
    for (int j = 0; j < m; ++j) {
      if (used[j]) continue;
      bool ok = true;
      for (int k = 0; k < i && ok; ++k) {
        if (assign[k] < 0) continue;
        if (is_ancestor(a, k, i) != is_ancestor(b, assign[k], j)) ok = false;
        if (ok && is_ancestor(a, i, k) != is_ancestor(b, j, assign[k])) ok = false;
        if (ok && left_of(a, k, i) != left_of(b, assign[k], j)) ok = false;
      }
      if (!ok) continue;
      assign[i] = j;
      used[j] = true;
      rec(i + 1, cost + mapping_sub_cost(a[i], b[j]), mapped + 1);
      assign[i] = -1;
      used[j] = false;
    }
  };
  rec(0, 0.0, 0);
  return best;
}

inline std::unique_ptr<mutab::HtmlNode> make_node(std::string tag,
                                                  std::vector<std::string> attrs = {},
                                                  std::optional<std::string> content = std::nullopt) {
  auto n = std::make_unique<mutab::HtmlNode>();
  n->tag = std::move(tag);
  n->attrs = std::move(attrs);
  n->content = std::move(content);
  return n;
}

// Random small ordered tree; td nodes are leaves and may carry attrs/content.
inline mutab::HtmlTree random_tree(mutab::Rng& rng, int nodes, bool with_content) {
  auto root = make_node("table");
  std::vector<mutab::HtmlNode*> non_cells{root.get()};
  const char* tags[] = {"tr", "td", "tbody"};
  for (int i = 1; i < nodes; ++i) {
    mutab::HtmlNode* parent = non_cells[rng.below(static_cast<int>(non_cells.size()))];
    std::string tag = tags[rng.below(3)];
    auto child = make_node(tag);
    if (tag == "td") {
      if (rng.chance(0.3)) child->attrs = {"colspan=\"" + std::to_string(2 + rng.below(2)) + "\""};
      if (with_content) {
        std::string content;
        int len = rng.below(3);
        for (int c = 0; c < len; ++c) content += static_cast<char>('a' + rng.below(4));
        child->content = content;
      }
    }
    mutab::HtmlNode* raw = child.get();
    parent->children.push_back(std::move(child));
    if (tag != "td") non_cells.push_back(raw);
  }
  mutab::HtmlTree t;
  t.root = std::move(root);
  return t;
}

}  // namespace oracle
