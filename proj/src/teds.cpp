#include "mutab/teds.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include <json.hpp>

#include "mutab/tokenizer.hpp"  // split_cell_chars for content comparison

namespace mutab {

namespace {

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// Extracts canonical span attributes from the raw inside of an opening tag,
// e.g. 'td colspan="2" rowspan=3' -> {colspan="2", rowspan="3"}.
std::vector<std::string> canonical_attrs(const std::string& tag_body) {
  std::vector<std::string> out;
  for (const char* name : {"colspan", "rowspan"}) {
    std::size_t pos = tag_body.find(name);
    if (pos == std::string::npos) continue;
    std::size_t eq = tag_body.find('=', pos);
    if (eq == std::string::npos) continue;
    std::size_t v = eq + 1;
    while (v < tag_body.size() && (tag_body[v] == ' ' || tag_body[v] == '"' || tag_body[v] == '\''))
      ++v;
    std::string digits;
    while (v < tag_body.size() && std::isdigit(static_cast<unsigned char>(tag_body[v])))
      digits += tag_body[v++];
    if (!digits.empty()) out.push_back(std::string(name) + "=\"" + digits + "\"");
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct TagToken {
  std::string name;     // lowercase tag name
  std::string body;     // raw text inside the angle brackets
  bool closing = false;
  std::size_t begin = 0, end = 0;  // [begin, end) span in the source
};

// Finds the next tag at or after `from`.
bool next_tag(const std::string& s, std::size_t from, TagToken& out) {
  std::size_t lt = s.find('<', from);
  if (lt == std::string::npos) return false;
  std::size_t gt = s.find('>', lt);
  if (gt == std::string::npos) return false;
  out.begin = lt;
  out.end = gt + 1;
  std::string body = s.substr(lt + 1, gt - lt - 1);
  out.closing = !body.empty() && body[0] == '/';
  std::size_t p = out.closing ? 1 : 0;
  std::string name;
  while (p < body.size() && body[p] != ' ' && body[p] != '\t' && body[p] != '\n') name += body[p++];
  out.name = lower(name);
  out.body = body;
  return true;
}

}  // namespace

std::size_t HtmlTree::node_count() const {
  std::size_t n = 0;
  std::vector<const HtmlNode*> stack{root.get()};
  while (!stack.empty()) {
    const HtmlNode* cur = stack.back();
    stack.pop_back();
    if (!cur) continue;
    ++n;
    for (const auto& ch : cur->children) stack.push_back(ch.get());
  }
  return n;
}

HtmlTree parse_html_tree(const std::string& html, TedsMode mode) {
  std::size_t table_pos = html.find("<table");
  if (table_pos == std::string::npos) {
    throw std::invalid_argument("parse error: no <table> element in document");
  }

  HtmlTree tree;
  tree.root = std::make_unique<HtmlNode>();
  tree.root->tag = "table";
  std::vector<HtmlNode*> stack{tree.root.get()};

  TagToken tag;
  std::size_t pos = table_pos;
  if (!next_tag(html, pos, tag)) throw std::invalid_argument("parse error: malformed <table> tag");
  pos = tag.end;

  while (stack.size() > 0 && next_tag(html, pos, tag)) {
    pos = tag.end;
    if (tag.closing) {
      // pop to the matching open tag; anything force-closed is a repair
      auto it = std::find_if(stack.rbegin(), stack.rend(),
                             [&](HtmlNode* n) { return n->tag == tag.name; });
      if (it == stack.rend()) {
        ++tree.repaired_tags;  // stray close
        continue;
      }
      while (stack.back()->tag != tag.name) {
        stack.pop_back();
        ++tree.repaired_tags;
      }
      stack.pop_back();
      if (stack.empty()) break;  // table closed
      continue;
    }

    if (tag.name == "td" || tag.name == "th") {
      auto node = std::make_unique<HtmlNode>();
      node->tag = tag.name;
      node->attrs = canonical_attrs(tag.body);
      // inner html up to the matching close; missing close repairs at the
      // next structural boundary
      std::string close = "</" + tag.name + ">";
      std::size_t end = html.find(close, pos);
      std::size_t content_end;
      if (end != std::string::npos) {
        content_end = end;
      } else {
        std::size_t fallback = html.find("</tr>", pos);
        if (fallback == std::string::npos) fallback = html.find("</table>", pos);
        content_end = fallback == std::string::npos ? html.size() : fallback;
        ++tree.repaired_tags;
      }
      if (mode == TedsMode::Total) node->content = html.substr(pos, content_end - pos);
      pos = end != std::string::npos ? end + close.size() : content_end;
      stack.back()->children.push_back(std::move(node));
      continue;
    }

    if (tag.name.empty()) continue;
    auto node = std::make_unique<HtmlNode>();
    node->tag = tag.name;
    node->attrs = canonical_attrs(tag.body);
    HtmlNode* raw = node.get();
    stack.back()->children.push_back(std::move(node));
    stack.push_back(raw);
  }

  // anything left open beyond the root closes at its parent boundary
  if (stack.size() > 1) tree.repaired_tags += static_cast<int>(stack.size() - 1);
  return tree;
}

double normalized_edit_distance(const std::string& a, const std::string& b) {
  auto ta = split_cell_chars(a);
  auto tb = split_cell_chars(b);
  std::size_t n = ta.size(), m = tb.size();
  if (n == 0 && m == 0) return 0.0;
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      std::size_t sub = prev[j - 1] + (ta[i - 1] == tb[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  double d = static_cast<double>(prev[m]);
  return std::min(1.0, d / static_cast<double>(std::max(n, m)));
}

namespace {

struct FlatNode {
  const HtmlNode* node;
};

struct FlatTree {
  std::vector<const HtmlNode*> post;  // postorder
  std::vector<int> lml;               // leftmost leaf (postorder index)
  std::vector<int> keyroots;
};

void postorder(const HtmlNode* n, std::vector<const HtmlNode*>& out) {
  for (const auto& ch : n->children) postorder(ch.get(), out);
  out.push_back(n);
}

FlatTree flatten(const HtmlTree& t) {
  FlatTree f;
  postorder(t.root.get(), f.post);
  int n = static_cast<int>(f.post.size());
  f.lml.assign(n, 0);
  std::unordered_map<const HtmlNode*, int> pos;
  for (int i = 0; i < n; ++i) pos[f.post[i]] = i;
  for (int i = 0; i < n; ++i) {
    const HtmlNode* cur = f.post[i];
    while (!cur->children.empty()) cur = cur->children.front().get();
    f.lml[i] = pos[cur];
  }
  // keyroots: highest node for each distinct leftmost leaf
  std::unordered_map<int, int> highest;
  for (int i = 0; i < n; ++i) highest[f.lml[i]] = i;
  for (auto& [l, i] : highest) f.keyroots.push_back(i);
  std::sort(f.keyroots.begin(), f.keyroots.end());
  return f;
}

double substitution_cost(const HtmlNode* a, const HtmlNode* b) {
  if (a->tag != b->tag) return 1.0;
  if (a->attrs != b->attrs) return 1.0;
  bool cell = a->tag == "td" || a->tag == "th";
  if (cell && (a->content || b->content)) {
    return normalized_edit_distance(a->content.value_or(""), b->content.value_or(""));
  }
  return 0.0;
}

}  // namespace

double tree_edit_distance(const HtmlTree& a, const HtmlTree& b) {
  FlatTree fa = flatten(a);
  FlatTree fb = flatten(b);
  int n = static_cast<int>(fa.post.size());
  int m = static_cast<int>(fb.post.size());
  std::vector<std::vector<double>> td(n, std::vector<double>(m, 0.0));

  std::vector<std::vector<double>> fd(static_cast<std::size_t>(n) + 1,
                                      std::vector<double>(static_cast<std::size_t>(m) + 1, 0.0));

  for (int i1 : fa.keyroots) {
    for (int j1 : fb.keyroots) {
      int li = fa.lml[i1];
      int lj = fb.lml[j1];
      fd[0][0] = 0.0;
      for (int di = li; di <= i1; ++di) fd[di - li + 1][0] = fd[di - li][0] + 1.0;
      for (int dj = lj; dj <= j1; ++dj) fd[0][dj - lj + 1] = fd[0][dj - lj] + 1.0;
      for (int di = li; di <= i1; ++di) {
        for (int dj = lj; dj <= j1; ++dj) {
          int ri = di - li + 1;
          int rj = dj - lj + 1;
          if (fa.lml[di] == li && fb.lml[dj] == lj) {
            double sub = fd[ri - 1][rj - 1] + substitution_cost(fa.post[di], fb.post[dj]);
            fd[ri][rj] = std::min({fd[ri - 1][rj] + 1.0, fd[ri][rj - 1] + 1.0, sub});
            td[di][dj] = fd[ri][rj];
          } else {
            double bridge = fd[fa.lml[di] - li][fb.lml[dj] - lj] + td[di][dj];
            fd[ri][rj] = std::min({fd[ri - 1][rj] + 1.0, fd[ri][rj - 1] + 1.0, bridge});
          }
        }
      }
    }
  }
  return td[n - 1][m - 1];
}

double teds_score(const HtmlTree& a, const HtmlTree& b) {
  double dist = tree_edit_distance(a, b);
  double denom = static_cast<double>(std::max(a.node_count(), b.node_count()));
  double s = 1.0 - dist / denom;
  return std::min(1.0, std::max(0.0, s));
}

double teds_from_html(const std::string& pred, const std::string& gt, TedsMode mode) {
  HtmlTree ta = parse_html_tree(pred, mode);
  HtmlTree tb = parse_html_tree(gt, mode);
  return teds_score(ta, tb);
}

bool html_table_is_complex(const std::string& html) {
  return html.find("colspan") != std::string::npos || html.find("rowspan") != std::string::npos;
}

TedsReport teds_batch_report(const std::vector<TedsPair>& pairs, int workers) {
  TedsReport report;
  report.samples.resize(pairs.size());

  auto score_one = [&](std::size_t i) {
    const TedsPair& p = pairs[i];
    TedsSample s;
    s.filename = p.filename;
    s.complex = html_table_is_complex(p.gt_html);
    if (!p.pred_html.has_value()) {
      s.missing_prediction = true;
    } else {
      try {
        s.structural = teds_from_html(*p.pred_html, p.gt_html, TedsMode::Structural);
        s.total = teds_from_html(*p.pred_html, p.gt_html, TedsMode::Total);
      } catch (const std::exception&) {
        s.structural = 0.0;  // unparseable prediction
        s.total = 0.0;
      }
    }
    report.samples[i] = std::move(s);
  };

  if (workers <= 1 || pairs.size() < 2) {
    for (std::size_t i = 0; i < pairs.size(); ++i) score_one(i);
  } else {
    std::vector<std::thread> pool;
    std::size_t nw = std::min<std::size_t>(static_cast<std::size_t>(workers), pairs.size());
    for (std::size_t w = 0; w < nw; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < pairs.size(); i += nw) score_one(i);
      });
    }
    for (auto& t : pool) t.join();
  }

  for (const auto& s : report.samples) {
    TedsAggregate& bucket = s.complex ? report.complex_agg : report.simple_agg;
    bucket.count += 1;
    bucket.structural += s.structural;
    bucket.total += s.total;
    report.all_agg.count += 1;
    report.all_agg.structural += s.structural;
    report.all_agg.total += s.total;
  }
  for (TedsAggregate* a : {&report.simple_agg, &report.complex_agg, &report.all_agg}) {
    if (a->count > 0) {
      a->structural /= static_cast<double>(a->count);
      a->total /= static_cast<double>(a->count);
    }
  }
  return report;
}

std::string TedsReport::to_json() const {
  nlohmann::json j;
  j["per_sample"] = nlohmann::json::array();
  for (const auto& s : samples) {
    j["per_sample"].push_back({{"filename", s.filename},
                               {"kind", s.complex ? "complex" : "simple"},
                               {"missing_prediction", s.missing_prediction},
                               {"structural", s.structural},
                               {"total", s.total}});
  }
  auto agg = [](const TedsAggregate& a) {
    return nlohmann::json{{"count", a.count}, {"structural", a.structural}, {"total", a.total}};
  };
  j["aggregates"] = {{"simple", agg(simple_agg)}, {"complex", agg(complex_agg)}, {"all", agg(all_agg)}};
  return j.dump(2);
}

std::string TedsReport::to_text() const {
  std::ostringstream os;
  os << "bucket    count  structural      total\n";
  auto row = [&](const char* name, const TedsAggregate& a) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%-8s %6zu    %8.4f   %8.4f\n", name, a.count, a.structural,
                  a.total);
    os << buf;
  };
  row("simple", simple_agg);
  row("complex", complex_agg);
  row("all", all_agg);
  return os.str();
}

}  // namespace mutab
