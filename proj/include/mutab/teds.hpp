#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mutab {

// Ordered labeled tree of table tags. Cell nodes optionally carry their inner
// content; attributes are kept in canonical 'colspan="k"'/'rowspan="k"' form.
struct HtmlNode {
  std::string tag;
  std::vector<std::string> attrs;          // sorted canonical span attributes
  std::optional<std::string> content;      // td nodes in total mode only
  std::vector<std::unique_ptr<HtmlNode>> children;
};

struct HtmlTree {
  std::unique_ptr<HtmlNode> root;
  int repaired_tags = 0;  // unclosed tags force-closed during parsing

  std::size_t node_count() const;
};

enum class TedsMode { Structural, Total };

// Parses the <table> element of an HTML document into a tree. Structural mode
// drops cell contents. Unclosed tags are repaired by closing them at their
// parent boundary and counted in `repaired_tags`.
HtmlTree parse_html_tree(const std::string& html, TedsMode mode);

// Ordered tree edit distance with unit insert/delete costs. Substitution is
// free for identical tag+attrs (and identical content in total mode); tag or
// attribute mismatches cost 1; matching td nodes in total mode cost the
// normalized character edit distance of their contents, capped at 1.
double tree_edit_distance(const HtmlTree& a, const HtmlTree& b);

// 1 - dist / max(|a|, |b|), clamped into [0, 1].
double teds_score(const HtmlTree& a, const HtmlTree& b);

// Convenience: parse both documents and score them in the given mode.
double teds_from_html(const std::string& pred, const std::string& gt, TedsMode mode);

struct TedsSample {
  std::string filename;
  bool complex = false;
  bool missing_prediction = false;
  double structural = 0.0;
  double total = 0.0;
};

struct TedsAggregate {
  std::size_t count = 0;
  double structural = 0.0;
  double total = 0.0;
};

struct TedsReport {
  std::vector<TedsSample> samples;
  TedsAggregate simple_agg, complex_agg, all_agg;

  std::string to_json() const;
  std::string to_text() const;
};

struct TedsPair {
  std::string filename;
  std::string gt_html;
  std::optional<std::string> pred_html;  // empty optional scores 0
};

// Scores every pair (structural and total TEDS), buckets by the ground
// truth's complexity, and aggregates means per bucket and overall.
// `workers` > 1 parallelizes per pair; aggregation order stays deterministic.
TedsReport teds_batch_report(const std::vector<TedsPair>& pairs, int workers = 1);

// Normalized character-level edit distance in [0, 1]; 0 for two empty strings.
double normalized_edit_distance(const std::string& a, const std::string& b);

// True when the table contains a colspan/rowspan attribute.
bool html_table_is_complex(const std::string& html);

}  // namespace mutab
