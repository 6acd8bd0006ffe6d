#pragma once

#include <map>
#include <string>

namespace mutab {

// Sectioned key=value text, e.g.
//   [model]
//   channels = 64
// Sections and keys are kept sorted so serialization is deterministic.
using KvSections = std::map<std::string, std::map<std::string, std::string>>;

KvSections parse_kv_text(const std::string& text);
std::string dump_kv_text(const KvSections& kv);

KvSections read_kv_file(const std::string& path);
void write_kv_file(const std::string& path, const KvSections& kv);

}  // namespace mutab
