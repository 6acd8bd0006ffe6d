#include "mutab/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mutab {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

KvSections parse_kv_text(const std::string& text) {
  KvSections out;
  std::istringstream is(text);
  std::string line;
  std::string section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') {
        throw std::invalid_argument("config line " + std::to_string(lineno) + ": bad section");
      }
      section = trim(t.substr(1, t.size() - 2));
      out[section];
      continue;
    }
    std::size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    out[section][trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  return out;
}

std::string dump_kv_text(const KvSections& kv) {
  std::ostringstream os;
  bool first = true;
  for (const auto& [section, entries] : kv) {
    if (!first) os << '\n';
    first = false;
    os << '[' << section << "]\n";
    for (const auto& [k, v] : entries) os << k << " = " << v << '\n';
  }
  return os.str();
}

KvSections read_kv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_kv_text(buf.str());
}

void write_kv_file(const std::string& path, const KvSections& kv) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write config file: " + path);
  os << dump_kv_text(kv);
  if (!os) throw std::runtime_error("config write failed: " + path);
}

}  // namespace mutab
