#include "scrub/manifest.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "scrub/errors.hpp"

namespace scrub {

void Manifest::set(const std::string& key, const std::string& value) {
  for (auto& kv : entries_) {
    if (kv.first == key) {
      kv.second = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

void Manifest::set(const std::string& key, double value) {
  // Shortest representation that round-trips exactly.
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  set(key, std::string(buf, res.ptr));
}

void Manifest::set(const std::string& key, std::int64_t value) { set(key, std::to_string(value)); }
void Manifest::set(const std::string& key, std::uint64_t value) { set(key, std::to_string(value)); }

const std::string* Manifest::find(const std::string& key) const {
  for (const auto& kv : entries_) {
    if (kv.first == key) return &kv.second;
  }
  return nullptr;
}

std::string Manifest::get_or(const std::string& key, const std::string& fallback) const {
  const std::string* v = find(key);
  return v ? *v : fallback;
}

void Manifest::write(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write manifest '" + path.string() + "'");
  for (const auto& kv : entries_) os << kv.first << "=" << kv.second << "\n";
}

Manifest Manifest::read(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read manifest '" + path.string() + "'");
  Manifest m;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    m.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return m;
}

}  // namespace scrub
