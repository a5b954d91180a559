#pragma once

// Plain-text key=value manifests written next to every run's outputs.
// Insertion order is preserved so files diff cleanly.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace scrub {

class Manifest {
 public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, std::int64_t value);
  void set(const std::string& key, std::uint64_t value);
  void set(const std::string& key, int value) { set(key, static_cast<std::int64_t>(value)); }

  const std::string* find(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  void write(const std::filesystem::path& path) const;
  static Manifest read(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace scrub
