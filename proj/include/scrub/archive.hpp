#pragma once

// Tensor archive file format. Layout, all integers little-endian:
//
//   bytes 0..3   magic "ATTE"
//   u32          format version (currently 1)
//   u64          metadata length, then that many bytes of "key=value\n" text
//   u64          tensor count
//   per tensor:  u32 name length, name bytes,
//                u8 dtype (0 = f32, 1 = f64, 2 = u8),
//                u32 rank, u64 extents[rank],
//                payload (IEEE-754 little-endian for float types)
//
// Payloads round-trip bit-exactly. Checkpoints and run traces are archives
// whose metadata block carries their config.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "scrub/errors.hpp"
#include "scrub/tensor.hpp"

namespace scrub {

enum class ArchiveDtype : std::uint8_t { F32 = 0, F64 = 1, U8 = 2 };

class TensorArchive {
 public:
  static constexpr std::uint32_t kVersion = 1;

  struct Entry {
    std::string name;
    ArchiveDtype dtype = ArchiveDtype::F32;
    Shape shape;
    std::vector<std::uint8_t> raw;  // little-endian payload
  };

  void set_meta(const std::string& key, const std::string& value);
  const std::string* find_meta(const std::string& key) const;
  std::string meta_or(const std::string& key, const std::string& fallback) const;
  const std::vector<std::pair<std::string, std::string>>& meta() const { return meta_; }

  void add(const std::string& name, const Tensor& t);
  void add(const std::string& name, const TensorD& t);
  void add(const std::string& name, const MaskTensor& t);

  bool has(const std::string& name) const;
  std::vector<std::string> names() const;
  const Entry& entry(const std::string& name) const;

  Tensor get_f32(const std::string& name) const;
  TensorD get_f64(const std::string& name) const;
  MaskTensor get_u8(const std::string& name) const;

  void write(const std::filesystem::path& path) const;
  static TensorArchive read(const std::filesystem::path& path);

 private:
  const Entry* find(const std::string& name) const;

  std::vector<std::pair<std::string, std::string>> meta_;
  std::vector<Entry> entries_;
};

}  // namespace scrub
