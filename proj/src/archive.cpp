#include "scrub/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace scrub {
namespace {

static_assert(std::endian::native == std::endian::little,
              "payload serialization assumes a little-endian host");

constexpr char kMagic[4] = {'A', 'T', 'T', 'E'};

std::size_t dtype_size(ArchiveDtype d) {
  switch (d) {
    case ArchiveDtype::F32: return 4;
    case ArchiveDtype::F64: return 8;
    case ArchiveDtype::U8: return 1;
  }
  throw ArchiveError("unknown dtype tag");
}

template <class T>
void put(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T take(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw ArchiveError("archive truncated");
  return value;
}

std::vector<std::uint8_t> take_bytes(std::istream& is, std::size_t n) {
  std::vector<std::uint8_t> out(n);
  if (n > 0) {
    is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n));
    if (!is) throw ArchiveError("archive truncated");
  }
  return out;
}

template <class S>
TensorArchive::Entry make_entry(const std::string& name, ArchiveDtype dtype, const TensorT<S>& t) {
  TensorArchive::Entry e;
  e.name = name;
  e.dtype = dtype;
  e.shape = t.shape();
  e.raw.resize(t.numel() * sizeof(S));
  std::memcpy(e.raw.data(), t.data(), e.raw.size());
  return e;
}

template <class S>
TensorT<S> entry_to_tensor(const TensorArchive::Entry& e) {
  std::vector<S> data(e.raw.size() / sizeof(S));
  std::memcpy(data.data(), e.raw.data(), e.raw.size());
  return TensorT<S>::from_data(e.shape, std::move(data));
}

}  // namespace

void TensorArchive::set_meta(const std::string& key, const std::string& value) {
  for (auto& kv : meta_) {
    if (kv.first == key) {
      kv.second = value;
      return;
    }
  }
  meta_.emplace_back(key, value);
}

const std::string* TensorArchive::find_meta(const std::string& key) const {
  for (const auto& kv : meta_) {
    if (kv.first == key) return &kv.second;
  }
  return nullptr;
}

std::string TensorArchive::meta_or(const std::string& key, const std::string& fallback) const {
  const std::string* v = find_meta(key);
  return v ? *v : fallback;
}

void TensorArchive::add(const std::string& name, const Tensor& t) {
  entries_.push_back(make_entry(name, ArchiveDtype::F32, t));
}
void TensorArchive::add(const std::string& name, const TensorD& t) {
  entries_.push_back(make_entry(name, ArchiveDtype::F64, t));
}
void TensorArchive::add(const std::string& name, const MaskTensor& t) {
  entries_.push_back(make_entry(name, ArchiveDtype::U8, t));
}

const TensorArchive::Entry* TensorArchive::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

bool TensorArchive::has(const std::string& name) const { return find(name) != nullptr; }

std::vector<std::string> TensorArchive::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

const TensorArchive::Entry& TensorArchive::entry(const std::string& name) const {
  const Entry* e = find(name);
  if (!e) throw ArchiveError("archive has no tensor named '" + name + "'");
  return *e;
}

Tensor TensorArchive::get_f32(const std::string& name) const {
  const Entry& e = entry(name);
  if (e.dtype != ArchiveDtype::F32) throw ArchiveError("tensor '" + name + "' is not f32");
  return entry_to_tensor<float>(e);
}

TensorD TensorArchive::get_f64(const std::string& name) const {
  const Entry& e = entry(name);
  if (e.dtype != ArchiveDtype::F64) throw ArchiveError("tensor '" + name + "' is not f64");
  return entry_to_tensor<double>(e);
}

MaskTensor TensorArchive::get_u8(const std::string& name) const {
  const Entry& e = entry(name);
  if (e.dtype != ArchiveDtype::U8) throw ArchiveError("tensor '" + name + "' is not u8");
  return entry_to_tensor<std::uint8_t>(e);
}

void TensorArchive::write(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");

  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);

  std::string meta_text;
  for (const auto& kv : meta_) meta_text += kv.first + "=" + kv.second + "\n";
  put<std::uint64_t>(os, meta_text.size());
  os.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));

  put<std::uint64_t>(os, entries_.size());
  for (const Entry& e : entries_) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(e.dtype));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t ext : e.shape) put<std::uint64_t>(os, ext);
    os.write(reinterpret_cast<const char*>(e.raw.data()), static_cast<std::streamsize>(e.raw.size()));
  }
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

TensorArchive TensorArchive::read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");

  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw ArchiveError("'" + path.string() + "' is not a tensor archive");
  }
  const auto version = take<std::uint32_t>(is);
  if (version != kVersion) {
    throw VersionError("unsupported archive version " + std::to_string(version));
  }

  TensorArchive arc;
  const auto meta_len = take<std::uint64_t>(is);
  const auto meta_bytes = take_bytes(is, meta_len);
  std::string meta_text(meta_bytes.begin(), meta_bytes.end());
  std::size_t pos = 0;
  while (pos < meta_text.size()) {
    const std::size_t eol = meta_text.find('\n', pos);
    const std::string line = meta_text.substr(pos, eol - pos);
    pos = (eol == std::string::npos) ? meta_text.size() : eol + 1;
    const std::size_t eq = line.find('=');
    if (eq != std::string::npos) arc.set_meta(line.substr(0, eq), line.substr(eq + 1));
  }

  const auto count = take<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    const auto name_len = take<std::uint32_t>(is);
    const auto name_bytes = take_bytes(is, name_len);
    e.name.assign(name_bytes.begin(), name_bytes.end());
    const auto dtype = take<std::uint8_t>(is);
    if (dtype > 2) throw ArchiveError("tensor '" + e.name + "' has an unknown dtype tag");
    e.dtype = static_cast<ArchiveDtype>(dtype);
    const auto rank = take<std::uint32_t>(is);
    e.shape.resize(rank);
    for (auto& ext : e.shape) ext = take<std::uint64_t>(is);
    e.raw = take_bytes(is, shape_numel(e.shape) * dtype_size(e.dtype));
    arc.entries_.push_back(std::move(e));
  }
  return arc;
}

}  // namespace scrub
