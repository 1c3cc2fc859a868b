#include "cast/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cast/error.hpp"

namespace cast {
namespace {

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  char buf[sizeof(T)];
  is.read(buf, sizeof(T));
  require(is.gcount() == static_cast<std::streamsize>(sizeof(T)), ErrorCode::TruncatedPayload,
          "checkpoint " + path.string() + " ends mid-record");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  for (const auto& [name, p] : store) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) put<std::uint64_t>(os, d);
    for (double v : p.value.values()) put<double>(os, v);
  }
  require(static_cast<bool>(os), ErrorCode::IoFailure, "write to " + path.string() + " failed");
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::MissingFile, "cannot open checkpoint " + path.string());
  ParamStore store;
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto len = get<std::uint32_t>(is, path);
    require(len < (1u << 16), ErrorCode::MalformedHeader, "implausible parameter name length");
    std::string name(len, '\0');
    is.read(name.data(), len);
    require(is.gcount() == static_cast<std::streamsize>(len), ErrorCode::TruncatedPayload, "truncated name");
    const auto rank = get<std::uint32_t>(is, path);
    require(rank <= 8, ErrorCode::MalformedHeader, "implausible rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is, path));
    Tensor t(shape);
    for (double& v : t.values()) v = get<double>(is, path);
    store.add(name, std::move(t));
  }
  return store;
}

std::string manifest_text(const ParamStore& store) {
  std::ostringstream os;
  for (const auto& [name, p] : store) {
    os << name;
    for (std::size_t d : p.value.shape()) os << ' ' << d;
    os << '\n';
  }
  return os.str();
}

void save_manifest(const ParamStore& store, const std::filesystem::path& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  os << manifest_text(store);
}

}  // namespace cast
