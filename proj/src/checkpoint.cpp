#include "pht/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "pht/errors.hpp"

namespace pht {

namespace {

constexpr std::array<char, 8> kMagic = {'P', 'H', 'T', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::filesystem::path& path) {
  std::array<unsigned char, sizeof(T)> bytes;
  is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T));
  if (!is) throw IoError("truncated checkpoint: " + path.string());
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
  // Write to a sibling and rename so a crash never leaves a torn checkpoint.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint: " + tmp.string());
    os.write(kMagic.data(), kMagic.size());
    write_le<std::uint32_t>(os, kCheckpointVersion);
    write_le<std::uint64_t>(os, entries.size());
    for (const NamedTensor& e : entries) {
      write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
      os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.tensor.rank()));
      for (std::size_t d : e.tensor.shape()) write_le<std::uint64_t>(os, d);
      for (double v : e.tensor.data()) write_le<double>(os, v);
    }
    if (!os) throw IoError("failed writing checkpoint: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw IoError("not a checkpoint file: " + path.string());
  const auto version = read_le<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  const auto count = read_le<std::uint64_t>(is, path);
  std::vector<NamedTensor> entries;
  entries.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = read_le<std::uint32_t>(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw IoError("truncated checkpoint: " + path.string());
    const auto rank = read_le<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(read_le<std::uint64_t>(is, path));
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = read_le<double>(is, path);
    entries.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return entries;
}

}  // namespace pht
