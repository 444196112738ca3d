#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pht/tensor.hpp"

namespace pht {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Binary layout, all integers little-endian:
//   magic "PHTCKPT\0" | u32 version | u64 entry count
//   per entry: u32 name length | name bytes | u32 rank | u64 dims[rank] | f64 data[]
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace pht
