#pragma once

namespace pht {

// Reserved vocabulary ids, stable across every saved vocabulary.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kCommaId = 4;
inline constexpr int kNumReserved = 5;

}  // namespace pht
