#pragma once

#include <cstddef>
#include <utility>

namespace diffnaf {

// Deterministic parallel scatter: work items are partitioned into a fixed
// number of slots by index (never by thread), each slot accumulates
// sequentially into its own buffer, and buffers are reduced in slot order.
// Results are bitwise identical for any thread count, including 1.
constexpr int kNumSlots = 8;

// Half-open index range of `slot` when n items are split across kNumSlots.
inline std::pair<size_t, size_t> slot_range(size_t n, int slot) {
    size_t lo = n * static_cast<size_t>(slot) / kNumSlots;
    size_t hi = n * (static_cast<size_t>(slot) + 1) / kNumSlots;
    return {lo, hi};
}

}  // namespace diffnaf
