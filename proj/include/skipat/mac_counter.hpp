#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace skipat {

enum class BlockKind { patch_embed, msa, attn_reuse_msa, phi, mlp, head };

const char* block_kind_name(BlockKind kind);

/// Per-call accumulator of multiply-accumulates. Owned by whoever runs the
/// counted pass and handed to ops by pointer, so concurrent passes never
/// share state.
class MacCounter {
 public:
  struct Entry {
    std::string block;
    BlockKind kind;
    std::uint64_t macs = 0;
  };

  /// Subsequent MACs are attributed to this block (created on first use).
  void enter(const std::string& block, BlockKind kind);
  void add(std::uint64_t macs);

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::uint64_t total() const noexcept;

 private:
  std::vector<Entry> entries_;
  std::size_t current_ = SIZE_MAX;
};

inline void count_macs(MacCounter* counter, std::uint64_t macs) {
  if (counter != nullptr) counter->add(macs);
}

}  // namespace skipat
