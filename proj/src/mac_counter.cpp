#include "skipat/mac_counter.hpp"

#include <numeric>

namespace skipat {

const char* block_kind_name(BlockKind kind) {
  switch (kind) {
    case BlockKind::patch_embed: return "patch_embed";
    case BlockKind::msa: return "msa";
    case BlockKind::attn_reuse_msa: return "attn_reuse_msa";
    case BlockKind::phi: return "phi";
    case BlockKind::mlp: return "mlp";
    case BlockKind::head: return "head";
  }
  return "unknown";
}

void MacCounter::enter(const std::string& block, BlockKind kind) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].block == block) {
      current_ = i;
      return;
    }
  }
  entries_.push_back({block, kind, 0});
  current_ = entries_.size() - 1;
}

void MacCounter::add(std::uint64_t macs) {
  if (current_ == SIZE_MAX) enter("unattributed", BlockKind::head);
  entries_[current_].macs += macs;
}

std::uint64_t MacCounter::total() const noexcept {
  return std::accumulate(entries_.begin(), entries_.end(), std::uint64_t{0},
                         [](std::uint64_t acc, const Entry& e) { return acc + e.macs; });
}

}  // namespace skipat
