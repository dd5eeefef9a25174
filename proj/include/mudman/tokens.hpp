#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace mudman {

using TokenId = std::int32_t;

/// Token ids, row-major [batch, seq]. Attention is causal over the full row.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<TokenId> ids;

  TokenId at(std::size_t b, std::size_t t) const { return ids[b * seq + t]; }
  const TokenId* row(std::size_t b) const { return ids.data() + b * seq; }
  bool operator==(const TokenBatch&) const = default;
};

}  // namespace mudman
