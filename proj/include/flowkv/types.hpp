#pragma once

#include <cstdint>

namespace flowkv {

/// Dense agent index; the reserved END symbol is one past the last agent.
using AgentId = int;

/// Opaque token identifier; only equality matters for prefix matching.
using TokenId = std::uint64_t;

using WorkflowId = std::int64_t;

}  // namespace flowkv
