#pragma once

#include "tpmamba/triplane.hpp"

#include <iosfwd>
#include <string_view>

namespace tpmamba {

enum class AdapterKind { lora, sa_adapter, conv3d_adapter, tp_mamba };

std::string_view to_string(AdapterKind k);
AdapterKind parse_adapter_kind(std::string_view s);

/// Per-ViT-block adapter cost for a D x H x W input after slice-wise patch
/// embedding, i.e. L = D * (H / patch) * (W / patch) tokens of width C.
/// Counts are multiply-accumulates, one per multiply-add.
struct FlopsQuery {
  std::array<Index, 3> input{96, 96, 96};
  Index channels = 768;
  Index rank = 96;
  Index patch = 16;
  Index lora_rank = 12;  // rank of the LoRA reference on Q and V
  Index depth_kernel = 3;
  Index d_state = 16;
  Index expand = 2;
  Index d_conv = 4;
};

Index token_count(const FlopsQuery& q);

/// lora:           Q and V each get x -> A x -> B(A x): 2 * 2 * L * C * lora_rank.
/// sa_adapter:     self-attention over all L tokens at width C (QK^T and AV,
///                 2 * L^2 * C) plus the C -> r -> C bottleneck (2 * L * C * r).
/// conv3d_adapter: C -> r pointwise, 3x3x3 conv r -> r, r -> C pointwise.
/// tp_mamba:       depth-kernel reduce and raise, four dilated branches
///                 (k * r^2 * L in total) and three plane scans.
double flops_estimate(AdapterKind kind, const FlopsQuery& q);
double gflops_estimate(AdapterKind kind, const FlopsQuery& q);

/// CSV sweep over depth multiples of `q.input`.
void write_flops_sweep(std::ostream& os, const FlopsQuery& q);

}  // namespace tpmamba
