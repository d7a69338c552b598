#include "tpmamba/flops.hpp"

#include <iomanip>
#include <ostream>

namespace tpmamba {

std::string_view to_string(AdapterKind k) {
  switch (k) {
    case AdapterKind::lora: return "lora";
    case AdapterKind::sa_adapter: return "sa_adapter";
    case AdapterKind::conv3d_adapter: return "conv3d_adapter";
    case AdapterKind::tp_mamba: return "tp_mamba";
  }
  return "?";
}

AdapterKind parse_adapter_kind(std::string_view s) {
  for (AdapterKind k : {AdapterKind::lora, AdapterKind::sa_adapter, AdapterKind::conv3d_adapter, AdapterKind::tp_mamba}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown adapter kind '" + std::string(s) + "'");
}

Index token_count(const FlopsQuery& q) {
  if (q.patch <= 0 || q.channels <= 0 || q.rank <= 0) throw ConfigError("flops: extents must be positive");
  for (Index d : q.input) {
    if (d <= 0) throw ConfigError("flops: input extents must be positive");
  }
  return q.input[0] * (q.input[1] / q.patch) * (q.input[2] / q.patch);
}

double flops_estimate(AdapterKind kind, const FlopsQuery& q) {
  const double l = static_cast<double>(token_count(q));
  const double c = static_cast<double>(q.channels), r = static_cast<double>(q.rank);
  switch (kind) {
    case AdapterKind::lora: return 2.0 * 2.0 * l * c * static_cast<double>(q.lora_rank);
    case AdapterKind::sa_adapter: return 2.0 * l * l * c + 2.0 * l * c * r;
    case AdapterKind::conv3d_adapter: return l * c * r + 27.0 * l * r * r + l * r * c;
    case AdapterKind::tp_mamba: {
      const double k = static_cast<double>(q.depth_kernel);
      const double e = static_cast<double>(q.expand) * r, n = static_cast<double>(q.d_state);
      const double dt = static_cast<double>((q.rank + 15) / 16);
      const double per_token = r * 2 * e                    // in_proj
                               + e * static_cast<double>(q.d_conv)  // causal conv
                               + e * (dt + 2 * n)           // x_proj
                               + dt * e                     // dt_proj
                               + 3 * e * n                  // state update and readout
                               + e * r;                     // out_proj
      return k * c * r * l + k * r * r * l + 3 * per_token * l + k * r * c * l;
    }
  }
  return 0;
}

double gflops_estimate(AdapterKind kind, const FlopsQuery& q) { return flops_estimate(kind, q) / 1e9; }

void write_flops_sweep(std::ostream& os, const FlopsQuery& q) {
  os << "depth,height,width,tokens,lora,sa_adapter,conv3d_adapter,tp_mamba,sa_over_tp_mamba\n";
  os << std::setprecision(6);
  for (double m : {0.25, 0.5, 1.0, 2.0, 4.0}) {
    FlopsQuery s = q;
    s.input[0] = std::max<Index>(1, static_cast<Index>(static_cast<double>(q.input[0]) * m));
    os << s.input[0] << ',' << s.input[1] << ',' << s.input[2] << ',' << token_count(s);
    for (AdapterKind k : {AdapterKind::lora, AdapterKind::sa_adapter, AdapterKind::conv3d_adapter, AdapterKind::tp_mamba}) {
      os << ',' << gflops_estimate(k, s);
    }
    os << ',' << flops_estimate(AdapterKind::sa_adapter, s) / flops_estimate(AdapterKind::tp_mamba, s) << '\n';
  }
}

}  // namespace tpmamba
