#pragma once

#include "tpmamba/encoder.hpp"
#include "tpmamba/grad_check.hpp"

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace tpmamba {

struct CheckLine {
  std::string name;
  double value = 0;      // measured error (or 0/1 for exact checks)
  double tolerance = 0;  // pass iff value < tolerance, or value == 0 when tolerance is 0
  bool pass = false;
};

struct SuiteReport {
  std::string name;
  std::vector<CheckLine> lines;
  double seconds = 0;

  bool pass() const;
  void add(std::string line_name, double value, double tolerance);
  void add_exact(std::string line_name, bool ok);
};

void print_report(std::ostream& os, const SuiteReport& r);

/// Overwrites every trainable parameter with U(-scale, scale) draws so that
/// zero-initialised paths carry gradient. `a_log`-style parameters stay finite.
template <typename S>
void randomize_trainables(const ParameterList<S>& params, std::mt19937_64& rng, double scale = 0.3);

/// max |a - b| / max |b|, zero when both are all-zero.
template <typename S>
double max_rel_diff(const Tensor<S>& a, const Tensor<S>& b);

/// Chunked scan vs recurrence oracle on `configs` random problems with L
/// cycling over {1, 2, 7, 64, 513}. A positive `inner` fixes E (and `state` N).
SuiteReport scan_suite(std::uint64_t seed, Index configs = 100, Index inner = 0, Index state = 0);

/// Finite-difference checks of every differentiable op and composite at toy sizes.
SuiteReport grad_suite(std::uint64_t seed);

/// Gradient check of one full adapter built from `cfg` at (B=1, D=3, h=w=2).
SuiteReport adapter_grad_suite(const TPMambaConfig& cfg, std::uint64_t seed);

/// Flatten/unflatten bit-exactness over all modes and random shapes, layout
/// round trips, and the plane-sum decomposition of the tri-plane adapter.
SuiteReport triplane_suite(const TPMambaConfig& cfg, std::uint64_t seed, Index shapes = 5);

/// Encoder with adapters and LoRA at init vs an adapter-free encoder holding
/// the same frozen weights, on `inputs` random volumes; bit-exact.
SuiteReport init_transparency_suite(const ViTConfig& cfg, std::uint64_t seed, Index inputs = 5);

/// Layout, checkpoint and RVOL byte-level round trips.
SuiteReport roundtrip_suite(std::uint64_t seed);

/// "grad", "scan", "roundtrip" or "all"; prints reports and returns overall pass.
bool run_check_suite(std::string_view suite, std::ostream& os, std::uint64_t seed = 1);

}  // namespace tpmamba
