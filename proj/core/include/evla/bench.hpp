// SPDX-License-Identifier: Apache-2.0

// Latency / FLOP / memory comparison of the three decode paths on one
// episode. Timing is single-threaded; each repeat runs every path once, in
// a fixed order, so slow drift in machine load hits all paths alike.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "evla/codec.hpp"
#include "evla/decode.hpp"
#include "evla/kv.hpp"
#include "evla/policy.hpp"
#include "evla/toy_world.hpp"

namespace evla {

inline constexpr std::size_t kMinBenchRepeats = 30;
inline constexpr std::size_t kMinBenchWarmup = 5;
// A path's median must be at least this many timer ticks.
inline constexpr double kMinTicksPerMedian = 100.0;

struct BenchConfig {
  std::size_t repeats = 30;
  std::size_t warmup = 5;
  // Skip the repeat/warmup minimums and the timer-resolution check.
  bool allow_noisy = false;

  void validate() const;
  // `bench.*` keys.
  KeyValues to_kv() const;
  static BenchConfig from_kv(const KeyValues& kv);
};

struct PathStats {
  DecodePath path = DecodePath::kJoint;
  double median_ns = 0.0;
  double p10_ns = 0.0;
  double p90_ns = 0.0;
  double prefix_median_ns = 0.0;
  double decode_median_ns = 0.0;
  std::uint64_t flops_analytic = 0;
  std::uint64_t flops_measured = 0;
  std::size_t peak_bytes = 0;  // peak transient allocation during one decode
  std::size_t trunk_forwards = 0;
  std::size_t token_forwards = 0;
  std::vector<int> tokens;
};

struct BenchReport {
  KeyValues config;  // run config echo
  std::size_t repeats = 0;
  std::size_t warmup = 0;
  bool noisy = false;
  double timer_granularity_ns = 0.0;
  std::array<PathStats, 3> paths;  // ar_nocache, ar_cache, joint

  const PathStats& stats(DecodePath path) const;
  // Ratios of `path` over the joint path.
  double latency_ratio(DecodePath path) const;
  double flop_ratio(DecodePath path) const;
  double memory_ratio(DecodePath path) const;
};

// Median spacing between distinct steady_clock readings, in ns.
double measure_timer_granularity_ns();

// Contract error when `median_ns` spans fewer than kMinTicksPerMedian ticks.
void check_timer_resolution(const std::string& what, double median_ns, double granularity_ns);

BenchReport run_bench(const PolicyParams& params, const PolicyConfig& cfg,
                      const ActionCodec& codec, const Episode& episode,
                      const BenchConfig& bench, const KeyValues& run_config = {});

// Machine-readable report: run config plus `bench.*`, `path.<name>.*` and
// `ratio.<name>_over_joint.*` keys.
KeyValues bench_report_kv(const BenchReport& report);
std::string format_bench_kv(const BenchReport& report);
// Human-readable table: one row per path and a ratio row.
std::string format_bench_table(const BenchReport& report);

// Keys whose values come from the wall clock and so differ between reruns.
bool is_timing_key(const std::string& key);

}  // namespace evla
