// SPDX-License-Identifier: Apache-2.0

#include "evla/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>

#include "evla/error.hpp"
#include "evla/tensor.hpp"

namespace evla {
namespace {

using Clock = std::chrono::steady_clock;

constexpr std::array<DecodePath, 3> kOrder = {DecodePath::kArNoCache, DecodePath::kArCache,
                                              DecodePath::kJoint};

std::size_t index_of(DecodePath path) {
  for (std::size_t i = 0; i < kOrder.size(); ++i) {
    if (kOrder[i] == path) return i;
  }
  fail(ErrorKind::kContract, "bench: unknown path");
}

double quantile_of(std::vector<double> samples, double q) {
  std::sort(samples.begin(), samples.end());
  return quantile_sorted(samples, q);
}

double safe_ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

}  // namespace

void BenchConfig::validate() const {
  if (allow_noisy) {
    if (repeats < 1) fail(ErrorKind::kContract, "bench: repeats must be >= 1");
    return;
  }
  if (repeats < kMinBenchRepeats || warmup < kMinBenchWarmup) {
    fail(ErrorKind::kContract,
         "bench: need repeats >= " + std::to_string(kMinBenchRepeats) + " and warmup >= " +
             std::to_string(kMinBenchWarmup) + " (got " + std::to_string(repeats) + ", " +
             std::to_string(warmup) + "); set bench.allow_noisy=true to override");
  }
}

KeyValues BenchConfig::to_kv() const {
  KeyValues kv;
  kv.set("bench.repeats", static_cast<std::uint64_t>(repeats));
  kv.set("bench.warmup", static_cast<std::uint64_t>(warmup));
  kv.set("bench.allow_noisy", allow_noisy);
  return kv;
}

BenchConfig BenchConfig::from_kv(const KeyValues& kv) {
  BenchConfig c;
  if (kv.contains("bench.repeats")) c.repeats = kv.get_uint("bench.repeats");
  if (kv.contains("bench.warmup")) c.warmup = kv.get_uint("bench.warmup");
  if (kv.contains("bench.allow_noisy")) c.allow_noisy = kv.get_bool("bench.allow_noisy");
  return c;
}

const PathStats& BenchReport::stats(DecodePath path) const { return paths[index_of(path)]; }

double BenchReport::latency_ratio(DecodePath path) const {
  return safe_ratio(stats(path).median_ns, stats(DecodePath::kJoint).median_ns);
}

double BenchReport::flop_ratio(DecodePath path) const {
  return safe_ratio(static_cast<double>(stats(path).flops_analytic),
                    static_cast<double>(stats(DecodePath::kJoint).flops_analytic));
}

double BenchReport::memory_ratio(DecodePath path) const {
  return safe_ratio(static_cast<double>(stats(path).peak_bytes),
                    static_cast<double>(stats(DecodePath::kJoint).peak_bytes));
}

double measure_timer_granularity_ns() {
  constexpr int kSamples = 2001;
  std::vector<double> gaps;
  gaps.reserve(kSamples);
  for (int i = 0; i < kSamples; ++i) {
    const auto a = Clock::now();
    auto b = Clock::now();
    while (b == a) b = Clock::now();
    gaps.push_back(std::chrono::duration<double, std::nano>(b - a).count());
  }
  return quantile_of(std::move(gaps), 0.5);
}

void check_timer_resolution(const std::string& what, double median_ns, double granularity_ns) {
  if (median_ns < kMinTicksPerMedian * granularity_ns) {
    fail(ErrorKind::kContract,
         "bench: " + what + " median " + format_double(median_ns) + " ns is under " +
             format_double(kMinTicksPerMedian) + "x the timer granularity (" +
             format_double(granularity_ns) +
             " ns); use a larger model config or set bench.allow_noisy=true");
  }
}

BenchReport run_bench(const PolicyParams& params, const PolicyConfig& cfg,
                      const ActionCodec& codec, const Episode& episode,
                      const BenchConfig& bench, const KeyValues& run_config) {
  bench.validate();
  BenchReport report;
  report.config = run_config;
  report.repeats = bench.repeats;
  report.warmup = bench.warmup;
  report.noisy = bench.allow_noisy;
  report.timer_granularity_ns = measure_timer_granularity_ns();

  // Untimed pass: trace, FLOPs and peak transient bytes are deterministic.
  for (std::size_t i = 0; i < kOrder.size(); ++i) {
    PathStats& s = report.paths[i];
    s.path = kOrder[i];
    alloc_stats::reset_peak();
    const std::size_t base = alloc_stats::current_bytes();
    const DecodeResult r = decode(s.path, params, cfg, episode, codec);
    s.peak_bytes = alloc_stats::peak_bytes() - base;
    s.flops_measured = r.trace.flops;
    s.trunk_forwards = r.trace.trunk_forwards;
    s.token_forwards = r.trace.token_forwards;
    s.tokens = r.tokens;
    s.flops_analytic = count_flops(cfg, decode_layout(cfg), s.path);
  }

  for (std::size_t w = 0; w < bench.warmup; ++w) {
    for (DecodePath path : kOrder) decode(path, params, cfg, episode, codec);
  }
  std::array<std::vector<double>, 3> total, prefix, step;
  for (std::size_t rep = 0; rep < bench.repeats; ++rep) {
    for (std::size_t i = 0; i < kOrder.size(); ++i) {
      const auto t0 = Clock::now();
      const DecodeResult r = decode(kOrder[i], params, cfg, episode, codec);
      total[i].push_back(std::chrono::duration<double, std::nano>(Clock::now() - t0).count());
      prefix[i].push_back(static_cast<double>(r.trace.prefix_ns));
      step[i].push_back(static_cast<double>(r.trace.decode_ns));
    }
  }
  for (std::size_t i = 0; i < kOrder.size(); ++i) {
    PathStats& s = report.paths[i];
    s.median_ns = quantile_of(total[i], 0.5);
    s.p10_ns = quantile_of(total[i], 0.1);
    s.p90_ns = quantile_of(total[i], 0.9);
    s.prefix_median_ns = quantile_of(prefix[i], 0.5);
    s.decode_median_ns = quantile_of(step[i], 0.5);
    if (!bench.allow_noisy) {
      check_timer_resolution(to_string(s.path), s.median_ns, report.timer_granularity_ns);
    }
  }
  return report;
}

KeyValues bench_report_kv(const BenchReport& report) {
  KeyValues kv = report.config;
  kv.set("bench.repeats", static_cast<std::uint64_t>(report.repeats));
  kv.set("bench.warmup", static_cast<std::uint64_t>(report.warmup));
  kv.set("bench.allow_noisy", report.noisy);
  kv.set("bench.timer_granularity_ns", report.timer_granularity_ns);
  for (const PathStats& s : report.paths) {
    const std::string p = "path." + to_string(s.path) + ".";
    kv.set(p + "median_ns", s.median_ns);
    kv.set(p + "p10_ns", s.p10_ns);
    kv.set(p + "p90_ns", s.p90_ns);
    kv.set(p + "prefix_median_ns", s.prefix_median_ns);
    kv.set(p + "decode_median_ns", s.decode_median_ns);
    kv.set(p + "flops_analytic", s.flops_analytic);
    kv.set(p + "flops_measured", s.flops_measured);
    kv.set(p + "peak_bytes", static_cast<std::uint64_t>(s.peak_bytes));
    kv.set(p + "trunk_forwards", static_cast<std::uint64_t>(s.trunk_forwards));
    kv.set(p + "token_forwards", static_cast<std::uint64_t>(s.token_forwards));
    std::string tokens;
    for (int t : s.tokens) tokens += (tokens.empty() ? "" : ",") + std::to_string(t);
    kv.set(p + "tokens", tokens);
  }
  for (DecodePath path : {DecodePath::kArNoCache, DecodePath::kArCache}) {
    const std::string r = "ratio." + to_string(path) + "_over_joint.";
    kv.set(r + "latency", report.latency_ratio(path));
    kv.set(r + "flop", report.flop_ratio(path));
    kv.set(r + "memory", report.memory_ratio(path));
  }
  return kv;
}

std::string format_bench_kv(const BenchReport& report) { return bench_report_kv(report).format(); }

std::string format_bench_table(const BenchReport& report) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line,
                "Decode efficiency (%zu repeats after %zu warmup, timer granularity %.0f ns)\n\n",
                report.repeats, report.warmup, report.timer_granularity_ns);
  out += line;
  std::snprintf(line, sizeof line, "%-12s %11s %9s %9s %10s %10s %9s %10s %7s\n", "path",
                "latency_ms", "p10_ms", "p90_ms", "prefix_ms", "decode_ms", "mflop",
                "memory_kib", "passes");
  out += line;
  for (const PathStats& s : report.paths) {
    std::snprintf(line, sizeof line,
                  "%-12s %11.4f %9.4f %9.4f %10.4f %10.4f %9.3f %10.1f %7zu\n",
                  to_string(s.path).c_str(), s.median_ns * 1e-6, s.p10_ns * 1e-6,
                  s.p90_ns * 1e-6, s.prefix_median_ns * 1e-6, s.decode_median_ns * 1e-6,
                  static_cast<double>(s.flops_analytic) * 1e-6,
                  static_cast<double>(s.peak_bytes) / 1024.0, s.trunk_forwards);
    out += line;
  }
  out += "\n";
  for (DecodePath path : {DecodePath::kArNoCache, DecodePath::kArCache}) {
    const std::string name = "ratio " + to_string(path) + "/joint";
    std::snprintf(line, sizeof line, "%-24s latency %6.2fx   flop %6.2fx   memory %6.2fx\n",
                  name.c_str(), report.latency_ratio(path), report.flop_ratio(path),
                  report.memory_ratio(path));
    out += line;
  }
  out += "\nmemory is the peak transient allocation of one decode; weights are excluded\n";
  return out;
}

bool is_timing_key(const std::string& key) {
  auto ends_with = [&](std::string_view suffix) {
    return key.size() >= suffix.size() &&
           key.compare(key.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with("_ns") || (key.starts_with("ratio.") && ends_with(".latency"));
}

}  // namespace evla
