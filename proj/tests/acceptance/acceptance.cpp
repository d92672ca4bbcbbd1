// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance run. Prints one PASS or FAIL line per criterion and
// exits non-zero if any failed. Names given on the command line select a
// subset, e.g. `evla_acceptance codec kv_cache`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cli.hpp"
#include "evla/bench.hpp"
#include "evla/binary_io.hpp"
#include "evla/codec.hpp"
#include "evla/decode.hpp"
#include "evla/error.hpp"
#include "evla/grad_check.hpp"
#include "evla/mask.hpp"
#include "evla/policy.hpp"
#include "evla/seed.hpp"
#include "evla/trainer.hpp"

namespace evla {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, scale);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Full policy loss, encoder included, against central differences on every
// parameter of a 2-layer, dim-16, D=7 policy in each attention regime.
Verdict gradient_integrity() {
  const auto t0 = Clock::now();
  const TaskConfig task;
  const auto eps = gen_dataset(1, 64, Split::kTrain, task);
  double worst = 0.0;
  std::size_t checked = 0;
  bool pass = true;
  struct Regime {
    MaskMode mode;
    bool full;
  };
  for (const Regime r : {Regime{MaskMode::kJoint, false}, Regime{MaskMode::kJoint, true},
                         Regime{MaskMode::kCausal, false}}) {
    PolicyConfig cfg;
    cfg.model_dim = 16;
    cfg.encoder.model_dim = 16;
    cfg.encoder.feature_a = 8;
    cfg.encoder.feature_b = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.mlp_hidden = 32;
    cfg.action_bins = 16;
    cfg.mask_mode = r.mode;
    cfg.joint_full_bidirectional = r.full;
    cfg.seed = 3;
    PolicyParams p = init_params(cfg);
    const ActionCodec codec = fit_codec_for(eps, cfg, TrainConfig{});
    const Episode& ep = eps[5];
    Differentiable f;
    f.value = [&] {
      TrainingExample ex = make_example(p, cfg, ep, codec, r.mode);
      return example_step(p, cfg, ex, ep, codec, 0.0, true).loss;
    };
    f.gradient = [&] {
      TrainingExample ex = make_example(p, cfg, ep, codec, r.mode);
      example_step(p, cfg, ex, ep, codec, 1.0, true);
    };
    std::vector<Tensor*> params;
    for (auto& [name, t] : p.named()) params.push_back(t);
    const GradCheckReport rep = grad_check(f, params, {.step = 1e-5, .tol = 1e-4});
    worst = std::max(worst, rep.max_rel_error);
    checked += rep.checked;
    pass = pass && rep.passed() && rep.checked == p.parameter_count();
  }
  const double secs = seconds_since(t0);
  pass = pass && worst < 1e-4 && secs < 120.0;
  return {pass, fmt("max_rel_err=%.3g elements=%zu regimes=3 time=%.1fs", worst, checked, secs)};
}

// Randomized perturbations of the trunk input: in causal mode no earlier row
// moves; in joint mode every action row moves for every prefix position.
Verdict mask_semantics() {
  const PolicyConfig base;
  const SequenceLayout layout = decode_layout(base);
  const std::size_t T = layout.total();
  const std::size_t trials = 20;
  std::mt19937_64 rng(derive_seed(2024, "mask.trials"));
  double causal_leak = 0.0;
  std::size_t causal_rows = 0;
  double joint_min = INFINITY;
  std::size_t joint_pairs = 0;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    PolicyConfig cfg = base;
    cfg.seed = trial;
    cfg.mask_mode = MaskMode::kCausal;
    const PolicyParams p = init_params(cfg);
    const Tensor x = random_tensor({T, cfg.model_dim}, rng);

    const AttentionMask causal = build_mask(layout, MaskMode::kCausal);
    const Tensor ref = forward(p, cfg, x, causal);
    const std::size_t t = std::uniform_int_distribution<std::size_t>(1, T - 1)(rng);
    Tensor y = x;
    for (std::size_t s = t; s < T; ++s) {
      for (std::size_t j = 0; j < cfg.model_dim; ++j) y.at(s, j) += std::normal_distribution<>(0, 1)(rng);
    }
    const Tensor out = forward(p, cfg, y, causal);
    for (std::size_t r = 0; r < t; ++r) {
      causal_leak = std::max(causal_leak, max_abs_diff(out.row(r), ref.row(r)));
      ++causal_rows;
    }

    for (bool full : {false, true}) {
      const AttentionMask joint = build_mask(layout, MaskMode::kJoint, {full});
      const Tensor jref = forward(p, cfg, x, joint);
      for (std::size_t q = 0; q < layout.prefix_len; ++q) {
        Tensor z = x;
        for (std::size_t j = 0; j < cfg.model_dim; ++j) z.at(q, j) += 1e-4 * std::normal_distribution<>(0, 1)(rng);
        const Tensor jout = forward(p, cfg, z, joint);
        for (std::size_t r = layout.action_begin(); r < T; ++r) {
          joint_min = std::min(joint_min, max_abs_diff(jout.row(r), jref.row(r)));
          ++joint_pairs;
        }
      }
    }
  }
  const bool pass = causal_leak <= 1e-12 && joint_min > 0.0;
  return {pass, fmt("trials=%zu causal_max_leak=%.3g over %zu rows; joint_min_sensitivity=%.3g "
                    "over %zu (prefix, action) pairs",
                    trials, causal_leak, causal_rows, joint_min, joint_pairs)};
}

struct ParityRun {
  std::string regime;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double seconds = 0.0;
  Checkpoint checkpoint;
};

std::vector<ParityRun> g_parity_runs;

Verdict training_parity() {
  const std::vector<std::uint64_t> seeds = {0, 1, 2};
  struct Regime {
    const char* name;
    MaskMode mode;
    bool full;
  };
  const Regime regimes[] = {{"joint", MaskMode::kJoint, false},
                            {"causal", MaskMode::kCausal, false},
                            {"joint_full", MaskMode::kJoint, true}};
  g_parity_runs.clear();
  for (const Regime& r : regimes) {
    for (std::uint64_t seed : seeds) {
      TrainingInputs in;
      in.policy.mask_mode = r.mode;
      in.policy.joint_full_bidirectional = r.full;
      in.train.seed = seed;
      in.train.threads = std::max(1u, std::thread::hardware_concurrency());
      const auto t0 = Clock::now();
      TrainingOutcome out = run_training(std::move(in));
      ParityRun run{r.name, seed, out.final_val.token_accuracy, seconds_since(t0),
                    std::move(out.checkpoint)};
      std::printf("  parity %-10s seed=%llu val_accuracy=%.4f vector_accuracy=%.4f time=%.0fs\n",
                  r.name, static_cast<unsigned long long>(seed), run.accuracy,
                  out.final_val.vector_accuracy, run.seconds);
      std::fflush(stdout);
      g_parity_runs.push_back(std::move(run));
    }
  }
  auto med = [](const std::string& name) {
    std::vector<double> acc;
    for (const ParityRun& r : g_parity_runs) {
      if (r.regime == name) acc.push_back(r.accuracy);
    }
    return median(acc);
  };
  double lowest = 1.0, slowest = 0.0;
  for (const ParityRun& r : g_parity_runs) {
    lowest = std::min(lowest, r.accuracy);
    slowest = std::max(slowest, r.seconds);
  }
  const double joint = med("joint"), causal = med("causal"), full = med("joint_full");
  const double gap = std::abs(joint - causal);
  const double gap_full = std::abs(full - causal);
  const bool pass = lowest >= 0.9 && gap <= 0.05 && gap_full <= 0.05 && slowest < 1800.0;
  return {pass, fmt("median joint=%.4f causal=%.4f joint_full=%.4f; min=%.4f; |gap|=%.4f "
                    "(full %.4f); slowest run %.0fs",
                    joint, causal, full, lowest, gap, gap_full, slowest)};
}

BenchReport g_bench;
bool g_have_bench = false;

const BenchReport& default_bench() {
  if (!g_have_bench) {
    PolicyConfig cfg;
    cfg.mask_mode = MaskMode::kJoint;
    const PolicyParams params = init_params(cfg);
    const auto fit = gen_dataset(derive_seed(0, "data"), 1024, Split::kTrain, TaskConfig{});
    const ActionCodec codec = fit_codec_for(fit, cfg, TrainConfig{});
    const Episode ep = gen_episode(episode_seed(derive_seed(0, "data"), Split::kVal, 0), TaskConfig{});
    KeyValues run;
    run.merge(cfg.to_kv());
    g_bench = run_bench(params, cfg, codec, ep, BenchConfig{}, run);
    g_have_bench = true;
  }
  return g_bench;
}

Verdict speedup_mechanism() {
  PolicyConfig cfg;
  const SequenceLayout layout = decode_layout(cfg);
  const BenchReport& r = default_bench();
  const PathStats& joint = r.stats(DecodePath::kJoint);
  const PathStats& cache = r.stats(DecodePath::kArCache);
  const PathStats& nocache = r.stats(DecodePath::kArNoCache);

  const bool trace_ok = joint.trunk_forwards == 1 && joint.token_forwards == 1 &&
                        cache.token_forwards == cfg.action_dims &&
                        nocache.token_forwards == cfg.action_dims &&
                        nocache.trunk_forwards == cfg.action_dims + 1;
  bool flops_ok = true;
  for (const PathStats& s : r.paths) flops_ok = flops_ok && s.flops_analytic == s.flops_measured;
  const double flop_ratio = r.flop_ratio(DecodePath::kArNoCache);
  const double latency_ratio = r.latency_ratio(DecodePath::kArNoCache);
  const double cache_ratio = r.latency_ratio(DecodePath::kArCache);

  bool monotone = true;
  double prev = 0.0;
  std::string sweep;
  // The model stays fixed and only the number of decoded slots changes.
  for (std::size_t d = 1; d <= 16; ++d) {
    const SequenceLayout l{layout.prefix_len, d};
    const double ratio = static_cast<double>(count_flops(cfg, l, DecodePath::kArNoCache)) /
                         static_cast<double>(count_flops(cfg, l, DecodePath::kJoint));
    monotone = monotone && ratio > prev;
    prev = ratio;
    if (d == 1 || d == 7 || d == 16) sweep += fmt(" D%zu=%.3f", d, ratio);
  }
  const bool pass = trace_ok && flops_ok && latency_ratio >= 0.6 * flop_ratio &&
                    cache_ratio > 1.0 && monotone && layout.prefix_len == 17;
  return {pass, fmt("trunk passes joint=%zu ar=%zu (%zu token-emitting); flop_ratio=%.3f (oracle==counter: %s); "
                    "latency_ratio=%.3f (>= %.3f); ar_cache/joint=%.3f; sweep%s monotone=%s",
                    joint.trunk_forwards, nocache.trunk_forwards, nocache.token_forwards,
                    flop_ratio, flops_ok ? "yes" : "no", latency_ratio, 0.6 * flop_ratio,
                    cache_ratio, sweep.c_str(), monotone ? "yes" : "no")};
}

Verdict codec_properties() {
  std::mt19937_64 rng(derive_seed(7, "codec.actions"));
  const std::size_t dims = 7;
  auto draw = [&](std::size_t n, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<std::vector<double>> out(n, std::vector<double>(dims));
    for (auto& a : out) {
      for (double& v : a) v = u(rng);
    }
    return out;
  };
  const auto fit = draw(5000, -1.0, 1.0);
  const auto probe = draw(10000, -1.25, 1.25);
  double worst = 0.0;
  bool monotone = true, disjoint = true;
  for (std::size_t bins : {8u, 64u, 256u}) {
    const ActionCodec c = fit_codec(fit, bins, 0.01, 0.99, 8);
    for (const auto& a : probe) {
      const auto back = c.detokenize(c.tokenize(a));
      for (std::size_t d = 0; d < dims; ++d) {
        const double clipped = std::clamp(a[d], c.lower(d), c.upper(d));
        const double half = 0.5 * c.bin_width(d, c.bin_of(d, a[d]));
        worst = std::max(worst, std::abs(back[d] - clipped) / half);
      }
    }
    for (std::size_t d = 0; d < dims; ++d) {
      std::vector<double> xs;
      for (const auto& a : probe) xs.push_back(a[d]);
      std::sort(xs.begin(), xs.end());
      for (std::size_t i = 1; i < xs.size(); ++i) {
        monotone = monotone && c.bin_of(d, xs[i - 1]) <= c.bin_of(d, xs[i]);
      }
    }
    std::set<int> seen;
    for (std::size_t d = 0; d < dims; ++d) {
      for (std::size_t b = 0; b < bins; ++b) {
        const int tok = c.vocab_offset(d) + static_cast<int>(b);
        disjoint = disjoint && tok >= 8 && seen.insert(tok).second;
      }
    }
  }
  // The midpoint itself may round by a few ulps.
  const bool pass = worst <= 1.0 + 1e-9 && monotone && disjoint;
  return {pass, fmt("bins={8,64,256} actions=%zu worst_error/half_bin=%.6f monotone=%s "
                    "disjoint=%s",
                    probe.size(), worst, monotone ? "yes" : "no", disjoint ? "yes" : "no")};
}

// Cached and uncached greedy decodes of 100 episodes, on a fresh causal
// policy and, when the parity runs are available, on a trained one.
Verdict kv_cache_transparency() {
  const auto episodes = gen_dataset(derive_seed(99, "kv"), 100, Split::kVal, TaskConfig{});
  struct Model {
    std::string name;
    PolicyConfig cfg;
    PolicyParams params;
    ActionCodec codec;
  };
  std::vector<Model> models;
  {
    PolicyConfig cfg;
    cfg.mask_mode = MaskMode::kCausal;
    const auto fit = gen_dataset(derive_seed(0, "data"), 1024, Split::kTrain, TaskConfig{});
    models.push_back({"random-init", cfg, init_params(cfg), fit_codec_for(fit, cfg, TrainConfig{})});
  }
  for (const ParityRun& r : g_parity_runs) {
    if (r.regime == "causal") {
      models.push_back({"trained", r.checkpoint.policy, r.checkpoint.params, r.checkpoint.codec});
      break;
    }
  }
  double worst = 0.0;
  std::size_t mismatched = 0, decoded = 0;
  for (const Model& m : models) {
    for (const Episode& ep : episodes) {
      const DecodeResult a = decode_autoregressive(m.params, m.cfg, ep, m.codec, true);
      const DecodeResult b = decode_autoregressive(m.params, m.cfg, ep, m.codec, false);
      if (a.tokens != b.tokens) ++mismatched;
      worst = std::max(worst, max_abs_diff(a.logits.values(), b.logits.values()));
      ++decoded;
    }
  }
  const bool pass = mismatched == 0 && worst <= 1e-10;
  return {pass, fmt("episodes=%zu models=%zu token_mismatches=%zu max_logit_diff=%.3g",
                    episodes.size(), models.size(), mismatched, worst)};
}

std::string without_timing(const std::string& kv_text) {
  std::istringstream in(kv_text);
  std::string line, out;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos && line[0] != '#' && is_timing_key(line.substr(0, eq))) continue;
    out += line + "\n";
  }
  return out;
}

// Drops the wall-clock column (the sixth) from every data row.
std::string without_wall_clock(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#' && line.find(',') != std::string::npos) {
      std::vector<std::string> cells;
      std::stringstream row(line);
      std::string cell;
      while (std::getline(row, cell, ',')) cells.push_back(cell);
      if (cells.size() > 5) cells.erase(cells.begin() + 5);
      line.clear();
      for (std::size_t i = 0; i < cells.size(); ++i) line += (i ? "," : "") + cells[i];
    }
    out += line + "\n";
  }
  return out;
}

Verdict determinism() {
  const fs::path root = fs::temp_directory_path() / "evla_acceptance_determinism";
  fs::remove_all(root);
  std::ostringstream sink;
  auto cli = [&](std::vector<std::string> args) {
    const int code = cli::run_cli(args, sink, sink);
    if (code != 0) fail(ErrorKind::kState, "cli failed: " + sink.str());
  };
  const std::vector<std::string> small = {"--set", "train.train_size=256", "--set",
                                          "train.val_size=64", "--set", "train.eval_every=10"};
  auto with = [&](std::vector<std::string> args) {
    args.insert(args.end(), small.begin(), small.end());
    return args;
  };
  // Both runs use the same directory so their resolved configs, which record
  // input paths, are identical. The first run's artifacts are read before the
  // second overwrites them.
  const std::string dir = (root / "run").string();
  auto run_all = [&] {
    fs::remove_all(root);
    cli({"gen-data", "--split", "train", "--n", "500", "--seed", "11", "--out", dir + "/data"});
    cli({"gen-data", "--split", "val", "--n", "100", "--seed", "11", "--out", dir + "/data"});
    cli(with({"train", "--mode", "joint", "--steps", "30", "--seed", "11", "--out", dir + "/train"}));
    cli({"bench", "--checkpoint", dir + "/train/checkpoint.bin", "--out", dir + "/bench"});
  };
  struct Artifact {
    std::string path;
    std::function<std::string(const std::string&)> normalize;
  };
  const auto same = [](const std::string& s) { return s; };
  const Artifact artifacts[] = {{"data/train.bin", same},
                                {"data/train.manifest", same},
                                {"data/val.bin", same},
                                {"data/val.manifest", same},
                                {"train/checkpoint.bin", same},
                                {"train/codec.txt", same},
                                {"train/metrics.csv", without_wall_clock},
                                {"bench/bench.txt", without_timing}};
  std::vector<std::string> first;
  run_all();
  for (const Artifact& a : artifacts) first.push_back(read_file((root / "run" / a.path).string()));
  run_all();
  bool pass = true;
  std::string detail;
  for (std::size_t i = 0; i < std::size(artifacts); ++i) {
    const Artifact& a = artifacts[i];
    const std::string x = a.normalize(first[i]);
    const std::string y = a.normalize(read_file((root / "run" / a.path).string()));
    const bool ok = x == y;
    pass = pass && ok;
    detail += fmt(" %s=%016llx%s", a.path.c_str(),
                  static_cast<unsigned long long>(fnv1a64(x)), ok ? "" : "(DIFFERS)");
  }
  fs::remove_all(root);
  return {pass, "checksums" + detail};
}

Verdict table_report() {
  const BenchReport& r = default_bench();
  const std::string table = format_bench_table(r);
  const KeyValues kv = KeyValues::parse(format_bench_kv(r));
  bool columns = true;
  for (const char* needle : {"latency_ms", "memory_kib", "ar_nocache", "ar_cache", "joint",
                             "ratio ar_nocache/joint", "ratio ar_cache/joint"}) {
    columns = columns && table.find(needle) != std::string::npos;
  }
  double worst = 0.0;
  for (DecodePath p : {DecodePath::kArNoCache, DecodePath::kArCache}) {
    const std::string name = to_string(p);
    auto check = [&](const std::string& metric, const std::string& field) {
      const double want = kv.get_double("path." + name + "." + field) /
                          kv.get_double("path.joint." + field);
      const double got = kv.get_double("ratio." + name + "_over_joint." + metric);
      worst = std::max(worst, std::abs(got - want) / want);
    };
    check("latency", "median_ns");
    check("flop", "flops_analytic");
    check("memory", "peak_bytes");
  }
  const bool pass = columns && worst <= 1e-12;
  std::string ratio_row;
  std::istringstream in(table);
  std::string line;
  while (std::getline(in, line)) {
    if (line.starts_with("ratio ar_nocache")) ratio_row = line;
  }
  return {pass, fmt("columns=%s max_ratio_recompute_err=%.3g; %s", columns ? "yes" : "no", worst,
                    ratio_row.c_str())};
}

struct Criterion {
  const char* name;
  Verdict (*run)();
};

}  // namespace
}  // namespace evla

int main(int argc, char** argv) {
  using namespace evla;
  const Criterion criteria[] = {
      {"gradient_integrity", gradient_integrity}, {"mask_semantics", mask_semantics},
      {"training_parity", training_parity},       {"speedup_mechanism", speedup_mechanism},
      {"codec_properties", codec_properties},     {"kv_cache_transparency", kv_cache_transparency},
      {"determinism", determinism},               {"table_report", table_report},
  };
  std::set<std::string> wanted(argv + 1, argv + argc);
  int failures = 0;
  for (const Criterion& c : criteria) {
    if (!wanted.empty() && !wanted.contains(c.name)) continue;
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    if (!v.pass) ++failures;
    std::printf("%s %s: %s\n", v.pass ? "PASS" : "FAIL", c.name, v.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
