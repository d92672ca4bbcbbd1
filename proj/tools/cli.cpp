// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <thread>

#include "evla/bench.hpp"
#include "evla/binary_io.hpp"
#include "evla/checkpoint.hpp"
#include "evla/decode.hpp"
#include "evla/seed.hpp"
#include "evla/trainer.hpp"

namespace evla::cli {
namespace {

namespace fs = std::filesystem;

// Defaults for every key the tool understands. Keys outside this set are
// rejected wherever they come from.
KeyValues default_config() {
  KeyValues kv = PolicyConfig{}.to_kv();
  kv.merge(TrainConfig{}.to_kv());
  kv.merge(TaskConfig{}.to_kv());
  kv.merge(BenchConfig{}.to_kv());
  kv.set("bench.episode_index", std::uint64_t{0});
  kv.set("data.dir", std::string());
  kv.set("data.n", std::uint64_t{0});
  kv.set("data.split", std::string("train"));
  kv.set("eval.n", std::uint64_t{0});
  kv.set("eval.split", std::string("val"));
  return kv;
}

void require_known(const KeyValues& kv, const KeyValues& known, const std::string& origin) {
  for (const auto& [key, value] : kv.entries()) {
    if (!known.contains(key)) fail(ErrorKind::kConfig, origin + ": unknown key '" + key + "'");
  }
}

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
  cmd->add_option("--config", c.config_file, "key=value config file");
  cmd->add_option("--set", c.sets, "override one key, e.g. --set train.lr=1e-3");
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (needs_out) out->required();
}

// defaults <- config file <- --set <- dedicated flags. Returns the resolved
// config; `explicit_keys` receives everything not coming from the defaults.
KeyValues resolve(const Common& c, const KeyValues& flags, KeyValues* explicit_keys = nullptr) {
  const KeyValues known = default_config();
  KeyValues user;
  if (!c.config_file.empty()) {
    const KeyValues file = KeyValues::parse(read_file(c.config_file), c.config_file);
    require_known(file, known, c.config_file);
    user.merge(file);
  }
  for (const std::string& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      fail(ErrorKind::kUsage, "--set expects key=value, got '" + s + "'");
    }
    KeyValues one;
    one.set(s.substr(0, eq), s.substr(eq + 1));
    require_known(one, known, "--set");
    user.merge(one);
  }
  require_known(flags, known, "flags");
  user.merge(flags);
  KeyValues resolved = known;
  resolved.merge(user);
  if (explicit_keys != nullptr) *explicit_keys = user;
  return resolved;
}

std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("EVLA_TOY_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || cap < 1) {
      fail(ErrorKind::kConfig, std::string("EVLA_TOY_THREADS must be a positive integer, got '") +
                                   env + "'");
    }
    n = std::min(n, static_cast<std::size_t>(cap));
  }
  return n;
}

void make_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::kFile, dir + ": cannot create directory (" + ec.message() + ")");
}

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

std::uint64_t data_seed(const KeyValues& cfg) { return derive_seed(cfg.get_uint("train.seed"), "data"); }

std::size_t split_default_size(const KeyValues& cfg, Split split) {
  return split == Split::kTrain ? cfg.get_uint("train.train_size") : cfg.get_uint("train.val_size");
}

// Model keys the user set must agree with the checkpoint.
void check_against_checkpoint(const KeyValues& explicit_keys, const Checkpoint& ckpt,
                              const std::string& path) {
  for (const auto& [key, value] : explicit_keys.entries()) {
    if (!key.starts_with("model.") && !key.starts_with("mask.")) continue;
    if (!ckpt.config.contains(key) || ckpt.config.get(key) != value) {
      fail(ErrorKind::kState, path + ": checkpoint has " + key + "=" +
                                  (ckpt.config.contains(key) ? ckpt.config.get(key) : "<unset>") +
                                  " but the run config asks for " + value);
    }
  }
}

std::string format_eval(const EvalMetrics& m) {
  KeyValues kv;
  kv.set("eval.token_accuracy", m.token_accuracy);
  kv.set("eval.vector_accuracy", m.vector_accuracy);
  kv.set("eval.l2_error", m.l2_error);
  kv.set("eval.loss", m.loss);
  kv.set("eval.episodes", static_cast<std::uint64_t>(m.episodes));
  kv.set("eval.positions", static_cast<std::uint64_t>(m.positions));
  return kv.format();
}

int cmd_gen_data(const Common& c, const KeyValues& flags, std::ostream& out) {
  KeyValues cfg = resolve(c, flags);
  const TaskConfig task = TaskConfig::from_kv(cfg);
  task.validate();
  const Split split = parse_split(cfg.get("data.split"));
  std::size_t n = cfg.get_uint("data.n");
  if (n == 0) n = split_default_size(cfg, split);
  cfg.set("data.n", static_cast<std::uint64_t>(n));

  const std::uint64_t seed = data_seed(cfg);
  const auto episodes = gen_dataset(seed, n, split, task, worker_threads());
  make_dir(c.out);
  const std::string name = to_string(split);
  write_dataset(join(c.out, name + ".bin"), episodes);
  DatasetManifest manifest;
  manifest.count = episodes.size();
  manifest.base_seed = seed;
  manifest.split = split;
  manifest.task = task;
  manifest.run_config = cfg;
  write_file(join(c.out, name + ".manifest"), manifest.format());
  out << "wrote " << episodes.size() << " " << name << " episodes to "
      << join(c.out, name + ".bin") << "\n";
  return kExitOk;
}

int cmd_train(const Common& c, const KeyValues& flags, std::ostream& out) {
  const KeyValues cfg = resolve(c, flags);
  TrainingInputs in;
  in.policy = PolicyConfig::from_kv(cfg);
  in.train = TrainConfig::from_kv(cfg);
  in.train.threads = worker_threads();
  in.task = TaskConfig::from_kv(cfg);
  in.run_config = cfg;
  in.out_dir = c.out;
  const std::string data_dir = cfg.get("data.dir");
  if (!data_dir.empty()) {
    for (const char* name : {"train.bin", "val.bin"}) {
      if (!fs::exists(join(data_dir, name))) {
        fail(ErrorKind::kFile, join(data_dir, name) + ": dataset file not found");
      }
    }
    in.train_set = read_dataset(join(data_dir, "train.bin"), in.task);
    in.val_set = read_dataset(join(data_dir, "val.bin"), in.task);
  }
  make_dir(c.out);
  const TrainingOutcome result = run_training(std::move(in));
  const MetricsRow& last = result.rows.back();
  out << "step " << last.step << ": val_accuracy " << format_double(last.val_accuracy)
      << ", vector_accuracy " << format_double(last.vector_accuracy) << ", val_loss "
      << format_double(last.val_loss) << "\n"
      << "params checksum " << params_checksum(result.checkpoint.params) << "\n"
      << "wrote " << join(c.out, "checkpoint.bin") << ", " << join(c.out, "metrics.csv") << "\n";
  return kExitOk;
}

int cmd_eval(const Common& c, const KeyValues& flags, const std::string& checkpoint_path,
             std::ostream& out) {
  KeyValues explicit_keys;
  const KeyValues user_cfg = resolve(c, flags, &explicit_keys);
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  check_against_checkpoint(explicit_keys, ckpt, checkpoint_path);

  KeyValues cfg = default_config();
  cfg.merge(ckpt.config);
  for (const char* key : {"eval.split", "eval.n", "data.dir"}) cfg.set(key, user_cfg.get(key));
  const TaskConfig task = TaskConfig::from_kv(cfg);
  const TrainConfig tcfg = TrainConfig::from_kv(cfg);

  std::vector<Episode> episodes;
  const std::string data_dir = cfg.get("data.dir");
  const Split split = parse_split(cfg.get("eval.split"));
  if (!data_dir.empty()) {
    const std::string path = join(data_dir, to_string(split) + ".bin");
    if (!fs::exists(path)) fail(ErrorKind::kFile, path + ": dataset file not found");
    episodes = read_dataset(path, task);
    if (episodes.empty()) fail(ErrorKind::kFile, path + ": dataset holds no episodes");
  } else {
    std::size_t n = cfg.get_uint("eval.n");
    if (n == 0) n = split_default_size(cfg, split);
    cfg.set("eval.n", static_cast<std::uint64_t>(n));
    episodes = gen_dataset(data_seed(cfg), n, split, task, worker_threads());
  }
  const EvalMetrics m = evaluate(ckpt.params, ckpt.policy, episodes, ckpt.codec,
                                 ckpt.policy.mask_mode, tcfg.restrict_argmax);
  const std::string report = format_eval(m);
  if (!c.out.empty()) {
    make_dir(c.out);
    write_file(join(c.out, "eval.txt"), cfg.format("# ") + report);
  }
  out << report;
  return kExitOk;
}

int cmd_bench(const Common& c, const KeyValues& flags, const std::string& checkpoint_path,
              std::ostream& out) {
  KeyValues explicit_keys;
  KeyValues cfg = resolve(c, flags, &explicit_keys);
  PolicyParams params;
  PolicyConfig policy;
  ActionCodec codec;
  if (!checkpoint_path.empty()) {
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    check_against_checkpoint(explicit_keys, ckpt, checkpoint_path);
    KeyValues merged = cfg;
    merged.merge(ckpt.config);
    for (const auto& [key, value] : cfg.entries()) {
      if (key.starts_with("bench.")) merged.set(key, value);
    }
    merged.set("bench.checkpoint", checkpoint_path);
    cfg = std::move(merged);
    policy = ckpt.policy;
    params = std::move(ckpt.params);
    codec = std::move(ckpt.codec);
  } else {
    policy = PolicyConfig::from_kv(cfg);
    policy.seed = derive_seed(cfg.get_uint("train.seed"), "init");
    policy.validate();
    cfg.merge(policy.to_kv());
    cfg.set("bench.checkpoint", std::string("random-init"));
    params = init_params(policy);
    const TrainConfig tcfg = TrainConfig::from_kv(cfg);
    const auto fit_set = gen_dataset(data_seed(cfg), tcfg.train_size, Split::kTrain,
                                     TaskConfig::from_kv(cfg), worker_threads());
    codec = fit_codec_for(fit_set, policy, tcfg);
  }
  const TaskConfig task = TaskConfig::from_kv(cfg);
  const std::size_t index = cfg.get_uint("bench.episode_index");
  const Episode episode = gen_episode(episode_seed(data_seed(cfg), Split::kVal, index), task);

  const BenchConfig bench = BenchConfig::from_kv(cfg);
  const BenchReport report = run_bench(params, policy, codec, episode, bench, cfg);
  const std::string table = format_bench_table(report);
  make_dir(c.out);
  write_file(join(c.out, "bench.txt"), format_bench_kv(report));
  write_file(join(c.out, "bench_table.txt"), cfg.format("# ") + table);
  out << table;
  return kExitOk;
}

}  // namespace

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage:
    case ErrorKind::kConfig: return kExitUsage;
    case ErrorKind::kFile:
    case ErrorKind::kState:
    case ErrorKind::kDecode: return kExitFileOrState;
    case ErrorKind::kDimension:
    case ErrorKind::kContract: return kExitContract;
  }
  return kExitContract;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Joint vs autoregressive action decoding on a toy manipulation task", "evla"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  Common common;
  KeyValues flags;
  std::optional<std::uint64_t> seed, n, steps, batch, repeats, warmup, episode_index;
  std::optional<double> lr;
  std::string split, mode, data_dir, checkpoint;
  bool full_bidirectional = false, random_init = false, allow_noisy = false;

  auto* gen = app.add_subcommand("gen-data", "generate a toy dataset split");
  add_common(gen, common);
  gen->add_option("--n", n, "number of episodes (default: train/val size of the split)");
  gen->add_option("--seed", seed, "run seed");
  gen->add_option("--split", split, "train or val")
      ->check(CLI::IsMember({"train", "val"}));

  auto* train = app.add_subcommand("train", "train a policy; writes checkpoint and metrics");
  add_common(train, common);
  train->add_option("--mode", mode, "attention regime")->check(CLI::IsMember({"joint", "causal"}));
  train->add_option("--steps", steps, "optimizer steps");
  train->add_option("--lr", lr, "Adam learning rate");
  train->add_option("--batch-size", batch, "episodes per step");
  train->add_option("--seed", seed, "run seed");
  train->add_option("--data", data_dir, "directory with train.bin and val.bin from gen-data");
  train->add_flag("--full-bidirectional", full_bidirectional,
                  "joint mode: let every position attend every position");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  add_common(eval, common, false);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--split", split, "train or val")
      ->check(CLI::IsMember({"train", "val"}));
  eval->add_option("--n", n, "episodes to generate (default: the split's size)");
  eval->add_option("--data", data_dir, "directory with <split>.bin from gen-data");

  auto* bench = app.add_subcommand("bench", "time the three decode paths");
  add_common(bench, common);
  auto* ck = bench->add_option("--checkpoint", checkpoint, "checkpoint file");
  auto* ri = bench->add_flag("--random-init", random_init, "use freshly initialized weights");
  ck->excludes(ri);
  bench->add_option("--repeats", repeats, "timed repeats per path (>= 30)");
  bench->add_option("--warmup", warmup, "discarded warmup runs per path (>= 5)");
  bench->add_flag("--allow-noisy", allow_noisy, "skip the repeat and timer-resolution checks");
  bench->add_option("--episode-index", episode_index, "validation episode to decode");
  bench->add_option("--seed", seed, "run seed");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    if (!app.get_subcommands().empty()) {
      err << app.get_subcommands().front()->help();
    } else {
      err << app.help();
    }
    return kExitUsage;
  }

  try {
    if (seed) flags.set("train.seed", *seed);
    if (gen->parsed()) {
      if (n) flags.set("data.n", *n);
      if (!split.empty()) flags.set("data.split", split);
      return cmd_gen_data(common, flags, out);
    }
    if (train->parsed()) {
      if (!mode.empty()) flags.set("mask.mode", mode);
      if (steps) flags.set("train.steps", *steps);
      if (lr) flags.set("train.lr", *lr);
      if (batch) flags.set("train.batch_size", *batch);
      if (full_bidirectional) flags.set("mask.joint_full_bidirectional", true);
      if (!data_dir.empty()) flags.set("data.dir", data_dir);
      return cmd_train(common, flags, out);
    }
    if (eval->parsed()) {
      if (n) flags.set("eval.n", *n);
      if (!split.empty()) flags.set("eval.split", split);
      if (!data_dir.empty()) flags.set("data.dir", data_dir);
      return cmd_eval(common, flags, checkpoint, out);
    }
    if (checkpoint.empty() && !random_init) {
      fail(ErrorKind::kUsage, "bench needs --checkpoint FILE or --random-init");
    }
    if (repeats) flags.set("bench.repeats", *repeats);
    if (warmup) flags.set("bench.warmup", *warmup);
    if (allow_noisy) flags.set("bench.allow_noisy", true);
    if (episode_index) flags.set("bench.episode_index", *episode_index);
    return cmd_bench(common, flags, checkpoint, out);
  } catch (const Error& e) {
    err << to_string(e.kind()) << " error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "file error: " << e.what() << "\n";
    return kExitFileOrState;
  }
}

}  // namespace evla::cli
