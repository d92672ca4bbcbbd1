// SPDX-License-Identifier: Apache-2.0

#include "evla/toy_world.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include "evla/binary_io.hpp"
#include "evla/error.hpp"
#include "evla/seed.hpp"

namespace evla {

void TaskConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::kConfig, "task config: " + what);
  };
  check(image_size >= 4, "image_size must be >= 4");
  check(grid_size >= 4 && image_size % grid_size == 0,
        "grid_size must be >= 4 and divide image_size");
  check(palette_size >= 2 && palette_size <= kMaxPalette,
        "palette_size must be in [2, " + std::to_string(kMaxPalette) + "]");
  check(n_objects >= 1, "n_objects must be >= 1");
  check(n_objects <= palette_size, "more objects than distinct palette colors");
  check(n_objects + 1 <= grid_size * grid_size,
        "scene unplaceable: " + std::to_string(n_objects) +
            " objects plus gripper do not fit in " + std::to_string(grid_size) +
            "x" + std::to_string(grid_size) + " cells");
  check(action_dims >= 1, "action_dims must be >= 1");
  check(gripper_radius >= 0.0, "gripper_radius must be >= 0");
}

KeyValues TaskConfig::to_kv() const {
  KeyValues kv;
  kv.set("task.image_size", static_cast<std::uint64_t>(image_size));
  kv.set("task.grid_size", static_cast<std::uint64_t>(grid_size));
  kv.set("task.palette_size", static_cast<std::uint64_t>(palette_size));
  kv.set("task.objects", static_cast<std::uint64_t>(n_objects));
  kv.set("task.gripper_radius", gripper_radius);
  kv.set("task.action_dims", static_cast<std::uint64_t>(action_dims));
  return kv;
}

TaskConfig TaskConfig::from_kv(const KeyValues& kv) {
  TaskConfig c;
  auto size = [&](const char* key, std::size_t& field) {
    if (kv.contains(key)) field = static_cast<std::size_t>(kv.get_uint(key));
  };
  size("task.image_size", c.image_size);
  size("task.grid_size", c.grid_size);
  size("task.palette_size", c.palette_size);
  size("task.objects", c.n_objects);
  size("task.action_dims", c.action_dims);
  if (kv.contains("task.gripper_radius")) {
    c.gripper_radius = kv.get_double("task.gripper_radius");
  }
  return c;
}

std::vector<double> compute_action(Cell gripper, Cell target, const TaskConfig& cfg) {
  std::vector<double> a(cfg.action_dims, 0.0);
  const double g = static_cast<double>(cfg.grid_size);
  const double dc = static_cast<double>(target.col) - static_cast<double>(gripper.col);
  const double dr = static_cast<double>(target.row) - static_cast<double>(gripper.row);
  a[0] = dc / g;
  if (cfg.action_dims >= 2) a[1] = dr / g;
  if (cfg.action_dims >= 3) {
    a[cfg.action_dims - 1] = std::sqrt(dc * dc + dr * dr) <= cfg.gripper_radius ? 1.0 : -1.0;
  }
  return a;
}

namespace {

void paint_cell(ImageGrid& img, Cell cell, std::size_t cell_px,
                const std::array<std::uint8_t, 3>& rgb) {
  for (std::size_t y = 0; y < cell_px; ++y) {
    for (std::size_t x = 0; x < cell_px; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(cell.row * cell_px + y, cell.col * cell_px + x, c) = rgb[c] / 255.0;
      }
    }
  }
}

// First k entries of a seeded Fisher-Yates shuffle of [0, n).
std::vector<std::size_t> draw_distinct(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

}  // namespace

Episode gen_episode(std::uint64_t seed, const TaskConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const std::size_t g = cfg.grid_size;
  const auto cells = draw_distinct(g * g, cfg.n_objects + 1, rng);
  const auto colors = draw_distinct(cfg.palette_size, cfg.n_objects, rng);
  std::uniform_int_distribution<std::size_t> pick_target(0, cfg.n_objects - 1);
  const std::size_t target = pick_target(rng);

  Episode ep;
  ep.seed = seed;
  ep.image = ImageGrid(cfg.image_size, cfg.image_size, 3);
  const std::size_t px = cfg.cell_pixels();
  const Cell gripper{cells[0] / g, cells[0] % g};
  for (std::size_t i = 0; i < cfg.n_objects; ++i) {
    paint_cell(ep.image, {cells[i + 1] / g, cells[i + 1] % g}, px, kPalette[colors[i]]);
  }
  paint_cell(ep.image, gripper, px, kGripperColor);
  ep.instruction = static_cast<int>(colors[target]);
  ep.action = compute_action(gripper, {cells[target + 1] / g, cells[target + 1] % g}, cfg);
  return ep;
}

std::string to_string(Split split) { return split == Split::kTrain ? "train" : "val"; }

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  fail(ErrorKind::kConfig, "unknown split '" + text + "' (want train|val)");
}

std::uint64_t episode_seed(std::uint64_t base_seed, Split split, std::size_t index) {
  return derive_seed(base_seed, split == Split::kTrain ? "split.train" : "split.val",
                     index);
}

std::vector<Episode> gen_dataset(std::uint64_t base_seed, std::size_t n, Split split,
                                 const TaskConfig& cfg, std::size_t threads) {
  if (n == 0) fail(ErrorKind::kConfig, "gen_dataset: n must be >= 1");
  cfg.validate();
  std::vector<Episode> out(n);
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < n; i += workers) {
      out[i] = gen_episode(episode_seed(base_seed, split, i), cfg);
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
  }
  return out;
}

void write_dataset(const std::string& path, std::span<const Episode> episodes) {
  ByteWriter out;
  for (const Episode& ep : episodes) {
    ByteWriter rec;
    for (double p : ep.image.pixels) {
      rec.u8(static_cast<std::uint8_t>(std::lround(p * 255.0)));
    }
    rec.u32(static_cast<std::uint32_t>(ep.instruction));
    for (double a : ep.action) rec.f64(a);
    rec.u64(ep.seed);
    out.str(rec.bytes());
  }
  write_file(path, out.bytes());
}

std::vector<Episode> read_dataset(const std::string& path, const TaskConfig& cfg) {
  const std::string bytes = read_file(path);
  ByteReader in(bytes, path);
  const std::size_t image_bytes = cfg.image_size * cfg.image_size * 3;
  const std::size_t expected = image_bytes + 4 + cfg.action_dims * 8 + 8;
  std::vector<Episode> out;
  while (!in.done()) {
    const std::uint32_t len = in.u32();
    if (len != expected) {
      fail(ErrorKind::kFile, path + ": record " + std::to_string(out.size()) +
                                 " has length " + std::to_string(len) + ", expected " +
                                 std::to_string(expected) + " for the task config");
    }
    Episode ep;
    ep.image = ImageGrid(cfg.image_size, cfg.image_size, 3);
    const std::string_view px = in.raw(image_bytes);
    for (std::size_t i = 0; i < image_bytes; ++i) {
      ep.image.pixels[i] = static_cast<unsigned char>(px[i]) / 255.0;
    }
    ep.instruction = static_cast<int>(in.u32());
    ep.action.resize(cfg.action_dims);
    for (double& a : ep.action) a = in.f64();
    ep.seed = in.u64();
    out.push_back(std::move(ep));
  }
  if (out.empty()) fail(ErrorKind::kFile, path + ": dataset file holds no episodes");
  return out;
}

std::string DatasetManifest::format() const {
  KeyValues kv = task.to_kv();
  kv.set("count", static_cast<std::uint64_t>(count));
  kv.set("base_seed", base_seed);
  kv.set("split", to_string(split));
  std::string palette;
  for (std::size_t i = 0; i < task.palette_size; ++i) {
    if (i) palette += ';';
    for (std::size_t c = 0; c < 3; ++c) {
      if (c) palette += ',';
      palette += std::to_string(kPalette[i][c]);
    }
  }
  kv.set("palette", palette);
  return "# toy-world dataset manifest\n" + kv.format() +
         "# resolved run configuration\n" + run_config.format("config.");
}

DatasetManifest DatasetManifest::parse(const std::string& text) {
  const KeyValues kv = KeyValues::parse(text, "manifest");
  DatasetManifest m;
  m.count = static_cast<std::size_t>(kv.get_uint("count"));
  m.base_seed = kv.get_uint("base_seed");
  m.split = parse_split(kv.get("split"));
  m.task = TaskConfig::from_kv(kv);
  for (const auto& [k, v] : kv.entries()) {
    if (k.starts_with("config.")) m.run_config.set(k.substr(7), v);
  }
  return m;
}

}  // namespace evla
