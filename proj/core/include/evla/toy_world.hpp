// SPDX-License-Identifier: Apache-2.0

// Synthetic reach task. A square image is divided into grid_size x grid_size
// cells; each object and the gripper marker fill one cell. The instruction
// names the target color and the action is the normalized displacement from
// the gripper cell to the target cell:
//
//   dim 0 = (target_col - gripper_col) / grid_size
//   dim 1 = (target_row - gripper_row) / grid_size
//   dim D-1 (D >= 3) = +1 if the cell distance is <= gripper_radius, else -1
//   every other dim = 0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evla/encoder.hpp"
#include "evla/kv.hpp"

namespace evla {

struct TaskConfig {
  std::size_t image_size = 16;
  std::size_t grid_size = 4;       // cells per side
  std::size_t palette_size = 4;    // object colors available
  std::size_t n_objects = 2;       // distinct-colored objects per scene
  double gripper_radius = 1.0;     // in cells
  std::size_t action_dims = 7;

  std::size_t cell_pixels() const { return image_size / grid_size; }
  void validate() const;

  // `task.*` keys.
  KeyValues to_kv() const;
  static TaskConfig from_kv(const KeyValues& kv);
};

// Fixed RGB colors as 8-bit levels; pixel value = level / 255.
inline constexpr std::size_t kMaxPalette = 8;
inline constexpr std::array<std::array<std::uint8_t, 3>, kMaxPalette> kPalette = {{
    {255, 0, 0},
    {0, 255, 0},
    {0, 0, 255},
    {255, 255, 0},
    {255, 0, 255},
    {0, 255, 255},
    {255, 128, 0},
    {128, 0, 255},
}};
inline constexpr std::array<std::uint8_t, 3> kGripperColor = {255, 255, 255};

struct Cell {
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const Cell&) const = default;
};

struct Episode {
  ImageGrid image;
  int instruction = 0;  // color index; also the instruction token id
  std::vector<double> action;
  std::uint64_t seed = 0;

  bool operator==(const Episode&) const = default;
};

// Action for a gripper/target pair.
std::vector<double> compute_action(Cell gripper, Cell target, const TaskConfig& cfg);

Episode gen_episode(std::uint64_t seed, const TaskConfig& cfg);

enum class Split { kTrain, kVal };
std::string to_string(Split split);
Split parse_split(const std::string& text);

// Seed of episode `index` in a split stream.
std::uint64_t episode_seed(std::uint64_t base_seed, Split split, std::size_t index);

// Episodes are generated independently; `threads` > 1 spreads them over
// worker threads without changing the result.
std::vector<Episode> gen_dataset(std::uint64_t base_seed, std::size_t n, Split split,
                                 const TaskConfig& cfg, std::size_t threads = 1);

// Record-framed dataset file. Each record is a little-endian u32 payload
// length followed by the payload:
//   image bytes (height * width * 3, row-major, level = round(pixel * 255))
//   u32 instruction id
//   action_dims x f64 action
//   u64 seed
void write_dataset(const std::string& path, std::span<const Episode> episodes);
std::vector<Episode> read_dataset(const std::string& path, const TaskConfig& cfg);

struct DatasetManifest {
  std::size_t count = 0;
  std::uint64_t base_seed = 0;
  Split split = Split::kTrain;
  TaskConfig task;
  KeyValues run_config;  // full resolved configuration of the producing run

  std::string format() const;
  static DatasetManifest parse(const std::string& text);
};

}  // namespace evla
