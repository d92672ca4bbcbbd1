// SPDX-License-Identifier: Apache-2.0

// Toy visual front end: two independent linear patch embeddings whose
// per-patch features are concatenated and projected into the language
// model's embedding space. There is no positional encoding here; positions
// are added once the full sequence is assembled.

#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "evla/tensor.hpp"

namespace evla {

// Row-major (y, x, channel) pixels in [0, 1].
struct ImageGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<double> pixels;

  ImageGrid() = default;
  ImageGrid(std::size_t h, std::size_t w, std::size_t c = 3)
      : height(h), width(w), channels(c), pixels(h * w * c, 0.0) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }

  // Throws a config error on a shape mismatch or a pixel outside [0, 1].
  void validate() const;
  bool operator==(const ImageGrid&) const = default;
};

struct EncoderConfig {
  std::size_t image_size = 16;  // square images
  std::size_t channels = 3;
  std::size_t patch_size = 4;
  std::size_t feature_a = 32;
  std::size_t feature_b = 32;
  std::size_t model_dim = 32;

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t n_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  void validate() const;
};

struct EncoderParams {
  Tensor wa, ba;  // encoder A: patch_dim -> feature_a
  Tensor wb, bb;  // encoder B: patch_dim -> feature_b
  Tensor wp, bp;  // projector: feature_a + feature_b -> model_dim

  std::vector<std::pair<std::string, Tensor*>> named();
};

EncoderParams init_encoder_params(const EncoderConfig& cfg, std::mt19937_64& rng);

// Flattens the image into [n_patches x patch_dim], patches in row-major
// order, each patch in (y, x, channel) order.
Tensor extract_patches(const ImageGrid& img, std::size_t patch_size);

// Row-wise [a | b] fusion of the two encoders' features.
Tensor concat_feature_dims(const Tensor& a, const Tensor& b);
void concat_feature_dims_backward(Tensor& a, Tensor& b, const Tensor& out);

// Intermediates kept for the backward pass.
struct EncoderForward {
  Tensor patches;
  Tensor feat_a;
  Tensor feat_b;
  Tensor fused;
  Tensor out;  // [n_patches x model_dim]
};

EncoderForward encode_image_forward(const ImageGrid& img, const EncoderParams& p,
                                    const EncoderConfig& cfg);
inline Tensor encode_image(const ImageGrid& img, const EncoderParams& p,
                           const EncoderConfig& cfg) {
  return std::move(encode_image_forward(img, p, cfg).out);
}
// Propagates fwd.out's gradient into the encoder parameters.
void encode_image_backward(EncoderParams& p, EncoderForward& fwd);

}  // namespace evla
