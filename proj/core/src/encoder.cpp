// SPDX-License-Identifier: Apache-2.0

#include "evla/encoder.hpp"

#include <cmath>

#include "evla/error.hpp"
#include "evla/ops.hpp"

namespace evla {

void ImageGrid::validate() const {
  if (height == 0 || width == 0 || channels == 0 ||
      pixels.size() != height * width * channels) {
    fail(ErrorKind::kConfig, "image: pixel count does not match " +
                                 std::to_string(height) + "x" +
                                 std::to_string(width) + "x" +
                                 std::to_string(channels));
  }
  for (double v : pixels) {
    if (!(v >= 0.0 && v <= 1.0)) fail(ErrorKind::kConfig, "image: pixel outside [0,1]");
  }
}

void EncoderConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    fail(ErrorKind::kConfig, "encoder: patch size " + std::to_string(patch_size) +
                                 " does not divide image size " +
                                 std::to_string(image_size));
  }
  if (feature_a == 0 || feature_b == 0 || model_dim == 0 || channels == 0) {
    fail(ErrorKind::kConfig, "encoder: feature and model dims must be >= 1");
  }
}

std::vector<std::pair<std::string, Tensor*>> EncoderParams::named() {
  return {{"encoder.a.weight", &wa}, {"encoder.a.bias", &ba},
          {"encoder.b.weight", &wb}, {"encoder.b.bias", &bb},
          {"encoder.proj.weight", &wp}, {"encoder.proj.bias", &bp}};
}

namespace {
Tensor normal_matrix(std::size_t rows, std::size_t cols, double stddev,
                     std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t = Tensor::zeros(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}
}  // namespace

EncoderParams init_encoder_params(const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t in = cfg.patch_dim();
  const std::size_t fused = cfg.feature_a + cfg.feature_b;
  EncoderParams p;
  p.wa = normal_matrix(in, cfg.feature_a, 1.0 / std::sqrt(double(in)), rng);
  p.ba = Tensor::vector(cfg.feature_a);
  p.wb = normal_matrix(in, cfg.feature_b, 1.0 / std::sqrt(double(in)), rng);
  p.bb = Tensor::vector(cfg.feature_b);
  p.wp = normal_matrix(fused, cfg.model_dim, 1.0 / std::sqrt(double(fused)), rng);
  p.bp = Tensor::vector(cfg.model_dim);
  return p;
}

Tensor extract_patches(const ImageGrid& img, std::size_t patch_size) {
  if (patch_size == 0 || img.height % patch_size || img.width % patch_size) {
    fail(ErrorKind::kConfig, "patch size " + std::to_string(patch_size) +
                                 " does not divide image " +
                                 std::to_string(img.height) + "x" +
                                 std::to_string(img.width));
  }
  const std::size_t py = img.height / patch_size;
  const std::size_t px = img.width / patch_size;
  Tensor out = Tensor::zeros(py * px, patch_size * patch_size * img.channels);
  for (std::size_t r = 0; r < py; ++r) {
    for (std::size_t c = 0; c < px; ++c) {
      double* dst = out.row(r * px + c).data();
      for (std::size_t y = 0; y < patch_size; ++y) {
        for (std::size_t x = 0; x < patch_size; ++x) {
          for (std::size_t ch = 0; ch < img.channels; ++ch) {
            *dst++ = img.at(r * patch_size + y, c * patch_size + x, ch);
          }
        }
      }
    }
  }
  return out;
}

Tensor concat_feature_dims(const Tensor& a, const Tensor& b) {
  return concat_cols(a, b);
}

void concat_feature_dims_backward(Tensor& a, Tensor& b, const Tensor& out) {
  concat_cols_backward(a, b, out);
}

EncoderForward encode_image_forward(const ImageGrid& img, const EncoderParams& p,
                                    const EncoderConfig& cfg) {
  if (img.height != cfg.image_size || img.width != cfg.image_size ||
      img.channels != cfg.channels) {
    fail(ErrorKind::kConfig, "encoder: image shape does not match encoder config");
  }
  EncoderForward f;
  f.patches = extract_patches(img, cfg.patch_size);
  f.feat_a = linear(f.patches, p.wa, p.ba);
  f.feat_b = linear(f.patches, p.wb, p.bb);
  f.fused = concat_feature_dims(f.feat_a, f.feat_b);
  f.out = linear(f.fused, p.wp, p.bp);
  return f;
}

void encode_image_backward(EncoderParams& p, EncoderForward& f) {
  linear_backward(f.fused, p.wp, p.bp, f.out);
  concat_feature_dims_backward(f.feat_a, f.feat_b, f.fused);
  linear_backward(f.patches, p.wb, p.bb, f.feat_b);
  linear_backward(f.patches, p.wa, p.ba, f.feat_a);
}

}  // namespace evla
