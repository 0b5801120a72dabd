#pragma once

#include <cstdint>
#include <vector>

#include "epng/encoders.hpp"
#include "epng/tensor.hpp"

namespace epng {

/// One binary mask per phrase at image resolution, with the probability maps
/// they were thresholded from. binaries[l][p] is 1 exactly when
/// probabilities[l][p] >= threshold.
struct MaskSet {
  int height = 0;
  int width = 0;
  double threshold = 0.5;
  std::vector<std::vector<double>> probabilities;    // L x (H*W)
  std::vector<std::vector<std::uint8_t>> binaries;   // L x (H*W)
};

/// Dense prediction from the fused stride-16 grid: features are bilinearly
/// up-sampled to stride 4, each phrase feature acts as a 1x1 convolution
/// kernel, logits pass through a sigmoid, probabilities are bilinearly
/// up-sampled to image resolution. Binarization happens strictly after the
/// final up-sampling and is not part of the differentiable path.
struct HeadOutput {
  Tensor pixel_features;  // (n4, C), the stride-4 feature rows
  Tensor logits4;         // (n4, L)
  Tensor prob_image;      // (H, W, L)
};

HeadOutput predict_logits(const GridFeatureMap& fused, const Tensor& phrase_features);

MaskSet binarize(const Tensor& prob_image, double threshold);

}  // namespace epng
