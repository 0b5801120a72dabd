#pragma once

#include <vector>

#include "epng/config.hpp"
#include "epng/params.hpp"
#include "epng/rng.hpp"
#include "epng/tensor.hpp"

namespace epng {

/// Spatial feature grid with its stride relative to the input image.
struct GridFeatureMap {
  Tensor features;  // (H, W, C)
  int stride = 16;

  int height() const { return features.extent(0); }
  int width() const { return features.extent(1); }
  int channels() const { return features.extent(2); }
};

struct PhraseSpan {
  int begin = 0;
  int end = 0;
};

struct PhraseTags {
  bool is_thing = false;
  bool is_plural = false;
};

struct PhraseSet {
  Tensor features;  // (L, C)
  std::vector<PhraseSpan> spans;
  std::vector<PhraseTags> tags;

  int count() const { return features.extent(0); }
};

/// Three-stage convolutional pyramid producing stride-8/16/32 maps, fused to
/// one stride-16 grid: the stride-8 map is 2x average-pooled, the stride-32
/// map is 2x bilinearly up-sampled, the three are concatenated along channels
/// and projected to `channels` by a 1x1 convolution.
class VisualEncoder {
 public:
  VisualEncoder(ParameterStore& store, const ModelConfig& config, Rng& rng);

  /// image: (H, W, 3) with H and W multiples of 32; checked before any compute.
  GridFeatureMap forward(const Tensor& image) const;

 private:
  Tensor conv1_w_, conv1_b_;
  Tensor conv2_w_, conv2_b_;
  Tensor conv3_w_, conv3_b_;
  Tensor conv4_w_, conv4_b_;
  Tensor conv5_w_, conv5_b_;
  Tensor proj_w_, proj_b_;  // 1x1 projection as a matrix
  int channels_;
};

/// Trainable token embedding table; a phrase feature is the mean of its
/// tokens' embeddings passed through one linear projection.
class TextEncoder {
 public:
  TextEncoder(ParameterStore& store, const ModelConfig& config, Rng& rng);

  PhraseSet forward(const std::vector<int>& tokens, const std::vector<PhraseSpan>& spans,
                    std::vector<PhraseTags> tags = {}) const;

 private:
  Tensor embedding_;  // (V, E)
  Tensor proj_w_, proj_b_;
  int vocab_size_;
};

}  // namespace epng
