#include "epng/head.hpp"

#include <stdexcept>

namespace epng {

HeadOutput predict_logits(const GridFeatureMap& fused, const Tensor& phrase_features) {
  if (fused.stride != 16) {
    throw std::invalid_argument("head: expected a stride-16 grid, got stride " +
                                std::to_string(fused.stride));
  }
  if (phrase_features.rank() != 2 || phrase_features.extent(1) != fused.channels()) {
    throw std::invalid_argument("head: phrase width mismatch " +
                                shape_str(phrase_features.shape()) + " vs grid channels " +
                                std::to_string(fused.channels()));
  }
  const int c = fused.channels();
  const int n_phrases = phrase_features.extent(0);

  Tensor f4 = upsample_bilinear(fused.features, 4);  // stride 4
  const int h4 = f4.extent(0), w4 = f4.extent(1);
  Tensor rows = f4.reshaped({h4 * w4, c});

  HeadOutput out;
  out.pixel_features = rows;
  out.logits4 = matmul(rows, transpose(phrase_features));  // (n4, L)
  Tensor probs4 = sigmoid(out.logits4).reshaped({h4, w4, n_phrases});
  out.prob_image = upsample_bilinear(probs4, 4);  // (H, W, L)
  return out;
}

MaskSet binarize(const Tensor& prob_image, double threshold) {
  if (prob_image.rank() != 3) {
    throw std::invalid_argument("binarize: expected (H, W, L), got " +
                                shape_str(prob_image.shape()));
  }
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("binarize: threshold " + std::to_string(threshold) +
                                " outside (0,1)");
  }
  const int h = prob_image.extent(0), w = prob_image.extent(1), l = prob_image.extent(2);
  MaskSet out;
  out.height = h;
  out.width = w;
  out.threshold = threshold;
  out.probabilities.assign(static_cast<std::size_t>(l),
                           std::vector<double>(static_cast<std::size_t>(h) * w));
  out.binaries.assign(static_cast<std::size_t>(l),
                      std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t pix = static_cast<std::size_t>(y) * w + x;
      const double* src = prob_image.data() + pix * l;
      for (int j = 0; j < l; ++j) {
        out.probabilities[static_cast<std::size_t>(j)][pix] = src[j];
        out.binaries[static_cast<std::size_t>(j)][pix] = src[j] >= threshold ? 1 : 0;
      }
    }
  }
  return out;
}

}  // namespace epng
