#pragma once

#include <cstdint>

namespace epng {

/// Architecture knobs shared by the encoders, the communicator and the head.
/// The defaults are the desk-scale shape; the full-scale configuration
/// (channels 256, text_dim 768, ffn_hidden 2048) is documented in the README.
struct ModelConfig {
  int channels = 64;           // fused visual / phrase width C
  int stem_channels = 16;      // first conv stage
  int pyramid_channels = 32;   // the three pyramid levels
  int text_dim = 64;           // token embedding width
  int vocab_size = 64;
  int heads = 8;
  int layers = 3;              // communicator depth S
  int ffn_hidden = 256;
  double distance_cap = 2.0;   // truncation bound for pairwise grid distances
  bool use_locality_bias = true;   // false = plain multi-head attention
  bool ffn_residual = false;       // true adds a residual around the FFN

  void validate() const;
};

/// Loss weights and the contrastive term's shape.
struct LossConfig {
  double lambda_bce = 2.0;
  double lambda_dice = 2.0;
  double lambda_sal = 1.0;
  double tau = 0.1;
  bool normalize_similarity = true;  // cosine similarities; false = raw dot products

  void validate() const;
};

}  // namespace epng
