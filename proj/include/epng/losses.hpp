#pragma once

#include "epng/config.hpp"
#include "epng/tensor.hpp"

namespace epng {

/// Mean over all (phrase, pixel) entries of the binary cross entropy, with
/// logs clamped at 1e-12. probs and target share one shape; target is binary.
Tensor bce_loss(const Tensor& probs, const Tensor& target);

/// Soft Dice averaged over phrases. probs/target are (L, N) with phrases as
/// rows; per row 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), eps 1e-6.
Tensor dice_loss(const Tensor& probs, const Tensor& target);

struct SalResult {
  Tensor value;           // scalar
  bool all_empty = false; // no positive (phrase, pixel) pair existed
};

/// Bidirectional semantic alignment loss. pixel_features (n, C) live on the
/// stride-4 grid, phrase_features are (L, C), gt is the (L, n) binary ground
/// truth down-sampled to that grid. Phrases with no positive pixels and
/// pixels with no positive phrases are skipped on their respective sides.
/// normalize selects cosine similarities; otherwise raw dot products.
SalResult sal_loss(const Tensor& pixel_features, const Tensor& phrase_features, const Tensor& gt,
                   double tau, bool normalize = true);

struct LossBreakdown {
  double bce = 0.0;
  double dice = 0.0;
  double sal = 0.0;   // unweighted term values
  double total = 0.0;
  bool sal_all_empty = false;
};

/// lambda_bce * BCE + lambda_dice * Dice + lambda_sal * SAL.
/// probs/gt_image are (L, H*W) at image resolution; gt4 is (L, n4).
Tensor total_loss(const Tensor& probs, const Tensor& gt_image, const Tensor& pixel_features,
                  const Tensor& phrase_features, const Tensor& gt4, const LossConfig& config,
                  LossBreakdown* breakdown = nullptr);

}  // namespace epng
