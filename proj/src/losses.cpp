#include "epng/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace epng {

namespace {

constexpr double kLogClamp = 1e-12;
constexpr double kDiceEps = 1e-6;

void require_binary(const char* op, const Tensor& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t.at(i) != 0.0 && t.at(i) != 1.0) {
      throw std::invalid_argument(std::string(op) + ": ground truth is not binary");
    }
  }
}

bool taping(const Tensor& t) { return Tape::active() && t.tracked(); }

}  // namespace

Tensor bce_loss(const Tensor& probs, const Tensor& target) {
  if (probs.shape() != target.shape()) {
    throw std::invalid_argument("bce_loss: shape mismatch " + shape_str(probs.shape()) + " vs " +
                                shape_str(target.shape()));
  }
  require_binary("bce_loss", target);
  const std::size_t n = probs.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = probs.at(i);
    const double y = target.at(i);
    acc -= y * std::log(std::max(p, kLogClamp)) + (1.0 - y) * std::log(std::max(1.0 - p, kLogClamp));
  }
  Tensor out({1}, std::vector<double>{acc / static_cast<double>(n)});
  if (taping(probs)) {
    out.track();
    Tensor pv = probs, tv = target, ov = out;
    Tape::active()->record([pv, tv, ov, n]() mutable {
      const double g = ov.grad()[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double p = pv.data()[i];
        const double y = tv.data()[i];
        double d = 0.0;
        if (p > kLogClamp) d -= y / p;
        if (1.0 - p > kLogClamp) d += (1.0 - y) / (1.0 - p);
        pv.grad()[i] += g * d;
      }
    });
  }
  return out;
}

Tensor dice_loss(const Tensor& probs, const Tensor& target) {
  if (probs.shape() != target.shape()) {
    throw std::invalid_argument("dice_loss: shape mismatch " + shape_str(probs.shape()) + " vs " +
                                shape_str(target.shape()));
  }
  if (probs.rank() != 2) {
    throw std::invalid_argument("dice_loss: expected (L, N), got " + shape_str(probs.shape()));
  }
  require_binary("dice_loss", target);
  const int rows = probs.extent(0);
  const int cols = probs.extent(1);
  std::vector<double> inter(static_cast<std::size_t>(rows)), den(static_cast<std::size_t>(rows));
  double acc = 0.0;
  for (int r = 0; r < rows; ++r) {
    const double* p = probs.data() + static_cast<std::size_t>(r) * cols;
    const double* g = target.data() + static_cast<std::size_t>(r) * cols;
    double num = 0.0, psum = 0.0, gsum = 0.0;
    for (int j = 0; j < cols; ++j) {
      num += p[j] * g[j];
      psum += p[j];
      gsum += g[j];
    }
    inter[static_cast<std::size_t>(r)] = num;
    den[static_cast<std::size_t>(r)] = psum + gsum + kDiceEps;
    acc += 1.0 - (2.0 * num + kDiceEps) / den[static_cast<std::size_t>(r)];
  }
  Tensor out({1}, std::vector<double>{acc / rows});
  if (taping(probs)) {
    out.track();
    Tensor pv = probs, tv = target, ov = out;
    Tape::active()->record([pv, tv, ov, rows, cols, inter, den]() mutable {
      const double g0 = ov.grad()[0] / rows;
      for (int r = 0; r < rows; ++r) {
        const double* g = tv.data() + static_cast<std::size_t>(r) * cols;
        double* dp = pv.grad() + static_cast<std::size_t>(r) * cols;
        const double num2 = 2.0 * inter[static_cast<std::size_t>(r)] + kDiceEps;
        const double d = den[static_cast<std::size_t>(r)];
        for (int j = 0; j < cols; ++j) {
          dp[j] += g0 * (num2 / (d * d) - 2.0 * g[j] / d);
        }
      }
    });
  }
  return out;
}

namespace {

// InfoNCE over rows: for each row with at least one positive, the mean over
// its positives j of log-sum-exp(row) - row[j]; averaged over those rows.
// Rows without positives are skipped. Returns an untracked zero when no row
// has a positive.
Tensor info_nce(const Tensor& logits, const Tensor& positives) {
  if (logits.shape() != positives.shape() || logits.rank() != 2) {
    throw std::invalid_argument("info_nce: shapes " + shape_str(logits.shape()) + " vs " +
                                shape_str(positives.shape()));
  }
  const int rows = logits.extent(0), cols = logits.extent(1);
  int active_rows = 0;
  double acc = 0.0;
  std::vector<double> lse(static_cast<std::size_t>(rows));
  std::vector<int> pos_count(static_cast<std::size_t>(rows), 0);
  for (int r = 0; r < rows; ++r) {
    const double* l = logits.data() + static_cast<std::size_t>(r) * cols;
    const double* p = positives.data() + static_cast<std::size_t>(r) * cols;
    int np = 0;
    for (int j = 0; j < cols; ++j) np += p[j] != 0.0 ? 1 : 0;
    pos_count[static_cast<std::size_t>(r)] = np;
    if (np == 0) continue;
    ++active_rows;
    double mx = l[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, l[j]);
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += std::exp(l[j] - mx);
    lse[static_cast<std::size_t>(r)] = mx + std::log(s);
    double pos_mean = 0.0;
    for (int j = 0; j < cols; ++j) {
      if (p[j] != 0.0) pos_mean += l[j];
    }
    acc += lse[static_cast<std::size_t>(r)] - pos_mean / np;
  }
  if (active_rows == 0) return Tensor({1}, std::vector<double>{0.0});
  Tensor out({1}, std::vector<double>{acc / active_rows});
  if (taping(logits)) {
    out.track();
    Tensor lv = logits, pv = positives, ov = out;
    Tape::active()->record([lv, pv, ov, rows, cols, lse, pos_count, active_rows]() mutable {
      const double g0 = ov.grad()[0] / active_rows;
      for (int r = 0; r < rows; ++r) {
        const int np = pos_count[static_cast<std::size_t>(r)];
        if (np == 0) continue;
        const double* l = lv.data() + static_cast<std::size_t>(r) * cols;
        const double* p = pv.data() + static_cast<std::size_t>(r) * cols;
        double* dl = lv.grad() + static_cast<std::size_t>(r) * cols;
        for (int j = 0; j < cols; ++j) {
          const double softmax = std::exp(l[j] - lse[static_cast<std::size_t>(r)]);
          const double pos = p[j] != 0.0 ? 1.0 / np : 0.0;
          dl[j] += g0 * (softmax - pos);
        }
      }
    });
  }
  return out;
}

}  // namespace

SalResult sal_loss(const Tensor& pixel_features, const Tensor& phrase_features, const Tensor& gt,
                   double tau, bool normalize) {
  if (!(tau > 0.0)) {
    throw std::invalid_argument("sal_loss: temperature must be positive, got " +
                                std::to_string(tau));
  }
  if (pixel_features.rank() != 2 || phrase_features.rank() != 2 ||
      pixel_features.extent(1) != phrase_features.extent(1)) {
    throw std::invalid_argument("sal_loss: feature widths " + shape_str(pixel_features.shape()) +
                                " vs " + shape_str(phrase_features.shape()));
  }
  const int n_pixels = pixel_features.extent(0);
  const int n_phrases = phrase_features.extent(0);
  if (gt.rank() != 2 || gt.extent(0) != n_phrases || gt.extent(1) != n_pixels) {
    throw std::invalid_argument("sal_loss: ground truth " + shape_str(gt.shape()) + " for " +
                                std::to_string(n_phrases) + " phrases x " +
                                std::to_string(n_pixels) + " pixels");
  }
  require_binary("sal_loss", gt);

  Tensor phrases = normalize ? l2_normalize_rows(phrase_features) : phrase_features;
  Tensor pixels = normalize ? l2_normalize_rows(pixel_features) : pixel_features;
  Tensor sim = scale(matmul(phrases, transpose(pixels)), 1.0 / tau);  // (L, n)

  // Pixel-anchored side reuses the same similarities transposed.
  Tensor gt_t({n_pixels, n_phrases});
  for (int i = 0; i < n_phrases; ++i) {
    for (int j = 0; j < n_pixels; ++j) {
      gt_t.data()[static_cast<std::size_t>(j) * n_phrases + i] =
          gt.at(static_cast<std::size_t>(i) * n_pixels + j);
    }
  }
  Tensor l_v = info_nce(sim, gt);
  Tensor l_t = info_nce(transpose(sim), gt_t);

  SalResult out;
  out.value = add(l_v, l_t);
  bool any = false;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt.at(i) != 0.0) any = true;
  }
  out.all_empty = !any;
  return out;
}

Tensor total_loss(const Tensor& probs, const Tensor& gt_image, const Tensor& pixel_features,
                  const Tensor& phrase_features, const Tensor& gt4, const LossConfig& config,
                  LossBreakdown* breakdown) {
  config.validate();
  Tensor bce = bce_loss(probs, gt_image);
  Tensor dice = dice_loss(probs, gt_image);
  SalResult sal = sal_loss(pixel_features, phrase_features, gt4, config.tau,
                           config.normalize_similarity);
  Tensor total = add(add(scale(bce, config.lambda_bce), scale(dice, config.lambda_dice)),
                     scale(sal.value, config.lambda_sal));
  if (breakdown) {
    breakdown->bce = bce.item();
    breakdown->dice = dice.item();
    breakdown->sal = sal.value.item();
    breakdown->total = total.item();
    breakdown->sal_all_empty = sal.all_empty;
  }
  return total;
}

}  // namespace epng
