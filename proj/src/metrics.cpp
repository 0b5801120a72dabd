#include "epng/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace epng {

double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("iou: mask sizes " + std::to_string(pred.size()) + " vs " +
                                std::to_string(gt.size()));
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::uint8_t p = pred[i], g = gt[i];
    if (p > 1 || g > 1) throw std::invalid_argument("iou: non-binary mask value");
    inter += p & g;
    uni += p | g;
  }
  if (uni == 0) return 1.0;  // both masks empty
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double average_recall(std::span<const EvalRecord> records, int grid_steps) {
  if (records.empty()) throw std::invalid_argument("average_recall: no records");
  if (grid_steps < 2) {
    throw std::invalid_argument("average_recall: grid_steps " + std::to_string(grid_steps));
  }
  const double dt = 1.0 / (grid_steps - 1);
  double integral = 0.0;
  double prev = 0.0;
  for (int s = 0; s < grid_steps; ++s) {
    const double t = s * dt;
    std::size_t hits = 0;
    for (const EvalRecord& r : records) {
      if (r.iou >= t) ++hits;
    }
    const double recall = static_cast<double>(hits) / static_cast<double>(records.size());
    if (s > 0) integral += 0.5 * (prev + recall) * dt;
    prev = recall;
  }
  return integral;
}

BreakdownReport breakdown(std::span<const EvalRecord> records, int grid_steps) {
  BreakdownReport report;
  auto subset_ar = [&](auto keep) -> std::optional<double> {
    std::vector<EvalRecord> subset;
    for (const EvalRecord& r : records) {
      if (keep(r)) subset.push_back(r);
    }
    if (subset.empty()) return std::nullopt;
    return average_recall(subset, grid_steps);
  };
  report.all = subset_ar([](const EvalRecord&) { return true; });
  report.thing = subset_ar([](const EvalRecord& r) { return r.is_thing; });
  report.stuff = subset_ar([](const EvalRecord& r) { return !r.is_thing; });
  report.single = subset_ar([](const EvalRecord& r) { return !r.is_plural; });
  report.plural = subset_ar([](const EvalRecord& r) { return r.is_plural; });
  return report;
}

ResMetrics res_metrics(std::span<const EvalRecord> records) {
  if (records.empty()) throw std::invalid_argument("res_metrics: no records");
  ResMetrics m;
  for (const EvalRecord& r : records) {
    m.miou += r.iou;
    if (r.iou >= 0.3) m.p30 += 1.0;
    if (r.iou >= 0.4) m.p40 += 1.0;
    if (r.iou >= 0.5) m.p50 += 1.0;
  }
  const double n = static_cast<double>(records.size());
  m.miou /= n;
  m.p30 /= n;
  m.p40 /= n;
  m.p50 /= n;
  return m;
}

}  // namespace epng
