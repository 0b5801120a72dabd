#pragma once

#include <cstdint>
#include <optional>
#include <span>

namespace epng {

struct EvalRecord {
  double iou = 0.0;
  bool is_thing = false;
  bool is_plural = false;
};

/// |pred ∩ gt| / |pred ∪ gt|. Both masks empty gives 1; exactly one empty
/// gives 0. Shapes must agree and values be binary.
double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

/// Trapezoidal integral of recall(t) = fraction of records with iou >= t over
/// t in [0, 1] on grid_steps uniform points. Mathematically this is the mean
/// IoU; the discretization error is below 0.5/(grid_steps-1).
double average_recall(std::span<const EvalRecord> records, int grid_steps = 1001);

/// Average recall restricted to each tag subset. Subsets without records are
/// reported absent rather than zero.
struct BreakdownReport {
  std::optional<double> all, thing, stuff, single, plural;
};
BreakdownReport breakdown(std::span<const EvalRecord> records, int grid_steps = 1001);

/// Referring-expression conventions: mean IoU and precision at IoU cutoffs.
struct ResMetrics {
  double miou = 0.0;
  double p30 = 0.0;
  double p40 = 0.0;
  double p50 = 0.0;
};
ResMetrics res_metrics(std::span<const EvalRecord> records);

}  // namespace epng
