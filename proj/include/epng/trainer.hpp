#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "epng/config.hpp"
#include "epng/dataio.hpp"
#include "epng/metrics.hpp"
#include "epng/model.hpp"

namespace epng {

struct TrainConfig {
  std::uint64_t seed = 0;
  int batch_size = 8;
  int steps = 2000;
  double lr = 2e-3;
  int lr_halve_every_epochs = 5;
  int lr_fix_after_epochs = 10;
  double lr_floor = 5e-4;
  LossConfig loss;
  double threshold = 0.5;
  double grad_clip = 5.0;  // global norm; <= 0 disables
  // Optional early stop: evaluate training AR every ar_check_interval steps
  // and stop once it reaches stop_at_train_ar (0 disables).
  double stop_at_train_ar = 0.0;
  int ar_check_interval = 50;

  void validate() const;
};

struct StepLog {
  int step = 0;  // 1-based
  double total = 0.0;
  double bce = 0.0;
  double dice = 0.0;
  double sal = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<StepLog> trace;
  int steps_run = 0;
};

/// Sample converted to the tensors the model and losses consume. Ground truth
/// is decoded once: at image resolution for the segmentation losses and
/// nearest-sampled (block centers) onto the stride-4 grid for the alignment
/// loss.
struct PreparedSample {
  Tensor image;  // (H, W, 3)
  std::vector<int> tokens;
  std::vector<PhraseSpan> spans;
  std::vector<PhraseTags> tags;
  Tensor gt_image;  // (L, H*W)
  Tensor gt4;       // (L, n4)
  std::vector<std::vector<std::uint8_t>> gt_masks;
};

PreparedSample prepare_sample(const GroundingSample& sample);

/// Piecewise schedule: halve every lr_halve_every_epochs epochs, pin to
/// lr_floor from lr_fix_after_epochs on. One epoch is one pass over the set.
double scheduled_lr(const TrainConfig& config, int step, int steps_per_epoch);

/// Adam with the usual bias correction.
class AdamOptimizer {
 public:
  AdamOptimizer(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(ParameterStore& store, double lr);

 private:
  double beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Deterministic given (seed, dataset, config): sample order, gradient
/// accumulation and updates all run in a fixed sequential order. Raises
/// numeric_error with the step index and a parameter-norm report if the loss
/// stops being finite.
TrainResult train(Model& model, std::span<const GroundingSample> dataset,
                  const TrainConfig& config,
                  const std::function<void(const StepLog&)>& on_step = {});

struct EvalReport {
  BreakdownReport ar;
  ResMetrics res;
  int n_records = 0;
  int n_skipped_empty_gt = 0;
};

EvalReport evaluate(const Model& model, std::span<const GroundingSample> dataset,
                    double threshold);

/// The eval results object: {"all": ..., "thing": ..., "stuff": ...,
/// "single": ..., "plural": ..., "mIoU": ..., "p@0.3": ..., "p@0.4": ...,
/// "p@0.5": ..., "n_records": ...}; absent subsets are omitted.
std::string eval_report_json(const EvalReport& report);

void write_trace_csv(const std::filesystem::path& path, std::span<const StepLog> trace);

}  // namespace epng
