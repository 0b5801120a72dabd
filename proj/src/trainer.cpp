#include "epng/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "epng/errors.hpp"
#include "epng/head.hpp"
#include "epng/losses.hpp"

namespace epng {

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
  if (steps < 1) throw std::invalid_argument("train config: steps must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("train config: learning rate must be positive");
  if (lr_floor > lr) throw std::invalid_argument("train config: lr floor above initial rate");
  if (lr_halve_every_epochs < 1 || lr_fix_after_epochs < 0) {
    throw std::invalid_argument("train config: bad schedule interval");
  }
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("train config: threshold outside (0,1)");
  }
  loss.validate();
}

PreparedSample prepare_sample(const GroundingSample& sample) {
  PreparedSample out;
  const int h = sample.height, w = sample.width;
  out.image = Tensor({h, w, 3}, sample.image);
  out.tokens = token_ids(sample.tokens);
  const int n_phrases = static_cast<int>(sample.phrases.size());
  const int h4 = h / 4, w4 = w / 4;
  out.gt_image = Tensor({n_phrases, h * w});
  out.gt4 = Tensor({n_phrases, h4 * w4});
  for (int l = 0; l < n_phrases; ++l) {
    const PhraseAnnotation& p = sample.phrases[static_cast<std::size_t>(l)];
    out.spans.push_back({p.span_begin, p.span_end});
    out.tags.push_back({p.is_thing, p.is_plural});
    std::vector<std::uint8_t> mask = decode_mask(p, h, w);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      out.gt_image.data()[static_cast<std::size_t>(l) * mask.size() + i] = mask[i];
    }
    for (int y = 0; y < h4; ++y) {
      for (int x = 0; x < w4; ++x) {
        const int sy = 4 * y + 2, sx = 4 * x + 2;  // block-centre sample
        out.gt4.data()[(static_cast<std::size_t>(l) * h4 + y) * w4 + x] =
            mask[static_cast<std::size_t>(sy) * w + sx];
      }
    }
    out.gt_masks.push_back(std::move(mask));
  }
  return out;
}

double scheduled_lr(const TrainConfig& config, int step, int steps_per_epoch) {
  const int epoch = step / std::max(1, steps_per_epoch);
  if (epoch >= config.lr_fix_after_epochs) return config.lr_floor;
  const int halvings = epoch / config.lr_halve_every_epochs;
  return std::max(config.lr * std::pow(0.5, halvings), config.lr_floor);
}

AdamOptimizer::AdamOptimizer(double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::step(ParameterStore& store, double lr) {
  auto& params = store.items();
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      m_[p].assign(params[p].tensor.size(), 0.0);
      v_[p].assign(params[p].tensor.size(), 0.0);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params[p].tensor;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double g = t.grad()[i];
      m_[p][i] = beta1_ * m_[p][i] + (1.0 - beta1_) * g;
      v_[p][i] = beta2_ * v_[p][i] + (1.0 - beta2_) * g * g;
      const double mhat = m_[p][i] / bc1;
      const double vhat = v_[p][i] / bc2;
      t.data()[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

namespace {

double global_grad_norm(ParameterStore& store) {
  double s = 0.0;
  for (Parameter& p : store.items()) {
    for (std::size_t i = 0; i < p.tensor.size(); ++i) {
      s += p.tensor.grad()[i] * p.tensor.grad()[i];
    }
  }
  return std::sqrt(s);
}

double global_param_norm(const ParameterStore& store) {
  double s = 0.0;
  for (const Parameter& p : store.items()) {
    for (std::size_t i = 0; i < p.tensor.size(); ++i) {
      s += p.tensor.at(i) * p.tensor.at(i);
    }
  }
  return std::sqrt(s);
}

EvalReport evaluate_prepared(const Model& model, std::span<const PreparedSample> samples,
                             double threshold) {
  std::vector<EvalRecord> records;
  int skipped = 0;
  for (const PreparedSample& s : samples) {
    ModelOutput out = model.forward(s.image, s.tokens, s.spans);
    MaskSet masks = binarize(out.prob_image, threshold);
    for (std::size_t l = 0; l < s.gt_masks.size(); ++l) {
      bool empty = true;
      for (std::uint8_t v : s.gt_masks[l]) {
        if (v) empty = false;
      }
      if (empty) {
        ++skipped;  // excluded from evaluation, counted as a diagnostic
        continue;
      }
      EvalRecord r;
      r.iou = iou(masks.binaries[l], s.gt_masks[l]);
      r.is_thing = s.tags[l].is_thing;
      r.is_plural = s.tags[l].is_plural;
      records.push_back(r);
    }
  }
  EvalReport report;
  report.n_records = static_cast<int>(records.size());
  report.n_skipped_empty_gt = skipped;
  if (!records.empty()) {
    report.ar = breakdown(records);
    report.res = res_metrics(records);
  }
  return report;
}

}  // namespace

TrainResult train(Model& model, std::span<const GroundingSample> dataset,
                  const TrainConfig& config, const std::function<void(const StepLog&)>& on_step) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");

  std::vector<PreparedSample> prepared;
  prepared.reserve(dataset.size());
  for (const GroundingSample& s : dataset) prepared.push_back(prepare_sample(s));

  const int n = static_cast<int>(prepared.size());
  const int steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  AdamOptimizer adam;
  TrainResult result;
  int cursor = 0;
  int epoch = -1;

  for (int step = 0; step < config.steps; ++step) {
    if (step % steps_per_epoch == 0) {
      ++epoch;
      Rng shuffle_rng(mix_seed(config.seed, 0x45504f43ull + static_cast<std::uint64_t>(epoch)));
      shuffle_rng.shuffle(order);
      cursor = 0;
    }
    const int batch_begin = cursor;
    const int batch_end = std::min(cursor + config.batch_size, n);
    cursor = batch_end;
    const int batch = batch_end - batch_begin;

    model.params().zero_grads();
    LossBreakdown sums;
    for (int b = batch_begin; b < batch_end; ++b) {
      const PreparedSample& s = prepared[static_cast<std::size_t>(order[static_cast<std::size_t>(b)])];
      Tape tape;
      ModelOutput out = model.forward(s.image, s.tokens, s.spans);
      const int hw = out.prob_image.extent(0) * out.prob_image.extent(1);
      const int l = out.prob_image.extent(2);
      Tensor probs = transpose(out.prob_image.reshaped({hw, l}));  // (L, H*W)
      LossBreakdown bd;
      Tensor loss = total_loss(probs, s.gt_image, out.pixel_features, out.phrase_features, s.gt4,
                               config.loss, &bd);
      Tensor scaled = scale(loss, 1.0 / batch);
      tape.backward(scaled);
      sums.total += bd.total / batch;
      sums.bce += bd.bce / batch;
      sums.dice += bd.dice / batch;
      sums.sal += bd.sal / batch;
    }

    if (!std::isfinite(sums.total)) {
      throw numeric_error("non-finite loss at step " + std::to_string(step + 1) +
                          " (total=" + std::to_string(sums.total) +
                          ", parameter norm=" + std::to_string(global_param_norm(model.params())) +
                          ")");
    }

    if (config.grad_clip > 0.0) {
      const double norm = global_grad_norm(model.params());
      if (norm > config.grad_clip) {
        const double s = config.grad_clip / norm;
        for (Parameter& p : model.params().items()) {
          for (std::size_t i = 0; i < p.tensor.size(); ++i) p.tensor.grad()[i] *= s;
        }
      }
    }

    const double lr = scheduled_lr(config, step, steps_per_epoch);
    adam.step(model.params(), lr);

    StepLog log{step + 1, sums.total, sums.bce, sums.dice, sums.sal, lr};
    result.trace.push_back(log);
    result.steps_run = step + 1;
    if (on_step) on_step(log);

    if (config.stop_at_train_ar > 0.0 && (step + 1) % config.ar_check_interval == 0) {
      EvalReport report = evaluate_prepared(model, prepared, config.threshold);
      if (report.ar.all && *report.ar.all >= config.stop_at_train_ar) break;
    }
  }
  return result;
}

EvalReport evaluate(const Model& model, std::span<const GroundingSample> dataset,
                    double threshold) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("evaluate: threshold outside (0,1)");
  }
  std::vector<PreparedSample> prepared;
  prepared.reserve(dataset.size());
  for (const GroundingSample& s : dataset) prepared.push_back(prepare_sample(s));
  return evaluate_prepared(model, prepared, threshold);
}

std::string eval_report_json(const EvalReport& report) {
  nlohmann::json j;
  auto put = [&](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
  };
  put("all", report.ar.all);
  put("thing", report.ar.thing);
  put("stuff", report.ar.stuff);
  put("single", report.ar.single);
  put("plural", report.ar.plural);
  j["mIoU"] = report.res.miou;
  j["p@0.3"] = report.res.p30;
  j["p@0.4"] = report.res.p40;
  j["p@0.5"] = report.res.p50;
  j["n_records"] = report.n_records;
  if (report.n_skipped_empty_gt > 0) j["n_skipped_empty_gt"] = report.n_skipped_empty_gt;
  return j.dump();
}

void write_trace_csv(const std::filesystem::path& path, std::span<const StepLog> trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write loss trace: " + path.string());
  out << "step,total,bce,dice,sal,lr\n";
  char buf[256];
  for (const StepLog& log : trace) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", log.step, log.total,
                  log.bce, log.dice, log.sal, log.lr);
    out << buf;
  }
  if (!out) throw io_error("short write on loss trace: " + path.string());
}

}  // namespace epng
