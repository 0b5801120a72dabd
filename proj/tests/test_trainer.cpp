#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "epng/dataio.hpp"
#include "epng/errors.hpp"
#include "epng/trainer.hpp"

using namespace epng;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.channels = 16;
  c.stem_channels = 4;
  c.pyramid_channels = 8;
  c.text_dim = 16;
  c.heads = 4;
  c.layers = 1;
  c.ffn_hidden = 32;
  return c;
}

std::vector<GroundingSample> tiny_data(int n = 4) {
  GenConfig gen;
  gen.image_size = 32;
  gen.n_samples = n;
  gen.max_shapes = 2;
  return generate_synthetic(5, gen);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("identical seeds give bitwise-identical traces and checkpoints") {
  auto data = tiny_data();
  TrainConfig tc;
  tc.steps = 12;
  tc.batch_size = 2;
  tc.seed = 9;

  auto dir = fs::temp_directory_path() / "epng_trainer_det";
  fs::create_directories(dir);

  std::vector<fs::path> ckpts, traces;
  for (int run = 0; run < 2; ++run) {
    Model model(tiny_model(), 9);
    TrainResult result = train(model, data, tc);
    fs::path ckpt = dir / ("run" + std::to_string(run) + ".epng");
    fs::path trace = dir / ("run" + std::to_string(run) + ".csv");
    save_checkpoint(model.params(), ckpt);
    write_trace_csv(trace, result.trace);
    ckpts.push_back(ckpt);
    traces.push_back(trace);
  }
  CHECK(slurp(ckpts[0]) == slurp(ckpts[1]));
  CHECK(slurp(traces[0]) == slurp(traces[1]));
}

TEST_CASE("all-zero loss weights leave parameters unchanged") {
  auto data = tiny_data(2);
  Model model(tiny_model(), 3);
  std::vector<std::vector<double>> before;
  for (const Parameter& p : model.params().items()) {
    before.emplace_back(p.tensor.data(), p.tensor.data() + p.tensor.size());
  }
  TrainConfig tc;
  tc.steps = 5;
  tc.batch_size = 2;
  tc.loss.lambda_bce = tc.loss.lambda_dice = tc.loss.lambda_sal = 0.0;
  train(model, data, tc);
  const auto& params = model.params().items();
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].tensor.size(); ++i) {
      REQUIRE(params[p].tensor.at(i) == before[p][i]);
    }
  }
}

TEST_CASE("loss trace stays finite and sal is nonnegative") {
  auto data = tiny_data();
  Model model(tiny_model(), 7);
  TrainConfig tc;
  tc.steps = 15;
  tc.batch_size = 2;
  TrainResult result = train(model, data, tc);
  REQUIRE(result.trace.size() == 15);
  for (const StepLog& log : result.trace) {
    CHECK(std::isfinite(log.total));
    CHECK(log.sal >= 0.0);
    CHECK(log.bce >= 0.0);
  }
}

TEST_CASE("learning rate schedule halves then pins to the floor") {
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.lr_halve_every_epochs = 5;
  tc.lr_fix_after_epochs = 10;
  tc.lr_floor = 5e-5;
  // 1 step per epoch for easy counting.
  CHECK(scheduled_lr(tc, 0, 1) == 1e-3);
  CHECK(scheduled_lr(tc, 4, 1) == 1e-3);
  CHECK(scheduled_lr(tc, 5, 1) == 5e-4);
  CHECK(scheduled_lr(tc, 9, 1) == 5e-4);
  CHECK(scheduled_lr(tc, 10, 1) == 5e-5);
  CHECK(scheduled_lr(tc, 1000, 1) == 5e-5);
}

TEST_CASE("checkpoint save then load reproduces evaluation bitwise") {
  auto data = tiny_data();
  Model model(tiny_model(), 11);
  TrainConfig tc;
  tc.steps = 10;
  tc.batch_size = 2;
  train(model, data, tc);
  EvalReport before = evaluate(model, data, 0.5);

  auto path = fs::temp_directory_path() / "epng_trainer_eval.epng";
  save_checkpoint(model.params(), path);
  Model fresh(tiny_model(), 999);  // different init, then overwritten
  load_checkpoint_into(fresh.params(), path);
  EvalReport after = evaluate(fresh, data, 0.5);
  CHECK(*before.ar.all == *after.ar.all);
  CHECK(before.res.miou == after.res.miou);
  CHECK(before.n_records == after.n_records);
}

TEST_CASE("threshold sweep shrinks predicted-positive counts monotonically") {
  auto data = tiny_data(2);
  Model model(tiny_model(), 13);
  auto prep = prepare_sample(data[0]);
  ModelOutput out = model.forward(prep.image, prep.tokens, prep.spans);
  std::size_t at_low = 0, at_mid = 0, at_high = 0;
  for (double thr : {0.01, 0.5, 0.99}) {
    MaskSet masks = binarize(out.prob_image, thr);
    std::size_t count = 0;
    for (const auto& m : masks.binaries) {
      for (std::uint8_t v : m) count += v;
    }
    if (thr == 0.01) at_low = count;
    if (thr == 0.5) at_mid = count;
    if (thr == 0.99) at_high = count;
  }
  CHECK(at_low >= at_mid);
  CHECK(at_mid >= at_high);
}

TEST_CASE("empty dataset and bad configs are rejected") {
  Model model(tiny_model(), 1);
  TrainConfig tc;
  CHECK_THROWS_AS(train(model, {}, tc), std::invalid_argument);
  auto data = tiny_data(1);
  TrainConfig bad = tc;
  bad.batch_size = 0;
  CHECK_THROWS_AS(train(model, data, bad), std::invalid_argument);
  TrainConfig bad2 = tc;
  bad2.threshold = 1.5;
  CHECK_THROWS_AS(train(model, data, bad2), std::invalid_argument);
  CHECK_THROWS_AS(evaluate(model, data, 0.0), std::invalid_argument);
}

TEST_CASE("eval report json carries the documented keys") {
  auto data = tiny_data(2);
  Model model(tiny_model(), 17);
  EvalReport report = evaluate(model, data, 0.5);
  std::string json = eval_report_json(report);
  for (const char* key : {"\"all\"", "\"thing\"", "\"stuff\"", "\"single\"", "\"plural\"",
                          "\"mIoU\"", "\"p@0.3\"", "\"p@0.4\"", "\"p@0.5\"", "\"n_records\""}) {
    CHECK(json.find(key) != std::string::npos);
  }
}

TEST_CASE("non-finite loss aborts with the step index") {
  auto data = tiny_data(1);
  Model model(tiny_model(), 19);
  // Poison a parameter downstream of every ReLU (ReLU maps NaN to 0).
  Tensor* w = model.params().find("text.proj.bias");
  REQUIRE(w);
  w->data()[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tc;
  tc.steps = 3;
  tc.batch_size = 1;
  try {
    train(model, data, tc);
    FAIL("expected numeric_error");
  } catch (const numeric_error& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}
