#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "epng/dataio.hpp"
#include "epng/errors.hpp"
#include "epng/head.hpp"
#include "epng/model.hpp"
#include "epng/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace epng;

namespace {

// Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric, 5 checkpoint/config
// mismatch, 1 anything else.
constexpr int kUsage = 2;
constexpr int kIo = 3;
constexpr int kNumeric = 4;
constexpr int kMismatch = 5;

json model_to_json(const ModelConfig& c) {
  return json{{"channels", c.channels},
              {"stem_channels", c.stem_channels},
              {"pyramid_channels", c.pyramid_channels},
              {"text_dim", c.text_dim},
              {"vocab_size", c.vocab_size},
              {"heads", c.heads},
              {"layers", c.layers},
              {"ffn_hidden", c.ffn_hidden},
              {"distance_cap", c.distance_cap},
              {"use_locality_bias", c.use_locality_bias},
              {"ffn_residual", c.ffn_residual}};
}

json train_to_json(const TrainConfig& c) {
  return json{{"seed", c.seed},
              {"batch_size", c.batch_size},
              {"steps", c.steps},
              {"lr", c.lr},
              {"lr_halve_every_epochs", c.lr_halve_every_epochs},
              {"lr_fix_after_epochs", c.lr_fix_after_epochs},
              {"lr_floor", c.lr_floor},
              {"lambda_bce", c.loss.lambda_bce},
              {"lambda_dice", c.loss.lambda_dice},
              {"lambda_sal", c.loss.lambda_sal},
              {"temperature", c.loss.tau},
              {"normalize_similarity", c.loss.normalize_similarity},
              {"threshold", c.threshold},
              {"grad_clip", c.grad_clip},
              {"stop_at_train_ar", c.stop_at_train_ar},
              {"ar_check_interval", c.ar_check_interval}};
}

template <class T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void model_from_json(const json& j, ModelConfig& c) {
  maybe(j, "channels", c.channels);
  maybe(j, "stem_channels", c.stem_channels);
  maybe(j, "pyramid_channels", c.pyramid_channels);
  maybe(j, "text_dim", c.text_dim);
  maybe(j, "vocab_size", c.vocab_size);
  maybe(j, "heads", c.heads);
  maybe(j, "layers", c.layers);
  maybe(j, "ffn_hidden", c.ffn_hidden);
  maybe(j, "distance_cap", c.distance_cap);
  maybe(j, "use_locality_bias", c.use_locality_bias);
  maybe(j, "ffn_residual", c.ffn_residual);
}

void train_from_json(const json& j, TrainConfig& c) {
  maybe(j, "seed", c.seed);
  maybe(j, "batch_size", c.batch_size);
  maybe(j, "steps", c.steps);
  maybe(j, "lr", c.lr);
  maybe(j, "lr_halve_every_epochs", c.lr_halve_every_epochs);
  maybe(j, "lr_fix_after_epochs", c.lr_fix_after_epochs);
  maybe(j, "lr_floor", c.lr_floor);
  maybe(j, "lambda_bce", c.loss.lambda_bce);
  maybe(j, "lambda_dice", c.loss.lambda_dice);
  maybe(j, "lambda_sal", c.loss.lambda_sal);
  maybe(j, "temperature", c.loss.tau);
  maybe(j, "normalize_similarity", c.loss.normalize_similarity);
  maybe(j, "threshold", c.threshold);
  maybe(j, "grad_clip", c.grad_clip);
  maybe(j, "stop_at_train_ar", c.stop_at_train_ar);
  maybe(j, "ar_check_interval", c.ar_check_interval);
}

// Accepts either a config file ({"model": ..., "train": ...}) or a run
// manifest (same keys nested the same way).
void load_config_file(const fs::path& path, ModelConfig& mc, TrainConfig& tc) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw io_error("config parse error in " + path.string() + ": " + e.what());
  }
  if (j.contains("model")) model_from_json(j.at("model"), mc);
  if (j.contains("train")) train_from_json(j.at("train"), tc);
}

std::string now_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void write_manifest(const fs::path& path, const std::string& command, const ModelConfig& mc,
                    const TrainConfig& tc, const json& extra) {
  json j = {{"command", command},
            {"model", model_to_json(mc)},
            {"train", train_to_json(tc)},
            {"created_utc", now_utc()}};
  for (auto& [k, v] : extra.items()) j[k] = v;
  std::ofstream out(path);
  if (!out) throw io_error("cannot write manifest: " + path.string());
  out << j.dump(2) << "\n";
}

Tensor image_tensor(const PpmImage& img) {
  Tensor t({img.height, img.width, 3});
  for (std::size_t i = 0; i < img.rgb.size(); ++i) t.data()[i] = img.rgb[i] / 255.0;
  return t;
}

struct PhraseArgs {
  std::vector<int> tokens;
  std::vector<PhraseSpan> spans;
  std::vector<std::string> joined;
};

PhraseArgs parse_phrases(const std::vector<std::string>& phrases) {
  if (phrases.empty()) throw usage_error("at least one --phrase is required");
  PhraseArgs out;
  for (const std::string& phrase : phrases) {
    std::istringstream ss(phrase);
    std::string word;
    PhraseSpan span{static_cast<int>(out.tokens.size()), 0};
    while (ss >> word) {
      const int id = token_id(word);
      if (id < 0) throw usage_error("token '" + word + "' is not in the vocabulary");
      out.tokens.push_back(id);
    }
    span.end = static_cast<int>(out.tokens.size());
    if (span.end == span.begin) throw usage_error("empty phrase '" + phrase + "'");
    out.spans.push_back(span);
    out.joined.push_back(phrase);
  }
  return out;
}

void cmd_gen_data(std::uint64_t seed, int size, int samples, int max_shapes,
                  const fs::path& out_dir) {
  if (samples < 1) throw usage_error("--samples must be >= 1");
  if (size < 32 || size % 32 != 0) throw usage_error("--size must be a positive multiple of 32");
  GenConfig gen;
  gen.image_size = size;
  gen.n_samples = samples;
  gen.max_shapes = max_shapes;
  auto data = generate_synthetic(seed, gen);
  save_dataset(data, out_dir);
  std::cout << "wrote " << data.size() << " samples to " << out_dir.string() << "\n";
}

void cmd_train(const fs::path& data_dir, const fs::path& config_path, const fs::path& out_dir,
               ModelConfig mc, TrainConfig tc, bool quiet) {
  if (!config_path.empty()) load_config_file(config_path, mc, tc);
  auto data = load_dataset(data_dir);
  fs::create_directories(out_dir);
  Model model(mc, tc.seed);
  std::cout << "training on " << data.size() << " samples, " << model.params().total_elements()
            << " parameters\n";
  TrainResult result = train(model, data, tc, [&](const StepLog& log) {
    if (!quiet && (log.step % 50 == 0 || log.step == 1)) {
      std::printf("step %5d  total %.5f  bce %.5f  dice %.5f  sal %.5f  lr %.2e\n", log.step,
                  log.total, log.bce, log.dice, log.sal, log.lr);
    }
  });
  save_checkpoint(model.params(), out_dir / "checkpoint.epng");
  write_trace_csv(out_dir / "trace.csv", result.trace);
  write_manifest(out_dir / "manifest.json", "train", mc, tc,
                 {{"dataset", data_dir.string()},
                  {"checkpoint", (out_dir / "checkpoint.epng").string()},
                  {"steps_run", result.steps_run}});
  EvalReport report = evaluate(model, data, tc.threshold);
  std::cout << "final training metrics: " << eval_report_json(report) << "\n";
}

void cmd_eval(const fs::path& data_dir, const fs::path& ckpt, double threshold,
              const fs::path& config_path, const fs::path& out_path) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw usage_error("--threshold must lie in (0,1)");
  ModelConfig mc;
  TrainConfig tc;
  if (!config_path.empty()) load_config_file(config_path, mc, tc);
  auto data = load_dataset(data_dir);
  Model model(mc, 0);
  load_checkpoint_into(model.params(), ckpt);
  EvalReport report = evaluate(model, data, threshold);
  const std::string line = eval_report_json(report);
  std::cout << line << "\n";
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw io_error("cannot write results: " + out_path.string());
    out << line << "\n";
  }
}

void cmd_infer(const fs::path& image_path, const std::vector<std::string>& phrases,
               const fs::path& ckpt, double threshold, const fs::path& config_path,
               const fs::path& out_dir) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw usage_error("--threshold must lie in (0,1)");
  ModelConfig mc;
  TrainConfig tc;
  if (!config_path.empty()) load_config_file(config_path, mc, tc);
  PhraseArgs pa = parse_phrases(phrases);
  PpmImage img = read_ppm(image_path);
  Model model(mc, 0);
  load_checkpoint_into(model.params(), ckpt);

  ModelOutput out = model.forward(image_tensor(img), pa.tokens, pa.spans);
  MaskSet masks = binarize(out.prob_image, threshold);
  fs::create_directories(out_dir);
  std::ofstream results(out_dir / "results.jsonl");
  if (!results) throw io_error("cannot write results: " + (out_dir / "results.jsonl").string());
  for (std::size_t l = 0; l < masks.binaries.size(); ++l) {
    std::vector<std::uint8_t> gray(masks.probabilities[l].size());
    for (std::size_t p = 0; p < gray.size(); ++p) {
      gray[p] = static_cast<std::uint8_t>(std::lround(masks.probabilities[l][p] * 255.0));
    }
    const std::string name = "phrase_" + std::to_string(l) + ".pgm";
    write_pgm(out_dir / name, masks.width, masks.height, gray);
    json record = {{"phrase", pa.joined[l]},
                   {"pgm", name},
                   {"threshold", threshold},
                   {"rle", rle_encode(masks.binaries[l])}};
    results << record.dump() << "\n";
  }
  write_manifest(out_dir / "manifest.json", "infer", mc, tc,
                 {{"image", image_path.string()},
                  {"checkpoint", ckpt.string()},
                  {"phrases", pa.joined},
                  {"threshold", threshold}});
  std::cout << "wrote " << masks.binaries.size() << " masks to " << out_dir.string() << "\n";
}

void cmd_viz_attn(const fs::path& image_path, const std::vector<std::string>& phrases,
                  const fs::path& ckpt, int layer, int head, int cell,
                  const fs::path& config_path, const fs::path& out_path) {
  ModelConfig mc;
  TrainConfig tc;
  if (!config_path.empty()) load_config_file(config_path, mc, tc);
  if (layer < 0 || layer >= mc.layers) throw usage_error("--layer out of range");
  if (head < 0 || head >= mc.heads) throw usage_error("--head out of range");
  PhraseArgs pa = parse_phrases(phrases);
  PpmImage img = read_ppm(image_path);
  Model model(mc, 0);
  load_checkpoint_into(model.params(), ckpt);

  CommProbe probe;
  model.forward(image_tensor(img), pa.tokens, pa.spans, &probe);
  const Tensor& attn = probe.lpa_attention.at(static_cast<std::size_t>(layer))
                           .at(static_cast<std::size_t>(head));
  const int cells = attn.extent(0);
  if (cell < 0 || cell >= cells) {
    throw usage_error("--cell out of range (grid has " + std::to_string(cells) + " cells)");
  }
  const int gw = img.width / 16, gh = img.height / 16;
  std::vector<double> row(attn.data() + static_cast<std::size_t>(cell) * cells,
                          attn.data() + static_cast<std::size_t>(cell + 1) * cells);
  double total = 0.0, mx = 0.0;
  for (double v : row) {
    total += v;
    mx = std::max(mx, v);
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw numeric_error("attention row does not normalize to 1 (sum=" + std::to_string(total) + ")");
  }
  std::vector<std::uint8_t> gray(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) {
    gray[i] = static_cast<std::uint8_t>(std::lround(row[i] / mx * 255.0));
  }
  write_pgm(out_path, gw, gh, gray);
  write_manifest(fs::path(out_path.string() + ".manifest.json"), "viz-attn", mc, tc,
                 {{"image", image_path.string()},
                  {"checkpoint", ckpt.string()},
                  {"phrases", pa.joined},
                  {"layer", layer},
                  {"head", head},
                  {"cell", cell}});
  std::cout << "wrote attention map to " << out_path.string() << "\n";
}

void cmd_bench(int size, int n_phrases, int repeats, const fs::path& config_path) {
  if (repeats < 3) throw usage_error("--repeats must be >= 3");
  if (size < 32 || size % 32 != 0) throw usage_error("--size must be a positive multiple of 32");
  if (n_phrases < 1) throw usage_error("--phrases must be >= 1");
  ModelConfig mc;
  TrainConfig tc;
  if (!config_path.empty()) load_config_file(config_path, mc, tc);
  Model model(mc, 0);

  Rng rng(1234);
  Tensor image({size, size, 3});
  for (std::size_t i = 0; i < image.size(); ++i) image.data()[i] = rng.uniform01();
  std::vector<int> tokens;
  std::vector<PhraseSpan> spans;
  for (int l = 0; l < n_phrases; ++l) {
    tokens.push_back(rng.below(model.config().vocab_size));
    tokens.push_back(rng.below(model.config().vocab_size));
    spans.push_back({2 * l, 2 * l + 2});
  }

  model.forward(image, tokens, spans);  // warm-up
  std::vector<double> times_ms;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    model.forward(image, tokens, spans);
    const auto t1 = std::chrono::steady_clock::now();
    times_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  double mean = 0.0;
  for (double t : times_ms) mean += t / repeats;
  double var = 0.0;
  for (double t : times_ms) var += (t - mean) * (t - mean) / repeats;
  json j = {{"size", size},
            {"phrases", n_phrases},
            {"repeats", repeats},
            {"mean_ms", mean},
            {"std_ms", std::sqrt(var)},
            {"parameters", model.params().total_elements()}};
  std::cout << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"single-stage panoptic narrative grounding at desk scale"};
  app.require_subcommand(1);

  ModelConfig mc;
  TrainConfig tc;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::uint64_t gen_seed = 0;
  int gen_size = 64, gen_samples = 20, gen_max_shapes = 2;
  std::string gen_out = "dataset";
  gen->add_option("--seed", gen_seed);
  gen->add_option("--size", gen_size);
  gen->add_option("--samples", gen_samples);
  gen->add_option("--max-shapes", gen_max_shapes);
  gen->add_option("--out", gen_out);
  gen->callback([&]() { cmd_gen_data(gen_seed, gen_size, gen_samples, gen_max_shapes, gen_out); });

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_data, tr_config, tr_out = "run";
  bool tr_quiet = false;
  bool seed_set = false, steps_set = false, batch_set = false, lr_set = false, thr_set = false;
  std::uint64_t tr_seed = 0;
  int tr_steps = 0, tr_batch = 0;
  double tr_lr = 0, tr_thr = 0, tr_stop_ar = 0;
  tr->add_option("--data", tr_data)->required();
  tr->add_option("--config", tr_config);
  tr->add_option("--out", tr_out);
  tr->add_option("--seed", tr_seed)->each([&](const std::string&) { seed_set = true; });
  tr->add_option("--steps", tr_steps)->each([&](const std::string&) { steps_set = true; });
  tr->add_option("--batch", tr_batch)->each([&](const std::string&) { batch_set = true; });
  tr->add_option("--lr", tr_lr)->each([&](const std::string&) { lr_set = true; });
  tr->add_option("--threshold", tr_thr)->each([&](const std::string&) { thr_set = true; });
  tr->add_option("--stop-ar", tr_stop_ar);
  tr->add_flag("--quiet", tr_quiet);
  tr->callback([&]() {
    ModelConfig m = mc;
    TrainConfig t = tc;
    if (!tr_config.empty()) load_config_file(tr_config, m, t);
    if (seed_set) t.seed = tr_seed;
    if (steps_set) t.steps = tr_steps;
    if (batch_set) t.batch_size = tr_batch;
    if (lr_set) t.lr = tr_lr;
    if (thr_set) t.threshold = tr_thr;
    if (tr_stop_ar > 0) t.stop_at_train_ar = tr_stop_ar;
    cmd_train(tr_data, "", tr_out, m, t, tr_quiet);
  });

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ev_data, ev_ckpt, ev_config, ev_out;
  double ev_thr = 0.5;
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--threshold", ev_thr);
  ev->add_option("--config", ev_config);
  ev->add_option("--out", ev_out);
  ev->callback([&]() { cmd_eval(ev_data, ev_ckpt, ev_thr, ev_config, ev_out); });

  // infer
  auto* in = app.add_subcommand("infer", "predict masks for phrases on one image");
  std::string in_image, in_ckpt, in_config, in_out = "infer_out";
  std::vector<std::string> in_phrases;
  double in_thr = 0.5;
  in->add_option("--image", in_image)->required();
  in->add_option("--phrase", in_phrases);
  in->add_option("--ckpt", in_ckpt)->required();
  in->add_option("--threshold", in_thr);
  in->add_option("--config", in_config);
  in->add_option("--out", in_out);
  in->callback([&]() { cmd_infer(in_image, in_phrases, in_ckpt, in_thr, in_config, in_out); });

  // viz-attn
  auto* viz = app.add_subcommand("viz-attn", "dump one locality-attention row as a PGM");
  std::string viz_image, viz_ckpt, viz_config, viz_out = "attn.pgm";
  std::vector<std::string> viz_phrases;
  int viz_layer = 0, viz_head = 0, viz_cell = 0;
  viz->add_option("--image", viz_image)->required();
  viz->add_option("--phrase", viz_phrases);
  viz->add_option("--ckpt", viz_ckpt)->required();
  viz->add_option("--layer", viz_layer);
  viz->add_option("--head", viz_head);
  viz->add_option("--cell", viz_cell);
  viz->add_option("--config", viz_config);
  viz->add_option("--out", viz_out);
  viz->callback([&]() {
    cmd_viz_attn(viz_image, viz_phrases, viz_ckpt, viz_layer, viz_head, viz_cell, viz_config,
                 viz_out);
  });

  // bench
  auto* be = app.add_subcommand("bench", "time single-image forward passes");
  int be_size = 64, be_phrases = 6, be_repeats = 10;
  std::string be_config;
  be->add_option("--size", be_size);
  be->add_option("--phrases", be_phrases);
  be->add_option("--repeats", be_repeats);
  be->add_option("--config", be_config);
  be->callback([&]() { cmd_bench(be_size, be_phrases, be_repeats, be_config); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  } catch (const usage_error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const mismatch_error& e) {
    std::cerr << "mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const io_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
