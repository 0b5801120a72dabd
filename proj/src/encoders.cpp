#include "epng/encoders.hpp"

#include <cmath>
#include <stdexcept>

namespace epng {

namespace {

double he_std(int fan_in) { return std::sqrt(2.0 / fan_in); }

}  // namespace

void ModelConfig::validate() const {
  if (channels <= 0 || stem_channels <= 0 || pyramid_channels <= 0 || text_dim <= 0 ||
      vocab_size <= 0 || ffn_hidden <= 0) {
    throw std::invalid_argument("model config: nonpositive dimension");
  }
  if (heads <= 0 || channels % heads != 0) {
    throw std::invalid_argument("model config: channels " + std::to_string(channels) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (layers < 1) throw std::invalid_argument("model config: layers must be >= 1");
  if (!(distance_cap > 0.0)) throw std::invalid_argument("model config: distance_cap must be > 0");
}

void LossConfig::validate() const {
  if (lambda_bce < 0 || lambda_dice < 0 || lambda_sal < 0) {
    throw std::invalid_argument("loss config: negative weight");
  }
  if (!(tau > 0.0)) {
    throw std::invalid_argument("loss config: temperature must be positive, got " +
                                std::to_string(tau));
  }
}

VisualEncoder::VisualEncoder(ParameterStore& store, const ModelConfig& config, Rng& rng)
    : channels_(config.channels) {
  const int stem = config.stem_channels;
  const int cp = config.pyramid_channels;
  conv1_w_ = store.create_normal("visual.conv1.weight", {stem, 3, 3, 3}, rng, he_std(3 * 3 * 3));
  conv1_b_ = store.create("visual.conv1.bias", {stem});
  conv2_w_ = store.create_normal("visual.conv2.weight", {cp, 3, 3, stem}, rng, he_std(9 * stem));
  conv2_b_ = store.create("visual.conv2.bias", {cp});
  conv3_w_ = store.create_normal("visual.conv3.weight", {cp, 3, 3, cp}, rng, he_std(9 * cp));
  conv3_b_ = store.create("visual.conv3.bias", {cp});
  conv4_w_ = store.create_normal("visual.conv4.weight", {cp, 3, 3, cp}, rng, he_std(9 * cp));
  conv4_b_ = store.create("visual.conv4.bias", {cp});
  conv5_w_ = store.create_normal("visual.conv5.weight", {cp, 3, 3, cp}, rng, he_std(9 * cp));
  conv5_b_ = store.create("visual.conv5.bias", {cp});
  proj_w_ = store.create_normal("visual.proj.weight", {3 * cp, config.channels}, rng,
                                std::sqrt(1.0 / (3 * cp)));
  proj_b_ = store.create("visual.proj.bias", {config.channels});
}

GridFeatureMap VisualEncoder::forward(const Tensor& image) const {
  if (image.rank() != 3 || image.extent(2) != 3) {
    throw std::invalid_argument("visual encoder: expected (H, W, 3), got " +
                                shape_str(image.shape()));
  }
  const int h = image.extent(0), w = image.extent(1);
  if (h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0) {
    throw std::invalid_argument("visual encoder: extents must be multiples of 32, got " +
                                std::to_string(h) + "x" + std::to_string(w));
  }

  Tensor x = relu(conv3x3(image, conv1_w_, conv1_b_, 2));  // stride 2
  x = relu(conv3x3(x, conv2_w_, conv2_b_, 2));             // stride 4
  Tensor f1 = relu(conv3x3(x, conv3_w_, conv3_b_, 2));     // stride 8
  Tensor f2 = relu(conv3x3(f1, conv4_w_, conv4_b_, 2));    // stride 16
  Tensor f3 = relu(conv3x3(f2, conv5_w_, conv5_b_, 2));    // stride 32

  Tensor down = avgpool2(f1);
  Tensor up = upsample_bilinear(f3, 2);
  std::vector<Tensor> parts = {down, f2, up};
  Tensor cat = concat_last(parts);

  const int gh = cat.extent(0), gw = cat.extent(1), gc = cat.extent(2);
  Tensor flat = cat.reshaped({gh * gw, gc});
  Tensor fused = add_rowvec(matmul(flat, proj_w_), proj_b_);
  return GridFeatureMap{fused.reshaped({gh, gw, channels_}), 16};
}

TextEncoder::TextEncoder(ParameterStore& store, const ModelConfig& config, Rng& rng)
    : vocab_size_(config.vocab_size) {
  embedding_ = store.create_normal("text.embedding", {config.vocab_size, config.text_dim}, rng, 0.5);
  proj_w_ = store.create_normal("text.proj.weight", {config.text_dim, config.channels}, rng,
                                std::sqrt(1.0 / config.text_dim));
  proj_b_ = store.create("text.proj.bias", {config.channels});
}

PhraseSet TextEncoder::forward(const std::vector<int>& tokens, const std::vector<PhraseSpan>& spans,
                               std::vector<PhraseTags> tags) const {
  if (spans.empty()) throw std::invalid_argument("text encoder: no phrase spans");
  const int n_tokens = static_cast<int>(tokens.size());
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const PhraseSpan& s = spans[i];
    if (s.begin < 0 || s.end <= s.begin || s.end > n_tokens) {
      throw std::invalid_argument("text encoder: bad span " + std::to_string(i) + " [" +
                                  std::to_string(s.begin) + "," + std::to_string(s.end) + ") of " +
                                  std::to_string(n_tokens) + " tokens");
    }
  }
  for (int t : tokens) {
    if (t < 0 || t >= vocab_size_) {
      throw std::invalid_argument("text encoder: token id " + std::to_string(t) + " out of " +
                                  std::to_string(vocab_size_));
    }
  }

  Tensor word_feats = take_rows(embedding_, tokens);  // (T, E)

  // Average pooling per span as one constant matrix (L, T).
  const int n_phrases = static_cast<int>(spans.size());
  Tensor pool({n_phrases, n_tokens});
  for (int l = 0; l < n_phrases; ++l) {
    const double inv = 1.0 / (spans[static_cast<std::size_t>(l)].end - spans[static_cast<std::size_t>(l)].begin);
    for (int t = spans[static_cast<std::size_t>(l)].begin; t < spans[static_cast<std::size_t>(l)].end; ++t) {
      pool.data()[static_cast<std::size_t>(l) * n_tokens + t] = inv;
    }
  }
  Tensor pooled = matmul(pool, word_feats);                      // (L, E)
  Tensor projected = add_rowvec(matmul(pooled, proj_w_), proj_b_);  // (L, C)

  PhraseSet out;
  out.features = projected;
  out.spans = spans;
  if (tags.empty()) tags.resize(spans.size());
  out.tags = std::move(tags);
  return out;
}

}  // namespace epng
