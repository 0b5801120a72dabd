#include "epng/model.hpp"

namespace epng {

Model::Model(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(mix_seed(seed, 0x6d6f64656cull));
  visual_ = std::make_unique<VisualEncoder>(store_, config_, rng);
  text_ = std::make_unique<TextEncoder>(store_, config_, rng);
  communicator_ = std::make_unique<Communicator>(store_, config_, rng);
}

const DistanceMatrix& Model::distances(int height, int width) const {
  auto key = std::make_pair(height, width);
  auto it = distance_cache_.find(key);
  if (it == distance_cache_.end()) {
    it = distance_cache_.emplace(key, truncated_distance_matrix(height, width, config_.distance_cap))
             .first;
  }
  return it->second;
}

ModelOutput Model::forward(const Tensor& image, const std::vector<int>& tokens,
                           const std::vector<PhraseSpan>& spans, CommProbe* probe) const {
  GridFeatureMap grid = visual_->forward(image);
  PhraseSet phrases = text_->forward(tokens, spans);

  const int gh = grid.height(), gw = grid.width(), c = grid.channels();
  const DistanceMatrix& d = distances(gh, gw);
  Tensor cells = grid.features.reshaped({gh * gw, c});
  Tensor fused_cells = communicator_->forward(cells, d, phrases.features, probe);
  GridFeatureMap fused{fused_cells.reshaped({gh, gw, c}), 16};

  HeadOutput head = predict_logits(fused, phrases.features);

  ModelOutput out;
  out.fused = fused;
  out.pixel_features = head.pixel_features;
  out.phrase_features = phrases.features;
  out.logits4 = head.logits4;
  out.prob_image = head.prob_image;
  return out;
}

}  // namespace epng
