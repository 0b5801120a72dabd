#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <utility>
#include <vector>

#include "epng/config.hpp"
#include "epng/encoders.hpp"
#include "epng/fusion.hpp"
#include "epng/head.hpp"
#include "epng/params.hpp"

namespace epng {

struct ModelOutput {
  GridFeatureMap fused;    // stride 16
  Tensor pixel_features;   // (n4, C), stride-4 rows
  Tensor phrase_features;  // (L, C)
  Tensor logits4;          // (n4, L)
  Tensor prob_image;       // (H, W, L)
};

/// The full grounding network: visual pyramid, text encoder, multi-modal
/// communicator and dense prediction head. Parameter initialization is a
/// pure function of (config, seed).
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  ModelOutput forward(const Tensor& image, const std::vector<int>& tokens,
                      const std::vector<PhraseSpan>& spans, CommProbe* probe = nullptr) const;

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

  /// Distance matrix for a stride-16 grid, cached per resolution.
  const DistanceMatrix& distances(int height, int width) const;

 private:
  ModelConfig config_;
  ParameterStore store_;
  std::unique_ptr<VisualEncoder> visual_;
  std::unique_ptr<TextEncoder> text_;
  std::unique_ptr<Communicator> communicator_;
  mutable std::map<std::pair<int, int>, DistanceMatrix> distance_cache_;
};

}  // namespace epng
