#pragma once

#include <vector>

#include "epng/config.hpp"
#include "epng/params.hpp"
#include "epng/rng.hpp"
#include "epng/tensor.hpp"

namespace epng {

/// Pairwise Euclidean distances between grid cells (row-major flattening),
/// truncated at an upper bound. On integer grids with the default bound 2
/// the distinct values are exactly {0, 1, sqrt 2, 2}, so each entry also
/// carries the index of its value bucket. Depends only on (height, width,
/// cap), never on features.
struct DistanceMatrix {
  int height = 0;
  int width = 0;
  double cap = 2.0;
  std::vector<double> values;        // (H*W) x (H*W), symmetric, zero diagonal
  std::vector<int> bucket_of;        // same layout, index into bucket_values
  std::vector<double> bucket_values; // sorted distinct truncated distances

  int cells() const { return height * width; }
};

DistanceMatrix truncated_distance_matrix(int height, int width, double cap = 2.0);

/// Per-head coefficient matrix: every entry of d is replaced by the table
/// entry of its distance bucket (matched with tolerance 1e-9). table is the
/// head's learned 1-D bucket table. A distance matching no bucket means the
/// matrix did not come from an integer grid and is an internal error.
Tensor coefficient_matrix(const DistanceMatrix& d, const Tensor& table);

/// Locality-Perceptive Attention: multi-head self-attention over the grid
/// whose pre-softmax logits are re-weighted elementwise by the per-head
/// coefficient matrix, followed by the residual connection and layer
/// normalization. Bucket tables start at all ones, which makes the layer
/// exactly a standard MHA block.
class LpaLayer {
 public:
  LpaLayer(ParameterStore& store, const std::string& prefix, const ModelConfig& config, Rng& rng);

  /// x: (n, C) with n == d.cells(). attn_out, if given, receives each head's
  /// attention matrix (n, n).
  Tensor forward(const Tensor& x, const DistanceMatrix& d,
                 std::vector<Tensor>* attn_out = nullptr) const;

  int heads() const { return static_cast<int>(w_q_.size()); }

 private:
  std::vector<Tensor> w_q_, w_k_, w_v_;  // per head (C, C/h)
  std::vector<Tensor> bias_table_;       // per head (buckets), empty when disabled
  Tensor w_o_;                           // (C, C)
  Tensor ln_gamma_, ln_beta_;
  int channels_ = 0;
  bool use_locality_bias_ = true;
  double distance_cap_ = 2.0;
};

}  // namespace epng
