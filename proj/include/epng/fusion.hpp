#pragma once

#include <memory>
#include <string>
#include <vector>

#include "epng/config.hpp"
#include "epng/lpa.hpp"
#include "epng/params.hpp"
#include "epng/tensor.hpp"

namespace epng {

/// Cross-modal attention: visual cells attend over the noun-phrase features,
/// then residual + layer norm, then the feed-forward network. As specified,
/// the FFN output is returned without a second residual; ffn_residual in the
/// config switches the standard transformer form back on.
class CrossAttentionBlock {
 public:
  CrossAttentionBlock(ParameterStore& store, const std::string& prefix, const ModelConfig& config,
                      Rng& rng);

  /// x: (n, C) visual cells, phrases: (L, C). attn_out, if given, receives
  /// each head's (n, L) attention matrix.
  Tensor forward(const Tensor& x, const Tensor& phrases,
                 std::vector<Tensor>* attn_out = nullptr) const;

 private:
  std::vector<Tensor> w_q_, w_k_, w_v_;
  Tensor w_o_;
  Tensor ln_gamma_, ln_beta_;
  Tensor ffn_w1_, ffn_b1_, ffn_w2_, ffn_b2_;
  int channels_ = 0;
  bool ffn_residual_ = false;
};

/// Per-layer attention capture for the whole communicator stack.
struct CommProbe {
  std::vector<std::vector<Tensor>> lpa_attention;    // [layer][head], (n, n)
  std::vector<std::vector<Tensor>> cross_attention;  // [layer][head], (n, L)
};

/// S serial identical layers, each an LpaLayer followed by a
/// CrossAttentionBlock, with independent parameters per layer.
class Communicator {
 public:
  Communicator(ParameterStore& store, const ModelConfig& config, Rng& rng);

  Tensor forward(const Tensor& x, const DistanceMatrix& d, const Tensor& phrases,
                 CommProbe* probe = nullptr) const;

  int layers() const { return static_cast<int>(lpa_.size()); }

 private:
  std::vector<std::unique_ptr<LpaLayer>> lpa_;
  std::vector<std::unique_ptr<CrossAttentionBlock>> cross_;
};

}  // namespace epng
