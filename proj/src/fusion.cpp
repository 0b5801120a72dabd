#include "epng/fusion.hpp"

#include <cmath>
#include <stdexcept>

namespace epng {

CrossAttentionBlock::CrossAttentionBlock(ParameterStore& store, const std::string& prefix,
                                         const ModelConfig& config, Rng& rng)
    : channels_(config.channels), ffn_residual_(config.ffn_residual) {
  config.validate();
  const int dk = config.channels / config.heads;
  const double w_std = std::sqrt(1.0 / config.channels);
  for (int j = 0; j < config.heads; ++j) {
    const std::string hp = prefix + "head" + std::to_string(j) + ".";
    w_q_.push_back(store.create_normal(hp + "w_q", {channels_, dk}, rng, w_std));
    w_k_.push_back(store.create_normal(hp + "w_k", {channels_, dk}, rng, w_std));
    w_v_.push_back(store.create_normal(hp + "w_v", {channels_, dk}, rng, w_std));
  }
  w_o_ = store.create_normal(prefix + "w_o", {channels_, channels_}, rng, w_std);
  ln_gamma_ = store.create(prefix + "ln.gamma", {channels_}, 1.0);
  ln_beta_ = store.create(prefix + "ln.beta", {channels_});
  ffn_w1_ = store.create_normal(prefix + "ffn.w1", {channels_, config.ffn_hidden}, rng,
                                std::sqrt(2.0 / channels_));
  ffn_b1_ = store.create(prefix + "ffn.b1", {config.ffn_hidden});
  ffn_w2_ = store.create_normal(prefix + "ffn.w2", {config.ffn_hidden, channels_}, rng,
                                std::sqrt(1.0 / config.ffn_hidden));
  ffn_b2_ = store.create(prefix + "ffn.b2", {channels_});
}

Tensor CrossAttentionBlock::forward(const Tensor& x, const Tensor& phrases,
                                    std::vector<Tensor>* attn_out) const {
  if (x.rank() != 2 || x.extent(1) != channels_) {
    throw std::invalid_argument("cross attention: input " + shape_str(x.shape()) + " for width " +
                                std::to_string(channels_));
  }
  if (phrases.rank() != 2 || phrases.extent(1) != channels_) {
    throw std::invalid_argument("cross attention: phrase width mismatch " +
                                shape_str(phrases.shape()) + " vs channels " +
                                std::to_string(channels_));
  }
  const int h = static_cast<int>(w_q_.size());
  const int dk = channels_ / h;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  std::vector<Tensor> head_outputs;
  head_outputs.reserve(static_cast<std::size_t>(h));
  for (int j = 0; j < h; ++j) {
    const std::size_t ji = static_cast<std::size_t>(j);
    Tensor q = matmul(x, w_q_[ji]);
    Tensor k = matmul(phrases, w_k_[ji]);
    Tensor v = matmul(phrases, w_v_[ji]);
    Tensor attn = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_dk));
    if (attn_out) attn_out->push_back(attn);
    head_outputs.push_back(matmul(attn, v));
  }
  Tensor merged = matmul(concat_last(head_outputs), w_o_);
  Tensor normed = layer_norm(add(merged, x), ln_gamma_, ln_beta_);
  Tensor hidden = relu(add_rowvec(matmul(normed, ffn_w1_), ffn_b1_));
  Tensor out = add_rowvec(matmul(hidden, ffn_w2_), ffn_b2_);
  if (ffn_residual_) out = add(out, normed);
  return out;
}

Communicator::Communicator(ParameterStore& store, const ModelConfig& config, Rng& rng) {
  config.validate();
  for (int i = 0; i < config.layers; ++i) {
    const std::string prefix = "communicator.layer" + std::to_string(i) + ".";
    lpa_.push_back(std::make_unique<LpaLayer>(store, prefix + "lpa.", config, rng));
    cross_.push_back(std::make_unique<CrossAttentionBlock>(store, prefix + "cross.", config, rng));
  }
}

Tensor Communicator::forward(const Tensor& x, const DistanceMatrix& d, const Tensor& phrases,
                             CommProbe* probe) const {
  Tensor f = x;
  for (std::size_t i = 0; i < lpa_.size(); ++i) {
    std::vector<Tensor>* lpa_sink = nullptr;
    std::vector<Tensor>* cross_sink = nullptr;
    if (probe) {
      probe->lpa_attention.emplace_back();
      probe->cross_attention.emplace_back();
      lpa_sink = &probe->lpa_attention.back();
      cross_sink = &probe->cross_attention.back();
    }
    f = lpa_[i]->forward(f, d, lpa_sink);
    f = cross_[i]->forward(f, phrases, cross_sink);
  }
  return f;
}

}  // namespace epng
