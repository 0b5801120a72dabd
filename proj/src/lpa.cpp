#include "epng/lpa.hpp"

#include <cmath>
#include <stdexcept>

namespace epng {

namespace {

constexpr double kBucketTol = 1e-9;

// Distinct truncated distances on an unbounded integer grid: every offset
// length below the cap, plus the cap itself. Grid-independent, so bucket
// tables keep their shape across resolutions.
std::vector<double> bucket_list(double cap) {
  std::vector<double> vals = {0.0};
  const int m = static_cast<int>(std::ceil(cap));
  for (int dy = 0; dy <= m; ++dy) {
    for (int dx = 0; dx <= m; ++dx) {
      const double d = std::sqrt(static_cast<double>(dx * dx + dy * dy));
      if (d >= cap - kBucketTol) continue;
      bool seen = false;
      for (double v : vals) {
        if (std::abs(v - d) <= kBucketTol) seen = true;
      }
      if (!seen) vals.push_back(d);
    }
  }
  vals.push_back(cap);
  std::sort(vals.begin(), vals.end());
  return vals;
}

}  // namespace

DistanceMatrix truncated_distance_matrix(int height, int width, double cap) {
  if (height < 1 || width < 1) {
    throw std::invalid_argument("distance matrix: bad grid " + std::to_string(height) + "x" +
                                std::to_string(width));
  }
  if (!(cap > 0.0)) throw std::invalid_argument("distance matrix: cap must be positive");
  DistanceMatrix d;
  d.height = height;
  d.width = width;
  d.cap = cap;
  d.bucket_values = bucket_list(cap);
  const int n = height * width;
  d.values.resize(static_cast<std::size_t>(n) * n);
  d.bucket_of.resize(d.values.size());
  for (int m = 0; m < n; ++m) {
    const int ym = m / width, xm = m % width;
    for (int k = 0; k < n; ++k) {
      const int yk = k / width, xk = k % width;
      const double dx = xm - xk, dy = ym - yk;
      const double dist = std::min(cap, std::sqrt(dx * dx + dy * dy));
      int bucket = -1;
      for (std::size_t b = 0; b < d.bucket_values.size(); ++b) {
        if (std::abs(d.bucket_values[b] - dist) <= kBucketTol) {
          bucket = static_cast<int>(b);
          break;
        }
      }
      if (bucket < 0) {
        throw std::runtime_error("distance matrix: value " + std::to_string(dist) +
                                 " matches no bucket");
      }
      d.values[static_cast<std::size_t>(m) * n + k] = dist;
      d.bucket_of[static_cast<std::size_t>(m) * n + k] = bucket;
    }
  }
  return d;
}

Tensor coefficient_matrix(const DistanceMatrix& d, const Tensor& table) {
  if (table.rank() != 1 || table.extent(0) != static_cast<int>(d.bucket_values.size())) {
    throw std::invalid_argument("coefficient matrix: table " + shape_str(table.shape()) + " for " +
                                std::to_string(d.bucket_values.size()) + " buckets");
  }
  const int n = d.cells();
  for (std::size_t i = 0; i < d.values.size(); ++i) {
    const int b = d.bucket_of[i];
    if (b < 0 || b >= static_cast<int>(d.bucket_values.size()) ||
        std::abs(d.values[i] - d.bucket_values[static_cast<std::size_t>(b)]) > kBucketTol) {
      throw std::runtime_error("coefficient matrix: distance " + std::to_string(d.values[i]) +
                               " matches no bucket (non-grid distance source)");
    }
  }
  return table_lookup(table, d.bucket_of, {n, n});
}

LpaLayer::LpaLayer(ParameterStore& store, const std::string& prefix, const ModelConfig& config,
                   Rng& rng)
    : channels_(config.channels),
      use_locality_bias_(config.use_locality_bias),
      distance_cap_(config.distance_cap) {
  config.validate();
  const int dk = config.channels / config.heads;
  const double w_std = std::sqrt(1.0 / config.channels);
  const int buckets = static_cast<int>(bucket_list(config.distance_cap).size());
  for (int j = 0; j < config.heads; ++j) {
    const std::string hp = prefix + "head" + std::to_string(j) + ".";
    w_q_.push_back(store.create_normal(hp + "w_q", {channels_, dk}, rng, w_std));
    w_k_.push_back(store.create_normal(hp + "w_k", {channels_, dk}, rng, w_std));
    w_v_.push_back(store.create_normal(hp + "w_v", {channels_, dk}, rng, w_std));
    if (use_locality_bias_) {
      bias_table_.push_back(store.create(hp + "bias_table", {buckets}, 1.0));
    }
  }
  w_o_ = store.create_normal(prefix + "w_o", {channels_, channels_}, rng, w_std);
  ln_gamma_ = store.create(prefix + "ln.gamma", {channels_}, 1.0);
  ln_beta_ = store.create(prefix + "ln.beta", {channels_});
}

Tensor LpaLayer::forward(const Tensor& x, const DistanceMatrix& d,
                         std::vector<Tensor>* attn_out) const {
  if (x.rank() != 2 || x.extent(1) != channels_) {
    throw std::invalid_argument("lpa: input " + shape_str(x.shape()) + " for width " +
                                std::to_string(channels_));
  }
  if (x.extent(0) != d.cells()) {
    throw std::invalid_argument("lpa: " + std::to_string(x.extent(0)) + " cells but distance grid " +
                                std::to_string(d.height) + "x" + std::to_string(d.width));
  }
  if (std::abs(d.cap - distance_cap_) > 1e-12) {
    throw std::invalid_argument("lpa: distance matrix cap does not match layer cap");
  }
  const int h = heads();
  const int dk = channels_ / h;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  std::vector<Tensor> head_outputs;
  head_outputs.reserve(static_cast<std::size_t>(h));
  for (int j = 0; j < h; ++j) {
    const std::size_t ji = static_cast<std::size_t>(j);
    Tensor q = matmul(x, w_q_[ji]);
    Tensor k = matmul(x, w_k_[ji]);
    Tensor v = matmul(x, w_v_[ji]);
    Tensor logits = scale(matmul(q, transpose(k)), inv_sqrt_dk);
    if (use_locality_bias_) {
      logits = mul(logits, coefficient_matrix(d, bias_table_[ji]));
    }
    Tensor attn = softmax_rows(logits);
    if (attn_out) attn_out->push_back(attn);
    head_outputs.push_back(matmul(attn, v));
  }
  Tensor merged = matmul(concat_last(head_outputs), w_o_);
  return layer_norm(add(merged, x), ln_gamma_, ln_beta_);
}

}  // namespace epng
