#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "epng/gradcheck.hpp"
#include "epng/lpa.hpp"

using namespace epng;

namespace {

constexpr double kSqrt2 = 1.4142135623730951;

ModelConfig tiny_config() {
  ModelConfig c;
  c.channels = 8;
  c.heads = 2;
  c.layers = 1;
  c.ffn_hidden = 16;
  return c;
}

// Plain multi-head attention + residual + layer norm, written directly
// against the raw weight arrays as an independent reference.
std::vector<double> reference_mha_block(const std::vector<double>& x, int n, int c, int heads,
                                        const ParameterStore& store, const std::string& prefix) {
  const int dk = c / heads;
  std::vector<double> merged(static_cast<std::size_t>(n) * c, 0.0);
  for (int j = 0; j < heads; ++j) {
    const Tensor& wq = *store.find(prefix + "head" + std::to_string(j) + ".w_q");
    const Tensor& wk = *store.find(prefix + "head" + std::to_string(j) + ".w_k");
    const Tensor& wv = *store.find(prefix + "head" + std::to_string(j) + ".w_v");
    std::vector<double> q(static_cast<std::size_t>(n) * dk, 0.0), k(q), v(q);
    for (int i = 0; i < n; ++i) {
      for (int d = 0; d < dk; ++d) {
        for (int e = 0; e < c; ++e) {
          q[static_cast<std::size_t>(i) * dk + d] += x[static_cast<std::size_t>(i) * c + e] * wq.at(static_cast<std::size_t>(e) * dk + d);
          k[static_cast<std::size_t>(i) * dk + d] += x[static_cast<std::size_t>(i) * c + e] * wk.at(static_cast<std::size_t>(e) * dk + d);
          v[static_cast<std::size_t>(i) * dk + d] += x[static_cast<std::size_t>(i) * c + e] * wv.at(static_cast<std::size_t>(e) * dk + d);
        }
      }
    }
    for (int i = 0; i < n; ++i) {
      std::vector<double> logits(static_cast<std::size_t>(n));
      double mx = -1e300;
      for (int m = 0; m < n; ++m) {
        double dot = 0.0;
        for (int d = 0; d < dk; ++d) dot += q[static_cast<std::size_t>(i) * dk + d] * k[static_cast<std::size_t>(m) * dk + d];
        logits[static_cast<std::size_t>(m)] = dot / std::sqrt(double(dk));
        mx = std::max(mx, logits[static_cast<std::size_t>(m)]);
      }
      double sum = 0.0;
      for (double& l : logits) {
        l = std::exp(l - mx);
        sum += l;
      }
      for (int m = 0; m < n; ++m) {
        const double a = logits[static_cast<std::size_t>(m)] / sum;
        for (int d = 0; d < dk; ++d) {
          merged[static_cast<std::size_t>(i) * c + j * dk + d] += a * v[static_cast<std::size_t>(m) * dk + d];
        }
      }
    }
  }
  const Tensor& wo = *store.find(prefix + "w_o");
  const Tensor& gamma = *store.find(prefix + "ln.gamma");
  const Tensor& beta = *store.find(prefix + "ln.beta");
  std::vector<double> out(static_cast<std::size_t>(n) * c, 0.0);
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(static_cast<std::size_t>(c), 0.0);
    for (int e = 0; e < c; ++e) {
      for (int o = 0; o < c; ++o) {
        row[static_cast<std::size_t>(o)] += merged[static_cast<std::size_t>(i) * c + e] * wo.at(static_cast<std::size_t>(e) * c + o);
      }
    }
    for (int o = 0; o < c; ++o) row[static_cast<std::size_t>(o)] += x[static_cast<std::size_t>(i) * c + o];
    double mu = 0.0;
    for (double r : row) mu += r;
    mu /= c;
    double var = 0.0;
    for (double r : row) var += (r - mu) * (r - mu);
    var /= c;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int o = 0; o < c; ++o) {
      out[static_cast<std::size_t>(i) * c + o] =
          gamma.at(static_cast<std::size_t>(o)) * (row[static_cast<std::size_t>(o)] - mu) * inv + beta.at(static_cast<std::size_t>(o));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("distance matrix on tiny grids") {
  DistanceMatrix d = truncated_distance_matrix(1, 2);
  CHECK(d.values == std::vector<double>{0, 1, 1, 0});

  // Cells (0,0) and (3,4) on a 4x5 grid are 5 apart; stored capped at 2.
  DistanceMatrix d45 = truncated_distance_matrix(4, 5);
  const int n = 20;
  CHECK(d45.values[0 * n + 19] == 2.0);

  // 2x2 grid: every row's off-diagonal multiset is {1, 1, sqrt2}.
  DistanceMatrix d22 = truncated_distance_matrix(2, 2);
  for (int r = 0; r < 4; ++r) {
    std::vector<double> row;
    for (int k = 0; k < 4; ++k) {
      if (k != r) row.push_back(d22.values[static_cast<std::size_t>(r) * 4 + k]);
    }
    std::sort(row.begin(), row.end());
    CHECK(row[0] == 1.0);
    CHECK(row[1] == 1.0);
    CHECK(row[2] == doctest::Approx(kSqrt2).epsilon(1e-12));
  }
}

TEST_CASE("distance matrix brute-force check up to 8x8") {
  for (int h = 1; h <= 8; ++h) {
    for (int w = 1; w <= 8; ++w) {
      DistanceMatrix d = truncated_distance_matrix(h, w);
      const int n = h * w;
      for (int m = 0; m < n; ++m) {
        for (int k = 0; k < n; ++k) {
          const double dy = m / w - k / w;
          const double dx = m % w - k % w;
          const double expect = std::min(2.0, std::sqrt(dx * dx + dy * dy));
          REQUIRE(d.values[static_cast<std::size_t>(m) * n + k] == expect);
          REQUIRE(d.values[static_cast<std::size_t>(m) * n + k] ==
                  d.values[static_cast<std::size_t>(k) * n + m]);
        }
        REQUIRE(d.values[static_cast<std::size_t>(m) * n + m] == 0.0);
      }
    }
  }
}

TEST_CASE("distance buckets are {0, 1, sqrt2, 2} at the default cap") {
  DistanceMatrix d = truncated_distance_matrix(5, 5);
  REQUIRE(d.bucket_values.size() == 4);
  CHECK(d.bucket_values[0] == 0.0);
  CHECK(d.bucket_values[1] == 1.0);
  CHECK(d.bucket_values[2] == doctest::Approx(kSqrt2).epsilon(1e-15));
  CHECK(d.bucket_values[3] == 2.0);
}

TEST_CASE("coefficient matrix lookups") {
  DistanceMatrix d12 = truncated_distance_matrix(1, 2);
  Tensor table({4}, {5.0, 7.0, 11.0, 13.0});
  Tensor r = coefficient_matrix(d12, table);
  CHECK(r.at(0) == 5.0);
  CHECK(r.at(1) == 7.0);
  CHECK(r.at(2) == 7.0);
  CHECK(r.at(3) == 5.0);

  Tensor ones({4}, {1.0, 1.0, 1.0, 1.0});
  Tensor rid = coefficient_matrix(d12, ones);
  for (std::size_t i = 0; i < rid.size(); ++i) CHECK(rid.at(i) == 1.0);

  // Random table on a 2x3 grid against a per-entry brute-force lookup.
  DistanceMatrix d23 = truncated_distance_matrix(2, 3);
  Rng rng(3);
  Tensor rnd({4});
  for (std::size_t i = 0; i < 4; ++i) rnd.data()[i] = rng.normal();
  Tensor rr = coefficient_matrix(d23, rnd);
  for (std::size_t i = 0; i < rr.size(); ++i) {
    int bucket = -1;
    for (int b = 0; b < 4; ++b) {
      if (std::abs(d23.values[i] - d23.bucket_values[static_cast<std::size_t>(b)]) <= 1e-9) bucket = b;
    }
    REQUIRE(bucket >= 0);
    CHECK(rr.at(i) == rnd.at(static_cast<std::size_t>(bucket)));
  }
}

TEST_CASE("coefficient matrix rejects non-grid distances") {
  DistanceMatrix d = truncated_distance_matrix(1, 2);
  d.values[1] = 0.37;  // not a bucket value
  Tensor table({4}, {1.0, 1.0, 1.0, 1.0});
  CHECK_THROWS_AS(coefficient_matrix(d, table), std::runtime_error);
}

TEST_CASE("all-ones bias tables reduce LPA to standard MHA") {
  ModelConfig c = tiny_config();
  ParameterStore store;
  Rng rng(17);
  LpaLayer layer(store, "lpa.", c, rng);
  DistanceMatrix d = truncated_distance_matrix(3, 4);

  // Fresh tables are all ones already; randomize the rest via construction.
  Rng data_rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x({12, 8});
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = data_rng.normal(0.0, 1.0);
    Tensor out = layer.forward(x, d);
    std::vector<double> xs(x.data(), x.data() + x.size());
    std::vector<double> ref = reference_mha_block(xs, 12, 8, 2, store, "lpa.");
    for (std::size_t i = 0; i < out.size(); ++i) {
      REQUIRE(std::abs(out.at(i) - ref[i]) <= 1e-10);
    }
  }
}

TEST_CASE("single-cell grid: attention is the point mass and output hand-checks") {
  ModelConfig c = tiny_config();
  ParameterStore store;
  Rng rng(19);
  LpaLayer layer(store, "lpa.", c, rng);
  DistanceMatrix d = truncated_distance_matrix(1, 1);
  Tensor x({1, 8});
  for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();

  std::vector<Tensor> attn;
  Tensor out = layer.forward(x, d, &attn);
  REQUIRE(attn.size() == 2);
  for (const Tensor& a : attn) {
    REQUIRE(a.size() == 1);
    CHECK(a.at(0) == 1.0);
  }
  // With A = [[1]] the block is LayerNorm(concat(v-heads) W_O + x).
  std::vector<double> xs(x.data(), x.data() + x.size());
  std::vector<double> ref = reference_mha_block(xs, 1, 8, 2, store, "lpa.");
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out.at(i) == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("attention rows are probability distributions") {
  ModelConfig c = tiny_config();
  ParameterStore store;
  Rng rng(29);
  LpaLayer layer(store, "lpa.", c, rng);
  // Push the bias tables away from the identity.
  for (int j = 0; j < 2; ++j) {
    Tensor& t = *store.find("lpa.head" + std::to_string(j) + ".bias_table");
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = 0.5 + rng.uniform01();
  }
  DistanceMatrix d = truncated_distance_matrix(2, 3);
  Tensor x({6, 8});
  for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = rng.normal(0.0, 2.0);
  std::vector<Tensor> attn;
  Tensor out = layer.forward(x, d, &attn);
  CHECK(out.shape() == x.shape());
  for (const Tensor& a : attn) {
    for (int r = 0; r < 6; ++r) {
      double s = 0.0;
      for (int k = 0; k < 6; ++k) s += a.at(static_cast<std::size_t>(r) * 6 + k);
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("lpa gradients including bias tables pass finite differences") {
  ModelConfig c = tiny_config();
  ParameterStore store;
  Rng rng(31);
  LpaLayer layer(store, "lpa.", c, rng);
  for (int j = 0; j < 2; ++j) {
    Tensor& t = *store.find("lpa.head" + std::to_string(j) + ".bias_table");
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = 0.8 + 0.4 * rng.uniform01();
  }
  DistanceMatrix d = truncated_distance_matrix(2, 2);
  Tensor x({4, 8});
  for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = rng.normal(0.0, 0.7);

  Tensor weights({4, 8});
  for (std::size_t i = 0; i < weights.size(); ++i) weights.data()[i] = rng.normal();

  auto f = [&]() { return sum(mul(layer.forward(x, d), weights)); };
  std::vector<Parameter> params(store.items().begin(), store.items().end());
  auto rep = grad_check(f, params);
  CHECK(!rep.non_finite);
  CHECK(rep.max_rel_error <= 1e-5);
}

TEST_CASE("construction rejects channel/head mismatch") {
  ModelConfig c = tiny_config();
  c.channels = 9;
  ParameterStore store;
  Rng rng(1);
  CHECK_THROWS_AS(LpaLayer(store, "lpa.", c, rng), std::invalid_argument);
}
