#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "epng/encoders.hpp"
#include "epng/gradcheck.hpp"

using namespace epng;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.channels = 16;
  c.stem_channels = 8;
  c.pyramid_channels = 8;
  c.text_dim = 12;
  c.heads = 4;
  c.layers = 1;
  c.ffn_hidden = 24;
  return c;
}

}  // namespace

TEST_CASE("visual encoder shape arithmetic at 64x64") {
  ModelConfig c = tiny_config();
  ParameterStore store;
  Rng rng(1);
  VisualEncoder enc(store, c, rng);
  Tensor image({64, 64, 3}, 0.3);
  GridFeatureMap g = enc.forward(image);
  CHECK(g.stride == 16);
  CHECK(g.features.shape() == Shape{4, 4, 16});
}

TEST_CASE("visual encoder pyramid shapes at 640x640") {
  ModelConfig c = tiny_config();
  c.stem_channels = 2;
  c.pyramid_channels = 2;
  c.channels = 4;
  c.heads = 2;
  ParameterStore store;
  Rng rng(1);
  VisualEncoder enc(store, c, rng);
  Tensor image({640, 640, 3}, 0.1);
  GridFeatureMap g = enc.forward(image);
  // Fused grid 40x40 implies the stride-8/16/32 maps were 80x80, 40x40, 20x20.
  CHECK(g.features.shape() == Shape{40, 40, 4});
}

TEST_CASE("visual encoder rejects bad extents before compute") {
  ModelConfig c = tiny_config();
  ParameterStore store;
  Rng rng(1);
  VisualEncoder enc(store, c, rng);
  CHECK_THROWS_AS(enc.forward(Tensor({48, 64, 3})), std::invalid_argument);
  CHECK_THROWS_AS(enc.forward(Tensor({64, 48, 3})), std::invalid_argument);
  CHECK_THROWS_AS(enc.forward(Tensor({16, 16, 3})), std::invalid_argument);
  CHECK_THROWS_AS(enc.forward(Tensor({64, 64, 1})), std::invalid_argument);
}

TEST_CASE("all-zero image with zero biases gives all-zero fused features") {
  ModelConfig c = tiny_config();
  ParameterStore store;
  Rng rng(3);
  VisualEncoder enc(store, c, rng);  // biases start at zero
  Tensor image({64, 64, 3}, 0.0);
  GridFeatureMap g = enc.forward(image);
  for (std::size_t i = 0; i < g.features.size(); ++i) CHECK(g.features.at(i) == 0.0);
}

TEST_CASE("phrase encoding: single token, duplicated token, hand-computed mean") {
  ModelConfig c = tiny_config();
  ParameterStore store;
  Rng rng(5);
  TextEncoder enc(store, c, rng);

  std::vector<int> tokens = {7, 7, 3, 11, 20};
  PhraseSet one = enc.forward(tokens, {{0, 1}});
  PhraseSet two = enc.forward(tokens, {{0, 2}});  // two identical tokens
  REQUIRE(one.features.shape() == Shape{1, 16});
  for (std::size_t i = 0; i < one.features.size(); ++i) {
    CHECK(one.features.at(i) == doctest::Approx(two.features.at(i)).epsilon(1e-12));
  }

  // Mean-then-project by hand for a 3-token span.
  PhraseSet three = enc.forward(tokens, {{2, 5}});
  const Tensor& emb = *store.find("text.embedding");
  const Tensor& w = *store.find("text.proj.weight");
  const Tensor& b = *store.find("text.proj.bias");
  for (int o = 0; o < 16; ++o) {
    double acc = b.at(static_cast<std::size_t>(o));
    for (int e = 0; e < 12; ++e) {
      double m = (emb.at(static_cast<std::size_t>(3) * 12 + e) +
                  emb.at(static_cast<std::size_t>(11) * 12 + e) +
                  emb.at(static_cast<std::size_t>(20) * 12 + e)) /
                 3.0;
      acc += m * w.at(static_cast<std::size_t>(e) * 16 + o);
    }
    CHECK(three.features.at(static_cast<std::size_t>(o)) == doctest::Approx(acc).epsilon(1e-12));
  }
}

TEST_CASE("phrase feature is permutation-invariant within its span") {
  ModelConfig c = tiny_config();
  ParameterStore store;
  Rng rng(7);
  TextEncoder enc(store, c, rng);
  std::vector<int> a = {4, 9, 2};
  std::vector<int> b = {2, 4, 9};
  PhraseSet pa = enc.forward(a, {{0, 3}});
  PhraseSet pb = enc.forward(b, {{0, 3}});
  for (std::size_t i = 0; i < pa.features.size(); ++i) {
    CHECK(pa.features.at(i) == doctest::Approx(pb.features.at(i)).epsilon(1e-12));
  }
}

TEST_CASE("phrase encoding rejects bad spans with the span index") {
  ModelConfig c = tiny_config();
  ParameterStore store;
  Rng rng(9);
  TextEncoder enc(store, c, rng);
  std::vector<int> tokens = {1, 2, 3};
  try {
    enc.forward(tokens, {{0, 1}, {2, 2}});
    FAIL("expected invalid_argument");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("span 1") != std::string::npos);
  }
  CHECK_THROWS_AS(enc.forward(tokens, {{0, 4}}), std::invalid_argument);
  CHECK_THROWS_AS(enc.forward(tokens, std::vector<PhraseSpan>{}), std::invalid_argument);
}

TEST_CASE("encoders are deterministic") {
  ModelConfig c = tiny_config();
  ParameterStore s1, s2;
  Rng r1(42), r2(42);
  VisualEncoder v1(s1, c, r1), v2(s2, c, r2);
  Tensor image({32, 32, 3});
  Rng pix(8);
  for (std::size_t i = 0; i < image.size(); ++i) image.data()[i] = pix.uniform01();
  GridFeatureMap a = v1.forward(image);
  GridFeatureMap b = v2.forward(image);
  for (std::size_t i = 0; i < a.features.size(); ++i) CHECK(a.features.at(i) == b.features.at(i));
}

TEST_CASE("visual encoder gradients flow to all conv stages") {
  ModelConfig c = tiny_config();
  c.stem_channels = 4;
  c.pyramid_channels = 4;
  c.channels = 8;
  c.heads = 2;
  ParameterStore store;
  Rng rng(11);
  VisualEncoder enc(store, c, rng);
  Tensor image({32, 32, 3});
  for (std::size_t i = 0; i < image.size(); ++i) image.data()[i] = rng.uniform01();

  auto f = [&]() { return mean(enc.forward(image).features); };
  std::vector<Parameter> params(store.items().begin(), store.items().end());
  auto rep = grad_check(f, params, 3e-5);
  CHECK(!rep.non_finite);
  CHECK(rep.max_rel_error <= 1e-5);
}
