#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "epng/errors.hpp"
#include "epng/params.hpp"

using namespace epng;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("epng_ckpt_" + name);
  fs::remove(p);
  return p;
}

std::vector<unsigned char> slurp_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string s = ss.str();
  return std::vector<unsigned char>(s.begin(), s.end());
}

}  // namespace

TEST_CASE("parameter store enforces unique names") {
  ParameterStore store;
  store.create("a.weight", {2, 2});
  CHECK_THROWS_AS(store.create("a.weight", {2}), std::invalid_argument);
  CHECK(store.total_elements() == 4);
}

TEST_CASE("checkpoint byte layout is exactly as specified") {
  ParameterStore store;
  // Created out of lexicographic order on purpose.
  Tensor& b = store.create("b", {2});
  b.data()[0] = 1.0;
  b.data()[1] = -2.0;
  Tensor& a = store.create("a", {1, 2});
  a.data()[0] = 0.5;
  a.data()[1] = 0.25;

  auto path = temp_file("layout.epng");
  save_checkpoint(store, path);
  auto bytes = slurp_bytes(path);

  // magic
  REQUIRE(bytes.size() == 8 + (4 + 1 + 4 + 8 + 16) + (4 + 1 + 4 + 4 + 16));
  CHECK(std::memcmp(bytes.data(), "EPNG0001", 8) == 0);
  std::size_t off = 8;
  // "a" first (lexicographic), name length 1 LE
  CHECK(bytes[off] == 1);
  CHECK(bytes[off + 1] == 0);
  CHECK(bytes[off + 2] == 0);
  CHECK(bytes[off + 3] == 0);
  off += 4;
  CHECK(bytes[off] == 'a');
  off += 1;
  // rank 2, extents 1 and 2
  CHECK(bytes[off] == 2);
  off += 4;
  CHECK(bytes[off] == 1);
  off += 4;
  CHECK(bytes[off] == 2);
  off += 4;
  // 0.5 little-endian f64 = 00 00 00 00 00 00 e0 3f
  const unsigned char half[8] = {0, 0, 0, 0, 0, 0, 0xe0, 0x3f};
  CHECK(std::memcmp(bytes.data() + off, half, 8) == 0);
}

TEST_CASE("checkpoint round-trips values exactly") {
  ParameterStore store;
  Rng rng(3);
  store.create_normal("layer.w", {3, 4}, rng, 1.0);
  store.create_normal("layer.b", {4}, rng, 1.0);
  auto path = temp_file("roundtrip.epng");
  save_checkpoint(store, path);

  auto loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].name == "layer.b");  // lexicographic order in the file
  CHECK(loaded[1].name == "layer.w");

  ParameterStore other;
  other.create("layer.w", {3, 4});
  other.create("layer.b", {4});
  load_checkpoint_into(other, path);
  for (const Parameter& p : store.items()) {
    const Tensor* got = other.find(p.name);
    REQUIRE(got);
    for (std::size_t i = 0; i < p.tensor.size(); ++i) CHECK(got->at(i) == p.tensor.at(i));
  }
}

TEST_CASE("architecture mismatch produces a named diff") {
  ParameterStore store;
  Rng rng(5);
  store.create_normal("keep", {2}, rng, 1.0);
  store.create_normal("gone", {3}, rng, 1.0);
  auto path = temp_file("diff.epng");
  save_checkpoint(store, path);

  ParameterStore other;
  other.create("keep", {2});
  other.create("added", {4});

  try {
    load_checkpoint_into(other, path);
    FAIL("expected mismatch_error");
  } catch (const mismatch_error& e) {
    std::string msg = e.what();
    CHECK(msg.find("added") != std::string::npos);
    CHECK(msg.find("gone") != std::string::npos);
  }

  ParameterStore shaped;
  shaped.create("keep", {2, 2});
  shaped.create("gone", {3});
  try {
    load_checkpoint_into(shaped, path);
    FAIL("expected mismatch_error");
  } catch (const mismatch_error& e) {
    CHECK(std::string(e.what()).find("keep") != std::string::npos);
  }
}

TEST_CASE("missing checkpoint file raises io_error") {
  ParameterStore store;
  store.create("x", {1});
  CHECK_THROWS_AS(load_checkpoint_into(store, temp_file("nope.epng")), io_error);
}
