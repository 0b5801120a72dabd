#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "epng/metrics.hpp"
#include "epng/rng.hpp"

using namespace epng;

TEST_CASE("iou examples and edge rules") {
  std::vector<std::uint8_t> a = {1, 1, 0, 0};
  std::vector<std::uint8_t> b = {1, 1, 0, 0};
  CHECK(iou(a, b) == 1.0);

  std::vector<std::uint8_t> c = {0, 0, 1, 1};
  CHECK(iou(a, c) == 0.0);

  // 2x2: pred = top row, gt = left column -> intersection 1, union 3.
  std::vector<std::uint8_t> top = {1, 1, 0, 0};
  std::vector<std::uint8_t> left = {1, 0, 1, 0};
  CHECK(iou(top, left) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  std::vector<std::uint8_t> empty = {0, 0, 0, 0};
  CHECK(iou(empty, empty) == 1.0);
  CHECK(iou(a, empty) == 0.0);
  CHECK(iou(empty, a) == 0.0);

  std::vector<std::uint8_t> shorter = {1, 0};
  CHECK_THROWS_AS(iou(a, shorter), std::invalid_argument);
  std::vector<std::uint8_t> bad = {2, 0, 0, 0};
  CHECK_THROWS_AS(iou(bad, a), std::invalid_argument);
}

TEST_CASE("average recall basics") {
  std::vector<EvalRecord> ones = {{1.0, true, false}, {1.0, false, false}};
  CHECK(average_recall(ones) == doctest::Approx(1.0).epsilon(1e-9));

  std::vector<EvalRecord> zeros = {{0.0, true, false}};
  CHECK(average_recall(zeros) == doctest::Approx(0.0).epsilon(1e-3));

  std::vector<EvalRecord> two = {{0.2, true, false}, {0.6, true, false}};
  CHECK(average_recall(two, 1001) == doctest::Approx(0.4).epsilon(1e-3));

  CHECK_THROWS_AS(average_recall({}), std::invalid_argument);
  CHECK_THROWS_AS(average_recall(two, 1), std::invalid_argument);
}

TEST_CASE("trapezoid AR equals mean IoU within 1e-3 over random multisets") {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + rng.below(40);
    std::vector<EvalRecord> records;
    double mean = 0.0;
    for (int i = 0; i < n; ++i) {
      EvalRecord r;
      r.iou = rng.uniform01();
      mean += r.iou / n;
      records.push_back(r);
    }
    REQUIRE(std::abs(average_recall(records, 1001) - mean) <= 1e-3);
  }
}

TEST_CASE("AR is monotone in any single record's IoU") {
  Rng rng(5);
  std::vector<EvalRecord> records;
  for (int i = 0; i < 10; ++i) records.push_back({rng.uniform01(), false, false});
  const double base = average_recall(records);
  for (int i = 0; i < 10; ++i) {
    auto bumped = records;
    bumped[static_cast<std::size_t>(i)].iou = std::min(1.0, bumped[static_cast<std::size_t>(i)].iou + 0.2);
    CHECK(average_recall(bumped) >= base - 1e-12);
  }
}

TEST_CASE("breakdown subsets and the absent rule") {
  std::vector<EvalRecord> things = {{0.5, true, false}, {0.7, true, true}};
  BreakdownReport all_things = breakdown(things);
  CHECK(all_things.thing.has_value());
  CHECK(!all_things.stuff.has_value());
  CHECK(all_things.single.has_value());
  CHECK(all_things.plural.has_value());

  // Mixed fixture of four records with known tags.
  std::vector<EvalRecord> mixed = {
      {0.9, true, false},   // thing, single
      {0.5, true, true},    // thing, plural
      {0.3, false, false},  // stuff, single
      {0.7, false, false},  // stuff, single
  };
  BreakdownReport r = breakdown(mixed);
  auto filter_ar = [&](auto keep) {
    std::vector<EvalRecord> subset;
    for (const auto& rec : mixed) {
      if (keep(rec)) subset.push_back(rec);
    }
    return average_recall(subset);
  };
  CHECK(*r.all == doctest::Approx(filter_ar([](const EvalRecord&) { return true; })).epsilon(1e-12));
  CHECK(*r.thing == doctest::Approx(filter_ar([](const EvalRecord& x) { return x.is_thing; })).epsilon(1e-12));
  CHECK(*r.stuff == doctest::Approx(filter_ar([](const EvalRecord& x) { return !x.is_thing; })).epsilon(1e-12));
  CHECK(*r.single == doctest::Approx(filter_ar([](const EvalRecord& x) { return !x.is_plural; })).epsilon(1e-12));
  CHECK(*r.plural == doctest::Approx(filter_ar([](const EvalRecord& x) { return x.is_plural; })).epsilon(1e-12));
}

TEST_CASE("subset counts partition the records") {
  Rng rng(7);
  std::vector<EvalRecord> records;
  for (int i = 0; i < 50; ++i) {
    records.push_back({rng.uniform01(), rng.below(2) == 1, rng.below(2) == 1});
  }
  std::size_t thing = 0, stuff = 0, single = 0, plural = 0;
  for (const auto& r : records) {
    (r.is_thing ? thing : stuff) += 1;
    (r.is_plural ? plural : single) += 1;
  }
  CHECK(thing + stuff == records.size());
  CHECK(single + plural == records.size());
}

TEST_CASE("res metrics examples") {
  std::vector<EvalRecord> one = {{0.45, true, false}};
  ResMetrics m = res_metrics(one);
  CHECK(m.miou == doctest::Approx(0.45));
  CHECK(m.p30 == 1.0);
  CHECK(m.p40 == 1.0);
  CHECK(m.p50 == 0.0);

  std::vector<EvalRecord> two = {{0.2, true, false}, {0.6, true, false}};
  ResMetrics m2 = res_metrics(two);
  CHECK(m2.miou == doctest::Approx(0.4));
  CHECK(m2.p50 == 0.5);

  CHECK_THROWS_AS(res_metrics({}), std::invalid_argument);
}

TEST_CASE("precision is non-increasing in the cutoff") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<EvalRecord> records;
    const int n = 1 + rng.below(20);
    for (int i = 0; i < n; ++i) records.push_back({rng.uniform01(), false, false});
    ResMetrics m = res_metrics(records);
    CHECK(m.p30 >= m.p40);
    CHECK(m.p40 >= m.p50);
  }
}
