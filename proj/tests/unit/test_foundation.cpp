#include "sdelab/key_values.hpp"
#include "sdelab/quadrature.hpp"
#include "sdelab/rng.hpp"
#include "sdelab/types.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <vector>

using namespace sdelab;

TEST_CASE("philox matches the Random123 known-answer vector for zero key and counter") {
  Rng r(0, 0);
  CHECK(r.next_u64() == 0xe169c58d6627e8d5ull);
  CHECK(r.next_u64() == 0x9b00dbd8bc57ac4cull);
}

TEST_CASE("rng streams are reproducible and distinct") {
  Rng a(7, 3), b(7, 3), c(7, 4), d(8, 3);
  const auto x = a.next_u64();
  CHECK(x == b.next_u64());
  CHECK(x != c.next_u64());
  CHECK(x != d.next_u64());
  CHECK(derive_stream(1, 2) != derive_stream(2, 1));
  CHECK(derive_stream(1, 2) == derive_stream(1, 2));
}

TEST_CASE("uniform and normal draws have the right moments") {
  Rng r(11, 0);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0, lo = 1, hi = 0;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    su += u;
    const double z = r.normal();
    sn += z;
    sn2 += z * z;
  }
  CHECK(lo > 0.0);
  CHECK(hi < 1.0);
  CHECK(std::abs(su / n - 0.5) < 4 * std::sqrt(1.0 / 12 / n));
  CHECK(std::abs(sn / n) < 4 / std::sqrt(n));
  CHECK(std::abs(sn2 / n - 1.0) < 4 * std::sqrt(2.0 / n));
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) seen.insert(r.below(10));
  CHECK(seen.size() == 10);
  CHECK(*seen.rbegin() == 9);
}

TEST_CASE("key-value parsing, typed access and errors") {
  const KeyValues kv = KeyValues::parse("a = 1.5  # comment\n\nb = 3\nlist = 1, 2,3\nrows = 1,2; 3,4\nname = vp\n");
  CHECK(kv.get_double("a") == 1.5);
  CHECK(kv.get_int("b") == 3);
  CHECK(kv.get_doubles("list") == std::vector<double>{1, 2, 3});
  CHECK(kv.get_rows("rows") == std::vector<std::vector<double>>{{1, 2}, {3, 4}});
  CHECK(kv.get("name") == "vp");
  CHECK(kv.get_double_or("missing", 2.0) == 2.0);
  CHECK_THROWS_WITH_AS(kv.get("missing"), "config: missing required key 'missing'", Error);
  CHECK_THROWS_AS(kv.get_double("name"), Error);
  CHECK_THROWS_AS(kv.get_int("a"), Error);
  CHECK_THROWS_AS(KeyValues::parse("no equals sign"), Error);
}

TEST_CASE("key-value format round-trips doubles exactly") {
  KeyValues kv;
  kv.set("x", 0.1);
  kv.set("y", std::numbers::pi);
  kv.set("z", std::vector<double>{1.0 / 3.0, -2e-300});
  const KeyValues back = KeyValues::parse(kv.format());
  CHECK(back.get_double("x") == 0.1);
  CHECK(back.get_double("y") == std::numbers::pi);
  CHECK(back.get_doubles("z") == std::vector<double>{1.0 / 3.0, -2e-300});
  KeyValues over;
  over.set("x", 2.0);
  kv.merge(over);
  CHECK(kv.get_double("x") == 2.0);
}

TEST_CASE("quadrature matches closed forms") {
  CHECK(integrate([](double t) { return 0.1 + 19.9 * t; }, 0.0, 1.0) == doctest::Approx(10.05).epsilon(1e-13));
  CHECK(integrate([](double t) { return std::exp(t); }, 0.0, 1.0) ==
        doctest::Approx(std::numbers::e - 1.0).epsilon(1e-13));
  CHECK(integrate([](double t) { return std::sin(t); }, 0.0, std::numbers::pi) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("content hash is FNV-1a") {
  CHECK(content_hash("") == "cbf29ce484222325");
  CHECK(content_hash("a") == "af63dc4c8601ec8c");
  CHECK(content_hash("abc") != content_hash("acb"));
}

TEST_CASE("estimate_mean gives the sample mean and its standard error") {
  const Estimate e = estimate_mean(std::vector<double>{1, 2, 3, 4});
  CHECK(e.value == 2.5);
  CHECK(e.std_error == doctest::Approx(std::sqrt(5.0 / 3.0 / 4.0)));
  CHECK(e.n == 4);
}
