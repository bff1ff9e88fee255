#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <vector>

#include "attrgen/common.hpp"
#include "attrgen/rng.hpp"

using namespace attrgen;

TEST_CASE("fnv1a64 matches reference vectors") {
  CHECK(fnv1a64(std::string("")) == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64(std::string("a")) == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64(std::string("foobar")) == 0x85944171f73967e8ULL);
}

TEST_CASE("hex64 formats fixed width") {
  CHECK(hex64(0) == "0000000000000000");
  CHECK(hex64(0xdeadbeefULL) == "00000000deadbeef");
  CHECK(hex64(0xcbf29ce484222325ULL) == "cbf29ce484222325");
}

TEST_CASE("file digest equals string digest of the same bytes") {
  const auto path = std::filesystem::temp_directory_path() / "attrgen_core_digest.txt";
  const std::string content = "alpha beta\ngamma\n";
  write_text_file(path, content);
  CHECK(digest_file(path) == digest_string(content));
  CHECK(read_text_file(path) == content);
  std::filesystem::remove(path);
}

TEST_CASE("digest_file on a missing path throws") {
  CHECK_THROWS_AS(digest_file("/definitely/not/here.bin"), IoError);
}

TEST_CASE("format_double round-trips") {
  for (double x : {0.0, 1.0, -1.5, 0.1, 3.141592653589793, 1e-12, 123456789.123456}) {
    CHECK(std::stod(format_double(x)) == x);
  }
}

TEST_CASE("splitmix64 matches the reference sequence") {
  std::uint64_t state = 0;
  CHECK(splitmix64(state) == 0xe220a8397b1dcdafULL);
  CHECK(splitmix64(state) == 0x6e789e6aa1b965f4ULL);
  CHECK(splitmix64(state) == 0x06c45d188009454fULL);
}

TEST_CASE("rng is deterministic per seed") {
  Rng a(42), b(42), c(43);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64(), y = b.next_u64(), z = c.next_u64();
    all_equal = all_equal && (x == y);
    any_diff = any_diff || (x != z);
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("fork derives from the construction seed, not consumption") {
  Rng fresh(7);
  Rng consumed(7);
  for (int i = 0; i < 17; ++i) consumed.next_u64();
  Rng f1 = fresh.fork(3);
  Rng f2 = consumed.fork(3);
  for (int i = 0; i < 20; ++i) CHECK(f1.next_u64() == f2.next_u64());

  Rng f3 = fresh.fork(4);
  CHECK(fresh.fork(3).next_u64() != f3.next_u64());
}

TEST_CASE("next_double lies in [0, 1)") {
  Rng rng(11);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.next_double();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("next_below stays in range and covers small supports") {
  Rng rng(5);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) seen.insert(rng.next_below(7));
  CHECK(seen.size() == 7);
  CHECK(*seen.rbegin() == 6);
  for (int i = 0; i < 100; ++i) CHECK(rng.next_below(1) == 0);
}

TEST_CASE("bernoulli edge probabilities are exact") {
  Rng rng(9);
  for (int i = 0; i < 1000; ++i) {
    CHECK_FALSE(rng.bernoulli(0.0));
    CHECK(rng.bernoulli(1.0));
  }
}

TEST_CASE("normal draws have roughly unit variance") {
  Rng rng(13);
  double sum = 0.0, sum_sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.next_normal();
    sum += x;
    sum_sq += x * x;
  }
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(var - 1.0) < 0.1);
}

TEST_CASE("shuffle is a deterministic permutation") {
  std::vector<int> v1{1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<int> v2 = v1;
  const std::vector<int> original = v1;
  Rng a(21), b(21);
  a.shuffle(v1);
  b.shuffle(v2);
  CHECK(v1 == v2);
  CHECK(std::multiset<int>(v1.begin(), v1.end()) ==
        std::multiset<int>(original.begin(), original.end()));
  CHECK(v1 != original);  // 8! permutations; identity would be astonishing
}

TEST_CASE("mix_seed separates streams") {
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
  CHECK(mix_seed(0, 0) != 0);
}
