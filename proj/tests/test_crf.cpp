#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include <gcrf/crf.hpp>

#include "test_support.hpp"

using namespace gcrf;
using gcrf::testing::forced_table;
using gcrf::testing::max_abs_diff;
using gcrf::testing::random_table;
using gcrf::testing::uniform_table;

TEST_CASE("forward: closed-form partitions") {
  CHECK(forward(uniform_table(1, 3)).log_Z == doctest::Approx(0.0));
  CHECK(forward(uniform_table(3, 2)).log_Z == doctest::Approx(std::log(9.0)).epsilon(1e-14));
}

TEST_CASE("forward: matches brute-force enumeration of 81 path scores") {
  const auto pot = random_table(3, 4, 17);
  std::vector<double> scores;
  for (std::size_t k = 0; k < 81; ++k) scores.push_back(path_score(pot, decode_path(k, 3, 4)));
  CHECK(std::abs(forward(pot).log_Z - logsumexp(scores)) < 1e-10);
}

TEST_CASE("forward: all-forbidden table reports -inf instead of throwing") {
  PotentialTable pot(2, 2);
  pot.log_emission(1, 0) = kNegInf;
  pot.log_emission(1, 1) = kNegInf;
  CHECK(forward(pot).log_Z == kNegInf);
}

TEST_CASE("backward: trivial and symmetric cases") {
  const auto bw1 = backward(uniform_table(1, 4));
  for (double v : bw1.log_beta.data()) CHECK(v == 0.0);

  const auto bw = backward(uniform_table(2, 3));
  CHECK(bw.log_beta(0, 0) == bw.log_beta(0, 1));
}

TEST_CASE("backward: agrees with forward on log Z") {
  const auto pot = random_table(3, 4, 5);
  const auto bw = backward(pot);
  std::vector<double> v(3);
  for (std::size_t i = 0; i < 3; ++i)
    v[i] = pot.log_initial[i] + pot.log_emission(0, i) + bw.log_beta(0, i);
  CHECK(std::abs(logsumexp(v) - forward(pot).log_Z) < 1e-10);
}

TEST_CASE("path_log_prob") {
  CHECK(path_log_prob(uniform_table(1, 5), HardPath(5, 0)) == doctest::Approx(0.0));
  for (std::size_t k = 0; k < 9; ++k)
    CHECK(path_log_prob(uniform_table(3, 2), decode_path(k, 3, 2)) ==
          doctest::Approx(-std::log(9.0)).epsilon(1e-14));

  const auto pot = random_table(3, 4, 99);
  const auto post = enumerate_posterior(pot);
  for (std::size_t k = 0; k < post.paths.size(); ++k)
    CHECK(std::abs(std::exp(path_log_prob(pot, post.paths[k])) - post.probs[k]) < 1e-12);

  CHECK_THROWS_AS(path_log_prob(pot, HardPath{0, 1}), std::invalid_argument);
  CHECK_THROWS_AS(path_log_prob(pot, HardPath{0, 1, 2, 3}), std::invalid_argument);
}

TEST_CASE("marginals") {
  const auto m1 = marginals(uniform_table(1, 3));
  for (double v : m1.data()) CHECK(v == doctest::Approx(1.0));

  const auto mu = marginals(uniform_table(4, 3));
  for (double v : mu.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-14));

  const auto pot = random_table(3, 4, 3);
  const auto m = marginals(pot);
  CHECK(max_abs_diff(m, posterior_marginals(enumerate_posterior(pot))) < 1e-10);
  for (std::size_t t = 0; t < 4; ++t) {
    double s = 0.0;
    for (double v : m.row(t)) s += v;
    CHECK(std::abs(s - 1.0) < 1e-10);
  }
}

TEST_CASE("entropy") {
  CHECK(entropy(forced_table({2, 0, 1, 1}, 3)) == doctest::Approx(0.0));
  CHECK(entropy(uniform_table(2, 3)) == doctest::Approx(std::log(8.0)).epsilon(1e-13));
  const auto pot = random_table(3, 4, 11);
  CHECK(std::abs(entropy(pot) - posterior_entropy(enumerate_posterior(pot))) < 1e-8);
}

TEST_CASE("viterbi") {
  CHECK(viterbi(uniform_table(1, 4)) == HardPath(4, 0));
  const HardPath forced{1, 2, 0, 0, 2};
  CHECK(viterbi(forced_table(forced, 3)) == forced);
  const auto pot = random_table(3, 4, 23);
  CHECK(viterbi(pot) == posterior_argmax(enumerate_posterior(pot)));
  // Ties go to the lowest index.
  CHECK(viterbi(uniform_table(3, 3)) == HardPath(3, 0));
}

TEST_CASE("enumerate_posterior") {
  const auto one = enumerate_posterior(uniform_table(1, 3));
  REQUIRE(one.probs.size() == 1);
  CHECK(one.probs[0] == doctest::Approx(1.0));

  const auto four = enumerate_posterior(uniform_table(2, 2));
  REQUIRE(four.probs.size() == 4);
  for (double p : four.probs) CHECK(p == doctest::Approx(0.25));

  const auto post = enumerate_posterior(random_table(4, 5, 8));
  double s = 0.0;
  for (double p : post.probs) s += p;
  CHECK(std::abs(s - 1.0) < 1e-10);
  CHECK(post.index_of(post.paths[77]) == 77);

  CHECK_THROWS_AS(enumerate_posterior(uniform_table(10, 7)), std::length_error);
  CHECK_THROWS_AS(enumerate_posterior(uniform_table(3, 4), 80), std::length_error);
}

TEST_CASE("property: forward/backward agreement for K <= 5, T <= 8") {
  std::uint64_t seed = 1000;
  for (std::size_t K = 1; K <= 5; ++K)
    for (std::size_t T = 1; T <= 8; ++T) {
      const auto pot = random_table(K, T, ++seed, 2.0);
      const auto bw = backward(pot);
      std::vector<double> v(K);
      for (std::size_t i = 0; i < K; ++i)
        v[i] = pot.log_initial[i] + pot.log_emission(0, i) + bw.log_beta(0, i);
      CHECK(std::abs(logsumexp(v) - forward(pot).log_Z) < 1e-10);
    }
}

TEST_CASE("property: enumeration equivalence for K <= 4, T <= 6") {
  std::uint64_t seed = 2000;
  for (std::size_t K = 1; K <= 4; ++K)
    for (std::size_t T = 1; T <= 6; ++T) {
      const auto pot = random_table(K, T, ++seed);
      const auto post = enumerate_posterior(pot);
      CAPTURE(K);
      CAPTURE(T);
      CHECK(max_abs_diff(marginals(pot), posterior_marginals(post)) < 1e-10);
      CHECK(std::abs(entropy(pot) - posterior_entropy(post)) < 1e-8);
      CHECK(viterbi(pot) == posterior_argmax(post));
      const auto& probe = post.paths[post.paths.size() / 2];
      CHECK(std::abs(std::exp(path_log_prob(pot, probe)) - post.probs[post.paths.size() / 2]) < 1e-10);
    }
}

TEST_CASE("property: shifting one step's log-factors") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto pot = random_table(3, 5, seed);
    auto shifted = pot;
    const std::size_t t = seed % 5;
    const double c = 0.37 * static_cast<double>(seed) - 3.0;
    shifted.shift_step(t, c);
    CHECK(std::abs(forward(shifted).log_Z - forward(pot).log_Z - c) < 1e-10);
    CHECK(max_abs_diff(marginals(shifted), marginals(pot)) < 1e-10);
    CHECK(std::abs(entropy(shifted) - entropy(pot)) < 1e-10);
    CHECK(viterbi(shifted) == viterbi(pot));
  }
}

TEST_CASE("property: DP kernels are pure") {
  const auto pot = random_table(4, 6, 31);
  CHECK(forward(pot).log_alpha == forward(pot).log_alpha);
  CHECK(backward(pot).log_beta == backward(pot).log_beta);
  CHECK(marginals(pot) == marginals(pot));
  CHECK(entropy(pot) == entropy(pot));
}

TEST_CASE("validation rejects malformed tables") {
  PotentialTable pot(2, 3);
  pot.log_emission(1, 1) = std::nan("");
  CHECK_THROWS_AS(pot.validate(), std::invalid_argument);
  pot.log_emission(1, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(pot.validate(), std::invalid_argument);
  pot.log_emission(1, 1) = kNegInf;
  CHECK_NOTHROW(pot.validate());
  CHECK_THROWS_AS(PotentialTable(0, 3).validate(), std::invalid_argument);
  CHECK_THROWS_AS(PotentialTable(2, 0).validate(), std::invalid_argument);
}

TEST_CASE("JSON round trip keeps every factor, including -inf sentinels") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto pot = random_table(1 + seed % 4, 1 + seed % 5, seed);
    pot.log_emission(0, 0) = kNegInf;
    const auto back = nlohmann::json::parse(nlohmann::json(pot).dump()).get<PotentialTable>();
    CHECK(back.log_transition == pot.log_transition);
    CHECK(back.log_emission == pot.log_emission);
    CHECK(back.log_initial == pot.log_initial);
  }
}

TEST_CASE("JSON input errors") {
  auto j = nlohmann::json(random_table(2, 2, 1));
  j.erase("log_initial");
  CHECK_THROWS_AS(j.get<PotentialTable>(), std::invalid_argument);

  auto bad_shape = nlohmann::json(random_table(2, 2, 1));
  bad_shape["log_emission"] = {{0.0, 1.0}};
  CHECK_THROWS_AS(bad_shape.get<PotentialTable>(), std::invalid_argument);

  const auto path = std::filesystem::temp_directory_path() / "gcrf_malformed.json";
  {
    std::FILE* f = std::fopen(path.c_str(), "w");
    std::fputs("{\"K\": 2, \"T\":", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(read_potential_table(path.string()), std::invalid_argument);
  std::filesystem::remove(path);
}
