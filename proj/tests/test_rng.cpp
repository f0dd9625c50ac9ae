#include <doctest.h>

#include <corevi/rng.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

using corevi::Rng;

TEST_CASE("frozen stream values guard platform stability") {
  // These constants pin the generator's exact output; any refactor that
  // changes them silently breaks replay of every recorded experiment.
  Rng r(42);
  CHECK(r.next_u64() == 15021278609987233951ULL);
  CHECK(r.next_u64() == 5881210131331364753ULL);
  CHECK(r.next_u64() == 18149643915985481100ULL);

  Rng u(42);
  CHECK(u.uniform() == doctest::Approx(0.81430514512290986).epsilon(1e-16));
  CHECK(u.uniform() == doctest::Approx(0.31882104006166112).epsilon(1e-16));

  Rng n(42);
  CHECK(n.normal() == doctest::Approx(-0.26860736946209507).epsilon(1e-14));
  CHECK(n.normal() == doctest::Approx(0.581971051862883).epsilon(1e-14));

  CHECK(Rng::stream(42, "data").next_u64() == 11738833606889336350ULL);
  CHECK(Rng::stream(42, "noise").next_u64() == 8418724669970129114ULL);
}

TEST_CASE("identical seeds replay identically, different purposes diverge") {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  auto s1 = Rng::stream(7, "init");
  auto s2 = Rng::stream(7, "noise");
  int same = 0;
  for (int i = 0; i < 64; ++i) same += s1.next_u64() == s2.next_u64();
  CHECK(same == 0);
}

TEST_CASE("uniform and normal moments are sane") {
  Rng r(123);
  const int n = 20000;
  double usum = 0.0, nsum = 0.0, nsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    usum += u;
    const double z = r.normal();
    nsum += z;
    nsq += z * z;
  }
  CHECK(usum / n == doctest::Approx(0.5).epsilon(0.02));
  CHECK(nsum / n == doctest::Approx(0.0).scale(1.0).epsilon(0.03));
  CHECK(nsq / n == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("permutation and subset sampling are valid") {
  Rng r(9);
  auto p = r.permutation(50);
  auto sorted = p;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) CHECK(sorted[i] == i);

  auto sub = r.sample_without_replacement(20, 5);
  CHECK(sub.size() == 5);
  std::sort(sub.begin(), sub.end());
  CHECK(std::adjacent_find(sub.begin(), sub.end()) == sub.end());
  for (auto v : sub) CHECK(v < 20);
}

TEST_CASE("categorical draws follow the weights") {
  Rng r(11);
  const std::vector<double> w{0.0, 3.0, 1.0};
  int counts[3] = {0, 0, 0};
  for (int i = 0; i < 8000; ++i) counts[r.categorical(w)]++;
  CHECK(counts[0] == 0);
  CHECK(static_cast<double>(counts[1]) / 8000.0 == doctest::Approx(0.75).epsilon(0.05));

  const std::vector<double> onehot{0.0, 0.0, 5.0};
  for (int i = 0; i < 50; ++i) CHECK(r.categorical(onehot) == 2);
}
