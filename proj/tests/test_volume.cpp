#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "prtg/parallel.hpp"
#include "prtg/volume.hpp"

using namespace prtg;

namespace {

Ray unit_ray(double near = 0.0, double far = 1.0) {
  Ray r;
  r.origin = {0, 0, -3};
  r.direction = {0, 0, 1};
  r.near = near;
  r.far = far;
  return r;
}

FieldArch tiny_arch() {
  FieldArch a;
  a.pos_freqs = 2;
  a.dir_freqs = 1;
  a.width = 8;
  a.depth = 2;
  a.skip_layer = 1;
  a.head_width = 8;
  return a;
}

}  // namespace

TEST_CASE("closed-form weight profiles") {
  {
    const std::vector<double> s{0, 0, 0}, d{0.1, 0.2, 0.3};
    const auto w = compute_weights(s, d);
    for (double v : w.weights) CHECK(v == 0.0);
    CHECK(w.residual == 1.0);
  }
  {
    const std::vector<double> s{1}, d{std::log(2.0)};
    CHECK(compute_weights(s, d).weights[0] == doctest::Approx(0.5).epsilon(1e-15));
  }
  {
    const std::vector<double> s{1, 1}, d{std::log(2.0), std::log(2.0)};
    const auto w = compute_weights(s, d);
    CHECK(w.weights[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(w.weights[1] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(w.total() == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(w.transmittance[0] == 1.0);
  }
}

TEST_CASE("compute_weights rejects negative inputs") {
  const std::vector<double> ok{1.0}, neg{-1.0};
  CHECK_THROWS_AS(compute_weights(neg, ok), InvalidInput);
  CHECK_THROWS_AS(compute_weights(ok, neg), InvalidInput);
  const std::vector<double> two{1.0, 1.0};
  CHECK_THROWS_AS(compute_weights(ok, two), InvalidInput);
}

TEST_CASE("weights conserve mass and transmittance never increases") {
  Rng rng(17);
  for (int trial = 0; trial < 10000; ++trial) {
    const int n = 1 + static_cast<int>(uniform_index(rng, 128));
    std::vector<double> s(static_cast<std::size_t>(n)), d(static_cast<std::size_t>(n));
    double optical = 0.0;
    for (int i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = uniform01(rng) < 0.2 ? 0.0 : std::exp(8.0 * uniform01(rng) - 4.0);
      d[static_cast<std::size_t>(i)] = 1e-3 + 0.1 * uniform01(rng);
      optical += s[static_cast<std::size_t>(i)] * d[static_cast<std::size_t>(i)];
    }
    const auto w = compute_weights(s, d);
    REQUIRE(std::abs(w.total() + w.residual - 1.0) <= 1e-6);
    REQUIRE(w.total() == doctest::Approx(1.0 - std::exp(-optical)).epsilon(1e-9).scale(1e-12));
    REQUIRE(w.transmittance[0] == 1.0);
    for (int i = 1; i < n; ++i)
      REQUIRE(w.transmittance[static_cast<std::size_t>(i)] <= w.transmittance[static_cast<std::size_t>(i - 1)]);
    for (double v : w.weights) REQUIRE((v >= 0.0 && v <= 1.0));
  }
}

TEST_CASE("splitting a segment at constant density keeps the total weight") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s, d;
    for (int i = 0; i < 10; ++i) {
      s.push_back(3.0 * uniform01(rng));
      d.push_back(0.05 + 0.1 * uniform01(rng));
    }
    const std::size_t k = uniform_index(rng, 10);
    const double f = 0.1 + 0.8 * uniform01(rng);
    auto s2 = s;
    auto d2 = d;
    s2.insert(s2.begin() + static_cast<long>(k), s[k]);
    d2[k] = d[k] * f;
    d2.insert(d2.begin() + static_cast<long>(k) + 1, d[k] * (1.0 - f));
    CHECK(compute_weights(s2, d2).total() == doctest::Approx(compute_weights(s, d).total()).epsilon(1e-9));
  }
}

TEST_CASE("integration matches an independent dot product and is linear") {
  CHECK_THROWS_AS(integrate_transfer(compute_weights(std::vector<double>{1}, std::vector<double>{1}), {}),
                  InvalidInput);
  const std::vector<double> s{1, 1}, d{std::log(2.0), std::log(2.0)};
  const std::vector<Vec3> h{{1, 1, 1}, {2, 2, 2}};
  const Vec3 out = integrate_transfer(compute_weights(s, d), h);
  CHECK(out.x == doctest::Approx(1.0));
  CHECK(out.z == doctest::Approx(1.0));

  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(uniform_index(rng, 64));
    std::vector<double> sg(static_cast<std::size_t>(n)), dl(static_cast<std::size_t>(n));
    std::vector<Vec3> h1(static_cast<std::size_t>(n)), h2(static_cast<std::size_t>(n)), mix(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < sg.size(); ++i) {
      sg[i] = 5.0 * uniform01(rng);
      dl[i] = 0.05 * uniform01(rng) + 1e-4;
      h1[i] = {uniform01(rng), 3 * uniform01(rng), 10 * uniform01(rng)};
      h2[i] = {uniform01(rng), uniform01(rng), uniform01(rng)};
      mix[i] = 2.5 * h1[i] + (-0.75) * h2[i];
    }
    const auto w = compute_weights(sg, dl);
    const Vec3 a = integrate_transfer(w, h1);
    for (int c = 0; c < 3; ++c) {
      double ref = 0.0;
      for (std::size_t i = 0; i < sg.size(); ++i) ref += w.weights[i] * h1[i][c];
      REQUIRE(a[c] == doctest::Approx(ref).epsilon(1e-12));
      REQUIRE(a[c] >= 0.0);
    }
    const Vec3 b = integrate_transfer(w, h2);
    const Vec3 m = integrate_transfer(w, mix);
    for (int c = 0; c < 3; ++c) REQUIRE(m[c] == doctest::Approx(2.5 * a[c] - 0.75 * b[c]).epsilon(1e-9).scale(1e-12));
  }
}

TEST_CASE("stratified samples") {
  const Ray r = unit_ray();
  const std::vector<double> mid{0.5, 0.5};
  const auto s = sample_stratified(r, mid);
  CHECK(s.depths[0] == doctest::Approx(0.25));
  CHECK(s.depths[1] == doctest::Approx(0.75));
  CHECK(s.deltas[0] == doctest::Approx(0.5));
  CHECK(s.deltas[1] == doctest::Approx(0.25));
  CHECK(s.positions[1].z == doctest::Approx(-3 + 0.75));

  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const double near = 5.0 * uniform01(rng);
    const Ray ray = unit_ray(near, near + 0.1 + 3.0 * uniform01(rng));
    const auto set = sample_stratified(ray, 2 + static_cast<int>(uniform_index(rng, 64)), rng);
    for (std::size_t i = 0; i < set.size(); ++i) {
      REQUIRE(set.depths[i] >= ray.near);
      REQUIRE(set.depths[i] < ray.far);
      REQUIRE(set.deltas[i] > 0.0);
      if (i > 0) REQUIRE(set.depths[i] > set.depths[i - 1]);
    }
  }
  Rng a(5), b(5);
  CHECK(sample_stratified(r, 16, a).depths == sample_stratified(r, 16, b).depths);
}

TEST_CASE("ray and config validation") {
  Ray r = unit_ray(1.0, 0.5);
  CHECK_THROWS_AS(validate(r), InvalidInput);
  r = unit_ray();
  r.direction = {0, 0, 1.1};
  CHECK_THROWS_AS(validate(r), InvalidInput);
  RenderConfig cfg;
  cfg.n_coarse = 1;
  CHECK_THROWS_AS(validate(cfg), InvalidInput);
  CHECK_THROWS_AS(make_sample_set(unit_ray(), {0.5, 0.4}), InvalidInput);
  CHECK_THROWS_AS(make_sample_set(unit_ray(), {0.5, 1.0}), InvalidInput);
}

TEST_CASE("hierarchical draws follow the resampling density") {
  const Ray ray = unit_ray();
  const auto coarse = sample_stratified(ray, std::vector<double>(16, 0.5));

  SUBCASE("concentrated weights") {
    std::vector<double> sigma(16, 0.0);
    sigma[9] = 200.0;
    const auto w = compute_weights(sigma, coarse.deltas);
    Rng rng(7);
    const auto draws = draw_hierarchical(coarse, w, ray.far, 1000, rng);
    int inside = 0;
    for (double t : draws)
      if (t >= coarse.depths[9] && t < coarse.depths[9] + coarse.deltas[9]) ++inside;
    CHECK(inside >= 900);
  }

  SUBCASE("uniform weights give a flat histogram") {
    // Equal weights on equal bins; the first bin starts at depths[0], so bins are the
    // coarse segments with the last one capped at far.
    std::vector<double> weights(16);
    for (std::size_t i = 0; i < 16; ++i) weights[i] = coarse.deltas[i];
    WeightProfile w;
    w.weights = weights;
    const int n = 16000;
    Rng rng(11);
    const auto draws = draw_hierarchical(coarse, w, ray.far, n, rng);
    const double span = ray.far - coarse.depths.front();
    std::vector<int> hist(16, 0);
    for (double t : draws) {
      REQUIRE(t >= coarse.depths.front());
      REQUIRE(t <= ray.far);
      const auto it = std::upper_bound(coarse.depths.begin(), coarse.depths.end(), t);
      ++hist[static_cast<std::size_t>(std::distance(coarse.depths.begin(), it) - 1)];
    }
    for (std::size_t b = 0; b < 16; ++b) {
      const double p = coarse.deltas[b] / span;
      const double mean = n * p;
      const double sd = std::sqrt(n * p * (1 - p));
      CHECK(std::abs(hist[b] - mean) <= 3.0 * sd + 1.0);
    }
  }

  SUBCASE("merged depths are strictly increasing") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<double> sigma(16);
      for (double& s : sigma) s = 20.0 * uniform01(rng);
      const auto w = compute_weights(sigma, coarse.deltas);
      const auto fine = sample_hierarchical(ray, coarse, w, 32, rng);
      REQUIRE(fine.size() == 48);
      for (std::size_t i = 1; i < fine.size(); ++i) REQUIRE(fine.depths[i] > fine.depths[i - 1]);
    }
  }
}

TEST_CASE("a field without density renders black") {
  auto p = init_params<float>(4, tiny_arch());
  for (auto* level : {&p.coarse, &p.fine}) level->density.output.bias(0, 0) = -1e4f;
  RenderConfig cfg;
  cfg.n_coarse = 16;
  cfg.n_fine = 16;
  const auto out = render_pixel(p, unit_ray(1.0, 5.0), {0, 0, 1}, cfg);
  for (int c = 0; c < 3; ++c) {
    CHECK(out.coarse[c] == 0.0);
    CHECK(out.fine[c] == 0.0);
  }
}

TEST_CASE("rendering is deterministic and independent of chunking and threads") {
  const auto p = init_params<float>(6, tiny_arch());
  std::vector<Ray> rays;
  std::vector<Vec3> lights;
  for (int i = 0; i < 37; ++i) {
    Ray r = unit_ray(1.0, 5.0);
    r.direction = normalized({0.05 * std::sin(i), 0.05 * std::cos(i), 1.0});
    rays.push_back(r);
    lights.push_back(normalized({std::cos(0.3 * i), std::sin(0.3 * i), 0.5}));
  }
  RenderConfig cfg;
  cfg.n_coarse = 12;
  cfg.n_fine = 10;
  cfg.seed = 42;
  cfg.batch_rows = 1024;
  const auto ref = render_rays<float>(p, rays, lights, cfg);
  cfg.batch_rows = 5;
  set_thread_count(3);
  const auto other = render_rays<float>(p, rays, lights, cfg);
  set_thread_count(0);
  for (std::size_t i = 0; i < rays.size(); ++i)
    for (int c = 0; c < 3; ++c) {
      CHECK(ref[i].fine[c] == other[i].fine[c]);
      CHECK(ref[i].coarse[c] == other[i].coarse[c]);
    }

  // Ray i uses stream i, so rendering a suffix with the matching base reproduces it.
  const std::span<const Ray> tail(rays.data() + 10, rays.size() - 10);
  const std::span<const Vec3> tail_lights(lights.data() + 10, lights.size() - 10);
  const auto part = render_rays<float>(p, tail, tail_lights, cfg, 10);
  CHECK(part[0].fine.x == ref[10].fine.x);

  // The light sweep shares samples across lights and agrees with per-light renders.
  const std::vector<Vec3> sweep_lights{lights[0], lights[5]};
  std::vector<Vec3> swept(rays.size() * 2);
  render_light_sweep<float>(p, rays, sweep_lights, cfg,
                            [&](std::size_t l, std::size_t r, Vec3 v) { swept[l * rays.size() + r] = v; });
  const std::vector<Vec3> same(rays.size(), lights[5]);
  const auto single = render_rays<float>(p, rays, same, cfg);
  for (std::size_t i = 0; i < rays.size(); ++i)
    CHECK(swept[rays.size() + i].y == doctest::Approx(single[i].fine.y).epsilon(1e-5));
}
