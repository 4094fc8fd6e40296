#include <catch2/catch_amalgamated.hpp>

#include "dynavox/opchecks.hpp"
#include "dynavox/rendering.hpp"
#include "dynavox/synthval.hpp"

using namespace dynavox;
using namespace dynavox::render;
using diff::Slot;
using diff::Tape;

namespace {

struct RandomRay {
  Array sigma, rgb, delta;  // [1,N], [N,3], [1,N]
  std::vector<Real> sig_v, del_v;
  std::vector<std::array<Real, 3>> col_v;
};

RandomRay random_ray(Rng& rng, int n, Real sigma_max = 6.0) {
  RandomRay r{Array({1, n}), Array({n, 3}), Array({1, n})};
  for (int i = 0; i < n; ++i) {
    const Real s = rng.uniform(0.0, sigma_max);
    const Real d = rng.uniform(0.01, 0.3);
    r.sigma.at(0, i) = s;
    r.delta.at(0, i) = d;
    r.sig_v.push_back(s);
    r.del_v.push_back(d);
    std::array<Real, 3> c{};
    for (int ch = 0; ch < 3; ++ch) {
      c[static_cast<size_t>(ch)] = rng.uniform(0, 1);
      r.rgb.at(i, ch) = c[static_cast<size_t>(ch)];
    }
    r.col_v.push_back(c);
  }
  return r;
}

}  // namespace

TEST_CASE("empty space renders black with zero weights and unit transmittance") {
  Tape t;
  const int n = 8;
  Array sigma({1, n}), rgb({n, 3}, 0.5), delta({1, n}, 0.1);
  auto out = volume_render(t, t.constant(sigma), t.constant(rgb), t.constant(delta));
  for (int c = 0; c < 3; ++c) CHECK(t.val(out.rgb).at(0, c) == 0.0);
  CHECK(t.val(out.opacity)[0] == 0.0);
  for (int i = 0; i < n; ++i) CHECK(t.val(out.weights).at(0, i) == 0.0);
}

TEST_CASE("an opaque first sample dominates the ray") {
  Tape t;
  const int n = 6;
  Array sigma({1, n}, 0.3), rgb({n, 3}), delta({1, n}, 0.1), dist({n, 1});
  sigma.at(0, 0) = 1e6;
  for (int i = 0; i < n; ++i) {
    rgb.at(i, 0) = 0.9;
    rgb.at(i, 1) = 0.2;
    rgb.at(i, 2) = 0.7;
    dist.at(i, 0) = 1.0 + 0.1 * i;
  }
  auto out = volume_render(t, t.constant(sigma), t.constant(rgb), t.constant(delta));
  CHECK(std::abs(t.val(out.rgb).at(0, 0) - 0.9) < 1e-6);
  CHECK(std::abs(t.val(out.rgb).at(0, 1) - 0.2) < 1e-6);
  Slot depth = weight_average_const(t, out.weights, dist);
  CHECK(std::abs(t.val(depth).at(0, 0) - 1.0) < 1e-6);
}

TEST_CASE("fast renderer matches the naive direct-summation oracle to 1e-12") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 4 + static_cast<int>(rng.uniform_int(28));
    RandomRay r = random_ray(rng, n);
    Tape t;
    auto out = volume_render(t, t.constant(r.sigma), t.constant(r.rgb), t.constant(r.delta));
    const synth::OracleRay oracle = synth::oracle_render(r.sig_v, r.col_v, r.del_v);
    for (int c = 0; c < 3; ++c)
      CHECK(std::abs(t.val(out.rgb).at(0, c) - oracle.rgb[static_cast<size_t>(c)]) < 1e-12);
    CHECK(std::abs(t.val(out.opacity)[0] - oracle.opacity) < 1e-12);
    for (int i = 0; i < n; ++i)
      CHECK(std::abs(t.val(out.weights).at(0, i) - oracle.weights[static_cast<size_t>(i)]) < 1e-12);
  }
}

TEST_CASE("weight normalization: sum w = 1 - exp(-sum sigma delta)") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 16;
    RandomRay r = random_ray(rng, n);
    Tape t;
    auto out = volume_render(t, t.constant(r.sigma), t.constant(r.rgb), t.constant(r.delta));
    Real sd = 0;
    for (int i = 0; i < n; ++i) sd += r.sig_v[static_cast<size_t>(i)] * r.del_v[static_cast<size_t>(i)];
    CHECK(std::abs(t.val(out.opacity)[0] - (1.0 - std::exp(-sd))) < 1e-12);
  }
}

TEST_CASE("raising any density never lowers the accumulated opacity") {
  Rng rng(11);
  const int n = 12;
  RandomRay r = random_ray(rng, n, 2.0);
  Tape t0;
  auto base = volume_render(t0, t0.constant(r.sigma), t0.constant(r.rgb), t0.constant(r.delta));
  const Real base_op = t0.val(base.opacity)[0];
  for (int i = 0; i < n; ++i) {
    Array bumped = r.sigma;
    bumped.at(0, i) += rng.uniform(0.1, 2.0);
    Tape t;
    auto out = volume_render(t, t.constant(bumped), t.constant(r.rgb), t.constant(r.delta));
    CHECK(t.val(out.opacity)[0] >= base_op - 1e-15);
  }
}

TEST_CASE("composite with m = 0 reduces bitwise to the static branch") {
  Rng rng(13);
  const int n = 10;
  RandomRay s = random_ray(rng, n);
  RandomRay d = random_ray(rng, n);
  Tape t;
  auto pure = volume_render(t, t.constant(s.sigma), t.constant(s.rgb), t.constant(s.delta));
  Array m({1, n});  // zeros
  auto comp = composite_render(t, t.constant(s.sigma), t.constant(s.rgb), t.constant(d.sigma),
                               t.constant(d.rgb), t.constant(m), t.constant(s.delta), t.constant(s.delta));
  for (int c = 0; c < 3; ++c) CHECK(t.val(comp.rgb).at(0, c) == t.val(pure.rgb).at(0, c));
  for (int i = 0; i < n; ++i) CHECK(t.val(comp.weights).at(0, i) == t.val(pure.weights).at(0, i));
  CHECK(t.val(comp.opacity)[0] == t.val(pure.opacity)[0]);
  CHECK(t.val(comp.mask)[0] == 0.0);
}

TEST_CASE("composite with m = 1 reduces bitwise to the dynamic branch") {
  Rng rng(17);
  const int n = 10;
  RandomRay s = random_ray(rng, n);
  RandomRay d = random_ray(rng, n);
  Tape t;
  auto pure = volume_render(t, t.constant(d.sigma), t.constant(d.rgb), t.constant(d.delta));
  Array m({1, n}, 1.0);
  auto comp = composite_render(t, t.constant(s.sigma), t.constant(s.rgb), t.constant(d.sigma),
                               t.constant(d.rgb), t.constant(m), t.constant(s.delta), t.constant(d.delta));
  for (int c = 0; c < 3; ++c) CHECK(t.val(comp.rgb).at(0, c) == t.val(pure.rgb).at(0, c));
  for (int i = 0; i < n; ++i) CHECK(t.val(comp.weights).at(0, i) == t.val(pure.weights).at(0, i));
  CHECK(t.val(comp.opacity)[0] == t.val(pure.opacity)[0]);
}

TEST_CASE("composite matches the brute-force oracle at random nonrigidity") {
  Rng rng(19);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 4 + static_cast<int>(rng.uniform_int(20));
    RandomRay s = random_ray(rng, n);
    RandomRay d = random_ray(rng, n);
    Array m({1, n});
    std::vector<Real> m_v(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      m_v[static_cast<size_t>(i)] = rng.uniform(0, 1);
      m.at(0, i) = m_v[static_cast<size_t>(i)];
    }
    Tape t;
    auto comp = composite_render(t, t.constant(s.sigma), t.constant(s.rgb), t.constant(d.sigma),
                                 t.constant(d.rgb), t.constant(m), t.constant(s.delta), t.constant(s.delta));
    const synth::OracleRay oracle = synth::oracle_composite(s.sig_v, s.col_v, d.sig_v, d.col_v, m_v, s.del_v);
    for (int c = 0; c < 3; ++c)
      CHECK(std::abs(t.val(comp.rgb).at(0, c) - oracle.rgb[static_cast<size_t>(c)]) < 1e-12);
    CHECK(std::abs(t.val(comp.mask)[0] - oracle.mask) < 1e-12);
    CHECK(std::abs(t.val(comp.opacity)[0] - oracle.opacity) < 1e-12);
    for (int i = 0; i < n; ++i)
      CHECK(std::abs(t.val(comp.weights).at(0, i) - oracle.weights[static_cast<size_t>(i)]) < 1e-12);
  }
}

TEST_CASE("render_depth: guards and simple cases") {
  Tape t;
  // single weight 1 at t=3
  Array w1({1, 1}, 1.0), d1({1, 1}, 3.0);
  CHECK(t.val(weight_average_const(t, t.constant(w1), d1)).at(0, 0) == 3.0);
  // symmetric weights at 1 and 3
  Array w2({1, 2}, 0.25), d2({2, 1});
  d2.at(0, 0) = 1.0;
  d2.at(1, 0) = 3.0;
  CHECK(std::abs(t.val(weight_average_const(t, t.constant(w2), d2)).at(0, 0) - 2.0) < 1e-15);
  // zero weights -> 0 via the epsilon guard
  Array w3({1, 2}), d3({2, 1}, 5.0);
  CHECK(t.val(weight_average_const(t, t.constant(w3), d3)).at(0, 0) == 0.0);
}

TEST_CASE("midpoint sampling is deterministic and inside [near, far]") {
  Rng rng(23);
  const SampleGrid a = sample_contracted(4, 16, false, rng, 0.5, 20.0);
  Rng rng2(99);
  const SampleGrid b = sample_contracted(4, 16, false, rng2, 0.5, 20.0);
  for (int64_t i = 0; i < a.dist.numel(); ++i) CHECK(a.dist[i] == b.dist[i]);
  for (int64_t i = 0; i < a.dist.numel(); ++i) {
    CHECK(a.dist[i] >= 0.5);
    CHECK(a.dist[i] <= 20.0);
  }
  for (int b2 = 0; b2 < 4; ++b2)
    for (int i = 0; i + 1 < 16; ++i) CHECK(a.dist.at(b2, i) < a.dist.at(b2, i + 1));
}

TEST_CASE("stratified sampling is reproducible under a fixed seed") {
  Rng r1(31), r2(31);
  const SampleGrid a = sample_contracted(3, 8, true, r1, 1.0, 10.0);
  const SampleGrid b = sample_contracted(3, 8, true, r2, 1.0, 10.0);
  for (int64_t i = 0; i < a.dist.numel(); ++i) CHECK(a.dist[i] == b.dist[i]);
  Rng r3(32);
  const SampleGrid c = sample_contracted(3, 8, true, r3, 1.0, 10.0);
  bool any_diff = false;
  for (int64_t i = 0; i < a.dist.numel(); ++i) any_diff |= (a.dist[i] != c.dist[i]);
  CHECK(any_diff);
}

TEST_CASE("distortion: zero weights and the single-sample closed form") {
  Tape t;
  Array w0({2, 8});
  Array s({2, 8}), ds({2, 8}, 0.125);
  CHECK(t.val(distortion(t, t.constant(w0), s, ds))[0] == 0.0);

  Array w1({1, 1}, 0.4), s1({1, 1}, 0.5), ds1({1, 1}, 0.2);
  const Real v = t.val(distortion(t, t.constant(w1), s1, ds1))[0];
  CHECK(std::abs(v - 0.4 * 0.4 * 0.2 / 3.0) < 1e-15);
}

TEST_CASE("distortion O(N) form matches the quadratic double-sum oracle") {
  Rng rng(37);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 32;
    Array w({1, n}), s({1, n}), ds({1, n});
    Real acc = 0;
    for (int i = 0; i < n; ++i) {
      w.at(0, i) = rng.uniform(0, 0.2);
      ds.at(0, i) = 1.0 / n;
      s.at(0, i) = acc + 0.5 / n;
      acc += 1.0 / n;
    }
    Tape t;
    const Real fast = t.val(distortion(t, t.constant(w), s, ds))[0];
    Real slow = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j)
        slow += w.at(0, i) * w.at(0, j) * std::abs(s.at(0, i) - s.at(0, j));
      slow += w.at(0, i) * w.at(0, i) * ds.at(0, i) / 3.0;
    }
    CHECK(std::abs(fast - slow) < 1e-12);
  }
}

TEST_CASE("rendering ops pass finite-difference checks") {
  diff::register_all_ops();
  Rng rng(41);
  for (const char* op : {"render.volume_render", "render.composite_render", "render.weight_average",
                         "render.distortion"}) {
    const auto& spec = diff::OpRegistry::instance().get(op);
    for (int k = 0; k < 3; ++k) {
      auto inputs = spec.sample_inputs(rng);
      const auto res = diff::check_gradients(op, std::move(inputs), 1e-5);
      INFO(op);
      CHECK(res.max_rel_err < 1e-5);
    }
  }
}
