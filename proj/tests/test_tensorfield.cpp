#include <catch2/catch_amalgamated.hpp>

#include "dynavox/opchecks.hpp"
#include "dynavox/tensorfield.hpp"

using namespace dynavox;
using namespace dynavox::field;
using diff::Slot;
using diff::Tape;

namespace {

// Trilinear sample of a dense [Nx,Ny,Nz] tensor over the box.
Real dense_sample(const Array& dense, const BoundingBox& box, const geom::Vec3& p) {
  const auto& N = dense.shape;
  Real fr[3];
  int i0[3];
  for (int a = 0; a < 3; ++a) {
    const Real g = (p[static_cast<size_t>(a)] - box.lo[static_cast<size_t>(a)]) /
                   (box.hi[static_cast<size_t>(a)] - box.lo[static_cast<size_t>(a)]) * (N[static_cast<size_t>(a)] - 1);
    int i = std::clamp(static_cast<int>(std::floor(g)), 0, N[static_cast<size_t>(a)] - 2);
    i0[a] = i;
    fr[a] = g - i;
  }
  auto at = [&](int x, int y, int z) {
    return dense.data[(static_cast<size_t>(x) * N[1] + y) * N[2] + z];
  };
  Real acc = 0;
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz) {
        const Real w = (dx ? fr[0] : 1 - fr[0]) * (dy ? fr[1] : 1 - fr[1]) * (dz ? fr[2] : 1 - fr[2]);
        acc += w * at(i0[0] + dx, i0[1] + dy, i0[2] + dz);
      }
  return acc;
}

Array sample_features(const FactorGroup& g, const std::array<int, 3>& res, const BoundingBox& box,
                      const Array& xyz) {
  Tape t;
  Slot x = t.constant(xyz);
  auto out = vm_sample_slots(t, g.rank, res, box,
                             {t.leaf(*g.planes[0]), t.leaf(*g.planes[1]), t.leaf(*g.planes[2])},
                             {t.leaf(*g.lines[0]), t.leaf(*g.lines[1]), t.leaf(*g.lines[2])}, x);
  return t.val(out.features);
}

geom::Vec3 node_pos(const std::array<int, 3>& res, const BoundingBox& box, int i, int j, int k) {
  const geom::Vec3 ext = box.extent();
  return {box.lo[0] + ext[0] * i / (res[0] - 1), box.lo[1] + ext[1] * j / (res[1] - 1),
          box.lo[2] + ext[2] * k / (res[2] - 1)};
}

}  // namespace

TEST_CASE("constant rank-1 factors give feature c^2 everywhere in the box") {
  const std::array<int, 3> res{5, 5, 5};
  const BoundingBox box;
  Rng rng(3);
  FactorGroup g = make_factor_group("t", 1, res, 0.0, rng);
  const Real c = 0.7;
  for (int a = 0; a < 3; ++a) {
    g.planes[static_cast<size_t>(a)]->values.fill(c);
    g.lines[static_cast<size_t>(a)]->values.fill(c);
  }
  Rng prng(5);
  for (int k = 0; k < 30; ++k) {
    Array xyz({1, 3});
    for (int i = 0; i < 3; ++i) xyz[i] = prng.uniform(-0.99, 0.99);
    const Array f = sample_features(g, res, box, xyz);
    REQUIRE(f.numel() == 3);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(f[i] - c * c) < 1e-14);
  }
}

TEST_CASE("grid-node samples equal the dense outer-product reconstruction") {
  const std::array<int, 3> res{4, 5, 6};
  const BoundingBox box{{-1.2, -0.5, 0.0}, {0.8, 1.5, 2.0}};
  Rng rng(11);
  FactorGroup g = make_factor_group("t", 2, res, 0.5, rng);
  std::array<Array, 3> dense{dense_axis_tensor(g, 0, res), dense_axis_tensor(g, 1, res),
                             dense_axis_tensor(g, 2, res)};
  for (int i = 0; i < res[0]; ++i)
    for (int j = 0; j < res[1]; ++j)
      for (int k = 0; k < res[2]; ++k) {
        const geom::Vec3 p = node_pos(res, box, i, j, k);
        Array xyz({1, 3}, {p[0], p[1], p[2]});
        const Array f = sample_features(g, res, box, xyz);
        for (int a = 0; a < 3; ++a) {
          Real sum_r = 0;
          for (int r = 0; r < g.rank; ++r) sum_r += f[a * g.rank + r];
          const Real want = dense[static_cast<size_t>(a)].data[(static_cast<size_t>(i) * res[1] + j) * res[2] + k];
          CHECK(std::abs(sum_r - want) < 1e-12);
        }
      }
}

TEST_CASE("midpoint along x averages the two neighboring dense values") {
  const std::array<int, 3> res{6, 5, 4};
  const BoundingBox box;
  Rng rng(13);
  FactorGroup g = make_factor_group("t", 2, res, 0.5, rng);
  std::array<Array, 3> dense{dense_axis_tensor(g, 0, res), dense_axis_tensor(g, 1, res),
                             dense_axis_tensor(g, 2, res)};
  const int j = 2, k = 1;
  for (int i = 0; i + 1 < res[0]; ++i) {
    const geom::Vec3 a = node_pos(res, box, i, j, k);
    const geom::Vec3 b = node_pos(res, box, i + 1, j, k);
    const geom::Vec3 mid{0.5 * (a[0] + b[0]), a[1], a[2]};
    Array xyz({1, 3}, {mid[0], mid[1], mid[2]});
    const Array f = sample_features(g, res, box, xyz);
    for (int ax = 0; ax < 3; ++ax) {
      Real sum_r = 0;
      for (int r = 0; r < g.rank; ++r) sum_r += f[ax * g.rank + r];
      auto dval = [&](int ii) {
        return dense[static_cast<size_t>(ax)].data[(static_cast<size_t>(ii) * res[1] + j) * res[2] + k];
      };
      CHECK(std::abs(sum_r - 0.5 * (dval(i) + dval(i + 1))) < 1e-12);
    }
  }
}

TEST_CASE("VM sampling equals dense trilinear sampling at 1000 random points") {
  const std::array<int, 3> res{9, 16, 12};
  const BoundingBox box{{-1, -2, 0}, {1, 2, 3}};
  Rng rng(17);
  FactorGroup g = make_factor_group("t", 4, res, 0.4, rng);
  std::array<Array, 3> dense{dense_axis_tensor(g, 0, res), dense_axis_tensor(g, 1, res),
                             dense_axis_tensor(g, 2, res)};
  Rng prng(19);
  for (int k = 0; k < 1000; ++k) {
    geom::Vec3 p;
    for (int c = 0; c < 3; ++c)
      p[static_cast<size_t>(c)] = prng.uniform(box.lo[static_cast<size_t>(c)], box.hi[static_cast<size_t>(c)]);
    Array xyz({1, 3}, {p[0], p[1], p[2]});
    const Array f = sample_features(g, res, box, xyz);
    for (int a = 0; a < 3; ++a) {
      Real sum_r = 0;
      for (int r = 0; r < g.rank; ++r) sum_r += f[a * g.rank + r];
      CHECK(std::abs(sum_r - dense_sample(dense[static_cast<size_t>(a)], box, p)) < 1e-10);
    }
  }
}

TEST_CASE("out-of-box samples return zero features and a cleared flag") {
  const std::array<int, 3> res{4, 4, 4};
  const BoundingBox box;
  Rng rng(23);
  FactorGroup g = make_factor_group("t", 2, res, 0.5, rng);
  Tape t;
  Array xyz({2, 3}, {0.2, 0.3, -0.4, 1.7, 0.0, 0.0});
  auto out = vm_sample_slots(t, 2, res, box,
                             {t.leaf(*g.planes[0]), t.leaf(*g.planes[1]), t.leaf(*g.planes[2])},
                             {t.leaf(*g.lines[0]), t.leaf(*g.lines[1]), t.leaf(*g.lines[2])},
                             t.constant(xyz));
  CHECK(t.val(out.inbox)[0] == 1.0);
  CHECK(t.val(out.inbox)[1] == 0.0);
  for (int c = 0; c < 6; ++c) CHECK(t.val(out.features).at(1, c) == 0.0);
}

TEST_CASE("VM parameter count grows like R*N^2, not N^3") {
  const int n = 64;
  Rng rng(29);
  TensorField f = make_field("t", {n, n, n}, {}, 4, 12, 0.1, rng);
  int64_t total = 0;
  for (auto* p : f.parameters()) total += p->numel();
  CHECK(total <= static_cast<int64_t>(3 * (4 + 12) * (n * n + n)));
  CHECK(total < static_cast<int64_t>(n) * n * n);
}

TEST_CASE("upsample: constant field stays constant") {
  const std::array<int, 3> res{5, 5, 5};
  Rng rng(31);
  TensorField f = make_field("t", res, {}, 1, 1, 0.0, rng);
  for (FactorGroup* g : {&f.density, &f.appearance})
    for (int a = 0; a < 3; ++a) {
      g->planes[static_cast<size_t>(a)]->values.fill(0.3);
      g->lines[static_cast<size_t>(a)]->values.fill(0.3);
    }
  upsample(f, {9, 9, 9});
  for (FactorGroup* g : {&f.density, &f.appearance})
    for (int a = 0; a < 3; ++a) {
      for (Real v : g->planes[static_cast<size_t>(a)]->values.data) CHECK(std::abs(v - 0.3) < 1e-15);
      for (Real v : g->lines[static_cast<size_t>(a)]->values.data) CHECK(std::abs(v - 0.3) < 1e-15);
    }
}

TEST_CASE("upsample preserves the represented function at old grid nodes") {
  const std::array<int, 3> res{5, 9, 7};
  const BoundingBox box{{-1, -1, -1}, {1, 1, 1}};
  Rng rng(37);
  TensorField f = make_field("t", res, box, 3, 2, 0.5, rng);

  std::vector<geom::Vec3> nodes;
  for (int i = 0; i < res[0]; ++i)
    for (int j = 0; j < res[1]; ++j)
      for (int k = 0; k < res[2]; ++k) nodes.push_back(node_pos(res, box, i, j, k));

  auto snapshot = [&](const FactorGroup& g) {
    std::vector<Array> vals;
    for (const auto& p : nodes) {
      Array xyz({1, 3}, {p[0], p[1], p[2]});
      vals.push_back(sample_features(g, f.resolution, box, xyz));
    }
    return vals;
  };
  const auto before_den = snapshot(f.density);

  upsample(f, {9, 17, 13});
  const auto after_den = snapshot(f.density);
  for (size_t i = 0; i < nodes.size(); ++i)
    for (int64_t c = 0; c < before_den[i].numel(); ++c) {
      const Real rel = std::abs(after_den[i][c] - before_den[i][c]) /
                       std::max(Real(1e-9), std::abs(before_den[i][c]));
      CHECK(rel < 1e-6);
    }
}

TEST_CASE("upsample rejects shrinking and non-nested resolutions") {
  Rng rng(41);
  TensorField f = make_field("t", {5, 5, 5}, {}, 1, 1, 0.1, rng);
  CHECK_THROWS_AS(upsample(f, {4, 5, 5}), ValidationError);
  CHECK_THROWS_AS(upsample(f, {5, 5, 6}), ValidationError);  // 5 intervals not a multiple of 4
}

TEST_CASE("deformation head is the identity at initialization") {
  Rng rng(43);
  DeformHead h = DeformHead::make("d", 16, 2, 3, 2, {1, 1, 1}, rng);
  Tape t;
  Array xyz({4, 3});
  Array time({4, 1});
  Rng prng(47);
  for (int64_t i = 0; i < xyz.numel(); ++i) xyz[i] = prng.uniform(-1, 1);
  for (int64_t i = 0; i < time.numel(); ++i) time[i] = prng.uniform(0, 1);
  Slot out = h.deform(t, t.constant(xyz), t.constant(time));
  for (int64_t i = 0; i < xyz.numel(); ++i) CHECK(t.val(out)[i] == xyz[i]);
}

TEST_CASE("deformation displacement is bounded by the configured limit") {
  Rng rng(53);
  DeformHead h = DeformHead::make("d", 16, 2, 3, 2, {0.25, 0.5, 0.125}, rng);
  for (auto& v : h.mlp.weights.back()->values.data) v = rng.uniform(-20, 20);
  Tape t;
  Array xyz({32, 3}), time({32, 1});
  for (int64_t i = 0; i < xyz.numel(); ++i) xyz[i] = rng.uniform(-1, 1);
  for (int64_t i = 0; i < time.numel(); ++i) time[i] = rng.uniform(0, 1);
  Slot disp = h.displacement(t, t.constant(xyz), t.constant(time));
  for (int b = 0; b < 32; ++b) {
    CHECK(std::abs(t.val(disp).at(b, 0)) <= 0.25);
    CHECK(std::abs(t.val(disp).at(b, 1)) <= 0.5);
    CHECK(std::abs(t.val(disp).at(b, 2)) <= 0.125);
  }
}

TEST_CASE("color head ignores the view direction when the view weights are zero") {
  Rng rng(59);
  ColorHead h = ColorHead::make("c", 8, 16, 2, rng);
  // The final layer consumes [hidden | view encoding]; zero the view block.
  Array& w = h.fuse.weights[0]->values;
  const int hidden = 16;
  for (int r = hidden; r < w.dim(0); ++r)
    for (int c = 0; c < w.dim(1); ++c) w.at(r, c) = 0.0;

  Array features({1, 8});
  for (int64_t i = 0; i < features.numel(); ++i) features[i] = rng.uniform(-1, 1);

  std::array<Real, 3> ref{};
  for (int k = 0; k < 100; ++k) {
    geom::Vec3 d = geom::normalized3({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    Array dirs({1, 3}, {d[0], d[1], d[2]});
    Tape t;
    Slot rgb = h.forward(t, t.constant(features), t.constant(dirs));
    if (k == 0) {
      for (int c = 0; c < 3; ++c) ref[static_cast<size_t>(c)] = t.val(rgb)[c];
    } else {
      for (int c = 0; c < 3; ++c) CHECK(t.val(rgb)[c] == ref[static_cast<size_t>(c)]);
    }
  }
}

TEST_CASE("color head output stays inside (0,1)") {
  Rng rng(61);
  ColorHead h = ColorHead::make("c", 6, 12, 2, rng);
  Tape t;
  Array features({16, 6}), dirs({16, 3});
  for (int64_t i = 0; i < features.numel(); ++i) features[i] = rng.uniform(-5, 5);
  for (int b = 0; b < 16; ++b) {
    geom::Vec3 d = geom::normalized3({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    for (int c = 0; c < 3; ++c) dirs.at(b, c) = d[static_cast<size_t>(c)];
  }
  Slot rgb = h.forward(t, t.constant(features), t.constant(dirs));
  for (int64_t i = 0; i < t.val(rgb).numel(); ++i) {
    CHECK(t.val(rgb)[i] > 0.0);
    CHECK(t.val(rgb)[i] < 1.0);
  }
}

TEST_CASE("time-dependent heads: ranges, and t-invariance with zeroed time weights") {
  Rng rng(67);
  const int den_dim = 6, app_dim = 6, width = 12, tl = 2;
  TimeHeads h = TimeHeads::make("th", den_dim, app_dim, width, tl, -3.0, -1.0, rng);

  Array den({8, den_dim}), app({8, app_dim});
  for (int64_t i = 0; i < den.numel(); ++i) den[i] = rng.uniform(-2, 2);
  for (int64_t i = 0; i < app.numel(); ++i) app[i] = rng.uniform(-2, 2);

  {
    Tape t;
    Array time({8, 1});
    for (int i = 0; i < 8; ++i) time.at(i, 0) = rng.uniform(0, 1);
    auto out = h.forward(t, t.constant(den), t.constant(app), t.constant(time));
    for (int i = 0; i < 8; ++i) {
      CHECK(t.val(out.sigma)[i] >= 0.0);
      CHECK(t.val(out.mask)[i] >= 0.0);
      CHECK(t.val(out.mask)[i] <= 1.0);
      for (int c = 0; c < 3; ++c) {
        CHECK(t.val(out.rgb).at(i, c) > 0.0);
        CHECK(t.val(out.rgb).at(i, c) < 1.0);
      }
    }
  }

  // Zero the first-layer rows that consume the time encoding.
  const int tdim = 1 + 2 * tl;
  for (Mlp* m : {&h.density_mlp, &h.color_mlp, &h.mask_mlp}) {
    Array& w = m->weights[0]->values;
    for (int r = w.dim(0) - tdim; r < w.dim(0); ++r)
      for (int c = 0; c < w.dim(1); ++c) w.at(r, c) = 0.0;
  }
  auto run_at = [&](Real time_val) {
    Tape t;
    Array time({8, 1}, time_val);
    auto out = h.forward(t, t.constant(den), t.constant(app), t.constant(time));
    return std::tuple{t.val(out.sigma), t.val(out.rgb), t.val(out.mask)};
  };
  const auto [s1, c1, m1] = run_at(0.2);
  const auto [s2, c2, m2] = run_at(0.9);
  for (int64_t i = 0; i < s1.numel(); ++i) CHECK(s1[i] == s2[i]);
  for (int64_t i = 0; i < c1.numel(); ++i) CHECK(c1[i] == c2[i]);
  for (int64_t i = 0; i < m1.numel(); ++i) CHECK(m1[i] == m2[i]);
}

TEST_CASE("scene-flow head: zero at init, bounded after perturbation") {
  Rng rng(71);
  SceneFlowHead h = SceneFlowHead::make("sf", 12, 2, 2, 2, 0.3, rng);
  Tape t;
  Array xyz({5, 3}), time({5, 1});
  for (int64_t i = 0; i < xyz.numel(); ++i) xyz[i] = rng.uniform(-1, 1);
  for (int64_t i = 0; i < time.numel(); ++i) time[i] = rng.uniform(0, 1);
  auto out = h.forward(t, t.constant(xyz), t.constant(time));
  for (int64_t i = 0; i < t.val(out.fwd).numel(); ++i) {
    CHECK(t.val(out.fwd)[i] == 0.0);
    CHECK(t.val(out.bwd)[i] == 0.0);
  }
  for (auto& v : h.mlp.weights.back()->values.data) v = rng.uniform(-30, 30);
  Tape t2;
  auto out2 = h.forward(t2, t2.constant(xyz), t2.constant(time));
  for (int64_t i = 0; i < t2.val(out2.fwd).numel(); ++i) {
    CHECK(std::abs(t2.val(out2.fwd)[i]) <= 0.3);
    CHECK(std::abs(t2.val(out2.bwd)[i]) <= 0.3);
  }
}

TEST_CASE("static density follows softplus(sum + shift)") {
  Tape t;
  Array features({1, 4}, {4.0, 3.0, 2.0, 1.0});  // sums to 10
  Slot sigma = static_density(t, t.constant(features), -10.0);
  CHECK(std::abs(t.val(sigma)[0] - std::log(2.0)) < 1e-12);

  // Monotone decay toward zero as the sum heads to -inf.
  Real prev = 1e9;
  for (Real s = 0; s > -40; s -= 5) {
    Tape tt;
    Array f({1, 1}, {s});
    const Real v = tt.val(static_density(tt, tt.constant(f), -10.0))[0];
    CHECK(v < prev);
    CHECK(v >= 0.0);
    prev = v;
  }
}

TEST_CASE("positional encoding: zeros and L=0 passthrough") {
  Tape t;
  Array x({1, 3});
  Slot enc = diff::ops::posenc(t, t.constant(x), 4, false);
  for (int k = 0; k < 4; ++k)
    for (int d = 0; d < 3; ++d) {
      CHECK(t.val(enc).at(0, k * 6 + d) == 0.0);        // sines
      CHECK(t.val(enc).at(0, k * 6 + 3 + d) == 1.0);    // cosines
    }
  Array y({2, 3}, {1, 2, 3, 4, 5, 6});
  Slot pass = diff::ops::posenc(t, t.constant(y), 0, true);
  CHECK(t.val(pass).same_shape(y));
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(t.val(pass)[i] == y[i]);
}

TEST_CASE("field sampling and heads pass finite-difference checks") {
  diff::register_all_ops();
  Rng rng(73);
  for (const char* op : {"field.vm_sample", "field.static_density", "field.color_head",
                         "field.deform", "field.time_heads", "field.scene_flow", "posenc"}) {
    const auto& spec = diff::OpRegistry::instance().get(op);
    for (int k = 0; k < 3; ++k) {
      auto inputs = spec.sample_inputs(rng);
      const auto res = diff::check_gradients(op, std::move(inputs), 1e-5);
      INFO(op);
      CHECK(res.max_rel_err < 1e-5);
    }
  }
}
