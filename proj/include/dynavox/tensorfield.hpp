#pragma once

// Explicit voxel radiance fields with vector-matrix factorization, plus the
// small network heads (color, deformation, time-dependent, scene flow).
//
// A channel group stores, for each axis a, a plane factor over the two other
// axes and a line factor along a:
//   axis 0: line over x, plane over (y,z)
//   axis 1: line over y, plane over (x,z)
//   axis 2: line over z, plane over (x,y)
// Sampling yields 3*rank features; feature (a, r) is the product of the
// bilinear plane sample and the linear line sample of rank r on axis a. The
// dense tensor represented by axis a is sum_r plane_r (x) line_r.

#include <memory>

#include "dynavox/geometry.hpp"

namespace dynavox::field {

using diff::Parameter;
using diff::Slot;
using diff::Tape;
using geom::Vec3;

struct BoundingBox {
  Vec3 lo{-1, -1, -1};
  Vec3 hi{1, 1, 1};

  Vec3 extent() const { return geom::sub3(hi, lo); }
  bool contains(const Vec3& p) const {
    for (int c = 0; c < 3; ++c)
      if (p[static_cast<size_t>(c)] < lo[static_cast<size_t>(c)] || p[static_cast<size_t>(c)] > hi[static_cast<size_t>(c)]) return false;
    return true;
  }
};

namespace detail {
inline std::array<int, 2> plane_axes(int line_axis) {
  switch (line_axis) {
    case 0: return {1, 2};
    case 1: return {0, 2};
    default: return {0, 1};
  }
}
}  // namespace detail

struct FactorGroup {
  int rank = 0;
  std::array<std::unique_ptr<Parameter>, 3> planes;  // (R, Nu, Nv)
  std::array<std::unique_ptr<Parameter>, 3> lines;   // (R, Nw)

  int feature_dim() const { return 3 * rank; }

  int64_t param_count() const {
    int64_t n = 0;
    for (int a = 0; a < 3; ++a) n += planes[static_cast<size_t>(a)]->numel() + lines[static_cast<size_t>(a)]->numel();
    return n;
  }
};

inline FactorGroup make_factor_group(const std::string& tag, int rank,
                                     const std::array<int, 3>& res, Real init_scale, Rng& rng) {
  DVX_CHECK(rank >= 1);
  for (int r : res) DVX_CHECK_MSG(r >= 2, "grid needs at least 2 nodes per axis");
  FactorGroup g;
  g.rank = rank;
  for (int a = 0; a < 3; ++a) {
    const auto pa = detail::plane_axes(a);
    Array plane({rank, res[static_cast<size_t>(pa[0])], res[static_cast<size_t>(pa[1])]});
    Array line({rank, res[static_cast<size_t>(a)]});
    for (auto& v : plane.data) v = init_scale * rng.normal();
    // Lines start near one so the initial products are small but not
    // degenerate in scale.
    for (auto& v : line.data) v = 1.0 + init_scale * rng.normal();
    g.planes[static_cast<size_t>(a)] =
        std::make_unique<Parameter>(tag + ".plane" + std::to_string(a), std::move(plane));
    g.lines[static_cast<size_t>(a)] =
        std::make_unique<Parameter>(tag + ".line" + std::to_string(a), std::move(line));
  }
  return g;
}

struct TensorField {
  std::array<int, 3> resolution{};
  BoundingBox box;
  FactorGroup density;     // summed (static) or fed to the density head (dynamic)
  FactorGroup appearance;  // fed to the color head

  std::vector<Parameter*> parameters() const {
    std::vector<Parameter*> out;
    for (const FactorGroup* g : {&density, &appearance})
      for (int a = 0; a < 3; ++a) {
        out.push_back(g->planes[static_cast<size_t>(a)].get());
        out.push_back(g->lines[static_cast<size_t>(a)].get());
      }
    return out;
  }
};

inline TensorField make_field(const std::string& tag, const std::array<int, 3>& res,
                              const BoundingBox& box, int density_rank, int appearance_rank,
                              Real init_scale, Rng& rng) {
  TensorField f;
  f.resolution = res;
  f.box = box;
  f.density = make_factor_group(tag + ".den", density_rank, res, init_scale, rng);
  f.appearance = make_factor_group(tag + ".app", appearance_rank, res, init_scale, rng);
  return f;
}

// --- sampling ---------------------------------------------------------------

// Trilinear VM sampling. Ports: 0 = features [B, 3R] (differentiable w.r.t.
// factors and positions), 1 = inbox flag [B] (non-differentiable).
// Out-of-box samples yield zero features and flag 0.
struct SampleOut {
  Slot features, inbox;
};

inline SampleOut vm_sample_slots(Tape& t, int rank, const std::array<int, 3>& res,
                                 const BoundingBox& box, const std::array<Slot, 3>& plane_slots,
                                 const std::array<Slot, 3>& line_slots, Slot xyz) {
  const Array& X = t.val(xyz);
  DVX_CHECK(X.ndim() == 2 && X.dim(1) == 3);
  const int B = X.dim(0);
  const int R = rank;

  // Grid coordinates: node i at lo + i * extent/(N-1).
  const Vec3 lo = box.lo, ext = box.extent();
  const std::array<int, 3> N = res;

  auto grid_coord = [&](Real p, int axis) {
    return (p - lo[static_cast<size_t>(axis)]) / ext[static_cast<size_t>(axis)] * (N[static_cast<size_t>(axis)] - 1);
  };

  Array features({B, 3 * R});
  Array inbox({B});
  for (int b = 0; b < B; ++b) {
    const Vec3 p{X.at(b, 0), X.at(b, 1), X.at(b, 2)};
    if (!box.contains(p)) continue;
    inbox[b] = 1;
    Real gc[3], fr[3];
    int i0[3];
    for (int axis = 0; axis < 3; ++axis) {
      gc[axis] = grid_coord(p[static_cast<size_t>(axis)], axis);
      int i = static_cast<int>(std::floor(gc[axis]));
      i = std::clamp(i, 0, N[static_cast<size_t>(axis)] - 2);
      i0[axis] = i;
      fr[axis] = gc[axis] - i;
    }
    for (int a = 0; a < 3; ++a) {
      const auto pa = detail::plane_axes(a);
      const int u = pa[0], v = pa[1];
      const Array& plane = t.val(plane_slots[static_cast<size_t>(a)]);
      const Array& line = t.val(line_slots[static_cast<size_t>(a)]);
      const int Nu = N[static_cast<size_t>(u)], Nv = N[static_cast<size_t>(v)], Nw = N[static_cast<size_t>(a)];
      (void)Nu;
      const Real fu = fr[u], fv = fr[v], fw = fr[a];
      const int iu = i0[u], iv = i0[v], iw = i0[a];
      for (int r = 0; r < R; ++r) {
        const Real* pl = &plane.data[static_cast<size_t>(r) * Nu * Nv];
        const Real p00 = pl[static_cast<size_t>(iu) * Nv + iv];
        const Real p01 = pl[static_cast<size_t>(iu) * Nv + iv + 1];
        const Real p10 = pl[static_cast<size_t>(iu + 1) * Nv + iv];
        const Real p11 = pl[static_cast<size_t>(iu + 1) * Nv + iv + 1];
        const Real pv = (1 - fu) * ((1 - fv) * p00 + fv * p01) + fu * ((1 - fv) * p10 + fv * p11);
        const Real* ln = &line.data[static_cast<size_t>(r) * Nw];
        const Real lv = (1 - fw) * ln[iw] + fw * ln[iw + 1];
        features.at(b, a * R + r) = pv * lv;
      }
    }
  }

  Tape::Node nd;
  nd.name = "vm_sample";
  nd.inputs = {xyz, plane_slots[0], plane_slots[1], plane_slots[2], line_slots[0], line_slots[1], line_slots[2]};
  nd.out.push_back(std::move(features));
  nd.out.push_back(std::move(inbox));
  const BoundingBox bx = box;
  nd.backward = [bx, N, R, B](Tape& t, int self) {
    auto& node = t.node(self);
    const Array* gf = t.grad_of(self, 0);
    if (!gf) return;
    const Array& X = t.val(node.inputs[0]);
    const Array& inbox = node.out[1];
    Array& gX = t.grad_acc(node.inputs[0]);
    const Vec3 lo = bx.lo, ext = bx.extent();
    for (int b = 0; b < B; ++b) {
      if (inbox[b] == 0) continue;
      const Vec3 p{X.at(b, 0), X.at(b, 1), X.at(b, 2)};
      Real gc[3], fr[3], scale[3];
      int i0[3];
      for (int axis = 0; axis < 3; ++axis) {
        scale[axis] = (N[static_cast<size_t>(axis)] - 1) / ext[static_cast<size_t>(axis)];
        gc[axis] = (p[static_cast<size_t>(axis)] - lo[static_cast<size_t>(axis)]) * scale[axis];
        int i = static_cast<int>(std::floor(gc[axis]));
        i = std::clamp(i, 0, N[static_cast<size_t>(axis)] - 2);
        i0[axis] = i;
        fr[axis] = gc[axis] - i;
      }
      for (int a = 0; a < 3; ++a) {
        const auto pa = detail::plane_axes(a);
        const int u = pa[0], v = pa[1];
        const Array& plane = t.val(node.inputs[static_cast<size_t>(1 + a)]);
        const Array& line = t.val(node.inputs[static_cast<size_t>(4 + a)]);
        Array& gplane = t.grad_acc(node.inputs[static_cast<size_t>(1 + a)]);
        Array& gline = t.grad_acc(node.inputs[static_cast<size_t>(4 + a)]);
        const int Nv = N[static_cast<size_t>(v)], Nu = N[static_cast<size_t>(u)], Nw = N[static_cast<size_t>(a)];
        (void)Nu;
        const Real fu = fr[u], fv = fr[v], fw = fr[a];
        const int iu = i0[u], iv = i0[v], iw = i0[a];
        for (int r = 0; r < R; ++r) {
          const Real gout = gf->at(b, a * R + r);
          if (gout == 0) continue;
          const Real* pl = &plane.data[static_cast<size_t>(r) * Nu * Nv];
          const Real p00 = pl[static_cast<size_t>(iu) * Nv + iv];
          const Real p01 = pl[static_cast<size_t>(iu) * Nv + iv + 1];
          const Real p10 = pl[static_cast<size_t>(iu + 1) * Nv + iv];
          const Real p11 = pl[static_cast<size_t>(iu + 1) * Nv + iv + 1];
          const Real pval = (1 - fu) * ((1 - fv) * p00 + fv * p01) + fu * ((1 - fv) * p10 + fv * p11);
          const Real* ln = &line.data[static_cast<size_t>(r) * Nw];
          const Real lval = (1 - fw) * ln[iw] + fw * ln[iw + 1];

          // Factor grads.
          Real* gpl = &gplane.data[static_cast<size_t>(r) * Nu * Nv];
          const Real gp = gout * lval;
          gpl[static_cast<size_t>(iu) * Nv + iv] += gp * (1 - fu) * (1 - fv);
          gpl[static_cast<size_t>(iu) * Nv + iv + 1] += gp * (1 - fu) * fv;
          gpl[static_cast<size_t>(iu + 1) * Nv + iv] += gp * fu * (1 - fv);
          gpl[static_cast<size_t>(iu + 1) * Nv + iv + 1] += gp * fu * fv;
          Real* gln = &gline.data[static_cast<size_t>(r) * Nw];
          gln[iw] += gout * pval * (1 - fw);
          gln[iw + 1] += gout * pval * fw;

          // Position grads via the interpolation weights.
          const Real dp_dfu = -((1 - fv) * p00 + fv * p01) + ((1 - fv) * p10 + fv * p11);
          const Real dp_dfv = (1 - fu) * (p01 - p00) + fu * (p11 - p10);
          const Real dl_dfw = ln[iw + 1] - ln[iw];
          gX.at(b, u) += gout * lval * dp_dfu * scale[u];
          gX.at(b, v) += gout * lval * dp_dfv * scale[v];
          gX.at(b, a) += gout * pval * dl_dfw * scale[a];
        }
      }
    }
  };
  const int id = t.add_node(std::move(nd));
  return {{id, 0}, {id, 1}};
}

inline SampleOut vm_sample(Tape& t, const FactorGroup& g, const std::array<int, 3>& res,
                           const BoundingBox& box, Slot xyz) {
  std::array<Slot, 3> plane_slots, line_slots;
  for (int a = 0; a < 3; ++a) {
    plane_slots[static_cast<size_t>(a)] = t.leaf(*g.planes[static_cast<size_t>(a)]);
    line_slots[static_cast<size_t>(a)] = t.leaf(*g.lines[static_cast<size_t>(a)]);
  }
  return vm_sample_slots(t, g.rank, res, box, plane_slots, line_slots, xyz);
}

// Dense-tensor reconstruction of one axis of a factor group (test oracle
// support): D[x,y,z] = sum_r plane_r(u,v) * line_r(w).
inline Array dense_axis_tensor(const FactorGroup& g, int axis, const std::array<int, 3>& res) {
  Array out({res[0], res[1], res[2]});
  const auto pa = detail::plane_axes(axis);
  const Array& plane = g.planes[static_cast<size_t>(axis)]->values;
  const Array& line = g.lines[static_cast<size_t>(axis)]->values;
  const int Nv = res[static_cast<size_t>(pa[1])], Nu = res[static_cast<size_t>(pa[0])], Nw = res[static_cast<size_t>(axis)];
  (void)Nu;
  for (int x = 0; x < res[0]; ++x)
    for (int y = 0; y < res[1]; ++y)
      for (int z = 0; z < res[2]; ++z) {
        const int idx[3] = {x, y, z};
        Real s = 0;
        for (int r = 0; r < g.rank; ++r) {
          const Real pv = plane.data[(static_cast<size_t>(r) * Nu + idx[pa[0]]) * Nv + idx[pa[1]]];
          const Real lv = line.data[static_cast<size_t>(r) * Nw + idx[axis]];
          s += pv * lv;
        }
        out.data[(static_cast<size_t>(x) * res[1] + y) * res[2] + z] = s;
      }
  return out;
}

// --- coarse-to-fine upsampling ----------------------------------------------

namespace detail {

// Linear resample of a (R, N) line onto (R, M); old nodes must be a subset of
// the new ones ((M-1) divisible by (N-1)) so the represented function is
// preserved at old nodes.
inline Array resample_line(const Array& line, int M) {
  const int R = line.dim(0), N = line.dim(1);
  Array out({R, M});
  for (int r = 0; r < R; ++r)
    for (int j = 0; j < M; ++j) {
      const Real g = static_cast<Real>(j) * (N - 1) / (M - 1);
      int i = std::clamp(static_cast<int>(std::floor(g)), 0, N - 2);
      const Real f = g - i;
      out.at(r, j) = (1 - f) * line.data[static_cast<size_t>(r) * N + i] + f * line.data[static_cast<size_t>(r) * N + i + 1];
    }
  return out;
}

inline Array resample_plane(const Array& plane, int Mu, int Mv) {
  const int R = plane.dim(0), Nu = plane.dim(1), Nv = plane.dim(2);
  Array out({R, Mu, Mv});
  for (int r = 0; r < R; ++r) {
    const Real* src = &plane.data[static_cast<size_t>(r) * Nu * Nv];
    Real* dst = &out.data[static_cast<size_t>(r) * Mu * Mv];
    for (int ju = 0; ju < Mu; ++ju) {
      const Real gu = static_cast<Real>(ju) * (Nu - 1) / (Mu - 1);
      int iu = std::clamp(static_cast<int>(std::floor(gu)), 0, Nu - 2);
      const Real fu = gu - iu;
      for (int jv = 0; jv < Mv; ++jv) {
        const Real gv = static_cast<Real>(jv) * (Nv - 1) / (Mv - 1);
        int iv = std::clamp(static_cast<int>(std::floor(gv)), 0, Nv - 2);
        const Real fv = gv - iv;
        dst[static_cast<size_t>(ju) * Mv + jv] =
            (1 - fu) * ((1 - fv) * src[static_cast<size_t>(iu) * Nv + iv] + fv * src[static_cast<size_t>(iu) * Nv + iv + 1]) +
            fu * ((1 - fv) * src[static_cast<size_t>(iu + 1) * Nv + iv] + fv * src[static_cast<size_t>(iu + 1) * Nv + iv + 1]);
      }
    }
  }
  return out;
}

}  // namespace detail

// In-place resolution increase. Rejects shrinking, and rejects target
// resolutions whose node set does not contain the current one, since the
// contract is that the represented function is unchanged at old grid nodes.
inline void upsample(TensorField& f, const std::array<int, 3>& new_res) {
  for (int a = 0; a < 3; ++a) {
    const int oldn = f.resolution[static_cast<size_t>(a)], newn = new_res[static_cast<size_t>(a)];
    if (newn < oldn)
      throw ValidationError("upsample: axis " + std::to_string(a) + " shrinks " + std::to_string(oldn) +
                            " -> " + std::to_string(newn));
    if ((newn - 1) % (oldn - 1) != 0)
      throw ValidationError("upsample: axis " + std::to_string(a) + ": " + std::to_string(newn - 1) +
                            " intervals not a multiple of " + std::to_string(oldn - 1) +
                            "; old grid nodes would move");
  }
  for (FactorGroup* g : {&f.density, &f.appearance}) {
    for (int a = 0; a < 3; ++a) {
      const auto pa = detail::plane_axes(a);
      Parameter& plane = *g->planes[static_cast<size_t>(a)];
      Parameter& line = *g->lines[static_cast<size_t>(a)];
      plane.values = detail::resample_plane(plane.values, new_res[static_cast<size_t>(pa[0])], new_res[static_cast<size_t>(pa[1])]);
      plane.grad = Array(plane.values.shape);
      line.values = detail::resample_line(line.values, new_res[static_cast<size_t>(a)]);
      line.grad = Array(line.values.shape);
    }
  }
  f.resolution = new_res;
}

// --- network heads -----------------------------------------------------------

struct Mlp {
  std::vector<std::unique_ptr<Parameter>> weights;  // [in, out] each
  std::vector<std::unique_ptr<Parameter>> biases;   // [out]

  static Mlp make(const std::string& tag, const std::vector<int>& dims, Rng& rng,
                  bool zero_last = false) {
    DVX_CHECK(dims.size() >= 2);
    Mlp m;
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
      const int in = dims[l], out = dims[l + 1];
      Array w({in, out});
      const bool last = (l + 2 == dims.size());
      if (!(last && zero_last)) {
        const Real limit = std::sqrt(6.0 / in);
        for (auto& v : w.data) v = rng.uniform(-limit, limit);
      }
      m.weights.push_back(std::make_unique<Parameter>(tag + ".w" + std::to_string(l), std::move(w)));
      m.biases.push_back(std::make_unique<Parameter>(tag + ".b" + std::to_string(l), Array({out})));
    }
    return m;
  }

  // ReLU hidden layers, linear output.
  Slot forward(Tape& t, Slot x) const {
    Slot h = x;
    for (size_t l = 0; l < weights.size(); ++l) {
      h = diff::ops::matmul(t, h, t.leaf(*weights[l]));
      h = diff::ops::add_row(t, h, t.leaf(*biases[l]));
      if (l + 1 < weights.size()) h = diff::ops::relu(t, h);
    }
    return h;
  }

  std::vector<Parameter*> parameters() const {
    std::vector<Parameter*> out;
    for (size_t l = 0; l < weights.size(); ++l) {
      out.push_back(weights[l].get());
      out.push_back(biases[l].get());
    }
    return out;
  }
};

// Static color head: a feedforward stack on appearance features where the
// encoded viewing direction enters only the final layer's input.
struct ColorHead {
  Mlp trunk;   // features -> hidden
  Mlp fuse;    // concat(hidden, enc(dir)) -> 3
  int view_enc_levels = 2;

  static ColorHead make(const std::string& tag, int feature_dim, int width, int view_enc_levels,
                        Rng& rng) {
    ColorHead h;
    h.view_enc_levels = view_enc_levels;
    h.trunk = Mlp::make(tag + ".trunk", {feature_dim, width, width}, rng);
    const int enc_dim = 3 * (1 + 2 * view_enc_levels);
    h.fuse = Mlp::make(tag + ".fuse", {width + enc_dim, 3}, rng);
    return h;
  }

  Slot forward(Tape& t, Slot features, Slot view_dirs) const {
    Slot h = trunk.forward(t, features);
    h = diff::ops::relu(t, h);
    Slot enc = diff::ops::posenc(t, view_dirs, view_enc_levels, true);
    Slot fused = diff::ops::concat_cols(t, {h, enc});
    return diff::ops::sigmoid(t, fuse.forward(t, fused));
  }

  std::vector<Parameter*> parameters() const {
    auto out = trunk.parameters();
    for (auto* p : fuse.parameters()) out.push_back(p);
    return out;
  }
};

// Time-varying coordinate deformation; identically zero at initialization
// (zero-initialized final layer) and bounded by max_disp * tanh.
struct DeformHead {
  Mlp mlp;
  int pos_levels = 5, time_levels = 4;
  Vec3 max_disp{0.25, 0.25, 0.25};

  static DeformHead make(const std::string& tag, int width, int depth, int pos_levels,
                         int time_levels, const Vec3& max_disp, Rng& rng) {
    DeformHead h;
    h.pos_levels = pos_levels;
    h.time_levels = time_levels;
    h.max_disp = max_disp;
    const int in = 3 * (1 + 2 * pos_levels) + 1 * (1 + 2 * time_levels);
    std::vector<int> dims{in};
    for (int l = 0; l < depth; ++l) dims.push_back(width);
    dims.push_back(3);
    h.mlp = Mlp::make(tag, dims, rng, /*zero_last=*/true);
    return h;
  }

  // xyz [M,3] in sample space, time [M,1] constant; returns displacement [M,3].
  Slot displacement(Tape& t, Slot xyz, Slot time) const {
    Slot px = diff::ops::posenc(t, xyz, pos_levels, true);
    Slot pt = diff::ops::posenc(t, time, time_levels, true);
    Slot in = diff::ops::concat_cols(t, {px, pt});
    Slot raw = diff::ops::tanh_op(t, mlp.forward(t, in));
    return diff::ops::scale_cols(t, raw, {max_disp[0], max_disp[1], max_disp[2]});
  }

  Slot deform(Tape& t, Slot xyz, Slot time) const {
    return diff::ops::add(t, xyz, displacement(t, xyz, time));
  }

  std::vector<Parameter*> parameters() const { return mlp.parameters(); }
};

// Shallow time-dependent heads for the dynamic branch: density and
// nonrigidity from density-group features, color from appearance features.
struct TimeHeads {
  Mlp density_mlp;  // -> 1
  Mlp color_mlp;    // -> 3
  Mlp mask_mlp;     // -> 1
  int time_levels = 4;
  Real density_shift = -10.0;
  Real mask_bias = -4.0;

  static TimeHeads make(const std::string& tag, int den_dim, int app_dim, int width,
                        int time_levels, Real density_shift, Real mask_bias, Rng& rng) {
    TimeHeads h;
    h.time_levels = time_levels;
    h.density_shift = density_shift;
    h.mask_bias = mask_bias;
    const int tdim = 1 + 2 * time_levels;
    h.density_mlp = Mlp::make(tag + ".sigma", {den_dim + tdim, width, 1}, rng);
    h.color_mlp = Mlp::make(tag + ".color", {app_dim + tdim, width, 3}, rng);
    h.mask_mlp = Mlp::make(tag + ".mask", {den_dim + tdim, width, 1}, rng);
    return h;
  }

  struct Out {
    Slot sigma;  // [M] >= 0
    Slot rgb;    // [M,3] in (0,1)
    Slot mask;   // [M] in (0,1)
  };

  Out forward(Tape& t, Slot den_features, Slot app_features, Slot time) const {
    Slot pt = diff::ops::posenc(t, time, time_levels, true);
    Slot din = diff::ops::concat_cols(t, {den_features, pt});
    Slot ain = diff::ops::concat_cols(t, {app_features, pt});
    Out out;
    Slot s = diff::ops::add_const(t, density_mlp.forward(t, din), density_shift);
    out.sigma = diff::ops::row_sum(t, diff::ops::softplus(t, s));  // [M,1] -> [M]
    out.rgb = diff::ops::sigmoid(t, color_mlp.forward(t, ain));
    Slot m = diff::ops::add_const(t, mask_mlp.forward(t, din), mask_bias);
    out.mask = diff::ops::row_sum(t, diff::ops::sigmoid(t, m));
    return out;
  }

  std::vector<Parameter*> parameters() const {
    std::vector<Parameter*> out;
    for (const Mlp* m : {&density_mlp, &color_mlp, &mask_mlp})
      for (auto* p : m->parameters()) out.push_back(p);
    return out;
  }
};

// Scene-flow network: displacements to the next and previous timestep. Takes
// part in the losses only, never in rendering.
struct SceneFlowHead {
  Mlp mlp;
  int pos_levels = 5, time_levels = 4;
  Real max_flow = 0.5;

  static SceneFlowHead make(const std::string& tag, int width, int depth, int pos_levels,
                            int time_levels, Real max_flow, Rng& rng) {
    SceneFlowHead h;
    h.pos_levels = pos_levels;
    h.time_levels = time_levels;
    h.max_flow = max_flow;
    const int in = 3 * (1 + 2 * pos_levels) + 1 * (1 + 2 * time_levels);
    std::vector<int> dims{in};
    for (int l = 0; l < depth; ++l) dims.push_back(width);
    dims.push_back(6);
    h.mlp = Mlp::make(tag, dims, rng, /*zero_last=*/true);
    return h;
  }

  struct Out {
    Slot fwd, bwd;  // [M,3] each
  };

  Out forward(Tape& t, Slot xyz, Slot time) const {
    Slot px = diff::ops::posenc(t, xyz, pos_levels, true);
    Slot pt = diff::ops::posenc(t, time, time_levels, true);
    Slot in = diff::ops::concat_cols(t, {px, pt});
    Slot raw = diff::ops::tanh_op(t, mlp.forward(t, in));
    Slot scaled = diff::ops::scale(t, raw, max_flow);
    return {diff::ops::slice_cols(t, scaled, 0, 3), diff::ops::slice_cols(t, scaled, 3, 6)};
  }

  std::vector<Parameter*> parameters() const { return mlp.parameters(); }
};

// Static branch density: softplus(sum(features) + shift). No network.
inline Slot static_density(Tape& t, Slot features, Real shift) {
  Slot s = diff::ops::add_const(t, diff::ops::row_sum(t, features), shift);
  // row_sum yields [B]; softplus is elementwise.
  return diff::ops::softplus(t, s);
}

}  // namespace dynavox::field
