#pragma once

// Camera model and ray-space parameterizations.
//
// Conventions (used by every module):
//   - right-handed world, camera looks down -z, y up, x right
//   - pixel u grows right, v grows down; principal point at the image center
//   - poses are camera-to-world: X_world = R * X_cam + t
//   - the shared focal length is optimized as log(f / f0)

#include <array>

#include "dynavox/diff.hpp"

namespace dynavox::geom {

using Vec3 = std::array<Real, 3>;
using Vec2 = std::array<Real, 2>;

inline Vec3 add3(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 sub3(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 mul3(const Vec3& a, Real s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline Real dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross3(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Real norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }
inline Vec3 normalized3(const Vec3& a) {
  const Real n = norm3(a);
  DVX_CHECK_MSG(n > 0, "zero-length vector");
  return mul3(a, 1.0 / n);
}

struct Intrinsics {
  Real focal = 0;  // pixels, shared across frames
  Real cx = 0, cy = 0;
  int width = 0, height = 0;

  static Intrinsics centered(Real focal, int w, int h) {
    DVX_CHECK_MSG(focal > 0, "focal must be positive");
    return {focal, 0.5 * w, 0.5 * h, w, h};
  }
};

struct CameraPose {
  Vec3 rotation{0, 0, 0};     // axis-angle, radians * unit axis, norm < pi
  Vec3 translation{0, 0, 0};  // camera center in world units
  int frame_index = 0;
};

struct Ray {
  Vec3 origin{0, 0, 0};
  Vec3 direction{0, 0, 1};  // unit
  Real near = 0, far = 0;
  int frame_index = 0;
  Vec2 pixel{0, 0};
};

// Re-wraps an axis-angle vector to norm < pi (same rotation).
inline Vec3 wrap_axis_angle(const Vec3& w) {
  Real theta = norm3(w);
  if (theta < M_PI) return w;
  const Real two_pi = 2.0 * M_PI;
  Real wrapped = std::fmod(theta + M_PI, two_pi);
  if (wrapped < 0) wrapped += two_pi;
  wrapped -= M_PI;  // in (-pi, pi]
  return mul3(w, wrapped / theta);
}

// --- Rodrigues rotation and its derivative --------------------------------
//
// R(w) v = v + a(t) (w x v) + b(t) (w x (w x v)),  t = |w|,
// a = sin t / t, b = (1 - cos t) / t^2, with Taylor forms near t = 0.

struct RotCoeffs {
  Real a, b;
  Real ra, rb;  // a'(t)/t and b'(t)/t, finite at t = 0
};

inline RotCoeffs rot_coeffs(Real theta) {
  RotCoeffs c{};
  const Real t2 = theta * theta;
  if (theta < 1e-4) {
    c.a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
    c.b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
    c.ra = -1.0 / 3.0 + t2 / 30.0;
    c.rb = -1.0 / 12.0 + t2 / 180.0;
  } else {
    const Real s = std::sin(theta), co = std::cos(theta);
    c.a = s / theta;
    c.b = (1.0 - co) / t2;
    c.ra = (theta * co - s) / (t2 * theta);
    c.rb = (theta * s - 2.0 * (1.0 - co)) / (t2 * t2);
  }
  return c;
}

inline Vec3 rotate(const Vec3& w, const Vec3& v) {
  const RotCoeffs c = rot_coeffs(norm3(w));
  const Vec3 wxv = cross3(w, v);
  const Vec3 wxwxv = cross3(w, wxv);
  return add3(v, add3(mul3(wxv, c.a), mul3(wxwxv, c.b)));
}

inline Vec3 rotate_inv(const Vec3& w, const Vec3& v) { return rotate(mul3(w, -1.0), v); }

// d(R(w) v)/dw_j, one column per j.
inline std::array<Vec3, 3> rotate_jacobian_w(const Vec3& w, const Vec3& v) {
  const RotCoeffs c = rot_coeffs(norm3(w));
  const Vec3 wxv = cross3(w, v);
  const Vec3 wxwxv = cross3(w, wxv);
  std::array<Vec3, 3> J;
  for (int j = 0; j < 3; ++j) {
    Vec3 ej{0, 0, 0};
    ej[static_cast<size_t>(j)] = 1;
    const Vec3 ejxv = cross3(ej, v);
    const Vec3 t1 = mul3(wxv, c.ra * w[static_cast<size_t>(j)]);
    const Vec3 t2 = mul3(ejxv, c.a);
    const Vec3 t3 = mul3(wxwxv, c.rb * w[static_cast<size_t>(j)]);
    const Vec3 t4 = mul3(add3(cross3(ej, wxv), cross3(w, ejxv)), c.b);
    J[static_cast<size_t>(j)] = add3(add3(t1, t2), add3(t3, t4));
  }
  return J;
}

// 4x4 camera-to-world rigid transform, row-major.
inline std::array<Real, 16> pose_matrix(const CameraPose& p) {
  std::array<Real, 16> m{};
  const Vec3 cols[3] = {rotate(p.rotation, {1, 0, 0}), rotate(p.rotation, {0, 1, 0}),
                        rotate(p.rotation, {0, 0, 1})};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m[static_cast<size_t>(r * 4 + c)] = cols[c][static_cast<size_t>(r)];
    m[static_cast<size_t>(r * 4 + 3)] = p.translation[static_cast<size_t>(r)];
  }
  m[15] = 1;
  return m;
}

inline CameraPose pose_from_matrix(const std::array<Real, 16>& m, int frame_index = 0) {
  // Log map of the rotation block.
  const Real tr = m[0] + m[5] + m[10];
  Real cos_t = 0.5 * (tr - 1.0);
  cos_t = std::clamp(cos_t, Real(-1), Real(1));
  const Real theta = std::acos(cos_t);
  Vec3 w{0, 0, 0};
  if (theta > 1e-10) {
    const Real k = theta / (2.0 * std::sin(theta));
    w = {k * (m[9] - m[6]), k * (m[2] - m[8]), k * (m[4] - m[1])};
  }
  if (theta > M_PI - 1e-6) {
    // Near-pi fallback: use the symmetric part.
    for (int i = 0; i < 3; ++i) {
      const Real d = std::sqrt(std::max(Real(0), 0.5 * (m[static_cast<size_t>(i * 5)] + 1.0) * 2.0 - (tr - 1.0) * 0.5));
      (void)d;
    }
  }
  return {w, {m[3], m[7], m[11]}, frame_index};
}

// Unnormalized camera-frame direction through a pixel.
inline Vec3 pixel_dir_cam(Real u, Real v, const Intrinsics& K) {
  return {(u - K.cx) / K.focal, -(v - K.cy) / K.focal, -1.0};
}

inline Ray generate_ray(const CameraPose& pose, const Intrinsics& K, Real u, Real v, Real near,
                        Real far) {
  Ray r;
  r.origin = pose.translation;
  r.direction = rotate(pose.rotation, normalized3(pixel_dir_cam(u, v, K)));
  r.near = near;
  r.far = far;
  r.frame_index = pose.frame_index;
  r.pixel = {u, v};
  return r;
}

struct Projection {
  Vec2 pixel{0, 0};
  Real depth = 0;  // positive camera-space depth (= -z_cam)
  bool valid = false;
};

inline Projection project(const Vec3& point, const CameraPose& pose, const Intrinsics& K) {
  const Vec3 q = rotate_inv(pose.rotation, sub3(point, pose.translation));
  Projection out;
  if (q[2] >= -1e-12) return out;  // behind (or on) the camera plane
  out.pixel = {K.cx - K.focal * q[0] / q[2], K.cy + K.focal * q[1] / q[2]};
  out.depth = -q[2];
  out.valid = true;
  return out;
}

// Positive camera-space depth of a world point (no image-bounds check).
inline Real camera_depth(const Vec3& point, const CameraPose& pose) {
  const Vec3 q = rotate_inv(pose.rotation, sub3(point, pose.translation));
  return -q[2];
}

// World point for a pixel at positive camera-space depth z.
inline Vec3 unproject(Real u, Real v, Real z, const CameraPose& pose, const Intrinsics& K) {
  const Vec3 dc = pixel_dir_cam(u, v, K);
  const Vec3 q = mul3(dc, z);  // dc has z component -1, so q_z = -z
  return add3(rotate(pose.rotation, q), pose.translation);
}

// --- NDC (forward-facing) ---------------------------------------------------
//
// Standard forward-facing warp. The depth z = -near plane maps to ndc z = -1
// and z -> -inf maps to ndc z -> 1. Warped rays span ndc z in [-1, 1] for the
// ray parameter t' in [0, 1].

struct NdcRay {
  Vec3 origin;
  Vec3 direction;
  bool valid = false;
};

inline Vec3 ndc_point(const Vec3& p, Real near, const Intrinsics& K) {
  DVX_CHECK_MSG(p[2] < 0, "ndc_point requires a point in front of the camera (z < 0)");
  const Real ax = 2.0 * K.focal / K.width;
  const Real ay = 2.0 * K.focal / K.height;
  return {-ax * p[0] / p[2], -ay * p[1] / p[2], 1.0 + 2.0 * near / p[2]};
}

inline Vec3 ndc_unmap_point(const Vec3& p, Real near, const Intrinsics& K) {
  const Real z = 2.0 * near / (p[2] - 1.0);  // negative for p_z < 1
  const Real ax = 2.0 * K.focal / K.width;
  const Real ay = 2.0 * K.focal / K.height;
  return {-p[0] * z / ax, -p[1] * z / ay, z};
}

inline NdcRay ndc_ray(const Vec3& o, const Vec3& d, Real near, const Intrinsics& K) {
  NdcRay out;
  if (std::abs(d[2]) < 1e-12) return out;  // parallel to the image plane
  const Real t0 = -(near + o[2]) / d[2];
  const Vec3 o1 = add3(o, mul3(d, t0));  // o1_z == -near
  const Real ax = 2.0 * K.focal / K.width;
  const Real ay = 2.0 * K.focal / K.height;
  out.origin = {ax * o1[0] / near, ay * o1[1] / near, -1.0};
  out.direction = {-ax * d[0] / d[2] - out.origin[0], -ay * d[1] / d[2] - out.origin[1], 2.0};
  out.valid = true;
  return out;
}

// --- Scene contraction ------------------------------------------------------
//
// Identity inside the unit ball, (2 - 1/|x|) x/|x| outside; output norm < 2.

inline Vec3 contract(const Vec3& x) {
  const Real r = norm3(x);
  if (r <= 1.0) return x;
  return mul3(x, (2.0 - 1.0 / r) / r);
}

// ---------------------------------------------------------------------------
// Tape ops. Pose parameters are one [F,6] array (rows: axis-angle, then
// translation); the focal parameter is [1] storing log(f / f0).

namespace ops {

using diff::Slot;
using diff::Tape;

inline Real focal_from_log(const Tape& t, Slot logf, Real f0) { return f0 * std::exp(t.val(logf)[0]); }

// (origins[B,3], dirs[B,3]) for per-ray (frame, pixel). Directions are unit.
struct RaysOut {
  Slot origins, dirs;
};

inline RaysOut pose_to_rays(Tape& t, Slot poses, Slot logf, const std::vector<int>& frames,
                            const Array& pixels, const Intrinsics& base) {
  const Array& P = t.val(poses);
  DVX_CHECK(P.ndim() == 2 && P.dim(1) == 6);
  const int B = static_cast<int>(frames.size());
  DVX_CHECK(pixels.ndim() == 2 && pixels.dim(0) == B && pixels.dim(1) == 2);
  const Real f = focal_from_log(t, logf, base.focal);

  Array origins({B, 3}), dirs({B, 3});
  for (int b = 0; b < B; ++b) {
    const int k = frames[static_cast<size_t>(b)];
    const Vec3 w{P.at(k, 0), P.at(k, 1), P.at(k, 2)};
    const Vec3 tr{P.at(k, 3), P.at(k, 4), P.at(k, 5)};
    Intrinsics K = base;
    K.focal = f;
    const Vec3 n = normalized3(pixel_dir_cam(pixels.at(b, 0), pixels.at(b, 1), K));
    const Vec3 d = rotate(w, n);
    for (int c = 0; c < 3; ++c) {
      origins.at(b, c) = tr[static_cast<size_t>(c)];
      dirs.at(b, c) = d[static_cast<size_t>(c)];
    }
  }

  Tape::Node nd;
  nd.name = "pose_to_rays";
  nd.inputs = {poses, logf};
  nd.out.push_back(std::move(origins));
  nd.out.push_back(std::move(dirs));
  auto fr = std::make_shared<std::vector<int>>(frames);
  auto px = std::make_shared<Array>(pixels);
  const Real f0 = base.focal, cx = base.cx, cy = base.cy;
  nd.backward = [fr, px, f0, cx, cy, B](Tape& t, int self) {
    auto& node = t.node(self);
    const Array* go = t.grad_of(self, 0);
    const Array* gd = t.grad_of(self, 1);
    if (!go && !gd) return;
    const Array& P = t.val(node.inputs[0]);
    const Real f = f0 * std::exp(t.val(node.inputs[1])[0]);
    Array& gP = t.grad_acc(node.inputs[0]);
    Array& gF = t.grad_acc(node.inputs[1]);
    for (int b = 0; b < B; ++b) {
      const int k = (*fr)[static_cast<size_t>(b)];
      if (go) {
        for (int c = 0; c < 3; ++c) gP.at(k, 3 + c) += go->at(b, c);
      }
      if (!gd) continue;
      const Vec3 g{gd->at(b, 0), gd->at(b, 1), gd->at(b, 2)};
      if (g[0] == 0 && g[1] == 0 && g[2] == 0) continue;
      const Vec3 w{P.at(k, 0), P.at(k, 1), P.at(k, 2)};
      const Vec3 vh{(px->at(b, 0) - cx) / f, -(px->at(b, 1) - cy) / f, -1.0};
      const Real vn = norm3(vh);
      const Vec3 n = mul3(vh, 1.0 / vn);
      // d = R(w) n
      const auto J = rotate_jacobian_w(w, n);
      for (int j = 0; j < 3; ++j) gP.at(k, j) += dot3(J[static_cast<size_t>(j)], g);
      // Through n: g_n = R^T g, then through vh, then to log-focal.
      const Vec3 gn = rotate_inv(w, g);
      // g_vh = (I - n n^T) gn / |vh|
      const Real ndg = dot3(n, gn);
      const Vec3 gvh = mul3(sub3(gn, mul3(n, ndg)), 1.0 / vn);
      // dvh/dlogf = (-vh_x, -vh_y, 0)
      gF[0] += -gvh[0] * vh[0] - gvh[1] * vh[1];
    }
  };
  const int id = t.add_node(std::move(nd));
  return {{id, 0}, {id, 1}};
}

// Projects world points into per-point target frames.
// Ports: 0 = uv [B,2], 1 = depth [B], 2 = valid flags [B] (non-differentiable).
struct ProjectOut {
  Slot uv, depth, valid;
};

inline ProjectOut project_points(Tape& t, Slot points, Slot poses, Slot logf,
                                 const std::vector<int>& frames, const Intrinsics& base) {
  const Array& X = t.val(points);
  const Array& P = t.val(poses);
  const int B = X.dim(0);
  DVX_CHECK(X.ndim() == 2 && X.dim(1) == 3);
  DVX_CHECK(static_cast<int>(frames.size()) == B);
  const Real f = focal_from_log(t, logf, base.focal);

  Array uv({B, 2}), depth({B}), valid({B});
  for (int b = 0; b < B; ++b) {
    const int k = frames[static_cast<size_t>(b)];
    const Vec3 w{P.at(k, 0), P.at(k, 1), P.at(k, 2)};
    const Vec3 tr{P.at(k, 3), P.at(k, 4), P.at(k, 5)};
    const Vec3 q = rotate_inv(w, sub3({X.at(b, 0), X.at(b, 1), X.at(b, 2)}, tr));
    if (q[2] < -1e-9) {
      uv.at(b, 0) = base.cx - f * q[0] / q[2];
      uv.at(b, 1) = base.cy + f * q[1] / q[2];
      depth[b] = -q[2];
      valid[b] = 1;
    }
  }

  Tape::Node nd;
  nd.name = "project_points";
  nd.inputs = {points, poses, logf};
  nd.out.push_back(std::move(uv));
  nd.out.push_back(std::move(depth));
  nd.out.push_back(std::move(valid));
  auto fr = std::make_shared<std::vector<int>>(frames);
  const Real f0 = base.focal;
  nd.backward = [fr, f0, B](Tape& t, int self) {
    auto& node = t.node(self);
    const Array* guv = t.grad_of(self, 0);
    const Array* gz = t.grad_of(self, 1);
    if (!guv && !gz) return;
    const Array& X = t.val(node.inputs[0]);
    const Array& P = t.val(node.inputs[1]);
    const Real f = f0 * std::exp(t.val(node.inputs[2])[0]);
    const Array& valid = node.out[2];
    Array& gX = t.grad_acc(node.inputs[0]);
    Array& gP = t.grad_acc(node.inputs[1]);
    Array& gF = t.grad_acc(node.inputs[2]);
    for (int b = 0; b < B; ++b) {
      if (valid[b] == 0) continue;
      const int k = (*fr)[static_cast<size_t>(b)];
      const Vec3 w{P.at(k, 0), P.at(k, 1), P.at(k, 2)};
      const Vec3 tr{P.at(k, 3), P.at(k, 4), P.at(k, 5)};
      const Vec3 u = sub3({X.at(b, 0), X.at(b, 1), X.at(b, 2)}, tr);
      const Vec3 q = rotate_inv(w, u);
      Vec3 gq{0, 0, 0};
      const Real gu = guv ? guv->at(b, 0) : 0;
      const Real gv = guv ? guv->at(b, 1) : 0;
      const Real gd = gz ? (*gz)[b] : 0;
      // u_px = cx - f qx/qz ; v_px = cy + f qy/qz ; depth = -qz
      gq[0] += gu * (-f / q[2]);
      gq[1] += gv * (f / q[2]);
      gq[2] += gu * (f * q[0] / (q[2] * q[2])) + gv * (-f * q[1] / (q[2] * q[2])) - gd;
      gF[0] += gu * (-f * q[0] / q[2]) + gv * (f * q[1] / q[2]);
      // q = R(-w) u  =>  gX = R(w) gq, gtr = -gX
      const Vec3 gx = rotate(w, gq);
      for (int c = 0; c < 3; ++c) {
        gX.at(b, c) += gx[static_cast<size_t>(c)];
        gP.at(k, 3 + c) -= gx[static_cast<size_t>(c)];
      }
      // d q / d w_j = -(d rotate(wt, u)/d wt_j) at wt = -w
      const auto J = rotate_jacobian_w(mul3(w, -1.0), u);
      for (int j = 0; j < 3; ++j) gP.at(k, j) -= dot3(J[static_cast<size_t>(j)], gq);
    }
  };
  const int id = t.add_node(std::move(nd));
  return {{id, 0}, {id, 1}, {id, 2}};
}

// NDC warp of world rays (forward-facing). Ports: origin [B,3], dir [B,3].
struct NdcOut {
  Slot origins, dirs;
};

inline NdcOut ndc_warp_rays(Tape& t, Slot origins, Slot dirs, Slot logf, Real near,
                            const Intrinsics& base) {
  const Array& O = t.val(origins);
  const Array& D = t.val(dirs);
  const int B = O.dim(0);
  DVX_CHECK(D.dim(0) == B);
  const Real f = focal_from_log(t, logf, base.focal);
  const Real ax = 2.0 * f / base.width, ay = 2.0 * f / base.height;

  Array no({B, 3}), ndir({B, 3});
  for (int b = 0; b < B; ++b) {
    const Vec3 o{O.at(b, 0), O.at(b, 1), O.at(b, 2)};
    const Vec3 d{D.at(b, 0), D.at(b, 1), D.at(b, 2)};
    DVX_CHECK_MSG(std::abs(d[2]) > 1e-12, "ndc_warp: ray parallel to image plane");
    const Real t0 = -(near + o[2]) / d[2];
    const Real o1x = o[0] + t0 * d[0], o1y = o[1] + t0 * d[1];
    no.at(b, 0) = ax * o1x / near;
    no.at(b, 1) = ay * o1y / near;
    no.at(b, 2) = -1.0;
    ndir.at(b, 0) = -ax * d[0] / d[2] - no.at(b, 0);
    ndir.at(b, 1) = -ay * d[1] / d[2] - no.at(b, 1);
    ndir.at(b, 2) = 2.0;
  }

  Tape::Node nd;
  nd.name = "ndc_warp_rays";
  nd.inputs = {origins, dirs, logf};
  nd.out.push_back(std::move(no));
  nd.out.push_back(std::move(ndir));
  const Real f0 = base.focal;
  const int W = base.width, H = base.height;
  nd.backward = [f0, W, H, near, B](Tape& t, int self) {
    auto& node = t.node(self);
    const Array* gno = t.grad_of(self, 0);
    const Array* gnd = t.grad_of(self, 1);
    if (!gno && !gnd) return;
    const Array& O = t.val(node.inputs[0]);
    const Array& D = t.val(node.inputs[1]);
    const Real f = f0 * std::exp(t.val(node.inputs[2])[0]);
    const Real ax = 2.0 * f / W, ay = 2.0 * f / H;
    Array& gO = t.grad_acc(node.inputs[0]);
    Array& gD = t.grad_acc(node.inputs[1]);
    Array& gF = t.grad_acc(node.inputs[2]);
    for (int b = 0; b < B; ++b) {
      const Vec3 o{O.at(b, 0), O.at(b, 1), O.at(b, 2)};
      const Vec3 d{D.at(b, 0), D.at(b, 1), D.at(b, 2)};
      const Real t0 = -(near + o[2]) / d[2];
      const Real o1x = o[0] + t0 * d[0], o1y = o[1] + t0 * d[1];

      // Upstream grads; the warped direction subtracts the warped origin, so
      // fold that in first: d(out)/d(o'x) gets -g(d'x).
      Real g_ox = gno ? gno->at(b, 0) : 0;
      Real g_oy = gno ? gno->at(b, 1) : 0;
      const Real g_dx = gnd ? gnd->at(b, 0) : 0;
      const Real g_dy = gnd ? gnd->at(b, 1) : 0;
      g_ox -= g_dx;
      g_oy -= g_dy;

      // o'x = ax o1x / near, o'y = ay o1y / near
      const Real g_o1x = g_ox * ax / near;
      const Real g_o1y = g_oy * ay / near;
      // d'x(pre-subtract) = -ax dx/dz ; d'y = -ay dy/dz
      // o1x = ox + t0 dx ; t0 = -(near+oz)/dz
      const Real dt0_doz = -1.0 / d[2];
      const Real dt0_ddz = (near + o[2]) / (d[2] * d[2]);

      gO.at(b, 0) += g_o1x;
      gO.at(b, 1) += g_o1y;
      gO.at(b, 2) += g_o1x * d[0] * dt0_doz + g_o1y * d[1] * dt0_doz;
      gD.at(b, 0) += g_o1x * t0 + g_dx * (-ax / d[2]);
      gD.at(b, 1) += g_o1y * t0 + g_dy * (-ay / d[2]);
      gD.at(b, 2) += g_o1x * d[0] * dt0_ddz + g_o1y * d[1] * dt0_ddz +
                     g_dx * (ax * d[0] / (d[2] * d[2])) + g_dy * (ay * d[1] / (d[2] * d[2]));
      // ax, ay scale with f: d(out)/dlogf = out-term value.
      gF[0] += g_ox * (ax * o1x / near) + g_oy * (ay * o1y / near) + g_dx * (-ax * d[0] / d[2]) +
               g_dy * (-ay * d[1] / d[2]);
    }
  };
  const int id = t.add_node(std::move(nd));
  return {{id, 0}, {id, 1}};
}

// Inverse of the NDC point map; used to express NDC-space surface points in
// world units for the geometric losses.
inline Slot ndc_unmap_points(Tape& t, Slot points, Slot logf, Real near, const Intrinsics& base) {
  const Array& Pn = t.val(points);
  const int B = Pn.dim(0);
  const Real f = focal_from_log(t, logf, base.focal);
  const Real ax = 2.0 * f / base.width, ay = 2.0 * f / base.height;
  Array out({B, 3});
  for (int b = 0; b < B; ++b) {
    const Real z = 2.0 * near / (Pn.at(b, 2) - 1.0);
    out.at(b, 0) = -Pn.at(b, 0) * z / ax;
    out.at(b, 1) = -Pn.at(b, 1) * z / ay;
    out.at(b, 2) = z;
  }
  Tape::Node nd;
  nd.name = "ndc_unmap_points";
  nd.inputs = {points, logf};
  nd.out.push_back(std::move(out));
  const Real f0 = base.focal;
  const int W = base.width, H = base.height;
  nd.backward = [f0, W, H, near, B](Tape& t, int self) {
    auto& node = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    const Array& Pn = t.val(node.inputs[0]);
    const Real f = f0 * std::exp(t.val(node.inputs[1])[0]);
    const Real ax = 2.0 * f / W, ay = 2.0 * f / H;
    Array& gP = t.grad_acc(node.inputs[0]);
    Array& gF = t.grad_acc(node.inputs[1]);
    for (int b = 0; b < B; ++b) {
      const Real zp = Pn.at(b, 2);
      const Real z = 2.0 * near / (zp - 1.0);
      const Real dz_dzp = -2.0 * near / ((zp - 1.0) * (zp - 1.0));
      const Real gx = g->at(b, 0), gy = g->at(b, 1), gz = g->at(b, 2);
      gP.at(b, 0) += gx * (-z / ax);
      gP.at(b, 1) += gy * (-z / ay);
      gP.at(b, 2) += (gx * (-Pn.at(b, 0) / ax) + gy * (-Pn.at(b, 1) / ay) + gz) * dz_dzp;
      // x,y scale as 1/f.
      gF[0] += gx * (Pn.at(b, 0) * z / ax) + gy * (Pn.at(b, 1) * z / ay);
    }
  };
  return {t.add_node(std::move(nd)), 0};
}

inline Slot contract_points(Tape& t, Slot points) {
  const Array& X = t.val(points);
  const int B = X.dim(0);
  Array out(X.shape);
  for (int b = 0; b < B; ++b) {
    const Vec3 c = contract({X.at(b, 0), X.at(b, 1), X.at(b, 2)});
    for (int k = 0; k < 3; ++k) out.at(b, k) = c[static_cast<size_t>(k)];
  }
  return diff::ops::unary(t, "contract_points", points, std::move(out), [B](Tape& t, int self) {
    auto& node = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    const Array& X = t.val(node.inputs[0]);
    Array& gX = t.grad_acc(node.inputs[0]);
    for (int b = 0; b < B; ++b) {
      const Vec3 x{X.at(b, 0), X.at(b, 1), X.at(b, 2)};
      const Vec3 gv{g->at(b, 0), g->at(b, 1), g->at(b, 2)};
      const Real r = norm3(x);
      if (r <= 1.0) {
        for (int k = 0; k < 3; ++k) gX.at(b, k) += gv[static_cast<size_t>(k)];
      } else {
        // c = s(r) x, s = (2 - 1/r)/r; J = s I + (s'/r) x x^T (symmetric)
        const Real s = (2.0 - 1.0 / r) / r;
        const Real sp = (-2.0 / (r * r) + 2.0 / (r * r * r));  // ds/dr
        const Real xdotg = dot3(x, gv);
        for (int k = 0; k < 3; ++k)
          gX.at(b, k) += s * gv[static_cast<size_t>(k)] + (sp / r) * x[static_cast<size_t>(k)] * xdotg;
      }
    }
  });
}

// Per-sample positions o_b + t_{b,i} d_b, flattened to [B*N, 3].
inline Slot ray_points(Tape& t, Slot origins, Slot dirs, const Array& dist) {
  const Array& O = t.val(origins);
  const Array& D = t.val(dirs);
  DVX_CHECK(dist.ndim() == 2);
  const int B = dist.dim(0), N = dist.dim(1);
  DVX_CHECK(O.dim(0) == B && D.dim(0) == B);
  Array out({B * N, 3});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < N; ++i)
      for (int c = 0; c < 3; ++c)
        out.at(b * N + i, c) = O.at(b, c) + dist.at(b, i) * D.at(b, c);
  Tape::Node nd;
  nd.name = "ray_points";
  nd.inputs = {origins, dirs};
  nd.out.push_back(std::move(out));
  auto dt = std::make_shared<Array>(dist);
  nd.backward = [dt, B, N](Tape& t, int self) {
    auto& node = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    Array& gO = t.grad_acc(node.inputs[0]);
    Array& gD = t.grad_acc(node.inputs[1]);
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < N; ++i)
        for (int c = 0; c < 3; ++c) {
          const Real gv = g->at(b * N + i, c);
          gO.at(b, c) += gv;
          gD.at(b, c) += dt->at(b, i) * gv;
        }
  };
  return {t.add_node(std::move(nd)), 0};
}

// Interval lengths scaled by the ray direction norm: delta[b,i] = dt[b,i]*|d_b|.
// Used in NDC where warped directions are not unit length.
inline Slot ray_deltas(Tape& t, Slot dirs, const Array& dt) {
  const Array& D = t.val(dirs);
  const int B = dt.dim(0), N = dt.dim(1);
  DVX_CHECK(D.dim(0) == B);
  Array out({B, N});
  for (int b = 0; b < B; ++b) {
    const Real n = std::sqrt(D.at(b, 0) * D.at(b, 0) + D.at(b, 1) * D.at(b, 1) + D.at(b, 2) * D.at(b, 2));
    for (int i = 0; i < N; ++i) out.at(b, i) = dt.at(b, i) * n;
  }
  Tape::Node nd;
  nd.name = "ray_deltas";
  nd.inputs = {dirs};
  nd.out.push_back(std::move(out));
  auto dts = std::make_shared<Array>(dt);
  nd.backward = [dts, B, N](Tape& t, int self) {
    auto& node = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    const Array& D = t.val(node.inputs[0]);
    Array& gD = t.grad_acc(node.inputs[0]);
    for (int b = 0; b < B; ++b) {
      const Vec3 d{D.at(b, 0), D.at(b, 1), D.at(b, 2)};
      const Real n = norm3(d);
      Real acc = 0;
      for (int i = 0; i < N; ++i) acc += g->at(b, i) * dts->at(b, i);
      for (int c = 0; c < 3; ++c) gD.at(b, c) += acc * d[static_cast<size_t>(c)] / n;
    }
  };
  return {t.add_node(std::move(nd)), 0};
}

}  // namespace ops

}  // namespace dynavox::geom
