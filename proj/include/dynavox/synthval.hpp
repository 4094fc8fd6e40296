#pragma once

// Synthetic scene generator with exact ground truth (images, poses, depth,
// flow, motion masks, scene flow), an independent naive volume renderer used
// to cross-check the fast path, and the evaluation metrics.
//
// Scenes are textured axis-aligned boxes and spheres with closed-form rigid
// motion, rendered by exact ray-primitive intersection (surface rendering).
// Every sequence is enclosed in a textured room box so all rays hit geometry
// and the priors are exact everywhere.

#include <Eigen/Dense>

#include "dynavox/dataio.hpp"
#include "dynavox/geometry.hpp"
#include "dynavox/image.hpp"

namespace dynavox::synth {

using geom::CameraPose;
using geom::Intrinsics;
using geom::Vec3;

// --- scene specification ------------------------------------------------------

struct Primitive {
  enum class Kind { Box, Sphere };
  enum class Motion { None, Linear, Circular };

  Kind kind = Kind::Box;
  Vec3 center{0, 0, 0};
  Vec3 half{0.5, 0.5, 0.5};  // box half extents; spheres use half[0] as radius
  uint64_t albedo_seed = 0;
  Real albedo_freq = 9.0;

  Motion motion = Motion::None;
  Vec3 velocity{0, 0, 0};   // linear: offset(t) = velocity * t
  Real circle_radius = 0;   // circular path in the xy-plane
  Real circle_omega = 0;    // radians over t in [0,1]

  bool dynamic() const { return motion != Motion::None; }

  Vec3 offset_at(Real t) const {
    switch (motion) {
      case Motion::None: return {0, 0, 0};
      case Motion::Linear: return geom::mul3(velocity, t);
      case Motion::Circular:
        return {circle_radius * (std::cos(circle_omega * t) - 1.0),
                circle_radius * std::sin(circle_omega * t), 0};
    }
    return {0, 0, 0};
  }
};

struct SceneSpec {
  enum class Trajectory { Orbit, Forward, RotationOnly };

  std::vector<Primitive> primitives;  // primitives[0] is the enclosing room
  Trajectory trajectory = Trajectory::Orbit;
  int n_frames = 30;
  int width = 96, height = 72;
  Real focal = 110.0;  // ground-truth focal in pixels
  Real orbit_radius = 3.5, orbit_height = 0.6, orbit_arc = 0.7;  // radians
  Real forward_travel = 1.2;
  Real rotation_sweep = 0.5;  // radians of yaw, RotationOnly
  uint64_t seed = 0;
  Real suggested_near = 0.8, suggested_far = 25.0;
};

// Procedural albedo: two superposed sinusoids per channel, evaluated in the
// primitive's local frame so textures travel with moving objects.
inline Vec3 albedo(const Primitive& prim, const Vec3& local) {
  Rng rng(prim.albedo_seed, 0xa1b2);
  Vec3 out;
  for (int c = 0; c < 3; ++c) {
    Real v = 0.5;
    for (int h = 0; h < 2; ++h) {
      const Vec3 k{prim.albedo_freq * rng.uniform(0.4, 1.0), prim.albedo_freq * rng.uniform(0.4, 1.0),
                   prim.albedo_freq * rng.uniform(0.4, 1.0)};
      const Real phase = rng.uniform(0, 2 * M_PI);
      v += 0.17 * std::sin(geom::dot3(k, local) + phase);
    }
    out[static_cast<size_t>(c)] = std::clamp(v, Real(0.02), Real(0.98));
  }
  return out;
}

// --- intersection -------------------------------------------------------------

struct Hit {
  Real t = std::numeric_limits<Real>::infinity();
  int prim = -1;
  Vec3 point{0, 0, 0};  // world, at the evaluation time
  bool valid() const { return prim >= 0; }
};

// Nearest positive intersection. For the enclosing room the origin is inside,
// so the exit face is returned, which is exactly what we want.
inline Real intersect_box(const Vec3& o, const Vec3& d, const Vec3& c, const Vec3& h) {
  Real t0 = -std::numeric_limits<Real>::infinity();
  Real t1 = std::numeric_limits<Real>::infinity();
  for (int a = 0; a < 3; ++a) {
    const Real lo = c[static_cast<size_t>(a)] - h[static_cast<size_t>(a)];
    const Real hi = c[static_cast<size_t>(a)] + h[static_cast<size_t>(a)];
    if (std::abs(d[static_cast<size_t>(a)]) < 1e-15) {
      if (o[static_cast<size_t>(a)] < lo || o[static_cast<size_t>(a)] > hi) return -1;
      continue;
    }
    Real ta = (lo - o[static_cast<size_t>(a)]) / d[static_cast<size_t>(a)];
    Real tb = (hi - o[static_cast<size_t>(a)]) / d[static_cast<size_t>(a)];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1) return -1;
  if (t0 > 1e-9) return t0;
  if (t1 > 1e-9) return t1;
  return -1;
}

inline Real intersect_sphere(const Vec3& o, const Vec3& d, const Vec3& c, Real radius) {
  const Vec3 oc = geom::sub3(o, c);
  const Real b = geom::dot3(oc, d);
  const Real disc = b * b - (geom::dot3(oc, oc) - radius * radius);
  if (disc < 0) return -1;
  const Real sq = std::sqrt(disc);
  const Real ta = -b - sq, tb = -b + sq;
  if (ta > 1e-9) return ta;
  if (tb > 1e-9) return tb;
  return -1;
}

inline Hit trace(const SceneSpec& spec, const Vec3& o, const Vec3& d, Real t_time) {
  Hit best;
  for (size_t i = 0; i < spec.primitives.size(); ++i) {
    const Primitive& p = spec.primitives[i];
    const Vec3 off = p.offset_at(t_time);
    const Vec3 oc = geom::sub3(o, off);  // intersect in the primitive's rest frame
    const Real t = p.kind == Primitive::Kind::Box
                       ? intersect_box(oc, d, p.center, p.half)
                       : intersect_sphere(oc, d, p.center, p.half[0]);
    if (t > 0 && t < best.t) {
      best.t = t;
      best.prim = static_cast<int>(i);
      best.point = geom::add3(o, geom::mul3(d, t));
    }
  }
  return best;
}

// --- ground-truth trajectory ----------------------------------------------------

inline CameraPose lookat_pose(const Vec3& eye, const Vec3& target, int frame) {
  const Vec3 f = geom::normalized3(geom::sub3(target, eye));
  Vec3 up{0, 1, 0};
  Vec3 s = geom::cross3(f, up);
  const Real sn = geom::norm3(s);
  DVX_CHECK_MSG(sn > 1e-9, "look-at direction parallel to up");
  s = geom::mul3(s, 1.0 / sn);
  const Vec3 u = geom::cross3(s, f);
  std::array<Real, 16> m{};
  for (int r = 0; r < 3; ++r) {
    m[static_cast<size_t>(r * 4 + 0)] = s[static_cast<size_t>(r)];
    m[static_cast<size_t>(r * 4 + 1)] = u[static_cast<size_t>(r)];
    m[static_cast<size_t>(r * 4 + 2)] = -f[static_cast<size_t>(r)];
    m[static_cast<size_t>(r * 4 + 3)] = eye[static_cast<size_t>(r)];
  }
  m[15] = 1;
  return geom::pose_from_matrix(m, frame);
}

inline std::vector<CameraPose> gt_trajectory(const SceneSpec& spec) {
  std::vector<CameraPose> poses;
  for (int i = 0; i < spec.n_frames; ++i) {
    const Real u = spec.n_frames > 1 ? static_cast<Real>(i) / (spec.n_frames - 1) : 0.0;
    switch (spec.trajectory) {
      case SceneSpec::Trajectory::Orbit: {
        const Real th = (u - 0.5) * spec.orbit_arc;
        const Vec3 eye{spec.orbit_radius * std::sin(th), spec.orbit_height,
                       spec.orbit_radius * std::cos(th)};
        poses.push_back(lookat_pose(eye, {0, 0, 0}, i));
        break;
      }
      case SceneSpec::Trajectory::Forward: {
        const Vec3 eye{0.15 * std::sin(2.0 * u), 0.1 * u, spec.orbit_radius - spec.forward_travel * u};
        poses.push_back(lookat_pose(eye, {eye[0] * 0.5, eye[1] * 0.5, -10.0}, i));
        break;
      }
      case SceneSpec::Trajectory::RotationOnly: {
        const Real yaw = (u - 0.5) * spec.rotation_sweep;
        CameraPose p;
        p.rotation = {0, yaw, 0};
        p.translation = {0, spec.orbit_height, spec.orbit_radius};
        p.frame_index = i;
        poses.push_back(p);
        break;
      }
    }
  }
  return poses;
}

// --- presets --------------------------------------------------------------------

inline SceneSpec make_preset(const std::string& name, uint64_t seed) {
  SceneSpec s;
  s.seed = seed;

  Primitive room;
  room.kind = Primitive::Kind::Box;
  room.center = {0, 0, 0};
  room.half = {9, 6, 9};
  room.albedo_seed = seed ^ 0x1001;
  room.albedo_freq = 2.2;
  s.primitives.push_back(room);

  auto box = [&](Vec3 c, Vec3 h, uint64_t salt, Real freq) {
    Primitive p;
    p.kind = Primitive::Kind::Box;
    p.center = c;
    p.half = h;
    p.albedo_seed = seed ^ salt;
    p.albedo_freq = freq;
    return p;
  };
  auto sphere = [&](Vec3 c, Real r, uint64_t salt, Real freq) {
    Primitive p;
    p.kind = Primitive::Kind::Sphere;
    p.center = c;
    p.half = {r, r, r};
    p.albedo_seed = seed ^ salt;
    p.albedo_freq = freq;
    return p;
  };

  // Shared static furniture. The mid- and background pieces matter: they
  // spread depth so no single wall plane dominates the epipolar statistics.
  s.primitives.push_back(box({-0.9, -0.45, -0.6}, {0.35, 0.35, 0.35}, 0x2002, 8.0));
  s.primitives.push_back(box({0.85, -0.5, -0.5}, {0.38, 0.3, 0.38}, 0x3003, 10.0));
  s.primitives.push_back(box({0.1, -0.8, 0.6}, {0.5, 0.08, 0.3}, 0x4004, 6.0));
  s.primitives.push_back(sphere({0.2, 0.45, -0.55}, 0.35, 0x5005, 9.0));
  s.primitives.push_back(sphere({-0.85, 0.85, 0.1}, 0.28, 0x6006, 11.0));
  s.primitives.push_back(box({-1.9, 0.1, -2.4}, {0.55, 1.7, 0.55}, 0x9009, 4.0));
  s.primitives.push_back(box({1.85, -0.3, -2.0}, {0.6, 1.2, 0.6}, 0xa00a, 5.0));
  s.primitives.push_back(sphere({0.4, 1.45, -2.8}, 0.6, 0xb00b, 5.0));
  s.primitives.push_back(box({-2.9, 0.8, -0.3}, {0.45, 1.0, 0.45}, 0xc00c, 6.0));
  s.primitives.push_back(sphere({2.6, 1.1, 0.3}, 0.5, 0xd00d, 7.0));
  s.primitives.push_back(box({0.9, 1.9, -1.4}, {0.8, 0.35, 0.5}, 0xe00e, 5.0));
  s.primitives.push_back(box({-0.6, -1.3, -2.7}, {0.7, 0.4, 0.6}, 0xf00f, 5.0));

  if (name == "static_orbit") {
    s.trajectory = SceneSpec::Trajectory::Orbit;
  } else if (name == "rotation_only") {
    s.trajectory = SceneSpec::Trajectory::RotationOnly;
  } else if (name == "one_mover" || name == "two_movers") {
    s.trajectory = SceneSpec::Trajectory::Orbit;
    Primitive mover = box({-0.2, 0.15, 0.8}, {0.46, 0.46, 0.28}, 0x7007, 7.0);
    mover.motion = Primitive::Motion::Linear;
    mover.velocity = {0.3, 0.45, 0.0};
    s.primitives.push_back(mover);
    if (name == "two_movers") {
      Primitive orbiter = sphere({1.1, 0.8, 0.6}, 0.3, 0x8008, 8.0);
      orbiter.motion = Primitive::Motion::Circular;
      orbiter.circle_radius = 0.5;
      orbiter.circle_omega = 2.2;
      s.primitives.push_back(orbiter);
    }
  } else if (name == "forward") {
    s.trajectory = SceneSpec::Trajectory::Forward;
  } else {
    throw ValidationError("unknown preset '" + name +
                          "' (expected static_orbit, rotation_only, one_mover, two_movers, forward)");
  }
  return s;
}

// --- generation -----------------------------------------------------------------

struct GroundTruth {
  io::Dataset dataset;
  std::vector<CameraPose> poses;
  Intrinsics intrinsics;
  std::vector<Image> sceneflow_fwd;  // 3-channel world displacement i -> i+1
  std::vector<Image> sceneflow_bwd;  // i -> i-1, index i-1
  Real disp_scale = 1, disp_shift = 0;
};

// Validates that primitives are pairwise disjoint at t = 0. The room
// (primitive 0) is exempt since it contains everything.
inline void check_disjoint(const SceneSpec& spec) {
  auto overlap = [](const Primitive& a, const Primitive& b) {
    const geom::Vec3 d = geom::sub3(b.center, a.center);
    if (a.kind == Primitive::Kind::Box && b.kind == Primitive::Kind::Box) {
      for (int c = 0; c < 3; ++c)
        if (std::abs(d[static_cast<size_t>(c)]) >= a.half[static_cast<size_t>(c)] + b.half[static_cast<size_t>(c)])
          return false;
      return true;
    }
    if (a.kind == Primitive::Kind::Sphere && b.kind == Primitive::Kind::Sphere)
      return geom::norm3(d) < a.half[0] + b.half[0];
    const Primitive& bx = a.kind == Primitive::Kind::Box ? a : b;
    const Primitive& sp = a.kind == Primitive::Kind::Box ? b : a;
    Real sq = 0;
    for (int c = 0; c < 3; ++c) {
      const Real lo = bx.center[static_cast<size_t>(c)] - bx.half[static_cast<size_t>(c)];
      const Real hi = bx.center[static_cast<size_t>(c)] + bx.half[static_cast<size_t>(c)];
      const Real p = std::clamp(sp.center[static_cast<size_t>(c)], lo, hi) - sp.center[static_cast<size_t>(c)];
      sq += p * p;
    }
    return sq < sp.half[0] * sp.half[0];
  };
  for (size_t i = 1; i < spec.primitives.size(); ++i)
    for (size_t j = i + 1; j < spec.primitives.size(); ++j)
      if (overlap(spec.primitives[i], spec.primitives[j]))
        throw ValidationError("scene spec: primitives " + std::to_string(i) + " and " + std::to_string(j) +
                              " intersect at t=0");
}

inline GroundTruth generate(const SceneSpec& spec) {
  check_disjoint(spec);
  GroundTruth gt;
  gt.intrinsics = Intrinsics::centered(spec.focal, spec.width, spec.height);
  gt.poses = gt_trajectory(spec);
  const int n = spec.n_frames, W = spec.width, H = spec.height;

  Rng rng(spec.seed, 0xd15b);
  gt.disp_scale = rng.uniform(0.5, 2.0);
  gt.disp_shift = rng.uniform(0.05, 0.3);

  io::Dataset& ds = gt.dataset;
  ds.width = W;
  ds.height = H;
  ds.gt_poses = gt.poses;
  ds.gt_intrinsics = gt.intrinsics;

  // Per-frame hits, reused for flow and scene flow.
  std::vector<std::vector<Hit>> hits(static_cast<size_t>(n));

  for (int i = 0; i < n; ++i) {
    const Real time = n > 1 ? static_cast<Real>(i) / (n - 1) : 0.0;
    Image rgb(W, H, 3), depth(W, H, 1), disp(W, H, 1), mmask(W, H, 1);
    hits[static_cast<size_t>(i)].resize(static_cast<size_t>(W) * H);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const geom::Ray ray = geom::generate_ray(gt.poses[static_cast<size_t>(i)], gt.intrinsics,
                                                 x + 0.5, y + 0.5, 0.01, 1e9);
        const Hit h = trace(spec, ray.origin, ray.direction, time);
        DVX_CHECK_MSG(h.valid(), "synthetic ray escaped the room");
        hits[static_cast<size_t>(i)][static_cast<size_t>(y) * W + x] = h;
        const Primitive& prim = spec.primitives[static_cast<size_t>(h.prim)];
        const Vec3 local = geom::sub3(h.point, prim.offset_at(time));
        const Vec3 c = albedo(prim, local);
        for (int ch = 0; ch < 3; ++ch) rgb.at(x, y, ch) = c[static_cast<size_t>(ch)];
        const Real z = geom::camera_depth(h.point, gt.poses[static_cast<size_t>(i)]);
        depth.at(x, y) = z;
        disp.at(x, y) = gt.disp_scale / z + gt.disp_shift;
        mmask.at(x, y) = prim.dynamic() ? 1 : 0;
      }
    ds.frames.push_back(std::move(rgb));
    ds.gt_depth.push_back(std::move(depth));
    ds.disparity.push_back(std::move(disp));
    ds.motion_masks.push_back(std::move(mmask));
  }

  // Exact flow and scene flow from the stored hits. The projection here is
  // written out with explicit matrix math so the geometry-module round trip
  // in the tests exercises an independent path.
  auto project_manual = [&](const Vec3& p, const CameraPose& pose) {
    const auto m = geom::pose_matrix(pose);
    // camera point q = R^T (p - t), with R the upper-left block of m.
    const Vec3 rel{p[0] - m[3], p[1] - m[7], p[2] - m[11]};
    const Vec3 q{m[0] * rel[0] + m[4] * rel[1] + m[8] * rel[2],
                 m[1] * rel[0] + m[5] * rel[1] + m[9] * rel[2],
                 m[2] * rel[0] + m[6] * rel[1] + m[10] * rel[2]};
    return geom::Vec2{gt.intrinsics.cx - gt.intrinsics.focal * q[0] / q[2],
                      gt.intrinsics.cy + gt.intrinsics.focal * q[1] / q[2]};
  };

  auto flow_between = [&](int i, int j) {
    const Real ti = n > 1 ? static_cast<Real>(i) / (n - 1) : 0.0;
    const Real tj = n > 1 ? static_cast<Real>(j) / (n - 1) : 0.0;
    Image flow(W, H, 2);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const Hit& h = hits[static_cast<size_t>(i)][static_cast<size_t>(y) * W + x];
        const Primitive& prim = spec.primitives[static_cast<size_t>(h.prim)];
        const Vec3 moved = geom::add3(h.point, geom::sub3(prim.offset_at(tj), prim.offset_at(ti)));
        const geom::Vec2 uv = project_manual(moved, gt.poses[static_cast<size_t>(j)]);
        flow.at(x, y, 0) = uv[0] - (x + 0.5);
        flow.at(x, y, 1) = uv[1] - (y + 0.5);
      }
    return flow;
  };

  auto sceneflow_between = [&](int i, int j) {
    const Real ti = n > 1 ? static_cast<Real>(i) / (n - 1) : 0.0;
    const Real tj = n > 1 ? static_cast<Real>(j) / (n - 1) : 0.0;
    Image sf(W, H, 3);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const Hit& h = hits[static_cast<size_t>(i)][static_cast<size_t>(y) * W + x];
        const Primitive& prim = spec.primitives[static_cast<size_t>(h.prim)];
        const Vec3 d = geom::sub3(prim.offset_at(tj), prim.offset_at(ti));
        for (int c = 0; c < 3; ++c) sf.at(x, y, c) = d[static_cast<size_t>(c)];
      }
    return sf;
  };

  for (int i = 0; i + 1 < n; ++i) {
    ds.flow_fwd.push_back(flow_between(i, i + 1));
    ds.flow_bwd.push_back(flow_between(i + 1, i));
    gt.sceneflow_fwd.push_back(sceneflow_between(i, i + 1));
    gt.sceneflow_bwd.push_back(sceneflow_between(i + 1, i));
  }
  return gt;
}

// Writes the generated ground truth in the standard dataset layout.
inline void write_dataset(const GroundTruth& gt, const io::fs::path& dir) {
  namespace fs = io::fs;
  for (const char* sub : {"frames", "flow_fwd", "flow_bwd", "disp", "mask", "gt", "gt/depth",
                          "gt/sflow_fwd", "gt/sflow_bwd"})
    fs::create_directories(dir / sub);
  const io::Dataset& ds = gt.dataset;
  const int n = ds.n_frames();
  for (int i = 0; i < n; ++i) {
    io::write_png(dir / "frames" / io::frame_name(i, ".png"), ds.frames[static_cast<size_t>(i)]);
    io::write_pfm(dir / "disp" / io::frame_name(i, ".pfm"), ds.disparity[static_cast<size_t>(i)]);
    io::write_pfm(dir / "gt" / "depth" / io::frame_name(i, ".pfm"), ds.gt_depth[static_cast<size_t>(i)]);
    io::write_png(dir / "mask" / io::frame_name(i, ".png"), ds.motion_masks[static_cast<size_t>(i)]);
  }
  for (int i = 0; i + 1 < n; ++i) {
    io::write_flow(dir / "flow_fwd" / io::frame_name(i, ".flo"), ds.flow_fwd[static_cast<size_t>(i)]);
    io::write_flow(dir / "flow_bwd" / io::frame_name(i + 1, ".flo"), ds.flow_bwd[static_cast<size_t>(i)]);
    io::write_pfm(dir / "gt" / "sflow_fwd" / io::frame_name(i, ".pfm"), gt.sceneflow_fwd[static_cast<size_t>(i)]);
    io::write_pfm(dir / "gt" / "sflow_bwd" / io::frame_name(i + 1, ".pfm"), gt.sceneflow_bwd[static_cast<size_t>(i)]);
  }
  io::write_poses(dir / "gt" / "poses.txt", gt.poses);
  std::ofstream intr(dir / "gt" / "intrinsics.txt");
  intr.precision(17);
  intr << gt.intrinsics.focal << " " << gt.intrinsics.cx << " " << gt.intrinsics.cy << "\n";
}

// --- independent oracle renderer -------------------------------------------------
//
// Naive re-implementation of emission-absorption rendering and the composite,
// with transmittance recomputed from scratch per sample. Shares no code with
// the rendering module.

struct OracleRay {
  std::array<Real, 3> rgb{0, 0, 0};
  std::vector<Real> weights;
  Real opacity = 0;
  Real mask = 0;
};

inline OracleRay oracle_render(const std::vector<Real>& sigma, const std::vector<std::array<Real, 3>>& color,
                               const std::vector<Real>& delta) {
  const size_t n = sigma.size();
  OracleRay out;
  out.weights.assign(n, 0);
  for (size_t i = 0; i < n; ++i) {
    Real acc = 0;
    for (size_t j = 0; j < i; ++j) acc += sigma[j] * delta[j];
    const Real T = std::exp(-acc);
    const Real alpha = 1.0 - std::exp(-sigma[i] * delta[i]);
    out.weights[i] = T * alpha;
    for (int c = 0; c < 3; ++c) out.rgb[static_cast<size_t>(c)] += T * alpha * color[i][static_cast<size_t>(c)];
    out.opacity += T * alpha;
  }
  return out;
}

inline OracleRay oracle_composite(const std::vector<Real>& sigma_s,
                                  const std::vector<std::array<Real, 3>>& color_s,
                                  const std::vector<Real>& sigma_d,
                                  const std::vector<std::array<Real, 3>>& color_d,
                                  const std::vector<Real>& m, const std::vector<Real>& delta) {
  const size_t n = sigma_s.size();
  OracleRay out;
  out.weights.assign(n, 0);
  for (size_t i = 0; i < n; ++i) {
    Real T = 1;
    for (size_t j = 0; j < i; ++j) {
      const Real as = 1.0 - std::exp(-sigma_s[j] * delta[j]);
      const Real ad = 1.0 - std::exp(-sigma_d[j] * delta[j]);
      T *= 1.0 - (m[j] * ad + (1.0 - m[j]) * as);
    }
    const Real as = 1.0 - std::exp(-sigma_s[i] * delta[i]);
    const Real ad = 1.0 - std::exp(-sigma_d[i] * delta[i]);
    for (int c = 0; c < 3; ++c)
      out.rgb[static_cast<size_t>(c)] +=
          T * (m[i] * ad * color_d[i][static_cast<size_t>(c)] + (1.0 - m[i]) * as * color_s[i][static_cast<size_t>(c)]);
    out.weights[i] = T * (m[i] * ad + (1.0 - m[i]) * as);
    out.opacity += out.weights[i];
    out.mask += T * ad * m[i];
  }
  return out;
}

// --- image metrics ----------------------------------------------------------------

inline Real psnr(const Image& a, const Image& b) {
  DVX_CHECK(a.same_size(b));
  Real mse = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const Real d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<Real>(a.data.size());
  if (mse == 0) return 99.0;
  return std::min(Real(99.0), 10.0 * std::log10(1.0 / mse));
}

namespace detail {
inline std::vector<Real> gaussian_kernel_11() {
  std::vector<Real> k(11);
  Real sum = 0;
  for (int i = 0; i < 11; ++i) {
    const Real x = i - 5;
    k[static_cast<size_t>(i)] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
    sum += k[static_cast<size_t>(i)];
  }
  for (auto& v : k) v /= sum;
  return k;
}
}  // namespace detail

// SSIM with the standard constants (k1=0.01, k2=0.03, 11x11 Gaussian with
// sigma 1.5, dynamic range 1), averaged over window positions fully inside
// the image and over channels. Separable-filter implementation.
inline Real ssim(const Image& a, const Image& b) {
  DVX_CHECK(a.same_size(b));
  DVX_CHECK_MSG(a.width >= 11 && a.height >= 11, "ssim needs images at least 11x11");
  const auto k = detail::gaussian_kernel_11();
  const Real c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const int W = a.width, H = a.height, C = a.channels;

  auto filter = [&](const std::vector<Real>& src) {
    // Horizontal then vertical pass; output valid region only.
    const int Wv = W - 10, Hv = H - 10;
    std::vector<Real> tmp(static_cast<size_t>(Wv) * H, 0.0);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < Wv; ++x) {
        Real s = 0;
        for (int i = 0; i < 11; ++i) s += k[static_cast<size_t>(i)] * src[static_cast<size_t>(y) * W + x + i];
        tmp[static_cast<size_t>(y) * Wv + x] = s;
      }
    std::vector<Real> out(static_cast<size_t>(Wv) * Hv, 0.0);
    for (int y = 0; y < Hv; ++y)
      for (int x = 0; x < Wv; ++x) {
        Real s = 0;
        for (int i = 0; i < 11; ++i) s += k[static_cast<size_t>(i)] * tmp[static_cast<size_t>(y + i) * Wv + x];
        out[static_cast<size_t>(y) * Wv + x] = s;
      }
    return out;
  };

  Real total = 0;
  for (int c = 0; c < C; ++c) {
    std::vector<Real> pa(static_cast<size_t>(W) * H), pb(static_cast<size_t>(W) * H),
        paa(static_cast<size_t>(W) * H), pbb(static_cast<size_t>(W) * H), pab(static_cast<size_t>(W) * H);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const Real va = a.at(x, y, c), vb = b.at(x, y, c);
        const size_t i = static_cast<size_t>(y) * W + x;
        pa[i] = va;
        pb[i] = vb;
        paa[i] = va * va;
        pbb[i] = vb * vb;
        pab[i] = va * vb;
      }
    const auto mu_a = filter(pa), mu_b = filter(pb), e_aa = filter(paa), e_bb = filter(pbb), e_ab = filter(pab);
    Real acc = 0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
      const Real ma = mu_a[i], mb = mu_b[i];
      const Real va = e_aa[i] - ma * ma;
      const Real vb = e_bb[i] - mb * mb;
      const Real vab = e_ab[i] - ma * mb;
      acc += ((2 * ma * mb + c1) * (2 * vab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total += acc / static_cast<Real>(mu_a.size());
  }
  return total / C;
}

// --- trajectory metrics -------------------------------------------------------------

struct Sim3 {
  Real scale = 1;
  Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();
  Eigen::Vector3d trans = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return scale * (rot * p) + trans; }
};

inline Eigen::Vector3d to_eigen(const Vec3& v) { return {v[0], v[1], v[2]}; }

inline Eigen::Matrix3d rotation_matrix(const CameraPose& p) {
  const auto m = geom::pose_matrix(p);
  Eigen::Matrix3d R;
  R << m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10];
  return R;
}

// Closed-form similarity alignment (Umeyama) mapping est positions onto gt.
// Falls back to identity scale and rotation for degenerate trajectories.
// `fix_scale` gives the se(3) variant (scale forced to 1).
inline Sim3 umeyama_alignment(const std::vector<CameraPose>& est, const std::vector<CameraPose>& gt,
                              bool fix_scale);
inline Sim3 umeyama_alignment(const std::vector<CameraPose>& est, const std::vector<CameraPose>& gt) {
  return umeyama_alignment(est, gt, false);
}
inline Sim3 umeyama_alignment_impl(const std::vector<CameraPose>& est, const std::vector<CameraPose>& gt) {
  // (definition of the unconstrained similarity fit)
  DVX_CHECK_MSG(est.size() == gt.size() && est.size() >= 2, "alignment needs equal-length trajectories (>= 2)");
  const int n = static_cast<int>(est.size());
  Eigen::Vector3d mu_e = Eigen::Vector3d::Zero(), mu_g = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) {
    mu_e += to_eigen(est[static_cast<size_t>(i)].translation);
    mu_g += to_eigen(gt[static_cast<size_t>(i)].translation);
  }
  mu_e /= n;
  mu_g /= n;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  Real var_e = 0;
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d de = to_eigen(est[static_cast<size_t>(i)].translation) - mu_e;
    const Eigen::Vector3d dg = to_eigen(gt[static_cast<size_t>(i)].translation) - mu_g;
    cov += dg * de.transpose();
    var_e += de.squaredNorm();
  }
  cov /= n;
  var_e /= n;

  Sim3 out;
  if (var_e < 1e-18) {  // all estimated positions identical
    out.trans = mu_g - mu_e;
    return out;
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d d = Eigen::Vector3d::Ones();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) d(2) = -1;
  out.rot = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  out.scale = (svd.singularValues().asDiagonal().toDenseMatrix() * d.asDiagonal()).trace() / var_e;
  if (!(out.scale > 0) || !std::isfinite(out.scale)) out.scale = 1;
  out.trans = mu_g - out.scale * (out.rot * mu_e);
  return out;
}

inline Sim3 umeyama_alignment(const std::vector<CameraPose>& est, const std::vector<CameraPose>& gt,
                              bool fix_scale) {
  Sim3 out = umeyama_alignment_impl(est, gt);
  if (fix_scale) {
    out.scale = 1;
    // Recompute the translation for the fixed-scale rotation.
    Eigen::Vector3d mu_e = Eigen::Vector3d::Zero(), mu_g = Eigen::Vector3d::Zero();
    for (size_t i = 0; i < est.size(); ++i) {
      mu_e += to_eigen(est[i].translation);
      mu_g += to_eigen(gt[i].translation);
    }
    mu_e /= static_cast<Real>(est.size());
    mu_g /= static_cast<Real>(gt.size());
    out.trans = mu_g - out.rot * mu_e;
  }
  return out;
}

inline Real ate_with_alignment(const std::vector<CameraPose>& est, const std::vector<CameraPose>& gt,
                               const Sim3& a) {
  Real sq = 0;
  for (size_t i = 0; i < est.size(); ++i)
    sq += (a.apply(to_eigen(est[i].translation)) - to_eigen(gt[i].translation)).squaredNorm();
  return std::sqrt(sq / static_cast<Real>(est.size()));
}

inline Real ate(const std::vector<CameraPose>& est, const std::vector<CameraPose>& gt) {
  return ate_with_alignment(est, gt, umeyama_alignment(est, gt));
}

struct RpeResult {
  Real trans = 0;
  Real rot_deg = 0;
};

// Relative pose error over consecutive frames; the alignment scale is applied
// to the estimated relative translations.
inline RpeResult rpe(const std::vector<CameraPose>& est, const std::vector<CameraPose>& gt, Real scale) {
  DVX_CHECK(est.size() == gt.size() && est.size() >= 2);
  Real sq_t = 0, sq_r = 0;
  const int n = static_cast<int>(est.size());
  for (int i = 0; i + 1 < n; ++i) {
    const Eigen::Matrix3d Re0 = rotation_matrix(est[static_cast<size_t>(i)]);
    const Eigen::Matrix3d Re1 = rotation_matrix(est[static_cast<size_t>(i) + 1]);
    const Eigen::Matrix3d Rg0 = rotation_matrix(gt[static_cast<size_t>(i)]);
    const Eigen::Matrix3d Rg1 = rotation_matrix(gt[static_cast<size_t>(i) + 1]);
    const Eigen::Vector3d te = scale * (Re0.transpose() *
                                        (to_eigen(est[static_cast<size_t>(i) + 1].translation) -
                                         to_eigen(est[static_cast<size_t>(i)].translation)));
    const Eigen::Vector3d tg = Rg0.transpose() * (to_eigen(gt[static_cast<size_t>(i) + 1].translation) -
                                                  to_eigen(gt[static_cast<size_t>(i)].translation));
    const Eigen::Matrix3d Rrel_e = Re0.transpose() * Re1;
    const Eigen::Matrix3d Rrel_g = Rg0.transpose() * Rg1;
    const Eigen::Matrix3d Rerr = Rrel_g.transpose() * Rrel_e;
    const Eigen::Vector3d terr = Rrel_g.transpose() * (te - tg);
    sq_t += terr.squaredNorm();
    // Geodesic angle via atan2(sin, cos): numerically sound near identity,
    // where acos((tr-1)/2) loses half the mantissa.
    const Eigen::Vector3d skew(Rerr(2, 1) - Rerr(1, 2), Rerr(0, 2) - Rerr(2, 0), Rerr(1, 0) - Rerr(0, 1));
    const Real s = 0.5 * skew.norm();
    const Real c = std::clamp((Rerr.trace() - 1.0) / 2.0, -1.0, 1.0);
    const Real ang = std::atan2(s, c);
    sq_r += ang * ang;
  }
  RpeResult out;
  out.trans = std::sqrt(sq_t / (n - 1));
  out.rot_deg = std::sqrt(sq_r / (n - 1)) * 180.0 / M_PI;
  return out;
}

struct TrajectoryMetrics {
  Real ate = 0, rpe_trans = 0, rpe_rot_deg = 0;
};

inline TrajectoryMetrics trajectory_metrics(const std::vector<CameraPose>& est,
                                            const std::vector<CameraPose>& gt) {
  const Sim3 a = umeyama_alignment(est, gt);
  TrajectoryMetrics m;
  m.ate = ate_with_alignment(est, gt, a);
  const RpeResult r = rpe(est, gt, a.scale);
  m.rpe_trans = r.trans;
  m.rpe_rot_deg = r.rot_deg;
  return m;
}

inline Real trajectory_extent(const std::vector<CameraPose>& poses) {
  Real best = 0;
  for (size_t i = 0; i < poses.size(); ++i)
    for (size_t j = i + 1; j < poses.size(); ++j)
      best = std::max(best, geom::norm3(geom::sub3(poses[i].translation, poses[j].translation)));
  return best;
}

}  // namespace dynavox::synth
