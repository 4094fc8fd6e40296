#pragma once

// Motion-mask generation: fundamental-matrix RANSAC over flow correspondences,
// Sampson-distance maps, thresholding, and fusion with instance masks.
//
// Pixel coordinates are rescaled so the image diagonal measures 1000 before
// any epipolar computation; Sampson thresholds are in those units squared.

#include <optional>

#include <Eigen/Dense>

#include "dynavox/image.hpp"

namespace dynavox::mask {

struct FlowField {
  Image uv;     // 2 channels: displacement in pixels
  Image valid;  // 1 channel, nonzero where the flow is usable

  static FlowField dense(Image flow) {
    DVX_CHECK(flow.channels == 2);
    Image v(flow.width, flow.height, 1, 1);
    return {std::move(flow), std::move(v)};
  }
};

struct Correspondence {
  Eigen::Vector2d a, b;
};

// Rank-2, Frobenius-normalized, sign-canonical fundamental matrix.
struct FundamentalMatrix {
  Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
};

inline FundamentalMatrix canonicalize(Eigen::Matrix3d f) {
  const Real n = f.norm();
  DVX_CHECK_MSG(n > 0, "zero fundamental matrix");
  f /= n;
  int rmax = 0, cmax = 0;
  f.cwiseAbs().maxCoeff(&rmax, &cmax);
  if (f(rmax, cmax) < 0) f = -f;
  return {f};
}

struct EightPointResult {
  FundamentalMatrix f;
  // Set when the linear system has a solution family (e.g. a pure-rotation
  // pair, where translation is unrecoverable). The returned F still zeroes
  // the algebraic residuals of its inputs.
  bool translation_degenerate = false;
};

// Normalized eight-point estimate. Throws on fewer than 8 correspondences;
// returns nullopt on configurations with no usable solution (coincident or
// collinear points).
inline std::optional<EightPointResult> eight_point(const std::vector<Correspondence>& corr) {
  const int n = static_cast<int>(corr.size());
  if (n < 8) throw ValidationError("eight_point: need at least 8 correspondences, got " + std::to_string(n));

  // Coincident / collinear views make the constraint set unusable.
  for (bool second : {false, true}) {
    Eigen::Vector2d c(0, 0);
    for (const auto& p : corr) c += second ? p.b : p.a;
    c /= n;
    Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
    for (const auto& p : corr) {
      const Eigen::Vector2d d = (second ? p.b : p.a) - c;
      cov += d * d.transpose();
    }
    cov /= n;
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(cov);
    if (es.eigenvalues()(1) < 1e-12 || es.eigenvalues()(0) < 1e-12 * es.eigenvalues()(1))
      return std::nullopt;
  }

  // Hartley normalization: centroid to the origin, mean distance sqrt(2).
  auto normalize = [&](bool second) {
    Eigen::Vector2d c(0, 0);
    for (const auto& p : corr) c += second ? p.b : p.a;
    c /= n;
    Real mean_dist = 0;
    for (const auto& p : corr) mean_dist += ((second ? p.b : p.a) - c).norm();
    mean_dist /= n;
    const Real s = mean_dist > 1e-12 ? std::sqrt(2.0) / mean_dist : 1.0;
    Eigen::Matrix3d T = Eigen::Matrix3d::Identity();
    T(0, 0) = s;
    T(1, 1) = s;
    T(0, 2) = -s * c.x();
    T(1, 2) = -s * c.y();
    return T;
  };
  const Eigen::Matrix3d T1 = normalize(false), T2 = normalize(true);

  Eigen::MatrixXd A(n, 9);
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d p1 = T1 * corr[static_cast<size_t>(i)].a.homogeneous();
    const Eigen::Vector3d p2 = T2 * corr[static_cast<size_t>(i)].b.homogeneous();
    A.row(i) << p2.x() * p1.x(), p2.x() * p1.y(), p2.x(), p2.y() * p1.x(), p2.y() * p1.y(), p2.y(),
        p1.x(), p1.y(), 1.0;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();

  EightPointResult out;
  out.translation_degenerate = sv(7) < 1e-10 * std::max(sv(0), Real(1e-300));

  Eigen::Matrix3d F;
  const Eigen::VectorXd f = svd.matrixV().col(8);
  F << f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7), f(8);

  // Rank-2 enforcement.
  Eigen::JacobiSVD<Eigen::Matrix3d> svd3(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d s = svd3.singularValues();
  s(2) = 0;
  F = svd3.matrixU() * s.asDiagonal() * svd3.matrixV().transpose();

  F = T2.transpose() * F * T1;
  if (F.norm() < 1e-300) return std::nullopt;
  out.f = canonicalize(F);
  return out;
}

// First-order geometric (Sampson) distance of a correspondence to the
// epipolar constraint. Returns +inf when the denominator vanishes.
inline Real sampson(const FundamentalMatrix& F, const Eigen::Vector2d& x1,
                    const Eigen::Vector2d& x2) {
  const Eigen::Vector3d l1 = F.m * x1.homogeneous();
  const Eigen::Vector3d l2 = F.m.transpose() * x2.homogeneous();
  const Real num = x2.homogeneous().dot(l1);
  const Real den = l1.x() * l1.x() + l1.y() * l1.y() + l2.x() * l2.x() + l2.y() * l2.y();
  if (den == 0) return std::numeric_limits<Real>::infinity();
  return num * num / den;
}

struct RansacResult {
  FundamentalMatrix f;
  std::vector<char> inliers;
  int inlier_count = 0;
};

// Seeded deterministic RANSAC; the winner is refit on its inliers with the
// eight-point solve. Returns nullopt when consensus stays below 8.
inline std::optional<RansacResult> ransac_fundamental(const std::vector<Correspondence>& corr,
                                                      int iterations, Real inlier_threshold,
                                                      uint64_t seed) {
  const int n = static_cast<int>(corr.size());
  if (n < 8) throw ValidationError("ransac_fundamental: need at least 8 correspondences");
  Rng rng(seed, 0x8a5cf);

  // MSAC scoring: sum of residuals truncated at the inlier threshold. This
  // strongly prefers models that fit their consensus set tightly over
  // compromise models that spread residuals just under the threshold.
  Real best_score = std::numeric_limits<Real>::infinity();
  int best_count = -1;
  FundamentalMatrix best_f;
  std::vector<Correspondence> sample(8);
  std::vector<int> idx(8);
  for (int it = 0; it < iterations; ++it) {
    for (int k = 0; k < 8; ++k) {
      bool fresh = true;
      do {
        idx[static_cast<size_t>(k)] = static_cast<int>(rng.uniform_int(n));
        fresh = true;
        for (int j = 0; j < k; ++j)
          if (idx[static_cast<size_t>(j)] == idx[static_cast<size_t>(k)]) fresh = false;
      } while (!fresh);
      sample[static_cast<size_t>(k)] = corr[static_cast<size_t>(idx[static_cast<size_t>(k)])];
    }
    const auto f = eight_point(sample);
    if (!f) continue;
    Real score = 0;
    int count = 0;
    for (const auto& c : corr) {
      const Real d = sampson(f->f, c.a, c.b);
      score += std::min(d, inlier_threshold);
      count += d < inlier_threshold ? 1 : 0;
    }
    if (score < best_score) {
      best_score = score;
      best_count = count;
      best_f = f->f;
    }
  }
  if (best_count < 8) return std::nullopt;

  std::vector<Correspondence> in;
  for (const auto& c : corr)
    if (sampson(best_f, c.a, c.b) < inlier_threshold) in.push_back(c);
  const auto refit = eight_point(in);
  const FundamentalMatrix final_f = refit ? refit->f : best_f;

  RansacResult res;
  res.f = final_f;
  res.inliers.resize(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    if (sampson(final_f, corr[static_cast<size_t>(i)].a, corr[static_cast<size_t>(i)].b) < inlier_threshold) {
      res.inliers[static_cast<size_t>(i)] = 1;
      ++res.inlier_count;
    }
  }
  if (res.inlier_count < 8) return std::nullopt;
  return res;
}

struct MotionMaskParams {
  Real sampson_threshold = 1.0;  // squared, in diagonal=1000 units
  int dilation_radius = 3;       // pixels
  int ransac_iterations = 500;
  int grid_step = 4;  // RANSAC correspondence subsampling
  uint64_t seed = 0;
};

struct EpipolarMask {
  Image mask;  // 1 = epipolar outlier (likely dynamic)
  bool ransac_ok = false;
};

// Epipolar outlier map for one flow direction.
inline EpipolarMask epipolar_mask(const FlowField& flow, const MotionMaskParams& p) {
  const int W = flow.uv.width, H = flow.uv.height;
  EpipolarMask out{Image(W, H, 1), false};
  const Real diag = std::sqrt(static_cast<Real>(W) * W + static_cast<Real>(H) * H);
  const Real s = 1000.0 / diag;

  std::vector<Correspondence> corr;
  for (int y = 0; y < H; y += p.grid_step)
    for (int x = 0; x < W; x += p.grid_step) {
      if (flow.valid.at(x, y) == 0) continue;
      const Eigen::Vector2d a(s * x, s * y);
      const Eigen::Vector2d b(s * (x + flow.uv.at(x, y, 0)), s * (y + flow.uv.at(x, y, 1)));
      corr.push_back({a, b});
    }
  if (corr.size() < 8) return out;

  const auto res = ransac_fundamental(corr, p.ransac_iterations, p.sampson_threshold, p.seed);
  if (!res) return out;
  out.ransac_ok = true;

  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (flow.valid.at(x, y) == 0) continue;
      const Eigen::Vector2d a(s * x, s * y);
      const Eigen::Vector2d b(s * (x + flow.uv.at(x, y, 0)), s * (y + flow.uv.at(x, y, 1)));
      if (sampson(res->f, a, b) > p.sampson_threshold) out.mask.at(x, y) = 1;
    }
  return out;
}

struct MotionMaskResult {
  Image mask;          // 1 = dynamic
  bool ransac_ok = false;  // false => mask is the instance mask alone
};

// Final mask: dilated epipolar outliers (from whichever flow directions are
// available; a pixel is dynamic if flagged in either) unioned with the
// instance mask. On RANSAC failure the instance mask alone is returned.
inline MotionMaskResult motion_mask(const FlowField* flow_fwd, const FlowField* flow_bwd,
                                    const Image* instance_mask, const MotionMaskParams& p) {
  DVX_CHECK_MSG(flow_fwd || flow_bwd, "motion_mask needs at least one flow direction");
  const Image& ref = flow_fwd ? flow_fwd->uv : flow_bwd->uv;
  Image epi(ref.width, ref.height, 1);
  bool any_ok = false;
  for (const FlowField* f : {flow_fwd, flow_bwd}) {
    if (!f) continue;
    const EpipolarMask em = epipolar_mask(*f, p);
    if (!em.ransac_ok) continue;
    any_ok = true;
    for (size_t i = 0; i < epi.data.size(); ++i)
      if (em.mask.data[i] != 0) epi.data[i] = 1;
  }

  MotionMaskResult out;
  out.ransac_ok = any_ok;
  out.mask = any_ok ? dilate(epi, p.dilation_radius) : Image(ref.width, ref.height, 1);
  if (instance_mask) {
    DVX_CHECK_MSG(instance_mask->width == ref.width && instance_mask->height == ref.height,
                  "instance mask resolution mismatch");
    for (size_t i = 0; i < out.mask.data.size(); ++i)
      if (instance_mask->data[i] != 0) out.mask.data[i] = 1;
  }
  return out;
}

}  // namespace dynavox::mask
