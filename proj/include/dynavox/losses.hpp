#pragma once

// Training objectives. Reductions are built from masked sums so that batch
// chunks can be combined exactly: every op here returns an unnormalized sum
// and the callers divide by globally-agreed counts.
//
// Masked rows contribute neither value nor gradient, which is what makes the
// "masked pixels change nothing bit-for-bit" contract hold.

#include "dynavox/diff.hpp"

namespace dynavox::loss {

using diff::Slot;
using diff::Tape;

struct LossWeights {
  Real reproj_s = 0.02;
  Real disp_s = 0.04;
  Real monodepth_s = 0.04;
  Real reproj_d = 0.02;
  Real disp_d = 0.04;
  Real monodepth_d = 0.04;
  Real sceneflow_reg = 0.1;
  Real mask = 0.1;
  Real distortion = 0.01;
  int anneal_horizon = 0;  // steps; 0 disables annealing
};

// Linear decay to a 10% floor.
inline Real anneal(int64_t step, int64_t horizon, Real lambda0) {
  if (horizon <= 0) return lambda0;
  const Real k = 1.0 - static_cast<Real>(step) / static_cast<Real>(horizon);
  return lambda0 * std::max(Real(0.1), k);
}

inline int count_included(const Array& include) {
  int n = 0;
  for (Real v : include.data) n += (v != 0) ? 1 : 0;
  return n;
}

// sum over included rows of sum_c (pred - target)^2
inline Slot masked_sq_sum(Tape& t, Slot pred, const Array& target, const Array& include) {
  const Array& X = t.val(pred);
  const int B = X.dim(0);
  const int C = X.ndim() == 2 ? X.dim(1) : 1;
  DVX_CHECK(target.numel() == X.numel());
  DVX_CHECK(include.numel() == B);
  Real s = 0;
  for (int b = 0; b < B; ++b) {
    if (include[b] == 0) continue;
    for (int c = 0; c < C; ++c) {
      const Real r = X[static_cast<int64_t>(b) * C + c] - target[static_cast<int64_t>(b) * C + c];
      s += r * r;
    }
  }
  Tape::Node nd;
  nd.name = "masked_sq_sum";
  nd.inputs = {pred};
  nd.out.push_back(Array::scalar(s));
  auto tg = std::make_shared<Array>(target);
  auto inc = std::make_shared<Array>(include);
  nd.backward = [tg, inc, B, C](Tape& t, int self) {
    auto& node = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    const Real gv = (*g)[0];
    const Array& X = t.val(node.inputs[0]);
    Array& gX = t.grad_acc(node.inputs[0]);
    for (int b = 0; b < B; ++b) {
      if ((*inc)[b] == 0) continue;
      for (int c = 0; c < C; ++c) {
        const int64_t k = static_cast<int64_t>(b) * C + c;
        gX[k] += gv * 2.0 * (X[k] - (*tg)[k]);
      }
    }
  };
  return {t.add_node(std::move(nd)), 0};
}

// sum over included rows of sum_c |x|; subgradient 0 at exact zeros.
inline Slot masked_abs_sum(Tape& t, Slot x, const Array& include) {
  const Array& X = t.val(x);
  const int B = X.dim(0);
  const int C = X.ndim() == 2 ? X.dim(1) : 1;
  DVX_CHECK(include.numel() == B);
  Real s = 0;
  for (int b = 0; b < B; ++b) {
    if (include[b] == 0) continue;
    for (int c = 0; c < C; ++c) s += std::abs(X[static_cast<int64_t>(b) * C + c]);
  }
  Tape::Node nd;
  nd.name = "masked_abs_sum";
  nd.inputs = {x};
  nd.out.push_back(Array::scalar(s));
  auto inc = std::make_shared<Array>(include);
  nd.backward = [inc, B, C](Tape& t, int self) {
    auto& node = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    const Real gv = (*g)[0];
    const Array& X = t.val(node.inputs[0]);
    Array& gX = t.grad_acc(node.inputs[0]);
    for (int b = 0; b < B; ++b) {
      if ((*inc)[b] == 0) continue;
      for (int c = 0; c < C; ++c) {
        const int64_t k = static_cast<int64_t>(b) * C + c;
        if (X[k] > 0)
          gX[k] += gv;
        else if (X[k] < 0)
          gX[k] -= gv;
      }
    }
  };
  return {t.add_node(std::move(nd)), 0};
}

// Mean squared error over rays where the motion mask is zero (static pixels);
// per-ray, per-channel mean. Zero if no static rays are present.
inline Slot photometric_static(Tape& t, Slot pred, const Array& target, const Array& motion_mask) {
  Array include(motion_mask.shape);
  for (int64_t i = 0; i < motion_mask.numel(); ++i) include[i] = motion_mask[i] == 0 ? 1 : 0;
  const int n = count_included(include);
  if (n == 0) return t.constant_scalar(0);
  const int C = t.val(pred).ndim() == 2 ? t.val(pred).dim(1) : 1;
  return diff::ops::scale(t, masked_sq_sum(t, pred, target, include), 1.0 / (static_cast<Real>(n) * C));
}

// Unmasked mean squared error (dynamic and full-composite photometric terms).
inline Slot photometric_full(Tape& t, Slot pred, const Array& target) {
  const Array& X = t.val(pred);
  const int B = X.dim(0);
  Array include({B}, Real(1));
  const int C = X.ndim() == 2 ? X.dim(1) : 1;
  return diff::ops::scale(t, masked_sq_sum(t, pred, target, include), 1.0 / (static_cast<Real>(B) * C));
}

// --- scale/shift-invariant monocular depth alignment -------------------------

struct SsiStats {
  Real n = 0, sx = 0, sxx = 0, sy = 0, sxy = 0;

  void add(Real x, Real y) {
    n += 1;
    sx += x;
    sxx += x * x;
    sy += y;
    sxy += x * y;
  }
  void merge(const SsiStats& o) {
    n += o.n;
    sx += o.sx;
    sxx += o.sxx;
    sy += o.sy;
    sxy += o.sxy;
  }
};

struct SsiSolution {
  Real s = 0, b = 0;
  int n = 0;
  bool shift_only = false;
};

// Closed-form argmin of sum (s x + b - y)^2; falls back to shift-only
// alignment when the predictions have (numerically) no variance.
inline SsiSolution solve_scale_shift(const SsiStats& st) {
  SsiSolution sol;
  sol.n = static_cast<int>(st.n);
  if (st.n < 2) return sol;
  const Real det = st.n * st.sxx - st.sx * st.sx;
  const Real scale = std::max(Real(1), st.n * st.sxx);
  if (det <= 1e-12 * scale) {
    sol.shift_only = true;
    sol.s = 0;
    sol.b = st.sy / st.n;
    return sol;
  }
  sol.s = (st.n * st.sxy - st.sx * st.sy) / det;
  sol.b = (st.sy - sol.s * st.sx) / st.n;
  return sol;
}

// sum over valid pixels of (s dhat + b - prior)^2 with fixed (s, b). When
// (s, b) solve the least-squares problem, d/d dhat of the *minimized*
// objective equals 2 s (s dhat + b - prior): the first-order terms through
// (s*, b*) vanish at the optimum, so this op is also the exact backward of
// the full scale/shift-invariant loss.
inline Slot affine_residual_sq_sum(Tape& t, Slot dhat, const Array& prior, const Array& valid,
                                   Real s, Real b) {
  const Array& X = t.val(dhat);
  const int B = X.dim(0);
  DVX_CHECK(prior.numel() == B && valid.numel() == B);
  Real total = 0;
  for (int i = 0; i < B; ++i) {
    if (valid[i] == 0) continue;
    const Real r = s * X[i] + b - prior[i];
    total += r * r;
  }
  Tape::Node nd;
  nd.name = "affine_residual_sq_sum";
  nd.inputs = {dhat};
  nd.out.push_back(Array::scalar(total));
  auto pr = std::make_shared<Array>(prior);
  auto va = std::make_shared<Array>(valid);
  nd.backward = [pr, va, s, b, B](Tape& t, int self) {
    auto& node = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    const Real gv = (*g)[0];
    const Array& X = t.val(node.inputs[0]);
    Array& gX = t.grad_acc(node.inputs[0]);
    for (int i = 0; i < B; ++i) {
      if ((*va)[i] == 0) continue;
      gX[i] += gv * 2.0 * s * (s * X[i] + b - (*pr)[i]);
    }
  };
  return {t.add_node(std::move(nd)), 0};
}

struct MonodepthOut {
  Slot loss;  // mean squared residual at the optimal (s, b)
  SsiSolution sol;
};

inline MonodepthOut monodepth_loss(Tape& t, Slot dhat, const Array& prior, const Array& valid) {
  const Array& X = t.val(dhat);
  const int B = X.dim(0);
  SsiStats st;
  for (int i = 0; i < B; ++i)
    if (valid[i] != 0) st.add(X[i], prior[i]);
  const SsiSolution sol = solve_scale_shift(st);
  if (sol.n < 2) return {t.constant_scalar(0), sol};
  Slot sum = affine_residual_sq_sum(t, dhat, prior, valid, sol.s, sol.b);
  return {diff::ops::scale(t, sum, 1.0 / sol.n), sol};
}

// Mean over points of |S_fwd + S_bwd|_1 + |S_fwd|_1 + |S_bwd|_1.
inline Slot scene_flow_reg(Tape& t, Slot s_fwd, Slot s_bwd) {
  const int B = t.val(s_fwd).dim(0);
  DVX_CHECK(t.val(s_bwd).dim(0) == B);
  Array ones({B}, Real(1));
  Slot cyc = diff::ops::add(t, s_fwd, s_bwd);
  Slot total = diff::ops::weighted_sum(
      t,
      {masked_abs_sum(t, cyc, ones), masked_abs_sum(t, s_fwd, ones), masked_abs_sum(t, s_bwd, ones)},
      {1, 1, 1});
  return diff::ops::scale(t, total, 1.0 / B);
}

// Mean L1 between the rendered nonrigidity mask and the prior motion mask.
inline Slot mask_loss(Tape& t, Slot rendered, const Array& prior) {
  const int B = t.val(rendered).dim(0);
  DVX_CHECK(prior.numel() == B);
  Array ones({B}, Real(1));
  Slot diffm = diff::ops::sub(t, rendered, t.constant(prior));
  return diff::ops::scale(t, masked_abs_sum(t, diffm, ones), 1.0 / B);
}

}  // namespace dynavox::loss
