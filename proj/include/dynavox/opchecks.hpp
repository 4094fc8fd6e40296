#pragma once

// Registration of every differentiable op with a sample-input generator, so
// the finite-difference sweep can cover the whole system: elementwise and
// linear primitives, geometry, field sampling, heads, rendering, and losses.

#include "dynavox/losses.hpp"
#include "dynavox/rendering.hpp"
#include "dynavox/tensorfield.hpp"

namespace dynavox::diff {

namespace opchecks_detail {

inline Array rand_array(Rng& rng, std::vector<int> shape, Real lo, Real hi) {
  Array a(std::move(shape));
  for (auto& v : a.data) v = rng.uniform(lo, hi);
  return a;
}

// Keeps |x| away from zero for ops with a kink there.
inline Array rand_away_from_zero(Rng& rng, std::vector<int> shape, Real mag) {
  Array a(std::move(shape));
  for (auto& v : a.data) {
    v = rng.uniform(0.05 * mag, mag);
    if (rng.uniform() < 0.5) v = -v;
  }
  return a;
}

inline geom::Intrinsics check_intrinsics() { return geom::Intrinsics::centered(100.0, 96, 72); }

inline std::vector<int> check_frames() { return {0, 1, 0, 1}; }

inline Array check_pixels(Rng& rng) {
  Array px({4, 2});
  for (int b = 0; b < 4; ++b) {
    px.at(b, 0) = rng.uniform(4.0, 92.0);
    px.at(b, 1) = rng.uniform(4.0, 68.0);
  }
  return px;
}

inline Array rand_poses(Rng& rng) {
  Array p({2, 6});
  for (int64_t i = 0; i < p.numel(); ++i) p[i] = rng.uniform(-0.25, 0.25);
  return p;
}

}  // namespace opchecks_detail

// Idempotent. Call before sweeping the registry.
inline void register_all_ops() {
  using namespace opchecks_detail;
  auto& reg = OpRegistry::instance();
  if (reg.has("add")) return;

  auto add = [&](const char* name,
                 std::function<std::vector<Slot>(Tape&, const std::vector<Slot>&)> build,
                 std::function<std::vector<Array>(Rng&)> gen) {
    reg.add({name, std::move(build), std::move(gen)});
  };

  // --- elementwise / linear primitives ---
  add("add", [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::add(t, in[0], in[1])}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 4}, -1, 1), rand_array(r, {3, 4}, -1, 1)}; });
  add("sub", [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::sub(t, in[0], in[1])}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 4}, -1, 1), rand_array(r, {3, 4}, -1, 1)}; });
  add("mul", [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::mul(t, in[0], in[1])}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 4}, -1, 1), rand_array(r, {3, 4}, -1, 1)}; });
  add("scale", [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::scale(t, in[0], 1.7)}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {5}, -1, 1)}; });
  add("sum", [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::sum(t, in[0])}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {7}, -1, 1)}; });
  add("matmul",
      [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::matmul(t, in[0], in[1])}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 4}, -1, 1), rand_array(r, {4, 2}, -1, 1)}; });
  add("add_row",
      [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::add_row(t, in[0], in[1])}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 4}, -1, 1), rand_array(r, {4}, -1, 1)}; });
  add("relu", [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::relu(t, in[0])}; },
      [](Rng& r) { return std::vector<Array>{rand_away_from_zero(r, {3, 4}, 1.0)}; });
  add("sigmoid", [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::sigmoid(t, in[0])}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 4}, -3, 3)}; });
  add("softplus", [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::softplus(t, in[0])}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 4}, -3, 3)}; });
  add("tanh", [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::tanh_op(t, in[0])}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 4}, -2, 2)}; });
  add("posenc",
      [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::posenc(t, in[0], 3, true)}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 2}, -1, 1)}; });
  add("concat_cols",
      [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::concat_cols(t, {in[0], in[1]})}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 2}, -1, 1), rand_array(r, {3, 3}, -1, 1)}; });
  add("slice_cols",
      [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::slice_cols(t, in[0], 1, 3)}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 4}, -1, 1)}; });
  add("repeat_rows",
      [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::repeat_rows(t, in[0], 3)}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {2, 3}, -1, 1)}; });
  add("row_sum", [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::row_sum(t, in[0])}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 4}, -1, 1)}; });
  add("scale_cols",
      [](Tape& t, const std::vector<Slot>& in) {
        return std::vector<Slot>{ops::scale_cols(t, in[0], {0.5, -1.5, 2.0})};
      },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {4, 3}, -1, 1)}; });
  add("reshape",
      [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::reshape(t, in[0], {2, 6})}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 4}, -1, 1)}; });
  add("recip_clamped",
      [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{ops::recip_clamped(t, in[0], 1e-6)}; },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {5}, 0.2, 3.0)}; });

  // --- geometry ---
  add("geom.pose_to_rays",
      [](Tape& t, const std::vector<Slot>& in) {
        Rng pr(41);
        auto rays = geom::ops::pose_to_rays(t, in[0], in[1], check_frames(), check_pixels(pr), check_intrinsics());
        return std::vector<Slot>{rays.origins, rays.dirs};
      },
      [](Rng& r) { return std::vector<Array>{rand_poses(r), rand_array(r, {1}, -0.2, 0.2)}; });
  add("geom.project_points",
      [](Tape& t, const std::vector<Slot>& in) {
        auto proj = geom::ops::project_points(t, in[0], in[1], in[2], check_frames(), check_intrinsics());
        return std::vector<Slot>{proj.uv, proj.depth};
      },
      [](Rng& r) {
        Array pts({4, 3});
        for (int b = 0; b < 4; ++b) {
          pts.at(b, 0) = r.uniform(-0.5, 0.5);
          pts.at(b, 1) = r.uniform(-0.5, 0.5);
          pts.at(b, 2) = r.uniform(-4.0, -2.0);  // in front of near-identity cameras
        }
        return std::vector<Array>{pts, rand_poses(r), rand_array(r, {1}, -0.2, 0.2)};
      });
  add("geom.ndc_warp_rays",
      [](Tape& t, const std::vector<Slot>& in) {
        auto ndc = geom::ops::ndc_warp_rays(t, in[0], in[1], in[2], 1.0, check_intrinsics());
        return std::vector<Slot>{ndc.origins, ndc.dirs};
      },
      [](Rng& r) {
        Array o({4, 3}), d({4, 3});
        for (int b = 0; b < 4; ++b) {
          o.at(b, 0) = r.uniform(-0.3, 0.3);
          o.at(b, 1) = r.uniform(-0.3, 0.3);
          o.at(b, 2) = r.uniform(-0.2, 0.2);
          d.at(b, 0) = r.uniform(-0.3, 0.3);
          d.at(b, 1) = r.uniform(-0.3, 0.3);
          d.at(b, 2) = r.uniform(-1.2, -0.8);  // forward-facing
        }
        return std::vector<Array>{o, d, rand_array(r, {1}, -0.2, 0.2)};
      });
  add("geom.ndc_unmap_points",
      [](Tape& t, const std::vector<Slot>& in) {
        return std::vector<Slot>{geom::ops::ndc_unmap_points(t, in[0], in[1], 1.0, check_intrinsics())};
      },
      [](Rng& r) {
        Array p({4, 3});
        for (int b = 0; b < 4; ++b) {
          p.at(b, 0) = r.uniform(-0.8, 0.8);
          p.at(b, 1) = r.uniform(-0.8, 0.8);
          p.at(b, 2) = r.uniform(-0.9, 0.8);
        }
        return std::vector<Array>{p, rand_array(r, {1}, -0.2, 0.2)};
      });
  add("geom.contract_points",
      [](Tape& t, const std::vector<Slot>& in) { return std::vector<Slot>{geom::ops::contract_points(t, in[0])}; },
      [](Rng& r) {
        Array p({6, 3});
        for (int b = 0; b < 6; ++b) {
          const Real scale = r.uniform(0.2, 3.0);
          geom::Vec3 dir{r.uniform(-1, 1), r.uniform(-1, 1), r.uniform(-1, 1)};
          dir = geom::normalized3(dir);
          for (int c = 0; c < 3; ++c) p.at(b, c) = scale * dir[static_cast<size_t>(c)];
        }
        return std::vector<Array>{p};
      });
  add("geom.ray_points",
      [](Tape& t, const std::vector<Slot>& in) {
        Rng pr(17);
        Array dist({3, 4});
        for (int b = 0; b < 3; ++b) {
          Real acc = 0.5;
          for (int i = 0; i < 4; ++i) {
            acc += pr.uniform(0.1, 0.5);
            dist.at(b, i) = acc;
          }
        }
        return std::vector<Slot>{geom::ops::ray_points(t, in[0], in[1], dist)};
      },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 3}, -1, 1), rand_array(r, {3, 3}, -1, 1)}; });
  add("geom.ray_deltas",
      [](Tape& t, const std::vector<Slot>& in) {
        Rng pr(19);
        Array dt({3, 4});
        for (int64_t i = 0; i < dt.numel(); ++i) dt[i] = pr.uniform(0.05, 0.3);
        return std::vector<Slot>{geom::ops::ray_deltas(t, in[0], dt)};
      },
      [](Rng& r) { return std::vector<Array>{rand_away_from_zero(r, {3, 3}, 1.0)}; });

  // --- field sampling and heads ---
  add("field.vm_sample",
      [](Tape& t, const std::vector<Slot>& in) {
        const std::array<int, 3> res{5, 6, 7};
        field::BoundingBox box{{-1, -1, -1}, {1, 1, 1}};
        auto out = field::vm_sample_slots(t, 2, res, box, {in[1], in[2], in[3]}, {in[4], in[5], in[6]}, in[0]);
        return std::vector<Slot>{out.features};
      },
      [](Rng& r) {
        // Positions strictly inside, away from grid planes.
        Array xyz({5, 3});
        for (int64_t i = 0; i < xyz.numel(); ++i) xyz[i] = r.uniform(-0.85, 0.85);
        return std::vector<Array>{xyz,
                                  rand_array(r, {2, 6, 7}, -1, 1), rand_array(r, {2, 5, 7}, -1, 1),
                                  rand_array(r, {2, 5, 6}, -1, 1), rand_array(r, {2, 5}, -1, 1),
                                  rand_array(r, {2, 6}, -1, 1), rand_array(r, {2, 7}, -1, 1)};
      });
  add("field.static_density",
      [](Tape& t, const std::vector<Slot>& in) {
        return std::vector<Slot>{field::static_density(t, in[0], -2.0)};
      },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {4, 6}, -1, 1)}; });
  add("field.color_head",
      [](Tape& t, const std::vector<Slot>& in) {
        static const field::ColorHead head = [] {
          Rng hr(101);
          return field::ColorHead::make("check.color", 6, 8, 2, hr);
        }();
        return std::vector<Slot>{head.forward(t, in[0], in[1])};
      },
      [](Rng& r) {
        Array dirs({3, 3});
        for (int b = 0; b < 3; ++b) {
          geom::Vec3 d{r.uniform(-1, 1), r.uniform(-1, 1), r.uniform(-1, 1)};
          d = geom::normalized3(d);
          for (int c = 0; c < 3; ++c) dirs.at(b, c) = d[static_cast<size_t>(c)];
        }
        return std::vector<Array>{rand_array(r, {3, 6}, -1, 1), dirs};
      });
  add("field.deform",
      [](Tape& t, const std::vector<Slot>& in) {
        static const field::DeformHead head = [] {
          Rng hr(102);
          field::DeformHead h = field::DeformHead::make("check.deform", 8, 2, 2, 2, {0.5, 0.5, 0.5}, hr);
          // Perturb the zero-initialized output layer so the path is active.
          for (auto& v : h.mlp.weights.back()->values.data) v = hr.uniform(-0.3, 0.3);
          return h;
        }();
        return std::vector<Slot>{head.deform(t, in[0], in[1])};
      },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 3}, -0.9, 0.9), rand_array(r, {3, 1}, 0.05, 0.95)}; });
  add("field.time_heads",
      [](Tape& t, const std::vector<Slot>& in) {
        static const field::TimeHeads heads = [] {
          Rng hr(103);
          return field::TimeHeads::make("check.time", 6, 6, 8, 2, -2.0, -1.0, hr);
        }();
        auto out = heads.forward(t, in[0], in[1], in[2]);
        return std::vector<Slot>{out.sigma, out.rgb, out.mask};
      },
      [](Rng& r) {
        return std::vector<Array>{rand_array(r, {3, 6}, -1, 1), rand_array(r, {3, 6}, -1, 1),
                                  rand_array(r, {3, 1}, 0.05, 0.95)};
      });
  add("field.scene_flow",
      [](Tape& t, const std::vector<Slot>& in) {
        static const field::SceneFlowHead head = [] {
          Rng hr(104);
          field::SceneFlowHead h = field::SceneFlowHead::make("check.sf", 8, 2, 2, 2, 0.5, hr);
          for (auto& v : h.mlp.weights.back()->values.data) v = hr.uniform(-0.3, 0.3);
          return h;
        }();
        auto out = head.forward(t, in[0], in[1]);
        return std::vector<Slot>{out.fwd, out.bwd};
      },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {3, 3}, -1, 1), rand_array(r, {3, 1}, 0.05, 0.95)}; });

  // --- rendering ---
  add("render.volume_render",
      [](Tape& t, const std::vector<Slot>& in) {
        auto out = render::volume_render(t, in[0], in[1], in[2]);
        return std::vector<Slot>{out.rgb, out.weights, out.opacity};
      },
      [](Rng& r) {
        return std::vector<Array>{rand_array(r, {2, 8}, 0.0, 4.0), rand_array(r, {16, 3}, 0.05, 0.95),
                                  rand_array(r, {2, 8}, 0.02, 0.3)};
      });
  add("render.composite_render",
      [](Tape& t, const std::vector<Slot>& in) {
        auto out = render::composite_render(t, in[0], in[1], in[2], in[3], in[4], in[5], in[6]);
        return std::vector<Slot>{out.rgb, out.weights, out.mask, out.opacity};
      },
      [](Rng& r) {
        return std::vector<Array>{rand_array(r, {2, 6}, 0.0, 4.0), rand_array(r, {12, 3}, 0.05, 0.95),
                                  rand_array(r, {2, 6}, 0.0, 4.0), rand_array(r, {12, 3}, 0.05, 0.95),
                                  rand_array(r, {2, 6}, 0.05, 0.95), rand_array(r, {2, 6}, 0.02, 0.3),
                                  rand_array(r, {2, 6}, 0.02, 0.3)};
      });
  add("render.weight_average",
      [](Tape& t, const std::vector<Slot>& in) {
        return std::vector<Slot>{render::weight_average(t, in[0], in[1])};
      },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {2, 5}, 0.05, 1.0), rand_array(r, {10, 3}, -2, 2)}; });
  add("render.distortion",
      [](Tape& t, const std::vector<Slot>& in) {
        Rng pr(23);
        const int B = 2, N = 6;
        Array smid({B, N}), ds({B, N});
        for (int b = 0; b < B; ++b) {
          Real acc = 0;
          for (int i = 0; i < N; ++i) {
            ds.at(b, i) = 1.0 / N;
            smid.at(b, i) = acc + 0.5 / N;
            acc += 1.0 / N;
          }
        }
        return std::vector<Slot>{render::distortion(t, in[0], smid, ds)};
      },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {2, 6}, 0.0, 0.3)}; });

  // --- losses ---
  add("loss.masked_sq_sum",
      [](Tape& t, const std::vector<Slot>& in) {
        Rng pr(29);
        Array target = rand_array(pr, {4, 3}, 0, 1);
        Array inc({4});
        inc[0] = inc[2] = inc[3] = 1;
        return std::vector<Slot>{loss::masked_sq_sum(t, in[0], target, inc)};
      },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {4, 3}, 0, 1)}; });
  add("loss.masked_abs_sum",
      [](Tape& t, const std::vector<Slot>& in) {
        Array inc({4}, Real(1));
        inc[1] = 0;
        return std::vector<Slot>{loss::masked_abs_sum(t, in[0], inc)};
      },
      [](Rng& r) { return std::vector<Array>{rand_away_from_zero(r, {4, 2}, 1.0)}; });
  add("loss.monodepth",
      [](Tape& t, const std::vector<Slot>& in) {
        Rng pr(31);
        Array prior({6}), valid({6}, Real(1));
        for (int i = 0; i < 6; ++i) prior[i] = pr.uniform(0.2, 2.0);
        valid[4] = 0;
        return std::vector<Slot>{loss::monodepth_loss(t, in[0], prior, valid).loss};
      },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {6}, 0.3, 2.5)}; });
  add("loss.scene_flow_reg",
      [](Tape& t, const std::vector<Slot>& in) {
        return std::vector<Slot>{loss::scene_flow_reg(t, in[0], in[1])};
      },
      [](Rng& r) {
        return std::vector<Array>{rand_away_from_zero(r, {4, 3}, 0.5), rand_away_from_zero(r, {4, 3}, 0.5)};
      });
  add("loss.mask",
      [](Tape& t, const std::vector<Slot>& in) {
        Rng pr(37);
        Array prior({5});
        for (int i = 0; i < 5; ++i) prior[i] = pr.uniform() < 0.5 ? 0.0 : 1.0;
        return std::vector<Slot>{loss::mask_loss(t, in[0], prior)};
      },
      [](Rng& r) { return std::vector<Array>{rand_array(r, {5}, 0.05, 0.95)}; });
}

// Sweeps every registered op at `points` random valid inputs; returns the
// worst (op, error) pair.
struct SweepResult {
  Real max_rel_err = 0;
  std::string worst_op;
};

inline SweepResult sweep_all_ops(int points, Real h, uint64_t seed) {
  register_all_ops();
  SweepResult out;
  for (const std::string& name : OpRegistry::instance().names()) {
    const OpCheckSpec& spec = OpRegistry::instance().get(name);
    for (int k = 0; k < points; ++k) {
      Rng rng(seed, splitmix64(static_cast<uint64_t>(k) + 1000));
      auto inputs = spec.sample_inputs(rng);
      const GradCheckResult res = check_gradients(name, std::move(inputs), h);
      if (res.max_rel_err > out.max_rel_err) {
        out.max_rel_err = res.max_rel_err;
        out.worst_op = name;
      }
    }
  }
  return out;
}

}  // namespace dynavox::diff
