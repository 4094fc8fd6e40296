#pragma once

// Joint optimization of camera poses, shared focal length, and the static and
// dynamic voxel fields. Orchestrates ray batching, the coarse-to-fine
// schedule, per-branch loss assembly, the gradient stop between the dynamic
// branch and the poses, and checkpointing.

#include <thread>

#include "dynavox/dataio.hpp"
#include "dynavox/losses.hpp"
#include "dynavox/rendering.hpp"
#include "dynavox/synthval.hpp"
#include "dynavox/tensorfield.hpp"

namespace dynavox::train {

using diff::Parameter;
using diff::Slot;
using diff::Tape;
using io::TrainConfig;

// --- model -------------------------------------------------------------------

struct Model {
  TrainConfig cfg;
  geom::Intrinsics base;  // focal holds f0; the optimized focal is f0*exp(logf)
  int n_frames = 0;
  field::BoundingBox box;

  std::unique_ptr<Parameter> poses;  // [F,6]: axis-angle, translation
  std::unique_ptr<Parameter> logf;   // [1]
  field::TensorField static_field, dynamic_field;
  field::ColorHead color_head;
  field::DeformHead deform_head;
  field::TimeHeads time_heads;
  field::SceneFlowHead sceneflow_head;

  Real focal() const { return base.focal * std::exp(logf->values[0]); }

  geom::CameraPose pose_of(int frame) const {
    geom::CameraPose p;
    p.rotation = {poses->values.at(frame, 0), poses->values.at(frame, 1), poses->values.at(frame, 2)};
    p.translation = {poses->values.at(frame, 3), poses->values.at(frame, 4), poses->values.at(frame, 5)};
    p.frame_index = frame;
    return p;
  }

  std::vector<geom::CameraPose> all_poses() const {
    std::vector<geom::CameraPose> out;
    for (int i = 0; i < n_frames; ++i) out.push_back(pose_of(i));
    return out;
  }

  std::vector<std::pair<std::string, Parameter*>> named_params() const {
    std::vector<std::pair<std::string, Parameter*>> out;
    out.emplace_back("poses", poses.get());
    out.emplace_back("logf", logf.get());
    for (Parameter* p : static_field.parameters()) out.emplace_back(p->tag, p);
    for (Parameter* p : dynamic_field.parameters()) out.emplace_back(p->tag, p);
    for (Parameter* p : color_head.parameters()) out.emplace_back(p->tag, p);
    for (Parameter* p : deform_head.parameters()) out.emplace_back(p->tag, p);
    for (Parameter* p : time_heads.parameters()) out.emplace_back(p->tag, p);
    for (Parameter* p : sceneflow_head.parameters()) out.emplace_back(p->tag, p);
    return out;
  }
};

inline field::BoundingBox box_for(const std::string& parameterization) {
  if (parameterization == "ndc") return {{-1, -1, -1}, {1, 1, 1}};
  return {{-2, -2, -2}, {2, 2, 2}};  // contraction ball fits in [-2,2]^3
}

inline std::array<int, 3> cube(int n) { return {n, n, n}; }

inline Model make_model(const TrainConfig& cfg, int width, int height, int n_frames,
                        std::array<int, 3> static_res, std::array<int, 3> dynamic_res) {
  Model m;
  m.cfg = cfg;
  m.base = geom::Intrinsics::centered(static_cast<Real>(std::max(width, height)), width, height);
  m.n_frames = n_frames;
  m.box = box_for(cfg.parameterization);
  m.poses = std::make_unique<Parameter>("poses", Array({n_frames, 6}));
  m.logf = std::make_unique<Parameter>("logf", Array({1}));

  Rng rng(cfg.seed, 0xf1e1d);
  m.static_field = field::make_field("static", static_res, m.box, cfg.density_rank,
                                     cfg.appearance_rank, cfg.init_scale, rng);
  m.dynamic_field = field::make_field("dynamic", dynamic_res, m.box, cfg.density_rank,
                                      cfg.appearance_rank, cfg.init_scale, rng);
  m.color_head = field::ColorHead::make("heads.color", m.static_field.appearance.feature_dim(),
                                        cfg.color_width, cfg.view_enc_levels, rng);
  const geom::Vec3 ext = m.box.extent();
  m.deform_head = field::DeformHead::make(
      "heads.deform", cfg.deform_width, cfg.deform_depth, cfg.pos_enc_levels, cfg.time_enc_levels,
      {cfg.deform_max_disp * ext[0], cfg.deform_max_disp * ext[1], cfg.deform_max_disp * ext[2]}, rng);
  m.time_heads = field::TimeHeads::make("heads.time", m.dynamic_field.density.feature_dim(),
                                        m.dynamic_field.appearance.feature_dim(), cfg.time_head_width,
                                        cfg.time_enc_levels, cfg.density_shift, cfg.mask_head_bias, rng);
  m.sceneflow_head = field::SceneFlowHead::make("heads.sceneflow", cfg.sceneflow_width,
                                                cfg.sceneflow_depth, cfg.pos_enc_levels,
                                                cfg.time_enc_levels, cfg.sceneflow_max_disp, rng);
  return m;
}

inline Model make_model(const TrainConfig& cfg, int width, int height, int n_frames) {
  return make_model(cfg, width, height, n_frames, cube(cfg.static_resolutions.front()),
                    cube(cfg.dynamic_resolutions.front()));
}

inline io::Checkpoint to_checkpoint(const Model& m, int64_t step) {
  io::Checkpoint ck;
  ck.cfg_text = io::config_text(m.cfg);
  ck.cfg_hash = io::config_hash(m.cfg);
  ck.step = step;
  ck.n_frames = m.n_frames;
  ck.width = m.base.width;
  ck.height = m.base.height;
  ck.focal_base = m.base.focal;
  for (const auto& [name, p] : m.named_params()) ck.tensors.emplace_back(name, p->values);
  return ck;
}

inline Model from_checkpoint(const io::Checkpoint& ck) {
  const TrainConfig cfg = io::parse_config_text(ck.cfg_text);
  // Field resolutions are recovered from the stored line factors so a
  // checkpoint taken after upsampling loads correctly.
  auto res_of = [&](const std::string& prefix) {
    std::array<int, 3> r{};
    for (int a = 0; a < 3; ++a) {
      const Array* line = ck.find(prefix + ".den.line" + std::to_string(a));
      DVX_CHECK_MSG(line, "checkpoint missing tensor " + prefix + ".den.line" + std::to_string(a));
      r[static_cast<size_t>(a)] = line->dim(1);
    }
    return r;
  };
  Model m = make_model(cfg, ck.width, ck.height, ck.n_frames, res_of("static"), res_of("dynamic"));
  for (auto& [name, p] : m.named_params()) {
    const Array* a = ck.find(name);
    DVX_CHECK_MSG(a, "checkpoint missing tensor " + name);
    DVX_CHECK_MSG(a->shape == p->values.shape, "checkpoint tensor " + name + " has shape " +
                                                   shape_str(a->shape) + ", expected " +
                                                   shape_str(p->values.shape));
    p->values = *a;
  }
  return m;
}

// --- ray batches ---------------------------------------------------------------

struct RayBatch {
  int size = 0;
  std::vector<int> frames;
  Array pixels;       // [B,2] pixel centers
  Array target_rgb;   // [B,3]
  Array motion_mask;  // [B] 1 = dynamic
  Array static_include;  // [B] 1 - motion_mask
  Array prior_disp;   // [B]
  Array times;        // [B,1]

  // Flow correspondences; per direction dir=0 forward (j=i+1), dir=1 backward.
  std::array<std::vector<int>, 2> frames_j;
  std::array<Array, 2> corr_pixel;  // [B,2] pixel + flow (target, in pixels)
  std::array<Array, 2> has_dir;     // [B]
};

// Uniform over (frame, pixel) with a guaranteed fraction of static pixels
// when the masks provide them. Holdout frames are never sampled.
inline RayBatch sample_rays(const io::Dataset& ds, int batch, Rng& rng, Real static_frac,
                            const std::vector<int>& holdout) {
  std::vector<int> usable;
  for (int i = 0; i < ds.n_frames(); ++i)
    if (std::find(holdout.begin(), holdout.end(), i) == holdout.end()) usable.push_back(i);
  DVX_CHECK_MSG(!usable.empty(), "all frames held out");
  auto held = [&](int f) { return std::find(holdout.begin(), holdout.end(), f) != holdout.end(); };

  RayBatch b;
  b.size = batch;
  b.frames.resize(static_cast<size_t>(batch));
  b.pixels = Array({batch, 2});
  b.target_rgb = Array({batch, 3});
  b.motion_mask = Array({batch});
  b.static_include = Array({batch});
  b.prior_disp = Array({batch});
  b.times = Array({batch, 1});
  for (int d = 0; d < 2; ++d) {
    b.frames_j[static_cast<size_t>(d)].assign(static_cast<size_t>(batch), 0);
    b.corr_pixel[static_cast<size_t>(d)] = Array({batch, 2});
    b.has_dir[static_cast<size_t>(d)] = Array({batch});
  }

  const int n_static = static_cast<int>(std::floor(static_frac * batch));
  for (int k = 0; k < batch; ++k) {
    int f = 0, x = 0, y = 0;
    for (int attempt = 0; attempt < 100; ++attempt) {
      f = usable[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(usable.size())))];
      x = static_cast<int>(rng.uniform_int(ds.width));
      y = static_cast<int>(rng.uniform_int(ds.height));
      if (k >= n_static || ds.motion_masks[static_cast<size_t>(f)].at(x, y) == 0) break;
    }
    b.frames[static_cast<size_t>(k)] = f;
    b.pixels.at(k, 0) = x + 0.5;
    b.pixels.at(k, 1) = y + 0.5;
    for (int c = 0; c < 3; ++c) b.target_rgb.at(k, c) = ds.frames[static_cast<size_t>(f)].at(x, y, c);
    const Real m = ds.motion_masks[static_cast<size_t>(f)].at(x, y);
    b.motion_mask[k] = m;
    b.static_include[k] = m == 0 ? 1 : 0;
    b.prior_disp[k] = ds.disparity[static_cast<size_t>(f)].at(x, y);
    b.times.at(k, 0) = ds.time_of(f);

    // forward: flow f -> f+1 lives at flow_fwd[f]
    if (f + 1 < ds.n_frames() && !held(f + 1)) {
      b.frames_j[0][static_cast<size_t>(k)] = f + 1;
      b.has_dir[0][k] = 1;
      b.corr_pixel[0].at(k, 0) = x + 0.5 + ds.flow_fwd[static_cast<size_t>(f)].at(x, y, 0);
      b.corr_pixel[0].at(k, 1) = y + 0.5 + ds.flow_fwd[static_cast<size_t>(f)].at(x, y, 1);
    }
    // backward: flow f -> f-1 lives at flow_bwd[f-1]
    if (f - 1 >= 0 && !held(f - 1)) {
      b.frames_j[1][static_cast<size_t>(k)] = f - 1;
      b.has_dir[1][k] = 1;
      b.corr_pixel[1].at(k, 0) = x + 0.5 + ds.flow_bwd[static_cast<size_t>(f - 1)].at(x, y, 0);
      b.corr_pixel[1].at(k, 1) = y + 0.5 + ds.flow_bwd[static_cast<size_t>(f - 1)].at(x, y, 1);
    }
  }
  return b;
}

inline RayBatch slice_batch(const RayBatch& b, int lo, int hi) {
  RayBatch out;
  const int n = hi - lo;
  out.size = n;
  out.frames.assign(b.frames.begin() + lo, b.frames.begin() + hi);
  auto slice2 = [&](const Array& a) {
    const int C = a.dim(1);
    Array s({n, C});
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < C; ++c) s.at(i, c) = a.at(lo + i, c);
    return s;
  };
  auto slice1 = [&](const Array& a) {
    Array s({n});
    for (int i = 0; i < n; ++i) s[i] = a[lo + i];
    return s;
  };
  out.pixels = slice2(b.pixels);
  out.target_rgb = slice2(b.target_rgb);
  out.motion_mask = slice1(b.motion_mask);
  out.static_include = slice1(b.static_include);
  out.prior_disp = slice1(b.prior_disp);
  out.times = slice2(b.times);
  for (int d = 0; d < 2; ++d) {
    out.frames_j[static_cast<size_t>(d)].assign(b.frames_j[static_cast<size_t>(d)].begin() + lo,
                                                b.frames_j[static_cast<size_t>(d)].begin() + hi);
    out.corr_pixel[static_cast<size_t>(d)] = slice2(b.corr_pixel[static_cast<size_t>(d)]);
    out.has_dir[static_cast<size_t>(d)] = slice1(b.has_dir[static_cast<size_t>(d)]);
  }
  return out;
}

inline render::SampleGrid slice_grid(const render::SampleGrid& g, int lo, int hi) {
  const int n = hi - lo, N = g.dist.dim(1);
  render::SampleGrid out{Array({n, N}), Array({n, N}), Array({n, N})};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < N; ++j) {
      out.dist.at(i, j) = g.dist.at(lo + i, j);
      out.dt.at(i, j) = g.dt.at(lo + i, j);
      out.s_mid.at(i, j) = g.s_mid.at(lo + i, j);
    }
  return out;
}

// --- forward graph ---------------------------------------------------------------

struct StaticBranch {
  Slot positions_world;  // [B*N,3], pose-connected
  Slot sigma;            // [B,N]
  Slot rgb;              // [B*N,3]
  Slot delta;            // [B,N]
  render::RenderOut out;
  Slot surface;          // [B,3] world
};

struct DynamicBranch {
  Slot positions_world_detached;
  Slot sigma;  // [B,N]
  Slot rgb;    // [B*N,3]
  Slot mask_per_sample;  // [B,N]
  Slot delta;            // [B,N], detached
  render::RenderOut out;           // dynamic-only render
  render::CompositeOut composite;  // blended with the static branch
  // Value-identical to composite.mask, but with the static inputs detached:
  // the Eq. 9 supervision belongs to the dynamic loss group, so it must not
  // reach the poses through the shared transmittance.
  Slot mask_render_detached;
  Slot surface;  // [B,3] world, pose-detached
  Slot poses_detached, logf_detached;
};

// Positions/coords plumbing shared by the primary and correspondence rays.
struct RayGeometry {
  Slot origins, dirs;        // world, unit
  Slot positions_world;      // [B*N,3]
  Slot field_coords;         // [B*N,3] in the sample-space box
  Slot delta;                // [B,N]
};

inline RayGeometry build_ray_geometry(Tape& t, const Model& m, Slot poses, Slot logf,
                                      const std::vector<int>& frames, const Array& pixels,
                                      const render::SampleGrid& grid) {
  RayGeometry g;
  auto rays = geom::ops::pose_to_rays(t, poses, logf, frames, pixels, m.base);
  g.origins = rays.origins;
  g.dirs = rays.dirs;
  if (m.cfg.parameterization == "ndc") {
    auto ndc = geom::ops::ndc_warp_rays(t, rays.origins, rays.dirs, logf, m.cfg.near, m.base);
    Slot pos_ndc = geom::ops::ray_points(t, ndc.origins, ndc.dirs, grid.dist);
    g.field_coords = pos_ndc;
    g.positions_world = geom::ops::ndc_unmap_points(t, pos_ndc, logf, m.cfg.near, m.base);
    g.delta = geom::ops::ray_deltas(t, ndc.dirs, grid.dt);
  } else {
    g.positions_world = geom::ops::ray_points(t, rays.origins, rays.dirs, grid.dist);
    g.field_coords = geom::ops::contract_points(t, g.positions_world);
    g.delta = t.constant(grid.dt);
  }
  return g;
}

// NDC-space world points sit in the camera frame of the warp; in both
// parameterizations positions_world are true world coordinates.

inline Slot apply_inbox(Tape& t, Slot sigma_flat, Slot inbox) {
  return diff::ops::mul(t, sigma_flat, diff::ops::detach(t, inbox));
}

inline StaticBranch build_static_branch(Tape& t, const Model& m, const RayGeometry& g,
                                        const render::SampleGrid& grid, int B, int N,
                                        bool with_color) {
  StaticBranch s;
  s.positions_world = g.positions_world;
  s.delta = g.delta;
  auto den = field::vm_sample(t, m.static_field.density, m.static_field.resolution, m.box, g.field_coords);
  Slot sig_flat = field::static_density(t, den.features, m.cfg.density_shift);
  sig_flat = apply_inbox(t, sig_flat, den.inbox);
  s.sigma = diff::ops::reshape(t, sig_flat, {B, N});
  if (with_color) {
    auto app = field::vm_sample(t, m.static_field.appearance, m.static_field.resolution, m.box, g.field_coords);
    Slot dirs_rep = diff::ops::repeat_rows(t, g.dirs, N);
    s.rgb = m.color_head.forward(t, app.features, dirs_rep);
  } else {
    s.rgb = t.constant(Array({B * N, 3}));
  }
  s.out = render::volume_render(t, s.sigma, s.rgb, s.delta);
  s.surface = render::weight_average(t, s.out.weights, s.positions_world);
  (void)grid;
  return s;
}

inline DynamicBranch build_dynamic_branch(Tape& t, const Model& m, const StaticBranch& s,
                                          const RayBatch& batch, const render::SampleGrid& grid,
                                          int B, int N, bool with_color) {
  DynamicBranch d;
  d.poses_detached = diff::ops::detach(t, t.leaf(*m.poses));
  d.logf_detached = diff::ops::detach(t, t.leaf(*m.logf));

  RayGeometry g = build_ray_geometry(t, m, d.poses_detached, d.logf_detached, batch.frames,
                                     batch.pixels, grid);
  d.positions_world_detached = g.positions_world;
  d.delta = g.delta;

  // Per-sample time column.
  Array times_flat({B * N, 1});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < N; ++i) times_flat.at(b * N + i, 0) = batch.times.at(b, 0);
  Slot time = t.constant(times_flat);

  Slot canonical = m.deform_head.deform(t, g.field_coords, time);
  auto den = field::vm_sample(t, m.dynamic_field.density, m.dynamic_field.resolution, m.box, canonical);
  auto app = field::vm_sample(t, m.dynamic_field.appearance, m.dynamic_field.resolution, m.box, canonical);
  auto heads = m.time_heads.forward(t, den.features, app.features, time);
  Slot sig_flat = apply_inbox(t, heads.sigma, den.inbox);
  d.sigma = diff::ops::reshape(t, sig_flat, {B, N});
  d.rgb = with_color ? heads.rgb : t.constant(Array({B * N, 3}));
  d.mask_per_sample = diff::ops::reshape(t, heads.mask, {B, N});

  d.out = render::volume_render(t, d.sigma, d.rgb, d.delta);
  d.composite = render::composite_render(t, s.sigma, s.rgb, d.sigma, d.rgb, d.mask_per_sample,
                                         s.delta, d.delta);
  d.mask_render_detached =
      render::composite_render(t, diff::ops::detach(t, s.sigma), diff::ops::detach(t, s.rgb), d.sigma,
                               d.rgb, d.mask_per_sample, diff::ops::detach(t, s.delta), d.delta)
          .mask;
  d.surface = render::weight_average(t, d.out.weights, d.positions_world_detached);
  return d;
}

// --- per-chunk loss assembly ------------------------------------------------------

struct TermSums {
  // name -> (sum slot, normalizer contribution)
  std::vector<std::pair<std::string, Slot>> sums;
  std::map<std::string, Real> counts;
  // monodepth two-phase state
  loss::SsiStats ssi_static, ssi_dynamic;
  Slot dhat_static{-1, 0}, dhat_dynamic{-1, 0};
  Array valid_mono_static, valid_mono_dynamic;

  void add(const std::string& name, Slot s, Real count) {
    sums.emplace_back(name, s);
    counts[name] += count;
  }
};

struct ChunkGraph {
  Tape tape;
  TermSums terms;
  Array prior_disp;  // this chunk's slice, for the monodepth residual
  bool dynamic_on = false;
};

// Opacity floor under which a ray's surface point is excluded from the
// geometric losses.
inline constexpr Real kOpacityFloor = 0.05;

inline Array and_masks(const Array& a, const Array& b) {
  Array out(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = (a[i] != 0 && b[i] != 0) ? 1 : 0;
  return out;
}

inline Array opacity_mask(const Array& opacity) {
  Array out(opacity.shape);
  for (int64_t i = 0; i < opacity.numel(); ++i) out[i] = opacity[i] > kOpacityFloor ? 1 : 0;
  return out;
}

// rgb + bg * (1 - opacity), for compositing transparent rays onto the
// configured background before the photometric comparison.
inline Slot with_background(Tape& t, Slot rgb, Slot opacity, Real bg) {
  if (bg == 0.0) return rgb;
  Slot rem = diff::ops::add_const(t, diff::ops::scale(t, opacity, -1.0), 1.0);  // [B]
  Slot rem_col = diff::ops::reshape(t, rem, {t.val(opacity).dim(0), 1});
  Slot rem3 = diff::ops::concat_cols(t, {rem_col, rem_col, rem_col});
  return diff::ops::add(t, rgb, diff::ops::scale(t, rem3, bg));
}

// Builds the whole forward/loss graph for one chunk of rays. Monodepth terms
// are finished later (their scale/shift solve is global across chunks).
inline void build_chunk(ChunkGraph& cg, const Model& m, const RayBatch& batch,
                        const render::SampleGrid& grid, bool dynamic_on) {
  Tape& t = cg.tape;
  const int B = batch.size, N = grid.dist.dim(1);
  cg.dynamic_on = dynamic_on;
  cg.prior_disp = batch.prior_disp;
  const Real bg = m.cfg.background == "white" ? 1.0 : 0.0;

  Slot poses = t.leaf(*m.poses);
  Slot logf = t.leaf(*m.logf);
  RayGeometry g = build_ray_geometry(t, m, poses, logf, batch.frames, batch.pixels, grid);
  StaticBranch st = build_static_branch(t, m, g, grid, B, N, /*with_color=*/true);

  // Photometric terms.
  cg.terms.add("photo_static",
               loss::masked_sq_sum(t, with_background(t, st.out.rgb, st.out.opacity, bg),
                                   batch.target_rgb, batch.static_include),
               3.0 * loss::count_included(batch.static_include));

  // Distortion on the active render pass (composite when dynamic is on).
  Slot distortion_w = st.out.weights;

  // Static geometric losses need the surface point validity.
  const Array op_static = t.val(st.out.opacity);
  const Array valid_sp_static = opacity_mask(op_static);

  // Reprojection + disparity per flow direction.
  for (int dir = 0; dir < 2; ++dir) {
    const Array& has = batch.has_dir[static_cast<size_t>(dir)];
    if (loss::count_included(has) == 0) continue;
    const std::vector<int>& fj = batch.frames_j[static_cast<size_t>(dir)];

    // Project the frame-i static surface points into frame j.
    auto proj = geom::ops::project_points(t, st.surface, poses, logf, fj, m.base);
    Array valid = and_masks(and_masks(has, batch.static_include), valid_sp_static);
    valid = and_masks(valid, t.val(proj.valid));
    Slot resid = diff::ops::sub(t, proj.uv, t.constant(batch.corr_pixel[static_cast<size_t>(dir)]));
    cg.terms.add("reproj_static", loss::masked_abs_sum(t, resid, valid), loss::count_included(valid));

    // Correspondence rays in frame j (density only) for the disparity loss.
    RayGeometry gj = build_ray_geometry(t, m, poses, logf, fj, batch.corr_pixel[static_cast<size_t>(dir)], grid);
    StaticBranch stj = build_static_branch(t, m, gj, grid, B, N, /*with_color=*/false);
    auto proj_i = geom::ops::project_points(t, st.surface, poses, logf, fj, m.base);
    auto proj_j = geom::ops::project_points(t, stj.surface, poses, logf, fj, m.base);
    Array dvalid = and_masks(valid, opacity_mask(t.val(stj.out.opacity)));
    dvalid = and_masks(dvalid, t.val(proj_j.valid));
    Slot inv_i = diff::ops::recip_clamped(t, proj_i.depth, 1e-6);
    Slot inv_j = diff::ops::recip_clamped(t, proj_j.depth, 1e-6);
    cg.terms.add("disp_static", loss::masked_abs_sum(t, diff::ops::sub(t, inv_i, inv_j), dvalid),
                 loss::count_included(dvalid));
  }

  // Monodepth (static): disparity of the surface point in its own camera.
  {
    auto proj_self = geom::ops::project_points(t, st.surface, poses, logf, batch.frames, m.base);
    Array valid = and_masks(and_masks(batch.static_include, valid_sp_static), t.val(proj_self.valid));
    Slot dhat = diff::ops::recip_clamped(t, proj_self.depth, 1e-6);
    cg.terms.dhat_static = dhat;
    cg.terms.valid_mono_static = valid;
    const Array& dh = t.val(dhat);
    for (int i = 0; i < B; ++i)
      if (valid[i] != 0) cg.terms.ssi_static.add(dh[i], batch.prior_disp[i]);
  }

  if (dynamic_on) {
    DynamicBranch dyn = build_dynamic_branch(t, m, st, batch, grid, B, N, /*with_color=*/true);
    distortion_w = dyn.composite.weights;

    cg.terms.add("photo_full",
                 loss::masked_sq_sum(t, with_background(t, dyn.composite.rgb, dyn.composite.opacity, bg),
                                     batch.target_rgb, Array({B}, Real(1))),
                 3.0 * B);
    cg.terms.add("photo_dynamic",
                 loss::masked_sq_sum(t, with_background(t, dyn.out.rgb, dyn.out.opacity, bg),
                                     batch.target_rgb, Array({B}, Real(1))),
                 3.0 * B);
    cg.terms.add("mask",
                 loss::masked_abs_sum(
                     t, diff::ops::sub(t, dyn.mask_render_detached, t.constant(batch.motion_mask)),
                     Array({B}, Real(1))),
                 B);

    const Array valid_sp_dyn = opacity_mask(t.val(dyn.out.opacity));

    // Scene flow at the dynamic surface points.
    auto sf = m.sceneflow_head.forward(t, dyn.surface, t.constant(batch.times));
    Slot cyc = diff::ops::add(t, sf.fwd, sf.bwd);
    Array ones({B}, Real(1));
    Slot sf_sum = diff::ops::weighted_sum(t,
                                          {loss::masked_abs_sum(t, cyc, ones),
                                           loss::masked_abs_sum(t, sf.fwd, ones),
                                           loss::masked_abs_sum(t, sf.bwd, ones)},
                                          {1, 1, 1});
    cg.terms.add("sceneflow_reg", sf_sum, B);

    const Real dt_frame = m.n_frames > 1 ? 1.0 / (m.n_frames - 1) : 1.0;
    (void)dt_frame;

    for (int dir = 0; dir < 2; ++dir) {
      const Array& has = batch.has_dir[static_cast<size_t>(dir)];
      if (loss::count_included(has) == 0) continue;
      const std::vector<int>& fj = batch.frames_j[static_cast<size_t>(dir)];
      Slot flow3d = dir == 0 ? sf.fwd : sf.bwd;
      Slot moved = diff::ops::add(t, dyn.surface, flow3d);

      auto proj = geom::ops::project_points(t, moved, dyn.poses_detached, dyn.logf_detached, fj, m.base);
      Array valid = and_masks(has, valid_sp_dyn);
      valid = and_masks(valid, t.val(proj.valid));
      Slot resid = diff::ops::sub(t, proj.uv, t.constant(batch.corr_pixel[static_cast<size_t>(dir)]));
      cg.terms.add("reproj_dynamic", loss::masked_abs_sum(t, resid, valid), loss::count_included(valid));

      // Dynamic correspondence surface point in frame j (density-only branch).
      RayGeometry gj = build_ray_geometry(t, m, dyn.poses_detached, dyn.logf_detached, fj,
                                          batch.corr_pixel[static_cast<size_t>(dir)], grid);
      RayBatch bj = batch;  // same times shifted to frame j
      for (int k = 0; k < B; ++k)
        bj.times.at(k, 0) = m.n_frames > 1 ? static_cast<Real>(fj[static_cast<size_t>(k)]) / (m.n_frames - 1) : 0.0;
      // Density-only dynamic branch at frame j.
      Array times_flat({B * N, 1});
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < N; ++i) times_flat.at(b * N + i, 0) = bj.times.at(b, 0);
      Slot timej = t.constant(times_flat);
      Slot canonical_j = m.deform_head.deform(t, gj.field_coords, timej);
      auto den_j = field::vm_sample(t, m.dynamic_field.density, m.dynamic_field.resolution, m.box, canonical_j);
      auto app_j = field::vm_sample(t, m.dynamic_field.appearance, m.dynamic_field.resolution, m.box, canonical_j);
      auto heads_j = m.time_heads.forward(t, den_j.features, app_j.features, timej);
      Slot sigj = diff::ops::reshape(t, apply_inbox(t, heads_j.sigma, den_j.inbox), {B, N});
      auto rend_j = render::volume_render(t, sigj, t.constant(Array({B * N, 3})), gj.delta);
      Slot sp_j = render::weight_average(t, rend_j.weights, gj.positions_world);

      auto proj_a = geom::ops::project_points(t, moved, dyn.poses_detached, dyn.logf_detached, fj, m.base);
      auto proj_b = geom::ops::project_points(t, sp_j, dyn.poses_detached, dyn.logf_detached, fj, m.base);
      Array dvalid = and_masks(valid, opacity_mask(t.val(rend_j.opacity)));
      dvalid = and_masks(dvalid, t.val(proj_b.valid));
      Slot inv_a = diff::ops::recip_clamped(t, proj_a.depth, 1e-6);
      Slot inv_b = diff::ops::recip_clamped(t, proj_b.depth, 1e-6);
      cg.terms.add("disp_dynamic", loss::masked_abs_sum(t, diff::ops::sub(t, inv_a, inv_b), dvalid),
                   loss::count_included(dvalid));
    }

    // Dynamic monodepth.
    {
      auto proj_self = geom::ops::project_points(t, dyn.surface, dyn.poses_detached, dyn.logf_detached,
                                                 batch.frames, m.base);
      Array valid = and_masks(valid_sp_dyn, t.val(proj_self.valid));
      Slot dhat = diff::ops::recip_clamped(t, proj_self.depth, 1e-6);
      cg.terms.dhat_dynamic = dhat;
      cg.terms.valid_mono_dynamic = valid;
      const Array& dh = t.val(dhat);
      for (int i = 0; i < B; ++i)
        if (valid[i] != 0) cg.terms.ssi_dynamic.add(dh[i], batch.prior_disp[i]);
    }
  }

  cg.terms.add("distortion", render::distortion(t, distortion_w, grid.s_mid, grid.dt), B);
}

// --- full-image rendering -----------------------------------------------------------

struct RenderedView {
  Image rgb;    // with background compositing applied
  Image depth;  // expected termination distance (sampling parameterization units)
  Image mask;   // rendered nonrigidity
};

// Forward-only render of an arbitrary (pose, time) pair. Midpoint sampling.
inline RenderedView render_view(const Model& m, const geom::CameraPose& pose, Real time,
                                bool dynamic_on, int rays_per_pass = 4096) {
  const int W = m.base.width, H = m.base.height;
  RenderedView out{Image(W, H, 3), Image(W, H, 1), Image(W, H, 1)};
  Parameter temp_pose("view_pose", Array({1, 6}));
  for (int c = 0; c < 3; ++c) {
    temp_pose.values.at(0, c) = pose.rotation[static_cast<size_t>(c)];
    temp_pose.values.at(0, 3 + c) = pose.translation[static_cast<size_t>(c)];
  }

  const Real bg = m.cfg.background == "white" ? 1.0 : 0.0;
  const int64_t total = static_cast<int64_t>(W) * H;
  Rng rng(0);  // unused (midpoint sampling)
  for (int64_t start = 0; start < total; start += rays_per_pass) {
    const int B = static_cast<int>(std::min<int64_t>(rays_per_pass, total - start));
    RayBatch batch;
    batch.size = B;
    batch.frames.assign(static_cast<size_t>(B), 0);
    batch.pixels = Array({B, 2});
    batch.times = Array({B, 1});
    for (int k = 0; k < B; ++k) {
      const int64_t pix = start + k;
      batch.pixels.at(k, 0) = static_cast<Real>(pix % W) + 0.5;
      batch.pixels.at(k, 1) = static_cast<Real>(pix / W) + 0.5;
      batch.times.at(k, 0) = time;
    }
    render::SampleGrid grid =
        m.cfg.parameterization == "ndc"
            ? render::sample_ndc(B, m.cfg.n_samples, false, rng)
            : render::sample_contracted(B, m.cfg.n_samples, false, rng, m.cfg.near, m.cfg.far);

    Tape t;
    Slot poses = t.leaf(temp_pose);
    Slot logf = t.leaf(*m.logf);
    RayGeometry g = build_ray_geometry(t, m, poses, logf, batch.frames, batch.pixels, grid);
    StaticBranch st = build_static_branch(t, m, g, grid, B, m.cfg.n_samples, true);

    const Array* rgb = &t.val(st.out.rgb);
    const Array* opacity = &t.val(st.out.opacity);
    Slot weights = st.out.weights;
    const Array* mask_vals = nullptr;
    if (dynamic_on) {
      // The dynamic branch builders key off batch.frames against the model's
      // pose parameter; rebuild geometry with the temp pose instead.
      Slot poses_d = diff::ops::detach(t, poses);
      Slot logf_d = diff::ops::detach(t, logf);
      RayGeometry gd = build_ray_geometry(t, m, poses_d, logf_d, batch.frames, batch.pixels, grid);
      Array times_flat({B * m.cfg.n_samples, 1});
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < m.cfg.n_samples; ++i) times_flat.at(b * m.cfg.n_samples + i, 0) = time;
      Slot tcol = t.constant(times_flat);
      Slot canonical = m.deform_head.deform(t, gd.field_coords, tcol);
      auto den = field::vm_sample(t, m.dynamic_field.density, m.dynamic_field.resolution, m.box, canonical);
      auto app = field::vm_sample(t, m.dynamic_field.appearance, m.dynamic_field.resolution, m.box, canonical);
      auto heads = m.time_heads.forward(t, den.features, app.features, tcol);
      Slot sig = diff::ops::reshape(t, apply_inbox(t, heads.sigma, den.inbox), {B, m.cfg.n_samples});
      Slot md = diff::ops::reshape(t, heads.mask, {B, m.cfg.n_samples});
      auto comp = render::composite_render(t, st.sigma, st.rgb, sig, heads.rgb, md, st.delta, gd.delta);
      rgb = &t.val(comp.rgb);
      opacity = &t.val(comp.opacity);
      weights = comp.weights;
      mask_vals = &t.val(comp.mask);
    }
    Slot depth = render::weight_average_const(t, weights, Array({B * m.cfg.n_samples, 1}, grid.dist.data));
    const Array& depth_vals = t.val(depth);

    for (int k = 0; k < B; ++k) {
      const int x = static_cast<int>((start + k) % W);
      const int y = static_cast<int>((start + k) / W);
      for (int c = 0; c < 3; ++c)
        out.rgb.at(x, y, c) = rgb->at(k, c) + bg * (1.0 - (*opacity)[k]);
      out.depth.at(x, y) = depth_vals.at(k, 0);
      out.mask.at(x, y) = mask_vals ? (*mask_vals)[k] : 0.0;
    }
  }
  return out;
}

// --- training loop ----------------------------------------------------------------

struct StepLog {
  int64_t step = 0;
  Real total = 0;
  std::map<std::string, Real> terms;
};

struct Snapshot {
  std::vector<Array> values;
  std::vector<diff::AdamState> states;
  int64_t step = 0;
};

class Trainer {
 public:
  Trainer(Model& model, const io::Dataset& ds, const TrainConfig& cfg)
      : m_(model), ds_(ds), cfg_(cfg) {
    if (!cfg_.optimize_poses || !cfg_.optimize_focal) {
      DVX_CHECK_MSG(!ds.gt_poses.empty() || cfg_.optimize_poses,
                    "optimize_poses=false requires gt poses in the dataset");
    }
    if (!cfg_.optimize_poses && !ds.gt_poses.empty()) {
      for (int i = 0; i < m_.n_frames; ++i) {
        const auto& p = ds.gt_poses[static_cast<size_t>(i)];
        for (int c = 0; c < 3; ++c) {
          m_.poses->values.at(i, c) = p.rotation[static_cast<size_t>(c)];
          m_.poses->values.at(i, 3 + c) = p.translation[static_cast<size_t>(c)];
        }
      }
    }
    if (!cfg_.optimize_focal && ds.gt_intrinsics) {
      m_.logf->values[0] = std::log(ds.gt_intrinsics->focal / m_.base.focal);
    }
    init_optimizers();
  }

  // Per-step loss breakdown, appended by run().
  const std::vector<StepLog>& logs() const { return logs_; }

  void run(const std::function<void(const StepLog&)>& on_log = nullptr) {
    take_snapshot(0);
    for (int64_t step = 0; step < cfg_.total_steps; ++step) {
      apply_schedule(step);
      const StepLog log = train_step(step);
      if (!std::isfinite(log.total)) {
        handle_nan(step);
        continue;
      }
      logs_.push_back(log);
      if (on_log && (step % std::max(1, cfg_.log_every) == 0 || step + 1 == cfg_.total_steps)) on_log(log);
      if (cfg_.checkpoint_every > 0 && (step + 1) % cfg_.checkpoint_every == 0) take_snapshot(step + 1);
    }
  }

  // Exposed for tests.
  StepLog train_step(int64_t step) {
    const bool dynamic_on = cfg_.dynamic_enabled && step >= warmup_steps();
    Rng step_rng(cfg_.seed, 0x57e9 + static_cast<uint64_t>(step));
    RayBatch batch = sample_rays(ds_, cfg_.batch_rays, step_rng, cfg_.static_batch_frac, cfg_.holdout_frames);
    render::SampleGrid grid = make_grid(batch.size, step_rng);

    const int T = std::max(1, cfg_.threads);
    const int n_chunks = std::min(T, batch.size);
    std::vector<ChunkGraph> chunks(static_cast<size_t>(n_chunks));
    std::vector<RayBatch> sub(static_cast<size_t>(n_chunks));
    std::vector<render::SampleGrid> subgrid(static_cast<size_t>(n_chunks));
    for (int c = 0; c < n_chunks; ++c) {
      const int lo = static_cast<int>(static_cast<int64_t>(batch.size) * c / n_chunks);
      const int hi = static_cast<int>(static_cast<int64_t>(batch.size) * (c + 1) / n_chunks);
      sub[static_cast<size_t>(c)] = slice_batch(batch, lo, hi);
      subgrid[static_cast<size_t>(c)] = slice_grid(grid, lo, hi);
    }

    parallel_for(n_chunks, [&](int c) {
      build_chunk(chunks[static_cast<size_t>(c)], m_, sub[static_cast<size_t>(c)], subgrid[static_cast<size_t>(c)], dynamic_on);
    });

    // Global monodepth solve, then finish each chunk with the residual term.
    loss::SsiStats ssi_s, ssi_d;
    for (auto& cg : chunks) {
      ssi_s.merge(cg.terms.ssi_static);
      ssi_d.merge(cg.terms.ssi_dynamic);
    }
    const loss::SsiSolution sol_s = loss::solve_scale_shift(ssi_s);
    const loss::SsiSolution sol_d = loss::solve_scale_shift(ssi_d);
    for (auto& cg : chunks) {
      if (sol_s.n >= 2 && cg.terms.dhat_static.valid()) {
        Slot r = loss::affine_residual_sq_sum(cg.tape, cg.terms.dhat_static, cg.prior_disp,
                                              cg.terms.valid_mono_static, sol_s.s, sol_s.b);
        cg.terms.add("monodepth_static", r, 0);
      }
      if (dynamic_on && sol_d.n >= 2 && cg.terms.dhat_dynamic.valid()) {
        Slot r = loss::affine_residual_sq_sum(cg.tape, cg.terms.dhat_dynamic, cg.prior_disp,
                                              cg.terms.valid_mono_dynamic, sol_d.s, sol_d.b);
        cg.terms.add("monodepth_dynamic", r, 0);
      }
    }

    // Global counts per term.
    std::map<std::string, Real> counts;
    for (auto& cg : chunks)
      for (const auto& [name, cnt] : cg.terms.counts) counts[name] += cnt;
    counts["monodepth_static"] = sol_s.n;
    counts["monodepth_dynamic"] = sol_d.n;

    const std::map<std::string, Real> weights = term_weights(step, dynamic_on);

    // Backward per chunk against the weighted sum of its term sums.
    parallel_for(n_chunks, [&](int c) {
      ChunkGraph& cg = chunks[static_cast<size_t>(c)];
      std::vector<Slot> slots;
      std::vector<Real> coeffs;
      for (const auto& [name, slot] : cg.terms.sums) {
        const Real cnt = counts.count(name) ? counts.at(name) : 0;
        const Real w = weights.count(name) ? weights.at(name) : 0;
        if (cnt <= 0 || w == 0) continue;
        slots.push_back(slot);
        coeffs.push_back(w / cnt);
      }
      if (slots.empty()) return;
      Slot total = diff::ops::weighted_sum(cg.tape, slots, coeffs);
      cg.tape.backward_local(total);
    });

    // Deterministic merge in chunk order.
    for (auto& cg : chunks) cg.tape.accumulate_param_grads();

    // Loss bookkeeping.
    StepLog log;
    log.step = step;
    std::map<std::string, Real> sums;
    for (auto& cg : chunks)
      for (const auto& [name, slot] : cg.terms.sums) sums[name] += cg.tape.val(slot)[0];
    for (const auto& [name, sum] : sums) {
      const Real cnt = counts.count(name) ? counts.at(name) : 0;
      const Real mean = cnt > 0 ? sum / cnt : 0;
      log.terms[name] = mean;
      const Real w = weights.count(name) ? weights.at(name) : 0;
      log.total += w * mean;
    }

    if (std::isfinite(log.total)) {
      step_optimizers(step);
      wrap_poses();
    }
    zero_grads();
    return log;
  }

  int64_t warmup_steps() const {
    return static_cast<int64_t>(std::floor(cfg_.warmup_frac * static_cast<Real>(cfg_.total_steps)));
  }

  void apply_schedule(int64_t step) {
    apply_field_schedule(step, m_.static_field, cfg_.static_resolutions, cfg_.static_upsample_steps,
                         static_level_);
    apply_field_schedule(step, m_.dynamic_field, cfg_.dynamic_resolutions, cfg_.dynamic_upsample_steps,
                         dynamic_level_);
  }

  static int schedule_level(int64_t step, const std::vector<int>& milestones) {
    int level = 0;
    for (int ms : milestones)
      if (step >= ms) ++level;
    return level;
  }

  int nan_rollbacks() const { return nan_rollbacks_; }

 private:
  void init_optimizers() {
    auto add = [&](Parameter* p, Real lr) {
      for (const auto& [q, st] : opt_)
        DVX_CHECK_MSG(q != p, "parameter registered with two optimizers: " + p->tag);
      diff::AdamConfig ac{lr, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps};
      opt_.emplace_back(p, diff::AdamState(*p, ac));
    };
    if (cfg_.optimize_poses) add(m_.poses.get(), cfg_.lr_poses);
    if (cfg_.optimize_focal) add(m_.logf.get(), cfg_.lr_poses);
    for (Parameter* p : m_.static_field.parameters()) add(p, cfg_.lr_voxels);
    for (Parameter* p : m_.dynamic_field.parameters()) add(p, cfg_.lr_voxels);
    for (Parameter* p : m_.color_head.parameters()) add(p, cfg_.lr_heads);
    for (Parameter* p : m_.deform_head.parameters()) add(p, cfg_.lr_heads);
    for (Parameter* p : m_.time_heads.parameters()) add(p, cfg_.lr_heads);
    for (Parameter* p : m_.sceneflow_head.parameters()) add(p, cfg_.lr_heads);
  }

  void apply_field_schedule(int64_t step, field::TensorField& f, const std::vector<int>& res,
                            const std::vector<int>& milestones, int& level) {
    const int target = schedule_level(step, milestones);
    while (level < target) {
      ++level;
      field::upsample(f, cube(res[static_cast<size_t>(level)]));
      // Fresh optimizer state at the new resolution.
      for (auto& [p, st] : opt_) {
        for (Parameter* fp : f.parameters())
          if (p == fp) st = diff::AdamState(*p, st.cfg);
      }
    }
  }

  render::SampleGrid make_grid(int n_rays, Rng& rng) {
    if (cfg_.parameterization == "ndc")
      return render::sample_ndc(n_rays, cfg_.n_samples, cfg_.stratified, rng);
    return render::sample_contracted(n_rays, cfg_.n_samples, cfg_.stratified, rng, cfg_.near, cfg_.far);
  }

  std::map<std::string, Real> term_weights(int64_t step, bool dynamic_on) const {
    const int64_t horizon = static_cast<int64_t>(cfg_.anneal_horizon_frac * static_cast<Real>(cfg_.total_steps));
    std::map<std::string, Real> w;
    w["photo_static"] = 1.0;
    w["reproj_static"] = loss::anneal(step, horizon, cfg_.w_reproj_s);
    w["disp_static"] = loss::anneal(step, horizon, cfg_.w_disp_s);
    w["monodepth_static"] = loss::anneal(step, horizon, cfg_.w_monodepth_s);
    w["distortion"] = cfg_.w_distortion;
    if (dynamic_on) {
      w["photo_full"] = 1.0;
      w["photo_dynamic"] = 1.0;
      w["reproj_dynamic"] = loss::anneal(step, horizon, cfg_.w_reproj_d);
      w["disp_dynamic"] = loss::anneal(step, horizon, cfg_.w_disp_d);
      w["monodepth_dynamic"] = loss::anneal(step, horizon, cfg_.w_monodepth_d);
      w["sceneflow_reg"] = cfg_.w_sceneflow_reg;
      w["mask"] = cfg_.w_mask;
    }
    return w;
  }

  void step_optimizers(int64_t step) {
    for (auto& [p, st] : opt_) {
      const Real saved_lr = st.cfg.lr;
      Real lr = saved_lr * lr_scale_;
      // Cosine decay for pose/focal learning rates.
      if (p == m_.poses.get() || p == m_.logf.get()) {
        const Real u = cfg_.total_steps > 1 ? static_cast<Real>(step) / (cfg_.total_steps - 1) : 0.0;
        lr *= cfg_.pose_lr_final_frac + (1.0 - cfg_.pose_lr_final_frac) * 0.5 * (1.0 + std::cos(M_PI * u));
      }
      st.cfg.lr = lr;
      diff::adam_step(*p, st);
      st.cfg.lr = saved_lr;
    }
  }

  void wrap_poses() {
    for (int i = 0; i < m_.n_frames; ++i) {
      const geom::Vec3 w{m_.poses->values.at(i, 0), m_.poses->values.at(i, 1), m_.poses->values.at(i, 2)};
      const geom::Vec3 ww = geom::wrap_axis_angle(w);
      for (int c = 0; c < 3; ++c) m_.poses->values.at(i, c) = ww[static_cast<size_t>(c)];
    }
  }

  void zero_grads() {
    for (auto& [p, st] : opt_) p->zero_grad();
    m_.poses->zero_grad();
    m_.logf->zero_grad();
  }

  void take_snapshot(int64_t step) {
    snapshot_.values.clear();
    snapshot_.states.clear();
    for (auto& [p, st] : opt_) {
      snapshot_.values.push_back(p->values);
      snapshot_.states.push_back(st);
    }
    snapshot_.step = step;
  }

  void handle_nan(int64_t step) {
    ++nan_rollbacks_;
    if (nan_rollbacks_ > 3)
      throw std::runtime_error("training diverged: non-finite loss at step " + std::to_string(step) +
                               " after 3 rollbacks");
    for (size_t i = 0; i < opt_.size(); ++i) {
      opt_[i].first->values = snapshot_.values[i];
      opt_[i].second = snapshot_.states[i];
      opt_[i].first->zero_grad();
    }
    lr_scale_ *= 0.5;
  }

  void parallel_for(int n, const std::function<void(int)>& fn) {
    if (n <= 1 || cfg_.threads <= 1) {
      for (int i = 0; i < n; ++i) fn(i);
      return;
    }
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(fn, i);
    for (auto& th : pool) th.join();
  }

  Model& m_;
  const io::Dataset& ds_;
  TrainConfig cfg_;
  std::vector<std::pair<Parameter*, diff::AdamState>> opt_;
  std::vector<StepLog> logs_;
  Snapshot snapshot_;
  int static_level_ = 0, dynamic_level_ = 0;
  int nan_rollbacks_ = 0;
  Real lr_scale_ = 1.0;
};

}  // namespace dynavox::train
