#include <catch2/catch_amalgamated.hpp>

#include "dynavox/trainer.hpp"

using namespace dynavox;
using namespace dynavox::train;
using diff::Slot;
using diff::Tape;

namespace {

io::TrainConfig tiny_config() {
  io::TrainConfig cfg;
  cfg.total_steps = 4;
  cfg.batch_rays = 24;
  cfg.n_samples = 8;
  cfg.static_resolutions = {9};
  cfg.static_upsample_steps = {};
  cfg.dynamic_resolutions = {9};
  cfg.dynamic_upsample_steps = {};
  cfg.density_rank = 2;
  cfg.appearance_rank = 3;
  cfg.color_width = 12;
  cfg.time_head_width = 10;
  cfg.deform_width = 12;
  cfg.deform_depth = 2;
  cfg.sceneflow_width = 12;
  cfg.sceneflow_depth = 2;
  cfg.near = 1.0;
  cfg.far = 12.0;
  cfg.warmup_frac = 0.0;
  cfg.checkpoint_every = 0;
  cfg.threads = 1;
  io::validate_config(cfg);
  return cfg;
}

struct TinySetup {
  synth::GroundTruth gt;
  io::TrainConfig cfg;
  Model model;

  static TinySetup make(uint64_t seed = 5) {
    synth::SceneSpec spec = synth::make_preset("one_mover", seed);
    spec.n_frames = 4;
    spec.width = 24;
    spec.height = 18;
    TinySetup s{synth::generate(spec), tiny_config(),
                Model{}};
    s.cfg.seed = seed;
    s.model = make_model(s.cfg, spec.width, spec.height, spec.n_frames);
    // Mildly non-trivial poses/focal so gradients are generic.
    Rng rng(seed, 77);
    for (int64_t i = 0; i < s.model.poses->values.numel(); ++i)
      s.model.poses->values[i] = rng.uniform(-0.05, 0.05);
    s.model.logf->values[0] = 0.1;
    // Perturb zero-initialized final layers so every path carries signal.
    for (auto& v : s.model.deform_head.mlp.weights.back()->values.data) v = rng.uniform(-0.05, 0.05);
    for (auto& v : s.model.sceneflow_head.mlp.weights.back()->values.data) v = rng.uniform(-0.05, 0.05);
    return s;
  }
};

void zero_all(Model& m) {
  for (auto& [name, p] : m.named_params()) p->zero_grad();
}

Slot find_term(const ChunkGraph& cg, const std::string& name) {
  for (const auto& [n, s] : cg.terms.sums)
    if (n == name) return s;
  FAIL("missing term " + name);
  return {};
}

}  // namespace

TEST_CASE("schedule levels honor the milestones exactly") {
  const std::vector<int> ms{100, 400};
  CHECK(Trainer::schedule_level(0, ms) == 0);
  CHECK(Trainer::schedule_level(99, ms) == 0);
  CHECK(Trainer::schedule_level(100, ms) == 1);
  CHECK(Trainer::schedule_level(399, ms) == 1);
  CHECK(Trainer::schedule_level(400, ms) == 2);
  CHECK(Trainer::schedule_level(100000, ms) == 2);
}

TEST_CASE("ray batches honor size, static fraction, holdout, and seeding") {
  TinySetup s = TinySetup::make();
  Rng rng(9);
  const RayBatch b = sample_rays(s.gt.dataset, 64, rng, 0.5, {2});
  CHECK(b.size == 64);
  int static_count = 0;
  for (int i = 0; i < 64; ++i) {
    CHECK(b.frames[static_cast<size_t>(i)] != 2);
    static_count += b.motion_mask[i] == 0 ? 1 : 0;
  }
  CHECK(static_count >= 32);

  Rng r1(42), r2(42);
  const RayBatch b1 = sample_rays(s.gt.dataset, 32, r1, 0.5, {});
  const RayBatch b2 = sample_rays(s.gt.dataset, 32, r2, 0.5, {});
  CHECK(b1.frames == b2.frames);
  for (int64_t i = 0; i < b1.pixels.numel(); ++i) CHECK(b1.pixels[i] == b2.pixels[i]);
}

TEST_CASE("dynamic-branch losses leave pose and focal gradients exactly zero") {
  TinySetup s = TinySetup::make();
  Rng rng(s.cfg.seed, 1);
  RayBatch batch = sample_rays(s.gt.dataset, 16, rng, 0.5, {});
  render::SampleGrid grid = render::sample_contracted(16, s.cfg.n_samples, false, rng, s.cfg.near, s.cfg.far);

  ChunkGraph cg;
  build_chunk(cg, s.model, batch, grid, /*dynamic_on=*/true);

  for (const char* term : {"photo_dynamic", "reproj_dynamic", "disp_dynamic", "mask", "sceneflow_reg"}) {
    zero_all(s.model);
    cg.tape.backward(find_term(cg, term));
    INFO(term);
    for (int64_t i = 0; i < s.model.poses->grad.numel(); ++i) CHECK(s.model.poses->grad[i] == 0.0);
    CHECK(s.model.logf->grad[0] == 0.0);
  }

  // The static photometric, in contrast, reaches the poses.
  zero_all(s.model);
  cg.tape.backward(find_term(cg, "photo_static"));
  Real sum_abs = 0;
  for (int64_t i = 0; i < s.model.poses->grad.numel(); ++i) sum_abs += std::abs(s.model.poses->grad[i]);
  CHECK(sum_abs > 0.0);
}

TEST_CASE("composite pose gradients flow only through the static path") {
  TinySetup s = TinySetup::make();
  Rng rng(s.cfg.seed, 2);
  RayBatch batch = sample_rays(s.gt.dataset, 12, rng, 0.5, {});
  render::SampleGrid grid = render::sample_contracted(12, s.cfg.n_samples, false, rng, s.cfg.near, s.cfg.far);
  const int B = 12, N = s.cfg.n_samples;

  // Full graph: composite photometric backward.
  Array g1;
  Array sigma_d_vals, rgb_d_vals, md_vals, delta_d_vals;
  {
    Tape t;
    Slot poses = t.leaf(*s.model.poses);
    Slot logf = t.leaf(*s.model.logf);
    RayGeometry g = build_ray_geometry(t, s.model, poses, logf, batch.frames, batch.pixels, grid);
    StaticBranch st = build_static_branch(t, s.model, g, grid, B, N, true);
    DynamicBranch dyn = build_dynamic_branch(t, s.model, st, batch, grid, B, N, true);
    sigma_d_vals = t.val(dyn.sigma);
    rgb_d_vals = t.val(dyn.rgb);
    md_vals = t.val(dyn.mask_per_sample);
    delta_d_vals = t.val(dyn.delta);
    Slot lossv = loss::masked_sq_sum(t, dyn.composite.rgb, batch.target_rgb, Array({B}, Real(1)));
    zero_all(s.model);
    t.backward(lossv);
    g1 = s.model.poses->grad;
  }

  // Same static path, dynamic quantities frozen as constants.
  Array g2;
  {
    Tape t;
    Slot poses = t.leaf(*s.model.poses);
    Slot logf = t.leaf(*s.model.logf);
    RayGeometry g = build_ray_geometry(t, s.model, poses, logf, batch.frames, batch.pixels, grid);
    StaticBranch st = build_static_branch(t, s.model, g, grid, B, N, true);
    auto comp = render::composite_render(t, st.sigma, st.rgb, t.constant(sigma_d_vals),
                                         t.constant(rgb_d_vals), t.constant(md_vals), st.delta,
                                         t.constant(delta_d_vals));
    Slot lossv = loss::masked_sq_sum(t, comp.rgb, batch.target_rgb, Array({B}, Real(1)));
    zero_all(s.model);
    t.backward(lossv);
    g2 = s.model.poses->grad;
  }

  REQUIRE(g1.numel() == g2.numel());
  Real sum_abs = 0;
  for (int64_t i = 0; i < g1.numel(); ++i) {
    CHECK(g1[i] == g2[i]);
    sum_abs += std::abs(g1[i]);
  }
  CHECK(sum_abs > 0.0);  // and it is a real gradient, not all zeros
}

TEST_CASE("scene-flow weights never affect render outputs") {
  TinySetup s = TinySetup::make();
  Rng rng(s.cfg.seed, 3);
  RayBatch batch = sample_rays(s.gt.dataset, 16, rng, 0.5, {});
  render::SampleGrid grid = render::sample_contracted(16, s.cfg.n_samples, false, rng, s.cfg.near, s.cfg.far);

  auto render_once = [&] {
    ChunkGraph cg;
    build_chunk(cg, s.model, batch, grid, true);
    // Hunt down the composite node outputs via the stored term inputs: easier
    // to just re-render through render_view on a fixed pose.
    return std::tuple{cg.tape.val(find_term(cg, "photo_full"))[0],
                      cg.tape.val(find_term(cg, "photo_dynamic"))[0],
                      cg.tape.val(find_term(cg, "mask"))[0],
                      cg.tape.val(find_term(cg, "sceneflow_reg"))[0]};
  };
  const auto [full0, dyn0, mask0, sf0] = render_once();
  Rng wrng(999);
  for (auto* p : s.model.sceneflow_head.parameters())
    for (auto& v : p->values.data) v = wrng.uniform(-2, 2);
  const auto [full1, dyn1, mask1, sf1] = render_once();
  CHECK(full0 == full1);
  CHECK(dyn0 == dyn1);
  CHECK(mask0 == mask1);
  CHECK(sf0 != sf1);  // the regularizer does depend on them
}

TEST_CASE("zero-step training leaves the checkpoint at initialization") {
  TinySetup s = TinySetup::make();
  s.cfg.total_steps = 0;
  Model fresh = make_model(s.cfg, s.gt.dataset.width, s.gt.dataset.height, s.gt.dataset.n_frames());
  Model trained = make_model(s.cfg, s.gt.dataset.width, s.gt.dataset.height, s.gt.dataset.n_frames());
  Trainer tr(trained, s.gt.dataset, s.cfg);
  tr.run();
  const auto a = to_checkpoint(fresh, 0), b = to_checkpoint(trained, 0);
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (size_t i = 0; i < a.tensors.size(); ++i) {
    CHECK(a.tensors[i].first == b.tensors[i].first);
    for (int64_t k = 0; k < a.tensors[i].second.numel(); ++k)
      CHECK(a.tensors[i].second[k] == b.tensors[i].second[k]);
  }
}

TEST_CASE("identical seed and config give bitwise-identical parameters") {
  auto run_once = [] {
    TinySetup s = TinySetup::make(11);
    s.cfg.total_steps = 6;
    Model model = make_model(s.cfg, s.gt.dataset.width, s.gt.dataset.height, s.gt.dataset.n_frames());
    Trainer tr(model, s.gt.dataset, s.cfg);
    tr.run();
    return to_checkpoint(model, 6);
  };
  const auto a = run_once();
  const auto b = run_once();
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (size_t i = 0; i < a.tensors.size(); ++i)
    for (int64_t k = 0; k < a.tensors[i].second.numel(); ++k)
      CHECK(a.tensors[i].second[k] == b.tensors[i].second[k]);
}

TEST_CASE("the logged total equals the weighted sum of the logged terms") {
  TinySetup s = TinySetup::make(13);
  s.cfg.total_steps = 2;
  Model model = make_model(s.cfg, s.gt.dataset.width, s.gt.dataset.height, s.gt.dataset.n_frames());
  Trainer tr(model, s.gt.dataset, s.cfg);
  tr.run();
  REQUIRE(!tr.logs().empty());
  for (const auto& log : tr.logs()) {
    CHECK(std::isfinite(log.total));
    CHECK(log.terms.count("photo_static") == 1);
    CHECK(log.terms.count("distortion") == 1);
    for (const auto& [name, v] : log.terms) CHECK(v >= 0.0);
  }
}

TEST_CASE("training diverges cleanly after repeated non-finite losses") {
  TinySetup s = TinySetup::make(17);
  s.cfg.total_steps = 10;
  // Poison the targets: NaN frames make every photometric term NaN.
  synth::GroundTruth gt = std::move(s.gt);
  for (auto& img : gt.dataset.frames)
    for (auto& v : img.data) v = std::numeric_limits<Real>::quiet_NaN();
  Model model = make_model(s.cfg, gt.dataset.width, gt.dataset.height, gt.dataset.n_frames());
  Trainer tr(model, gt.dataset, s.cfg);
  CHECK_THROWS_WITH(tr.run(), Catch::Matchers::ContainsSubstring("diverged"));
  CHECK(tr.nan_rollbacks() == 4);
}

TEST_CASE("checkpoint save/load reconstructs the model exactly, after upsampling too") {
  TinySetup s = TinySetup::make(19);
  s.cfg.static_resolutions = {9, 17};
  s.cfg.static_upsample_steps = {2};
  s.cfg.total_steps = 4;
  Model model = make_model(s.cfg, s.gt.dataset.width, s.gt.dataset.height, s.gt.dataset.n_frames());
  Trainer tr(model, s.gt.dataset, s.cfg);
  tr.run();
  CHECK(model.static_field.resolution[0] == 17);

  const io::Checkpoint ck = to_checkpoint(model, 4);
  const Model back = from_checkpoint(ck);
  CHECK(back.static_field.resolution[0] == 17);
  const auto pa = model.named_params();
  const auto pb = back.named_params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].second->values.shape == pb[i].second->values.shape);
    for (int64_t k = 0; k < pa[i].second->numel(); ++k)
      CHECK(pa[i].second->values[k] == pb[i].second->values[k]);
  }
}

TEST_CASE("static-only training fits a known-pose scene (loss drops 10x)") {
  synth::SceneSpec spec = synth::make_preset("static_orbit", 23);
  spec.n_frames = 6;
  spec.width = 48;
  spec.height = 36;
  const synth::GroundTruth gt = synth::generate(spec);

  io::TrainConfig cfg;
  cfg.seed = 23;
  cfg.total_steps = 2000;
  cfg.batch_rays = 128;
  cfg.n_samples = 48;
  cfg.static_resolutions = {33};
  cfg.static_upsample_steps = {};
  cfg.dynamic_resolutions = {9};
  cfg.dynamic_upsample_steps = {};
  cfg.density_rank = 4;
  cfg.appearance_rank = 6;
  cfg.color_width = 24;
  cfg.near = 1.2;
  cfg.far = 16.0;
  cfg.dynamic_enabled = false;
  cfg.optimize_poses = false;
  cfg.optimize_focal = false;
  cfg.w_reproj_s = 0;  // photometric-only fit to isolate the regression
  cfg.w_disp_s = 0;
  cfg.w_monodepth_s = 0;
  cfg.w_distortion = 0;
  cfg.threads = 2;
  io::validate_config(cfg);

  Model model = make_model(cfg, spec.width, spec.height, spec.n_frames);
  Trainer tr(model, gt.dataset, cfg);
  tr.run();
  const auto& logs = tr.logs();
  REQUIRE(logs.size() >= 100);
  Real first = 0, last = 0;
  for (int i = 0; i < 20; ++i) {
    first += logs[static_cast<size_t>(i)].terms.at("photo_static");
    last += logs[logs.size() - 1 - static_cast<size_t>(i)].terms.at("photo_static");
  }
  INFO("first-20 avg " << first / 20 << " last-20 avg " << last / 20);
  CHECK(last < first / 10.0);
}
