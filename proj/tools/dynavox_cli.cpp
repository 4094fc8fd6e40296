// Command-line front end: synth, preprocess, train, render, eval.

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>

#include "dynavox/motionmask.hpp"
#include "dynavox/synthval.hpp"
#include "dynavox/trainer.hpp"

using namespace dynavox;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int cmd_synth(const std::string& preset, const std::string& out, uint64_t seed, int frames,
              int width, int height) {
  synth::SceneSpec spec = synth::make_preset(preset, seed);
  if (frames > 0) spec.n_frames = frames;
  if (width > 0) spec.width = width;
  if (height > 0) spec.height = height;
  const synth::GroundTruth gt = synth::generate(spec);
  synth::write_dataset(gt, out);
  std::cout << "wrote " << spec.n_frames << " frames (" << spec.width << "x" << spec.height
            << ") to " << out << "\n";
  return 0;
}

int cmd_preprocess(const std::string& data, std::string out, Real tau, int dilate_radius,
                   int iterations, uint64_t seed, bool use_instance) {
  const io::Dataset ds = io::load_dataset(data);
  if (out.empty()) out = (fs::path(data) / "mask").string();
  fs::create_directories(out);

  mask::MotionMaskParams params;
  params.sampson_threshold = tau;
  params.dilation_radius = dilate_radius;
  params.ransac_iterations = iterations;
  params.seed = seed;

  int ransac_failures = 0;
  for (int i = 0; i < ds.n_frames(); ++i) {
    std::optional<mask::FlowField> fwd, bwd;
    if (i + 1 < ds.n_frames()) fwd = mask::FlowField::dense(ds.flow_fwd[static_cast<size_t>(i)]);
    if (i > 0) bwd = mask::FlowField::dense(ds.flow_bwd[static_cast<size_t>(i) - 1]);
    const Image* inst = (use_instance && !ds.instance_masks.empty())
                            ? &ds.instance_masks[static_cast<size_t>(i)]
                            : nullptr;
    const auto res = mask::motion_mask(fwd ? &*fwd : nullptr, bwd ? &*bwd : nullptr, inst, params);
    if (!res.ransac_ok) {
      ++ransac_failures;
      std::cerr << "warning: RANSAC failed for frame " << i << "; using the instance mask only\n";
    }
    Image png(res.mask.width, res.mask.height, 1);
    for (size_t k = 0; k < png.data.size(); ++k) png.data[k] = res.mask.data[k] != 0 ? 1.0 : 0.0;
    io::write_png(fs::path(out) / io::frame_name(i, ".png"), png);
  }
  std::cout << "wrote " << ds.n_frames() << " motion masks to " << out;
  if (ransac_failures) std::cout << " (" << ransac_failures << " RANSAC failures)";
  std::cout << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data, const std::string& out,
              int threads_override, int64_t seed_override) {
  io::TrainConfig cfg = io::load_config(config_path);
  if (threads_override > 0) cfg.threads = threads_override;
  if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
  io::validate_config(cfg);

  const io::Dataset ds = io::load_dataset(data);
  fs::create_directories(out);

  train::Model model = train::make_model(cfg, ds.width, ds.height, ds.n_frames());
  train::Trainer trainer(model, ds, cfg);

  std::ofstream metrics(fs::path(out) / "metrics.jsonl");
  int64_t last_ck = -1;
  trainer.run([&](const train::StepLog& log) {
    json j;
    j["step"] = log.step;
    j["total"] = log.total;
    for (const auto& [name, v] : log.terms) j[name] = v;
    metrics << j.dump() << "\n";
    metrics.flush();
    std::cout << "step " << log.step << " total " << log.total << std::endl;
    if (cfg.checkpoint_every > 0 && log.step / cfg.checkpoint_every != last_ck) {
      last_ck = log.step / cfg.checkpoint_every;
      io::write_checkpoint(fs::path(out) / ("ck_" + io::frame_name(static_cast<int>(log.step), ".dvx")),
                           train::to_checkpoint(model, log.step));
    }
  });
  io::write_checkpoint(fs::path(out) / "checkpoint.dvx", train::to_checkpoint(model, cfg.total_steps));
  std::cout << "wrote " << (fs::path(out) / "checkpoint.dvx").string() << "\n";
  return 0;
}

geom::CameraPose interpolate_pose(const geom::CameraPose& a, const geom::CameraPose& b, Real u) {
  // Slerp on the rotations, lerp on the centers.
  auto quat = [](const geom::CameraPose& p) {
    const Real angle = geom::norm3(p.rotation);
    Eigen::Vector3d axis(0, 0, 1);
    if (angle > 0) axis = Eigen::Vector3d(p.rotation[0], p.rotation[1], p.rotation[2]) / angle;
    return Eigen::Quaterniond(Eigen::AngleAxisd(angle, axis));
  };
  const Eigen::Quaterniond q = quat(a).slerp(u, quat(b));
  const Eigen::AngleAxisd aa(q);
  geom::CameraPose out;
  const Eigen::Vector3d w = aa.angle() * aa.axis();
  out.rotation = {w.x(), w.y(), w.z()};
  for (int c = 0; c < 3; ++c)
    out.translation[static_cast<size_t>(c)] =
        (1 - u) * a.translation[static_cast<size_t>(c)] + u * b.translation[static_cast<size_t>(c)];
  return out;
}

int cmd_render(const std::string& ck_path, const std::string& out, int fix_view, int sweep_time,
               Real fix_time, int interp_i, int interp_j, int steps, bool no_dynamic) {
  const train::Model model = train::from_checkpoint(io::read_checkpoint(ck_path));
  fs::create_directories(out);
  const bool dynamic_on = model.cfg.dynamic_enabled && !no_dynamic;

  struct Request {
    geom::CameraPose pose;
    Real time;
  };
  std::vector<Request> requests;
  if (fix_view >= 0) {
    if (fix_view >= model.n_frames) throw ValidationError("--fix-view out of range");
    const int n = std::max(2, sweep_time);
    for (int k = 0; k < n; ++k)
      requests.push_back({model.pose_of(fix_view), static_cast<Real>(k) / (n - 1)});
  } else {
    if (interp_i < 0 || interp_j < 0 || interp_i >= model.n_frames || interp_j >= model.n_frames)
      throw ValidationError("render needs --fix-view or --interpolate-poses/--to frame indices");
    const int n = std::max(2, steps);
    for (int k = 0; k < n; ++k) {
      const Real u = static_cast<Real>(k) / (n - 1);
      requests.push_back({interpolate_pose(model.pose_of(interp_i), model.pose_of(interp_j), u), fix_time});
    }
  }

  for (size_t k = 0; k < requests.size(); ++k) {
    const train::RenderedView view =
        train::render_view(model, requests[k].pose, requests[k].time, dynamic_on);
    io::write_png(fs::path(out) / io::frame_name(static_cast<int>(k), ".png"), view.rgb);
    io::write_pfm(fs::path(out) / ("depth_" + io::frame_name(static_cast<int>(k), ".pfm")), view.depth);
    if (dynamic_on)
      io::write_png(fs::path(out) / ("mask_" + io::frame_name(static_cast<int>(k), ".png")), view.mask);
  }
  std::cout << "rendered " << requests.size() << " views to " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& ck_path, const std::string& data, const std::string& out,
             const std::string& alignment, std::vector<int> frames, bool no_dynamic) {
  const train::Model model = train::from_checkpoint(io::read_checkpoint(ck_path));
  const io::Dataset ds = io::load_dataset(data);
  if (ds.width != model.base.width || ds.height != model.base.height)
    throw ValidationError("checkpoint and dataset resolutions differ");
  const bool dynamic_on = model.cfg.dynamic_enabled && !no_dynamic;

  if (frames.empty())
    for (int i = 0; i < ds.n_frames(); ++i) frames.push_back(i);

  json j;
  Real psnr_sum = 0, ssim_sum = 0, iou_sum = 0;
  int iou_count = 0;
  for (int i : frames) {
    if (i < 0 || i >= ds.n_frames()) throw ValidationError("eval frame index out of range");
    // Poses come from the checkpoint (they are the optimized variables);
    // times are the normalized frame indices.
    const train::RenderedView view =
        train::render_view(model, model.pose_of(i), ds.time_of(i), dynamic_on);
    psnr_sum += synth::psnr(view.rgb, ds.frames[static_cast<size_t>(i)]);
    ssim_sum += synth::ssim(view.rgb, ds.frames[static_cast<size_t>(i)]);
    if (dynamic_on && !ds.motion_masks.empty()) {
      Image bin(view.mask.width, view.mask.height, 1);
      for (size_t k = 0; k < bin.data.size(); ++k) bin.data[k] = view.mask.data[k] > 0.5 ? 1 : 0;
      iou_sum += mask_iou(bin, ds.motion_masks[static_cast<size_t>(i)]);
      ++iou_count;
    }
  }
  j["psnr"] = psnr_sum / static_cast<Real>(frames.size());
  j["ssim"] = ssim_sum / static_cast<Real>(frames.size());
  if (iou_count) j["mask_iou"] = iou_sum / iou_count;
  j["focal"] = model.focal();

  if (!ds.gt_poses.empty()) {
    const auto est = model.all_poses();
    const synth::Sim3 a = synth::umeyama_alignment(est, ds.gt_poses, alignment == "se3");
    j["ate"] = synth::ate_with_alignment(est, ds.gt_poses, a);
    const synth::RpeResult r = synth::rpe(est, ds.gt_poses, a.scale);
    j["rpe_trans"] = r.trans;
    j["rpe_rot_deg"] = r.rot_deg;
    j["alignment"] = alignment;
    j["trajectory_extent"] = synth::trajectory_extent(ds.gt_poses);
  }
  if (ds.gt_intrinsics) {
    j["gt_focal"] = ds.gt_intrinsics->focal;
    j["focal_rel_err"] = std::abs(model.focal() - ds.gt_intrinsics->focal) / ds.gt_intrinsics->focal;
  }

  const std::string text = j.dump(2);
  std::cout << text << "\n";
  if (!out.empty()) {
    std::ofstream f(out);
    f << text << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynavox: joint camera and dynamic radiance field reconstruction"};
  app.require_subcommand(1);

  std::string preset = "static_orbit", out_dir, data_dir, config_path, ck_path, eval_out;
  uint64_t seed = 0;
  int frames = 0, width = 0, height = 0;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset with ground truth");
  synth_cmd->add_option("--spec,--preset", preset,
                        "preset: static_orbit | rotation_only | one_mover | two_movers | forward");
  synth_cmd->add_option("--out", out_dir, "output dataset directory")->required();
  synth_cmd->add_option("--seed", seed, "generator seed");
  synth_cmd->add_option("--frames", frames, "frame count override");
  synth_cmd->add_option("--width", width, "image width override");
  synth_cmd->add_option("--height", height, "image height override");

  Real tau = 1.0;
  int dilate_radius = 3, iterations = 500;
  bool no_instance = false;
  std::string mask_out;
  auto* pre_cmd = app.add_subcommand("preprocess", "compute motion masks from flow");
  pre_cmd->add_option("--data", data_dir, "dataset directory")->required();
  pre_cmd->add_option("--out", mask_out, "mask output directory (default: <data>/mask)");
  pre_cmd->add_option("--tau", tau, "Sampson threshold (squared, diagonal=1000 units)");
  pre_cmd->add_option("--dilate", dilate_radius, "dilation radius in pixels");
  pre_cmd->add_option("--iters", iterations, "RANSAC iterations");
  pre_cmd->add_option("--seed", seed, "RANSAC seed");
  pre_cmd->add_flag("--no-instance", no_instance, "ignore instance masks");

  int threads = -1;
  int64_t seed_override = -1;
  auto* train_cmd = app.add_subcommand("train", "run the joint optimization");
  train_cmd->add_option("--config", config_path, "config file (key = value)")->required();
  train_cmd->add_option("--data", data_dir, "dataset directory")->required();
  train_cmd->add_option("--out", out_dir, "output directory")->required();
  train_cmd->add_option("--threads", threads, "worker threads (overrides config)");
  train_cmd->add_option("--seed", seed_override, "seed (overrides config)");

  int fix_view = -1, sweep_time = 0, interp_i = -1, interp_j = -1, steps = 10;
  Real fix_time = 0;
  bool no_dynamic = false;
  auto* render_cmd = app.add_subcommand("render", "render novel space-time views from a checkpoint");
  render_cmd->add_option("--checkpoint", ck_path, "checkpoint file")->required();
  render_cmd->add_option("--out", out_dir, "output directory")->required();
  render_cmd->add_option("--fix-view", fix_view, "render from training view K, sweeping time");
  render_cmd->add_option("--sweep-time", sweep_time, "number of time samples for --fix-view");
  render_cmd->add_option("--fix-time", fix_time, "fixed time in [0,1] for pose interpolation");
  render_cmd->add_option("--interpolate-poses", interp_i, "first frame index for pose interpolation");
  render_cmd->add_option("--to", interp_j, "second frame index for pose interpolation");
  render_cmd->add_option("--steps", steps, "number of interpolated poses");
  render_cmd->add_flag("--no-dynamic", no_dynamic, "render the static branch only");

  std::string alignment = "sim3";
  std::vector<int> eval_frames;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM and trajectory metrics against a dataset");
  eval_cmd->add_option("--checkpoint", ck_path, "checkpoint file")->required();
  eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
  eval_cmd->add_option("--out", eval_out, "write the JSON report here");
  eval_cmd->add_option("--alignment", alignment, "trajectory alignment: sim3 | se3")
      ->check(CLI::IsMember({"sim3", "se3"}));
  eval_cmd->add_option("--frames", eval_frames, "evaluate these frames only");
  eval_cmd->add_flag("--no-dynamic", no_dynamic, "render the static branch only");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth_cmd->parsed()) return cmd_synth(preset, out_dir, seed, frames, width, height);
    if (pre_cmd->parsed())
      return cmd_preprocess(data_dir, mask_out, tau, dilate_radius, iterations, seed, !no_instance);
    if (train_cmd->parsed()) return cmd_train(config_path, data_dir, out_dir, threads, seed_override);
    if (render_cmd->parsed())
      return cmd_render(ck_path, out_dir, fix_view, sweep_time, fix_time, interp_i, interp_j, steps,
                        no_dynamic);
    if (eval_cmd->parsed()) return cmd_eval(ck_path, data_dir, eval_out, alignment, eval_frames, no_dynamic);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
