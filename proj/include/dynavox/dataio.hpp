#pragma once

// Dataset layout, prior file formats, config parsing, checkpoints.
//
// Layout of a dataset directory:
//   frames/%05d.png        8-bit RGB
//   flow_fwd/%05d.flo      flow i -> i+1, for i in [0, N-2]
//   flow_bwd/%05d.flo      flow i -> i-1, for i in [1, N-1]
//   disp/%05d.pfm          disparity prior (grayscale PFM)
//   mask/%05d.png          motion mask, 255 = dynamic
//   instance/%05d.png      optional instance masks
//   gt/poses.txt           optional: 12 reals per line, row-major 3x4
//                          camera-to-world
//   gt/intrinsics.txt      optional: focal cx cy
//   gt/depth/%05d.pfm      optional z-depth
// Poses are stored camera-to-world everywhere (matching ray generation).

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

#include <png.h>

#include "dynavox/geometry.hpp"
#include "dynavox/image.hpp"

namespace dynavox::io {

namespace fs = std::filesystem;

inline std::string frame_name(int index, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d%s", index, ext);
  return buf;
}

// --- Middlebury .flo --------------------------------------------------------

inline constexpr float kFloMagic = 202021.25f;

inline void write_flow(const fs::path& path, const Image& flow) {
  DVX_CHECK_MSG(flow.channels == 2, "flow image must have 2 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  const float magic = kFloMagic;
  const int32_t w = flow.width, h = flow.height;
  f.write(reinterpret_cast<const char*>(&magic), 4);
  f.write(reinterpret_cast<const char*>(&w), 4);
  f.write(reinterpret_cast<const char*>(&h), 4);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 2; ++c) {
        const float v = static_cast<float>(flow.at(x, y, c));
        f.write(reinterpret_cast<const char*>(&v), 4);
      }
  if (!f) throw IoError("short write to " + path.string());
}

inline Image read_flow(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  float magic = 0;
  int32_t w = 0, h = 0;
  f.read(reinterpret_cast<char*>(&magic), 4);
  if (!f) throw IoError(path.string() + ": truncated header at byte offset 0");
  if (magic != kFloMagic)
    throw IoError(path.string() + ": bad magic at byte offset 0 (expected 202021.25)");
  f.read(reinterpret_cast<char*>(&w), 4);
  f.read(reinterpret_cast<char*>(&h), 4);
  if (!f) throw IoError(path.string() + ": truncated header at byte offset 4");
  if (w <= 0 || h <= 0 || w > 1 << 20 || h > 1 << 20)
    throw IoError(path.string() + ": implausible dimensions " + std::to_string(w) + "x" + std::to_string(h));
  Image out(w, h, 2);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 2; ++c) {
        float v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        if (!f)
          throw IoError(path.string() + ": truncated payload at byte offset " +
                        std::to_string(12 + 4 * (2 * (static_cast<int64_t>(y) * w + x) + c)));
        out.at(x, y, c) = v;
      }
  return out;
}

// --- PFM ---------------------------------------------------------------------
//
// "Pf" grayscale / "PF" color, negative scale = little-endian, rows stored
// bottom-up.

inline void write_pfm(const fs::path& path, const Image& img) {
  DVX_CHECK_MSG(img.channels == 1 || img.channels == 3, "pfm supports 1 or 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << (img.channels == 1 ? "Pf" : "PF") << "\n" << img.width << " " << img.height << "\n-1.0\n";
  for (int y = img.height - 1; y >= 0; --y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        const float v = static_cast<float>(img.at(x, y, c));
        f.write(reinterpret_cast<const char*>(&v), 4);
      }
  if (!f) throw IoError("short write to " + path.string());
}

inline Image read_pfm(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string tag;
  f >> tag;
  int channels;
  if (tag == "Pf")
    channels = 1;
  else if (tag == "PF")
    channels = 3;
  else
    throw IoError(path.string() + ": bad PFM header '" + tag + "' (expected Pf or PF)");
  int w = 0, h = 0;
  double scale = 0;
  f >> w >> h >> scale;
  if (!f || w <= 0 || h <= 0 || scale == 0)
    throw IoError(path.string() + ": malformed PFM header");
  f.get();  // single whitespace after the scale
  const bool little_endian = scale < 0;
  Image out(w, h, channels);
  std::vector<unsigned char> row(static_cast<size_t>(w) * channels * 4);
  for (int y = h - 1; y >= 0; --y) {
    f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!f) throw IoError(path.string() + ": truncated PFM payload at row " + std::to_string(h - 1 - y));
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        unsigned char b[4];
        std::memcpy(b, &row[(static_cast<size_t>(x) * channels + c) * 4], 4);
        if (!little_endian) std::swap(b[0], b[3]), std::swap(b[1], b[2]);
        float v;
        std::memcpy(&v, b, 4);
        out.at(x, y, c) = v;
      }
  }
  return out;
}

// --- PNG ---------------------------------------------------------------------

inline void write_png(const fs::path& path, const Image& img) {
  DVX_CHECK_MSG(img.channels == 1 || img.channels == 3, "png writer supports 1 or 3 channels");
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng write error for " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(img.width) * img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        const Real v = std::clamp(img.at(x, y, c), Real(0), Real(1));
        row[static_cast<size_t>(x) * img.channels + c] = static_cast<png_byte>(std::lround(v * 255.0));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline Image read_png(const fs::path& path) {
  FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) throw IoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError(path.string() + ": not a valid PNG");
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int ch = static_cast<int>(png_get_channels(png, info));
  if (ch != 1 && ch != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError(path.string() + ": unsupported channel count " + std::to_string(ch));
  }
  Image out(w, h, ch);
  std::vector<png_byte> row(static_cast<size_t>(w) * ch);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) out.at(x, y, c) = row[static_cast<size_t>(x) * ch + c] / 255.0;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return out;
}

// --- poses / intrinsics ------------------------------------------------------

inline void write_poses(const fs::path& path, const std::vector<geom::CameraPose>& poses) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.precision(17);
  for (const auto& p : poses) {
    const auto m = geom::pose_matrix(p);
    for (int i = 0; i < 12; ++i) f << m[static_cast<size_t>(i)] << (i == 11 ? "" : " ");
    f << "\n";
  }
}

inline std::vector<geom::CameraPose> read_poses(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<geom::CameraPose> out;
  std::string line;
  int idx = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::array<Real, 16> m{};
    for (int i = 0; i < 12; ++i) {
      if (!(ls >> m[static_cast<size_t>(i)]))
        throw IoError(path.string() + ": line " + std::to_string(idx + 1) + " needs 12 reals (row-major 3x4)");
    }
    m[15] = 1;
    out.push_back(geom::pose_from_matrix(m, idx++));
  }
  return out;
}

// --- Dataset -----------------------------------------------------------------

struct Dataset {
  int width = 0, height = 0;
  std::vector<Image> frames;    // RGB in [0,1]
  std::vector<Image> flow_fwd;  // index i: flow i -> i+1 (N-1 entries)
  std::vector<Image> flow_bwd;  // index i: flow (i+1) -> i (N-1 entries)
  std::vector<Image> disparity;
  std::vector<Image> motion_masks;            // 1 = dynamic
  std::vector<Image> instance_masks;          // optional, may be empty
  std::vector<geom::CameraPose> gt_poses;     // optional
  std::vector<Image> gt_depth;                // optional z-depth
  std::optional<geom::Intrinsics> gt_intrinsics;

  int n_frames() const { return static_cast<int>(frames.size()); }
  Real time_of(int frame) const {
    return n_frames() > 1 ? static_cast<Real>(frame) / (n_frames() - 1) : 0.0;
  }
};

inline Dataset load_dataset(const fs::path& dir) {
  std::vector<std::string> problems;
  auto complain = [&](const std::string& s) { problems.push_back(s); };

  if (!fs::is_directory(dir)) throw ValidationError(dir.string() + " is not a directory");

  Dataset ds;
  const fs::path frames_dir = dir / "frames";
  if (!fs::is_directory(frames_dir)) throw ValidationError("missing frames/ under " + dir.string());
  int n = 0;
  while (fs::exists(frames_dir / frame_name(n, ".png"))) ++n;
  if (n == 0) throw ValidationError("no frames/00000.png in " + dir.string());

  for (int i = 0; i < n; ++i) ds.frames.push_back(read_png(frames_dir / frame_name(i, ".png")));
  ds.width = ds.frames[0].width;
  ds.height = ds.frames[0].height;
  for (int i = 0; i < n; ++i)
    if (ds.frames[static_cast<size_t>(i)].width != ds.width || ds.frames[static_cast<size_t>(i)].height != ds.height)
      complain("frames/" + frame_name(i, ".png") + " has resolution " +
               std::to_string(ds.frames[static_cast<size_t>(i)].width) + "x" +
               std::to_string(ds.frames[static_cast<size_t>(i)].height) + ", expected " +
               std::to_string(ds.width) + "x" + std::to_string(ds.height));

  auto check_size = [&](const Image& img, const std::string& what) {
    if (img.width != ds.width || img.height != ds.height)
      complain(what + " resolution mismatch: " + std::to_string(img.width) + "x" + std::to_string(img.height));
  };

  for (int i = 0; i + 1 < n; ++i) {
    const fs::path p = dir / "flow_fwd" / frame_name(i, ".flo");
    if (!fs::exists(p)) {
      complain("missing " + p.string());
      continue;
    }
    ds.flow_fwd.push_back(read_flow(p));
    check_size(ds.flow_fwd.back(), p.string());
  }
  for (int i = 0; i + 1 < n; ++i) {
    const fs::path p = dir / "flow_bwd" / frame_name(i + 1, ".flo");
    if (!fs::exists(p)) {
      complain("missing " + p.string());
      continue;
    }
    ds.flow_bwd.push_back(read_flow(p));
    check_size(ds.flow_bwd.back(), p.string());
  }
  for (int i = 0; i < n; ++i) {
    const fs::path p = dir / "disp" / frame_name(i, ".pfm");
    if (!fs::exists(p)) {
      complain("missing " + p.string());
      continue;
    }
    ds.disparity.push_back(read_pfm(p));
    check_size(ds.disparity.back(), p.string());
  }
  for (int i = 0; i < n; ++i) {
    const fs::path p = dir / "mask" / frame_name(i, ".png");
    if (!fs::exists(p)) {
      complain("missing " + p.string());
      continue;
    }
    Image m = read_png(p);
    check_size(m, p.string());
    Image bin(m.width, m.height, 1);
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) bin.at(x, y) = m.at(x, y, 0) > 0.5 ? 1 : 0;
    ds.motion_masks.push_back(std::move(bin));
  }
  if (fs::is_directory(dir / "instance")) {
    for (int i = 0; i < n; ++i) {
      const fs::path p = dir / "instance" / frame_name(i, ".png");
      if (!fs::exists(p)) {
        complain("instance/ present but missing " + p.string());
        break;
      }
      Image m = read_png(p);
      check_size(m, p.string());
      Image bin(m.width, m.height, 1);
      for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) bin.at(x, y) = m.at(x, y, 0) > 0.5 ? 1 : 0;
      ds.instance_masks.push_back(std::move(bin));
    }
  }
  if (fs::exists(dir / "gt" / "poses.txt")) {
    ds.gt_poses = read_poses(dir / "gt" / "poses.txt");
    if (static_cast<int>(ds.gt_poses.size()) != n)
      complain("gt/poses.txt has " + std::to_string(ds.gt_poses.size()) + " poses for " + std::to_string(n) + " frames");
  }
  if (fs::exists(dir / "gt" / "intrinsics.txt")) {
    std::ifstream f(dir / "gt" / "intrinsics.txt");
    Real focal, cx, cy;
    if (f >> focal >> cx >> cy)
      ds.gt_intrinsics = geom::Intrinsics{focal, cx, cy, ds.width, ds.height};
    else
      complain("gt/intrinsics.txt is malformed (expected: focal cx cy)");
  }
  if (fs::is_directory(dir / "gt" / "depth")) {
    for (int i = 0; i < n; ++i) {
      const fs::path p = dir / "gt" / "depth" / frame_name(i, ".pfm");
      if (!fs::exists(p)) {
        complain("gt/depth present but missing " + p.string());
        break;
      }
      ds.gt_depth.push_back(read_pfm(p));
    }
  }

  if (!problems.empty()) {
    std::string report = "dataset validation failed for " + dir.string() + ":";
    for (const auto& s : problems) report += "\n  - " + s;
    throw ValidationError(report);
  }
  return ds;
}

// --- Config ------------------------------------------------------------------
//
// Flat key=value text with a typed schema; '#' starts a comment. Every field
// has a default, unknown keys are rejected.

struct TrainConfig {
  // run
  int64_t total_steps = 10000;
  int batch_rays = 1024;
  uint64_t seed = 0;
  int threads = 1;
  int log_every = 50;
  int checkpoint_every = 1000;

  // scene parameterization
  std::string parameterization = "contraction";  // contraction | ndc
  Real near = 0.5;
  Real far = 100.0;
  int n_samples = 128;
  bool stratified = true;
  std::string background = "black";  // black | white

  // voxel fields
  std::vector<int> static_resolutions{33, 65, 129};
  std::vector<int> static_upsample_steps{2000, 4000};
  std::vector<int> dynamic_resolutions{25, 49, 97};
  std::vector<int> dynamic_upsample_steps{3000, 5000};
  int density_rank = 4;
  int appearance_rank = 12;
  Real init_scale = 0.1;
  Real density_shift = -10.0;

  // heads
  int color_width = 64;
  int view_enc_levels = 2;
  int pos_enc_levels = 5;
  int time_enc_levels = 4;
  int time_head_width = 64;
  int deform_width = 128;
  int deform_depth = 4;
  Real deform_max_disp = 0.25;  // fraction of the box extent per axis
  int sceneflow_width = 128;
  int sceneflow_depth = 4;
  Real sceneflow_max_disp = 0.5;  // world units
  Real mask_head_bias = -4.0;

  // optimizer
  Real lr_heads = 1e-3;
  Real lr_voxels = 2e-2;
  Real lr_poses = 3e-4;
  Real adam_beta1 = 0.9;
  Real adam_beta2 = 0.99;
  Real adam_eps = 1e-8;
  Real pose_lr_final_frac = 0.1;

  // loss weights
  Real w_reproj_s = 0.02;
  Real w_disp_s = 0.04;
  Real w_monodepth_s = 0.04;
  Real w_reproj_d = 0.02;
  Real w_disp_d = 0.04;
  Real w_monodepth_d = 0.04;
  Real w_sceneflow_reg = 0.1;
  Real w_mask = 0.1;
  Real w_distortion = 0.01;
  Real anneal_horizon_frac = 0.5;

  // schedule
  Real warmup_frac = 0.1;       // static + pose only
  Real static_batch_frac = 0.5; // guaranteed fraction of M=0 rays
  bool optimize_poses = true;
  bool optimize_focal = true;
  bool dynamic_enabled = true;
  std::vector<int> holdout_frames{};
};

namespace detail {

struct ConfigField {
  enum class Type { I64, I32, U64, R, B, S, IList };
  Type type;
  void* TrainConfig::* dummy = nullptr;  // unused; offsets handled via lambdas
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::string tok;
  std::istringstream is(s);
  while (std::getline(is, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stoi(tok));
  }
  return out;
}

inline std::string int_list_str(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ValidationError("bad boolean value '" + s + "'");
}

inline const std::map<std::string, ConfigField>& config_schema() {
  static const std::map<std::string, ConfigField> schema = [] {
    std::map<std::string, ConfigField> m;
    auto num = [&m](const char* key, auto member) {
      using T = std::decay_t<decltype(std::declval<TrainConfig>().*member)>;
      ConfigField f;
      f.set = [member](TrainConfig& c, const std::string& v) {
        if constexpr (std::is_same_v<T, Real>)
          c.*member = std::stod(v);
        else if constexpr (std::is_same_v<T, uint64_t>)
          c.*member = std::stoull(v);
        else if constexpr (std::is_same_v<T, int64_t>)
          c.*member = std::stoll(v);
        else
          c.*member = std::stoi(v);
      };
      f.get = [member](const TrainConfig& c) {
        if constexpr (std::is_same_v<T, Real>) {
          std::ostringstream os;
          os.precision(17);
          os << c.*member;
          return os.str();
        } else {
          return std::to_string(c.*member);
        }
      };
      m[key] = std::move(f);
    };
    auto str = [&m](const char* key, auto member) {
      ConfigField f;
      f.set = [member](TrainConfig& c, const std::string& v) { c.*member = v; };
      f.get = [member](const TrainConfig& c) { return c.*member; };
      m[key] = std::move(f);
    };
    auto boolean = [&m](const char* key, auto member) {
      ConfigField f;
      f.set = [member](TrainConfig& c, const std::string& v) { c.*member = parse_bool(v); };
      f.get = [member](const TrainConfig& c) { return (c.*member) ? std::string("true") : std::string("false"); };
      m[key] = std::move(f);
    };
    auto ilist = [&m](const char* key, auto member) {
      ConfigField f;
      f.set = [member](TrainConfig& c, const std::string& v) { c.*member = parse_int_list(v); };
      f.get = [member](const TrainConfig& c) { return int_list_str(c.*member); };
      m[key] = std::move(f);
    };

    num("total_steps", &TrainConfig::total_steps);
    num("batch_rays", &TrainConfig::batch_rays);
    num("seed", &TrainConfig::seed);
    num("threads", &TrainConfig::threads);
    num("log_every", &TrainConfig::log_every);
    num("checkpoint_every", &TrainConfig::checkpoint_every);
    str("parameterization", &TrainConfig::parameterization);
    num("near", &TrainConfig::near);
    num("far", &TrainConfig::far);
    num("n_samples", &TrainConfig::n_samples);
    boolean("stratified", &TrainConfig::stratified);
    str("background", &TrainConfig::background);
    ilist("static_resolutions", &TrainConfig::static_resolutions);
    ilist("static_upsample_steps", &TrainConfig::static_upsample_steps);
    ilist("dynamic_resolutions", &TrainConfig::dynamic_resolutions);
    ilist("dynamic_upsample_steps", &TrainConfig::dynamic_upsample_steps);
    num("density_rank", &TrainConfig::density_rank);
    num("appearance_rank", &TrainConfig::appearance_rank);
    num("init_scale", &TrainConfig::init_scale);
    num("density_shift", &TrainConfig::density_shift);
    num("color_width", &TrainConfig::color_width);
    num("view_enc_levels", &TrainConfig::view_enc_levels);
    num("pos_enc_levels", &TrainConfig::pos_enc_levels);
    num("time_enc_levels", &TrainConfig::time_enc_levels);
    num("time_head_width", &TrainConfig::time_head_width);
    num("deform_width", &TrainConfig::deform_width);
    num("deform_depth", &TrainConfig::deform_depth);
    num("deform_max_disp", &TrainConfig::deform_max_disp);
    num("sceneflow_width", &TrainConfig::sceneflow_width);
    num("sceneflow_depth", &TrainConfig::sceneflow_depth);
    num("sceneflow_max_disp", &TrainConfig::sceneflow_max_disp);
    num("mask_head_bias", &TrainConfig::mask_head_bias);
    num("lr_heads", &TrainConfig::lr_heads);
    num("lr_voxels", &TrainConfig::lr_voxels);
    num("lr_poses", &TrainConfig::lr_poses);
    num("adam_beta1", &TrainConfig::adam_beta1);
    num("adam_beta2", &TrainConfig::adam_beta2);
    num("adam_eps", &TrainConfig::adam_eps);
    num("pose_lr_final_frac", &TrainConfig::pose_lr_final_frac);
    num("w_reproj_s", &TrainConfig::w_reproj_s);
    num("w_disp_s", &TrainConfig::w_disp_s);
    num("w_monodepth_s", &TrainConfig::w_monodepth_s);
    num("w_reproj_d", &TrainConfig::w_reproj_d);
    num("w_disp_d", &TrainConfig::w_disp_d);
    num("w_monodepth_d", &TrainConfig::w_monodepth_d);
    num("w_sceneflow_reg", &TrainConfig::w_sceneflow_reg);
    num("w_mask", &TrainConfig::w_mask);
    num("w_distortion", &TrainConfig::w_distortion);
    num("anneal_horizon_frac", &TrainConfig::anneal_horizon_frac);
    num("warmup_frac", &TrainConfig::warmup_frac);
    num("static_batch_frac", &TrainConfig::static_batch_frac);
    boolean("optimize_poses", &TrainConfig::optimize_poses);
    boolean("optimize_focal", &TrainConfig::optimize_focal);
    boolean("dynamic_enabled", &TrainConfig::dynamic_enabled);
    ilist("holdout_frames", &TrainConfig::holdout_frames);
    return m;
  }();
  return schema;
}

}  // namespace detail

inline void validate_config(const TrainConfig& c) {
  std::vector<std::string> problems;
  if (c.total_steps < 0) problems.push_back("total_steps must be >= 0");
  if (c.batch_rays < 1) problems.push_back("batch_rays must be >= 1");
  if (c.n_samples < 2) problems.push_back("n_samples must be >= 2");
  if (c.parameterization != "contraction" && c.parameterization != "ndc")
    problems.push_back("parameterization must be 'contraction' or 'ndc'");
  if (c.background != "black" && c.background != "white")
    problems.push_back("background must be 'black' or 'white'");
  if (!(c.near > 0 && c.near < c.far)) problems.push_back("need 0 < near < far");
  auto check_sched = [&](const std::vector<int>& res, const std::vector<int>& steps, const char* what) {
    if (res.empty()) problems.push_back(std::string(what) + "_resolutions must not be empty");
    for (size_t i = 0; i + 1 < res.size(); ++i)
      if (res[i + 1] < res[i]) problems.push_back(std::string(what) + "_resolutions must be non-decreasing");
    for (int r : res)
      if (r < 2) problems.push_back(std::string(what) + "_resolutions entries must be >= 2");
    if (steps.size() + 1 != res.size())
      problems.push_back(std::string(what) + "_upsample_steps needs one entry per resolution increase");
    for (size_t i = 0; i + 1 < steps.size(); ++i)
      if (steps[i + 1] <= steps[i]) problems.push_back(std::string(what) + "_upsample_steps must be strictly increasing");
  };
  check_sched(c.static_resolutions, c.static_upsample_steps, "static");
  check_sched(c.dynamic_resolutions, c.dynamic_upsample_steps, "dynamic");
  for (Real w : {c.w_reproj_s, c.w_disp_s, c.w_monodepth_s, c.w_reproj_d, c.w_disp_d, c.w_monodepth_d,
                 c.w_sceneflow_reg, c.w_mask, c.w_distortion})
    if (!(w >= 0) || !std::isfinite(w)) problems.push_back("loss weights must be finite and >= 0");
  if (c.threads < 1) problems.push_back("threads must be >= 1");
  if (!problems.empty()) {
    std::string report = "config validation failed:";
    for (const auto& p : problems) report += "\n  - " + p;
    throw ValidationError(report);
  }
}

inline TrainConfig parse_config_text(const std::string& text) {
  TrainConfig c;
  const auto& schema = detail::config_schema();
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const auto b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = schema.find(key);
    if (it == schema.end())
      throw ValidationError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    try {
      it->second.set(c, value);
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception& e) {
      throw ValidationError("config line " + std::to_string(lineno) + ": bad value for '" + key + "': " + e.what());
    }
  }
  validate_config(c);
  return c;
}

inline TrainConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  return parse_config_text(os.str());
}

// Canonical serialization: every key in schema order. Used for the config
// hash embedded in checkpoints.
inline std::string config_text(const TrainConfig& c) {
  std::string out;
  for (const auto& [key, field] : detail::config_schema()) out += key + " = " + field.get(c) + "\n";
  return out;
}

inline uint64_t config_hash(const TrainConfig& c) {
  const std::string text = config_text(c);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char ch : text) h = (h ^ static_cast<uint8_t>(ch)) * 0x100000001b3ULL;
  return h;
}

// --- Checkpoint --------------------------------------------------------------
//
// Self-describing container: header, the full canonical config text, and
// named float64 tensors.

struct Checkpoint {
  uint32_t version = 1;
  uint64_t cfg_hash = 0;
  std::string cfg_text;
  int64_t step = 0;
  int n_frames = 0, width = 0, height = 0;
  Real focal_base = 0;
  std::vector<std::pair<std::string, Array>> tensors;

  const Array* find(const std::string& name) const {
    for (const auto& [n, a] : tensors)
      if (n == name) return &a;
    return nullptr;
  }
};

inline void write_checkpoint(const fs::path& path, const Checkpoint& ck) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  auto w32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  auto w64 = [&](uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
  f.write("DVXC", 4);
  w32(ck.version);
  w64(ck.cfg_hash);
  w32(static_cast<uint32_t>(ck.cfg_text.size()));
  f.write(ck.cfg_text.data(), static_cast<std::streamsize>(ck.cfg_text.size()));
  w64(static_cast<uint64_t>(ck.step));
  w32(static_cast<uint32_t>(ck.n_frames));
  w32(static_cast<uint32_t>(ck.width));
  w32(static_cast<uint32_t>(ck.height));
  f.write(reinterpret_cast<const char*>(&ck.focal_base), 8);
  w32(static_cast<uint32_t>(ck.tensors.size()));
  for (const auto& [name, arr] : ck.tensors) {
    w32(static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    w32(static_cast<uint32_t>(arr.shape.size()));
    for (int d : arr.shape) w32(static_cast<uint32_t>(d));
    f.write(reinterpret_cast<const char*>(arr.data.data()), static_cast<std::streamsize>(arr.numel() * 8));
  }
  if (!f) throw IoError("short write to " + path.string());
}

inline Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "DVXC", 4) != 0) throw IoError(path.string() + ": not a checkpoint");
  auto r32 = [&]() {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  auto r64 = [&]() {
    uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    return v;
  };
  Checkpoint ck;
  ck.version = r32();
  if (ck.version != 1) throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(ck.version));
  ck.cfg_hash = r64();
  const uint32_t cfg_len = r32();
  ck.cfg_text.resize(cfg_len);
  f.read(ck.cfg_text.data(), cfg_len);
  ck.step = static_cast<int64_t>(r64());
  ck.n_frames = static_cast<int>(r32());
  ck.width = static_cast<int>(r32());
  ck.height = static_cast<int>(r32());
  f.read(reinterpret_cast<char*>(&ck.focal_base), 8);
  const uint32_t n_tensors = r32();
  if (!f) throw IoError(path.string() + ": truncated checkpoint header");
  for (uint32_t i = 0; i < n_tensors; ++i) {
    const uint32_t name_len = r32();
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const uint32_t ndim = r32();
    std::vector<int> shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int>(r32());
    Array arr(shape);
    f.read(reinterpret_cast<char*>(arr.data.data()), static_cast<std::streamsize>(arr.numel() * 8));
    if (!f) throw IoError(path.string() + ": truncated tensor '" + name + "'");
    ck.tensors.emplace_back(std::move(name), std::move(arr));
  }
  return ck;
}

}  // namespace dynavox::io
