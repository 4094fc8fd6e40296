#include <catch2/catch_amalgamated.hpp>

#include "dynavox/dataio.hpp"
#include "dynavox/synthval.hpp"

using namespace dynavox;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("dvx_test_" + std::to_string(splitmix64(reinterpret_cast<uintptr_t>(this))));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Image random_image(Rng& rng, int w, int h, int c, Real lo = -10, Real hi = 10) {
  Image img(w, h, c);
  for (auto& v : img.data) v = rng.uniform(lo, hi);
  return img;
}

}  // namespace

TEST_CASE("flo files round trip bit-exactly at float32 precision") {
  TempDir dir;
  Rng rng(3);
  Image flow = random_image(rng, 17, 9, 2);
  // Quantize to float32 so the round trip is exact.
  for (auto& v : flow.data) v = static_cast<float>(v);
  io::write_flow(dir.path / "a.flo", flow);
  const Image back = io::read_flow(dir.path / "a.flo");
  REQUIRE(back.same_size(flow));
  for (size_t i = 0; i < flow.data.size(); ++i) CHECK(back.data[i] == flow.data[i]);
}

TEST_CASE("flo reader rejects a wrong magic with the byte offset") {
  TempDir dir;
  {
    std::ofstream f(dir.path / "bad.flo", std::ios::binary);
    const float wrong = 1234.5f;
    const int32_t w = 1, h = 1;
    f.write(reinterpret_cast<const char*>(&wrong), 4);
    f.write(reinterpret_cast<const char*>(&w), 4);
    f.write(reinterpret_cast<const char*>(&h), 4);
    const float uv[2] = {0, 0};
    f.write(reinterpret_cast<const char*>(uv), 8);
  }
  CHECK_THROWS_WITH(io::read_flow(dir.path / "bad.flo"), Catch::Matchers::ContainsSubstring("magic"));
}

TEST_CASE("flo reader names the byte offset of a truncated payload") {
  TempDir dir;
  Image flow(3, 2, 2, 1.0);
  io::write_flow(dir.path / "t.flo", flow);
  // Drop the last 4 bytes.
  const auto full = fs::file_size(dir.path / "t.flo");
  fs::resize_file(dir.path / "t.flo", full - 4);
  CHECK_THROWS_WITH(io::read_flow(dir.path / "t.flo"), Catch::Matchers::ContainsSubstring("offset"));
}

TEST_CASE("a 2x1 flow with u = (1,-1) costs 24 bytes after the magic") {
  TempDir dir;
  Image flow(2, 1, 2);
  flow.at(0, 0, 0) = 1.0;
  flow.at(1, 0, 0) = -1.0;
  io::write_flow(dir.path / "s.flo", flow);
  CHECK(fs::file_size(dir.path / "s.flo") - 4 == 24);  // dims + 2px * (u,v) * 4B
}

TEST_CASE("pfm files round trip bit-exactly, grayscale and color") {
  TempDir dir;
  Rng rng(7);
  for (int c : {1, 3}) {
    Image img = random_image(rng, 13, 6, c);
    for (auto& v : img.data) v = static_cast<float>(v);
    io::write_pfm(dir.path / "x.pfm", img);
    const Image back = io::read_pfm(dir.path / "x.pfm");
    REQUIRE(back.same_size(img));
    for (size_t i = 0; i < img.data.size(); ++i) CHECK(back.data[i] == img.data[i]);
  }
}

TEST_CASE("pfm header is enforced and the scale sign governs endianness") {
  TempDir dir;
  {
    std::ofstream f(dir.path / "bad.pfm", std::ios::binary);
    f << "P5\n2 2\n-1.0\n";
  }
  CHECK_THROWS_WITH(io::read_pfm(dir.path / "bad.pfm"), Catch::Matchers::ContainsSubstring("Pf"));

  // Hand-write a big-endian (positive scale) grayscale PFM.
  {
    std::ofstream f(dir.path / "be.pfm", std::ios::binary);
    f << "Pf\n2 1\n1.0\n";
    auto write_be = [&](float v) {
      unsigned char b[4];
      std::memcpy(b, &v, 4);
      std::swap(b[0], b[3]);
      std::swap(b[1], b[2]);
      f.write(reinterpret_cast<const char*>(b), 4);
    };
    write_be(0.25f);
    write_be(-3.5f);
  }
  const Image be = io::read_pfm(dir.path / "be.pfm");
  CHECK(be.at(0, 0) == 0.25);
  CHECK(be.at(1, 0) == -3.5);
}

TEST_CASE("png round trips exactly on the 8-bit grid") {
  TempDir dir;
  Rng rng(11);
  for (int c : {1, 3}) {
    Image img(9, 7, c);
    for (auto& v : img.data) v = static_cast<Real>(rng.uniform_int(256)) / 255.0;
    io::write_png(dir.path / "i.png", img);
    const Image back = io::read_png(dir.path / "i.png");
    REQUIRE(back.same_size(img));
    for (size_t i = 0; i < img.data.size(); ++i) CHECK(std::abs(back.data[i] - img.data[i]) < 1e-12);
  }
  CHECK_THROWS_AS(io::read_png(dir.path / "missing.png"), IoError);
}

TEST_CASE("poses round trip through the 3x4 text format") {
  TempDir dir;
  Rng rng(13);
  std::vector<geom::CameraPose> poses;
  for (int i = 0; i < 5; ++i) {
    geom::CameraPose p;
    p.rotation = geom::mul3(geom::normalized3({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}),
                            rng.uniform(0, 2.5));
    p.translation = {rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)};
    p.frame_index = i;
    poses.push_back(p);
  }
  io::write_poses(dir.path / "poses.txt", poses);
  const auto back = io::read_poses(dir.path / "poses.txt");
  REQUIRE(back.size() == poses.size());
  for (size_t i = 0; i < poses.size(); ++i) {
    const auto a = geom::pose_matrix(poses[i]);
    const auto b = geom::pose_matrix(back[i]);
    for (int k = 0; k < 16; ++k) CHECK(std::abs(a[static_cast<size_t>(k)] - b[static_cast<size_t>(k)]) < 1e-12);
  }
}

TEST_CASE("config: defaults survive a canonical-text round trip") {
  const io::TrainConfig def;
  const std::string text = io::config_text(def);
  const io::TrainConfig back = io::parse_config_text(text);
  CHECK(io::config_text(back) == text);
  CHECK(io::config_hash(back) == io::config_hash(def));
  CHECK(back.lr_voxels == 2e-2);
  CHECK(back.adam_beta2 == 0.99);
  CHECK(back.density_shift == -10.0);
  CHECK(back.static_resolutions == std::vector<int>{33, 65, 129});
}

TEST_CASE("config: unknown keys and bad values are rejected with line numbers") {
  CHECK_THROWS_WITH(io::parse_config_text("no_such_key = 3\n"),
                    Catch::Matchers::ContainsSubstring("unknown key"));
  CHECK_THROWS_WITH(io::parse_config_text("batch_rays = banana\n"),
                    Catch::Matchers::ContainsSubstring("bad value"));
  CHECK_THROWS_AS(io::parse_config_text("stratified = perhaps\n"), ValidationError);
  CHECK_THROWS_WITH(io::parse_config_text("near = 5\nfar = 2\n"),
                    Catch::Matchers::ContainsSubstring("near"));
  CHECK_THROWS_WITH(io::parse_config_text("static_upsample_steps = 10\n"),
                    Catch::Matchers::ContainsSubstring("upsample"));
  // Comments and blank lines are fine.
  const io::TrainConfig c = io::parse_config_text("# comment\n\nbatch_rays = 64  # inline\n");
  CHECK(c.batch_rays == 64);
}

TEST_CASE("checkpoints round trip bit-exactly") {
  TempDir dir;
  Rng rng(17);
  io::Checkpoint ck;
  ck.cfg_text = io::config_text(io::TrainConfig{});
  ck.cfg_hash = 12345;
  ck.step = 77;
  ck.n_frames = 4;
  ck.width = 32;
  ck.height = 24;
  ck.focal_base = 32.0;
  Array a({3, 5});
  for (auto& v : a.data) v = rng.uniform(-1, 1);
  ck.tensors.emplace_back("poses", a);
  Array b({2});
  b[0] = -0.5;
  b[1] = 1e-17;
  ck.tensors.emplace_back("logf", b);
  io::write_checkpoint(dir.path / "c.dvx", ck);
  const io::Checkpoint back = io::read_checkpoint(dir.path / "c.dvx");
  CHECK(back.cfg_text == ck.cfg_text);
  CHECK(back.step == 77);
  CHECK(back.focal_base == 32.0);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[0].first == "poses");
  CHECK(back.tensors[0].second.shape == a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(back.tensors[0].second[i] == a[i]);
  CHECK(back.tensors[1].second[1] == 1e-17);
  CHECK_THROWS_AS(io::read_checkpoint(dir.path / "nope.dvx"), IoError);
}

TEST_CASE("generated datasets load cleanly; missing files produce precise errors") {
  TempDir dir;
  synth::SceneSpec spec = synth::make_preset("one_mover", 23);
  spec.n_frames = 4;
  spec.width = 32;
  spec.height = 24;
  const synth::GroundTruth gt = synth::generate(spec);
  synth::write_dataset(gt, dir.path);

  const io::Dataset ds = io::load_dataset(dir.path);
  CHECK(ds.n_frames() == 4);
  CHECK(ds.width == 32);
  CHECK(ds.flow_fwd.size() == 3);
  CHECK(ds.flow_bwd.size() == 3);
  CHECK(ds.gt_poses.size() == 4);
  REQUIRE(ds.gt_intrinsics.has_value());
  CHECK(std::abs(ds.gt_intrinsics->focal - spec.focal) < 1e-12);

  // Extra files are ignored.
  std::ofstream(dir.path / "frames" / "notes.txt") << "ignored";
  std::ofstream(dir.path / "stray.bin") << "ignored";
  CHECK_NOTHROW(io::load_dataset(dir.path));

  // A missing flow file is reported by name.
  fs::remove(dir.path / "flow_fwd" / "00001.flo");
  CHECK_THROWS_WITH(io::load_dataset(dir.path), Catch::Matchers::ContainsSubstring("flow_fwd") &&
                                                    Catch::Matchers::ContainsSubstring("00001.flo"));
}

TEST_CASE("dataset validation lists every violation at once") {
  TempDir dir;
  synth::SceneSpec spec = synth::make_preset("static_orbit", 29);
  spec.n_frames = 3;
  spec.width = 24;
  spec.height = 18;
  const synth::GroundTruth gt = synth::generate(spec);
  synth::write_dataset(gt, dir.path);
  fs::remove(dir.path / "disp" / "00001.pfm");
  fs::remove(dir.path / "mask" / "00002.png");
  try {
    io::load_dataset(dir.path);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("disp") != std::string::npos);
    CHECK(msg.find("00002.png") != std::string::npos);
  }
}
