#include <doctest.h>

#include <cstring>
#include <functional>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "pixsplat/errors.h"
#include "pixsplat/io.h"

using namespace pixsplat;

namespace {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_SUITE("io") {
  TEST_CASE("one-point ascii ply") {
    TempDir dir("pixsplat_io_ply1");
    write_text(dir.path / "a.ply",
               "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n"
               "end_header\n0.5 -1 2\n");
    const PointCloud c = load_ply(dir.path / "a.ply");
    REQUIRE(c.size() == 1);
    CHECK(c.positions[0] == Vector3d(0.5, -1, 2));
    CHECK(c.descriptor_dim() == 4);
    CHECK(c.world_radii.empty());
  }

  TEST_CASE("ascii ply with colour, normals, extra elements and lists") {
    TempDir dir("pixsplat_io_ply2");
    write_text(dir.path / "b.ply",
               "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty double x\nproperty double y\n"
               "property double z\nproperty float nx\nproperty float ny\nproperty float nz\nproperty uchar red\n"
               "property uchar green\nproperty uchar blue\nelement face 1\nproperty list uchar int vertex_indices\n"
               "end_header\n0 0 0 0 0 -1 255 0 51\n1 0 0 0 0 -1 0 255 0\n3 0 1 1\n");
    const PointCloud c = load_ply(dir.path / "b.ply", {.descriptor_dim = 3, .seed = 1, .estimate_radii = false});
    REQUIRE(c.size() == 2);
    CHECK(c.has_normals());
    CHECK(c.normals[1] == Vector3d(0, 0, -1));
    CHECK(std::abs(c.descriptors(0, 0) - 1.0) < 0.1);
    CHECK(std::abs(c.descriptors(0, 2) - 0.2) < 0.1);
  }

  TEST_CASE("binary ply round trip is bit exact") {
    TempDir dir("pixsplat_io_ply3");
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0, 1);
    PointCloud c;
    const std::size_t N = 10000;
    c.descriptors.resize(Eigen::Index(N), 5);
    for (std::size_t i = 0; i < N; ++i) {
      c.positions.emplace_back(n(rng), n(rng), n(rng));
      c.normals.push_back(Vector3d(n(rng), n(rng), n(rng)).normalized());
      c.world_radii.push_back(std::abs(n(rng)) + 1e-3);
      for (int d = 0; d < 5; ++d) c.descriptors(Eigen::Index(i), d) = n(rng);
    }
    c.space = DescriptorSpace::Logarithmic;
    save_ply(c, dir.path / "c.ply");
    const PointCloud r = load_ply(dir.path / "c.ply");
    CHECK(r.positions == c.positions);
    CHECK(r.normals == c.normals);
    CHECK(r.world_radii == c.world_radii);
    CHECK(r.descriptors == c.descriptors);
    CHECK(r.space == DescriptorSpace::Logarithmic);

    save_ply(c, dir.path / "c_ascii.ply", PlyFormat::Ascii);
    const PointCloud a = load_ply(dir.path / "c_ascii.ply");
    for (std::size_t i = 0; i < N; i += 97) CHECK((a.positions[i] - c.positions[i]).norm() < 1e-6);
  }

  TEST_CASE("ply diagnostics") {
    TempDir dir("pixsplat_io_ply4");
    std::string body =
        "ply\nformat ascii 1.0\nelement vertex 10\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
    for (int i = 0; i < 9; ++i) body += "1 2 3\n";
    write_text(dir.path / "t.ply", body);
    const std::string msg = error_of([&] { load_ply(dir.path / "t.ply"); });
    CHECK(msg.find("vertex 9") != std::string::npos);

    // Binary payload cut short.
    PointCloud c;
    c.positions.assign(10, Vector3d(1, 2, 3));
    c.descriptors = DescriptorMatrix::Zero(10, 4);
    save_ply(c, dir.path / "full.ply");
    const auto size = std::filesystem::file_size(dir.path / "full.ply");
    std::filesystem::copy_file(dir.path / "full.ply", dir.path / "cut.ply");
    std::filesystem::resize_file(dir.path / "cut.ply", size - 8);
    const std::string cut = error_of([&] { load_ply(dir.path / "cut.ply"); });
    CHECK(cut.find("vertex 9") != std::string::npos);
    CHECK(cut.find("byte offset") != std::string::npos);

    write_text(dir.path / "bad.ply", "ply\nformat ascii 1.0\nelement vertex 1\nproperty quad x\nend_header\n1\n");
    const std::string bad = error_of([&] { load_ply(dir.path / "bad.ply"); });
    CHECK(bad.find(":4") != std::string::npos);
    CHECK_THROWS_AS(load_ply(dir.path / "missing.ply"), FormatError);
  }

  TEST_CASE("pfm round trip") {
    TempDir dir("pixsplat_io_pfm");
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<float> u(-10.f, 1000.f);
    Image img(7, 5, 3);
    for (double& v : img.data) v = double(u(rng));
    write_pfm(img, dir.path / "a.pfm");
    CHECK(read_pfm(dir.path / "a.pfm").data == img.data);
    Image one(1, 1, 3, 426.67);
    write_image(one, dir.path / "one.pfm");
    const Image back = read_image(dir.path / "one.pfm");
    CHECK(back.data[0] == doctest::Approx(426.67).epsilon(1e-7));
    CHECK(double(float(426.67)) == back.data[0]);
    // Header carries the little-endian negative scale.
    std::ifstream in(dir.path / "one.pfm", std::ios::binary);
    std::string magic, dims, scale;
    std::getline(in, magic);
    std::getline(in, dims);
    std::getline(in, scale);
    CHECK(magic == "PF");
    CHECK(std::stod(scale) < 0.0);
  }

  TEST_CASE("png round trip of 8-bit data") {
    TempDir dir("pixsplat_io_png");
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> u(0, 255);
    Image img(9, 6, 3);
    for (double& v : img.data) v = u(rng) / 255.0;
    write_image(img, dir.path / "a.png");
    const Image back = read_image(dir.path / "a.png");
    REQUIRE(back.same_shape(img));
    for (std::size_t k = 0; k < img.data.size(); ++k) CHECK(std::lround(back.data[k] * 255) == std::lround(img.data[k] * 255));
    write_image(back, dir.path / "b.png");
    CHECK(read_image(dir.path / "b.png").data == back.data);
    CHECK_THROWS(read_image(dir.path / "a.exr"));
  }

  TEST_CASE("archives round trip") {
    TempDir dir("pixsplat_io_arc");
    TensorArchive a;
    a.meta["k"] = 3;
    a.tensors["x"] = {1.0, -2.5, 1e300};
    a.tensors["empty"] = {};
    write_archive(dir.path / "a.bin", a);
    const TensorArchive b = read_archive(dir.path / "a.bin");
    CHECK(b.meta["k"] == 3);
    CHECK(b.tensors.at("x") == a.tensors.at("x"));
    CHECK(b.tensors.at("empty").empty());
  }

  TEST_CASE("config json round trip") {
    PipelineConfig cfg;
    cfg.raster.alpha_depth = 0.02;
    cfg.optim.lr.pose = 5e-4;
    cfg.optim.frozen.pose = false;
    const PipelineConfig back = config_from_json(config_to_json(cfg));
    CHECK(back.raster.alpha_depth == 0.02);
    CHECK(back.optim.lr.pose == 5e-4);
    CHECK_FALSE(back.optim.frozen.pose);
    CHECK(config_hash(back) == config_hash(cfg));
  }
}
