#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "pixsplat/io.h"
#include "pixsplat/parallel.h"
#include "pixsplat/pipeline.h"

using namespace pixsplat;

namespace {

SynthSpec small_spec(std::uint64_t seed = 0, int frames = 4) {
  SynthSpec spec;
  spec.shape = SynthShape::Sphere;
  spec.point_count = 2500;
  spec.frame_count = frames;
  spec.width = 32;
  spec.height = 24;
  spec.focal = 30;
  spec.seed = seed;
  return spec;
}

PipelineConfig small_config() {
  PipelineConfig cfg;
  cfg.raster.layers = 3;
  return cfg;
}

void perturb_texture(Model& m, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, sigma);
  for (Eigen::Index k = 0; k < m.cloud.descriptors.size(); ++k) m.cloud.descriptors.data()[k] += n(rng);
}

std::vector<std::size_t> all_frames(const Model& m) {
  std::vector<std::size_t> v(m.frames.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("frozen model keeps the same loss across epochs") {
    PipelineConfig cfg = small_config();
    Model m = make_synthetic_model(small_spec(), cfg);
    perturb_texture(m, 0.05, 1);
    cfg.optim.frozen = FreezeFlags::all();
    OptimizerState state;
    const EpochStats a = train_epoch(m, all_frames(m), cfg, state);
    const EpochStats b = train_epoch(m, all_frames(m), cfg, state);
    CHECK(a.mean_loss == b.mean_loss);
    CHECK(a.mean_loss > 0.0);
  }

  TEST_CASE("texture-only refinement lowers the loss") {
    PipelineConfig cfg = small_config();
    Model m = make_synthetic_model(small_spec(2), cfg);
    perturb_texture(m, 0.1, 2);
    cfg.optim.frozen = FreezeFlags::all();
    cfg.optim.frozen.texture = false;
    OptimizerState state;
    std::vector<double> losses;
    for (int e = 0; e < 10; ++e) losses.push_back(train_epoch(m, all_frames(m), cfg, state).mean_loss);
    for (std::size_t e = 2; e < losses.size(); ++e)
      CHECK((losses[e] + losses[e - 1]) / 2 < (losses[e - 1] + losses[e - 2]) / 2);
    CHECK(losses.back() < 0.5 * losses.front());
  }

  TEST_CASE("epoch statistics are reproducible") {
    PipelineConfig cfg = small_config();
    cfg.optim.frozen.pose = false;
    auto run = [&] {
      Model m = make_synthetic_model(small_spec(3), cfg);
      perturb_texture(m, 0.05, 3);
      OptimizerState state;
      return train_epoch(m, all_frames(m), cfg, state);
    };
    const EpochStats a = run(), b = run();
    REQUIRE(a.steps.size() == b.steps.size());
    for (std::size_t i = 0; i < a.steps.size(); ++i) {
      CHECK(a.steps[i].frame_id == b.steps[i].frame_id);
      CHECK(a.steps[i].loss == b.steps[i].loss);
      CHECK(a.steps[i].grad_norm_pose == b.steps[i].grad_norm_pose);
    }
  }

  TEST_CASE("resuming from a checkpoint reproduces the next epoch bitwise") {
    TempDir dir("pixsplat_resume_test");
    PipelineConfig cfg = small_config();
    cfg.optim.frozen.pose = false;
    cfg.optim.frozen.intrinsics = false;
    Model m = make_synthetic_model(small_spec(4), cfg);
    perturb_texture(m, 0.05, 4);
    const Model pristine = m;
    OptimizerState state;
    train_epoch(m, all_frames(m), cfg, state);
    save_checkpoint(dir.path / "a.ckpt", m, cfg, state);
    const EpochStats straight = train_epoch(m, all_frames(m), cfg, state);

    Model resumed = pristine;
    OptimizerState rs;
    load_checkpoint(dir.path / "a.ckpt", resumed, cfg, rs);
    const EpochStats again = train_epoch(resumed, all_frames(resumed), cfg, rs);
    REQUIRE(straight.steps.size() == again.steps.size());
    for (std::size_t i = 0; i < straight.steps.size(); ++i) CHECK(straight.steps[i].loss == again.steps[i].loss);
    CHECK(resumed.cloud.descriptors == m.cloud.descriptors);
    for (std::size_t f = 0; f < m.frames.size(); ++f) CHECK(m.frames[f].pose.R == resumed.frames[f].pose.R);

    PipelineConfig other = cfg;
    other.optim.lr.texture *= 2;
    Model x = pristine;
    OptimizerState xs;
    CHECK_THROWS(load_checkpoint(dir.path / "a.ckpt", x, other, xs));
  }

  TEST_CASE("train and test split") {
    const TrainTestSplit s = split_frames(40, 0.05);
    CHECK(s.test.size() == 2);
    CHECK(s.train.size() == 38);
    const TrainTestSplit one = split_frames(3, 0.05);
    CHECK(one.test.size() == 1);
    CHECK(one.train.size() == 2);
  }

  TEST_CASE("refinement never touches test frames") {
    TempDir dir("pixsplat_refine_test");
    PipelineConfig cfg = small_config();
    cfg.test_fraction = 0.25;
    cfg.optim.frozen.pose = false;
    cfg.optim.frozen.exposure = false;
    cfg.optim.frozen.white_balance = false;
    Model m = make_synthetic_model(small_spec(5, 8), cfg);
    perturb_texture(m, 0.05, 5);
    const TrainTestSplit split = split_frames(m.frames.size(), cfg.test_fraction);
    REQUIRE_FALSE(split.test.empty());
    std::vector<std::uint64_t> before;
    for (std::size_t i : split.test) before.push_back(frame_hash(m.frames[i]));
    RefineOptions opt;
    opt.epochs = 2;
    opt.checkpoint_dir = dir.path;
    opt.log_path = dir.path / "log.jsonl";
    OptimizerState state;
    const RefineLog log = refine(m, cfg, opt, state);
    CHECK(log.epochs.size() == 2);
    for (std::size_t k = 0; k < split.test.size(); ++k) CHECK(frame_hash(m.frames[split.test[k]]) == before[k]);
    CHECK(std::filesystem::exists(dir.path / "epoch_1.ckpt"));
    CHECK(std::filesystem::file_size(dir.path / "log.jsonl") > 0);
  }

  TEST_CASE("ablation without pose noise stays at the baseline") {
    PipelineConfig cfg = small_config();
    cfg.raster.layers = 4;
    SynthSpec spec = small_spec(6, 3);
    spec.shape = SynthShape::WallPair;
    spec.point_count = 10000;
    spec.width = 64;
    spec.height = 48;
    spec.focal = 60;
    Model m = make_synthetic_model(spec, cfg);
    add_ground_truth_noise(m, 0.02, 6);
    AblationOptions opt;
    opt.sigma_translation = 0.0;
    opt.sigma_rotation_deg = 0.0;
    opt.steps = 100;
    opt.seeds = {1};
    const AblationReport r = ghost_ablation(m, cfg, opt);
    REQUIRE(r.runs.size() == 1);
    const AblationRun& run = r.runs[0];
    MESSAGE("baseline rms " << run.baseline_rms << ", final mse on " << run.ghost_on_loss << " off "
                            << run.ghost_off_loss);
    CHECK(run.initial_rms == run.baseline_rms);
    CHECK(run.ghost_on_aligned == run.frames);
    CHECK(run.ghost_off_aligned == run.frames);
  }

  TEST_CASE("frame exposure reaches the tonemapper") {
    PipelineConfig cfg = small_config();
    Model m = make_synthetic_model(small_spec(7, 2), cfg);
    m.frames[1].ev = 1.3;
    m.frames[1].white_point = {1.1, 1.0, 0.9};
    const SensorParams s = m.sensor_for(m.frames[1]);
    CHECK(s.ev == 1.3);
    CHECK(s.white_point.x() == 1.1);
    const FrameRender r = render_frame(m, m.frames[1], cfg.raster, cfg.reconstruct, ResponseMode::Inference);
    CHECK(r.ldr.data == tonemap_forward(r.hdr, s, ResponseMode::Inference).data);
    const FrameRender r0 = render_frame(m, m.frames[0], cfg.raster, cfg.reconstruct, ResponseMode::Inference);
    Model same = m;
    same.frames[1].ev = 0.0;
    same.frames[1].white_point = Vector3d::Ones();
    const FrameRender plain = render_frame(same, same.frames[1], cfg.raster, cfg.reconstruct, ResponseMode::Inference);
    CHECK(plain.ldr.data != r.ldr.data);
    CHECK(r0.ldr.data.size() == r.ldr.data.size());
  }

  TEST_CASE("evaluation is independent of the thread count") {
    const int saved = thread_count();
    PipelineConfig cfg = small_config();
    Model m = make_synthetic_model(small_spec(8), cfg);
    perturb_texture(m, 0.05, 8);
    set_thread_count(1);
    const EvaluationReport a = evaluate(m, all_frames(m), cfg);
    set_thread_count(4);
    const EvaluationReport b = evaluate(m, all_frames(m), cfg);
    set_thread_count(saved);
    CHECK(a.mean_psnr == b.mean_psnr);
    for (std::size_t i = 0; i < a.frames.size(); ++i) CHECK(a.frames[i].mse == b.frames[i].mse);
  }

  TEST_CASE("ground truth renders evaluate at the psnr cap") {
    PipelineConfig cfg = small_config();
    const Model m = make_synthetic_model(small_spec(9), cfg);
    const EvaluationReport r = evaluate(m, all_frames(m), cfg);
    // Ground truth is 8-bit quantized, so the error is at most half a level.
    CHECK(r.mean_psnr > 40.0);
  }

  TEST_CASE("scene files round trip") {
    TempDir dir("pixsplat_scene_test");
    PipelineConfig cfg = small_config();
    Model m = make_synthetic_model(small_spec(10, 3), cfg);
    m.frames[2].ev = 0.5;
    const auto path = save_scene(dir.path, m, cfg);
    const SceneFiles s = load_scene(path);
    CHECK(s.model.cloud.positions.size() == m.cloud.size());
    CHECK(s.model.frames.size() == 3);
    CHECK(s.model.frames[2].ev == 0.5);
    CHECK(config_hash(s.config) == config_hash(cfg));
    CHECK((s.model.frames[1].pose.R - m.frames[1].pose.R).norm() < 1e-12);
    CHECK(s.model.frames[0].ground_truth.width == 32);
  }
}
