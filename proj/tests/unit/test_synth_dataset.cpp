#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "semnerf/checkpoint.hpp"
#include "semnerf/errors.hpp"
#include "semnerf/synth_dataset.hpp"

using namespace semnerf;
namespace fs = std::filesystem;

namespace {

CameraPose frontal() {
  CameraPose p;
  p.yaw = std::numbers::pi / 2;
  p.pitch = std::numbers::pi / 2;
  return p;
}

SceneParams sphere_scene(double r) {
  SceneParams s;
  Part head;
  head.radii = Eigen::Vector3d::Constant(r);
  head.color = Eigen::Vector3d(0.8, 0.6, 0.4);
  s.parts.push_back(head);
  return s;
}

RenderOptions gt_render_options() {
  RenderOptions o;
  o.steps = 64;
  o.hierarchical = true;
  o.fine_steps = 64;
  return o;
}

}  // namespace

TEST_CASE("scene sampling is deterministic per index") {
  DatasetConfig cfg;
  cfg.seed = 3;
  CHECK(scene_for(cfg, 0, 5) == scene_for(cfg, 0, 5));
  CHECK_FALSE(scene_for(cfg, 0, 5) == scene_for(cfg, 0, 6));
  CHECK_FALSE(scene_for(cfg, 0, 5) == scene_for(cfg, 1, 5));
  const CameraPose a = pose_for(cfg, 0, 5), b = pose_for(cfg, 0, 5);
  CHECK(a.yaw == b.yaw);
  CHECK(a.pitch == b.pitch);
}

TEST_CASE("face parts sit inside the head") {
  Rng rng(11);
  std::set<int> labels;
  for (int i = 0; i < 1000; ++i) {
    const SceneParams s = sample_scene(rng);
    REQUIRE(s.parts.size() >= 4);
    const Part& head = s.parts[0];
    CHECK(head.label == kSkin);
    for (std::size_t k = 1; k < s.parts.size(); ++k) {
      labels.insert(s.parts[k].label);
      if (s.parts[k].label == kEye || s.parts[k].label == kMouth || s.parts[k].label == kNose) {
        CHECK(head.level(s.parts[k].center) < 1.0);
      }
      for (int c = 0; c < 3; ++c) {
        CHECK(std::abs(s.parts[k].color[c] - synth_palette()[s.parts[k].label][c]) <= 0.05 + 1e-12);
      }
    }
    CHECK(head.radii.maxCoeff() < 0.15);
  }
  CHECK(labels == std::set<int>{kEye, kMouth, kEar, kNose});
}

TEST_CASE("analytic field is an indicator of its parts") {
  SceneParams s = sphere_scene(0.1);
  Part eye;
  eye.label = kEye;
  eye.center = Eigen::Vector3d(0.0, 0.0, 0.09);
  eye.radii = Eigen::Vector3d::Constant(0.02);
  eye.color = Eigen::Vector3d(0, 0, 1);
  s.parts.push_back(eye);
  const AnalyticField f(s);
  CHECK(f.density({0, 0, 0}) == 200.0);
  CHECK(f.density({0, 0, 0.2}) == 0.0);
  CHECK(f.label({0, 0, 0}) == kSkin);
  CHECK(f.label({0, 0, 0.095}) == kEye);
  CHECK(f.label({0, 0, 0.105}) == kEye);
  CHECK(f.label({0, 0, 0.115}) == kBackground);
  CHECK(f.color({0, 0, 0.095}) == eye.color);
  CHECK(f.color({0.3, 0, 0}) == Eigen::Vector3d::Zero());

  s.falloff = 0.5;
  const AnalyticField soft(s);
  const Eigen::Vector3d edge(0.0, 0.1 * std::sqrt(1.25), 0.0);  // level 1.25
  CHECK(soft.density(edge) == doctest::Approx(100.0));
  CHECK_THROWS_AS(AnalyticField(SceneParams{}), Error);
}

TEST_CASE("sphere silhouette matches ray-sphere distance") {
  const double r = 0.1;
  const int n = 32;
  const SynthSample s = render_sample(sphere_scene(r), frontal(), {n, 64, 64});
  const auto rays = generate_rays(frontal(), RegionSpec::full(n, n), 0.8, 1.2);
  int inside = 0;
  for (int i = 0; i < n * n; ++i) {
    const Eigen::Vector3d& o = rays[i].origin;
    const Eigen::Vector3d& d = rays[i].direction;
    const double dist = (o - o.dot(d) * d).norm();
    const int label = s.mask.labels.data[i];
    CHECK((label == kBackground || label == kSkin));
    if (std::abs(dist - r) < 2e-3) continue;
    CHECK(label == (dist < r ? kSkin : kBackground));
    if (dist < r - 2e-3) {
      ++inside;
      CHECK(s.opacity[i] > 0.999f);
      for (int c = 0; c < 3; ++c) CHECK(std::abs(s.image.at(i / n, i % n, c) - static_cast<float>(sphere_scene(r).parts[0].color[c])) < 1e-3f);
    } else {
      CHECK(s.opacity[i] == 0.0f);
    }
  }
  CHECK(inside > 100);
}

TEST_CASE("mask agrees with label-indicator color renders") {
  DatasetConfig cfg;
  cfg.seed = 8;
  for (int idx = 0; idx < 4; ++idx) {
    const SceneParams scene = scene_for(cfg, 0, idx);
    const CameraPose pose = pose_for(cfg, 0, idx);
    const int n = 24;
    const SynthSample sample = render_sample(scene, pose, {n, 64, 64});
    for (std::size_t px = 0; px < sample.opacity.size(); ++px) {
      if (sample.mask.labels.data[px] != kBackground) CHECK(sample.opacity[px] >= 0.5f);
    }

    // Two renders whose colors encode labels 0-2 and 3-5 as unit channels.
    std::vector<std::vector<double>> planes(kSynthLabelCount, std::vector<double>(n * n, 0.0));
    for (int group = 0; group < 2; ++group) {
      SceneParams coded = scene;
      for (auto& part : coded.parts) {
        part.color.setZero();
        if (part.label / 3 == group) part.color[part.label % 3] = 1.0;
      }
      const RenderedImage img =
          render_field<double>(AnalyticField(coded).as_field_fn<double>(), pose, RegionSpec::full(n, n), gt_render_options());
      for (int px = 0; px < n * n; ++px)
        for (int c = 0; c < 3; ++c) planes[group * 3 + c][px] = img.color.at(px / n, px % n, c);
    }
    const ByteGrid from_colors = labels_from_opacity(planes, n, n);
    int differ = 0;
    for (int px = 0; px < n * n; ++px) differ += from_colors.data[px] != sample.mask.labels.data[px];
    CHECK(differ == 0);
    std::set<int> seen(sample.mask.labels.data.begin(), sample.mask.labels.data.end());
    CHECK(seen.count(kSkin) == 1);
    CHECK(seen.count(kBackground) == 1);
  }
}

TEST_CASE("pose prior defaults and sampling statistics") {
  const PosePrior p;
  CHECK(p.fov_degrees == 18.0);
  CHECK(p.yaw_mean == doctest::Approx(std::numbers::pi / 2));
  CHECK(p.yaw_sd == 0.3);
  CHECK(p.pitch_sd == 0.1);
  Rng rng(4);
  const int n = 10000;
  double sy = 0, sp = 0, sy2 = 0;
  for (int i = 0; i < n; ++i) {
    const CameraPose c = p.sample(rng);
    sy += c.yaw;
    sp += c.pitch;
    sy2 += (c.yaw - p.yaw_mean) * (c.yaw - p.yaw_mean);
    CHECK(c.fov_degrees == 18.0);
  }
  CHECK(std::abs(sy / n - p.yaw_mean) < 3 * 0.3 / std::sqrt(n));
  CHECK(std::abs(sp / n - p.pitch_mean) < 3 * 0.1 / std::sqrt(n));
  CHECK(std::sqrt(sy2 / n) == doctest::Approx(0.3).epsilon(0.03));

  nlohmann::json j = p;
  CHECK(j.get<PosePrior>().pitch_sd == 0.1);
  j["yaw_sd"] = -1.0;
  CHECK_THROWS_AS(j.get<PosePrior>(), Error);
}

TEST_CASE("dataset build layout, manifest and reproducibility") {
  const fs::path root = fs::temp_directory_path() / "semnerf_synth_test";
  fs::remove_all(root);
  DatasetConfig cfg;
  cfg.n_train = 3;
  cfg.n_test = 2;
  cfg.seed = 21;
  cfg.render = {16, 32, 32};
  const nlohmann::json manifest = build_dataset(cfg, root / "a");
  CHECK(manifest["files"].size() == 2 * 2 + 2 * (3 + 2));
  CHECK(verify_manifest(root / "a").empty());

  const Dataset train(root / "a" / "train");
  CHECK(train.ids().size() == 3);
  CHECK(train.labels().size() == kSynthLabelCount);
  const Sample s = train.load(2);
  CHECK(s.image.height == 16);
  CHECK(s.mask.labels.width == 16);
  CHECK(s.pose.yaw == doctest::Approx(pose_for(cfg, 0, 2).yaw).epsilon(1e-15));
  CHECK(Dataset(root / "a" / "test").ids().size() == 2);

  cfg.workers = 2;
  build_dataset(cfg, root / "b");
  for (const auto& [rel, sum] : manifest["files"].items()) {
    CHECK(sha256_file(root / "b" / rel) == sum.get<std::string>());
  }
  CHECK(read_file(root / "a" / "manifest.json") == read_file(root / "b" / "manifest.json"));

  cfg.seed = 22;
  const nlohmann::json other = build_dataset(cfg, root / "c");
  CHECK(other["files"]["train/images/00000.png"] != manifest["files"]["train/images/00000.png"]);

  const std::string junk = "x";
  write_file(root / "a" / "train" / "masks" / "00001.png",
             std::span(reinterpret_cast<const std::uint8_t*>(junk.data()), junk.size()));
  CHECK(verify_manifest(root / "a") == std::vector<std::string>{"train/masks/00001.png"});
  fs::remove_all(root);
}
