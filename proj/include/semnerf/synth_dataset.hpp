#pragma once

#include <Eigen/Core>

#include <array>
#include <numbers>
#include <string>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "semnerf/image.hpp"
#include "semnerf/mask_pipeline.hpp"
#include "semnerf/random.hpp"
#include "semnerf/volume_renderer.hpp"

namespace semnerf {

/// Label ids of the synthetic palette (see LabelTable::synthetic()).
enum SynthLabel : std::uint8_t { kBackground = 0, kSkin = 1, kEye = 2, kMouth = 3, kEar = 4, kNose = 5 };
constexpr int kSynthLabelCount = 6;

/// Axis-aligned ellipsoid carrying one semantic label.
struct Part {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d radii = Eigen::Vector3d::Ones();
  Eigen::Vector3d color = Eigen::Vector3d::Zero();
  int label = kSkin;

  /// (x-c)/r squared-norm; < 1 inside.
  double level(const Eigen::Vector3d& p) const { return ((p - center).array() / radii.array()).matrix().squaredNorm(); }
};

/// A face-like scene: parts[0] is the head, later parts take precedence
/// where they overlap earlier ones.
struct SceneParams {
  std::vector<Part> parts;
  double sigma_max = 200.0;
  double falloff = 0.0;  // width of the density ramp in level-set units; 0 = indicator
  std::uint64_t seed = 0;

  friend bool operator==(const SceneParams& a, const SceneParams& b);
};

struct PosePrior {
  double yaw_mean = std::numbers::pi / 2;
  double yaw_sd = 0.3;
  double pitch_mean = std::numbers::pi / 2;
  double pitch_sd = 0.1;
  double roll = 0.0;
  double fov_degrees = 18.0;
  double distance = 1.0;

  void validate() const;
  CameraPose sample(Rng& rng) const;
};

void to_json(nlohmann::json& j, const PosePrior& p);
void from_json(const nlohmann::json& j, PosePrior& p);

/// Documented parameter ranges; parts are clamped so eyes, mouth and nose
/// centers stay inside the head.
struct SceneRanges {
  double head_radius_min = 0.09, head_radius_max = 0.12;
  double eye_radius_min = 0.015, eye_radius_max = 0.025;
  double mouth_width_min = 0.025, mouth_width_max = 0.045;
  double color_jitter = 0.05;
  double ear_probability = 0.5;
  double nose_probability = 0.5;
};

SceneParams sample_scene(Rng& rng, const SceneRanges& ranges = {});

/// Part palette before jitter, indexed by label.
const std::array<Eigen::Vector3d, kSynthLabelCount>& synth_palette();

/// Analytic radiance field of a scene.
class AnalyticField {
 public:
  explicit AnalyticField(SceneParams params);

  const SceneParams& params() const { return params_; }
  double density(const Eigen::Vector3d& p) const;
  Eigen::Vector3d color(const Eigen::Vector3d& p) const;
  /// Label of the dominant part at p, or background.
  int label(const Eigen::Vector3d& p) const;

  template <typename S>
  FieldFn<S> as_field_fn() const;

 private:
  int dominant_part(const Eigen::Vector3d& p) const;
  double occupancy(const Part& part, const Eigen::Vector3d& p) const;

  SceneParams params_;
};

struct SynthRenderOptions {
  int image_size = 32;
  int steps = 64;
  int fine_steps = 64;
};

void to_json(nlohmann::json& j, const SynthRenderOptions& o);
void from_json(const nlohmann::json& j, SynthRenderOptions& o);

struct SynthSample {
  Image image;
  SemanticMask mask;
  CameraPose pose;
  std::vector<float> opacity;  // accumulated opacity per pixel
};

/// Per-label accumulated opacity, label-major (n_labels x h*w).
std::vector<std::vector<double>> render_label_opacity(const AnalyticField& field, const CameraPose& pose,
                                                     const RegionSpec& region, const RenderOptions& options);

/// Argmax of per-label opacity; background where the total is below 0.5.
ByteGrid labels_from_opacity(const std::vector<std::vector<double>>& opacity, int height, int width);

SynthSample render_sample(const SceneParams& params, const CameraPose& pose, const SynthRenderOptions& options = {});

struct DatasetConfig {
  int n_train = 512;
  int n_test = 64;
  std::uint64_t seed = 0;
  SynthRenderOptions render;
  PosePrior poses;
  SceneRanges ranges;
  int workers = 1;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

/// Scene of sample `index` in split `test` (0 = train, 1 = test).
SceneParams scene_for(const DatasetConfig& config, int split, int index);
CameraPose pose_for(const DatasetConfig& config, int split, int index);

/// Writes out/{train,test}/ in the dataset layout plus out/manifest.json with
/// per-file SHA-256 checksums. Returns the manifest.
nlohmann::json build_dataset(const DatasetConfig& config, const std::filesystem::path& out);

/// Recomputes every checksum listed in the manifest; returns mismatching paths.
std::vector<std::string> verify_manifest(const std::filesystem::path& out);

}  // namespace semnerf
