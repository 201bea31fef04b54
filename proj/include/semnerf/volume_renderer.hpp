#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "semnerf/autodiff.hpp"
#include "semnerf/image.hpp"
#include "semnerf/random.hpp"
#include "semnerf/scene_field.hpp"

namespace semnerf {

/// Camera on a sphere around the origin, looking at the origin. yaw = pitch =
/// pi/2 puts the camera on +z looking down -z with +y up.
struct CameraPose {
  double yaw = std::numbers::pi / 2;
  double pitch = std::numbers::pi / 2;
  double roll = 0.0;
  double distance = 1.0;
  double fov_degrees = 18.0;

  void validate() const;
  friend bool operator==(const CameraPose&, const CameraPose&) = default;
};

void to_json(nlohmann::json& j, const CameraPose& p);
void from_json(const nlohmann::json& j, CameraPose& p);

struct Ray {
  Eigen::Vector3d origin;
  Eigen::Vector3d direction;
  double near = 0.8;
  double far = 1.2;
};

/// Window [offset_h, offset_h + scale*image_h] x [offset_w, offset_w + scale*image_w]
/// of the image plane, sampled by a fixed grid_h x grid_w ray grid.
struct RegionSpec {
  double scale = 1.0;
  double offset_h = 0.0;
  double offset_w = 0.0;
  int grid_h = 0;
  int grid_w = 0;
  int image_h = 0;
  int image_w = 0;

  void validate() const;
  static RegionSpec full(int image_h, int image_w) { return {1.0, 0.0, 0.0, image_h, image_w, image_h, image_w}; }
  static RegionSpec full(int image_h, int image_w, int grid_h, int grid_w) {
    return {1.0, 0.0, 0.0, grid_h, grid_w, image_h, image_w};
  }
};

struct PixelCoord {
  double row = 0.0;
  double col = 0.0;
};

struct RenderedImage {
  Image color;
  std::vector<float> transmittance;  // per pixel, final transmittance
};

struct CameraFrame {
  Eigen::Vector3d origin;
  Eigen::Vector3d forward;
  Eigen::Vector3d right;
  Eigen::Vector3d up;
};

/// Draws a region with translation uniform in [0, (1 - scale) * size].
RegionSpec sample_region(double scale, Rng& rng, int image_h, int image_w, int grid_h, int grid_w);

/// Pixel-center coordinates (half-integer convention) of the region's grid, row-major.
std::vector<PixelCoord> region_coordinates(const RegionSpec& region);

/// Samples `image` at the region's coordinates with bilinear interpolation.
Image bilinear_crop(const Image& image, const RegionSpec& region);

CameraFrame camera_frame(const CameraPose& pose);

/// Unit direction through continuous image-plane coordinate (row, col); (0, 0)
/// is the top-left image corner.
Eigen::Vector3d pixel_direction(const CameraPose& pose, double row, double col, int image_h, int image_w);

std::vector<Ray> generate_rays(const CameraPose& pose, const RegionSpec& region, double near, double far);

/// One depth per equal bin of [near, far]; bin midpoints when `rng` is null.
std::vector<double> stratified_depths(const Ray& ray, int n_steps, Rng* rng);

struct CompositeResult {
  Eigen::Vector3d pixel = Eigen::Vector3d::Zero();
  std::vector<double> weights;
  std::vector<double> transmittance;  // T_i before each sample
  double final_transmittance = 1.0;
};

/// Alpha-compositing quadrature along one ray; the last interval ends at `far`.
CompositeResult composite(std::span<const double> depths, std::span<const double> densities,
                          std::span<const Eigen::Vector3d> colors, double far);

/// Inverse-CDF resampling proportional to `weights` over the intervals that
/// start at each depth. Returns the merged, sorted set of coarse and fine depths.
std::vector<double> hierarchical_resample(std::span<const double> depths, std::span<const double> weights,
                                          double far, int n_fine, Rng* rng);

template <typename S>
struct BatchComposite {
  ad::Var<S> rgb;                    // R x 3
  ad::Matrix<S> weights;             // R x samples
  ad::Matrix<S> final_transmittance;  // R x 1
};

/// Batched differentiable compositing. density: R x n, color: R x 3n
/// (row-major (sample, channel)), depths: R x n sorted per row.
template <typename S>
BatchComposite<S> composite_batch(const ad::Matrix<S>& depths, S far, const ad::Var<S>& density,
                                  const ad::Var<S>& color);

struct RenderOptions {
  int steps = 28;
  bool hierarchical = false;
  int fine_steps = 0;  // 0 means "same as steps"
  bool deterministic = true;
  double near = 0.8;
  double far = 1.2;
  std::uint64_t seed = 0;
  int chunk_rays = 4096;
  int workers = 1;
};

void to_json(nlohmann::json& j, const RenderOptions& o);
void from_json(const nlohmann::json& j, RenderOptions& o);

template <typename S>
using FieldFn = std::function<FieldOutput<S>(const ad::Matrix<S>& positions, const ad::Matrix<S>& directions)>;

template <typename S>
struct RayBatchResult {
  ad::Var<S> rgb;
  ad::Matrix<S> depths;
  ad::Matrix<S> weights;
  ad::Matrix<S> final_transmittance;
};

/// Renders a batch of rays, recording gradients when grad mode is on.
/// `first_ray_index` keys the per-ray jitter streams so any partition of a
/// ray set yields identical samples.
template <typename S>
RayBatchResult<S> render_rays(const FieldFn<S>& field, std::span<const Ray> rays, const RenderOptions& options,
                              std::uint64_t first_ray_index = 0);

/// Non-differentiable image rendering; rays are processed in chunks, optionally
/// spread over `options.workers` threads.
template <typename S>
RenderedImage render_field(const FieldFn<S>& field, const CameraPose& pose, const RegionSpec& region,
                           const RenderOptions& options);

template <typename S>
FieldFn<S> bind_style(const SceneField<S>& field, const ad::Var<S>& style);

template <typename S>
RenderedImage render(const SceneField<S>& field, const StyleCode<S>& style, const CameraPose& pose,
                     const RegionSpec& region, const RenderOptions& options);

/// Converts rendered rows (grid_h*grid_w x 3) into an image.
template <typename S>
Image rows_to_image(const ad::Matrix<S>& rgb, int height, int width);

/// Converts an image into rows (h*w x 3).
template <typename S>
ad::Matrix<S> image_to_rows(const Image& image);

}  // namespace semnerf
