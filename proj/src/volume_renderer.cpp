#include "semnerf/volume_renderer.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <thread>

#include "semnerf/errors.hpp"
#include "semnerf/log.hpp"

namespace semnerf {

void CameraPose::validate() const {
  require(std::isfinite(yaw) && std::isfinite(pitch) && std::isfinite(roll), ErrorKind::kInput,
          "camera pose: angles must be finite");
  require(fov_degrees > 0.0 && fov_degrees < 180.0, ErrorKind::kInput,
          "camera pose: field of view must lie in (0, 180) degrees");
  require(distance > 0.0 && std::isfinite(distance), ErrorKind::kInput,
          "camera pose: distance must be positive");
}

void to_json(nlohmann::json& j, const CameraPose& p) {
  j = nlohmann::json{{"yaw", p.yaw}, {"pitch", p.pitch}, {"roll", p.roll},
                     {"distance", p.distance}, {"fov", p.fov_degrees}};
}

void from_json(const nlohmann::json& j, CameraPose& p) {
  CameraPose d;
  p.yaw = j.value("yaw", d.yaw);
  p.pitch = j.value("pitch", d.pitch);
  p.roll = j.value("roll", d.roll);
  p.distance = j.value("distance", d.distance);
  p.fov_degrees = j.value("fov", d.fov_degrees);
}

void to_json(nlohmann::json& j, const RenderOptions& o) {
  j = nlohmann::json{{"steps", o.steps},         {"hierarchical", o.hierarchical},
                     {"fine_steps", o.fine_steps}, {"deterministic", o.deterministic},
                     {"near", o.near},           {"far", o.far},
                     {"seed", o.seed},           {"chunk_rays", o.chunk_rays},
                     {"workers", o.workers}};
}

void from_json(const nlohmann::json& j, RenderOptions& o) {
  RenderOptions d;
  o.steps = j.value("steps", d.steps);
  o.hierarchical = j.value("hierarchical", d.hierarchical);
  o.fine_steps = j.value("fine_steps", d.fine_steps);
  o.deterministic = j.value("deterministic", d.deterministic);
  o.near = j.value("near", d.near);
  o.far = j.value("far", d.far);
  o.seed = j.value("seed", d.seed);
  o.chunk_rays = j.value("chunk_rays", d.chunk_rays);
  o.workers = j.value("workers", d.workers);
}

void RegionSpec::validate() const {
  require(scale > 0.0 && scale <= 1.0, ErrorKind::kInput, "region: scale must lie in (0, 1]");
  require(grid_h >= 1 && grid_w >= 1 && image_h >= 1 && image_w >= 1, ErrorKind::kInput,
          "region: grid and image sizes must be positive");
  constexpr double kSlack = 1e-9;
  require(offset_h >= 0.0 && offset_h <= (1.0 - scale) * image_h + kSlack, ErrorKind::kInput,
          "region: row offset outside [0, (1 - scale) * height]");
  require(offset_w >= 0.0 && offset_w <= (1.0 - scale) * image_w + kSlack, ErrorKind::kInput,
          "region: column offset outside [0, (1 - scale) * width]");
}

RegionSpec sample_region(double scale, Rng& rng, int image_h, int image_w, int grid_h, int grid_w) {
  require(scale > 0.0 && scale <= 1.0, ErrorKind::kInput,
          "sample_region: scale must lie in (0, 1], got " + std::to_string(scale));
  RegionSpec r;
  r.scale = scale;
  r.image_h = image_h;
  r.image_w = image_w;
  r.grid_h = grid_h;
  r.grid_w = grid_w;
  const double slack_h = (1.0 - scale) * image_h;
  const double slack_w = (1.0 - scale) * image_w;
  r.offset_h = slack_h > 0.0 ? uniform(rng, 0.0, slack_h) : 0.0;
  r.offset_w = slack_w > 0.0 ? uniform(rng, 0.0, slack_w) : 0.0;
  r.validate();
  return r;
}

std::vector<PixelCoord> region_coordinates(const RegionSpec& region) {
  region.validate();
  std::vector<PixelCoord> out;
  out.reserve(static_cast<std::size_t>(region.grid_h) * region.grid_w);
  const double step_h = region.scale * region.image_h / region.grid_h;
  const double step_w = region.scale * region.image_w / region.grid_w;
  for (int i = 0; i < region.grid_h; ++i) {
    for (int j = 0; j < region.grid_w; ++j) {
      out.push_back({region.offset_h + (i + 0.5) * step_h, region.offset_w + (j + 0.5) * step_w});
    }
  }
  return out;
}

Image bilinear_crop(const Image& image, const RegionSpec& region) {
  require(image.height == region.image_h && image.width == region.image_w, ErrorKind::kInput,
          "bilinear_crop: image size does not match region");
  const auto coords = region_coordinates(region);
  Image out(region.grid_h, region.grid_w, image.channels);
  for (std::size_t k = 0; k < coords.size(); ++k) {
    const double u = coords[k].row - 0.5;
    const double v = coords[k].col - 0.5;
    const double fu = std::floor(u), fv = std::floor(v);
    const double wy = u - fu, wx = v - fv;
    auto clamp_row = [&](double r) { return std::clamp(static_cast<int>(r), 0, image.height - 1); };
    auto clamp_col = [&](double c) { return std::clamp(static_cast<int>(c), 0, image.width - 1); };
    const int r0 = clamp_row(fu), r1 = clamp_row(fu + 1), c0 = clamp_col(fv), c1 = clamp_col(fv + 1);
    for (int ch = 0; ch < image.channels; ++ch) {
      const double top = (1.0 - wx) * image.at(r0, c0, ch) + wx * image.at(r0, c1, ch);
      const double bottom = (1.0 - wx) * image.at(r1, c0, ch) + wx * image.at(r1, c1, ch);
      out.data[k * image.channels + ch] = static_cast<float>((1.0 - wy) * top + wy * bottom);
    }
  }
  return out;
}

CameraFrame camera_frame(const CameraPose& pose) {
  pose.validate();
  CameraFrame f;
  f.origin = pose.distance * Eigen::Vector3d(std::sin(pose.pitch) * std::cos(pose.yaw), std::cos(pose.pitch),
                                             std::sin(pose.pitch) * std::sin(pose.yaw));
  f.forward = -f.origin.normalized();
  Eigen::Vector3d right = f.forward.cross(Eigen::Vector3d::UnitY());
  require(right.norm() > 1e-9, ErrorKind::kInput, "camera pose: view direction parallel to the up axis");
  right.normalize();
  const Eigen::Vector3d up = right.cross(f.forward);
  const double c = std::cos(pose.roll), s = std::sin(pose.roll);
  f.right = c * right + s * up;
  f.up = -s * right + c * up;
  return f;
}

namespace {

Eigen::Vector3d direction_in_frame(const CameraFrame& frame, double tan_half, double row, double col, int image_h,
                                   int image_w) {
  const double aspect = static_cast<double>(image_w) / image_h;
  const double x = (2.0 * col / image_w - 1.0) * tan_half * aspect;
  const double y = (1.0 - 2.0 * row / image_h) * tan_half;
  return (frame.forward + x * frame.right + y * frame.up).normalized();
}

double tan_half_fov(const CameraPose& pose) {
  return std::tan(0.5 * pose.fov_degrees * std::numbers::pi / 180.0);
}

}  // namespace

Eigen::Vector3d pixel_direction(const CameraPose& pose, double row, double col, int image_h, int image_w) {
  return direction_in_frame(camera_frame(pose), tan_half_fov(pose), row, col, image_h, image_w);
}

std::vector<Ray> generate_rays(const CameraPose& pose, const RegionSpec& region, double near, double far) {
  require(near > 0.0 && near < far, ErrorKind::kInput, "generate_rays: need 0 < near < far");
  const CameraFrame frame = camera_frame(pose);
  const double tan_half = tan_half_fov(pose);
  require(std::isfinite(tan_half) && tan_half > 0.0, ErrorKind::kInput, "generate_rays: degenerate field of view");
  std::vector<Ray> rays;
  for (const auto& c : region_coordinates(region)) {
    rays.push_back({frame.origin, direction_in_frame(frame, tan_half, c.row, c.col, region.image_h, region.image_w),
                    near, far});
  }
  return rays;
}

std::vector<double> stratified_depths(const Ray& ray, int n_steps, Rng* rng) {
  require(n_steps >= 2, ErrorKind::kInput, "stratified_depths: need at least 2 steps");
  require(ray.near < ray.far, ErrorKind::kInput, "stratified_depths: need near < far");
  const double bin = (ray.far - ray.near) / n_steps;
  std::vector<double> out(n_steps);
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  for (int i = 0; i < n_steps; ++i) {
    const double u = rng ? jitter(*rng) : 0.5;
    out[i] = ray.near + (i + u) * bin;
  }
  return out;
}

CompositeResult composite(std::span<const double> depths, std::span<const double> densities,
                          std::span<const Eigen::Vector3d> colors, double far) {
  require(depths.size() == densities.size() && depths.size() == colors.size() && !depths.empty(),
          ErrorKind::kInput, "composite: depth, density and color arrays must align");
  CompositeResult r;
  r.weights.resize(depths.size());
  r.transmittance.resize(depths.size());
  double transmittance = 1.0;
  for (std::size_t i = 0; i < depths.size(); ++i) {
    require(std::isfinite(densities[i]) && std::isfinite(depths[i]) && colors[i].allFinite(), ErrorKind::kNumeric,
            "composite: non-finite sample at index " + std::to_string(i));
    require(densities[i] >= 0.0, ErrorKind::kInput, "composite: negative density at index " + std::to_string(i));
    const double next = i + 1 < depths.size() ? depths[i + 1] : far;
    const double delta = next - depths[i];
    const double attenuation = std::exp(-densities[i] * delta);
    r.transmittance[i] = transmittance;
    r.weights[i] = transmittance * (1.0 - attenuation);
    r.pixel += r.weights[i] * colors[i];
    transmittance *= attenuation;
  }
  r.final_transmittance = transmittance;
  return r;
}

std::vector<double> hierarchical_resample(std::span<const double> depths, std::span<const double> weights,
                                          double far, int n_fine, Rng* rng) {
  require(depths.size() == weights.size() && !depths.empty(), ErrorKind::kInput,
          "hierarchical_resample: depths and weights must align");
  std::vector<double> merged(depths.begin(), depths.end());
  if (n_fine <= 0) return merged;

  const std::size_t n = depths.size();
  std::vector<double> lengths(n), pdf(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    lengths[i] = (i + 1 < n ? depths[i + 1] : far) - depths[i];
    require(weights[i] >= 0.0 && std::isfinite(weights[i]), ErrorKind::kInput,
            "hierarchical_resample: weights must be finite and nonnegative");
    pdf[i] = weights[i];
    total += weights[i];
  }
  if (total <= 0.0) {
    log::debug("hierarchical_resample: all weights are zero, sampling uniformly");
    pdf = lengths;
    total = 0.0;
    for (double l : lengths) total += l;
  }
  std::vector<double> cdf(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) cdf[i + 1] = cdf[i] + pdf[i] / total;
  cdf[n] = 1.0;

  std::uniform_real_distribution<double> draw(0.0, 1.0);
  for (int k = 0; k < n_fine; ++k) {
    const double u = rng ? draw(*rng) : (k + 0.5) / n_fine;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    std::size_t bin = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, (it - cdf.begin()) - 1));
    bin = std::min(bin, n - 1);
    while (pdf[bin] <= 0.0 && bin + 1 < n) ++bin;
    const double mass = cdf[bin + 1] - cdf[bin];
    const double frac = mass > 0.0 ? std::clamp((u - cdf[bin]) / mass, 0.0, 1.0) : 0.5;
    merged.push_back(depths[bin] + frac * lengths[bin]);
  }
  std::sort(merged.begin(), merged.end());
  return merged;
}

template <typename S>
BatchComposite<S> composite_batch(const ad::Matrix<S>& depths, S far, const ad::Var<S>& density,
                                  const ad::Var<S>& color) {
  const ad::Index rays = depths.rows(), n = depths.cols();
  require(density.rows() == rays && density.cols() == n && color.rows() == rays && color.cols() == 3 * n,
          ErrorKind::kInput, "composite: density/color shapes do not match depths");
  const auto& sigma = density.value();
  const auto& rgb = color.value();
  require(sigma.allFinite() && rgb.allFinite(), ErrorKind::kNumeric, "composite: non-finite field output");
  require((sigma.array() >= S(0)).all(), ErrorKind::kInput, "composite: negative density");

  ad::Matrix<S> deltas(rays, n);
  for (ad::Index r = 0; r < rays; ++r) {
    for (ad::Index i = 0; i < n; ++i) deltas(r, i) = (i + 1 < n ? depths(r, i + 1) : far) - depths(r, i);
  }

  ad::Matrix<S> weights(rays, n), trans_after(rays, n), pixels = ad::Matrix<S>::Zero(rays, 3);
  ad::Matrix<S> final_t(rays, 1);
  for (ad::Index r = 0; r < rays; ++r) {
    S t = S(1);
    for (ad::Index i = 0; i < n; ++i) {
      const S attenuation = std::exp(-sigma(r, i) * deltas(r, i));
      const S w = t * (S(1) - attenuation);
      weights(r, i) = w;
      pixels(r, 0) += w * rgb(r, 3 * i);
      pixels(r, 1) += w * rgb(r, 3 * i + 1);
      pixels(r, 2) += w * rgb(r, 3 * i + 2);
      t *= attenuation;
      trans_after(r, i) = t;
    }
    final_t(r, 0) = t;
  }

  BatchComposite<S> out;
  out.weights = weights;
  out.final_transmittance = final_t;
  out.rgb = ad::make_first_order_op<S>(
      std::move(pixels), {density, color},
      [weights, trans_after, deltas, rgb](const ad::Matrix<S>& g) {
        const ad::Index rays = weights.rows(), n = weights.cols();
        ad::Matrix<S> g_sigma(rays, n), g_color(rays, 3 * n);
        for (ad::Index r = 0; r < rays; ++r) {
          S suffix = S(0);  // sum over later samples of w_i * <g, c_i>
          for (ad::Index i = n - 1; i >= 0; --i) {
            const S dot = g(r, 0) * rgb(r, 3 * i) + g(r, 1) * rgb(r, 3 * i + 1) + g(r, 2) * rgb(r, 3 * i + 2);
            g_sigma(r, i) = deltas(r, i) * (trans_after(r, i) * dot - suffix);
            suffix += weights(r, i) * dot;
            for (int c = 0; c < 3; ++c) g_color(r, 3 * i + c) = weights(r, i) * g(r, c);
          }
        }
        return std::vector<ad::Matrix<S>>{std::move(g_sigma), std::move(g_color)};
      });
  return out;
}

namespace {

template <typename S>
void fill_points(std::span<const Ray> rays, const ad::Matrix<S>& depths, ad::Matrix<S>& positions,
                 ad::Matrix<S>& directions) {
  const ad::Index n = depths.cols();
  positions.resize(static_cast<ad::Index>(rays.size()) * n, 3);
  directions.resize(positions.rows(), 3);
  for (std::size_t r = 0; r < rays.size(); ++r) {
    for (ad::Index i = 0; i < n; ++i) {
      const ad::Index row = static_cast<ad::Index>(r) * n + i;
      const Eigen::Vector3d p = rays[r].origin + static_cast<double>(depths(r, i)) * rays[r].direction;
      positions.row(row) = p.cast<S>().transpose();
      directions.row(row) = rays[r].direction.cast<S>().transpose();
    }
  }
}

template <typename S>
BatchComposite<S> evaluate(const FieldFn<S>& field, std::span<const Ray> rays, const ad::Matrix<S>& depths, S far) {
  ad::Matrix<S> positions, directions;
  fill_points(rays, depths, positions, directions);
  FieldOutput<S> out = field(positions, directions);
  const ad::Index r = depths.rows(), n = depths.cols();
  return composite_batch<S>(depths, far, ad::reshape(out.density, r, n), ad::reshape(out.color, r, 3 * n));
}

constexpr std::uint64_t kCoarseStream = 1;
constexpr std::uint64_t kFineStream = 2;

}  // namespace

template <typename S>
RayBatchResult<S> render_rays(const FieldFn<S>& field, std::span<const Ray> rays, const RenderOptions& options,
                              std::uint64_t first_ray_index) {
  require(!rays.empty(), ErrorKind::kInput, "render_rays: empty ray batch");
  const double far = rays.front().far;
  for (const auto& ray : rays) {
    require(ray.far == far, ErrorKind::kInput, "render_rays: rays in one batch must share the far bound");
  }
  const ad::Index count = static_cast<ad::Index>(rays.size());
  ad::Matrix<S> depths(count, options.steps);
  for (ad::Index r = 0; r < count; ++r) {
    std::vector<double> d;
    if (options.deterministic) {
      d = stratified_depths(rays[r], options.steps, nullptr);
    } else {
      Rng rng(derive_seed(options.seed, kCoarseStream, first_ray_index + r));
      d = stratified_depths(rays[r], options.steps, &rng);
    }
    for (int i = 0; i < options.steps; ++i) depths(r, i) = static_cast<S>(d[i]);
  }

  if (options.hierarchical) {
    const int fine = options.fine_steps > 0 ? options.fine_steps : options.steps;
    ad::Matrix<S> coarse_weights;
    {
      ad::NoGradGuard guard;
      coarse_weights = evaluate(field, rays, depths, static_cast<S>(far)).weights;
    }
    ad::Matrix<S> merged(count, options.steps + fine);
    for (ad::Index r = 0; r < count; ++r) {
      std::vector<double> d(options.steps), w(options.steps);
      for (int i = 0; i < options.steps; ++i) {
        d[i] = depths(r, i);
        w[i] = coarse_weights(r, i);
      }
      std::vector<double> m;
      if (options.deterministic) {
        m = hierarchical_resample(d, w, far, fine, nullptr);
      } else {
        Rng rng(derive_seed(options.seed, kFineStream, first_ray_index + r));
        m = hierarchical_resample(d, w, far, fine, &rng);
      }
      for (std::size_t i = 0; i < m.size(); ++i) merged(r, static_cast<ad::Index>(i)) = static_cast<S>(m[i]);
    }
    depths = std::move(merged);
  }

  BatchComposite<S> c = evaluate(field, rays, depths, static_cast<S>(far));
  return {c.rgb, depths, c.weights, c.final_transmittance};
}

template <typename S>
RenderedImage render_field(const FieldFn<S>& field, const CameraPose& pose, const RegionSpec& region,
                           const RenderOptions& options) {
  const std::vector<Ray> rays = generate_rays(pose, region, options.near, options.far);
  const std::size_t chunk = static_cast<std::size_t>(std::max(1, options.chunk_rays));
  const std::size_t chunks = (rays.size() + chunk - 1) / chunk;

  RenderedImage out;
  out.color = Image(region.grid_h, region.grid_w, 3);
  out.transmittance.assign(rays.size(), 0.0f);

  auto run_chunk = [&](std::size_t c) {
    ad::NoGradGuard guard;
    const std::size_t begin = c * chunk;
    const std::size_t len = std::min(chunk, rays.size() - begin);
    RayBatchResult<S> res = render_rays<S>(field, std::span<const Ray>(rays).subspan(begin, len), options, begin);
    for (std::size_t r = 0; r < len; ++r) {
      for (int ch = 0; ch < 3; ++ch) {
        out.color.data[(begin + r) * 3 + ch] = static_cast<float>(res.rgb.value()(r, ch));
      }
      out.transmittance[begin + r] = static_cast<float>(res.final_transmittance(r, 0));
    }
  };

  const int workers = std::max(1, std::min<int>(options.workers, static_cast<int>(chunks)));
  if (workers == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t c = w; c < chunks; c += workers) run_chunk(c);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return out;
}

template <typename S>
FieldFn<S> bind_style(const SceneField<S>& field, const ad::Var<S>& style) {
  return [&field, style](const ad::Matrix<S>& positions, const ad::Matrix<S>& directions) {
    return field.query(positions, directions, style);
  };
}

template <typename S>
RenderedImage render(const SceneField<S>& field, const StyleCode<S>& style, const CameraPose& pose,
                     const RegionSpec& region, const RenderOptions& options) {
  require(style.same_shape(field.config().layers, field.config().width), ErrorKind::kConfig,
          "render: style code does not match the field configuration");
  return render_field<S>(bind_style(field, style.as_constant()), pose, region, options);
}

template <typename S>
Image rows_to_image(const ad::Matrix<S>& rgb, int height, int width) {
  require(rgb.rows() == static_cast<ad::Index>(height) * width && rgb.cols() == 3, ErrorKind::kInput,
          "rows_to_image: shape mismatch");
  Image out(height, width, 3);
  for (ad::Index i = 0; i < rgb.size(); ++i) out.data[i] = static_cast<float>(rgb.data()[i]);
  return out;
}

template <typename S>
ad::Matrix<S> image_to_rows(const Image& image) {
  require(image.channels == 3, ErrorKind::kInput, "image_to_rows: expected an RGB image");
  ad::Matrix<S> out(static_cast<ad::Index>(image.pixel_count()), 3);
  for (std::size_t i = 0; i < image.data.size(); ++i) out.data()[i] = static_cast<S>(image.data[i]);
  return out;
}

#define SEMNERF_INSTANTIATE_RENDER(S)                                                                    \
  template BatchComposite<S> composite_batch<S>(const ad::Matrix<S>&, S, const ad::Var<S>&,              \
                                                const ad::Var<S>&);                                      \
  template RayBatchResult<S> render_rays<S>(const FieldFn<S>&, std::span<const Ray>, const RenderOptions&, \
                                            std::uint64_t);                                              \
  template RenderedImage render_field<S>(const FieldFn<S>&, const CameraPose&, const RegionSpec&,        \
                                         const RenderOptions&);                                          \
  template FieldFn<S> bind_style<S>(const SceneField<S>&, const ad::Var<S>&);                            \
  template RenderedImage render<S>(const SceneField<S>&, const StyleCode<S>&, const CameraPose&,         \
                                   const RegionSpec&, const RenderOptions&);                             \
  template Image rows_to_image<S>(const ad::Matrix<S>&, int, int);                                       \
  template ad::Matrix<S> image_to_rows<S>(const Image&);

SEMNERF_INSTANTIATE_RENDER(float)
SEMNERF_INSTANTIATE_RENDER(double)

}  // namespace semnerf
