#include "semnerf/synth_dataset.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "semnerf/checkpoint.hpp"
#include "semnerf/errors.hpp"
#include "semnerf/log.hpp"

namespace semnerf {

bool operator==(const SceneParams& a, const SceneParams& b) {
  if (a.parts.size() != b.parts.size() || a.sigma_max != b.sigma_max || a.falloff != b.falloff || a.seed != b.seed) {
    return false;
  }
  for (std::size_t i = 0; i < a.parts.size(); ++i) {
    const Part &p = a.parts[i], &q = b.parts[i];
    if (p.center != q.center || p.radii != q.radii || p.color != q.color || p.label != q.label) return false;
  }
  return true;
}

void PosePrior::validate() const {
  require(yaw_sd > 0.0 && pitch_sd > 0.0, ErrorKind::kConfig, "pose prior: standard deviations must be positive");
  require(fov_degrees > 0.0 && fov_degrees < 180.0 && distance > 0.0, ErrorKind::kConfig,
          "pose prior: invalid field of view or distance");
}

CameraPose PosePrior::sample(Rng& rng) const {
  CameraPose p;
  p.yaw = normal(rng, yaw_mean, yaw_sd);
  p.pitch = normal(rng, pitch_mean, pitch_sd);
  p.roll = roll;
  p.fov_degrees = fov_degrees;
  p.distance = distance;
  return p;
}

void to_json(nlohmann::json& j, const PosePrior& p) {
  j = {{"yaw_mean", p.yaw_mean}, {"yaw_sd", p.yaw_sd}, {"pitch_mean", p.pitch_mean}, {"pitch_sd", p.pitch_sd},
       {"roll", p.roll},         {"fov", p.fov_degrees}, {"distance", p.distance}};
}

void from_json(const nlohmann::json& j, PosePrior& p) {
  const PosePrior d;
  p.yaw_mean = j.value("yaw_mean", d.yaw_mean);
  p.yaw_sd = j.value("yaw_sd", d.yaw_sd);
  p.pitch_mean = j.value("pitch_mean", d.pitch_mean);
  p.pitch_sd = j.value("pitch_sd", d.pitch_sd);
  p.roll = j.value("roll", d.roll);
  p.fov_degrees = j.value("fov", d.fov_degrees);
  p.distance = j.value("distance", d.distance);
  p.validate();
}

const std::array<Eigen::Vector3d, kSynthLabelCount>& synth_palette() {
  static const std::array<Eigen::Vector3d, kSynthLabelCount> palette = {
      Eigen::Vector3d(0.0, 0.0, 0.0),    Eigen::Vector3d(0.86, 0.66, 0.50), Eigen::Vector3d(0.12, 0.32, 0.80),
      Eigen::Vector3d(0.80, 0.14, 0.20), Eigen::Vector3d(0.50, 0.30, 0.18), Eigen::Vector3d(0.96, 0.48, 0.62)};
  return palette;
}

namespace {

Eigen::Vector3d jittered(Rng& rng, int label, double jitter) {
  Eigen::Vector3d c = synth_palette()[label];
  for (int k = 0; k < 3; ++k) c[k] = std::clamp(c[k] + uniform(rng, -jitter, jitter), 0.0, 1.0);
  return c;
}

// Depth of the head's front surface at (x, y), relative to its center.
double front_depth(const Part& head, double x, double y) {
  const double u = (x - head.center.x()) / head.radii.x();
  const double v = (y - head.center.y()) / head.radii.y();
  return head.radii.z() * std::sqrt(std::max(0.0, 1.0 - u * u - v * v));
}

}  // namespace

SceneParams sample_scene(Rng& rng, const SceneRanges& r) {
  SceneParams s;
  Part head;
  head.label = kSkin;
  const double rx = uniform(rng, r.head_radius_min, r.head_radius_max);
  head.radii = Eigen::Vector3d(rx, rx * uniform(rng, 1.0, 1.15), rx * uniform(rng, 0.9, 1.05));
  head.center = Eigen::Vector3d(uniform(rng, -0.008, 0.008), uniform(rng, -0.012, 0.0), 0.0);
  head.color = jittered(rng, kSkin, r.color_jitter);
  s.parts.push_back(head);

  const double eye_r = uniform(rng, r.eye_radius_min, r.eye_radius_max);
  const double eye_dx = head.radii.x() * uniform(rng, 0.28, 0.42);
  const double eye_y = head.center.y() + head.radii.y() * uniform(rng, 0.08, 0.3);
  const Eigen::Vector3d eye_color = jittered(rng, kEye, r.color_jitter);
  for (double side : {-1.0, 1.0}) {
    Part eye;
    eye.label = kEye;
    const double x = head.center.x() + side * eye_dx;
    eye.center = Eigen::Vector3d(x, eye_y, head.center.z() + front_depth(head, x, eye_y) - 0.6 * eye_r);
    eye.radii = Eigen::Vector3d::Constant(eye_r);
    eye.color = eye_color;
    s.parts.push_back(eye);
  }

  Part mouth;
  mouth.label = kMouth;
  const double mw = uniform(rng, r.mouth_width_min, r.mouth_width_max);
  mouth.radii = Eigen::Vector3d(mw, mw * uniform(rng, 0.3, 0.5), mw * 0.5);
  const double mx = head.center.x() + uniform(rng, -0.005, 0.005);
  const double my = head.center.y() - head.radii.y() * uniform(rng, 0.38, 0.52);
  mouth.center = Eigen::Vector3d(mx, my, head.center.z() + front_depth(head, mx, my) - 0.4 * mouth.radii.z());
  mouth.color = jittered(rng, kMouth, r.color_jitter);
  s.parts.push_back(mouth);

  if (uniform(rng, 0.0, 1.0) < r.nose_probability) {
    Part nose;
    nose.label = kNose;
    const double nr = uniform(rng, 0.014, 0.022);
    const double ny = head.center.y() - head.radii.y() * uniform(rng, 0.05, 0.18);
    nose.center = Eigen::Vector3d(head.center.x(), ny, head.center.z() + front_depth(head, head.center.x(), ny) - 0.3 * nr);
    nose.radii = Eigen::Vector3d::Constant(nr);
    nose.color = jittered(rng, kNose, r.color_jitter);
    s.parts.push_back(nose);
  }
  if (uniform(rng, 0.0, 1.0) < r.ear_probability) {
    const double er = uniform(rng, 0.022, 0.032);
    const Eigen::Vector3d ear_color = jittered(rng, kEar, r.color_jitter);
    for (double side : {-1.0, 1.0}) {
      Part ear;
      ear.label = kEar;
      ear.center = head.center + Eigen::Vector3d(side * 0.55 * head.radii.x(), 0.8 * head.radii.y(), -0.2 * head.radii.z());
      ear.radii = Eigen::Vector3d(er, er * 1.3, er * 0.6);
      ear.color = ear_color;
      s.parts.push_back(ear);
    }
  }
  return s;
}

AnalyticField::AnalyticField(SceneParams params) : params_(std::move(params)) {
  require(!params_.parts.empty(), ErrorKind::kInput, "analytic field: scene has no parts");
  require(params_.falloff >= 0.0 && params_.sigma_max > 0.0, ErrorKind::kInput,
          "analytic field: need sigma_max > 0 and falloff >= 0");
}

double AnalyticField::occupancy(const Part& part, const Eigen::Vector3d& p) const {
  const double level = part.level(p);
  if (level <= 1.0) return 1.0;
  if (params_.falloff <= 0.0) return 0.0;
  return std::max(0.0, 1.0 - (level - 1.0) / params_.falloff);
}

int AnalyticField::dominant_part(const Eigen::Vector3d& p) const {
  int best = -1;
  double best_occ = 0.0;
  for (int i = 0; i < static_cast<int>(params_.parts.size()); ++i) {
    const double occ = occupancy(params_.parts[i], p);
    if (occ > 0.0 && occ >= best_occ) {
      best = i;
      best_occ = occ;
    }
  }
  return best;
}

double AnalyticField::density(const Eigen::Vector3d& p) const {
  double occ = 0.0;
  for (const auto& part : params_.parts) occ = std::max(occ, occupancy(part, p));
  return params_.sigma_max * occ;
}

Eigen::Vector3d AnalyticField::color(const Eigen::Vector3d& p) const {
  const int i = dominant_part(p);
  return i < 0 ? Eigen::Vector3d::Zero() : params_.parts[i].color;
}

int AnalyticField::label(const Eigen::Vector3d& p) const {
  const int i = dominant_part(p);
  return i < 0 ? kBackground : params_.parts[i].label;
}

template <typename S>
FieldFn<S> AnalyticField::as_field_fn() const {
  return [self = *this](const ad::Matrix<S>& positions, const ad::Matrix<S>&) {
    ad::Matrix<S> sigma(positions.rows(), 1), rgb(positions.rows(), 3);
    for (ad::Index i = 0; i < positions.rows(); ++i) {
      const Eigen::Vector3d p = positions.row(i).transpose().template cast<double>();
      const int part = self.dominant_part(p);
      sigma(i, 0) = static_cast<S>(part < 0 ? 0.0 : self.density(p));
      const Eigen::Vector3d c = part < 0 ? Eigen::Vector3d::Zero() : self.params_.parts[part].color;
      rgb.row(i) = c.cast<S>().transpose();
    }
    return FieldOutput<S>{ad::constant<S>(std::move(sigma)), ad::constant<S>(std::move(rgb))};
  };
}

template FieldFn<float> AnalyticField::as_field_fn<float>() const;
template FieldFn<double> AnalyticField::as_field_fn<double>() const;

void to_json(nlohmann::json& j, const SynthRenderOptions& o) {
  j = {{"image_size", o.image_size}, {"steps", o.steps}, {"fine_steps", o.fine_steps}};
}

void from_json(const nlohmann::json& j, SynthRenderOptions& o) {
  const SynthRenderOptions d;
  o.image_size = j.value("image_size", d.image_size);
  o.steps = j.value("steps", d.steps);
  o.fine_steps = j.value("fine_steps", d.fine_steps);
}

namespace {

RenderOptions gt_options(const SynthRenderOptions& o) {
  RenderOptions r;
  r.steps = o.steps;
  r.hierarchical = o.fine_steps > 0;
  r.fine_steps = o.fine_steps;
  r.deterministic = true;
  return r;
}

struct RayPass {
  ad::Matrix<double> rgb;
  std::vector<std::vector<double>> label_opacity;  // label-major
};

RayPass trace(const AnalyticField& field, const CameraPose& pose, const RegionSpec& region,
              const RenderOptions& options) {
  const auto rays = generate_rays(pose, region, options.near, options.far);
  const FieldFn<double> fn = field.as_field_fn<double>();
  ad::NoGradGuard guard;
  const RayBatchResult<double> res = render_rays<double>(fn, rays, options);
  RayPass out;
  out.rgb = res.rgb.value();
  out.label_opacity.assign(kSynthLabelCount, std::vector<double>(rays.size(), 0.0));
  for (std::size_t r = 0; r < rays.size(); ++r) {
    for (ad::Index i = 0; i < res.depths.cols(); ++i) {
      const double w = res.weights(static_cast<ad::Index>(r), i);
      if (w == 0.0) continue;
      const Eigen::Vector3d p = rays[r].origin + res.depths(static_cast<ad::Index>(r), i) * rays[r].direction;
      out.label_opacity[field.label(p)][r] += w;
    }
  }
  return out;
}

}  // namespace

std::vector<std::vector<double>> render_label_opacity(const AnalyticField& field, const CameraPose& pose,
                                                     const RegionSpec& region, const RenderOptions& options) {
  return trace(field, pose, region, options).label_opacity;
}

ByteGrid labels_from_opacity(const std::vector<std::vector<double>>& opacity, int height, int width) {
  ByteGrid out(height, width);
  for (std::size_t px = 0; px < out.data.size(); ++px) {
    double total = 0.0;
    int best = kBackground;
    double best_value = -1.0;
    for (std::size_t l = 0; l < opacity.size(); ++l) {
      total += opacity[l][px];
      if (l != kBackground && opacity[l][px] > best_value) {
        best_value = opacity[l][px];
        best = static_cast<int>(l);
      }
    }
    out.data[px] = static_cast<std::uint8_t>(total < 0.5 ? kBackground : best);
  }
  return out;
}

SynthSample render_sample(const SceneParams& params, const CameraPose& pose, const SynthRenderOptions& options) {
  require(options.image_size >= 4, ErrorKind::kInput, "render_sample: image size must be at least 4");
  const AnalyticField field(params);
  const int n = options.image_size;
  const RayPass pass = trace(field, pose, RegionSpec::full(n, n), gt_options(options));
  SynthSample s;
  s.pose = pose;
  s.image = rows_to_image<double>(pass.rgb, n, n);
  s.mask.table = LabelTable::synthetic();
  s.mask.labels = labels_from_opacity(pass.label_opacity, n, n);
  s.opacity.assign(static_cast<std::size_t>(n) * n, 0.0f);
  for (const auto& plane : pass.label_opacity)
    for (std::size_t i = 0; i < plane.size(); ++i) s.opacity[i] += static_cast<float>(plane[i]);
  return s;
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"n_train", c.n_train}, {"n_test", c.n_test}, {"seed", c.seed}, {"render", c.render}, {"poses", c.poses},
       {"ranges",
        {{"head_radius_min", c.ranges.head_radius_min},
         {"head_radius_max", c.ranges.head_radius_max},
         {"eye_radius_min", c.ranges.eye_radius_min},
         {"eye_radius_max", c.ranges.eye_radius_max},
         {"mouth_width_min", c.ranges.mouth_width_min},
         {"mouth_width_max", c.ranges.mouth_width_max},
         {"color_jitter", c.ranges.color_jitter},
         {"ear_probability", c.ranges.ear_probability},
         {"nose_probability", c.ranges.nose_probability}}}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  const DatasetConfig d;
  c.n_train = j.value("n_train", d.n_train);
  c.n_test = j.value("n_test", d.n_test);
  c.seed = j.value("seed", d.seed);
  c.render = j.value("render", d.render);
  c.poses = j.value("poses", d.poses);
  c.workers = j.value("workers", d.workers);
  if (j.contains("ranges")) {
    const auto& r = j["ranges"];
    c.ranges.head_radius_min = r.value("head_radius_min", d.ranges.head_radius_min);
    c.ranges.head_radius_max = r.value("head_radius_max", d.ranges.head_radius_max);
    c.ranges.eye_radius_min = r.value("eye_radius_min", d.ranges.eye_radius_min);
    c.ranges.eye_radius_max = r.value("eye_radius_max", d.ranges.eye_radius_max);
    c.ranges.mouth_width_min = r.value("mouth_width_min", d.ranges.mouth_width_min);
    c.ranges.mouth_width_max = r.value("mouth_width_max", d.ranges.mouth_width_max);
    c.ranges.color_jitter = r.value("color_jitter", d.ranges.color_jitter);
    c.ranges.ear_probability = r.value("ear_probability", d.ranges.ear_probability);
    c.ranges.nose_probability = r.value("nose_probability", d.ranges.nose_probability);
  }
}

namespace {

constexpr std::uint64_t kSceneStream = 10;
constexpr std::uint64_t kPoseStream = 20;
constexpr const char* kSplitNames[] = {"train", "test"};

}  // namespace

SceneParams scene_for(const DatasetConfig& config, int split, int index) {
  const std::uint64_t seed = derive_seed(config.seed, kSceneStream + split, static_cast<std::uint64_t>(index));
  Rng rng(seed);
  SceneParams s = sample_scene(rng, config.ranges);
  s.seed = seed;
  return s;
}

CameraPose pose_for(const DatasetConfig& config, int split, int index) {
  Rng rng(derive_seed(config.seed, kPoseStream + split, static_cast<std::uint64_t>(index)));
  return config.poses.sample(rng);
}

nlohmann::json build_dataset(const DatasetConfig& config, const std::filesystem::path& out) {
  require(config.n_train >= 0 && config.n_test >= 0 && config.n_train + config.n_test > 0, ErrorKind::kConfig,
          "build_dataset: need at least one sample");
  require(config.n_train <= 100000 && config.n_test <= 100000, ErrorKind::kConfig,
          "build_dataset: at most 100000 samples per split");
  config.poses.validate();
  const int counts[] = {config.n_train, config.n_test};

  for (int split = 0; split < 2; ++split) {
    const std::filesystem::path dir = out / kSplitNames[split];
    std::filesystem::create_directories(dir);
    write_labels(dir / "labels.txt", LabelTable::synthetic());
    std::map<int, CameraPose> poses;
    for (int i = 0; i < counts[split]; ++i) poses[i] = pose_for(config, split, i);
    write_poses(dir / "poses.csv", poses);

    auto work = [&](int i) {
      const SynthSample s = render_sample(scene_for(config, split, i), poses[i], config.render);
      save_sample_files(dir, Sample{i, s.mask, s.image, s.pose});
    };
    const int workers = std::max(1, std::min(config.workers, counts[split]));
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (int i = w; i < counts[split]; i += workers) work(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    log::info("build_dataset: wrote " + std::to_string(counts[split]) + " " + kSplitNames[split] + " samples");
  }

  nlohmann::json manifest;
  manifest["format"] = "semnerf-dataset";
  manifest["version"] = 1;
  manifest["config"] = config;
  manifest["config"].erase("workers");
  manifest["splits"] = {{"train", {{"count", config.n_train}, {"scene_stream", kSceneStream}}},
                        {"test", {{"count", config.n_test}, {"scene_stream", kSceneStream + 1}}}};
  nlohmann::json files = nlohmann::json::object();
  for (int split = 0; split < 2; ++split) {
    const std::string s = kSplitNames[split];
    files[s + "/labels.txt"] = sha256_file(out / s / "labels.txt");
    files[s + "/poses.csv"] = sha256_file(out / s / "poses.csv");
    for (int i = 0; i < counts[split]; ++i) {
      for (const char* kind : {"masks", "images"}) {
        const std::string rel = s + "/" + kind + "/" + sample_name(i) + ".png";
        files[rel] = sha256_file(out / rel);
      }
    }
  }
  manifest["files"] = std::move(files);
  const std::string text = manifest.dump(2) + "\n";
  write_file(out / "manifest.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return manifest;
}

std::vector<std::string> verify_manifest(const std::filesystem::path& out) {
  const auto bytes = read_file(out / "manifest.json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, std::string("manifest.json: ") + e.what());
  }
  std::vector<std::string> bad;
  for (const auto& [rel, sum] : manifest.at("files").items()) {
    const auto path = out / rel;
    if (!std::filesystem::exists(path) || sha256_file(path) != sum.get<std::string>()) bad.push_back(rel);
  }
  return bad;
}

}  // namespace semnerf
