#include "semnerf/inference_service.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <httplib.h>

#include "semnerf/adversarial_training.hpp"
#include "semnerf/errors.hpp"
#include "semnerf/log.hpp"

namespace semnerf {

namespace {

constexpr std::uint64_t kMixStream = 60;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

double elapsed_seconds(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace

// ---- model ----------------------------------------------------------------

Model Model::from_checkpoint(const Checkpoint& ckpt, std::string hash) {
  require(ckpt.kind == "model", ErrorKind::kData,
          "checkpoint kind is '" + ckpt.kind + "', expected 'model' (an encoder training output)");
  require(ckpt.config.contains("encoder") && ckpt.config.contains("labels"), ErrorKind::kData,
          "model checkpoint is missing the encoder or label configuration");
  SceneField<float> field = restore_field<float>(ckpt);
  const EncoderConfig ec = ckpt.config["encoder"].get<EncoderConfig>();
  require_compatible(ec, field.config());
  InversionEncoder<float> encoder(ec);
  restore_parameters<float>(ckpt, "encoder.", encoder.named_parameters());
  StyleAverages<float> averages = restore_averages(ckpt);
  require(averages.same_shape(field.config().layers, field.config().width), ErrorKind::kData,
          "model checkpoint: style averages do not match the decoder");
  LabelTable labels{ckpt.config["labels"].get<std::vector<std::string>>()};
  require(labels.size() + 2 == ec.channels, ErrorKind::kData,
          "model checkpoint: label table has " + std::to_string(labels.size()) + " entries but the encoder expects " +
              std::to_string(ec.channels - 2));
  if (hash.empty()) hash = sha256_hex(serialize_checkpoint(ckpt));
  return Model{std::move(field), std::move(encoder), std::move(averages), std::move(labels), std::move(hash)};
}

Model Model::load(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  return from_checkpoint(parse_checkpoint(bytes), sha256_hex(bytes));
}

StyleCode<float> encode_mask(const Model& model, const SemanticMask& mask) {
  const int n = model.labels.size();
  require(mask.height() > 0 && mask.width() > 0, ErrorKind::kInput, "encode_mask: empty mask");
  std::set<int> unknown;
  for (std::uint8_t v : mask.labels.data)
    if (v >= n) unknown.insert(v);
  if (!unknown.empty()) {
    std::string list;
    for (int v : unknown) list += (list.empty() ? "" : ", ") + std::to_string(v);
    throw RequestError("unknown_label", "mask uses label id(s) " + list + " outside the model's table of " +
                                            std::to_string(n) + " labels");
  }
  SemanticMask m{mask.labels, model.labels};
  const EncoderConfig& ec = model.encoder.config();
  const EncoderInput input = assemble_input(m, n, ec.resolution, ec.contour_thickness);
  return apply_truncation(model.encoder.encode(input), model.averages);
}

RenderOptions ViewOptions::render_options() const {
  RenderOptions o;
  o.steps = steps;
  o.hierarchical = hierarchical;
  o.fine_steps = fine_steps;
  o.deterministic = deterministic;
  o.seed = seed;
  o.workers = workers;
  return o;
}

std::vector<RenderedImage> render_views(const Model& model, const StyleCode<float>& style,
                                        std::span<const CameraPose> poses, const ViewOptions& options) {
  require(options.size > 0 && options.steps > 0, ErrorKind::kInput, "render_views: size and steps must be positive");
  const RenderOptions ro = options.render_options();
  std::vector<RenderedImage> out;
  out.reserve(poses.size());
  for (const CameraPose& pose : poses) {
    pose.validate();
    RenderedImage img = render(model.field, style, pose, RegionSpec::full(options.size, options.size), ro);
    require(std::all_of(img.color.data.begin(), img.color.data.end(), [](float v) { return std::isfinite(v); }),
            ErrorKind::kNumeric, "render produced non-finite pixel values");
    out.push_back(std::move(img));
  }
  return out;
}

int StyleMixSpec::first_layer(int layers) const {
  const int k = layer == 0 ? std::max(1, layers - 1) : layer;
  if (k < 1 || k > layers)
    throw RequestError("invalid_value",
                       "mix layer " + std::to_string(layer) + " is outside 1.." + std::to_string(layers));
  return k;
}

StyleCode<float> mix_source(const StyleMixSpec& spec, const StyleAverages<float>& averages,
                            const SceneField<float>& mapping) {
  Rng rng(derive_seed(spec.seed, kMixStream, 0));
  std::vector<double> z(static_cast<std::size_t>(mapping.config().latent_dim));
  for (double& v : z) v = normal(rng);
  StyleCode<float> sampled = mapping.map_latent(z);
  if (spec.psi != 1.0) {
    const float psi = static_cast<float>(spec.psi);
    sampled.flat() = averages.flat() + psi * (sampled.flat() - averages.flat());
  }
  return sampled;
}

StyleCode<float> style_mix(const StyleCode<float>& content, const StyleMixSpec& spec,
                           const StyleAverages<float>& averages, const SceneField<float>& mapping) {
  const int layers = content.layers();
  const int k = spec.first_layer(layers);
  if (!(spec.t >= 0.0 && spec.t <= 1.0))
    throw RequestError("invalid_value", "mix weight t must lie in [0, 1]");
  if (spec.space != "style")
    throw RequestError("invalid_value", "mix space '" + spec.space + "' is not supported; use 'style'");
  require(content.same_shape(averages) && content.same_shape(mapping.config().layers, mapping.config().width),
          ErrorKind::kConfig, "style_mix: content, averages and mapping disagree on the style shape");
  if (spec.t == 0.0) return content;

  const StyleCode<float> sampled = mix_source(spec, averages, mapping);

  StyleCode<float> out = content;
  const float t = static_cast<float>(spec.t);
  for (int l = k - 1; l < layers; ++l) {
    if (spec.t == 1.0) {
      out.gamma(l) = sampled.gamma(l);
      out.beta(l) = sampled.beta(l);
    } else {
      out.gamma(l) = (1.0f - t) * content.gamma(l) + t * sampled.gamma(l);
      out.beta(l) = (1.0f - t) * content.beta(l) + t * sampled.beta(l);
    }
  }
  return out;
}

std::vector<float> densities_from_pose(const SceneField<float>& field, const StyleCode<float>& style,
                                       const CameraPose& pose, std::span<const Eigen::Vector3d> points) {
  const Eigen::Vector3d origin = camera_frame(pose).origin;
  ad::Matrix<float> pos(static_cast<ad::Index>(points.size()), 3), dir(static_cast<ad::Index>(points.size()), 3);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Eigen::Vector3d d = (points[i] - origin).normalized();
    for (int c = 0; c < 3; ++c) {
      pos(static_cast<ad::Index>(i), c) = static_cast<float>(points[i][c]);
      dir(static_cast<ad::Index>(i), c) = static_cast<float>(d[c]);
    }
  }
  ad::NoGradGuard guard;
  const FieldOutput<float> out = field.query(pos, dir, style.as_constant());
  const auto& v = out.density.value();
  return std::vector<float>(v.data(), v.data() + v.size());
}

ByteGrid labels_from_colors(const Image& image, std::span<const Eigen::Vector3d> palette) {
  require(image.channels == 3 && !palette.empty(), ErrorKind::kInput, "labels_from_colors: need RGB and a palette");
  ByteGrid out(image.height, image.width);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) {
      const Eigen::Vector3d p(image.at(r, c, 0), image.at(r, c, 1), image.at(r, c, 2));
      int best = 0;
      double best_d = (p - palette[0]).squaredNorm();
      for (std::size_t k = 1; k < palette.size(); ++k) {
        const double d = (p - palette[k]).squaredNorm();
        if (d < best_d) best_d = d, best = static_cast<int>(k);
      }
      out.at(r, c) = static_cast<std::uint8_t>(best);
    }
  return out;
}

double mean_iou(const ByteGrid& a, const ByteGrid& b, int n_labels) {
  require(a.height == b.height && a.width == b.width, ErrorKind::kInput, "mean_iou: grids differ in size");
  std::vector<std::int64_t> inter(n_labels, 0), uni(n_labels, 0);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const int x = a.data[i], y = b.data[i];
    require(x < n_labels && y < n_labels, ErrorKind::kInput, "mean_iou: label out of range");
    if (x == y) {
      ++inter[x];
      ++uni[x];
    } else {
      ++uni[x];
      ++uni[y];
    }
  }
  double sum = 0.0;
  int present = 0;
  for (int k = 0; k < n_labels; ++k)
    if (uni[k] > 0) sum += static_cast<double>(inter[k]) / static_cast<double>(uni[k]), ++present;
  return present ? sum / present : 1.0;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j = {{"samples", samples},
                      {"psnr_mean", psnr_mean},
                      {"psnr_std", psnr_std},
                      {"iou_mean", iou_mean},
                      {"runtime_mean_s", runtime_mean},
                      {"runtime_std_s", runtime_std},
                      {"runtime", runtime_string()},
                      {"decoder_params_m", decoder_params_m},
                      {"encoder_params_m", encoder_params_m}};
  for (const auto& [k, v] : extra.items()) j[k] = v;
  return j;
}

std::string EvalReport::runtime_string() const {
  std::ostringstream s;
  s.precision(2);
  s << std::fixed << runtime_mean;
  s.precision(3);
  s << "±" << runtime_std;
  return s.str();
}

EvalReport evaluate(const Model& model, const std::filesystem::path& split_dir, const EvalOptions& options) {
  require(std::filesystem::is_directory(split_dir), ErrorKind::kIo, "evaluate: no split at " + split_dir.string());
  const Dataset ds(split_dir);
  require(ds.labels() == model.labels, ErrorKind::kData, "evaluate: split label table differs from the model's");
  const std::size_t n = options.limit > 0 ? std::min<std::size_t>(options.limit, ds.size()) : ds.size();
  require(n > 0, ErrorKind::kData, "evaluate: split is empty");

  const bool synthetic = model.labels == LabelTable::synthetic();
  const auto& pal = synth_palette();
  std::vector<Eigen::Vector3d> palette(pal.begin(), pal.end());

  EvalReport rep;
  std::vector<double> psnrs, ious;
  std::vector<Image> real, generated;
  for (std::size_t i = 0; i < n; ++i) {
    const Sample s = ds.load(ds.ids()[i]);
    ViewOptions view = options.view;
    view.size = s.image.height;
    const StyleCode<float> style = encode_mask(model, s.mask);
    const auto img = render_views(model, style, std::span(&s.pose, 1), view)[0].color;
    psnrs.push_back(psnr(s.image, img));
    if (synthetic) ious.push_back(mean_iou(labels_from_colors(img, palette), s.mask.labels, model.labels.size()));
    if (!options.metrics.empty()) {
      real.push_back(s.image);
      generated.push_back(img);
    }
  }

  std::vector<double> times;
  const int timing = std::max(20, options.timing_renders);
  for (int i = 0; i < timing; ++i) {
    const Sample s = ds.load(ds.ids()[static_cast<std::size_t>(i) % n]);
    ViewOptions view = options.view;
    view.size = s.image.height;
    const auto t0 = std::chrono::steady_clock::now();
    const StyleCode<float> style = encode_mask(model, s.mask);
    render_views(model, style, std::span(&s.pose, 1), view);
    times.push_back(elapsed_seconds(t0));
  }

  rep.samples = static_cast<int>(n);
  std::tie(rep.psnr_mean, rep.psnr_std) = mean_std(psnrs);
  rep.iou_mean = synthetic ? mean_std(ious).first : std::nan("");
  std::tie(rep.runtime_mean, rep.runtime_std) = mean_std(times);
  rep.decoder_params_m = static_cast<double>(model.field.parameter_count()) / 1e6;
  rep.encoder_params_m = static_cast<double>(model.encoder.parameter_count()) / 1e6;
  for (const auto& metric : options.metrics) rep.extra[metric->name()] = metric->compute(real, generated);
  return rep;
}

double oracle_mask_iou(const DatasetConfig& config, const std::filesystem::path& split_dir, int split, int limit) {
  const Dataset ds(split_dir);
  const std::size_t n = limit > 0 ? std::min<std::size_t>(limit, ds.size()) : ds.size();
  require(n > 0, ErrorKind::kData, "oracle_mask_iou: split is empty");
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int id = ds.ids()[i];
    const SynthSample s = render_sample(scene_for(config, split, id), ds.pose(id), config.render);
    const Sample stored = ds.load(id);
    sum += mean_iou(s.mask.labels, stored.mask.labels, ds.labels().size());
  }
  return sum / static_cast<double>(n);
}

// ---- style cache ----------------------------------------------------------

void to_json(nlohmann::json& j, const ServiceConfig& c) {
  j = {{"host", c.host},
       {"port", c.port},
       {"handle_ttl_seconds", c.handle_ttl_seconds},
       {"max_handles", c.max_handles},
       {"max_resolution", c.max_resolution},
       {"max_poses", c.max_poses},
       {"max_steps", c.max_steps},
       {"workers", c.workers},
       {"queue_limit", c.queue_limit}};
}

void from_json(const nlohmann::json& j, ServiceConfig& c) {
  const ServiceConfig d;
  c.host = j.value("host", d.host);
  c.port = j.value("port", d.port);
  c.handle_ttl_seconds = j.value("handle_ttl_seconds", d.handle_ttl_seconds);
  c.max_handles = j.value("max_handles", d.max_handles);
  c.max_resolution = j.value("max_resolution", d.max_resolution);
  c.max_poses = j.value("max_poses", d.max_poses);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.workers = j.value("workers", d.workers);
  c.queue_limit = j.value("queue_limit", d.queue_limit);
  require(c.handle_ttl_seconds > 0 && c.max_handles > 0 && c.max_resolution > 0 && c.max_poses > 0 &&
              c.max_steps > 0 && c.workers > 0 && c.queue_limit > 0,
          ErrorKind::kConfig, "service config: limits must be positive");
}

StyleCache::StyleCache(double ttl_seconds, std::size_t capacity, std::function<Clock::time_point()> now)
    : ttl_(ttl_seconds), capacity_(capacity), now_(std::move(now)), salt_(std::random_device{}()) {
  require(ttl_ > 0 && capacity_ > 0, ErrorKind::kConfig, "style cache: ttl and capacity must be positive");
}

std::string StyleCache::put(const StyleCode<float>& style) {
  std::lock_guard lock(mutex_);
  evict_locked();
  const std::uint64_t id = ++counter_;
  const std::string handle = hex64(mix_seed(salt_ ^ id)) + hex64(id);
  const auto ttl = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(ttl_));
  entries_[handle] = Entry{style, now_() + ttl};
  return handle;
}

StyleCode<float> StyleCache::get(const std::string& handle) {
  std::lock_guard lock(mutex_);
  const auto it = entries_.find(handle);
  if (it == entries_.end()) throw RequestError("unknown_handle", "style handle '" + handle + "' is not known");
  if (now_() >= it->second.expires)
    throw RequestError("handle_expired", "style handle '" + handle + "' has expired; encode the mask again");
  return it->second.style;
}

void StyleCache::evict_locked() {
  // Expired entries linger for one extra TTL so clients see handle_expired.
  const auto now = now_();
  const auto grace = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(ttl_));
  std::erase_if(entries_, [&](const auto& kv) { return kv.second.expires + grace <= now; });
  while (entries_.size() >= capacity_) {
    auto oldest = std::min_element(entries_.begin(), entries_.end(),
                                   [](const auto& a, const auto& b) { return a.second.expires < b.second.expires; });
    entries_.erase(oldest);
  }
}

// ---- request handling -----------------------------------------------------

namespace {

using nlohmann::json;

HttpResult json_result(int status, const json& body) { return {status, "application/json", body.dump()}; }

HttpResult error_result(int status, const std::string& code, const std::string& message) {
  return json_result(status, {{"error", {{"code", code}, {"message", message}}}});
}

int status_for(const std::string& code) {
  if (code == "unknown_handle" || code == "not_found") return 404;
  if (code == "handle_expired") return 410;
  if (code == "method_not_allowed") return 405;
  if (code == "too_large") return 413;
  return 400;
}

const json& field(const json& req, const char* key) {
  if (!req.contains(key)) throw RequestError("missing_field", std::string("request needs '") + key + "'");
  return req.at(key);
}

template <typename T>
T number(const json& req, const char* key, T fallback, T lo, T hi) {
  if (!req.contains(key)) return fallback;
  const json& v = req.at(key);
  if (!v.is_number()) throw RequestError("invalid_value", std::string("'") + key + "' must be a number");
  const double d = v.get<double>();
  if (!(d >= static_cast<double>(lo) && d <= static_cast<double>(hi)))
    throw RequestError("invalid_value", std::string("'") + key + "' must lie in [" + std::to_string(lo) + ", " +
                                            std::to_string(hi) + "]");
  if constexpr (std::is_integral_v<T>) {
    if (d != std::floor(d)) throw RequestError("invalid_value", std::string("'") + key + "' must be an integer");
  }
  return static_cast<T>(d);
}

bool flag(const json& req, const char* key, bool fallback) {
  if (!req.contains(key)) return fallback;
  if (!req.at(key).is_boolean()) throw RequestError("invalid_value", std::string("'") + key + "' must be a boolean");
  return req.at(key).get<bool>();
}

CameraPose parse_pose(const json& p) {
  CameraPose pose;
  if (p.is_array()) {
    if (p.size() < 2 || p.size() > 3 || !std::all_of(p.begin(), p.end(), [](const json& x) { return x.is_number(); }))
      throw RequestError("invalid_value", "a pose array is [yaw, pitch] or [yaw, pitch, roll]");
    pose.yaw = p[0].get<double>();
    pose.pitch = p[1].get<double>();
    if (p.size() == 3) pose.roll = p[2].get<double>();
  } else if (p.is_object()) {
    const double inf = std::numeric_limits<double>::max();
    pose.yaw = number<double>(p, "yaw", pose.yaw, -inf, inf);
    pose.pitch = number<double>(p, "pitch", pose.pitch, -inf, inf);
    pose.roll = number<double>(p, "roll", pose.roll, -inf, inf);
    pose.fov_degrees = number<double>(p, "fov_degrees", pose.fov_degrees, 1e-3, 179.0);
  } else {
    throw RequestError("invalid_value", "a pose is an object {yaw, pitch, roll} or an array");
  }
  try {
    pose.validate();
  } catch (const Error& e) {
    throw RequestError("invalid_value", e.what());
  }
  return pose;
}

SemanticMask parse_mask(const json& req, const LabelTable& labels) {
  const json& m = field(req, "mask");
  if (!m.is_string()) throw RequestError("invalid_value", "'mask' must be a base64-encoded 8-bit label PNG");
  std::vector<std::uint8_t> bytes;
  try {
    bytes = base64_decode(m.get<std::string>());
  } catch (const Error& e) {
    throw RequestError("invalid_mask", std::string("mask payload: ") + e.what());
  }
  try {
    return SemanticMask{decode_png_gray(bytes), labels};
  } catch (const Error& e) {
    throw RequestError("invalid_mask", std::string("mask payload is not a readable 8-bit gray PNG: ") + e.what());
  }
}

StyleMixSpec parse_mix(const json& m, int layers) {
  if (!m.is_object()) throw RequestError("invalid_value", "'mix' must be an object");
  StyleMixSpec spec;
  spec.seed = number<std::uint64_t>(m, "seed", 0, 0, std::numeric_limits<std::uint32_t>::max());
  spec.layer = number<int>(m, "layer", 0, 0, layers);
  spec.t = number<double>(m, "t", 1.0, 0.0, 1.0);
  spec.psi = number<double>(m, "psi", 1.0, 0.0, 2.0);
  if (m.contains("space")) {
    if (!m["space"].is_string()) throw RequestError("invalid_value", "'space' must be a string");
    spec.space = m["space"].get<std::string>();
  }
  return spec;
}

std::string new_diagnostic_id() {
  static std::atomic<std::uint64_t> counter{0};
  static const std::uint64_t salt = std::random_device{}();
  const auto now = static_cast<std::uint64_t>(std::chrono::system_clock::now().time_since_epoch().count());
  return hex64(mix_seed(salt ^ now ^ (counter.fetch_add(1) << 32)));
}

}  // namespace

InferenceService::InferenceService(std::shared_ptr<const Model> model, ServiceConfig config,
                                   std::function<StyleCache::Clock::time_point()> clock)
    : model_(std::move(model)), config_(std::move(config)),
      cache_(config_.handle_ttl_seconds, config_.max_handles, std::move(clock)) {
  require(model_ != nullptr, ErrorKind::kConfig, "inference service: no model");
}

nlohmann::json InferenceService::health() const {
  return {{"status", "ok"},
          {"version", kServiceVersion},
          {"checkpoint_hash", model_->checkpoint_hash},
          {"style_layers", model_->field.config().layers},
          {"style_width", model_->field.config().width},
          {"handle_ttl_seconds", cache_.ttl_seconds()}};
}

nlohmann::json InferenceService::labels() const {
  json list = json::array();
  for (int i = 0; i < model_->labels.size(); ++i) list.push_back({{"id", i}, {"name", model_->labels.names[i]}});
  return {{"labels", list}};
}

StyleCode<float> InferenceService::style_from(const json& req) {
  if (req.contains("handle")) {
    if (!req["handle"].is_string()) throw RequestError("invalid_value", "'handle' must be a string");
    return cache_.get(req["handle"].get<std::string>());
  }
  if (req.contains("mask")) return encode_mask(*model_, parse_mask(req, model_->labels));
  throw RequestError("missing_field", "request needs a style 'handle' or a 'mask'");
}

HttpResult InferenceService::encode(const json& req) {
  const StyleCode<float> style = encode_mask(*model_, parse_mask(req, model_->labels));
  return json_result(200, {{"handle", cache_.put(style)}, {"ttl_seconds", cache_.ttl_seconds()}});
}

HttpResult InferenceService::mix(const json& req) {
  const StyleCode<float> content = style_from(req);
  const StyleMixSpec spec = parse_mix(req, content.layers());
  const StyleCode<float> mixed = style_mix(content, spec, model_->averages, model_->field);
  return json_result(200, {{"handle", cache_.put(mixed)},
                           {"ttl_seconds", cache_.ttl_seconds()},
                           {"layer", spec.first_layer(content.layers())}});
}

HttpResult InferenceService::render(const json& req) {
  StyleCode<float> style = style_from(req);
  if (req.contains("mix")) style = style_mix(style, parse_mix(req["mix"], style.layers()), model_->averages, model_->field);

  const json& poses_in = field(req, "poses");
  if (!poses_in.is_array() || poses_in.empty())
    throw RequestError("invalid_value", "'poses' must be a non-empty list");
  if (static_cast<int>(poses_in.size()) > config_.max_poses)
    throw RequestError("too_large", "at most " + std::to_string(config_.max_poses) + " poses per request");
  std::vector<CameraPose> poses;
  if (req.contains("source_pose")) poses.push_back(parse_pose(req["source_pose"]));
  for (const json& p : poses_in) poses.push_back(parse_pose(p));

  ViewOptions view;
  view.size = number<int>(req, "size", 32, 1, config_.max_resolution);
  view.steps = number<int>(req, "steps", view.steps, 2, config_.max_steps);
  view.hierarchical = flag(req, "hierarchical", false);
  view.fine_steps = number<int>(req, "fine_steps", 0, 0, config_.max_steps);
  view.deterministic = flag(req, "deterministic", true);
  view.seed = number<std::uint64_t>(req, "seed", 0, 0, std::numeric_limits<std::uint32_t>::max());
  std::string format = "base64";
  if (req.contains("format")) {
    if (!req["format"].is_string()) throw RequestError("invalid_value", "'format' must be a string");
    format = req["format"].get<std::string>();
    if (format != "base64" && format != "png") throw RequestError("invalid_value", "'format' is 'base64' or 'png'");
  }
  if (format == "png" && poses.size() != 1)
    throw RequestError("invalid_value", "format 'png' returns one image; send exactly one pose");

  std::vector<RenderedImage> images;
  try {
    images = render_views(*model_, style, poses, view);
  } catch (const RequestError&) {
    throw;
  } catch (const std::exception& e) {
    const std::string id = new_diagnostic_id();
    log::error("render failure " + id + ": " + e.what());
    return json_result(500, {{"error", {{"code", "render_failed"},
                                        {"message", "rendering failed; see the server log"},
                                        {"diagnostic_id", id}}}});
  }

  if (format == "png") {
    const auto png = encode_png(images[0].color);
    return {200, "image/png", std::string(png.begin(), png.end())};
  }
  json list = json::array();
  for (const RenderedImage& img : images) list.push_back(base64_encode(encode_png(img.color)));
  json out = {{"width", view.size}, {"height", view.size}, {"format", "png"}};
  if (req.contains("source_pose")) {
    out["source"] = list[0];
    list.erase(list.begin());
  }
  out["images"] = list;
  return json_result(200, out);
}

HttpResult InferenceService::handle(const std::string& method, const std::string& path, const std::string& body) {
  try {
    if (path == "/health" || path == "/labels") {
      if (method != "GET") throw RequestError("method_not_allowed", path + " accepts GET");
      return json_result(200, path == "/health" ? health() : labels());
    }
    if (path != "/encode" && path != "/render" && path != "/render/raw" && path != "/mix")
      throw RequestError("not_found", "no endpoint " + path);
    if (method != "POST") throw RequestError("method_not_allowed", path + " accepts POST");
    json req;
    try {
      req = json::parse(body);
    } catch (const json::parse_error& e) {
      throw RequestError("malformed_json", std::string("request body is not valid JSON: ") + e.what());
    }
    if (!req.is_object()) throw RequestError("malformed_json", "request body must be a JSON object");
    if (path == "/encode") return encode(req);
    if (path == "/mix") return mix(req);
    if (path == "/render/raw") req["format"] = "png";
    return render(req);
  } catch (const RequestError& e) {
    return error_result(status_for(e.code()), e.code(), e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kInput) return error_result(400, "invalid_value", e.what());
    const std::string id = new_diagnostic_id();
    log::error("request failure " + id + ": " + e.what());
    return json_result(500, {{"error", {{"code", "internal_error"}, {"message", e.what()}, {"diagnostic_id", id}}}});
  } catch (const std::exception& e) {
    const std::string id = new_diagnostic_id();
    log::error("request failure " + id + ": " + e.what());
    return json_result(500,
                       {{"error", {{"code", "internal_error"}, {"message", "unexpected failure"}, {"diagnostic_id", id}}}});
  }
}

// ---- HTTP shell -----------------------------------------------------------

struct HttpServer::Impl {
  std::shared_ptr<InferenceService> service;
  httplib::Server server;
};

HttpServer::HttpServer(std::shared_ptr<InferenceService> service) : impl_(std::make_unique<Impl>()) {
  impl_->service = std::move(service);
  const ServiceConfig& cfg = impl_->service->config();
  const auto workers = static_cast<std::size_t>(cfg.workers);
  const auto queue = static_cast<std::size_t>(cfg.queue_limit);
  impl_->server.new_task_queue = [workers, queue] { return new httplib::ThreadPool(workers, queue); };
  auto dispatch = [svc = impl_->service](const httplib::Request& req, httplib::Response& res) {
    const HttpResult r = svc->handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  impl_->server.Get(R"(/.*)", dispatch);
  impl_->server.Post(R"(/.*)", dispatch);
  impl_->server.Put(R"(/.*)", dispatch);
  impl_->server.Delete(R"(/.*)", dispatch);
}

HttpServer::~HttpServer() { stop(); }

void HttpServer::listen(const std::string& host, int port) {
  bind(host, port);
  serve();
}

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  require(bound > 0, ErrorKind::kIo, "serve: cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::serve() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

bool HttpServer::running() const { return impl_->server.is_running(); }

// ---- base64 ---------------------------------------------------------------

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::string s;
  s.reserve(text.size());
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) s.push_back(c);
  require(s.size() % 4 == 0, ErrorKind::kInput, "base64: length is not a multiple of 4");
  if (s.empty()) return {};
  std::vector<std::uint8_t> out(s.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(s.data()), static_cast<int>(s.size()));
  require(n >= 0, ErrorKind::kInput, "base64: invalid characters");
  std::size_t pad = 0;
  if (s.back() == '=') ++pad;
  if (s.size() > 1 && s[s.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

}  // namespace semnerf
