#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "semnerf/checkpoint.hpp"
#include "semnerf/inversion_encoder.hpp"
#include "semnerf/mask_pipeline.hpp"
#include "semnerf/scene_field.hpp"
#include "semnerf/synth_dataset.hpp"
#include "semnerf/volume_renderer.hpp"

namespace semnerf {

constexpr const char* kServiceVersion = "0.1.0";

/// Everything inference needs, loaded from a "model" checkpoint.
struct Model {
  SceneField<float> field;
  InversionEncoder<float> encoder;
  StyleAverages<float> averages;
  LabelTable labels;
  std::string checkpoint_hash;

  static Model from_checkpoint(const Checkpoint& ckpt, std::string hash = {});
  static Model load(const std::filesystem::path& path);
};

/// assemble_input -> encode -> apply_truncation.
StyleCode<float> encode_mask(const Model& model, const SemanticMask& mask);

struct ViewOptions {
  int size = 32;
  int steps = 72;
  bool hierarchical = false;
  int fine_steps = 0;
  bool deterministic = true;
  std::uint64_t seed = 0;
  int workers = 1;

  RenderOptions render_options() const;
};

std::vector<RenderedImage> render_views(const Model& model, const StyleCode<float>& style,
                                        std::span<const CameraPose> poses, const ViewOptions& options);

struct StyleMixSpec {
  std::uint64_t seed = 0;
  int layer = 0;  // 1-based first mixed layer; 0 = the last two layers
  double t = 1.0;
  double psi = 1.0;  // truncation of the sampled code toward the averages
  std::string space = "style";

  int first_layer(int layers) const;  // resolved, 1-based
};

/// The z-derived code a spec blends toward: avg + psi*(map(z(seed)) - avg).
StyleCode<float> mix_source(const StyleMixSpec& spec, const StyleAverages<float>& averages,
                            const SceneField<float>& mapping);

/// Layers below k are copied from `content`; layers k..L become
/// (1-t)*content + t*sampled, sampled = avg + psi*(map(z) - avg).
StyleCode<float> style_mix(const StyleCode<float>& content, const StyleMixSpec& spec,
                           const StyleAverages<float>& averages, const SceneField<float>& mapping);

/// Densities at world points, each queried with the viewing direction of the
/// ray from `pose`'s camera through it.
std::vector<float> densities_from_pose(const SceneField<float>& field, const StyleCode<float>& style,
                                       const CameraPose& pose, std::span<const Eigen::Vector3d> points);

/// Nearest-palette labeling of a rendered image (background = black).
ByteGrid labels_from_colors(const Image& image, std::span<const Eigen::Vector3d> palette);

/// Mean IoU over labels present in either grid.
double mean_iou(const ByteGrid& a, const ByteGrid& b, int n_labels);

/// Extension point for distribution metrics such as FID or IS; none are
/// built in.
class ImageSetMetric {
 public:
  virtual ~ImageSetMetric() = default;
  virtual std::string name() const = 0;
  virtual double compute(std::span<const Image> real, std::span<const Image> generated) = 0;
};

struct EvalOptions {
  ViewOptions view{32, 28};
  int limit = 32;
  int timing_renders = 20;
  std::vector<std::shared_ptr<ImageSetMetric>> metrics;
};

struct EvalReport {
  int samples = 0;
  double psnr_mean = 0, psnr_std = 0;
  double iou_mean = 0;
  double runtime_mean = 0, runtime_std = 0;
  double decoder_params_m = 0, encoder_params_m = 0;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
  std::string runtime_string() const;  // "0.18±0.003"
};

EvalReport evaluate(const Model& model, const std::filesystem::path& split_dir, const EvalOptions& options);

/// IoU of the analytic oracle: each sample's scene is re-rendered from the
/// dataset config and labeled by per-label opacity.
double oracle_mask_iou(const DatasetConfig& config, const std::filesystem::path& split_dir, int split, int limit);

// ---- HTTP service ---------------------------------------------------------

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  double handle_ttl_seconds = 600.0;
  std::size_t max_handles = 4096;
  int max_resolution = 256;
  int max_poses = 16;
  int max_steps = 256;
  int workers = 4;
  int queue_limit = 64;
};

void to_json(nlohmann::json& j, const ServiceConfig& c);
void from_json(const nlohmann::json& j, ServiceConfig& c);

/// Server-side style handles with a time-to-live.
class StyleCache {
 public:
  using Clock = std::chrono::steady_clock;

  StyleCache(double ttl_seconds, std::size_t capacity, std::function<Clock::time_point()> now = Clock::now);

  std::string put(const StyleCode<float>& style);
  /// Throws RequestError "unknown_handle" or "handle_expired".
  StyleCode<float> get(const std::string& handle);
  double ttl_seconds() const { return ttl_; }

 private:
  struct Entry {
    StyleCode<float> style;
    Clock::time_point expires;
  };
  void evict_locked();

  double ttl_;
  std::size_t capacity_;
  std::function<Clock::time_point()> now_;
  std::mutex mutex_;
  std::unordered_map<std::string, Entry> entries_;
  std::uint64_t counter_ = 0;
  std::uint64_t salt_;
};

struct HttpResult {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

/// Transport-independent request handling; the HTTP server is a thin shell.
class InferenceService {
 public:
  InferenceService(std::shared_ptr<const Model> model, ServiceConfig config,
                   std::function<StyleCache::Clock::time_point()> clock = StyleCache::Clock::now);

  HttpResult handle(const std::string& method, const std::string& path, const std::string& body);
  const ServiceConfig& config() const { return config_; }

 private:
  nlohmann::json health() const;
  nlohmann::json labels() const;
  HttpResult encode(const nlohmann::json& req);
  HttpResult render(const nlohmann::json& req);
  HttpResult mix(const nlohmann::json& req);
  StyleCode<float> style_from(const nlohmann::json& req);

  std::shared_ptr<const Model> model_;
  ServiceConfig config_;
  StyleCache cache_;
};

/// Blocking HTTP server over an InferenceService.
class HttpServer {
 public:
  HttpServer(std::shared_ptr<InferenceService> service);
  ~HttpServer();

  /// Binds and serves until stop(); port 0 picks a free port.
  void listen(const std::string& host, int port);
  int bind(const std::string& host, int port);  // returns the bound port
  void serve();                                  // after bind()
  void stop();
  bool running() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace semnerf
