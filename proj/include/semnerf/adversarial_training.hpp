#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semnerf/checkpoint.hpp"
#include "semnerf/inversion_encoder.hpp"
#include "semnerf/mask_pipeline.hpp"
#include "semnerf/nn.hpp"
#include "semnerf/scene_field.hpp"
#include "semnerf/synth_dataset.hpp"
#include "semnerf/volume_renderer.hpp"

namespace semnerf {

// Image batches are B x (h*w*3) rows, pixels row-major, channels last.

struct LossWeights {
  double rec = 1.0;
  double perceptual = 0.8;
  double reg = 0.005;
  double gan = 0.08;
  double r1 = 10.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

struct AnnealSchedule {
  double start = 0.9;
  double end = 0.06;
  double upper = 1.0;
  int total_steps = 200000;
  std::string shape = "exponential";

  void validate() const;
  /// Geometric interpolation start -> end over total_steps, clamped at end.
  double lower_bound(int step) const;
};

void to_json(nlohmann::json& j, const AnnealSchedule& s);
void from_json(const nlohmann::json& j, AnnealSchedule& s);

/// Region scale drawn uniformly in [lower_bound(step), upper].
double anneal_alpha(int step, const AnnealSchedule& schedule, Rng& rng);

/// Mean of squared differences.
template <typename S>
ad::Var<S> rec_loss(const ad::Var<S>& target, const ad::Var<S>& rendered);

/// Mean over the batch of the L2 norm of each offset row.
template <typename S>
ad::Var<S> reg_loss(const ad::Var<S>& offsets);

struct PerceptualConfig {
  std::vector<int> channels = {8, 16, 32};
  std::vector<int> layers = {0, 1, 2};  // which conv outputs are compared
  std::uint64_t seed = 1234;
};

void to_json(nlohmann::json& j, const PerceptualConfig& c);
void from_json(const nlohmann::json& j, PerceptualConfig& c);

/// Fixed random conv stack (3x3; first stride 1, then stride 2, leaky ReLU).
/// Weights are constants and never trained.
template <typename S>
class PerceptualExtractor {
 public:
  explicit PerceptualExtractor(const PerceptualConfig& config = {});

  /// Channel-normalized feature maps of the selected layers.
  std::vector<ad::Var<S>> features(const ad::Var<S>& images, int height, int width) const;
  const PerceptualConfig& config() const { return config_; }

 private:
  PerceptualConfig config_;
  std::vector<nn::Conv2d<S>> convs_;
};

/// Mean over selected layers of the mean squared difference of normalized
/// features.
template <typename S>
ad::Var<S> perceptual_loss(const ad::Var<S>& target, const ad::Var<S>& rendered, int height, int width,
                           const PerceptualExtractor<S>& extractor);

struct DiscriminatorConfig {
  std::vector<int> channels = {16, 32, 32};
  std::uint64_t seed = 77;
};

void to_json(nlohmann::json& j, const DiscriminatorConfig& c);
void from_json(const nlohmann::json& j, DiscriminatorConfig& c);

/// Conv stack ending in a 1-channel score map; the per-image score is the
/// map's mean.
template <typename S>
class PatchDiscriminator {
 public:
  explicit PatchDiscriminator(const DiscriminatorConfig& config = {});

  /// B x 1 scores.
  ad::Var<S> operator()(const ad::Var<S>& images, int height, int width) const;
  /// (B*oh*ow) x 1 score map.
  ad::Var<S> score_map(const ad::Var<S>& images, int height, int width) const;

  std::vector<NamedParameter<S>> named_parameters() const;
  std::vector<ad::Var<S>> parameters() const { return nn::vars(named_parameters()); }
  const DiscriminatorConfig& config() const { return config_; }

 private:
  DiscriminatorConfig config_;
  std::vector<nn::Conv2d<S>> convs_;
  nn::Conv2d<S> out_;
};

template <typename S>
using Scorer = std::function<ad::Var<S>(const ad::Var<S>& images)>;

template <typename S>
struct GanTerms {
  ad::Var<S> generator;      // mean softplus(-D(fake))
  ad::Var<S> discriminator;  // mean softplus(D(fake)) + mean softplus(-D(real)); fake detached
  ad::Var<S> r1;             // weight * mean ||dD(real)/d real||^2
};

/// `fake` keeps its graph for the generator term. The R1 term is built with
/// create_graph so it can be differentiated w.r.t. the discriminator.
template <typename S>
GanTerms<S> gan_losses(const ad::Var<S>& real, const ad::Var<S>& fake, const Scorer<S>& discriminator,
                       double r1_weight);

template <typename S>
struct LossParts {
  ad::Var<S> rec, perceptual, reg, gan;
};

template <typename S>
ad::Var<S> total_loss(const LossParts<S>& parts, const LossWeights& weights);
double total_loss(double rec, double perceptual, double reg, double gan, const LossWeights& weights);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void to_json(nlohmann::json& j, const AdamConfig& c);
void from_json(const nlohmann::json& j, AdamConfig& c);

template <typename S>
class Adam {
 public:
  Adam(std::vector<NamedParameter<S>> params, const AdamConfig& config);

  /// grads[i] matches params[i]; undefined gradients are treated as zero.
  void step(const std::vector<ad::Var<S>>& grads);
  std::int64_t steps() const { return t_; }
  const std::vector<NamedParameter<S>>& params() const { return params_; }
  std::vector<ad::Var<S>> vars() const { return nn::vars(params_); }

  void save(Checkpoint& ckpt, const std::string& prefix) const;
  void restore(const Checkpoint& ckpt, const std::string& prefix);

 private:
  std::vector<NamedParameter<S>> params_;
  AdamConfig config_;
  std::vector<ad::Matrix<S>> m_, v_;
  std::int64_t t_ = 0;
};

double psnr(double mse);

/// Training split held in memory.
struct TrainingSet {
  LabelTable labels;
  std::vector<int> ids;
  std::vector<Image> images;
  std::vector<SemanticMask> masks;
  std::vector<CameraPose> poses;
  std::vector<EncoderInput> inputs;  // filled by prepare_inputs

  static TrainingSet load(const std::filesystem::path& dir, int limit = 0);
  void prepare_inputs(int resolution, int thickness);
  std::size_t size() const { return images.size(); }
};

/// Batched renderer of per-item styles at per-item regions. Returns the
/// B x (grid_h*grid_w*3) image batch; differentiable w.r.t. `styles`.
template <typename S>
ad::Var<S> render_regions(const SceneField<S>& field, const ad::Var<S>& styles, std::span<const CameraPose> poses,
                          std::span<const RegionSpec> regions, const RenderOptions& options);

/// Ground-truth crops for the same regions, B x (grid_h*grid_w*3).
template <typename S>
ad::Matrix<S> crop_batch(std::span<const Image* const> images, std::span<const RegionSpec> regions);

struct DecoderTrainConfig {
  std::string mode = "glo";  // overfit | glo | adversarial
  FieldConfig field;
  int steps = 3000;
  int batch = 4;
  int rays_per_item = 256;
  int render_steps = 28;
  int region = 16;  // adversarial region grid
  AdamConfig optimizer{5e-4, 0.9, 0.999, 1e-8};
  AdamConfig latent_optimizer{1e-2, 0.9, 0.999, 1e-8};
  AdamConfig discriminator_optimizer{2e-5, 0.0, 0.99, 1e-8};
  DiscriminatorConfig discriminator;
  double r1 = 10.0;
  int limit = 0;  // cap on training scenes; 0 = all
  // overfit mode: one synthetic scene seen from several prior poses
  int overfit_views = 8;
  int overfit_scene = 0;
  int image_size = 32;
  double target_psnr = 0.0;  // stop early once reached (overfit mode); 0 disables
  int eval_every = 250;
  int log_every = 50;
  int checkpoint_every = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const DecoderTrainConfig& c);
void from_json(const nlohmann::json& j, DecoderTrainConfig& c);

struct EncoderTrainConfig {
  EncoderConfig encoder;
  LossWeights weights;
  AnnealSchedule schedule{0.9, 0.06, 1.0, 2000, "exponential"};
  int steps = 2000;
  int batch = 8;
  int gan_batch = 8;
  int region = 16;
  int render_steps = 28;
  int average_samples = 10000;
  AdamConfig optimizer{1e-4, 0.9, 0.999, 1e-8};
  AdamConfig discriminator_optimizer{2e-5, 0.0, 0.99, 1e-8};
  DiscriminatorConfig discriminator;
  PerceptualConfig perceptual;
  int limit = 0;
  int hash_check_every = 100;
  int log_every = 50;
  int checkpoint_every = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const EncoderTrainConfig& c);
void from_json(const nlohmann::json& j, EncoderTrainConfig& c);

struct LossRecord {
  int step = 0;
  double total = 0, rec = 0, perceptual = 0, reg = 0, gan = 0, discriminator = 0, r1 = 0, alpha = 1;
  double seconds = 0;
};

struct TrainReport {
  std::vector<LossRecord> history;
  double final_psnr = 0.0;  // overfit mode: mean PSNR over training views
  int steps_run = 0;
  std::string decoder_hash;
};

struct TrainHooks {
  std::filesystem::path loss_csv;        // empty: no CSV
  std::filesystem::path checkpoint_out;  // written at checkpoint_every and at the end
  std::function<void(const LossRecord&)> on_step;
};

/// Decoder pretraining. The returned checkpoint (kind "decoder") holds the
/// field, and for glo mode the per-scene latents.
Checkpoint pretrain_decoder(const DecoderTrainConfig& config, const TrainingSet* data, const DatasetConfig& synth,
                            const TrainHooks& hooks, TrainReport* report = nullptr,
                            const Checkpoint* resume = nullptr);

/// Encoder training against a frozen decoder. Output kind "model": decoder,
/// encoder, averages, discriminator and optimizer state.
Checkpoint train_encoder(const EncoderTrainConfig& config, const TrainingSet& data, const Checkpoint& decoder,
                         const TrainHooks& hooks, TrainReport* report = nullptr, const Checkpoint* resume = nullptr);

/// Averages as the (gamma, beta) tensor pair, each layers x width.
void store_averages(Checkpoint& ckpt, const StyleAverages<float>& averages);
StyleAverages<float> restore_averages(const Checkpoint& ckpt);

}  // namespace semnerf
