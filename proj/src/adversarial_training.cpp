#include "semnerf/adversarial_training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "semnerf/errors.hpp"
#include "semnerf/log.hpp"

namespace semnerf {

// ---- weights and schedule -------------------------------------------------

void LossWeights::validate() const {
  require(rec >= 0 && perceptual >= 0 && reg >= 0 && gan >= 0 && r1 >= 0, ErrorKind::kConfig,
          "loss weights must be nonnegative");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"rec", w.rec}, {"perceptual", w.perceptual}, {"reg", w.reg}, {"gan", w.gan}, {"r1", w.r1}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  const LossWeights d;
  w.rec = j.value("rec", d.rec);
  w.perceptual = j.value("perceptual", d.perceptual);
  w.reg = j.value("reg", d.reg);
  w.gan = j.value("gan", d.gan);
  w.r1 = j.value("r1", d.r1);
  w.validate();
}

void AnnealSchedule::validate() const {
  require(0.0 < end && end <= start && start <= upper && upper <= 1.0, ErrorKind::kConfig,
          "anneal schedule: need 0 < end <= start <= upper <= 1");
  require(total_steps > 0, ErrorKind::kConfig, "anneal schedule: total_steps must be positive");
  require(shape == "exponential", ErrorKind::kConfig, "anneal schedule: unknown shape '" + shape + "'");
}

double AnnealSchedule::lower_bound(int step) const {
  require(step >= 0, ErrorKind::kInput, "anneal: step must be nonnegative");
  if (step >= total_steps) return end;
  const double t = static_cast<double>(step) / total_steps;
  return std::max(end, start * std::pow(end / start, t));
}

void to_json(nlohmann::json& j, const AnnealSchedule& s) {
  j = {{"start", s.start}, {"end", s.end}, {"upper", s.upper}, {"total_steps", s.total_steps}, {"shape", s.shape}};
}

void from_json(const nlohmann::json& j, AnnealSchedule& s) {
  const AnnealSchedule d;
  s.start = j.value("start", d.start);
  s.end = j.value("end", d.end);
  s.upper = j.value("upper", d.upper);
  s.total_steps = j.value("total_steps", d.total_steps);
  s.shape = j.value("shape", d.shape);
  s.validate();
}

double anneal_alpha(int step, const AnnealSchedule& schedule, Rng& rng) {
  const double lo = schedule.lower_bound(step);
  return lo >= schedule.upper ? schedule.upper : uniform(rng, lo, schedule.upper);
}

// ---- losses ---------------------------------------------------------------

template <typename S>
ad::Var<S> rec_loss(const ad::Var<S>& target, const ad::Var<S>& rendered) {
  require(target.rows() == rendered.rows() && target.cols() == rendered.cols(), ErrorKind::kInput,
          "rec_loss: target is " + std::to_string(target.rows()) + "x" + std::to_string(target.cols()) +
              ", rendered is " + std::to_string(rendered.rows()) + "x" + std::to_string(rendered.cols()));
  return ad::mean(ad::square(ad::sub(target, rendered)));
}

template <typename S>
ad::Var<S> reg_loss(const ad::Var<S>& offsets) {
  return ad::mean(ad::row_norms(offsets));
}

void to_json(nlohmann::json& j, const PerceptualConfig& c) {
  j = {{"channels", c.channels}, {"layers", c.layers}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PerceptualConfig& c) {
  const PerceptualConfig d;
  c.channels = j.value("channels", d.channels);
  c.layers = j.value("layers", d.layers);
  c.seed = j.value("seed", d.seed);
}

namespace {

template <typename S>
ad::Var<S> to_pixels(const ad::Var<S>& images, int height, int width) {
  require(images.cols() == static_cast<ad::Index>(height) * width * 3, ErrorKind::kInput,
          "image batch: expected " + std::to_string(height) + "x" + std::to_string(width) + "x3 values per row");
  // [0,1] -> [-1,1]
  return ad::add_scalar(ad::scale(ad::reshape(images, images.rows() * height * width, 3), S(2)), S(-1));
}

template <typename S>
void freeze(nn::Conv2d<S>& conv) {
  conv.linear.weight = ad::constant<S>(conv.linear.weight.value());
  conv.linear.bias = ad::constant<S>(conv.linear.bias.value());
}

}  // namespace

template <typename S>
PerceptualExtractor<S>::PerceptualExtractor(const PerceptualConfig& config) : config_(config) {
  require(!config_.channels.empty(), ErrorKind::kConfig, "perceptual: need at least one layer");
  for (int l : config_.layers) {
    require(l >= 0 && l < static_cast<int>(config_.channels.size()), ErrorKind::kConfig,
            "perceptual: selected layer out of range");
  }
  Rng rng(derive_seed(config_.seed, 0x70657263, 0));
  int in = 3;
  for (std::size_t i = 0; i < config_.channels.size(); ++i) {
    convs_.emplace_back(in, config_.channels[i], 3, i == 0 ? 1 : 2, 1, rng);
    freeze(convs_.back());
    in = config_.channels[i];
  }
}

template <typename S>
std::vector<ad::Var<S>> PerceptualExtractor<S>::features(const ad::Var<S>& images, int height, int width) const {
  const ad::Index batch = images.rows();
  ad::Var<S> x = to_pixels(images, height, width);
  ad::Index h = height, w = width;
  std::vector<ad::Var<S>> all;
  for (const auto& conv : convs_) {
    const auto g = conv.geometry(batch, h, w);
    x = ad::leaky_relu(conv(x, batch, h, w), S(0.2));
    h = g.out_height();
    w = g.out_width();
    all.push_back(x);
  }
  std::vector<ad::Var<S>> out;
  for (int l : config_.layers) {
    const ad::Var<S>& f = all[l];
    out.push_back(ad::mul_col(f, ad::reciprocal(ad::add_scalar(ad::row_norms(f), S(1e-6)))));
  }
  return out;
}

template <typename S>
ad::Var<S> perceptual_loss(const ad::Var<S>& target, const ad::Var<S>& rendered, int height, int width,
                           const PerceptualExtractor<S>& extractor) {
  require(target.rows() == rendered.rows() && target.cols() == rendered.cols(), ErrorKind::kInput,
          "perceptual_loss: shape mismatch");
  const auto a = extractor.features(target, height, width);
  const auto b = extractor.features(rendered, height, width);
  ad::Var<S> total;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ad::Var<S> term = ad::mean(ad::square(ad::sub(a[i], b[i])));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return ad::scale(total, S(1) / static_cast<S>(a.size()));
}

void to_json(nlohmann::json& j, const DiscriminatorConfig& c) { j = {{"channels", c.channels}, {"seed", c.seed}}; }

void from_json(const nlohmann::json& j, DiscriminatorConfig& c) {
  const DiscriminatorConfig d;
  c.channels = j.value("channels", d.channels);
  c.seed = j.value("seed", d.seed);
}

template <typename S>
PatchDiscriminator<S>::PatchDiscriminator(const DiscriminatorConfig& config) : config_(config) {
  require(!config_.channels.empty(), ErrorKind::kConfig, "discriminator: need at least one layer");
  Rng rng(derive_seed(config_.seed, 0x64697363, 0));
  int in = 3;
  for (std::size_t i = 0; i < config_.channels.size(); ++i) {
    convs_.emplace_back(in, config_.channels[i], 3, i == 0 ? 1 : 2, 1, rng);
    in = config_.channels[i];
  }
  out_ = nn::Conv2d<S>(in, 1, 3, 1, 1, rng);
}

template <typename S>
ad::Var<S> PatchDiscriminator<S>::score_map(const ad::Var<S>& images, int height, int width) const {
  const ad::Index batch = images.rows();
  ad::Var<S> x = to_pixels(images, height, width);
  ad::Index h = height, w = width;
  for (const auto& conv : convs_) {
    const auto g = conv.geometry(batch, h, w);
    x = ad::leaky_relu(conv(x, batch, h, w), S(0.2));
    h = g.out_height();
    w = g.out_width();
  }
  return out_(x, batch, h, w);
}

template <typename S>
ad::Var<S> PatchDiscriminator<S>::operator()(const ad::Var<S>& images, int height, int width) const {
  const ad::Var<S> map = score_map(images, height, width);
  const ad::Index per = map.rows() / images.rows();
  return ad::scale(ad::sum_cols(ad::reshape(map, images.rows(), per)), S(1) / static_cast<S>(per));
}

template <typename S>
std::vector<NamedParameter<S>> PatchDiscriminator<S>::named_parameters() const {
  nn::Params<S> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, "conv" + std::to_string(i));
  out_.collect(out, "out");
  return out;
}

template <typename S>
GanTerms<S> gan_losses(const ad::Var<S>& real, const ad::Var<S>& fake, const Scorer<S>& discriminator,
                       double r1_weight) {
  require(real.cols() == fake.cols(), ErrorKind::kInput, "gan_losses: real and fake images differ in size");
  GanTerms<S> t;
  const ad::Var<S> d_fake = discriminator(fake);
  t.generator = ad::mean(ad::softplus(ad::neg(d_fake)));

  const ad::Var<S> real_leaf = ad::parameter<S>(real.value());
  const ad::Var<S> d_real = discriminator(real_leaf);
  const ad::Var<S> d_fake_detached = discriminator(ad::detach(fake));
  require(d_fake.value().allFinite() && d_real.value().allFinite(), ErrorKind::kNumeric,
          "gan_losses: discriminator produced non-finite scores");
  t.discriminator = ad::add(ad::mean(ad::softplus(d_fake_detached)), ad::mean(ad::softplus(ad::neg(d_real))));

  const ad::Var<S> g = ad::grad(ad::sum(d_real), std::vector<ad::Var<S>>{real_leaf}, true)[0];
  t.r1 = ad::scale(ad::mean(ad::sum_cols(ad::square(g))), static_cast<S>(r1_weight));
  return t;
}

template <typename S>
ad::Var<S> total_loss(const LossParts<S>& p, const LossWeights& w) {
  return ad::add(ad::add(ad::scale(p.rec, static_cast<S>(w.rec)), ad::scale(p.perceptual, static_cast<S>(w.perceptual))),
                 ad::add(ad::scale(p.reg, static_cast<S>(w.reg)), ad::scale(p.gan, static_cast<S>(w.gan))));
}

double total_loss(double rec, double perceptual, double reg, double gan, const LossWeights& w) {
  return w.rec * rec + w.perceptual * perceptual + w.reg * reg + w.gan * gan;
}

// ---- optimizer ------------------------------------------------------------

void to_json(nlohmann::json& j, const AdamConfig& c) {
  j = {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

void from_json(const nlohmann::json& j, AdamConfig& c) {
  const AdamConfig d = c;
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  require(c.lr > 0 && c.beta1 >= 0 && c.beta1 < 1 && c.beta2 >= 0 && c.beta2 < 1 && c.eps > 0, ErrorKind::kConfig,
          "optimizer: invalid hyperparameters");
}

template <typename S>
Adam<S>::Adam(std::vector<NamedParameter<S>> params, const AdamConfig& config)
    : params_(std::move(params)), config_(config) {
  for (const auto& [name, p] : params_) {
    m_.push_back(ad::Matrix<S>::Zero(p.rows(), p.cols()));
    v_.push_back(ad::Matrix<S>::Zero(p.rows(), p.cols()));
  }
}

template <typename S>
void Adam<S>::step(const std::vector<ad::Var<S>>& grads) {
  require(grads.size() == params_.size(), ErrorKind::kConfig, "adam: gradient count mismatch");
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const S c1 = static_cast<S>(1.0 / (1.0 - std::pow(b1, static_cast<double>(t_))));
  const S c2 = static_cast<S>(1.0 / (1.0 - std::pow(b2, static_cast<double>(t_))));
  const S lr = static_cast<S>(config_.lr), eps = static_cast<S>(config_.eps);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Var<S> p = params_[i].second;
    if (!grads[i].defined()) {
      m_[i] *= static_cast<S>(b1);
      v_[i] *= static_cast<S>(b2);
    } else {
      const ad::Matrix<S>& g = grads[i].value();
      m_[i] = static_cast<S>(b1) * m_[i] + static_cast<S>(1 - b1) * g;
      v_[i] = static_cast<S>(b2) * v_[i] + static_cast<S>(1 - b2) * g.cwiseProduct(g);
    }
    p.mutable_value().array() -= lr * (m_[i].array() * c1) / ((v_[i].array() * c2).sqrt() + eps);
  }
}

template <typename S>
void Adam<S>::save(Checkpoint& ckpt, const std::string& prefix) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ckpt.tensors[prefix + "m." + params_[i].first] = Tensor::from<S>(m_[i]);
    ckpt.tensors[prefix + "v." + params_[i].first] = Tensor::from<S>(v_[i]);
  }
  ckpt.tensors[prefix + "t"] = Tensor{1, 1, {static_cast<double>(t_)}};
}

template <typename S>
void Adam<S>::restore(const Checkpoint& ckpt, const std::string& prefix) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (auto* moments : {&m_, &v_}) {
      const std::string name = prefix + (moments == &m_ ? "m." : "v.") + params_[i].first;
      const Tensor& t = ckpt.tensor(name);
      require(t.rows == (*moments)[i].rows() && t.cols == (*moments)[i].cols(), ErrorKind::kData,
              "checkpoint: optimizer state '" + name + "' has the wrong shape");
      (*moments)[i] = t.to<S>();
    }
  }
  t_ = static_cast<std::int64_t>(ckpt.tensor(prefix + "t").data.at(0));
}

double psnr(double mse) { return mse <= 1e-12 ? 120.0 : -10.0 * std::log10(mse); }

// ---- data -----------------------------------------------------------------

TrainingSet TrainingSet::load(const std::filesystem::path& dir, int limit) {
  const Dataset ds(dir);
  TrainingSet t;
  t.labels = ds.labels();
  for (int id : ds.ids()) {
    if (limit > 0 && static_cast<int>(t.ids.size()) >= limit) break;
    Sample s = ds.load(id);
    t.ids.push_back(id);
    t.images.push_back(std::move(s.image));
    t.masks.push_back(std::move(s.mask));
    t.poses.push_back(s.pose);
  }
  require(!t.ids.empty(), ErrorKind::kData, "training set " + dir.string() + " is empty");
  return t;
}

void TrainingSet::prepare_inputs(int resolution, int thickness) {
  inputs.clear();
  for (const auto& m : masks) inputs.push_back(assemble_input(m, static_cast<int>(labels.size()), resolution, thickness));
}

template <typename S>
ad::Var<S> render_regions(const SceneField<S>& field, const ad::Var<S>& styles, std::span<const CameraPose> poses,
                          std::span<const RegionSpec> regions, const RenderOptions& options) {
  require(poses.size() == regions.size() && static_cast<ad::Index>(poses.size()) == styles.rows(),
          ErrorKind::kInput, "render_regions: styles, poses and regions must align");
  std::vector<ad::Var<S>> rows;
  for (std::size_t b = 0; b < poses.size(); ++b) {
    const auto rays = generate_rays(poses[b], regions[b], options.near, options.far);
    const ad::Var<S> style = ad::slice_rows(styles, static_cast<ad::Index>(b), 1);
    const FieldFn<S> fn = [&field, style](const ad::Matrix<S>& p, const ad::Matrix<S>& d) {
      return field.query(p, d, style);
    };
    const ad::Index g = static_cast<ad::Index>(rays.size());
    const auto res = render_rays<S>(fn, rays, options, static_cast<std::uint64_t>(b) * g);
    rows.push_back(ad::reshape(res.rgb, 1, g * 3));
  }
  return rows.size() == 1 ? rows[0] : ad::concat_rows(rows);
}

template <typename S>
ad::Matrix<S> crop_batch(std::span<const Image* const> images, std::span<const RegionSpec> regions) {
  require(images.size() == regions.size() && !images.empty(), ErrorKind::kInput, "crop_batch: size mismatch");
  const ad::Index n = static_cast<ad::Index>(regions[0].grid_h) * regions[0].grid_w * 3;
  ad::Matrix<S> out(static_cast<ad::Index>(images.size()), n);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image crop = bilinear_crop(*images[b], regions[b]);
    require(static_cast<ad::Index>(crop.data.size()) == n, ErrorKind::kInput, "crop_batch: regions differ in size");
    for (ad::Index k = 0; k < n; ++k) out(static_cast<ad::Index>(b), k) = static_cast<S>(crop.data[k]);
  }
  return out;
}

// ---- configs --------------------------------------------------------------

void DecoderTrainConfig::validate() const {
  require(mode == "overfit" || mode == "glo" || mode == "adversarial", ErrorKind::kConfig,
          "decoder training: unknown mode '" + mode + "'");
  require(steps >= 0 && batch > 0 && rays_per_item > 0 && render_steps >= 2 && region > 0, ErrorKind::kConfig,
          "decoder training: invalid sizes");
  require(overfit_views > 0 && image_size >= 4, ErrorKind::kConfig, "decoder training: invalid overfit setup");
  field.validate();
}

void to_json(nlohmann::json& j, const DecoderTrainConfig& c) {
  j = {{"mode", c.mode},
       {"field", c.field},
       {"steps", c.steps},
       {"batch", c.batch},
       {"rays_per_item", c.rays_per_item},
       {"render_steps", c.render_steps},
       {"region", c.region},
       {"optimizer", c.optimizer},
       {"latent_optimizer", c.latent_optimizer},
       {"discriminator_optimizer", c.discriminator_optimizer},
       {"discriminator", c.discriminator},
       {"r1", c.r1},
       {"limit", c.limit},
       {"overfit_views", c.overfit_views},
       {"overfit_scene", c.overfit_scene},
       {"image_size", c.image_size},
       {"target_psnr", c.target_psnr},
       {"eval_every", c.eval_every},
       {"log_every", c.log_every},
       {"checkpoint_every", c.checkpoint_every},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DecoderTrainConfig& c) {
  c = DecoderTrainConfig{};
  c.mode = j.value("mode", c.mode);
  if (j.contains("field")) c.field = j["field"].get<FieldConfig>();
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.rays_per_item = j.value("rays_per_item", c.rays_per_item);
  c.render_steps = j.value("render_steps", c.render_steps);
  c.region = j.value("region", c.region);
  if (j.contains("optimizer")) from_json(j["optimizer"], c.optimizer);
  if (j.contains("latent_optimizer")) from_json(j["latent_optimizer"], c.latent_optimizer);
  if (j.contains("discriminator_optimizer")) from_json(j["discriminator_optimizer"], c.discriminator_optimizer);
  if (j.contains("discriminator")) c.discriminator = j["discriminator"].get<DiscriminatorConfig>();
  c.r1 = j.value("r1", c.r1);
  c.limit = j.value("limit", c.limit);
  c.overfit_views = j.value("overfit_views", c.overfit_views);
  c.overfit_scene = j.value("overfit_scene", c.overfit_scene);
  c.image_size = j.value("image_size", c.image_size);
  c.target_psnr = j.value("target_psnr", c.target_psnr);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.log_every = j.value("log_every", c.log_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

void EncoderTrainConfig::validate() const {
  require(steps >= 0 && batch > 0 && gan_batch >= 0 && gan_batch <= batch && region > 0 && render_steps >= 2,
          ErrorKind::kConfig, "encoder training: invalid sizes");
  require(average_samples >= 1 && hash_check_every > 0, ErrorKind::kConfig, "encoder training: invalid counts");
  weights.validate();
  schedule.validate();
}

void to_json(nlohmann::json& j, const EncoderTrainConfig& c) {
  j = {{"encoder", c.encoder},
       {"weights", c.weights},
       {"schedule", c.schedule},
       {"steps", c.steps},
       {"batch", c.batch},
       {"gan_batch", c.gan_batch},
       {"region", c.region},
       {"render_steps", c.render_steps},
       {"average_samples", c.average_samples},
       {"optimizer", c.optimizer},
       {"discriminator_optimizer", c.discriminator_optimizer},
       {"discriminator", c.discriminator},
       {"perceptual", c.perceptual},
       {"limit", c.limit},
       {"hash_check_every", c.hash_check_every},
       {"log_every", c.log_every},
       {"checkpoint_every", c.checkpoint_every},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, EncoderTrainConfig& c) {
  c = EncoderTrainConfig{};
  if (j.contains("encoder")) c.encoder = j["encoder"].get<EncoderConfig>();
  if (j.contains("weights")) c.weights = j["weights"].get<LossWeights>();
  if (j.contains("schedule")) c.schedule = j["schedule"].get<AnnealSchedule>();
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.gan_batch = j.value("gan_batch", c.gan_batch);
  c.region = j.value("region", c.region);
  c.render_steps = j.value("render_steps", c.render_steps);
  c.average_samples = j.value("average_samples", c.average_samples);
  if (j.contains("optimizer")) from_json(j["optimizer"], c.optimizer);
  if (j.contains("discriminator_optimizer")) from_json(j["discriminator_optimizer"], c.discriminator_optimizer);
  if (j.contains("discriminator")) c.discriminator = j["discriminator"].get<DiscriminatorConfig>();
  if (j.contains("perceptual")) c.perceptual = j["perceptual"].get<PerceptualConfig>();
  c.limit = j.value("limit", c.limit);
  c.hash_check_every = j.value("hash_check_every", c.hash_check_every);
  c.log_every = j.value("log_every", c.log_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

void store_averages(Checkpoint& ckpt, const StyleAverages<float>& a) {
  Tensor g{a.layers(), a.width(), {}}, b{a.layers(), a.width(), {}};
  for (int l = 0; l < a.layers(); ++l) {
    for (int k = 0; k < a.width(); ++k) {
      g.data.push_back(a.gamma(l)[k]);
      b.data.push_back(a.beta(l)[k]);
    }
  }
  ckpt.tensors["averages.gamma"] = std::move(g);
  ckpt.tensors["averages.beta"] = std::move(b);
}

StyleAverages<float> restore_averages(const Checkpoint& ckpt) {
  const Tensor& g = ckpt.tensor("averages.gamma");
  const Tensor& b = ckpt.tensor("averages.beta");
  require(g.rows == b.rows && g.cols == b.cols && g.rows > 0, ErrorKind::kData,
          "checkpoint: averages gamma/beta shapes differ");
  StyleAverages<float> a(static_cast<int>(g.rows), static_cast<int>(g.cols));
  for (int l = 0; l < a.layers(); ++l) {
    for (int k = 0; k < a.width(); ++k) {
      a.gamma(l)[k] = static_cast<float>(g.data[static_cast<std::size_t>(l) * a.width() + k]);
      a.beta(l)[k] = static_cast<float>(b.data[static_cast<std::size_t>(l) * a.width() + k]);
    }
  }
  return a;
}

// ---- training loops -------------------------------------------------------

namespace {

constexpr std::uint64_t kStepStream = 50;
constexpr std::uint64_t kJitterStream = 51;
constexpr std::uint64_t kGanStream = 52;
constexpr std::uint64_t kAverageStream = 40;
constexpr std::uint64_t kLatentStream = 41;
constexpr std::uint64_t kViewStream = 30;

class LossCsv {
 public:
  LossCsv(const std::filesystem::path& path, bool append) {
    if (path.empty()) return;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const bool fresh = !append || !std::filesystem::exists(path);
    out_.open(path, fresh ? std::ios::trunc : std::ios::app);
    require(static_cast<bool>(out_), ErrorKind::kIo, "cannot write " + path.string());
    if (fresh) out_ << "step,total,rec,perceptual,reg,gan,discriminator,r1,alpha,seconds\n";
  }

  void write(const LossRecord& r) {
    if (!out_.is_open()) return;
    out_ << r.step << ',' << std::setprecision(9) << r.total << ',' << r.rec << ',' << r.perceptual << ',' << r.reg
         << ',' << r.gan << ',' << r.discriminator << ',' << r.r1 << ',' << r.alpha << ',' << std::setprecision(4)
         << r.seconds << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

void check_finite(double v, int step, const char* what) {
  require(std::isfinite(v), ErrorKind::kNumeric,
          std::string("training diverged: non-finite ") + what + " at step " + std::to_string(step));
}

RenderOptions training_render(int steps, std::uint64_t seed) {
  RenderOptions o;
  o.steps = steps;
  o.hierarchical = false;
  o.deterministic = false;
  o.seed = seed;
  return o;
}

RenderOptions eval_render(int steps) {
  RenderOptions o;
  o.steps = steps;
  o.deterministic = true;
  return o;
}

double image_mse(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += (a.data[i] - b.data[i]) * static_cast<double>(a.data[i] - b.data[i]);
  return s / static_cast<double>(a.data.size());
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int resume_step(const Checkpoint* resume) { return resume ? resume->meta.value("step", 0) : 0; }

// Rays for a random subset of pixels (with replacement) of one view.
std::vector<Ray> sample_pixel_rays(const std::vector<Ray>& all, int count, Rng& rng, std::vector<int>& picked) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(all.size()) - 1);
  std::vector<Ray> out;
  picked.clear();
  for (int i = 0; i < count; ++i) {
    picked.push_back(pick(rng));
    out.push_back(all[picked.back()]);
  }
  return out;
}

ad::Matrix<float> gather_pixels(const Image& image, const std::vector<int>& picked) {
  ad::Matrix<float> out(static_cast<ad::Index>(picked.size()), 3);
  for (std::size_t i = 0; i < picked.size(); ++i)
    for (int c = 0; c < 3; ++c) out(static_cast<ad::Index>(i), c) = image.data[static_cast<std::size_t>(picked[i]) * 3 + c];
  return out;
}

void project_latent_rows(ad::Matrix<float>& latents, std::span<const int> rows) {
  const float radius = std::sqrt(static_cast<float>(latents.cols()));
  for (int r : rows) {
    const float n = latents.row(r).norm();
    if (n > 0.0f) latents.row(r) *= radius / n;
  }
}

}  // namespace

Checkpoint pretrain_decoder(const DecoderTrainConfig& config, const TrainingSet* data, const DatasetConfig& synth,
                            const TrainHooks& hooks, TrainReport* report, const Checkpoint* resume) {
  config.validate();
  require(config.mode == "overfit" || data != nullptr, ErrorKind::kInput,
          "decoder training: mode '" + config.mode + "' needs a dataset");
  SceneField<float> field(config.field);
  Adam<float> opt(field.named_parameters(), config.optimizer);

  const int n_scenes = data ? static_cast<int>(config.limit > 0 ? std::min<std::size_t>(config.limit, data->size())
                                                                 : data->size())
                            : 0;
  ad::Var<float> latents;
  std::optional<Adam<float>> latent_opt;
  if (config.mode == "glo") {
    Rng rng(derive_seed(config.seed, kLatentStream, 0));
    ad::Matrix<float> z = nn::normal_matrix<float>(rng, n_scenes, config.field.latent_dim, 1.0);
    std::vector<int> all(n_scenes);
    std::iota(all.begin(), all.end(), 0);
    project_latent_rows(z, all);
    latents = ad::parameter<float>(std::move(z));
    latent_opt.emplace(std::vector<NamedParameter<float>>{{"latents", latents}}, config.latent_optimizer);
  }

  std::optional<PatchDiscriminator<float>> disc;
  std::optional<Adam<float>> disc_opt;
  if (config.mode == "adversarial") {
    disc.emplace(config.discriminator);
    disc_opt.emplace(disc->named_parameters(), config.discriminator_optimizer);
  }

  // Overfit mode: views of one synthetic scene, rendered in memory.
  std::vector<Image> views;
  std::vector<CameraPose> view_poses;
  std::vector<double> fixed_z(config.field.latent_dim);
  if (config.mode == "overfit") {
    const SceneParams scene = scene_for(synth, 0, config.overfit_scene);
    Rng vr(derive_seed(synth.seed, kViewStream, static_cast<std::uint64_t>(config.overfit_scene)));
    for (int v = 0; v < config.overfit_views; ++v) {
      view_poses.push_back(synth.poses.sample(vr));
      views.push_back(render_sample(scene, view_poses.back(),
                                    {config.image_size, synth.render.steps, synth.render.fine_steps})
                          .image);
    }
    for (auto& v : fixed_z) v = normal(vr);
  }

  int start = resume_step(resume);
  if (resume) {
    require(resume->kind == "decoder" && resume->meta.value("mode", "") == config.mode, ErrorKind::kData,
            "resume: checkpoint is not a '" + config.mode + "' decoder checkpoint");
    restore_parameters<float>(*resume, "decoder.", field.named_parameters());
    opt.restore(*resume, "opt.");
    if (latent_opt) {
      restore_parameters<float>(*resume, "", {{"latents", latents}});
      latent_opt->restore(*resume, "latent_opt.");
    }
    if (disc) {
      restore_parameters<float>(*resume, "disc.", disc->named_parameters());
      disc_opt->restore(*resume, "disc_opt.");
    }
  }

  auto overfit_psnr = [&]() {
    double total = 0.0;
    const StyleCode<float> style = field.map_latent(fixed_z);
    for (std::size_t v = 0; v < views.size(); ++v) {
      const RenderedImage img =
          render(field, style, view_poses[v], RegionSpec::full(config.image_size, config.image_size), eval_render(config.render_steps));
      total += psnr(image_mse(img.color, views[v]));
    }
    return total / static_cast<double>(views.size());
  };
  auto glo_psnr = [&]() {
    const int n = std::min(n_scenes, 8);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const Image& gt = data->images[i];
      ad::NoGradGuard guard;
      const ad::Var<float> style = field.map_latent_graph(ad::slice_rows(ad::constant<float>(latents.value()), i, 1));
      const RenderedImage img = render_field<float>(bind_style(field, style), data->poses[i],
                                                    RegionSpec::full(gt.height, gt.width), eval_render(config.render_steps));
      total += psnr(image_mse(img.color, gt));
    }
    return total / n;
  };

  LossCsv csv(hooks.loss_csv, resume != nullptr);
  TrainReport local;
  TrainReport& rep = report ? *report : local;
  const auto t0 = std::chrono::steady_clock::now();
  double last_psnr = 0.0;
  int step = start;

  auto make_checkpoint = [&](int at_step) {
    Checkpoint c;
    c.kind = "decoder";
    store_field(c, field);
    c.config["train"] = config;
    opt.save(c, "opt.");
    if (latent_opt) {
      store_parameters<float>(c, "", {{"latents", latents}});
      latent_opt->save(c, "latent_opt.");
    }
    if (disc) {
      store_parameters<float>(c, "disc.", disc->named_parameters());
      disc_opt->save(c, "disc_opt.");
    }
    c.meta = {{"step", at_step},
              {"mode", config.mode},
              {"psnr", last_psnr},
              {"decoder_hash", parameter_hash(field.named_parameters())}};
    return c;
  };

  for (; step < config.steps; ++step) {
    Rng rng(derive_seed(config.seed, kStepStream, static_cast<std::uint64_t>(step)));
    LossRecord rec;
    rec.step = step;
    const RenderOptions ropt = training_render(config.render_steps, derive_seed(config.seed, kJitterStream, step));

    if (config.mode == "overfit") {
      std::vector<int> picked;
      std::vector<Ray> rays;
      std::uniform_int_distribution<int> pick_view(0, static_cast<int>(views.size()) - 1);
      ad::Matrix<float> target(config.batch * config.rays_per_item, 3);
      for (int b = 0; b < config.batch; ++b) {
        const int v = pick_view(rng);
        const auto all = generate_rays(view_poses[v], RegionSpec::full(config.image_size, config.image_size), 0.8, 1.2);
        const auto some = sample_pixel_rays(all, config.rays_per_item, rng, picked);
        rays.insert(rays.end(), some.begin(), some.end());
        target.middleRows(b * config.rays_per_item, config.rays_per_item) = gather_pixels(views[v], picked);
      }
      ad::Matrix<float> zm(1, config.field.latent_dim);
      for (int k = 0; k < config.field.latent_dim; ++k) zm(0, k) = static_cast<float>(fixed_z[k]);
      const ad::Var<float> style = field.map_latent_graph(ad::constant<float>(zm));
      const auto res = render_rays<float>(bind_style(field, style), rays, ropt);
      const ad::Var<float> loss = rec_loss(ad::constant<float>(target), res.rgb);
      rec.rec = rec.total = loss.item();
      check_finite(rec.total, step, "loss");
      opt.step(ad::grad(loss, opt.vars()));
    } else if (config.mode == "glo") {
      std::uniform_int_distribution<int> pick(0, n_scenes - 1);
      std::vector<int> idx;
      std::vector<ad::Var<float>> losses;
      for (int b = 0; b < config.batch; ++b) idx.push_back(pick(rng));
      for (int b = 0; b < config.batch; ++b) {
        const Image& img = data->images[idx[b]];
        const auto all = generate_rays(data->poses[idx[b]], RegionSpec::full(img.height, img.width), 0.8, 1.2);
        std::vector<int> picked;
        const auto some = sample_pixel_rays(all, config.rays_per_item, rng, picked);
        const ad::Var<float> style = field.map_latent_graph(ad::slice_rows(latents, idx[b], 1));
        const auto res = render_rays<float>(bind_style(field, style), some, ropt,
                                            static_cast<std::uint64_t>(b) * config.rays_per_item);
        losses.push_back(rec_loss(ad::constant<float>(gather_pixels(img, picked)), res.rgb));
      }
      ad::Var<float> loss = losses[0];
      for (std::size_t b = 1; b < losses.size(); ++b) loss = ad::add(loss, losses[b]);
      loss = ad::scale(loss, 1.0f / static_cast<float>(losses.size()));
      rec.rec = rec.total = loss.item();
      check_finite(rec.total, step, "loss");
      std::vector<ad::Var<float>> wrt = opt.vars();
      wrt.push_back(latents);
      auto grads = ad::grad(loss, wrt);
      const ad::Var<float> latent_grad = grads.back();
      grads.pop_back();
      opt.step(grads);
      latent_opt->step({latent_grad});
      project_latent_rows(latents.mutable_value(), idx);
    } else {
      const int g = config.region;
      ad::Matrix<float> z = nn::normal_matrix<float>(rng, config.batch, config.field.latent_dim, 1.0);
      const ad::Var<float> styles = field.map_latent_graph(ad::constant<float>(std::move(z)));
      std::vector<CameraPose> poses;
      std::vector<RegionSpec> regions;
      std::vector<const Image*> reals;
      std::uniform_int_distribution<int> pick(0, n_scenes - 1);
      const int h = data->images[0].height, w = data->images[0].width;
      for (int b = 0; b < config.batch; ++b) {
        poses.push_back(synth.poses.sample(rng));
        regions.push_back(sample_region(uniform(rng, 0.5, 1.0), rng, h, w, g, g));
        reals.push_back(&data->images[pick(rng)]);
      }
      const ad::Var<float> fake = render_regions(field, styles, poses, regions, ropt);
      const ad::Matrix<float> real = crop_batch<float>(reals, regions);
      const Scorer<float> scorer = [&](const ad::Var<float>& x) { return (*disc)(x, g, g); };
      const GanTerms<float> t = gan_losses<float>(ad::constant<float>(real), fake, scorer, config.r1);
      rec.gan = t.generator.item();
      rec.discriminator = t.discriminator.item();
      rec.r1 = t.r1.item();
      rec.total = rec.gan;
      check_finite(rec.gan + rec.discriminator + rec.r1, step, "GAN loss");
      const auto g_grads = ad::grad(t.generator, opt.vars());
      const auto d_grads = ad::grad(ad::add(t.discriminator, t.r1), disc_opt->vars());
      opt.step(g_grads);
      disc_opt->step(d_grads);
    }

    rec.seconds = elapsed(t0);
    rep.history.push_back(rec);
    csv.write(rec);
    if (hooks.on_step) hooks.on_step(rec);
    if (config.log_every > 0 && step % config.log_every == 0) {
      log::info("decoder step " + std::to_string(step) + " loss " + std::to_string(rec.total));
    }
    const bool eval_now = config.mode != "adversarial" && config.eval_every > 0 && (step + 1) % config.eval_every == 0;
    if (eval_now) {
      last_psnr = config.mode == "overfit" ? overfit_psnr() : glo_psnr();
      log::info("decoder step " + std::to_string(step + 1) + " psnr " + std::to_string(last_psnr));
      if (config.target_psnr > 0.0 && last_psnr >= config.target_psnr) {
        ++step;
        break;
      }
    }
    if (config.checkpoint_every > 0 && !hooks.checkpoint_out.empty() && (step + 1) % config.checkpoint_every == 0) {
      save_checkpoint(hooks.checkpoint_out, make_checkpoint(step + 1));
    }
  }

  if (config.mode == "overfit") last_psnr = overfit_psnr();
  else if (config.mode == "glo") last_psnr = glo_psnr();
  rep.final_psnr = last_psnr;
  rep.steps_run = step;
  rep.decoder_hash = parameter_hash(field.named_parameters());
  Checkpoint out = make_checkpoint(step);
  if (!hooks.checkpoint_out.empty()) save_checkpoint(hooks.checkpoint_out, out);
  return out;
}

Checkpoint train_encoder(const EncoderTrainConfig& config, const TrainingSet& data, const Checkpoint& decoder,
                         const TrainHooks& hooks, TrainReport* report, const Checkpoint* resume) {
  config.validate();
  const SceneField<float> field = restore_field<float>(decoder).frozen();
  const std::string decoder_hash = parameter_hash(field.named_parameters());

  EncoderConfig ec = config.encoder;
  ec.style_layers = field.config().layers;
  ec.style_width = field.config().width;
  ec.channels = static_cast<int>(data.labels.size()) + 2;
  require_compatible(ec, field.config());
  require(!data.inputs.empty() && data.inputs[0].height == ec.resolution, ErrorKind::kConfig,
          "encoder training: inputs were not prepared at resolution " + std::to_string(ec.resolution));
  const InversionEncoder<float> encoder(ec);
  const PatchDiscriminator<float> disc(config.discriminator);
  const PerceptualExtractor<float> extractor(config.perceptual);
  Adam<float> opt(encoder.named_parameters(), config.optimizer);
  Adam<float> disc_opt(disc.named_parameters(), config.discriminator_optimizer);

  StyleAverages<float> averages;
  int start = resume_step(resume);
  if (resume) {
    require(resume->kind == "model", ErrorKind::kData, "resume: expected an encoder training checkpoint");
    require(resume->meta.value("decoder_hash", "") == decoder_hash, ErrorKind::kData,
            "resume: checkpoint was trained against a different decoder");
    restore_parameters<float>(*resume, "encoder.", encoder.named_parameters());
    restore_parameters<float>(*resume, "disc.", disc.named_parameters());
    opt.restore(*resume, "opt.");
    disc_opt.restore(*resume, "disc_opt.");
    averages = restore_averages(*resume);
  } else {
    Rng arng(derive_seed(config.seed, kAverageStream, 0));
    averages = compute_style_averages(field, config.average_samples, arng);
  }
  const ad::Var<float> avg_row = ad::constant<float>(ad::Matrix<float>(averages.flat()));

  const int n = static_cast<int>(config.limit > 0 ? std::min<std::size_t>(config.limit, data.size()) : data.size());
  const int h = data.images[0].height, w = data.images[0].width, g = config.region;
  const PosePrior prior;
  LossCsv csv(hooks.loss_csv, resume != nullptr);
  TrainReport local;
  TrainReport& rep = report ? *report : local;
  const auto t0 = std::chrono::steady_clock::now();

  auto check_hash = [&](int at) {
    const std::string now = parameter_hash(field.named_parameters());
    require(now == decoder_hash, ErrorKind::kInvariant,
            "frozen decoder was modified during encoder training (step " + std::to_string(at) + ")");
  };

  auto make_checkpoint = [&](int at_step) {
    Checkpoint c;
    c.kind = "model";
    store_field(c, field);
    c.config["encoder"] = ec;
    c.config["train"] = config;
    c.config["labels"] = data.labels.names;
    store_parameters<float>(c, "encoder.", encoder.named_parameters());
    store_parameters<float>(c, "disc.", disc.named_parameters());
    store_averages(c, averages);
    opt.save(c, "opt.");
    disc_opt.save(c, "disc_opt.");
    c.meta = {{"step", at_step}, {"decoder_hash", decoder_hash}, {"decoder_meta", decoder.meta}};
    return c;
  };

  int step = start;
  for (; step < config.steps; ++step) {
    Rng rng(derive_seed(config.seed, kStepStream, static_cast<std::uint64_t>(step)));
    std::uniform_int_distribution<int> pick(0, n - 1);
    std::vector<int> idx;
    for (int b = 0; b < config.batch; ++b) idx.push_back(pick(rng));

    std::vector<EncoderInput> inputs;
    std::vector<CameraPose> poses;
    std::vector<const Image*> images;
    for (int i : idx) {
      inputs.push_back(data.inputs[i]);
      poses.push_back(data.poses[i]);
      images.push_back(&data.images[i]);
    }
    const ad::Var<float> offsets = encoder.forward(ad::constant<float>(stack_inputs<float>(inputs)));
    const ad::Var<float> styles = ad::add_row(offsets, avg_row);

    const double alpha = anneal_alpha(step, config.schedule, rng);
    std::vector<RegionSpec> regions;
    for (int b = 0; b < config.batch; ++b) regions.push_back(sample_region(alpha, rng, h, w, g, g));
    const RenderOptions ropt = training_render(config.render_steps, derive_seed(config.seed, kJitterStream, step));
    const ad::Var<float> rendered = render_regions(field, styles, poses, regions, ropt);
    // Ground truth and render share the exact same RegionSpec per item.
    const ad::Var<float> target = ad::constant<float>(crop_batch<float>(images, regions));

    LossParts<float> parts;
    parts.rec = rec_loss(target, rendered);
    parts.perceptual = perceptual_loss(target, rendered, g, g, extractor);
    parts.reg = reg_loss(offsets);

    LossRecord rec;
    rec.step = step;
    rec.alpha = alpha;
    std::optional<GanTerms<float>> gan;
    if (config.gan_batch > 0 && config.weights.gan > 0.0) {
      std::vector<CameraPose> fake_poses;
      std::vector<RegionSpec> gan_regions;
      std::vector<const Image*> reals;
      for (int b = 0; b < config.gan_batch; ++b) {
        fake_poses.push_back(prior.sample(rng));
        gan_regions.push_back(sample_region(alpha, rng, h, w, g, g));
        reals.push_back(&data.images[pick(rng)]);
      }
      const RenderOptions gopt = training_render(config.render_steps, derive_seed(config.seed, kGanStream, step));
      const ad::Var<float> fake =
          render_regions(field, ad::slice_rows(styles, 0, config.gan_batch), fake_poses, gan_regions, gopt);
      const Scorer<float> scorer = [&](const ad::Var<float>& x) { return disc(x, g, g); };
      gan = gan_losses<float>(ad::constant<float>(crop_batch<float>(reals, gan_regions)), fake, scorer,
                              config.weights.r1);
      parts.gan = gan->generator;
      rec.gan = gan->generator.item();
      rec.discriminator = gan->discriminator.item();
      rec.r1 = gan->r1.item();
    } else {
      parts.gan = ad::scalar<float>(0.0f);
    }
    const ad::Var<float> total = total_loss(parts, config.weights);
    rec.total = total.item();
    rec.rec = parts.rec.item();
    rec.perceptual = parts.perceptual.item();
    rec.reg = parts.reg.item();
    check_finite(rec.total, step, "total loss");

    opt.step(ad::grad(total, opt.vars()));
    if (gan) disc_opt.step(ad::grad(ad::add(gan->discriminator, gan->r1), disc_opt.vars()));

    rec.seconds = elapsed(t0);
    rep.history.push_back(rec);
    csv.write(rec);
    if (hooks.on_step) hooks.on_step(rec);
    if (config.log_every > 0 && step % config.log_every == 0) {
      std::ostringstream msg;
      msg << "encoder step " << step << " total " << rec.total << " rec " << rec.rec << " perc " << rec.perceptual
          << " reg " << rec.reg << " gan " << rec.gan << " alpha " << alpha;
      log::info(msg.str());
    }
    if ((step + 1) % config.hash_check_every == 0) check_hash(step + 1);
    if (config.checkpoint_every > 0 && !hooks.checkpoint_out.empty() && (step + 1) % config.checkpoint_every == 0) {
      save_checkpoint(hooks.checkpoint_out, make_checkpoint(step + 1));
    }
  }
  check_hash(step);
  rep.steps_run = step;
  rep.decoder_hash = decoder_hash;
  Checkpoint out = make_checkpoint(step);
  if (!hooks.checkpoint_out.empty()) save_checkpoint(hooks.checkpoint_out, out);
  return out;
}

#define SEMNERF_INSTANTIATE_TRAIN(S)                                                                          \
  template ad::Var<S> rec_loss<S>(const ad::Var<S>&, const ad::Var<S>&);                                     \
  template ad::Var<S> reg_loss<S>(const ad::Var<S>&);                                                        \
  template class PerceptualExtractor<S>;                                                                     \
  template ad::Var<S> perceptual_loss<S>(const ad::Var<S>&, const ad::Var<S>&, int, int,                     \
                                         const PerceptualExtractor<S>&);                                     \
  template class PatchDiscriminator<S>;                                                                      \
  template GanTerms<S> gan_losses<S>(const ad::Var<S>&, const ad::Var<S>&, const Scorer<S>&, double);        \
  template ad::Var<S> total_loss<S>(const LossParts<S>&, const LossWeights&);                                \
  template class Adam<S>;                                                                                    \
  template ad::Var<S> render_regions<S>(const SceneField<S>&, const ad::Var<S>&, std::span<const CameraPose>, \
                                        std::span<const RegionSpec>, const RenderOptions&);                  \
  template ad::Matrix<S> crop_batch<S>(std::span<const Image* const>, std::span<const RegionSpec>);

SEMNERF_INSTANTIATE_TRAIN(float)
SEMNERF_INSTANTIATE_TRAIN(double)

}  // namespace semnerf
