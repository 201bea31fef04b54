#include "semnerf/scene_field.hpp"

#include <cmath>

#include "semnerf/errors.hpp"

namespace semnerf {

void FieldConfig::validate() const {
  require(layers >= 2, ErrorKind::kConfig, "field config: layers must be >= 2");
  require(width >= 8, ErrorKind::kConfig, "field config: width must be >= 8");
  require(latent_dim >= 1, ErrorKind::kConfig, "field config: latent_dim must be >= 1");
  require(mapping_width >= 1 && mapping_layers >= 1, ErrorKind::kConfig,
          "field config: mapping network needs at least one hidden layer");
  require(base_frequency > 0 && position_scale > 0 && density_scale > 0, ErrorKind::kConfig,
          "field config: frequencies and scales must be positive");
}

void to_json(nlohmann::json& j, const FieldConfig& c) {
  j = nlohmann::json{{"layers", c.layers},
                     {"width", c.width},
                     {"latent_dim", c.latent_dim},
                     {"mapping_width", c.mapping_width},
                     {"mapping_layers", c.mapping_layers},
                     {"base_frequency", c.base_frequency},
                     {"position_scale", c.position_scale},
                     {"density_scale", c.density_scale},
                     {"density_shift", c.density_shift},
                     {"gamma_spread", c.gamma_spread},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, FieldConfig& c) {
  FieldConfig d;
  c.layers = j.value("layers", d.layers);
  c.width = j.value("width", d.width);
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.mapping_width = j.value("mapping_width", d.mapping_width);
  c.mapping_layers = j.value("mapping_layers", d.mapping_layers);
  c.base_frequency = j.value("base_frequency", d.base_frequency);
  c.position_scale = j.value("position_scale", d.position_scale);
  c.density_scale = j.value("density_scale", d.density_scale);
  c.density_shift = j.value("density_shift", d.density_shift);
  c.gamma_spread = j.value("gamma_spread", d.gamma_spread);
  c.seed = j.value("seed", d.seed);
}

namespace {

template <typename S>
ad::Matrix<S> uniform_matrix(Rng& rng, ad::Index rows, ad::Index cols, double bound) {
  ad::Matrix<S> m(rows, cols);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
  return m;
}

}  // namespace

template <typename S>
SceneField<S>::SceneField(const FieldConfig& config) : config_(config) {
  config_.validate();
  Rng rng(mix_seed(config_.seed));
  const int w = config_.width;
  const double omega = config_.base_frequency;

  auto default_bias = [&](int fan_in, int out) {
    return ad::parameter<S>(uniform_matrix<S>(rng, 1, out, 1.0 / std::sqrt(double(fan_in))));
  };

  // Mapping network: leaky-ReLU MLP, final layer scaled down.
  int fan_in = config_.latent_dim;
  for (int i = 0; i < config_.mapping_layers; ++i) {
    const double bound = std::sqrt(6.0 / (1.04 * fan_in));
    mapping_.push_back({ad::parameter<S>(uniform_matrix<S>(rng, fan_in, config_.mapping_width, bound)),
                        default_bias(fan_in, config_.mapping_width)});
    fan_in = config_.mapping_width;
  }
  {
    const double bound = 0.25 * std::sqrt(6.0 / (1.04 * fan_in));
    mapping_.push_back({ad::parameter<S>(uniform_matrix<S>(rng, fan_in, config_.style_size(), bound)),
                        default_bias(fan_in, config_.style_size())});
  }

  // Sinusoidal layers. The base frequency multiplies pre-activations, so
  // weights carry the 1/omega factor for hidden layers.
  trunk_.push_back({ad::parameter<S>(uniform_matrix<S>(rng, 3, w, 1.0 / 3.0)), default_bias(3, w)});
  for (int l = 1; l < config_.layers - 1; ++l) {
    trunk_.push_back({ad::parameter<S>(uniform_matrix<S>(rng, w, w, std::sqrt(6.0 / w) / omega)),
                      default_bias(w, w)});
  }
  density_head_ = {ad::parameter<S>(uniform_matrix<S>(rng, w, 1, 1.0 / std::sqrt(double(w)))),
                   default_bias(w, 1)};
  color_film_ = {ad::parameter<S>(uniform_matrix<S>(rng, w + 3, w, std::sqrt(6.0 / (w + 3)) / omega)),
                 default_bias(w + 3, w)};
  color_head_ = {ad::parameter<S>(uniform_matrix<S>(rng, w, 3, 1.0 / std::sqrt(double(w)))),
                 default_bias(w, 3)};

  style_scale_.resize(1, config_.style_size());
  style_offset_.resize(1, config_.style_size());
  for (int l = 0; l < config_.layers; ++l) {
    style_scale_.block(0, 2 * l * w, 1, w).setConstant(static_cast<S>(config_.gamma_spread));
    style_offset_.block(0, 2 * l * w, 1, w).setConstant(S(1));
    style_scale_.block(0, (2 * l + 1) * w, 1, w).setConstant(S(1));
    style_offset_.block(0, (2 * l + 1) * w, 1, w).setConstant(S(0));
  }
}

template <typename S>
ad::Var<S> SceneField<S>::map_latent_graph(const ad::Var<S>& z) const {
  require(z.cols() == config_.latent_dim, ErrorKind::kInput,
          "map_latent: expected latent dimension " + std::to_string(config_.latent_dim) + ", got " +
              std::to_string(z.cols()));
  ad::Var<S> h = z;
  for (std::size_t i = 0; i + 1 < mapping_.size(); ++i) {
    h = ad::leaky_relu(ad::add_row(ad::matmul(h, mapping_[i].weight), mapping_[i].bias), S(0.2));
  }
  ad::Var<S> raw = ad::add_row(ad::matmul(h, mapping_.back().weight), mapping_.back().bias);
  return ad::add_row(ad::mul_row(raw, ad::constant<S>(style_scale_)), ad::constant<S>(style_offset_));
}

template <typename S>
StyleCode<S> SceneField<S>::map_latent(std::span<const double> z) const {
  require(static_cast<int>(z.size()) == config_.latent_dim, ErrorKind::kInput,
          "map_latent: expected latent dimension " + std::to_string(config_.latent_dim) + ", got " +
              std::to_string(z.size()));
  ad::NoGradGuard guard;
  ad::Matrix<S> zm(1, config_.latent_dim);
  for (int i = 0; i < config_.latent_dim; ++i) zm(0, i) = static_cast<S>(z[i]);
  ad::Var<S> out = map_latent_graph(ad::constant<S>(std::move(zm)));
  return StyleCode<S>(config_.layers, config_.width, out.value().row(0));
}

template <typename S>
void SceneField<S>::check_style(const ad::Var<S>& style) const {
  require(style.rows() == 1 && style.cols() == config_.style_size(), ErrorKind::kConfig,
          "query_field: style code has " + std::to_string(style.cols()) + " entries, field expects " +
              std::to_string(config_.style_size()));
}

template <typename S>
FieldOutput<S> SceneField<S>::query(const ad::Matrix<S>& positions, const ad::Matrix<S>& directions,
                                    const ad::Var<S>& style) const {
  check_style(style);
  require(positions.cols() == 3 && directions.cols() == 3 && positions.rows() == directions.rows(),
          ErrorKind::kInput, "query_field: positions and directions must be N x 3");
  const int w = config_.width;
  const S omega = static_cast<S>(config_.base_frequency);

  auto film = [&](const ad::Var<S>& input, const Linear& layer, int index) {
    ad::Var<S> pre = ad::add_row(ad::matmul(input, layer.weight), layer.bias);
    ad::Var<S> gamma = ad::scale(ad::slice_cols(style, 2 * index * w, w), omega);
    ad::Var<S> beta = ad::slice_cols(style, (2 * index + 1) * w, w);
    return ad::sin(ad::add_row(ad::mul_row(pre, gamma), beta));
  };

  ad::Var<S> h = ad::constant<S>(positions * static_cast<S>(config_.position_scale));
  for (std::size_t l = 0; l < trunk_.size(); ++l) h = film(h, trunk_[l], static_cast<int>(l));

  ad::Var<S> raw_density = ad::add_row(ad::matmul(h, density_head_.weight), density_head_.bias);
  ad::Var<S> density = ad::scale(ad::softplus(ad::add_scalar(raw_density, static_cast<S>(config_.density_shift))),
                                 static_cast<S>(config_.density_scale));

  std::vector<ad::Var<S>> parts{h, ad::constant<S>(directions)};
  ad::Var<S> color_hidden = film(ad::concat_cols(parts), color_film_, config_.layers - 1);
  ad::Var<S> color = ad::sigmoid(ad::add_row(ad::matmul(color_hidden, color_head_.weight), color_head_.bias));
  return {density, color};
}

template <typename S>
std::vector<RadianceSample> SceneField<S>::query_field(std::span<const FieldQuery> queries,
                                                       const StyleCode<S>& style) const {
  require(style.same_shape(config_.layers, config_.width), ErrorKind::kConfig,
          "query_field: style layer structure does not match the field configuration");
  ad::Matrix<S> pos(queries.size(), 3), dir(queries.size(), 3);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& q = queries[i];
    require(q.position.allFinite() && q.direction.allFinite(), ErrorKind::kInput,
            "query_field: non-finite query at index " + std::to_string(i));
    require(std::abs(q.direction.norm() - 1.0) <= 1e-6, ErrorKind::kInput,
            "query_field: direction at index " + std::to_string(i) + " is not unit length");
    pos.row(i) = q.position.cast<S>().transpose();
    dir.row(i) = q.direction.cast<S>().transpose();
  }
  ad::NoGradGuard guard;
  FieldOutput<S> out = query(pos, dir, style.as_constant());
  std::vector<RadianceSample> samples(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    samples[i].density = static_cast<double>(out.density.value()(i, 0));
    samples[i].color = out.color.value().row(i).transpose().template cast<double>();
  }
  return samples;
}

template <typename S>
std::int64_t SceneField<S>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.size();
  return n;
}

template <typename S>
std::vector<NamedParameter<S>> SceneField<S>::named_parameters() const {
  std::vector<NamedParameter<S>> out;
  for (std::size_t i = 0; i < mapping_.size(); ++i) {
    out.emplace_back("mapping." + std::to_string(i) + ".weight", mapping_[i].weight);
    out.emplace_back("mapping." + std::to_string(i) + ".bias", mapping_[i].bias);
  }
  for (std::size_t i = 0; i < trunk_.size(); ++i) {
    out.emplace_back("film." + std::to_string(i) + ".weight", trunk_[i].weight);
    out.emplace_back("film." + std::to_string(i) + ".bias", trunk_[i].bias);
  }
  out.emplace_back("density.weight", density_head_.weight);
  out.emplace_back("density.bias", density_head_.bias);
  out.emplace_back("color_film.weight", color_film_.weight);
  out.emplace_back("color_film.bias", color_film_.bias);
  out.emplace_back("color.weight", color_head_.weight);
  out.emplace_back("color.bias", color_head_.bias);
  return out;
}

template <typename S>
std::vector<ad::Var<S>> SceneField<S>::mapping_parameters() const {
  std::vector<ad::Var<S>> out;
  for (const auto& l : mapping_) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

template <typename S>
std::vector<ad::Var<S>> SceneField<S>::field_parameters() const {
  std::vector<ad::Var<S>> out;
  for (const auto& l : trunk_) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  for (const Linear* l : {&density_head_, &color_film_, &color_head_}) {
    out.push_back(l->weight);
    out.push_back(l->bias);
  }
  return out;
}

template <typename S>
std::vector<ad::Var<S>> SceneField<S>::parameters() const {
  std::vector<ad::Var<S>> out = mapping_parameters();
  for (auto& p : field_parameters()) out.push_back(p);
  return out;
}

template <typename S>
SceneField<S> SceneField<S>::frozen() const {
  SceneField<S> copy = *this;
  auto freeze = [](Linear& l) {
    l.weight = ad::constant<S>(l.weight.value());
    l.bias = ad::constant<S>(l.bias.value());
  };
  for (auto& l : copy.mapping_) freeze(l);
  for (auto& l : copy.trunk_) freeze(l);
  freeze(copy.density_head_);
  freeze(copy.color_film_);
  freeze(copy.color_head_);
  return copy;
}

template <typename S>
void SceneField<S>::set_parameter(const std::string& name, const ad::Matrix<S>& value) {
  for (auto& [n, var] : named_parameters()) {
    if (n != name) continue;
    require(var.rows() == value.rows() && var.cols() == value.cols(), ErrorKind::kConfig,
            "scene field: parameter '" + name + "' has a different shape");
    var.mutable_value() = value;
    return;
  }
  fail(ErrorKind::kConfig, "scene field: unknown parameter '" + name + "'");
}

template class SceneField<float>;
template class SceneField<double>;

}  // namespace semnerf
