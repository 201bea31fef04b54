#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "semnerf/autodiff.hpp"
#include "semnerf/random.hpp"
#include "semnerf/style_code.hpp"

namespace semnerf {

/// Architecture of the FiLM-conditioned sinusoidal field and its mapping
/// network. `layers` counts FiLM layers: layers-1 trunk layers feed the
/// density head, and the last FiLM layer conditions the color head.
struct FieldConfig {
  int layers = 5;
  int width = 64;
  int latent_dim = 64;
  int mapping_width = 64;
  int mapping_layers = 3;
  double base_frequency = 30.0;
  double position_scale = 4.0;
  double density_scale = 20.0;
  double density_shift = -1.0;
  double gamma_spread = 0.5;  // gamma = 1 + gamma_spread * raw mapping output
  std::uint64_t seed = 0;

  void validate() const;
  int style_size() const { return 2 * layers * width; }
};

void to_json(nlohmann::json& j, const FieldConfig& c);
void from_json(const nlohmann::json& j, FieldConfig& c);

struct FieldQuery {
  Eigen::Vector3d position;
  Eigen::Vector3d direction;
};

struct RadianceSample {
  double density = 0.0;
  Eigen::Vector3d color = Eigen::Vector3d::Zero();
};

template <typename S>
struct FieldOutput {
  ad::Var<S> density;  // N x 1
  ad::Var<S> color;    // N x 3
};

template <typename S>
using NamedParameter = std::pair<std::string, ad::Var<S>>;

/// The generator: latent mapping network plus sinusoidal radiance field.
/// Weights are plain autodiff parameters; evaluation is reentrant as long as
/// nobody mutates them.
template <typename S>
class SceneField {
 public:
  explicit SceneField(const FieldConfig& config);

  const FieldConfig& config() const { return config_; }

  /// z (1 x latent_dim) -> StyleCode. No gradient is recorded.
  StyleCode<S> map_latent(std::span<const double> z) const;
  /// Differentiable mapping of a batch of latents (B x latent_dim -> B x style_size).
  ad::Var<S> map_latent_graph(const ad::Var<S>& z) const;

  /// Differentiable field evaluation. `style` is 1 x style_size.
  FieldOutput<S> query(const ad::Matrix<S>& positions, const ad::Matrix<S>& directions,
                       const ad::Var<S>& style) const;

  /// Validated, non-differentiable evaluation.
  std::vector<RadianceSample> query_field(std::span<const FieldQuery> queries,
                                          const StyleCode<S>& style) const;

  std::int64_t parameter_count() const;

  std::vector<NamedParameter<S>> named_parameters() const;
  std::vector<ad::Var<S>> mapping_parameters() const;
  std::vector<ad::Var<S>> field_parameters() const;
  std::vector<ad::Var<S>> parameters() const;

  /// Overwrites a parameter by name; shape must match.
  void set_parameter(const std::string& name, const ad::Matrix<S>& value);

  /// Deep copy whose weights are constants: gradients still flow to inputs
  /// and style, never to the weights.
  SceneField frozen() const;

 private:
  struct Linear {
    ad::Var<S> weight;  // in x out
    ad::Var<S> bias;    // 1 x out
  };

  void check_style(const ad::Var<S>& style) const;

  FieldConfig config_;
  std::vector<Linear> mapping_;
  std::vector<Linear> trunk_;  // layers-1 FiLM layers
  Linear density_head_;
  Linear color_film_;
  Linear color_head_;
  ad::Matrix<S> style_scale_;   // 1 x style_size
  ad::Matrix<S> style_offset_;  // 1 x style_size
};

extern template class SceneField<float>;
extern template class SceneField<double>;

}  // namespace semnerf
