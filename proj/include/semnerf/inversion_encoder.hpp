#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include <nlohmann/json.hpp>

#include "semnerf/mask_pipeline.hpp"
#include "semnerf/nn.hpp"
#include "semnerf/scene_field.hpp"
#include "semnerf/style_code.hpp"

namespace semnerf {

struct EncoderConfig {
  int resolution = 32;
  int channels = 8;  // labels + contour + distance
  int patch = 8;
  int dim = 48;
  int blocks = 2;
  int heads = 2;
  int mlp_ratio = 2;
  int style_layers = 0;
  int style_width = 0;
  int contour_thickness = 3;
  bool zero_init_head = true;
  std::uint64_t seed = 0;

  void validate() const;
  int output_size() const { return 2 * style_layers * style_width; }
  int tokens() const { return (resolution / patch) * (resolution / patch); }

  /// Defaults sized for `field` and a label table of `n_labels`.
  static EncoderConfig for_field(const FieldConfig& field, int n_labels);
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

/// Fails with a config error unless the encoder emits exactly one offset per
/// style entry of `field`.
void require_compatible(const EncoderConfig& encoder, const FieldConfig& field);

/// Patch-embedding transformer: patchify, embed, N pre-norm attention
/// blocks, mean-pool, linear head to the flat style layout.
template <typename S>
class InversionEncoder {
 public:
  explicit InversionEncoder(const EncoderConfig& config);

  const EncoderConfig& config() const { return config_; }

  /// inputs: B x (resolution*resolution*channels), channels-last rows.
  ad::Var<S> forward(const ad::Var<S>& inputs) const;

  LatentOffset<S> encode(const EncoderInput& input) const;

  std::vector<NamedParameter<S>> named_parameters() const;
  std::vector<ad::Var<S>> parameters() const { return nn::vars(named_parameters()); }
  std::int64_t parameter_count() const { return nn::count(named_parameters()); }
  void set_parameter(const std::string& name, const ad::Matrix<S>& value) {
    nn::set_by_name(named_parameters(), name, value);
  }

 private:
  struct Block {
    nn::LayerNorm<S> norm1;
    nn::Linear<S> qkv;
    nn::Linear<S> proj;
    nn::LayerNorm<S> norm2;
    nn::Linear<S> fc1;
    nn::Linear<S> fc2;
  };

  ad::Var<S> attention(const Block& block, const ad::Var<S>& x, ad::Index batch) const;

  EncoderConfig config_;
  nn::Linear<S> embed_;
  ad::Var<S> position_;  // tokens x dim
  std::vector<Block> blocks_;
  nn::LayerNorm<S> final_norm_;
  nn::Linear<S> head_;
};

extern template class InversionEncoder<float>;
extern template class InversionEncoder<double>;

/// Row-stacks encoder inputs into a forward() batch.
template <typename S>
ad::Matrix<S> stack_inputs(std::span<const EncoderInput> inputs);

/// gamma = gamma_avg + dgamma, beta = beta_avg + dbeta.
template <typename S>
StyleCode<S> apply_truncation(const LatentOffset<S>& offset, const StyleAverages<S>& averages);

/// Batched latent mapping, B x latent_dim -> B x style_size.
template <typename S>
using MappingFn = std::function<ad::Matrix<S>(const ad::Matrix<S>& z)>;

/// Mean of mapping(z) over n standard-normal draws, accumulated in double.
template <typename S>
StyleAverages<S> compute_style_averages(const MappingFn<S>& mapping, int latent_dim, int layers, int width,
                                        int n_samples, Rng& rng);

template <typename S>
StyleAverages<S> compute_style_averages(const SceneField<S>& field, int n_samples, Rng& rng);

}  // namespace semnerf
