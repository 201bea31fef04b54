#include "semnerf/inversion_encoder.hpp"

#include <cmath>

#include "semnerf/errors.hpp"

namespace semnerf {

void EncoderConfig::validate() const {
  require(resolution > 0 && patch > 0 && resolution % patch == 0, ErrorKind::kConfig,
          "encoder: resolution " + std::to_string(resolution) + " is not divisible by patch " + std::to_string(patch));
  require(channels > 0 && dim > 0 && blocks >= 0 && heads > 0 && dim % heads == 0 && mlp_ratio > 0,
          ErrorKind::kConfig, "encoder: need positive widths and dim divisible by heads");
  require(style_layers > 0 && style_width > 0, ErrorKind::kConfig, "encoder: output style shape is unset");
  require(contour_thickness >= 1, ErrorKind::kConfig, "encoder: contour thickness must be >= 1");
}

EncoderConfig EncoderConfig::for_field(const FieldConfig& field, int n_labels) {
  EncoderConfig c;
  c.channels = n_labels + 2;
  c.style_layers = field.layers;
  c.style_width = field.width;
  return c;
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"resolution", c.resolution},     {"channels", c.channels},
       {"patch", c.patch},               {"dim", c.dim},
       {"blocks", c.blocks},             {"heads", c.heads},
       {"mlp_ratio", c.mlp_ratio},       {"style_layers", c.style_layers},
       {"style_width", c.style_width},   {"contour_thickness", c.contour_thickness},
       {"zero_init_head", c.zero_init_head}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  const EncoderConfig d;
  c.resolution = j.value("resolution", d.resolution);
  c.channels = j.value("channels", d.channels);
  c.patch = j.value("patch", d.patch);
  c.dim = j.value("dim", d.dim);
  c.blocks = j.value("blocks", d.blocks);
  c.heads = j.value("heads", d.heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.style_layers = j.value("style_layers", d.style_layers);
  c.style_width = j.value("style_width", d.style_width);
  c.contour_thickness = j.value("contour_thickness", d.contour_thickness);
  c.zero_init_head = j.value("zero_init_head", d.zero_init_head);
  c.seed = j.value("seed", d.seed);
}

void require_compatible(const EncoderConfig& encoder, const FieldConfig& field) {
  require(encoder.output_size() == field.style_size() && encoder.style_layers == field.layers &&
              encoder.style_width == field.width,
          ErrorKind::kConfig,
          "encoder emits " + std::to_string(encoder.output_size()) + " offsets (" +
              std::to_string(encoder.style_layers) + "x" + std::to_string(encoder.style_width) +
              "), decoder style code has " + std::to_string(field.style_size()) + " (" +
              std::to_string(field.layers) + "x" + std::to_string(field.width) + ")");
}

template <typename S>
InversionEncoder<S>::InversionEncoder(const EncoderConfig& config) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(config_.seed, 0x656e63, 0));
  const int d = config_.dim;
  embed_ = nn::Linear<S>(config_.patch * config_.patch * config_.channels, d, rng);
  position_ = ad::parameter<S>(nn::normal_matrix<S>(rng, config_.tokens(), d, 0.02));
  for (int b = 0; b < config_.blocks; ++b) {
    Block block;
    block.norm1 = nn::LayerNorm<S>(d);
    block.qkv = nn::Linear<S>(d, 3 * d, rng);
    block.proj = nn::Linear<S>(d, d, rng);
    block.norm2 = nn::LayerNorm<S>(d);
    block.fc1 = nn::Linear<S>(d, config_.mlp_ratio * d, rng);
    block.fc2 = nn::Linear<S>(config_.mlp_ratio * d, d, rng);
    blocks_.push_back(std::move(block));
  }
  final_norm_ = nn::LayerNorm<S>(d);
  head_ = nn::Linear<S>(d, config_.output_size(), rng, config_.zero_init_head);
}

template <typename S>
ad::Var<S> InversionEncoder<S>::attention(const Block& block, const ad::Var<S>& x, ad::Index batch) const {
  const ad::Index t = config_.tokens();
  const ad::Index d = config_.dim;
  const ad::Index dh = d / config_.heads;
  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  const ad::Var<S> qkv = block.qkv(x);
  std::vector<ad::Var<S>> rows;
  for (ad::Index b = 0; b < batch; ++b) {
    const ad::Var<S> item = ad::slice_rows(qkv, b * t, t);
    std::vector<ad::Var<S>> heads;
    for (ad::Index h = 0; h < config_.heads; ++h) {
      const ad::Var<S> q = ad::slice_cols(item, h * dh, dh);
      const ad::Var<S> k = ad::slice_cols(item, d + h * dh, dh);
      const ad::Var<S> v = ad::slice_cols(item, 2 * d + h * dh, dh);
      const ad::Var<S> weights = ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt));
      heads.push_back(ad::matmul(weights, v));
    }
    rows.push_back(heads.size() == 1 ? heads[0] : ad::concat_cols(heads));
  }
  return block.proj(rows.size() == 1 ? rows[0] : ad::concat_rows(rows));
}

template <typename S>
ad::Var<S> InversionEncoder<S>::forward(const ad::Var<S>& inputs) const {
  const int r = config_.resolution;
  const int c = config_.channels;
  require(inputs.cols() == static_cast<ad::Index>(r) * r * c && inputs.rows() > 0, ErrorKind::kInput,
          "encoder: expected rows of " + std::to_string(r) + "x" + std::to_string(r) + "x" + std::to_string(c) +
              " values, got " + std::to_string(inputs.cols()));
  const ad::Index batch = inputs.rows();
  const ad::Index t = config_.tokens();

  const ad::Var<S> pixels = ad::reshape(inputs, batch * r * r, c);
  const ad::ConvGeometry g{batch, r, r, c, config_.patch, config_.patch, 0};
  ad::Var<S> x = embed_(ad::im2col(pixels, g));

  ad::Matrix<S> tile = ad::Matrix<S>::Zero(batch * t, t);
  for (ad::Index b = 0; b < batch; ++b) tile.block(b * t, 0, t, t).setIdentity();
  x = ad::add(x, ad::matmul(ad::constant<S>(std::move(tile)), position_));

  for (const Block& block : blocks_) {
    x = ad::add(x, attention(block, block.norm1(x), batch));
    x = ad::add(x, block.fc2(ad::gelu(block.fc1(block.norm2(x)))));
  }

  ad::Matrix<S> pool = ad::Matrix<S>::Zero(batch, batch * t);
  for (ad::Index b = 0; b < batch; ++b) pool.block(b, b * t, 1, t).setConstant(S(1) / static_cast<S>(t));
  const ad::Var<S> pooled = ad::matmul(ad::constant<S>(std::move(pool)), x);
  return head_(final_norm_(pooled));
}

template <typename S>
LatentOffset<S> InversionEncoder<S>::encode(const EncoderInput& input) const {
  require(input.channels == config_.channels && input.height == config_.resolution &&
              input.width == config_.resolution,
          ErrorKind::kInput,
          "encoder: input is " + std::to_string(input.height) + "x" + std::to_string(input.width) + "x" +
              std::to_string(input.channels) + ", expected " + std::to_string(config_.resolution) + "x" +
              std::to_string(config_.resolution) + "x" + std::to_string(config_.channels));
  ad::NoGradGuard guard;
  const ad::Var<S> out = forward(ad::constant<S>(stack_inputs<S>(std::span(&input, 1))));
  return LatentOffset<S>(config_.style_layers, config_.style_width, out.value().row(0));
}

template <typename S>
std::vector<NamedParameter<S>> InversionEncoder<S>::named_parameters() const {
  nn::Params<S> out;
  embed_.collect(out, "embed");
  out.emplace_back("position", position_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string p = "block" + std::to_string(b);
    blocks_[b].norm1.collect(out, p + ".norm1");
    blocks_[b].qkv.collect(out, p + ".qkv");
    blocks_[b].proj.collect(out, p + ".proj");
    blocks_[b].norm2.collect(out, p + ".norm2");
    blocks_[b].fc1.collect(out, p + ".fc1");
    blocks_[b].fc2.collect(out, p + ".fc2");
  }
  final_norm_.collect(out, "final_norm");
  head_.collect(out, "head");
  return out;
}

template <typename S>
ad::Matrix<S> stack_inputs(std::span<const EncoderInput> inputs) {
  require(!inputs.empty(), ErrorKind::kInput, "stack_inputs: empty batch");
  const std::size_t n = inputs[0].data.size();
  ad::Matrix<S> m(static_cast<ad::Index>(inputs.size()), static_cast<ad::Index>(n));
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    require(inputs[i].data.size() == n, ErrorKind::kInput, "stack_inputs: inputs differ in size");
    for (std::size_t k = 0; k < n; ++k) m(static_cast<ad::Index>(i), static_cast<ad::Index>(k)) = static_cast<S>(inputs[i].data[k]);
  }
  return m;
}

template <typename S>
StyleCode<S> apply_truncation(const LatentOffset<S>& offset, const StyleAverages<S>& averages) {
  require(offset.same_shape(averages), ErrorKind::kInput,
          "apply_truncation: offset is " + std::to_string(offset.layers()) + "x" + std::to_string(offset.width()) +
              ", averages are " + std::to_string(averages.layers()) + "x" + std::to_string(averages.width()));
  return StyleCode<S>(offset.layers(), offset.width(), averages.flat() + offset.flat());
}

template <typename S>
StyleAverages<S> compute_style_averages(const MappingFn<S>& mapping, int latent_dim, int layers, int width,
                                        int n_samples, Rng& rng) {
  require(n_samples >= 1, ErrorKind::kInput, "compute_style_averages: need at least one sample");
  constexpr int kChunk = 512;
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(2 * layers * width);
  for (int start = 0; start < n_samples; start += kChunk) {
    const int n = std::min(kChunk, n_samples - start);
    ad::Matrix<S> z(n, latent_dim);
    for (ad::Index i = 0; i < z.size(); ++i) z.data()[i] = static_cast<S>(normal(rng));
    const ad::Matrix<S> out = mapping(z);
    require(out.rows() == n && out.cols() == sum.size(), ErrorKind::kConfig,
            "compute_style_averages: mapping output has the wrong shape");
    sum += out.template cast<double>().colwise().sum();
  }
  return StyleAverages<S>(layers, width, (sum / n_samples).cast<S>());
}

template <typename S>
StyleAverages<S> compute_style_averages(const SceneField<S>& field, int n_samples, Rng& rng) {
  const FieldConfig& c = field.config();
  return compute_style_averages<S>(
      [&field](const ad::Matrix<S>& z) {
        ad::NoGradGuard guard;
        return ad::Matrix<S>(field.map_latent_graph(ad::constant<S>(z)).value());
      },
      c.latent_dim, c.layers, c.width, n_samples, rng);
}

template class InversionEncoder<float>;
template class InversionEncoder<double>;

#define SEMNERF_INSTANTIATE_ENC(S)                                                                             \
  template ad::Matrix<S> stack_inputs<S>(std::span<const EncoderInput>);                                      \
  template StyleCode<S> apply_truncation<S>(const LatentOffset<S>&, const StyleAverages<S>&);                 \
  template StyleAverages<S> compute_style_averages<S>(const MappingFn<S>&, int, int, int, int, Rng&);         \
  template StyleAverages<S> compute_style_averages<S>(const SceneField<S>&, int, Rng&);

SEMNERF_INSTANTIATE_ENC(float)
SEMNERF_INSTANTIATE_ENC(double)

}  // namespace semnerf
