#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "semnerf/autodiff.hpp"
#include "semnerf/errors.hpp"
#include "semnerf/random.hpp"
#include "semnerf/scene_field.hpp"

namespace semnerf::nn {

template <typename S>
using Params = std::vector<NamedParameter<S>>;

template <typename S>
ad::Matrix<S> uniform_matrix(Rng& rng, ad::Index rows, ad::Index cols, double bound) {
  ad::Matrix<S> m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(uniform(rng, -bound, bound));
  return m;
}

template <typename S>
ad::Matrix<S> normal_matrix(Rng& rng, ad::Index rows, ad::Index cols, double sd) {
  ad::Matrix<S> m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(normal(rng, 0.0, sd));
  return m;
}

/// Dense layer, weight stored in x out. Xavier-uniform init unless zeroed.
template <typename S>
struct Linear {
  ad::Var<S> weight;
  ad::Var<S> bias;

  Linear() = default;
  Linear(int in, int out, Rng& rng, bool zero = false) {
    const double bound = zero ? 0.0 : std::sqrt(6.0 / (in + out));
    weight = ad::parameter<S>(zero ? ad::Matrix<S>::Zero(in, out) : uniform_matrix<S>(rng, in, out, bound));
    bias = ad::parameter<S>(ad::Matrix<S>::Zero(1, out));
  }

  ad::Var<S> operator()(const ad::Var<S>& x) const { return ad::add_row(ad::matmul(x, weight), bias); }

  void collect(Params<S>& out, const std::string& name) const {
    out.emplace_back(name + ".weight", weight);
    out.emplace_back(name + ".bias", bias);
  }
};

template <typename S>
struct LayerNorm {
  ad::Var<S> gain;
  ad::Var<S> bias;

  LayerNorm() = default;
  explicit LayerNorm(int dim)
      : gain(ad::parameter<S>(ad::Matrix<S>::Ones(1, dim))), bias(ad::parameter<S>(ad::Matrix<S>::Zero(1, dim))) {}

  ad::Var<S> operator()(const ad::Var<S>& x) const {
    return ad::add_row(ad::mul_row(ad::layer_norm_rows(x), gain), bias);
  }

  void collect(Params<S>& out, const std::string& name) const {
    out.emplace_back(name + ".gain", gain);
    out.emplace_back(name + ".bias", bias);
  }
};

/// Channels-last convolution via im2col.
template <typename S>
struct Conv2d {
  Linear<S> linear;
  int in = 0, out = 0, kernel = 3, stride = 1, padding = 1;

  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int k, int s, int p, Rng& rng)
      : in(in_channels), out(out_channels), kernel(k), stride(s), padding(p) {
    // He-style uniform bound for leaky activations.
    const int fan_in = k * k * in_channels;
    const double bound = std::sqrt(6.0 / fan_in);
    linear.weight = ad::parameter<S>(uniform_matrix<S>(rng, fan_in, out_channels, bound));
    linear.bias = ad::parameter<S>(ad::Matrix<S>::Zero(1, out_channels));
  }

  ad::ConvGeometry geometry(ad::Index batch, ad::Index height, ad::Index width) const {
    return {batch, height, width, in, kernel, stride, padding};
  }

  /// x: (batch*h*w) x in -> (batch*oh*ow) x out.
  ad::Var<S> operator()(const ad::Var<S>& x, ad::Index batch, ad::Index height, ad::Index width) const {
    require(x.cols() == in && x.rows() == batch * height * width, ErrorKind::kConfig,
            "conv2d: input shape does not match geometry");
    return linear(ad::im2col(x, geometry(batch, height, width)));
  }

  void collect(Params<S>& out_params, const std::string& name) const { linear.collect(out_params, name); }
};

template <typename S>
std::vector<ad::Var<S>> vars(const Params<S>& params) {
  std::vector<ad::Var<S>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.second);
  return out;
}

template <typename S>
std::int64_t count(const Params<S>& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.second.size();
  return n;
}

template <typename S>
void set_by_name(const Params<S>& params, const std::string& name, const ad::Matrix<S>& value) {
  for (const auto& [n, var] : params) {
    if (n != name) continue;
    require(var.rows() == value.rows() && var.cols() == value.cols(), ErrorKind::kConfig,
            "set_parameter: shape mismatch for '" + name + "'");
    ad::Var<S> handle = var;
    handle.mutable_value() = value;
    return;
  }
  fail(ErrorKind::kInput, "set_parameter: no parameter named '" + name + "'");
}

}  // namespace semnerf::nn
