#pragma once

#include <Eigen/Core>

#include <string>

#include "semnerf/autodiff.hpp"
#include "semnerf/errors.hpp"

namespace semnerf {

/// Per-layer (gamma, beta) vectors stored flat as one row, blocked by layer:
/// [gamma_1 | beta_1 | gamma_2 | beta_2 | ...], each block `width` wide.
/// The tag distinguishes style codes, encoder offsets and style averages,
/// which share the layout but not the meaning.
template <typename S, typename Tag>
class LayeredCode {
 public:
  using Row = Eigen::Matrix<S, 1, Eigen::Dynamic>;

  LayeredCode() = default;
  LayeredCode(int layers, int width) : layers_(layers), width_(width), flat_(Row::Zero(2 * layers * width)) {}
  LayeredCode(int layers, int width, Row flat) : layers_(layers), width_(width), flat_(std::move(flat)) {
    require(flat_.size() == 2 * layers * width, ErrorKind::kConfig,
            "layered code: expected " + std::to_string(2 * layers * width) + " entries, got " +
                std::to_string(flat_.size()));
  }

  int layers() const { return layers_; }
  int width() const { return width_; }
  Eigen::Index size() const { return flat_.size(); }

  const Row& flat() const { return flat_; }
  Row& flat() { return flat_; }

  /// Layer index is zero-based.
  auto gamma(int layer) const { return flat_.segment(2 * layer * width_, width_); }
  auto gamma(int layer) { return flat_.segment(2 * layer * width_, width_); }
  auto beta(int layer) const { return flat_.segment((2 * layer + 1) * width_, width_); }
  auto beta(int layer) { return flat_.segment((2 * layer + 1) * width_, width_); }

  bool same_shape(int layers, int width) const { return layers_ == layers && width_ == width; }
  template <typename OtherTag>
  bool same_shape(const LayeredCode<S, OtherTag>& other) const {
    return layers_ == other.layers() && width_ == other.width();
  }

  bool all_finite() const { return flat_.allFinite(); }

  ad::Var<S> as_constant() const { return ad::constant<S>(ad::Matrix<S>(flat_)); }

  template <typename T>
  LayeredCode<T, Tag> cast() const {
    return LayeredCode<T, Tag>(layers_, width_, flat_.template cast<T>());
  }

  friend bool operator==(const LayeredCode& a, const LayeredCode& b) {
    return a.layers_ == b.layers_ && a.width_ == b.width_ && a.flat_ == b.flat_;
  }

 private:
  int layers_ = 0;
  int width_ = 0;
  Row flat_;
};

struct StyleTag {};
struct OffsetTag {};
struct AveragesTag {};

template <typename S>
using StyleCode = LayeredCode<S, StyleTag>;
template <typename S>
using LatentOffset = LayeredCode<S, OffsetTag>;
template <typename S>
using StyleAverages = LayeredCode<S, AveragesTag>;

}  // namespace semnerf
