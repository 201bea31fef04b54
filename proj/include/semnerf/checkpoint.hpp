#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semnerf/autodiff.hpp"
#include "semnerf/scene_field.hpp"

namespace semnerf {

constexpr int kCheckpointVersion = 1;
constexpr const char* kCheckpointFormat = "semnerf-checkpoint";

/// Row-major float64 tensor as stored on disk.
struct Tensor {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> data;

  template <typename S>
  static Tensor from(const ad::Matrix<S>& m) {
    Tensor t{m.rows(), m.cols(), std::vector<double>(static_cast<std::size_t>(m.size()))};
    for (ad::Index i = 0; i < m.size(); ++i) t.data[i] = static_cast<double>(m.data()[i]);
    return t;
  }
  template <typename S>
  ad::Matrix<S> to() const {
    ad::Matrix<S> m(rows, cols);
    for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(data[i]);
    return m;
  }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Self-describing archive: kind, config, named tensors, free-form metadata.
/// Serialized as CBOR with a mandatory integer "version".
struct Checkpoint {
  std::string kind;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  const Tensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Hash of parameter names, shapes and raw values, in the given order.
template <typename S>
std::string parameter_hash(const std::vector<NamedParameter<S>>& params);

/// Stores every named parameter under `prefix` + name.
template <typename S>
void store_parameters(Checkpoint& ckpt, const std::string& prefix, const std::vector<NamedParameter<S>>& params);

/// Copies tensors `prefix` + name into the parameters; every name must exist
/// with a matching shape.
template <typename S>
void restore_parameters(const Checkpoint& ckpt, const std::string& prefix,
                        const std::vector<NamedParameter<S>>& params);

/// Decoder archive helpers: config under "field", tensors under "decoder.".
template <typename S>
void store_field(Checkpoint& ckpt, const SceneField<S>& field);
template <typename S>
SceneField<S> restore_field(const Checkpoint& ckpt);

}  // namespace semnerf
