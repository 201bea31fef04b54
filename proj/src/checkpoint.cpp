#include "semnerf/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <memory>

#include "semnerf/errors.hpp"

namespace semnerf {

const Tensor& Checkpoint::tensor(const std::string& name) const {
  const auto it = tensors.find(name);
  require(it != tensors.end(), ErrorKind::kData, "checkpoint: missing tensor '" + name + "'");
  return it->second;
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint tensors are stored little-endian");

nlohmann::json::binary_t pack(const std::vector<double>& data) {
  nlohmann::json::binary_t bin;
  bin.resize(data.size() * sizeof(double));
  std::memcpy(bin.data(), data.data(), bin.size());
  return bin;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["kind"] = ckpt.kind;
  j["config"] = ckpt.config;
  j["meta"] = ckpt.meta;
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, t] : ckpt.tensors) {
    require(static_cast<std::int64_t>(t.data.size()) == t.rows * t.cols, ErrorKind::kData,
            "checkpoint: tensor '" + name + "' has inconsistent shape");
    tensors[name] = {{"shape", {t.rows, t.cols}}, {"data", nlohmann::json::binary(pack(t.data))}};
  }
  j["tensors"] = std::move(tensors);
  return nlohmann::json::to_cbor(j);
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  nlohmann::json j;
  try {
    j = nlohmann::json::from_cbor(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, std::string("checkpoint: not a valid archive (") + e.what() + ")");
  }
  require(j.is_object() && j.value("format", "") == kCheckpointFormat, ErrorKind::kData,
          "checkpoint: unrecognized format tag");
  require(j.contains("version") && j["version"].is_number_integer(), ErrorKind::kData,
          "checkpoint: missing mandatory 'version' field");
  const int version = j["version"].get<int>();
  require(version >= 1 && version <= kCheckpointVersion, ErrorKind::kData,
          "checkpoint: unsupported version " + std::to_string(version));
  Checkpoint c;
  try {
    c.kind = j.at("kind").get<std::string>();
    c.config = j.value("config", nlohmann::json::object());
    c.meta = j.value("meta", nlohmann::json::object());
    for (const auto& [name, t] : j.at("tensors").items()) {
      Tensor tensor;
      tensor.rows = t.at("shape").at(0).get<std::int64_t>();
      tensor.cols = t.at("shape").at(1).get<std::int64_t>();
      const auto& bin = t.at("data").get_binary();
      require(tensor.rows >= 0 && tensor.cols >= 0 &&
                  bin.size() == static_cast<std::size_t>(tensor.rows * tensor.cols) * sizeof(double),
              ErrorKind::kData, "checkpoint: tensor '" + name + "' size does not match its shape");
      tensor.data.resize(static_cast<std::size_t>(tensor.rows * tensor.cols));
      std::memcpy(tensor.data.data(), bin.data(), bin.size());
      c.tensors.emplace(name, std::move(tensor));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, std::string("checkpoint: malformed archive (") + e.what() + ")");
  }
  return c;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::kIo, "short write to " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  // Write-then-rename so a crash never leaves a truncated archive behind.
  const auto bytes = serialize_checkpoint(ckpt);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  write_file(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return parse_checkpoint(bytes);
  } catch (const Error& e) {
    fail(e.kind(), path.string() + ": " + e.what());
  }
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  require(ctx && EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) == 1 &&
              EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) == 1 &&
              EVP_DigestFinal_ex(ctx.get(), digest, &len) == 1,
          ErrorKind::kIo, "sha256: digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 15];
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

template <typename S>
std::string parameter_hash(const std::vector<NamedParameter<S>>& params) {
  std::vector<std::uint8_t> buf;
  for (const auto& [name, var] : params) {
    buf.insert(buf.end(), name.begin(), name.end());
    const std::int64_t shape[2] = {var.rows(), var.cols()};
    const auto* sp = reinterpret_cast<const std::uint8_t*>(shape);
    buf.insert(buf.end(), sp, sp + sizeof shape);
    const auto* vp = reinterpret_cast<const std::uint8_t*>(var.value().data());
    buf.insert(buf.end(), vp, vp + var.size() * sizeof(S));
  }
  return sha256_hex(buf);
}

template <typename S>
void store_parameters(Checkpoint& ckpt, const std::string& prefix, const std::vector<NamedParameter<S>>& params) {
  for (const auto& [name, var] : params) ckpt.tensors[prefix + name] = Tensor::from<S>(var.value());
}

template <typename S>
void restore_parameters(const Checkpoint& ckpt, const std::string& prefix,
                        const std::vector<NamedParameter<S>>& params) {
  for (const auto& [name, var] : params) {
    const Tensor& t = ckpt.tensor(prefix + name);
    require(t.rows == var.rows() && t.cols == var.cols(), ErrorKind::kData,
            "checkpoint: tensor '" + prefix + name + "' has shape " + std::to_string(t.rows) + "x" +
                std::to_string(t.cols) + ", model expects " + std::to_string(var.rows()) + "x" +
                std::to_string(var.cols()));
    ad::Var<S> handle = var;
    handle.mutable_value() = t.to<S>();
  }
}

template <typename S>
void store_field(Checkpoint& ckpt, const SceneField<S>& field) {
  ckpt.config["field"] = field.config();
  store_parameters<S>(ckpt, "decoder.", field.named_parameters());
}

template <typename S>
SceneField<S> restore_field(const Checkpoint& ckpt) {
  require(ckpt.config.contains("field"), ErrorKind::kData, "checkpoint: no decoder configuration");
  SceneField<S> field(ckpt.config["field"].get<FieldConfig>());
  restore_parameters<S>(ckpt, "decoder.", field.named_parameters());
  return field;
}

#define SEMNERF_INSTANTIATE_CKPT(S)                                                                          \
  template std::string parameter_hash<S>(const std::vector<NamedParameter<S>>&);                             \
  template void store_parameters<S>(Checkpoint&, const std::string&, const std::vector<NamedParameter<S>>&); \
  template void restore_parameters<S>(const Checkpoint&, const std::string&,                                 \
                                      const std::vector<NamedParameter<S>>&);                                \
  template void store_field<S>(Checkpoint&, const SceneField<S>&);                                           \
  template SceneField<S> restore_field<S>(const Checkpoint&);

SEMNERF_INSTANTIATE_CKPT(float)
SEMNERF_INSTANTIATE_CKPT(double)

}  // namespace semnerf
