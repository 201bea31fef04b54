#include <doctest.h>

#include <cmath>
#include <random>

#include "../support/gradcheck.hpp"
#include "semnerf/errors.hpp"
#include "semnerf/scene_field.hpp"

using namespace semnerf;
using semnerf::testing::MatrixD;
using semnerf::testing::numeric_gradient;
using semnerf::testing::relative_error;

namespace {

FieldConfig small_config() {
  FieldConfig c;
  c.layers = 3;
  c.width = 12;
  c.latent_dim = 8;
  c.mapping_width = 16;
  c.seed = 11;
  return c;
}

MatrixD param(const SceneField<double>& f, const std::string& name) {
  for (const auto& [n, v] : f.named_parameters()) {
    if (n == name) return v.value();
  }
  FAIL("missing parameter " << name);
  return {};
}

std::vector<double> random_latent(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> d;
  std::vector<double> z(n);
  for (auto& v : z) v = d(rng);
  return z;
}

}  // namespace

TEST_CASE("map_latent at z = 0 equals the bias-only forward pass") {
  const FieldConfig cfg = small_config();
  SceneField<double> field(cfg);
  const std::vector<double> zero(cfg.latent_dim, 0.0);
  const StyleCode<double> a = field.map_latent(zero);
  const StyleCode<double> b = field.map_latent(zero);
  CHECK(a == b);

  MatrixD h = param(field, "mapping.0.bias");
  auto leaky = [](MatrixD m) { return MatrixD(m.unaryExpr([](double x) { return x > 0 ? x : 0.2 * x; })); };
  h = leaky(h);
  for (int i = 1; i < cfg.mapping_layers; ++i) {
    h = leaky(MatrixD(h * param(field, "mapping." + std::to_string(i) + ".weight") +
                      param(field, "mapping." + std::to_string(i) + ".bias")));
  }
  const std::string last = "mapping." + std::to_string(cfg.mapping_layers);
  const MatrixD raw = h * param(field, last + ".weight") + param(field, last + ".bias");
  for (int l = 0; l < cfg.layers; ++l) {
    for (int k = 0; k < cfg.width; ++k) {
      CHECK(a.gamma(l)(k) == doctest::Approx(1.0 + cfg.gamma_spread * raw(0, 2 * l * cfg.width + k)).epsilon(1e-12));
      CHECK(a.beta(l)(k) == doctest::Approx(raw(0, (2 * l + 1) * cfg.width + k)).epsilon(1e-12));
    }
  }
}

TEST_CASE("map_latent separates distinct latents and validates dimension") {
  const FieldConfig cfg = small_config();
  SceneField<double> field(cfg);
  std::mt19937_64 rng(3);
  const auto s1 = field.map_latent(random_latent(rng, cfg.latent_dim));
  const auto s2 = field.map_latent(random_latent(rng, cfg.latent_dim));
  CHECK((s1.flat() - s2.flat()).cwiseAbs().maxCoeff() > 0.0);
  CHECK(s1.layers() == cfg.layers);
  CHECK(s1.width() == cfg.width);
  const std::vector<double> wrong(cfg.latent_dim + 1, 0.0);
  CHECK_THROWS_AS(field.map_latent(wrong), Error);
}

TEST_CASE("density ignores direction and outputs stay in range") {
  const FieldConfig cfg = small_config();
  SceneField<float> field(cfg);
  std::mt19937_64 rng(5);
  const auto style = field.map_latent(random_latent(rng, cfg.latent_dim));
  std::normal_distribution<double> n;
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<FieldQuery> queries;
  const Eigen::Vector3d position(0.05, -0.1, 0.07);
  for (int i = 0; i < 100; ++i) {
    Eigen::Vector3d d(n(rng), n(rng), n(rng));
    queries.push_back({position, d.normalized()});
  }
  const auto same_point = field.query_field(queries, style);
  for (const auto& s : same_point) CHECK(s.density == same_point.front().density);

  queries.clear();
  for (int i = 0; i < 500; ++i) {
    Eigen::Vector3d d(n(rng), n(rng), n(rng));
    queries.push_back({Eigen::Vector3d(u(rng), u(rng), u(rng)), d.normalized()});
  }
  for (const auto& s : field.query_field(queries, style)) {
    CHECK(std::isfinite(s.density));
    CHECK(s.density >= 0.0);
    CHECK(s.color.allFinite());
    CHECK(s.color.minCoeff() >= 0.0);
    CHECK(s.color.maxCoeff() <= 1.0);
  }
}

TEST_CASE("query_field validates inputs") {
  const FieldConfig cfg = small_config();
  SceneField<double> field(cfg);
  const StyleCode<double> wrong(cfg.layers + 1, cfg.width);
  std::vector<FieldQuery> q{{Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitZ()}};
  CHECK_THROWS_AS(field.query_field(q, wrong), Error);
  const StyleCode<double> style(cfg.layers, cfg.width);
  q[0].position.x() = std::nan("");
  try {
    field.query_field(q, style);
    FAIL("expected an input error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInput);
  }
}

TEST_CASE("unit FiLM modulation reduces to a plain sinusoidal network") {
  const FieldConfig cfg = small_config();
  SceneField<double> field(cfg);
  StyleCode<double> identity(cfg.layers, cfg.width);
  for (int l = 0; l < cfg.layers; ++l) identity.gamma(l).setOnes();

  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  MatrixD pos(6, 3), dir(6, 3);
  for (int i = 0; i < 6; ++i) {
    pos.row(i) << u(rng), u(rng), u(rng);
    dir.row(i) = Eigen::RowVector3d(u(rng), u(rng), 1.0).normalized();
  }
  ad::NoGradGuard guard;
  const auto out = field.query(pos, dir, identity.as_constant());

  // Twin network: same weights, no conditioning.
  const double w0 = cfg.base_frequency;
  MatrixD h = pos * cfg.position_scale;
  for (int l = 0; l < cfg.layers - 1; ++l) {
    const std::string p = "film." + std::to_string(l);
    h = ((h * param(field, p + ".weight")).rowwise() + param(field, p + ".bias").row(0)) * w0;
    h = h.array().sin().matrix();
  }
  MatrixD raw = (h * param(field, "density.weight")).rowwise() + param(field, "density.bias").row(0);
  MatrixD hc(6, cfg.width + 3);
  hc << h, dir;
  MatrixD c = ((hc * param(field, "color_film.weight")).rowwise() + param(field, "color_film.bias").row(0)) * w0;
  c = c.array().sin().matrix();
  MatrixD rgb = (c * param(field, "color.weight")).rowwise() + param(field, "color.bias").row(0);
  for (int i = 0; i < 6; ++i) {
    const double x = raw(i, 0) + cfg.density_shift;
    const double sigma = cfg.density_scale * (std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))));
    CHECK(out.density.value()(i, 0) == doctest::Approx(sigma).epsilon(1e-12));
    for (int k = 0; k < 3; ++k) {
      CHECK(out.color.value()(i, k) == doctest::Approx(1.0 / (1.0 + std::exp(-rgb(i, k)))).epsilon(1e-12));
    }
  }
}

TEST_CASE("field gradients for W, b, gamma, beta match finite differences") {
  FieldConfig cfg = small_config();
  SceneField<double> field(cfg);
  std::mt19937_64 rng(13);
  StyleCode<double> style = field.map_latent(random_latent(rng, cfg.latent_dim));
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  MatrixD pos(4, 3), dir(4, 3), probe(4, 4);
  for (int i = 0; i < 4; ++i) {
    pos.row(i) << u(rng), u(rng), u(rng);
    dir.row(i) = Eigen::RowVector3d(u(rng), u(rng), 1.0).normalized();
    probe.row(i) << u(rng), u(rng), u(rng), u(rng);
  }
  auto readout = [&](const FieldOutput<double>& out) {
    std::vector<ad::Var<double>> parts{out.density, out.color};
    return ad::sum(ad::mul(ad::concat_cols(parts), ad::constant<double>(probe)));
  };

  ad::Var<double> style_var = ad::parameter<double>(MatrixD(style.flat()));
  std::vector<ad::Var<double>> wrt{style_var};
  for (const auto& p : field.field_parameters()) wrt.push_back(p);
  const auto grads = ad::grad(readout(field.query(pos, dir, style_var)), wrt);

  auto value = [&] {
    ad::NoGradGuard guard;
    return readout(field.query(pos, dir, style_var)).item();
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    MatrixD& x = wrt[i].mutable_value();
    const MatrixD numeric = numeric_gradient(value, x);
    worst = std::max(worst, relative_error(grads[i].value(), numeric));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("parameter_count matches shape arithmetic") {
  FieldConfig cfg;
  cfg.layers = 2;
  cfg.width = 8;
  cfg.latent_dim = 16;
  cfg.mapping_width = 16;
  cfg.mapping_layers = 3;
  const std::int64_t w = 8, m = 16, nz = 16, style = 2 * 2 * 8;
  const std::int64_t mapping = (nz * m + m) + 2 * (m * m + m) + (m * style + style);
  const std::int64_t trunk = 3 * w + w;  // layers - 1 = 1 trunk layer
  const std::int64_t heads = (w + 1) + ((w + 3) * w + w) + (3 * w + 3);
  SceneField<float> a(cfg), b(cfg);
  CHECK(a.parameter_count() == mapping + trunk + heads);
  CHECK(a.parameter_count() == b.parameter_count());
  cfg.width = 16;
  CHECK(SceneField<float>(cfg).parameter_count() > a.parameter_count());
}

TEST_CASE("single precision stays finite inside |position| <= 2") {
  FieldConfig cfg;  // default toy size
  SceneField<float> field(cfg);
  std::mt19937_64 rng(17);
  const auto style = field.map_latent(random_latent(rng, cfg.latent_dim));
  std::uniform_real_distribution<float> u(-2.0f, 2.0f);
  ad::Matrix<float> pos(2048, 3), dir(2048, 3);
  for (int i = 0; i < 2048; ++i) {
    pos.row(i) << u(rng), u(rng), u(rng);
    dir.row(i) = Eigen::RowVector3f(u(rng), u(rng), u(rng) + 3.0f).normalized();
  }
  ad::NoGradGuard guard;
  const auto out = field.query(pos, dir, style.as_constant());
  CHECK(out.density.value().allFinite());
  CHECK(out.color.value().allFinite());
}

TEST_CASE("invalid configurations are rejected") {
  FieldConfig cfg;
  cfg.layers = 1;
  CHECK_THROWS_AS(SceneField<float>{cfg}, Error);
  cfg = FieldConfig{};
  cfg.width = 4;
  CHECK_THROWS_AS(SceneField<float>{cfg}, Error);
}
