#include <doctest.h>

#include <random>

#include "../support/gradcheck.hpp"
#include "semnerf/errors.hpp"
#include "semnerf/inversion_encoder.hpp"

using namespace semnerf;
using semnerf::testing::MatrixD;
using semnerf::testing::numeric_gradient;
using semnerf::testing::relative_error;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.resolution = 8;
  c.channels = 3;
  c.patch = 4;
  c.dim = 8;
  c.heads = 2;
  c.blocks = 1;
  c.style_layers = 2;
  c.style_width = 2;
  c.zero_init_head = false;
  c.seed = 3;
  return c;
}

MatrixD random_matrix(std::mt19937_64& rng, ad::Index r, ad::Index c) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  MatrixD m(r, c);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

EncoderInput random_input(std::mt19937_64& rng, const EncoderConfig& c) {
  EncoderInput in{c.channels, c.resolution, c.resolution, {}};
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  in.data.resize(static_cast<std::size_t>(c.channels) * c.resolution * c.resolution);
  for (auto& v : in.data) v = d(rng);
  return in;
}

}  // namespace

TEST_CASE("encoder gradients match finite differences") {
  const InversionEncoder<double> enc(tiny_config());
  std::mt19937_64 rng(1);
  MatrixD x = random_matrix(rng, 4, 8 * 8 * 3);
  const MatrixD probe = random_matrix(rng, 4, 8);
  auto readout = [&] { return enc.forward(ad::constant<double>(x)).value().cwiseProduct(probe).sum(); };

  ad::Var<double> xv = ad::parameter<double>(x);
  const auto params = enc.named_parameters();
  std::vector<ad::Var<double>> wrt = {xv};
  for (const auto& p : params) wrt.push_back(p.second);
  const auto grads = ad::grad(ad::sum(ad::mul(enc.forward(xv), ad::constant<double>(probe))), wrt);

  CHECK(relative_error(grads[0].value(), numeric_gradient(readout, x)) < 1e-4);
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Var<double> p = params[i].second;
    const MatrixD numeric = numeric_gradient(readout, p.mutable_value());
    INFO(params[i].first);
    CHECK(relative_error(grads[i + 1].value(), numeric) < 1e-4);
  }
}

TEST_CASE("every patch influences the offset") {
  EncoderConfig c = EncoderConfig{};
  c.style_layers = 3;
  c.style_width = 8;
  c.zero_init_head = false;
  c.seed = 11;
  const InversionEncoder<float> enc(c);
  std::mt19937_64 rng(2);
  const EncoderInput base = random_input(rng, c);
  const LatentOffset<float> o = enc.encode(base);
  CHECK(enc.encode(base) == o);
  const int n = c.resolution / c.patch;
  for (int py = 0; py < n; ++py) {
    for (int px = 0; px < n; ++px) {
      EncoderInput moved = base;
      for (int y = py * c.patch; y < (py + 1) * c.patch; ++y)
        for (int x = px * c.patch; x < (px + 1) * c.patch; ++x)
          for (int ch = 0; ch < c.channels; ++ch)
            moved.data[(static_cast<std::size_t>(y) * c.resolution + x) * c.channels + ch] += 0.5f;
      const LatentOffset<float> m = enc.encode(moved);
      CHECK((m.flat() - o.flat()).norm() > 0.0f);
      CHECK(m.flat().norm() != o.flat().norm());
    }
  }
}

TEST_CASE("zero-initialized head starts at the average code") {
  EncoderConfig c = tiny_config();
  c.zero_init_head = true;
  const InversionEncoder<float> enc(c);
  std::mt19937_64 rng(3);
  CHECK(enc.encode(random_input(rng, c)).flat().isZero(0.0f));
}

TEST_CASE("encoder shape contracts") {
  EncoderConfig c = tiny_config();
  c.patch = 3;
  CHECK_THROWS_AS(InversionEncoder<float>{c}, Error);
  c = tiny_config();
  c.dim = 9;
  CHECK_THROWS_AS(InversionEncoder<float>{c}, Error);

  const InversionEncoder<float> enc(tiny_config());
  EncoderInput wrong{4, 8, 8, std::vector<float>(256, 0.0f)};
  try {
    enc.encode(wrong);
    FAIL("expected an input error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInput);
  }

  FieldConfig field;
  field.layers = 4;
  field.width = 16;
  EncoderConfig matched = EncoderConfig::for_field(field, 6);
  CHECK(matched.output_size() == field.style_size());
  CHECK(matched.channels == 8);
  CHECK_NOTHROW(require_compatible(matched, field));
  matched.style_width = 15;
  CHECK_THROWS_AS(require_compatible(matched, field), Error);
}

TEST_CASE("truncation algebra is exact") {
  // Dyadic values with few mantissa bits make float sums exact.
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> d(-256, 256);
  auto dyadic = [&](int layers, int width) {
    Eigen::Matrix<float, 1, Eigen::Dynamic> v(2 * layers * width);
    for (auto& x : v) x = static_cast<float>(d(rng)) / 64.0f;
    return v;
  };
  const StyleAverages<float> avg(3, 4, dyadic(3, 4));
  CHECK(apply_truncation(LatentOffset<float>(3, 4), avg).flat() == avg.flat());
  const LatentOffset<float> neg(3, 4, -avg.flat());
  CHECK(apply_truncation(neg, avg).flat().isZero(0.0f));
  const LatentOffset<float> o1(3, 4, dyadic(3, 4)), o2(3, 4, dyadic(3, 4));
  CHECK((apply_truncation(o1, avg).flat() - avg.flat()) == o1.flat());
  const LatentOffset<float> sum(3, 4, o1.flat() + o2.flat());
  CHECK((apply_truncation(sum, avg).flat() - apply_truncation(o2, avg).flat()) == o1.flat());
  CHECK_THROWS_AS(apply_truncation(LatentOffset<float>(2, 4), avg), Error);
}

TEST_CASE("style averages") {
  FieldConfig fc;
  fc.layers = 3;
  fc.width = 8;
  fc.latent_dim = 6;
  fc.mapping_width = 16;
  fc.mapping_layers = 2;
  const SceneField<double> field(fc);

  Rng a(5), b(5), c(5);
  const auto one = compute_style_averages(field, 1, a);
  std::vector<double> z(6);
  for (auto& v : z) v = normal(b);
  CHECK(one.flat() == field.map_latent(z).flat());
  CHECK(compute_style_averages(field, 700, a).flat() != one.flat());
  Rng d1(9), d2(9);
  CHECK(compute_style_averages(field, 1300, d1) == compute_style_averages(field, 1300, d2));

  // Two-pass mean over the same draws.
  Rng d3(9);
  Eigen::RowVectorXd total = Eigen::RowVectorXd::Zero(fc.style_size());
  for (int i = 0; i < 1300; ++i) {
    for (auto& v : z) v = normal(d3);
    total += field.map_latent(z).flat();
  }
  Rng d4(9);
  CHECK((compute_style_averages(field, 1300, d4).flat() - total / 1300.0).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(compute_style_averages(field, 0, c), Error);
}

TEST_CASE("averages of a linear mapping approach the analytic mean") {
  // out = z M + offset: mean = offset, per-entry sd = column norm of M.
  const int latent = 5, layers = 2, width = 4;
  std::mt19937_64 rng(6);
  const MatrixD m = random_matrix(rng, latent, 2 * layers * width);
  const MatrixD offset = random_matrix(rng, 1, 2 * layers * width);
  const MappingFn<double> linear = [&](const MatrixD& z) -> MatrixD {
    return (z * m).rowwise() + offset.row(0);
  };
  for (int n : {10000, 20000}) {
    Rng r(12);
    const auto avg = compute_style_averages<double>(linear, latent, layers, width, n, r);
    for (ad::Index k = 0; k < avg.size(); ++k) {
      const double sd = m.col(k).norm();
      CHECK(std::abs(avg.flat()[k] - offset(0, k)) < 3.0 * sd / std::sqrt(n));
    }
  }
}
