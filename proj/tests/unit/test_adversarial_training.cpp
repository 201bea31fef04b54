#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "../support/gradcheck.hpp"
#include "semnerf/adversarial_training.hpp"
#include "semnerf/errors.hpp"

using namespace semnerf;
using semnerf::testing::MatrixD;
using semnerf::testing::numeric_gradient;
using semnerf::testing::relative_error;
using V = ad::Var<double>;
namespace fs = std::filesystem;

namespace {

MatrixD random_matrix(std::mt19937_64& rng, ad::Index r, ad::Index c, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  MatrixD m(r, c);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

FieldConfig toy_field() {
  FieldConfig f;
  f.layers = 3;
  f.width = 16;
  f.latent_dim = 8;
  f.mapping_width = 16;
  f.mapping_layers = 2;
  f.seed = 2;
  return f;
}

const fs::path& toy_dataset() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "semnerf_training_toy";
    fs::remove_all(d);
    DatasetConfig cfg;
    cfg.n_train = 12;
    cfg.n_test = 2;
    cfg.seed = 31;
    cfg.render = {16, 32, 32};
    build_dataset(cfg, d);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("reconstruction loss closed forms") {
  const V ones = ad::constant<double>(MatrixD::Ones(2, 6));
  const V zeros = ad::constant<double>(MatrixD::Zero(2, 6));
  CHECK(rec_loss(ones, zeros).item() == 1.0);
  CHECK(rec_loss(ones, ones).item() == 0.0);
  std::mt19937_64 rng(1);
  const V a = ad::constant<double>(random_matrix(rng, 3, 12)), b = ad::constant<double>(random_matrix(rng, 3, 12));
  CHECK(rec_loss(a, b).item() == rec_loss(b, a).item());
  CHECK(rec_loss(a, b).item() > 0.0);
  CHECK_THROWS_AS(rec_loss(a, ones), Error);
}

TEST_CASE("regularizer is the offset norm") {
  CHECK(reg_loss(ad::constant<double>(MatrixD::Zero(1, 5))).item() == 0.0);
  MatrixD one_hot = MatrixD::Zero(1, 5);
  one_hot(0, 3) = 1.0;
  CHECK(reg_loss(ad::constant<double>(one_hot)).item() == 1.0);
  std::mt19937_64 rng(2);
  const MatrixD o = random_matrix(rng, 1, 7, -1, 1);
  CHECK(reg_loss(ad::constant<double>(MatrixD(2 * o))).item() ==
        doctest::Approx(2 * reg_loss(ad::constant<double>(o)).item()).epsilon(1e-15));
  // Zero offsets have a zero (not NaN) gradient.
  V z = ad::parameter<double>(MatrixD::Zero(2, 4));
  const MatrixD g = ad::grad(reg_loss(z), std::vector<V>{z})[0].value();
  CHECK(g.allFinite());
  CHECK(g.isZero());
}

TEST_CASE("perceptual loss: identity, symmetry and gradient") {
  const PerceptualExtractor<double> ex;
  std::mt19937_64 rng(3);
  MatrixD a = random_matrix(rng, 4, 8 * 8 * 3);
  const MatrixD b = random_matrix(rng, 4, 8 * 8 * 3);
  const V av = ad::constant<double>(a), bv = ad::constant<double>(b);
  CHECK(perceptual_loss(av, av, 8, 8, ex).item() == 0.0);
  CHECK(perceptual_loss(av, bv, 8, 8, ex).item() == doctest::Approx(perceptual_loss(bv, av, 8, 8, ex).item()).epsilon(1e-14));
  CHECK(perceptual_loss(av, bv, 8, 8, ex).item() > 0.0);
  CHECK(ex.features(av, 8, 8)[0].value() == ex.features(av, 8, 8)[0].value());

  V rendered = ad::parameter<double>(a);
  const MatrixD analytic = ad::grad(perceptual_loss(bv, rendered, 8, 8, ex), std::vector<V>{rendered})[0].value();
  const MatrixD numeric = numeric_gradient([&] { return perceptual_loss(bv, ad::constant<double>(a), 8, 8, ex).item(); }, a);
  CHECK(relative_error(analytic, numeric) < 1e-4);
}

TEST_CASE("GAN losses: closed forms") {
  std::mt19937_64 rng(4);
  const V real = ad::constant<double>(random_matrix(rng, 4, 48));
  const V fake = ad::constant<double>(random_matrix(rng, 4, 48));
  const Scorer<double> zero = [](const V& x) { return ad::scale(ad::sum_cols(x), 0.0); };
  const GanTerms<double> t0 = gan_losses<double>(real, fake, zero, 10.0);
  CHECK(t0.generator.item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(t0.discriminator.item() == doctest::Approx(2 * std::log(2.0)).epsilon(1e-15));
  CHECK(t0.r1.item() == 0.0);

  // Linear D(x) = <a, x>: the R1 term is lambda * |a|^2 for any x.
  const MatrixD a = random_matrix(rng, 48, 1, -1, 1);
  const Scorer<double> linear = [&](const V& x) { return ad::matmul(x, ad::constant<double>(a)); };
  for (int trial = 0; trial < 3; ++trial) {
    const V r = ad::constant<double>(random_matrix(rng, 4, 48, -3, 3));
    const GanTerms<double> t = gan_losses<double>(r, fake, linear, 10.0);
    const double expected = 10.0 * a.squaredNorm();
    CHECK(std::abs(t.r1.item() - expected) / expected < 1e-6);
  }

  const Scorer<double> broken = [](const V& x) {
    return ad::constant<double>(MatrixD::Constant(x.rows(), 1, std::numeric_limits<double>::quiet_NaN()));
  };
  try {
    gan_losses<double>(real, fake, broken, 10.0);
    FAIL("expected a numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kNumeric);
  }
}

TEST_CASE("GAN losses: gradients through the patch discriminator") {
  DiscriminatorConfig dc;
  dc.channels = {4, 4};
  const PatchDiscriminator<double> d(dc);
  std::mt19937_64 rng(5);
  const MatrixD real = random_matrix(rng, 4, 8 * 8 * 3);
  MatrixD fake = random_matrix(rng, 4, 8 * 8 * 3);
  const Scorer<double> scorer = [&](const V& x) { return d(x, 8, 8); };
  CHECK(d.score_map(ad::constant<double>(real), 8, 8).rows() == 4 * 4 * 4);

  V fake_v = ad::parameter<double>(fake);
  const auto t = gan_losses<double>(ad::constant<double>(real), fake_v, scorer, 10.0);
  const MatrixD g_fake = ad::grad(t.generator, std::vector<V>{fake_v})[0].value();
  const MatrixD n_fake = numeric_gradient(
      [&] { return gan_losses<double>(ad::constant<double>(real), ad::constant<double>(fake), scorer, 10.0).generator.item(); },
      fake);
  CHECK(relative_error(g_fake, n_fake) < 1e-4);

  const auto params = d.named_parameters();
  const auto analytic = ad::grad(ad::add(t.discriminator, t.r1), d.parameters());
  for (std::size_t i = 0; i < params.size(); ++i) {
    V p = params[i].second;
    const MatrixD numeric = numeric_gradient(
        [&] {
          const auto u = gan_losses<double>(ad::constant<double>(real), ad::constant<double>(fake), scorer, 10.0);
          return u.discriminator.item() + u.r1.item();
        },
        p.mutable_value());
    INFO(params[i].first);
    CHECK(relative_error(analytic[i].value(), numeric) < 1e-4);
  }
}

TEST_CASE("total loss weighting") {
  const LossWeights w;
  CHECK(total_loss(0, 0, 0, 0, w) == 0.0);
  CHECK(total_loss(1, 1, 1, 1, w) == doctest::Approx(1.885).epsilon(1e-15));
  LossWeights doubled{2 * w.rec, 2 * w.perceptual, 2 * w.reg, 2 * w.gan, w.r1};
  CHECK(total_loss(0.3, 0.7, 2.0, 0.1, doubled) == doctest::Approx(2 * total_loss(0.3, 0.7, 2.0, 0.1, w)));
  const LossParts<double> parts{ad::scalar(1.0), ad::scalar(1.0), ad::scalar(1.0), ad::scalar(1.0)};
  CHECK(total_loss(parts, w).item() == doctest::Approx(1.885).epsilon(1e-15));
  CHECK(w.r1 == 10.0);
  CHECK_THROWS_AS((LossWeights{-1, 0, 0, 0, 0}.validate()), Error);
}

TEST_CASE("anneal schedule") {
  AnnealSchedule s;
  s.total_steps = 1000;
  CHECK(s.lower_bound(0) == 0.9);
  CHECK(s.lower_bound(1000) == 0.06);
  CHECK(s.lower_bound(5000) == 0.06);
  CHECK(s.lower_bound(500) == doctest::Approx(0.9 * std::sqrt(0.06 / 0.9)).epsilon(1e-12));
  CHECK(s.lower_bound(500) == doctest::Approx(0.23238).epsilon(1e-4));
  double prev = 1.0;
  Rng rng(1);
  for (int step = 0; step <= 1000; ++step) {
    const double lb = s.lower_bound(step);
    CHECK(lb <= prev);
    CHECK(lb >= 0.06);
    CHECK(lb <= 0.9);
    prev = lb;
    const double a = anneal_alpha(step, s, rng);
    CHECK(a >= lb);
    CHECK(a <= 1.0);
  }
  s.end = 0.95;
  CHECK_THROWS_AS(s.validate(), Error);
}

TEST_CASE("adam matches a hand-computed update") {
  V p = ad::parameter<double>(MatrixD::Constant(1, 2, 1.0));
  Adam<double> opt({{"p", p}}, {0.1, 0.9, 0.999, 1e-8});
  const V g = ad::constant<double>((MatrixD(1, 2) << 2.0, -0.5).finished());
  opt.step({g});
  // First step moves each entry by lr * sign(g) (up to eps).
  CHECK(p.value()(0, 0) == doctest::Approx(0.9).epsilon(1e-7));
  CHECK(p.value()(0, 1) == doctest::Approx(1.1).epsilon(1e-7));
  opt.step({g});
  CHECK(p.value()(0, 0) == doctest::Approx(0.8).epsilon(1e-7));

  Checkpoint c;
  opt.save(c, "opt.");
  V q = ad::parameter<double>(p.value());
  Adam<double> other({{"p", q}}, {0.1, 0.9, 0.999, 1e-8});
  other.restore(c, "opt.");
  CHECK(other.steps() == 2);
  opt.step({g});
  other.step({g});
  CHECK(p.value() == q.value());
}

TEST_CASE("decoder overfit reduces reconstruction error") {
  DecoderTrainConfig c;
  c.mode = "overfit";
  c.field = toy_field();
  c.steps = 60;
  c.batch = 2;
  c.rays_per_item = 64;
  c.overfit_views = 2;
  c.image_size = 12;
  c.eval_every = 0;
  c.optimizer.lr = 1e-3;
  DatasetConfig synth;
  synth.seed = 4;
  TrainReport rep;
  const Checkpoint ckpt = pretrain_decoder(c, nullptr, synth, {}, &rep);
  CHECK(rep.steps_run == 60);
  CHECK(rep.history.back().rec < 0.5 * rep.history.front().rec);
  CHECK(ckpt.kind == "decoder");
  CHECK(ckpt.meta["decoder_hash"] == rep.decoder_hash);
  CHECK(restore_field<float>(ckpt).config().width == 16);
}

TEST_CASE("decoder glo and adversarial modes run and resume") {
  TrainingSet data = TrainingSet::load(toy_dataset() / "train");
  CHECK(data.size() == 12);
  DecoderTrainConfig c;
  c.mode = "glo";
  c.field = toy_field();
  c.steps = 6;
  c.batch = 2;
  c.rays_per_item = 32;
  c.eval_every = 3;
  DatasetConfig synth;
  const fs::path csv = fs::temp_directory_path() / "semnerf_glo_loss.csv";
  const Checkpoint full = pretrain_decoder(c, &data, synth, {csv, {}, {}});
  CHECK(full.tensor("latents").rows == 12);
  std::ifstream in(csv);
  int lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  CHECK(lines == 7);

  // 3 steps + resume for 3 more equals 6 straight steps.
  c.steps = 3;
  const Checkpoint half = pretrain_decoder(c, &data, synth, {});
  c.steps = 6;
  const Checkpoint resumed = pretrain_decoder(c, &data, synth, {}, nullptr, &half);
  CHECK(resumed.meta["decoder_hash"] == full.meta["decoder_hash"]);
  CHECK(resumed.tensors == full.tensors);

  c.mode = "adversarial";
  c.steps = 2;
  c.region = 8;
  c.discriminator.channels = {4, 8};
  TrainReport rep;
  const Checkpoint adv = pretrain_decoder(c, &data, synth, {}, &rep);
  CHECK(rep.history.size() == 2);
  CHECK(std::isfinite(rep.history.back().discriminator));
  CHECK(adv.has("disc.out.weight"));
  fs::remove(csv);
}

TEST_CASE("encoder training keeps the decoder frozen and is reproducible") {
  TrainingSet data = TrainingSet::load(toy_dataset() / "train");
  DecoderTrainConfig dc;
  dc.mode = "glo";
  dc.field = toy_field();
  dc.steps = 2;
  dc.batch = 2;
  dc.rays_per_item = 16;
  dc.eval_every = 0;
  const Checkpoint decoder = pretrain_decoder(dc, &data, DatasetConfig{}, {});

  EncoderTrainConfig ec;
  ec.encoder.resolution = 16;
  ec.encoder.patch = 4;
  ec.encoder.dim = 16;
  ec.encoder.blocks = 1;
  ec.steps = 4;
  ec.batch = 2;
  ec.gan_batch = 1;
  ec.region = 8;
  ec.render_steps = 8;
  ec.average_samples = 64;
  ec.hash_check_every = 1;
  ec.schedule.total_steps = 4;
  ec.discriminator.channels = {4, 8};
  data.prepare_inputs(16, 3);

  TrainReport rep;
  const Checkpoint a = train_encoder(ec, data, decoder, {}, &rep);
  CHECK(rep.decoder_hash == decoder.meta["decoder_hash"].get<std::string>());
  CHECK(a.kind == "model");
  CHECK(a.has("averages.gamma"));
  CHECK(a.tensor("averages.beta").rows == 3);
  CHECK(a.config["labels"].size() == 6);
  for (const auto& r : rep.history) {
    CHECK(std::isfinite(r.total));
    CHECK(r.rec >= 0);
    CHECK(r.perceptual >= 0);
    CHECK(r.reg >= 0);
    CHECK(r.gan >= 0);
  }
  // The zero-initialized head gives zero offsets at the first step.
  CHECK(rep.history.front().reg == 0.0);
  CHECK(rep.history.back().reg > 0.0);

  const Checkpoint b = train_encoder(ec, data, decoder, {});
  CHECK(a.tensors == b.tensors);

  ec.steps = 2;
  const Checkpoint half = train_encoder(ec, data, decoder, {});
  ec.steps = 4;
  const Checkpoint resumed = train_encoder(ec, data, decoder, {}, nullptr, &half);
  CHECK(resumed.tensors == a.tensors);
}

TEST_CASE("encoder gradients reach every parameter through the renderer") {
  TrainingSet data = TrainingSet::load(toy_dataset() / "train", 2);
  data.prepare_inputs(16, 3);
  const SceneField<float> field = SceneField<float>(toy_field()).frozen();
  EncoderConfig ecfg = EncoderConfig::for_field(toy_field(), 6);
  ecfg.resolution = 16;
  ecfg.patch = 4;
  ecfg.dim = 8;
  ecfg.blocks = 1;
  ecfg.zero_init_head = false;
  const InversionEncoder<float> enc(ecfg);
  const ad::Var<float> off = enc.forward(ad::constant<float>(stack_inputs<float>(data.inputs)));
  const std::vector<RegionSpec> regions(2, RegionSpec::full(16, 16, 6, 6));
  RenderOptions o;
  o.steps = 8;
  const ad::Var<float> img = render_regions(field, off, std::span(data.poses), regions, o);
  const ad::Var<float> loss = rec_loss(ad::constant<float>(crop_batch<float>(
                                           std::vector<const Image*>{&data.images[0], &data.images[1]}, regions)),
                                       img);
  const auto grads = ad::grad(loss, enc.parameters());
  for (const auto& g : grads) {
    CHECK(g.value().allFinite());
  }
  double total = 0;
  for (const auto& g : grads) total += g.value().cwiseAbs().sum();
  CHECK(total > 0.0);
}

TEST_CASE("discriminator separates a frozen generator from real images") {
  TrainingSet data = TrainingSet::load(toy_dataset() / "train");
  const SceneField<float> gen(toy_field());
  const int g = 16;
  // Fixed pools of real and generated full frames.
  std::vector<ad::Matrix<float>> reals, fakes;
  Rng rng(8);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const RegionSpec full = RegionSpec::full(16, 16);
    reals.push_back(crop_batch<float>(std::vector<const Image*>{&data.images[i]}, std::vector<RegionSpec>{full}));
    std::vector<double> z(toy_field().latent_dim);
    for (auto& v : z) v = normal(rng);
    RenderOptions o;
    o.steps = 16;
    const RenderedImage img = render(gen, gen.map_latent(z), PosePrior{}.sample(rng), full, o);
    ad::Matrix<float> row(1, g * g * 3);
    for (int k = 0; k < row.size(); ++k) row(0, k) = img.color.data[k];
    fakes.push_back(row);
  }
  auto stack = [](const std::vector<ad::Matrix<float>>& rows) {
    ad::Matrix<float> m(static_cast<ad::Index>(rows.size()), rows[0].cols());
    for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<ad::Index>(i)) = rows[i];
    return m;
  };
  const ad::Matrix<float> real_all = stack(reals), fake_all = stack(fakes);

  const PatchDiscriminator<float> d;
  Adam<float> opt(d.named_parameters(), {2e-5, 0.0, 0.99, 1e-8});
  const Scorer<float> scorer = [&](const ad::Var<float>& x) { return d(x, g, g); };
  auto accuracy = [&] {
    ad::NoGradGuard guard;
    const auto r = d(ad::constant<float>(real_all), g, g).value();
    const auto f = d(ad::constant<float>(fake_all), g, g).value();
    return ((r.array() > 0).count() + (f.array() < 0).count()) / static_cast<double>(r.size() + f.size());
  };
  int reached = -1;
  for (int step = 0; step < 500 && reached < 0; ++step) {
    const auto t = gan_losses<float>(ad::constant<float>(real_all), ad::constant<float>(fake_all), scorer, 10.0);
    opt.step(ad::grad(ad::add(t.discriminator, t.r1), opt.vars()));
    if (accuracy() > 0.9) reached = step;
  }
  MESSAGE("discriminator accuracy above 0.9 at step " << reached);
  CHECK(reached >= 0);
}
