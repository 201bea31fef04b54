#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <thread>

#include "semnerf/adversarial_training.hpp"
#include "semnerf/errors.hpp"
#include "semnerf/inference_service.hpp"

#include <httplib.h>

using namespace semnerf;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

FieldConfig tiny_field() {
  FieldConfig f;
  f.layers = 3;
  f.width = 16;
  f.latent_dim = 8;
  f.mapping_width = 16;
  f.mapping_layers = 2;
  f.seed = 3;
  return f;
}

Checkpoint tiny_checkpoint() {
  const FieldConfig fc = tiny_field();
  const SceneField<float> field(fc);
  EncoderConfig ec = EncoderConfig::for_field(fc, kSynthLabelCount);
  ec.resolution = 16;
  ec.dim = 16;
  ec.blocks = 1;
  ec.zero_init_head = false;
  ec.seed = 5;
  const InversionEncoder<float> encoder(ec);
  Rng rng(9);
  const StyleAverages<float> averages = compute_style_averages(field, 256, rng);

  Checkpoint c;
  c.kind = "model";
  store_field(c, field);
  c.config["encoder"] = ec;
  c.config["labels"] = LabelTable::synthetic().names;
  store_parameters<float>(c, "encoder.", encoder.named_parameters());
  store_averages(c, averages);
  return c;
}

std::shared_ptr<const Model> tiny_model() {
  static const std::shared_ptr<const Model> m = std::make_shared<Model>(Model::from_checkpoint(tiny_checkpoint()));
  return m;
}

SemanticMask face_mask(int size = 24, int eye_col = 8) {
  SemanticMask m{ByteGrid(size, size, kBackground), LabelTable::synthetic()};
  for (int r = 4; r < size - 4; ++r)
    for (int c = 4; c < size - 4; ++c) m.labels.at(r, c) = kSkin;
  for (int r = 8; r < 11; ++r)
    for (int c = eye_col; c < eye_col + 3; ++c) m.labels.at(r, c) = kEye;
  for (int c = 9; c < 15; ++c) m.labels.at(16, c) = kMouth;
  return m;
}

std::string mask_b64(const SemanticMask& m) { return base64_encode(encode_png(m.labels)); }

CameraPose pose(double yaw, double pitch) {
  CameraPose p;
  p.yaw = yaw;
  p.pitch = pitch;
  return p;
}

ViewOptions small_view() {
  ViewOptions v;
  v.size = 8;
  v.steps = 12;
  return v;
}

json body(const HttpResult& r) { return json::parse(r.body); }

struct FakeClock {
  std::shared_ptr<StyleCache::Clock::time_point> now =
      std::make_shared<StyleCache::Clock::time_point>(StyleCache::Clock::time_point{});
  std::function<StyleCache::Clock::time_point()> fn() const {
    return [n = now] { return *n; };
  }
  void advance(double seconds) {
    *now += std::chrono::duration_cast<StyleCache::Clock::duration>(std::chrono::duration<double>(seconds));
  }
};

}  // namespace

TEST_CASE("model loads from a model checkpoint and rejects other kinds") {
  Checkpoint c = tiny_checkpoint();
  const Model m = Model::from_checkpoint(c);
  CHECK(m.labels == LabelTable::synthetic());
  CHECK(m.checkpoint_hash.size() == 64);
  CHECK(m.field.config().layers == 3);

  c.kind = "decoder";
  CHECK_THROWS_AS(Model::from_checkpoint(c), Error);

  Checkpoint bad = tiny_checkpoint();
  bad.config["labels"] = std::vector<std::string>{"background", "skin"};
  try {
    Model::from_checkpoint(bad);
    FAIL("expected a data error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kData);
  }

  const fs::path path = fs::temp_directory_path() / "semnerf_infer_model.ckpt";
  save_checkpoint(path, tiny_checkpoint());
  const Model loaded = Model::load(path);
  CHECK(loaded.checkpoint_hash == sha256_file(path));
  CHECK_THROWS_AS(Model::load(fs::temp_directory_path() / "semnerf_no_such_model.ckpt"), Error);
  fs::remove(path);
}

TEST_CASE("encode_mask is deterministic, total, and names unknown labels") {
  const auto model = tiny_model();
  const StyleCode<float> a = encode_mask(*model, face_mask());
  CHECK(a == encode_mask(*model, face_mask()));
  CHECK(a.all_finite());
  CHECK_FALSE(a == encode_mask(*model, face_mask(24, 12)));

  const SemanticMask empty{ByteGrid(20, 20, kBackground), LabelTable::synthetic()};
  CHECK(encode_mask(*model, empty).all_finite());

  SemanticMask bad = face_mask();
  bad.labels.at(0, 0) = 9;
  try {
    encode_mask(*model, bad);
    FAIL("expected a request error");
  } catch (const RequestError& e) {
    CHECK(e.code() == "unknown_label");
    CHECK(std::string(e.what()).find('9') != std::string::npos);
  }
}

TEST_CASE("render_views maps poses to images in order and is deterministic") {
  const auto model = tiny_model();
  const StyleCode<float> style = encode_mask(*model, face_mask());
  const std::vector<CameraPose> poses = {pose(1.3, 1.5), pose(1.57, 1.57), pose(1.9, 1.6)};
  const auto views = render_views(*model, style, poses, small_view());
  REQUIRE(views.size() == 3);
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const auto single = render_views(*model, style, std::span(&poses[i], 1), small_view());
    CHECK(encode_png(single[0].color) == encode_png(views[i].color));
  }
  CHECK_FALSE(views[0].color == views[2].color);

  ViewOptions h = small_view();
  h.hierarchical = true;
  h.fine_steps = 8;
  const auto fine = render_views(*model, style, std::span(&poses[1], 1), h);
  CHECK_FALSE(fine[0].color == views[1].color);
}

TEST_CASE("style_mix blends only layers from k on") {
  const auto model = tiny_model();
  const StyleCode<float> c1 = encode_mask(*model, face_mask());
  const StyleCode<float> c2 = encode_mask(*model, face_mask(24, 12));
  const int L = c1.layers();

  StyleMixSpec spec;
  spec.seed = 42;
  spec.t = 0.0;
  spec.layer = 1;
  CHECK(style_mix(c1, spec, model->averages, model->field) == c1);

  spec.t = 1.0;
  const StyleCode<float> s1 = style_mix(c1, spec, model->averages, model->field);
  const StyleCode<float> s2 = style_mix(c2, spec, model->averages, model->field);
  CHECK(s1 == s2);
  CHECK_FALSE(s1 == c1);
  spec.seed = 43;
  CHECK_FALSE(style_mix(c1, spec, model->averages, model->field) == s1);
  spec.seed = 42;

  spec.t = 0.5;
  spec.layer = 2;
  const StyleCode<float> mid = style_mix(c1, spec, model->averages, model->field);
  CHECK(mid.gamma(0) == c1.gamma(0));
  CHECK(mid.beta(0) == c1.beta(0));
  for (int l = 1; l < L; ++l)
    for (int i = 0; i < c1.width(); ++i) {
      CHECK(mid.gamma(l)[i] == (c1.gamma(l)[i] + s1.gamma(l)[i]) * 0.5f);
      CHECK(mid.beta(l)[i] == (c1.beta(l)[i] + s1.beta(l)[i]) * 0.5f);
    }

  StyleMixSpec def;
  CHECK(def.first_layer(L) == L - 1);
  def.seed = 42;
  const StyleCode<float> d = style_mix(c1, def, model->averages, model->field);
  for (int l = 0; l < L - 2; ++l) CHECK(d.gamma(l) == c1.gamma(l));
  CHECK(d.gamma(L - 1) == s1.gamma(L - 1));

  for (int bad : {-1, L + 1}) {
    StyleMixSpec b;
    b.layer = bad;
    CHECK_THROWS_AS(style_mix(c1, b, model->averages, model->field), RequestError);
  }
  StyleMixSpec bt;
  bt.t = 1.5;
  CHECK_THROWS_AS(style_mix(c1, bt, model->averages, model->field), RequestError);
  StyleMixSpec bs;
  bs.space = "latent";
  CHECK_THROWS_AS(style_mix(c1, bs, model->averages, model->field), RequestError);

  StyleMixSpec psi0;
  psi0.layer = 1;
  psi0.psi = 0.0;
  CHECK(style_mix(c1, psi0, model->averages, model->field).flat() == model->averages.flat());
}

TEST_CASE("densities at shared points do not depend on the querying pose") {
  const auto model = tiny_model();
  const StyleCode<float> style = encode_mask(*model, face_mask());
  Rng rng(1);
  std::vector<Eigen::Vector3d> pts;
  for (int i = 0; i < 200; ++i) pts.emplace_back(uniform(rng, -.2, .2), uniform(rng, -.2, .2), uniform(rng, -.2, .2));
  const auto a = densities_from_pose(model->field, style, pose(1.2, 1.5), pts);
  const auto b = densities_from_pose(model->field, style, pose(2.0, 1.7), pts);
  CHECK(a == b);
}

TEST_CASE("palette labeling and mean IoU") {
  const auto& pal = synth_palette();
  const std::vector<Eigen::Vector3d> palette(pal.begin(), pal.end());
  Image img(2, 2);
  auto put = [&](int r, int c, const Eigen::Vector3d& v) {
    for (int k = 0; k < 3; ++k) img.at(r, c, k) = static_cast<float>(v[k] + 0.03);
  };
  put(0, 0, pal[kSkin]);
  put(0, 1, pal[kEye]);
  put(1, 0, pal[kBackground]);
  put(1, 1, pal[kNose]);
  const ByteGrid labels = labels_from_colors(img, palette);
  CHECK(labels.data == std::vector<std::uint8_t>{kSkin, kEye, kBackground, kNose});

  ByteGrid a(1, 4), b(1, 4);
  a.data = {0, 0, 1, 1};
  b.data = {0, 1, 1, 1};
  // label 0: 1/2, label 1: 2/3
  CHECK(mean_iou(a, b, 3) == doctest::Approx((0.5 + 2.0 / 3.0) / 2.0));
  CHECK(mean_iou(a, a, 3) == 1.0);
}

TEST_CASE("oracle IoU is 1 and evaluate reports the desk-scale metric set") {
  DatasetConfig cfg;
  cfg.n_train = 1;
  cfg.n_test = 3;
  cfg.seed = 11;
  cfg.render.image_size = 12;
  cfg.render.steps = 24;
  cfg.render.fine_steps = 24;
  const fs::path out = fs::temp_directory_path() / "semnerf_infer_eval";
  fs::remove_all(out);
  build_dataset(cfg, out);
  CHECK(oracle_mask_iou(cfg, out / "test", 1, 0) == 1.0);

  const auto model = tiny_model();
  EvalOptions opts;
  opts.view.steps = 8;
  opts.timing_renders = 5;
  const EvalReport rep = evaluate(*model, out / "test", opts);
  CHECK(rep.samples == 3);
  CHECK(std::isfinite(rep.psnr_mean));
  CHECK(rep.iou_mean >= 0.0);
  CHECK(rep.iou_mean <= 1.0);
  CHECK(rep.runtime_mean > 0.0);
  CHECK(rep.decoder_params_m == doctest::Approx(model->field.parameter_count() / 1e6));
  CHECK(rep.runtime_string().find("±") != std::string::npos);
  CHECK(rep.to_json().contains("encoder_params_m"));

  CHECK_THROWS_AS(evaluate(*model, out / "missing", opts), Error);
  fs::remove_all(out);
}

TEST_CASE("style cache expires handles by TTL") {
  FakeClock clock;
  StyleCache cache(10.0, 3, clock.fn());
  const StyleCode<float> s(2, 2);
  const std::string h = cache.put(s);
  CHECK(cache.get(h) == s);
  clock.advance(9.9);
  CHECK(cache.get(h) == s);
  clock.advance(0.2);
  try {
    cache.get(h);
    FAIL("expected expiry");
  } catch (const RequestError& e) {
    CHECK(e.code() == "handle_expired");
  }
  try {
    cache.get("nope");
    FAIL("expected unknown");
  } catch (const RequestError& e) {
    CHECK(e.code() == "unknown_handle");
  }
  std::set<std::string> seen;
  for (int i = 0; i < 5; ++i) seen.insert(cache.put(s));
  CHECK(seen.size() == 5);
}

TEST_CASE("service endpoints and error codes") {
  FakeClock clock;
  ServiceConfig cfg;
  cfg.handle_ttl_seconds = 30;
  cfg.max_resolution = 16;
  InferenceService svc(tiny_model(), cfg, clock.fn());

  const HttpResult health = svc.handle("GET", "/health", "");
  CHECK(health.status == 200);
  CHECK(body(health)["version"] == kServiceVersion);
  CHECK(body(health)["checkpoint_hash"] == tiny_model()->checkpoint_hash);

  const json labels = body(svc.handle("GET", "/labels", ""));
  REQUIRE(labels["labels"].size() == 6);
  CHECK(labels["labels"][2]["name"] == "eye");

  const HttpResult enc = svc.handle("POST", "/encode", json{{"mask", mask_b64(face_mask())}}.dump());
  REQUIRE(enc.status == 200);
  const std::string handle = body(enc)["handle"];

  json req = {{"handle", handle}, {"poses", {{1.57, 1.57}, {{"yaw", 1.3}, {"pitch", 1.5}}}}, {"size", 8}, {"steps", 10}};
  const HttpResult plain = svc.handle("POST", "/render", req.dump());
  REQUIRE(plain.status == 200);
  const json images = body(plain)["images"];
  REQUIRE(images.size() == 2);
  const Image decoded = decode_png_rgb(base64_decode(images[0]));
  CHECK(decoded.height == 8);

  json mixed0 = req;
  mixed0["mix"] = {{"seed", 7}, {"layer", 1}, {"t", 0.0}};
  CHECK(svc.handle("POST", "/render", mixed0.dump()).body == plain.body);
  json mixed1 = req;
  mixed1["mix"] = {{"seed", 7}, {"layer", 1}, {"t", 1.0}};
  CHECK(svc.handle("POST", "/render", mixed1.dump()).body != plain.body);

  json inline_mask = req;
  inline_mask.erase("handle");
  inline_mask["mask"] = mask_b64(face_mask());
  CHECK(svc.handle("POST", "/render", inline_mask.dump()).body == plain.body);

  InferenceService other(tiny_model(), cfg);
  CHECK(other.handle("POST", "/render", inline_mask.dump()).body == plain.body);

  json src = req;
  src["source_pose"] = {1.57, 1.57};
  const json with_src = body(svc.handle("POST", "/render", src.dump()));
  CHECK(with_src["source"] == images[0]);
  CHECK(with_src["images"] == images);

  json raw = req;
  raw["poses"] = {{1.57, 1.57}};
  const HttpResult png = svc.handle("POST", "/render/raw", raw.dump());
  CHECK(png.status == 200);
  CHECK(png.content_type == "image/png");
  CHECK(base64_encode(std::vector<std::uint8_t>(png.body.begin(), png.body.end())) == images[0]);

  const HttpResult mix = svc.handle("POST", "/mix", json{{"handle", handle}, {"seed", 3}, {"t", 0.5}}.dump());
  REQUIRE(mix.status == 200);
  CHECK(body(mix)["layer"] == 2);
  json via_mix = req;
  via_mix["handle"] = body(mix)["handle"];
  CHECK(svc.handle("POST", "/render", via_mix.dump()).status == 200);

  auto code_of = [&](const std::string& method, const std::string& path, const std::string& b) {
    const HttpResult r = svc.handle(method, path, b);
    return std::make_pair(r.status, body(r)["error"]["code"].get<std::string>());
  };
  using P = std::pair<int, std::string>;
  CHECK(code_of("POST", "/render", "{not json") == P{400, "malformed_json"});
  CHECK(code_of("POST", "/render", "[1,2]") == P{400, "malformed_json"});
  CHECK(code_of("POST", "/render", json{{"handle", handle}}.dump()) == P{400, "missing_field"});
  CHECK(code_of("POST", "/render", json{{"poses", {{1.5, 1.5}}}}.dump()) == P{400, "missing_field"});
  json big = req;
  big["size"] = 64;
  CHECK(code_of("POST", "/render", big.dump()) == P{400, "invalid_value"});
  json badpose = req;
  badpose["poses"] = {"front"};
  CHECK(code_of("POST", "/render", badpose.dump()) == P{400, "invalid_value"});
  json badt = req;
  badt["mix"] = {{"t", 2.0}};
  CHECK(code_of("POST", "/render", badt.dump()) == P{400, "invalid_value"});
  json badk = req;
  badk["mix"] = {{"layer", 4}};
  CHECK(code_of("POST", "/render", badk.dump()) == P{400, "invalid_value"});
  json many = req;
  many["poses"] = json::array();
  for (int i = 0; i < 20; ++i) many["poses"].push_back({1.57, 1.57});
  CHECK(code_of("POST", "/render", many.dump()) == P{413, "too_large"});
  CHECK(code_of("POST", "/encode", json{{"mask", "@@@@"}}.dump()) == P{400, "invalid_mask"});
  CHECK(code_of("POST", "/encode", json{{"mask", base64_encode(std::vector<std::uint8_t>{1, 2, 3})}}.dump()) ==
        P{400, "invalid_mask"});
  SemanticMask unknown = face_mask();
  unknown.labels.at(1, 1) = 17;
  const auto ul = code_of("POST", "/encode", json{{"mask", mask_b64(unknown)}}.dump());
  CHECK(ul == P{400, "unknown_label"});
  CHECK(code_of("POST", "/render", json{{"handle", "deadbeef"}, {"poses", {{1.5, 1.5}}}}.dump()) ==
        P{404, "unknown_handle"});
  CHECK(code_of("GET", "/render", "") == P{405, "method_not_allowed"});
  CHECK(code_of("POST", "/health", "") == P{405, "method_not_allowed"});
  CHECK(code_of("GET", "/nothing", "") == P{404, "not_found"});

  clock.advance(31.0);
  CHECK(code_of("POST", "/render", req.dump()) == P{410, "handle_expired"});
  CHECK(code_of("POST", "/mix", json{{"handle", handle}}.dump()) == P{410, "handle_expired"});
}

TEST_CASE("render failures return 5xx with a diagnostic id") {
  Checkpoint c = tiny_checkpoint();
  auto model = std::make_shared<Model>(Model::from_checkpoint(c));
  const auto params = model->field.named_parameters();
  ad::Matrix<float> w = params.back().second.value();
  w.setConstant(std::numeric_limits<float>::quiet_NaN());
  model->field.set_parameter(params.back().first, w);
  InferenceService svc(model, ServiceConfig{});
  const HttpResult r =
      svc.handle("POST", "/render", json{{"mask", mask_b64(face_mask())}, {"poses", {{1.57, 1.57}}}, {"size", 4}}.dump());
  CHECK(r.status == 500);
  const json e = body(r)["error"];
  CHECK(e["code"] == "render_failed");
  CHECK(e["diagnostic_id"].get<std::string>().size() == 16);
}

TEST_CASE("HTTP server answers over localhost") {
  ServiceConfig cfg;
  cfg.workers = 2;
  auto svc = std::make_shared<InferenceService>(tiny_model(), cfg);
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  std::thread t([&] { server.serve(); });
  httplib::Client client("127.0.0.1", port);
  for (int i = 0; i < 100 && !server.running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));

  auto health = client.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body)["checkpoint_hash"] == tiny_model()->checkpoint_hash);

  auto enc = client.Post("/encode", json{{"mask", mask_b64(face_mask())}}.dump(), "application/json");
  REQUIRE(enc);
  CHECK(enc->status == 200);
  const std::string handle = json::parse(enc->body)["handle"];
  auto png = client.Post("/render/raw", json{{"handle", handle}, {"poses", {{1.57, 1.57}}}, {"size", 8}}.dump(),
                         "application/json");
  REQUIRE(png);
  CHECK(png->status == 200);
  CHECK(png->get_header_value("Content-Type") == "image/png");
  const Image img = decode_png_rgb(std::vector<std::uint8_t>(png->body.begin(), png->body.end()));
  CHECK(img.width == 8);

  auto bad = client.Post("/render", "{", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  CHECK(json::parse(bad->body)["error"]["code"] == "malformed_json");

  server.stop();
  t.join();
}

TEST_CASE("base64 round trip") {
  for (std::size_t n : {0u, 1u, 2u, 3u, 4u, 5u, 100u}) {
    std::vector<std::uint8_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<std::uint8_t>(i * 37 + 11);
    CHECK(base64_decode(base64_encode(v)) == v);
  }
  CHECK(base64_encode(std::vector<std::uint8_t>{'M', 'a'}) == "TWE=");
  CHECK_THROWS_AS(base64_decode("abc"), Error);
}
