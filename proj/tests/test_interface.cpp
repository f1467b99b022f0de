#include <httplib.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "doctest.h"
#include "fake_cifar.hpp"
#include "properties.hpp"
#include "protnet/image_io.hpp"
#include "protnet/interface.hpp"
#include "scratch.hpp"
#include "synthetic.hpp"

using namespace protnet;
namespace fs = std::filesystem;

namespace {

ExperimentConfig toy_experiment(const fs::path& out, std::size_t classes = 3) {
  ExperimentConfig c;
  c.transform_net = testing::toy_transform(1, 4);
  c.classifier = testing::toy_classifier(classes);
  c.train.epochs = 2;
  c.train.batch_size = 16;
  c.train.lr_milestones = {};
  c.train.seed = 3;
  c.attack.epochs = 2;
  c.attack.batch_size = 8;
  c.attack.lr_milestones = {};
  c.attack.pair_count = 16;
  c.attack.eval_count = 6;
  c.eval.grid_images = 3;
  c.output_dir = out;
  return c;
}

fs::path save_h(const fs::path& path, std::uint64_t seed = 1) {
  auto h = build_transform_net(testing::toy_transform(1, 4), seed);
  Checkpoint ck;
  add_network(ck, "h", h);
  save_checkpoint(ck, path);
  return path;
}

std::vector<fs::path> write_inputs(const fs::path& dir, std::size_t n) {
  fs::create_directories(dir);
  const ImageSet set = testing::synthetic_images(n, 3, 11, 8);
  std::vector<fs::path> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(dir / ("img" + std::to_string(i) + ".png"));
    write_png(out.back(), set.get(i).pixels, 8);
  }
  return out;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PROTNET_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string expect_config_error(const std::string& text) {
  try {
    parse_experiment_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  FAIL("expected ConfigError for " << text);
  return {};
}

}  // namespace

TEST_CASE("experiment config is strict and names the offending key") {
  CHECK(expect_config_error(R"({"trian": {}})").find("trian") != std::string::npos);
  CHECK(expect_config_error(R"({"train": {"alpah": 0.1}})").find("alpah") != std::string::npos);
  CHECK(expect_config_error(R"({"eval": {"peek": 1}})").find("peek") != std::string::npos);
  expect_config_error(R"({"train": {"epochs": "ten"}})");
  expect_config_error(R"({"train": )");
  expect_config_error(R"({"feature": {"source": "pixels"}})");
  expect_config_error(R"({"alpha_sweep": [0.1, -1]})");

  const ExperimentConfig d = parse_experiment_config("{}");
  CHECK(d.train.alpha == 0.005);
  CHECK(d.train.epochs == 200);
  CHECK(d.output_dir == "runs/default");
  CHECK_THROWS_AS(load_experiment_config("/nonexistent/exp.json"), FileError);
}

TEST_CASE("config round-trips and overrides take precedence") {
  const testing::ScratchDir tmp("cfg");
  ExperimentConfig c = toy_experiment(tmp / "out");
  c.alpha_sweep = {0.0, 0.01};
  c.data.subset = SplitSizes{40, 20, 20};
  const std::string text = nlohmann::json(c).dump();
  testing::write_file(tmp / "exp.json", std::vector<std::uint8_t>(text.begin(), text.end()));
  ExperimentConfig back = load_experiment_config(tmp / "exp.json");
  CHECK(config_digest(back) == config_digest(c));
  CHECK(back.data.subset->val == 20);

  apply_overrides(back, Overrides{9, tmp / "elsewhere"});
  CHECK(back.train.seed == 9);
  CHECK(back.attack.seed == 9);
  CHECK(back.output_dir == tmp / "elsewhere");
  CHECK(config_digest(back) != config_digest(c));
  ExperimentConfig same = c;
  apply_overrides(same, Overrides{});
  CHECK(config_digest(same) == config_digest(c));
}

TEST_CASE("cmd_train writes metrics, the best checkpoint and a run manifest") {
  const testing::ScratchDir tmp("train");
  const ExperimentConfig cfg = toy_experiment(tmp / "run");
  const DatasetSplit data = testing::synthetic_split(48, 16, 16, 3, 5, 8);
  std::size_t epochs_seen = 0;
  const auto out = cmd_train(cfg, data, {}, [&](const EpochRecord&) { ++epochs_seen; });
  REQUIRE(out.size() == 1);
  const TrainSummary& s = out.front();
  CHECK(epochs_seen == 2);
  CHECK(s.records.size() == 2);
  CHECK(line_count(s.metrics_csv) == 3);
  CHECK(s.best_epoch == s.records[best_record_index(s.records)].epoch);
  const Checkpoint best = load_checkpoint(s.best_checkpoint);
  CHECK(has_network(best, "h"));
  CHECK(has_network(best, "psi"));
  std::ifstream in(s.run_manifest);
  const auto j = nlohmann::json::parse(in);
  CHECK(j["best_epoch"] == s.best_epoch);
  CHECK(j["config_digest"] == config_digest(cfg));
  CHECK(j["best_checkpoint_sha256"] == sha256_hex(read_bytes(s.best_checkpoint)));

  ExperimentConfig sweep = cfg;
  sweep.train.epochs = 1;
  sweep.alpha_sweep = {0.0, 0.01};
  sweep.output_dir = tmp / "sweep";
  const auto runs = cmd_train(sweep, data);
  REQUIRE(runs.size() == 2);
  CHECK(runs[0].alpha == 0.0);
  CHECK(runs[1].alpha == 0.01);
  CHECK(fs::exists(tmp / "sweep" / "alpha_0" / "best.ckpt"));
  CHECK(fs::exists(tmp / "sweep" / "alpha_0.01" / "best.ckpt"));

  ExperimentConfig wrong = cfg;
  wrong.classifier.classes = 5;
  CHECK_THROWS_AS(cmd_train(wrong, data), ConfigError);
  ExperimentConfig frozen = cfg;
  frozen.train.joint = false;
  CHECK_THROWS_AS(cmd_train(frozen, data), ConfigError);
  ExperimentConfig unknown = cfg;
  unknown.train.dataset = "svhn";
  CHECK_THROWS_AS(load_experiment_data(unknown), ConfigError);
}

TEST_CASE("cmd_protect writes one image per input plus a grid, reproducibly") {
  const testing::ScratchDir tmp("protect");
  const fs::path ckpt = save_h(tmp / "h.ckpt");
  const auto inputs = write_inputs(tmp / "in", 10);
  const auto written = cmd_protect(ckpt, inputs, tmp / "a");
  REQUIRE(written.size() == 11);
  CHECK(written.back() == tmp / "a" / "grid.png");
  const auto h = load_transform_net(load_checkpoint(ckpt));
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(written[i] == tmp / "a" / inputs[i].filename());
    const Tensor<float> y = read_png(written[i]);
    CHECK(y.data == quantize(forward_transform(h, read_png(inputs[i])), 16).data);
  }
  const Grid grid = read_grid(written.back());
  REQUIRE(grid.rows.size() == 2);
  CHECK(grid.rows[0].label == "plain");
  CHECK(grid.rows[1].images.size() == 10);

  cmd_protect(ckpt, inputs, tmp / "b");
  for (const auto& p : written) CHECK(read_bytes(p) == read_bytes(tmp / "b" / p.filename()));

  auto bytes = read_bytes(ckpt);
  bytes[bytes.size() / 2] ^= 0x01;
  write_bytes(tmp / "bad.ckpt", bytes);
  CHECK_THROWS_AS(cmd_protect(tmp / "bad.ckpt", inputs, tmp / "c"), SerializationError);

  const std::vector<fs::path> missing{inputs[0], tmp / "nope1.png", tmp / "nope2.png"};
  try {
    cmd_protect(ckpt, missing, tmp / "d");
    FAIL("expected FileError");
  } catch (const FileError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("nope1.png") != std::string::npos);
    CHECK(msg.find("nope2.png") != std::string::npos);
  }
  CHECK_THROWS_AS(cmd_protect(ckpt, std::vector<fs::path>{}, tmp / "e"), DomainError);
}

TEST_CASE("cmd_attack and cmd_eval on a toy run") {
  const testing::ScratchDir tmp("attack_eval");
  const ExperimentConfig cfg = toy_experiment(tmp / "run");
  const DatasetSplit data = testing::synthetic_split(48, 16, 16, 3, 6, 8);
  const fs::path best = cmd_train(cfg, data).front().best_checkpoint;

  std::size_t calls = 0;
  const AttackSummary a = cmd_attack(best, cfg, data, [&](std::size_t, double) { ++calls; });
  CHECK(calls == 2);
  CHECK(a.report.psnr_values.size() == 6);
  CHECK(a.report.box.n + a.report.box.excluded == 6);
  CHECK(fs::exists(a.g_checkpoint));
  CHECK(fs::exists(a.report_dir / "report.json"));
  CHECK(fs::exists(a.report_dir / "psnr.txt"));
  CHECK(read_grid(a.report_dir / "grid.png").rows.size() == 3);
  const PairManifest pm = read_pair_manifest(a.report_dir / "pairs.json");
  CHECK(pm.count == 16);
  CHECK(pm.h_digest == sha256_hex(read_bytes(best)));
  CHECK_THROWS_AS(cmd_attack(tmp / "missing.ckpt", cfg, data), FileError);

  const EvalReport r = cmd_eval(best, best, cfg, data);
  REQUIRE(r.accuracy_percent.has_value());
  CHECK(*r.accuracy_percent >= 0.0);
  CHECK(*r.accuracy_percent <= 100.0);
  CHECK(r.psnr_values.size() == 16);
  CHECK(fs::exists(cfg.output_dir / "eval" / "report.json"));
  const auto psi = load_classifier(load_checkpoint(best));
  const auto h = load_transform_net(load_checkpoint(best));
  CHECK(*r.accuracy_percent == accuracy(h, psi, data.test));

  const DatasetSplit five = testing::synthetic_split(10, 5, 5, 5, 6, 8);
  CHECK_THROWS_AS(cmd_eval(best, best, cfg, five), ConfigError);
}

TEST_CASE("classifier service answers valid requests and rejects bad ones") {
  auto psi = build_classifier(testing::toy_classifier(3), 4);
  const auto h = build_transform_net(testing::toy_transform(1, 4), 5);
  std::vector<std::string> bodies;
  std::mutex mu;
  ServiceOptions so;
  so.max_payload = 64 << 10;
  so.on_request = [&](const std::string& body) {
    std::lock_guard lock(mu);
    bodies.push_back(body);
  };
  const std::string digest = classifier_digest(psi);
  ClassifierService service(psi, so);
  const int port = service.start();
  const std::string address = "127.0.0.1:" + std::to_string(port);
  CHECK(service.digest() == digest);

  httplib::Client cli("127.0.0.1", port);
  auto health = cli.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 200);

  const ImageSet set = testing::synthetic_images(10, 3, 8, 8);
  std::vector<Tensor<float>> images;
  for (std::size_t i = 0; i < set.size(); ++i) images.push_back(set.get(i).pixels);

  const ClassifyResponse one = submit_png(address, protect_to_png(h, images[0]));
  REQUIRE(one.probabilities.size() == 3);
  double sum = 0.0;
  for (double p : one.probabilities) {
    CHECK(p >= 0.0);
    sum += p;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(one.label == static_cast<int>(argmax(one.probabilities)));
  CHECK(one.model_digest == digest);

  // The body on the wire is the quantized protected raster, not the plain image.
  REQUIRE(bodies.size() == 1);
  const auto wire = decode_png(std::span(reinterpret_cast<const std::uint8_t*>(bodies[0].data()),
                                         bodies[0].size()));
  CHECK(wire.data == quantize(forward_transform(h, images[0]), 16).data);
  CHECK(wire.data != quantize(images[0], 16).data);

  // Client path matches the in-process reference, in order.
  const auto remote = client_protect_and_submit(h, images, address);
  REQUIRE(remote.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    const ClassifyResponse local = local_pipeline(h, psi, images[i], digest);
    CHECK(remote[i].label == local.label);
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(std::abs(remote[i].probabilities[k] - local.probabilities[k]) <= 1e-5);
    }
  }

  auto png = protect_to_png(h, images[0]);
  const std::string truncated(png.begin(), png.begin() + static_cast<long>(png.size() / 2));
  auto bad = cli.Post("/classify", truncated, "image/png");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  CHECK_THROWS_AS(submit_png(address, std::vector<std::uint8_t>(png.begin(), png.begin() + 20)),
                  TransportError);

  const std::string huge(so.max_payload + 1024, 'x');
  auto big = cli.Post("/classify", huge, "image/png");
  REQUIRE(big);
  CHECK(big->status == 413);

  Tensor<float> gray(Shape{1, 1, 8, 8}, 0.5f);
  auto wrong = cli.Post("/classify", std::string(reinterpret_cast<const char*>(encode_png(gray).data()),
                                                 encode_png(gray).size()),
                        "image/png");
  REQUIRE(wrong);
  CHECK(wrong->status == 400);

  auto still = cli.Get("/health");
  REQUIRE(still);
  CHECK(still->status == 200);
  service.stop();

  ClientOptions quick;
  quick.attempts = 2;
  quick.retry_delay_ms = 1;
  quick.timeout_s = 2;
  try {
    submit_png(address, png, quick);
    FAIL("expected TransportError");
  } catch (const TransportError& e) {
    CHECK(std::string(e.what()).find("after 2 attempts") != std::string::npos);
  }
}

TEST_CASE("command-line exit codes") {
  const testing::ScratchDir tmp("cli");
  CHECK(run_cli("") == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("protect --out x") == 2);

  testing::write_file(tmp / "bad.json", {'{', '"', 'x', '"', ':', '1', '}'});
  CHECK(run_cli("train --config " + (tmp / "bad.json").string()) == 2);
  CHECK(run_cli("train --config " + (tmp / "missing.json").string()) == 3);

  const fs::path ckpt = save_h(tmp / "h.ckpt");
  const auto inputs = write_inputs(tmp / "in", 2);
  CHECK(run_cli("protect --checkpoint " + ckpt.string() + " --out " + (tmp / "o").string() + " " +
                inputs[0].string()) == 0);
  CHECK(fs::exists(tmp / "o" / "img0.png"));
  CHECK(run_cli("protect --checkpoint " + ckpt.string() + " --out " + (tmp / "o").string() + " " +
                (tmp / "nope.png").string()) == 3);
  auto bytes = read_bytes(ckpt);
  bytes[bytes.size() / 2] ^= 0x01;
  write_bytes(tmp / "bad.ckpt", bytes);
  CHECK(run_cli("protect --checkpoint " + (tmp / "bad.ckpt").string() + " --out " +
                (tmp / "o").string() + " " + inputs[0].string()) == 4);
  write_png(tmp / "gray.png", Tensor<float>(Shape{1, 1, 8, 8}, 0.5f), 8);
  CHECK(run_cli("protect --checkpoint " + ckpt.string() + " --out " + (tmp / "o").string() + " " +
                (tmp / "gray.png").string()) == 7);

  // A port that was just released: nothing is listening there.
  int port = 0;
  {
    ClassifierService s(build_classifier(testing::toy_classifier(3), 1));
    port = s.start();
  }
  CHECK(run_cli("submit --checkpoint " + ckpt.string() + " --server 127.0.0.1:" +
                std::to_string(port) + " " + inputs[0].string()) == 6);
}

TEST_CASE("command-line train, eval and attack on a CIFAR-10 layout") {
  const testing::ScratchDir tmp("cli_run");
  testing::make_cifar10_dir(tmp / "data");
  ExperimentConfig cfg = toy_experiment(tmp / "run", 10);
  cfg.data.root = tmp / "data";
  cfg.data.subset = SplitSizes{40, 20, 20};
  cfg.train.epochs = 1;
  cfg.attack.epochs = 1;
  const auto write_config = [&](const fs::path& p, const ExperimentConfig& c) {
    const std::string text = nlohmann::json(c).dump(2);
    testing::write_file(p, std::vector<std::uint8_t>(text.begin(), text.end()));
    return p.string();
  };
  const std::string conf = write_config(tmp / "exp.json", cfg);
  CHECK(run_cli("train --config " + conf) == 0);
  const fs::path best = tmp / "run" / "best.ckpt";
  REQUIRE(fs::exists(best));
  CHECK(run_cli("eval --checkpoint " + best.string() + " --config " + conf) == 0);
  CHECK(fs::exists(tmp / "run" / "eval" / "report.json"));
  CHECK(run_cli("attack --checkpoint " + best.string() + " --config " + conf + " --out " +
                (tmp / "atk").string()) == 0);
  CHECK(fs::exists(tmp / "atk" / "attack" / "g.ckpt"));

  ExperimentConfig hot = cfg;
  hot.train.base_lr = 1e30;
  hot.output_dir = tmp / "hot";
  CHECK(run_cli("train --config " + write_config(tmp / "hot.json", hot)) == 5);

  ExperimentConfig nowhere = cfg;
  nowhere.data.root = tmp / "no_data";
  CHECK(run_cli("train --config " + write_config(tmp / "nowhere.json", nowhere)) == 3);
}
