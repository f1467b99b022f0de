// protnet: command-line front end.
//
//   protnet train   --config exp.json [--seed N] [--out DIR] [--checkpoint PSI.ckpt]
//   protnet protect --checkpoint H.ckpt --out DIR IMAGE.png...
//   protnet attack  --checkpoint H.ckpt --config exp.json [--seed N] [--out DIR]
//   protnet eval    --checkpoint H.ckpt [--psi PSI.ckpt] --config exp.json [--out DIR]
//   protnet serve   --checkpoint PSI.ckpt [--host H] [--port P]
//   protnet submit  --checkpoint H.ckpt --server HOST:PORT IMAGE.png...
//
// Exit status: 0 ok, 2 config, 3 file, 4 serialization, 5 divergence,
// 6 transport, 7 domain, 1 anything else.

#include <CLI11.hpp>

#include <csignal>
#include <iomanip>
#include <iostream>

#include "protnet/image_io.hpp"
#include "protnet/interface.hpp"

namespace {

using namespace protnet;

ExperimentConfig config_from(const std::string& path, const Overrides& o) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : load_experiment_config(path);
  apply_overrides(cfg, o);
  cfg.validate();
  return cfg;
}

void print_epoch(const EpochRecord& r) {
  std::cout << "epoch " << r.epoch << "  lr " << r.lr << "  train " << r.train_total
            << " (class " << r.train_class << ", feat " << r.train_feat << ")  val "
            << r.val_total << "  acc " << std::fixed << std::setprecision(2) << r.val_accuracy
            << "%" << std::defaultfloat << std::setprecision(6) << std::endl;
}

void print_report(const EvalReport& r) {
  if (r.accuracy_percent) std::cout << "accuracy " << *r.accuracy_percent << "%\n";
  std::cout << "psnr n=" << r.psnr_values.size() << " median " << r.box.median << " dB (q1 "
            << r.box.q1 << ", q3 " << r.box.q3 << ", whiskers " << r.box.whisker_low << " .. "
            << r.box.whisker_high << ", infinite " << r.box.excluded << ")\n";
}

ClassifierService* g_service = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learnable visual image protection: train, protect, attack, evaluate, serve."};
  app.require_subcommand(1);

  std::string config, checkpoint, psi_checkpoint, out, server, host = "127.0.0.1";
  std::optional<std::uint64_t> seed;
  int port = 8080;
  std::vector<std::string> images;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "experiment configuration (JSON)");
    sub->add_option("--seed", seed, "overrides train.seed and attack.seed");
    sub->add_option("--out", out, "output directory (overrides output_dir)");
  };

  auto* train = app.add_subcommand("train", "train h and psi, keep the best checkpoint");
  add_common(train);
  train->add_option("--checkpoint", checkpoint, "initial psi (required when train.joint=false)");

  auto* protect = app.add_subcommand("protect", "protect PNG images with a trained h");
  protect->add_option("--checkpoint", checkpoint, "checkpoint holding h")->required();
  protect->add_option("--out", out, "output directory")->required();
  protect->add_option("images", images, "input PNG files")->required();

  auto* attack = app.add_subcommand("attack", "train an inverse network against h");
  add_common(attack);
  attack->add_option("--checkpoint", checkpoint, "checkpoint holding h")->required();

  auto* eval = app.add_subcommand("eval", "accuracy and PSNR of protected test images");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint holding h (and psi)")->required();
  eval->add_option("--psi", psi_checkpoint, "checkpoint holding psi, if separate");

  auto* serve = app.add_subcommand("serve", "serve psi over HTTP (POST /classify)");
  serve->add_option("--checkpoint", checkpoint, "checkpoint holding psi")->required();
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port");

  auto* submit = app.add_subcommand("submit", "protect images locally and classify remotely");
  submit->add_option("--checkpoint", checkpoint, "checkpoint holding h")->required();
  submit->add_option("--server", server, "HOST:PORT of a running service")->required();
  submit->add_option("images", images, "input PNG files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  Overrides o;
  o.seed = seed;
  if (!out.empty()) o.out = out;

  try {
    if (*train) {
      const ExperimentConfig cfg = config_from(config, o);
      const DatasetSplit data = load_experiment_data(cfg);
      std::optional<std::filesystem::path> init;
      if (!checkpoint.empty()) init = checkpoint;
      for (const auto& s : cmd_train(cfg, data, init, print_epoch)) {
        std::cout << "alpha " << s.alpha << ": best epoch " << s.best_epoch << " (val "
                  << s.best_val_total << ") -> " << s.best_checkpoint.string() << "\n";
      }
    } else if (*protect) {
      std::vector<std::filesystem::path> inputs(images.begin(), images.end());
      for (const auto& p : cmd_protect(checkpoint, inputs, out)) std::cout << p.string() << "\n";
    } else if (*attack) {
      const ExperimentConfig cfg = config_from(config, o);
      const DatasetSplit data = load_experiment_data(cfg);
      const AttackSummary s = cmd_attack(checkpoint, cfg, data, [](std::size_t e, double mse) {
        std::cout << "attack epoch " << e << "  mse " << mse << std::endl;
      });
      print_report(s.report);
      std::cout << "g -> " << s.g_checkpoint.string() << "\nreport -> " << s.report_dir.string()
                << "\n";
    } else if (*eval) {
      const ExperimentConfig cfg = config_from(config, o);
      const DatasetSplit data = load_experiment_data(cfg);
      print_report(cmd_eval(checkpoint, psi_checkpoint.empty() ? checkpoint : psi_checkpoint, cfg,
                            data));
    } else if (*serve) {
      ServiceOptions so;
      so.host = host;
      so.port = port;
      ClassifierService service(load_classifier(load_checkpoint(checkpoint)), so);
      g_service = &service;
      std::signal(SIGINT, [](int) {
        if (g_service) g_service->stop();
      });
      std::cout << "serving " << service.digest() << " on " << host << ":" << port << std::endl;
      service.run();
    } else if (*submit) {
      const TransformNet<float> h = load_transform_net(load_checkpoint(checkpoint));
      std::vector<Tensor<float>> inputs;
      for (const auto& p : images) inputs.push_back(read_png(p));
      const auto responses = client_protect_and_submit(h, inputs, server);
      nlohmann::json j = nlohmann::json::array();
      for (std::size_t i = 0; i < responses.size(); ++i) {
        auto r = to_json(responses[i]);
        r["image"] = images[i];
        j.push_back(r);
      }
      std::cout << j.dump(2) << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
