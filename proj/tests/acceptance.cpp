// Acceptance report: one line per criterion, PASS / FAIL / BLOCKED / SKIPPED.
//
//   acceptance [--only 1,2,3] [--data DIR] [--out DIR] [--full]
//
// Criteria 4, 5, 6 and 8 need the CIFAR-10 binary archives under --data (or
// $PROTNET_DATA, default ./data); without them they print BLOCKED. Criterion 7
// runs only with --full. Exit status: 1 if anything failed, 77 if everything
// selected was blocked or skipped, 0 otherwise.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "properties.hpp"
#include "protnet/image_io.hpp"
#include "protnet/interface.hpp"

using namespace protnet;
namespace fs = std::filesystem;

namespace {

constexpr int kSkipCode = 77;

// Criterion 2.
constexpr std::size_t kGradSamples = 256;
constexpr double kGradAlpha = 0.01;
constexpr double kGradTolerance = 1e-4;
// Criterion 4.
constexpr SplitSizes kDeskSplit{5000, 1000, 1000};
constexpr std::size_t kDeskEpochs = 20;
constexpr double kDeskAlpha = 0.005;
constexpr double kDeskMinAccuracy = 35.0;
// Criteria 5 and 6.
constexpr std::size_t kAttackEpochs = 50;
constexpr std::size_t kAttackPairs = 2000;
constexpr double kControlMinMedian = 25.0;
constexpr double kRobustMargin = 10.0;
// Criterion 7.
constexpr double kFullCifar10 = 91.72, kFullCifar10Tol = 1.5;
constexpr double kFullCifar100 = 70.78, kFullCifar100Tol = 2.0;
// Criterion 8.
constexpr std::size_t kServiceImages = 100;
constexpr double kServiceTolerance = 1e-5;
constexpr double kPayloadMaxPsnr = 15.0;

enum class Status { Pass, Fail, Blocked, Skipped };

struct Line {
  int id;
  std::string name;
  Status status;
  std::string detail;
};

const char* status_name(Status s) {
  switch (s) {
    case Status::Pass: return "PASS";
    case Status::Fail: return "FAIL";
    case Status::Blocked: return "BLOCKED";
    case Status::Skipped: return "SKIPPED";
  }
  return "?";
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

double mean_finite(const std::vector<double>& v) {
  double sum = 0.0;
  std::size_t n = 0;
  for (double x : v) {
    if (std::isfinite(x)) {
      sum += x;
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : kPsnrInfinity;
}

void log(const std::string& s) { std::cerr << "[acceptance] " << s << std::endl; }

// ------------------------------------------------------------ criteria 1-3

Line property_suite_line() {
  const auto suite = testing::property_suite(20240601);
  std::size_t passed = 0, cases = 0;
  std::string failures;
  for (const auto& prop : suite) {
    const testing::PropertyOutcome p = prop();
    cases += p.cases;
    if (p.ok) {
      ++passed;
    } else {
      failures += " [" + p.name + ": " + p.detail + "]";
    }
  }
  const bool ok = passed == suite.size();
  return {1, "property suite", ok ? Status::Pass : Status::Fail,
          std::to_string(passed) + "/" + std::to_string(suite.size()) + " properties, " +
              std::to_string(cases) + " cases" + failures};
}

Line gradcheck_line() {
  const testing::GradCheckResult r = testing::run_gradcheck(kGradSamples, 2024, kGradAlpha);
  const bool ok = r.checked >= 200 && r.max_rel_error < kGradTolerance;
  return {2, "gradient check", ok ? Status::Pass : Status::Fail,
          std::to_string(r.checked) + " parameters, max rel error " + fmt(r.max_rel_error, 3) +
              " (< " + fmt(kGradTolerance) + ")"};
}

Line schedule_line() {
  const TrainConfig recipe;
  const LrSchedule lr(recipe.base_lr, recipe.lr_milestones, recipe.lr_factor);
  std::string bad;
  for (std::size_t e = 1; e <= recipe.epochs; ++e) {
    const double want = e < 60 ? 0.1 : e < 120 ? 0.02 : e < 160 ? 0.004 : 0.0008;
    if (lr(e) != want && bad.empty()) {
      std::ostringstream os;
      os << std::setprecision(17) << " epoch " << e << ": " << lr(e) << " != " << want;
      bad = os.str();
    }
  }
  return {3, "lr schedule", bad.empty() ? Status::Pass : Status::Fail,
          bad.empty() ? "epochs 1-" + std::to_string(recipe.epochs) +
                            " equal 0.1 / 0.02 / 0.004 / 0.0008 exactly"
                      : "mismatch:" + bad};
}

// --------------------------------------------------------- CIFAR criteria

/// The default recipe scaled to 20 epochs: milestones keep their 0.3/0.6/0.8
/// positions.
ExperimentConfig desk_config(const fs::path& data_root, const fs::path& out) {
  ExperimentConfig c;
  c.data.root = data_root;
  c.data.subset = kDeskSplit;
  c.train.epochs = kDeskEpochs;
  c.train.lr_milestones = {6, 12, 16};
  c.train.alpha = kDeskAlpha;
  c.attack.epochs = kAttackEpochs;
  c.attack.pair_count = kAttackPairs;
  c.eval.grid_images = 10;
  c.output_dir = out;
  return c;
}

struct DeskRun {
  TrainSummary protect, plain;  // alpha = 0.005 and alpha = 0
  EvalReport protect_eval, plain_eval;
};

struct AttackRun {
  double median = 0.0;
  std::size_t n = 0;
};

AttackRun run_attack(const TransformNet<float>& h, const DatasetSplit& data,
                     const AttackConfig& ac) {
  const ImageSet pair_images = random_subset(data.train, kAttackPairs, derive_seed(ac.seed, 0xa77));
  const auto pairs = generate_pairs(h, pair_images);
  auto g = build_inverse_net<float>(ac.resolve_inverse(h.config()), derive_seed(ac.seed, 3));
  train_inverse(pairs, g, ac, [](std::size_t e, double mse) {
    log("attack epoch " + std::to_string(e) + " mse " + fmt(mse));
  });
  const EvalReport r = evaluate_attack(g, h, data.test);
  if (r.box.n == 0) return {kPsnrInfinity, r.psnr_values.size()};
  return {r.box.median, r.psnr_values.size()};
}

std::vector<Line> cifar_lines(const std::set<int>& want, const fs::path& data_root,
                              const fs::path& out) {
  std::vector<Line> lines;
  const ExperimentConfig cfg = desk_config(data_root, out / "desk");
  DatasetSplit data;
  try {
    data = load_experiment_data(cfg);
  } catch (const Error& e) {
    for (int id : {4, 5, 6, 8}) {
      if (want.count(id)) {
        lines.push_back({id, "needs CIFAR-10", Status::Blocked, e.what()});
      }
    }
    return lines;
  }

  std::optional<DeskRun> desk;
  if (want.count(4) || want.count(6) || want.count(8)) {
    log("criterion 4: training alpha = 0.005 and alpha = 0");
    ExperimentConfig sweep = cfg;
    sweep.alpha_sweep = {kDeskAlpha, 0.0};
    const auto runs = cmd_train(sweep, data, {}, [](const EpochRecord& r) {
      log("epoch " + std::to_string(r.epoch) + " val acc " + fmt(r.val_accuracy) + "%");
    });
    DeskRun d{runs[0], runs[1], {}, {}};
    ExperimentConfig ec = cfg;
    ec.output_dir = out / "desk" / "eval_protect";
    d.protect_eval = cmd_eval(d.protect.best_checkpoint, d.protect.best_checkpoint, ec, data);
    ec.output_dir = out / "desk" / "eval_plain";
    d.plain_eval = cmd_eval(d.plain.best_checkpoint, d.plain.best_checkpoint, ec, data);
    desk = d;
  }

  if (want.count(4)) {
    const double acc = *desk->protect_eval.accuracy_percent;
    const double feat_a = desk->protect.records.back().train_feat;
    const double feat_0 = desk->plain.records.back().train_feat;
    const double psnr_a = mean_finite(desk->protect_eval.psnr_values);
    const double psnr_0 = mean_finite(desk->plain_eval.psnr_values);
    const bool ok = acc >= kDeskMinAccuracy && feat_a > feat_0 && psnr_a < psnr_0;
    lines.push_back({4, "desk-scale protection", ok ? Status::Pass : Status::Fail,
                     "(a) accuracy " + fmt(acc) + "% (>= " + fmt(kDeskMinAccuracy) +
                         "); (b) final L_feat " + fmt(feat_a) + " vs " + fmt(feat_0) +
                         " at alpha 0; (c) mean PSNR " + fmt(psnr_a) + " dB vs " + fmt(psnr_0) +
                         " dB at alpha 0"});
  }

  std::optional<AttackRun> control;
  if (want.count(5) || want.count(6)) {
    log("criterion 5: attacking the identity map");
    TransformNetConfig id;
    id.kind = "identity";
    control = run_attack(build_transform_net<float>(id, 0), data, cfg.attack);
  }
  if (want.count(5)) {
    const bool ok = control->median > kControlMinMedian;
    lines.push_back({5, "attack positive control", ok ? Status::Pass : Status::Fail,
                     "held-out median PSNR " + fmt(control->median) + " dB over " +
                         std::to_string(control->n) + " images (> " + fmt(kControlMinMedian) +
                         ")"});
  }
  if (want.count(6)) {
    log("criterion 6: attacking the alpha = 0.005 model");
    const auto h = load_transform_net(load_checkpoint(desk->protect.best_checkpoint));
    const AttackRun r = run_attack(h, data, cfg.attack);
    const bool ok = r.median <= control->median - kRobustMargin;
    lines.push_back({6, "attack robustness", ok ? Status::Pass : Status::Fail,
                     "median PSNR " + fmt(r.median) + " dB vs control " + fmt(control->median) +
                         " dB (margin >= " + fmt(kRobustMargin) + ")"});
  }

  if (want.count(8)) {
    const Checkpoint best = load_checkpoint(desk->protect.best_checkpoint);
    const auto h = load_transform_net(best);
    auto psi = load_classifier(best);
    std::vector<std::string> bodies;
    std::mutex mu;
    ServiceOptions so;
    so.on_request = [&](const std::string& b) {
      std::lock_guard lock(mu);
      bodies.push_back(b);
    };
    const std::string digest = classifier_digest(psi);
    ClassifierService service(psi, so);
    const int port = service.start();
    std::vector<Tensor<float>> images;
    for (std::size_t i = 0; i < kServiceImages && i < data.test.size(); ++i) {
      images.push_back(data.test.get(i).pixels);
    }
    const auto remote =
        client_protect_and_submit(h, images, "127.0.0.1:" + std::to_string(port));
    service.stop();
    double max_diff = 0.0, max_payload_psnr = -kPsnrInfinity;
    bool labels_ok = true;
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto local = local_pipeline(h, psi, images[i], digest);
      labels_ok = labels_ok && local.label == remote[i].label;
      for (std::size_t k = 0; k < local.probabilities.size(); ++k) {
        max_diff = std::max(max_diff, std::abs(local.probabilities[k] - remote[i].probabilities[k]));
      }
      const auto wire = decode_png(std::span(
          reinterpret_cast<const std::uint8_t*>(bodies[i].data()), bodies[i].size()));
      max_payload_psnr = std::max(max_payload_psnr, psnr(wire, images[i]));
    }
    const bool ok = images.size() == kServiceImages && bodies.size() == kServiceImages &&
                    labels_ok && max_diff <= kServiceTolerance &&
                    max_payload_psnr < kPayloadMaxPsnr;
    lines.push_back({8, "client/server equivalence", ok ? Status::Pass : Status::Fail,
                     std::to_string(images.size()) + " images, max |dp| " + fmt(max_diff, 3) +
                         ", highest payload-vs-plain PSNR " + fmt(max_payload_psnr) + " dB (< " +
                         fmt(kPayloadMaxPsnr) + ")"});
  }
  return lines;
}

Line full_protocol_line(bool full, const fs::path& data_root, const fs::path& out) {
  if (!full) return {7, "full protocol", Status::Skipped, "optional; run with --full"};
  std::string detail;
  bool ok = true;
  for (const auto& [name, classes, target, tol] :
       {std::tuple{"cifar10", 10, kFullCifar10, kFullCifar10Tol},
        std::tuple{"cifar100", 100, kFullCifar100, kFullCifar100Tol}}) {
    ExperimentConfig c;
    c.data.root = data_root;
    c.train.dataset = name;
    c.classifier.classes = static_cast<std::size_t>(classes);
    c.output_dir = out / "full" / name;
    DatasetSplit data;
    try {
      data = load_experiment_data(c);
    } catch (const Error& e) {
      return {7, "full protocol", Status::Blocked, e.what()};
    }
    const auto run = cmd_train(c, data).front();
    const EvalReport r = cmd_eval(run.best_checkpoint, run.best_checkpoint, c, data);
    const double acc = *r.accuracy_percent;
    ok = ok && std::abs(acc - target) <= tol;
    detail += std::string(name) + " " + fmt(acc) + "% (target " + fmt(target) + " +- " +
              fmt(tol) + ") ";
  }
  return {7, "full protocol", ok ? Status::Pass : Status::Fail, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance report"};
  std::vector<int> only;
  std::string data_root = std::getenv("PROTNET_DATA") ? std::getenv("PROTNET_DATA") : "data";
  std::string out = "acceptance_runs";
  bool full = false;
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--data", data_root, "directory holding the CIFAR archives");
  app.add_option("--out", out, "directory for training outputs");
  app.add_flag("--full", full, "also run the optional full-protocol criterion");
  CLI11_PARSE(app, argc, argv);

  std::set<int> want(only.begin(), only.end());
  if (want.empty()) want = {1, 2, 3, 4, 5, 6, 7, 8};

  std::vector<Line> lines;
  auto emit = [&](Line l) { lines.push_back(std::move(l)); };
  try {
    if (want.count(1)) emit(property_suite_line());
    if (want.count(2)) emit(gradcheck_line());
    if (want.count(3)) emit(schedule_line());
    if (want.count(4) || want.count(5) || want.count(6) || want.count(8)) {
      for (auto& l : cifar_lines(want, data_root, out)) emit(std::move(l));
    }
    if (want.count(7)) emit(full_protocol_line(full, data_root, out));
  } catch (const std::exception& e) {
    std::cout << "acceptance aborted: " << e.what() << std::endl;
    return 1;
  }

  std::stable_sort(lines.begin(), lines.end(), [](const Line& a, const Line& b) { return a.id < b.id; });
  for (const Line& l : lines) {
    std::cout << "criterion " << l.id << " " << status_name(l.status) << "  " << l.name << ": "
              << l.detail << "\n";
  }
  const auto count = [&](Status s) {
    return std::count_if(lines.begin(), lines.end(), [&](const Line& l) { return l.status == s; });
  };
  std::cout << "summary: " << count(Status::Pass) << " pass, " << count(Status::Fail) << " fail, "
            << count(Status::Blocked) << " blocked, " << count(Status::Skipped) << " skipped"
            << std::endl;
  if (count(Status::Fail) > 0) return 1;
  if (count(Status::Pass) == 0) return kSkipCode;
  return 0;
}
