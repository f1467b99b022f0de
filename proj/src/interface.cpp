#include "protnet/interface.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "json_util.hpp"
#include "protnet/image_io.hpp"

namespace protnet {

using detail::get_or;
using detail::reject_unknown;

namespace {

/// Rethrows the in-flight protnet error with `stage` prefixed, keeping its
/// type (and so its exit code).
[[noreturn]] void rethrow_in_stage(const std::string& stage) {
  try {
    throw;
  } catch (const ConfigError& e) {
    throw ConfigError(stage + ": " + e.what());
  } catch (const FileError& e) {
    throw FileError(stage + ": " + e.what());
  } catch (const SerializationError& e) {
    throw SerializationError(stage + ": " + e.what());
  } catch (const DivergenceError& e) {
    throw DivergenceError(stage + ": " + e.what());
  } catch (const TransportError& e) {
    throw TransportError(stage + ": " + e.what());
  } catch (const DomainError& e) {
    throw DomainError(stage + ": " + e.what());
  }
}

template <typename F>
auto in_stage(const std::string& stage, F&& f) {
  try {
    return f();
  } catch (const Error&) {
    rethrow_in_stage(stage);
  }
}

void write_text(const std::filesystem::path& path, const std::string& s) {
  write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

std::string alpha_dir_name(double a) {
  std::ostringstream os;
  os << "alpha_" << a;
  return os.str();
}

std::string file_digest(const std::filesystem::path& p) { return sha256_hex(read_bytes(p)); }

/// First `n` images of `set` (n = 0: all).
ImageSet head(const ImageSet& set, std::size_t n) {
  if (n == 0 || n >= set.size()) return set;
  ImageSet out;
  out.channels = set.channels;
  out.height = set.height;
  out.width = set.width;
  const std::size_t k = set.image_size();
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(std::span(set.pixels.data() + i * k, k), set.labels[i], set.source_index[i]);
  }
  return out;
}

}  // namespace

// --------------------------------------------------------- configuration

void ExperimentConfig::validate() const {
  transform_net.validate();
  classifier.validate();
  train.validate();
  attack.validate();
  if (transform_net.channels != classifier.channels) {
    throw ConfigError("transform_net.channels and classifier.channels differ");
  }
  if (feature.source != "identity" && feature.source != "classifier" &&
      feature.source != "transform") {
    throw ConfigError("feature.source: unknown value '" + feature.source + "'");
  }
  if (feature.source == "transform" && transform_net.kind == "identity") {
    throw ConfigError("feature.source 'transform' needs a U-Net transform_net");
  }
  if (!(eval.peak > 0.0)) throw ConfigError("eval.peak must be > 0");
  for (double a : alpha_sweep) {
    if (!(a >= 0.0)) throw ConfigError("alpha_sweep entries must be >= 0");
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json data = {{"root", c.data.root.string()}, {"split_seed", c.data.split_seed}};
  if (c.data.subset) {
    data["subset"] = {
        {"train", c.data.subset->train}, {"val", c.data.subset->val}, {"test", c.data.subset->test}};
  }
  j = {{"data", data},
       {"transform_net", c.transform_net},
       {"classifier", c.classifier},
       {"feature", c.feature},
       {"train", c.train},
       {"attack", c.attack},
       {"eval",
        {{"peak", c.eval.peak},
         {"grid_images", c.eval.grid_images},
         {"test_count", c.eval.test_count}}},
       {"output_dir", c.output_dir.string()},
       {"alpha_sweep", c.alpha_sweep},
       {"keep_all_checkpoints", c.keep_all_checkpoints}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  reject_unknown(j,
                 {"data", "transform_net", "classifier", "feature", "train", "attack", "eval",
                  "output_dir", "alpha_sweep", "keep_all_checkpoints"},
                 "config");
  ExperimentConfig d;
  c = d;
  if (j.contains("data")) {
    const auto& dj = j.at("data");
    reject_unknown(dj, {"root", "split_seed", "subset"}, "data");
    c.data.root = get_or<std::string>(dj, "root", d.data.root.string(), "data");
    c.data.split_seed = get_or(dj, "split_seed", d.data.split_seed, "data");
    if (dj.contains("subset") && !dj.at("subset").is_null()) {
      const auto& sj = dj.at("subset");
      reject_unknown(sj, {"train", "val", "test"}, "data.subset");
      c.data.subset = SplitSizes{get_or<std::size_t>(sj, "train", 0, "data.subset"),
                                 get_or<std::size_t>(sj, "val", 0, "data.subset"),
                                 get_or<std::size_t>(sj, "test", 0, "data.subset")};
    }
  }
  if (j.contains("transform_net")) c.transform_net = j.at("transform_net").get<TransformNetConfig>();
  if (j.contains("classifier")) c.classifier = j.at("classifier").get<ClassifierConfig>();
  if (j.contains("feature")) c.feature = j.at("feature").get<FeatureConfig>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("attack")) c.attack = j.at("attack").get<AttackConfig>();
  if (j.contains("eval")) {
    const auto& ej = j.at("eval");
    reject_unknown(ej, {"peak", "grid_images", "test_count"}, "eval");
    c.eval.peak = get_or(ej, "peak", d.eval.peak, "eval");
    c.eval.grid_images = get_or(ej, "grid_images", d.eval.grid_images, "eval");
    c.eval.test_count = get_or(ej, "test_count", d.eval.test_count, "eval");
  }
  c.output_dir = get_or<std::string>(j, "output_dir", d.output_dir.string(), "config");
  c.alpha_sweep = get_or(j, "alpha_sweep", d.alpha_sweep, "config");
  c.keep_all_checkpoints = get_or(j, "keep_all_checkpoints", d.keep_all_checkpoints, "config");
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  try {
    c = j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FileError("config file not found: " + path.string());
  const auto bytes = read_bytes(path);
  try {
    return parse_experiment_config(std::string(bytes.begin(), bytes.end()));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_overrides(ExperimentConfig& cfg, const Overrides& o) {
  if (o.seed) {
    cfg.train.seed = *o.seed;
    cfg.attack.seed = *o.seed;
  }
  if (o.out) cfg.output_dir = *o.out;
}

std::string config_digest(const ExperimentConfig& cfg) {
  const std::string s = nlohmann::json(cfg).dump();
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

DatasetSplit load_experiment_data(const ExperimentConfig& cfg) {
  DatasetSplit split = load_dataset(cfg.train.dataset, cfg.data.root, cfg.data.split_seed);
  if (cfg.data.subset) split = subsample(split, *cfg.data.subset, cfg.data.split_seed);
  if (static_cast<std::size_t>(split.classes) != cfg.classifier.classes) {
    throw ConfigError("classifier.classes = " + std::to_string(cfg.classifier.classes) + " but " +
                      split.name + " has " + std::to_string(split.classes) + " classes");
  }
  return split;
}

// ------------------------------------------------------------- commands

std::vector<TrainSummary> cmd_train(const ExperimentConfig& cfg, const DatasetSplit& data,
                                    const std::optional<std::filesystem::path>& psi_init,
                                    const EpochCallback& on_epoch) {
  cfg.validate();
  if (static_cast<std::size_t>(data.classes) != cfg.classifier.classes) {
    throw ConfigError("classifier.classes does not match the dataset's class count");
  }
  if (!cfg.train.joint && !psi_init) {
    throw ConfigError("train.joint = false needs a psi checkpoint (--checkpoint)");
  }
  std::vector<double> alphas = cfg.alpha_sweep;
  const bool sweep = !alphas.empty();
  if (!sweep) alphas.push_back(cfg.train.alpha);

  std::vector<TrainSummary> out;
  for (double alpha : alphas) {
    TrainConfig tc = cfg.train;
    tc.alpha = alpha;
    const std::filesystem::path dir =
        sweep ? cfg.output_dir / alpha_dir_name(alpha) : cfg.output_dir;
    ensure_directory(dir);

    auto h = build_transform_net<float>(cfg.transform_net, derive_seed(tc.seed, 1));
    Classifier<float> psi;
    if (psi_init) {
      psi = in_stage("load psi", [&] { return load_classifier(load_checkpoint(*psi_init)); });
      if (!(psi.config() == cfg.classifier)) {
        throw ConfigError("psi checkpoint topology differs from the configured classifier");
      }
    } else {
      psi = build_classifier<float>(cfg.classifier, derive_seed(tc.seed, 2));
    }
    const auto phi = make_feature_extractor<float>(cfg.feature, h, psi);
    auto store = CheckpointStore::in_directory(dir / "checkpoints", cfg.keep_all_checkpoints);
    const TrainResult result = in_stage("train", [&] {
      return train_joint(tc, data, h, psi, phi, store, on_epoch);
    });

    TrainSummary s;
    s.alpha = alpha;
    s.records = result.records;
    const std::size_t best = best_record_index(result.records);
    s.best_epoch = result.records[best].epoch;
    s.best_val_total = result.records[best].val_total;
    Checkpoint ckpt = store.get(select_best_checkpoint<std::size_t>(result.records, result.checkpoints));
    ckpt.manifest.extra["experiment"] = cfg;
    s.best_checkpoint = dir / "best.ckpt";
    save_checkpoint(ckpt, s.best_checkpoint);
    s.metrics_csv = dir / "metrics.csv";
    write_metrics_csv(s.metrics_csv, result.records);
    s.run_manifest = dir / "run.json";
    const nlohmann::json manifest = {
        {"config", cfg},
        {"config_digest", config_digest(cfg)},
        {"alpha", alpha},
        {"epochs", result.records.size()},
        {"best_epoch", s.best_epoch},
        {"best_val_total", s.best_val_total},
        {"best_checkpoint", s.best_checkpoint.filename().string()},
        {"best_checkpoint_sha256", file_digest(s.best_checkpoint)},
        {"metrics_csv", s.metrics_csv.filename().string()},
        {"dataset", {{"name", data.name},
                     {"train", data.train.size()},
                     {"val", data.val.size()},
                     {"test", data.test.size()}}}};
    write_text(s.run_manifest, manifest.dump(2) + "\n");
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::filesystem::path> cmd_protect(const std::filesystem::path& checkpoint,
                                               std::span<const std::filesystem::path> inputs,
                                               const std::filesystem::path& out_dir) {
  const TransformNet<float> h =
      in_stage("load h", [&] { return load_transform_net(load_checkpoint(checkpoint)); });
  if (inputs.empty()) throw DomainError("protect: no input images");

  std::vector<Tensor<float>> images;
  std::vector<std::string> bad;
  for (const auto& p : inputs) {
    try {
      images.push_back(read_png(p));
    } catch (const FileError& e) {
      bad.push_back(e.what());
    }
  }
  if (!bad.empty()) {
    std::string msg = "protect: unreadable input(s):";
    for (const auto& b : bad) msg += "\n  " + b;
    throw FileError(msg);
  }

  std::vector<std::filesystem::path> written;
  std::vector<Tensor<float>> protected_images;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (images[i].shape.c != h.config().channels) {
      throw DomainError("protect: " + inputs[i].string() + " has " +
                        std::to_string(images[i].shape.c) + " channels, h expects " +
                        std::to_string(h.config().channels));
    }
    const Tensor<float> y = forward_transform(h, images[i]);
    const auto path = out_dir / (inputs[i].stem().string() + ".png");
    write_png(path, y, 16);
    written.push_back(path);
    protected_images.push_back(quantize(y, 16));
  }
  const bool same_shape = std::all_of(images.begin(), images.end(), [&](const auto& t) {
    return t.shape == images.front().shape;
  });
  if (same_shape) {
    const GridRow rows[] = {{"plain", images}, {"protected", protected_images}};
    export_grid(rows, out_dir / "grid.png");
    written.push_back(out_dir / "grid.png");
  }
  return written;
}

AttackSummary cmd_attack(const std::filesystem::path& h_checkpoint, const ExperimentConfig& cfg,
                         const DatasetSplit& data,
                         const std::function<void(std::size_t, double)>& on_epoch) {
  cfg.validate();
  if (!std::filesystem::exists(h_checkpoint)) {
    throw FileError("attack: h checkpoint not found: " + h_checkpoint.string());
  }
  const TransformNet<float> h =
      in_stage("load h", [&] { return load_transform_net(load_checkpoint(h_checkpoint)); });
  const AttackConfig& ac = cfg.attack;
  const std::filesystem::path dir = cfg.output_dir / "attack";
  ensure_directory(dir);

  const ImageSet& source = ac.pair_source == "train" ? data.train
                           : ac.pair_source == "val" ? data.val
                                                     : data.test;
  const ImageSet pair_images =
      ac.pair_count > 0 ? random_subset(source, ac.pair_count, derive_seed(ac.seed, 0xa77))
                        : source;
  const auto pairs = in_stage("generate pairs", [&] { return generate_pairs(h, pair_images); });
  write_pair_manifest(dir / "pairs.json",
                      {file_digest(h_checkpoint), ac.pair_source, pairs.size(), ac.seed});

  AttackSummary s;
  auto g = build_inverse_net<float>(ac.resolve_inverse(h.config()), derive_seed(ac.seed, 3));
  s.training = in_stage("train inverse", [&] { return train_inverse(pairs, g, ac, on_epoch); });
  Checkpoint ckpt;
  ckpt.manifest.architecture = g.is_identity() ? "identity" : "unet";
  ckpt.manifest.seed = ac.seed;
  ckpt.manifest.dataset = data.name;
  ckpt.manifest.extra["attack"] = ac;
  ckpt.manifest.extra["h_sha256"] = file_digest(h_checkpoint);
  ckpt.manifest.extra["initial_mse"] = s.training.initial_mse;
  ckpt.manifest.extra["final_mse"] = s.training.final_mse;
  add_network(ckpt, "g", g);
  s.g_checkpoint = dir / "g.ckpt";
  save_checkpoint(ckpt, s.g_checkpoint);

  const ImageSet test = head(data.test, ac.eval_count);
  s.report = in_stage("evaluate", [&] { return evaluate_attack(g, h, test, cfg.eval.peak); });
  s.report.config_digest = config_digest(cfg);

  const std::size_t k = std::min(cfg.eval.grid_images, test.size());
  if (k > 0) {
    const ImageBatch x = test.batch(0, k);
    const ImageBatch p = forward_transform(h, x);
    const ImageBatch e = estimate(g, p);
    GridRow rows[3] = {{"plain", {}}, {"protected", {}}, {"estimated", {}}};
    for (std::size_t i = 0; i < k; ++i) {
      rows[0].images.push_back(slice_batch(x, i, 1));
      rows[1].images.push_back(slice_batch(p, i, 1));
      rows[2].images.push_back(slice_batch(e, i, 1));
    }
    export_grid(rows, dir / "grid.png");
    s.report.grid_paths.push_back((dir / "grid.png").string());
  }
  s.report_dir = dir;
  write_report(dir, s.report);
  return s;
}

EvalReport cmd_eval(const std::filesystem::path& h_checkpoint,
                    const std::filesystem::path& psi_checkpoint, const ExperimentConfig& cfg,
                    const DatasetSplit& data) {
  const TransformNet<float> h =
      in_stage("load h", [&] { return load_transform_net(load_checkpoint(h_checkpoint)); });
  const Classifier<float> psi =
      in_stage("load psi", [&] { return load_classifier(load_checkpoint(psi_checkpoint)); });
  if (static_cast<std::size_t>(data.classes) != psi.classes()) {
    throw ConfigError("psi predicts " + std::to_string(psi.classes()) + " classes but " +
                      data.name + " has " + std::to_string(data.classes));
  }
  const ImageSet test = head(data.test, cfg.eval.test_count);
  EvalReport r;
  r.peak = cfg.eval.peak;
  r.config_digest = config_digest(cfg);
  r.accuracy_percent = in_stage("accuracy", [&] { return accuracy(h, psi, test); });
  constexpr std::size_t kChunk = 64;
  for (std::size_t first = 0; first < test.size(); first += kChunk) {
    const std::size_t count = std::min(kChunk, test.size() - first);
    const ImageBatch x = test.batch(first, count);
    const auto v = psnr_per_image(forward_transform(h, x), x, cfg.eval.peak);
    r.psnr_values.insert(r.psnr_values.end(), v.begin(), v.end());
  }
  if (std::any_of(r.psnr_values.begin(), r.psnr_values.end(),
                  [](double v) { return std::isfinite(v); })) {
    r.box = box_stats(r.psnr_values);
  } else {
    r.box.excluded = r.psnr_values.size();
  }
  const std::filesystem::path dir = cfg.output_dir / "eval";
  const std::size_t k = std::min(cfg.eval.grid_images, test.size());
  if (k > 0) {
    const ImageBatch x = test.batch(0, k);
    const ImageBatch p = forward_transform(h, x);
    GridRow rows[2] = {{"plain", {}}, {"protected", {}}};
    for (std::size_t i = 0; i < k; ++i) {
      rows[0].images.push_back(slice_batch(x, i, 1));
      rows[1].images.push_back(slice_batch(p, i, 1));
    }
    export_grid(rows, dir / "grid.png");
    r.grid_paths.push_back((dir / "grid.png").string());
  }
  write_report(dir, r);
  return r;
}

// -------------------------------------------------------------- service

nlohmann::json to_json(const ClassifyResponse& r) {
  return {{"probabilities", r.probabilities}, {"label", r.label}, {"model_digest", r.model_digest}};
}

ClassifyResponse parse_classify_response(const std::string& body) {
  try {
    const auto j = nlohmann::json::parse(body);
    ClassifyResponse r;
    r.probabilities = j.at("probabilities").get<std::vector<double>>();
    r.label = j.at("label").get<int>();
    r.model_digest = j.at("model_digest").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(std::string("malformed classify response: ") + e.what());
  }
}

std::string classifier_digest(Classifier<float>& psi) {
  Checkpoint ckpt;
  add_network(ckpt, "psi", psi);
  return sha256_hex(encode_checkpoint(ckpt));
}

ClassifyResponse classify_protected(const Classifier<float>& psi, const Tensor<float>& image,
                                    const std::string& digest) {
  if (image.shape.c != psi.config().channels) {
    throw DomainError("image has " + std::to_string(image.shape.c) + " channels, model expects " +
                      std::to_string(psi.config().channels));
  }
  ClassifyResponse r;
  r.probabilities = classify(psi, image).front();
  r.label = static_cast<int>(argmax(r.probabilities));
  r.model_digest = digest;
  return r;
}

struct ClassifierService::Impl {
  httplib::Server server;
};

ClassifierService::ClassifierService(Classifier<float> psi, ServiceOptions opt)
    : impl_(std::make_unique<Impl>()), psi_(std::move(psi)), opt_(std::move(opt)) {
  digest_ = classifier_digest(psi_);
  auto& svr = impl_->server;
  svr.set_payload_max_length(opt_.max_payload);
  svr.Get("/health", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("ok\n", "text/plain");
  });
  svr.Post("/classify", [this](const httplib::Request& req, httplib::Response& res) {
    if (opt_.on_request) opt_.on_request(req.body);
    try {
      const auto bytes = std::span(reinterpret_cast<const std::uint8_t*>(req.body.data()),
                                   req.body.size());
      const ClassifyResponse r = classify_protected(psi_, decode_png(bytes), digest_);
      res.set_content(to_json(r).dump(), "application/json");
    } catch (const DomainError& e) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
    }
  });
}

ClassifierService::~ClassifierService() { stop(); }

int ClassifierService::start() {
  auto& svr = impl_->server;
  int port = opt_.port;
  if (port == 0) {
    port = svr.bind_to_any_port(opt_.host);
  } else if (!svr.bind_to_port(opt_.host, port)) {
    port = -1;
  }
  if (port < 0) {
    throw TransportError("cannot bind " + opt_.host + ":" + std::to_string(opt_.port));
  }
  thread_ = std::thread([&svr] { svr.listen_after_bind(); });
  svr.wait_until_ready();
  return port;
}

void ClassifierService::run() {
  if (!impl_->server.listen(opt_.host, opt_.port)) {
    throw TransportError("cannot bind " + opt_.host + ":" + std::to_string(opt_.port));
  }
}

void ClassifierService::stop() {
  if (impl_) impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

ClassifyResponse submit_png(const std::string& address, const std::vector<std::uint8_t>& png,
                            const ClientOptions& opt) {
  httplib::Client cli(address.find("://") == std::string::npos ? "http://" + address : address);
  cli.set_connection_timeout(opt.timeout_s);
  cli.set_read_timeout(opt.timeout_s);
  const std::string body(png.begin(), png.end());
  std::string last_error;
  const int attempts = std::max(1, opt.attempts);
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    auto res = cli.Post("/classify", body, "image/png");
    if (res) {
      if (res->status != 200) {
        std::string reason = res->body;
        try {
          reason = nlohmann::json::parse(res->body).at("error").get<std::string>();
        } catch (const nlohmann::json::exception&) {
        }
        throw TransportError("server rejected request (HTTP " + std::to_string(res->status) +
                             "): " + reason);
      }
      return parse_classify_response(res->body);
    }
    last_error = httplib::to_string(res.error());
    if (attempt < attempts) {
      std::this_thread::sleep_for(std::chrono::milliseconds(opt.retry_delay_ms));
    }
  }
  throw TransportError("server " + address + " unreachable after " + std::to_string(attempts) +
                       " attempts (" + last_error + ")");
}

std::vector<std::uint8_t> protect_to_png(const TransformNet<float>& h, const Tensor<float>& image) {
  return encode_png(forward_transform(h, image), 16);
}

std::vector<ClassifyResponse> client_protect_and_submit(const TransformNet<float>& h,
                                                        std::span<const Tensor<float>> images,
                                                        const std::string& address,
                                                        const ClientOptions& opt) {
  std::vector<ClassifyResponse> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(submit_png(address, protect_to_png(h, img), opt));
  return out;
}

ClassifyResponse local_pipeline(const TransformNet<float>& h, const Classifier<float>& psi,
                                const Tensor<float>& image, const std::string& digest) {
  return classify_protected(psi, decode_png(protect_to_png(h, image)), digest);
}

}  // namespace protnet
