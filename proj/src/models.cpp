#include "protnet/models.hpp"

#include "json_util.hpp"

#include <cmath>
#include <limits>

namespace protnet {

using detail::get_or;
using detail::reject_unknown;

void TransformNetConfig::validate() const {
  if (kind == "identity") {
    if (channels == 0) throw ConfigError("transform_net.channels must be positive");
    return;
  }
  if (kind != "unet") throw ConfigError("transform_net.kind: unknown value '" + kind + "'");
  if (depth < 1) throw ConfigError("transform_net.depth must be >= 1");
  if (base_width < 1) throw ConfigError("transform_net.base_width must be >= 1");
  if (channels < 1) throw ConfigError("transform_net.channels must be >= 1");
  if (depth > 16) throw ConfigError("transform_net.depth too large");
}

void ClassifierConfig::validate() const {
  if (channels < 1) throw ConfigError("classifier.channels must be >= 1");
  if (classes < 1) throw ConfigError("classifier.classes must be >= 1");
  if (stage_widths.empty()) throw ConfigError("classifier.stage_widths must be non-empty");
  if (blocks_per_stage < 1) throw ConfigError("classifier.blocks_per_stage must be >= 1");
  for (std::size_t s = 0; s < stage_widths.size(); ++s) {
    if (stage_widths[s] == 0) throw ConfigError("classifier.stage_widths must be positive");
    if (s > 0) {
      // Zero-padded shortcuts need equal padding on both channel ends.
      if (stage_widths[s] < stage_widths[s - 1] ||
          (stage_widths[s] - stage_widths[s - 1]) % 2 != 0) {
        throw ConfigError(
            "classifier.stage_widths must be non-decreasing with even increments");
      }
    }
  }
}

void to_json(nlohmann::json& j, const TransformNetConfig& c) {
  j = {{"kind", c.kind},
       {"channels", c.channels},
       {"depth", c.depth},
       {"base_width", c.base_width},
       {"batch_norm", c.batch_norm}};
}

void from_json(const nlohmann::json& j, TransformNetConfig& c) {
  reject_unknown(j, {"kind", "channels", "depth", "base_width", "batch_norm"}, "transform_net");
  TransformNetConfig d;
  c.kind = get_or(j, "kind", d.kind, "transform_net");
  c.channels = get_or(j, "channels", d.channels, "transform_net");
  c.depth = get_or(j, "depth", d.depth, "transform_net");
  c.base_width = get_or(j, "base_width", d.base_width, "transform_net");
  c.batch_norm = get_or(j, "batch_norm", d.batch_norm, "transform_net");
}

void to_json(nlohmann::json& j, const ClassifierConfig& c) {
  j = {{"channels", c.channels},
       {"classes", c.classes},
       {"stage_widths", c.stage_widths},
       {"blocks_per_stage", c.blocks_per_stage}};
}

void from_json(const nlohmann::json& j, ClassifierConfig& c) {
  reject_unknown(j, {"channels", "classes", "stage_widths", "blocks_per_stage"}, "classifier");
  ClassifierConfig d;
  c.channels = get_or(j, "channels", d.channels, "classifier");
  c.classes = get_or(j, "classes", d.classes, "classifier");
  c.stage_widths = get_or(j, "stage_widths", d.stage_widths, "classifier");
  c.blocks_per_stage = get_or(j, "blocks_per_stage", d.blocks_per_stage, "classifier");
}

void to_json(nlohmann::json& j, const FeatureConfig& c) {
  j = {{"source", c.source}, {"layer", c.layer}};
}

void from_json(const nlohmann::json& j, FeatureConfig& c) {
  reject_unknown(j, {"source", "layer"}, "feature");
  FeatureConfig d;
  c.source = get_or(j, "source", d.source, "feature");
  c.layer = get_or(j, "layer", d.layer, "feature");
}

// ------------------------------------------------------------- ConvBlock

template <typename T>
ConvBlock<T>::ConvBlock(const std::string& name, std::size_t in, std::size_t out, bool bn,
                        Rng& rng)
    : bn_(bn),
      conv1_(name + ".conv1", in, out, 3, 1, 1, !bn, rng),
      conv2_(name + ".conv2", out, out, 3, 1, 1, !bn, rng) {
  if (bn_) {
    bn1_ = BatchNorm2d<T>(name + ".bn1", out);
    bn2_ = BatchNorm2d<T>(name + ".bn2", out);
  }
}

template <typename T>
Tensor<T> ConvBlock<T>::forward(const Tensor<T>& x, Mode mode, Tape& tape) const {
  tape.x = x;
  Tensor<T> a = conv1_.forward(x);
  if (bn_) a = bn1_.forward(a, mode, tape.bn1);
  tape.r1 = relu(a);
  Tensor<T> b = conv2_.forward(tape.r1);
  if (bn_) b = bn2_.forward(b, mode, tape.bn2);
  tape.out = relu(b);
  return tape.out;
}

template <typename T>
Tensor<T> ConvBlock<T>::backward(const Tape& tape, const Tensor<T>& dy, bool accumulate) {
  Tensor<T> d = relu_backward(tape.out, dy);
  if (bn_) d = bn2_.backward(tape.bn2, d, accumulate);
  d = conv2_.backward(tape.r1, d, accumulate);
  d = relu_backward(tape.r1, d);
  if (bn_) d = bn1_.backward(tape.bn1, d, accumulate);
  return conv1_.backward(tape.x, d, accumulate);
}

template <typename T>
void ConvBlock<T>::commit(const Tape& tape) {
  if (!bn_) return;
  bn1_.commit(tape.bn1);
  bn2_.commit(tape.bn2);
}

template <typename T>
void ConvBlock<T>::collect(ParamList<T>& params, StateList<T>& state) {
  conv1_.collect(params, state);
  if (bn_) bn1_.collect(params, state);
  conv2_.collect(params, state);
  if (bn_) bn2_.collect(params, state);
}

// ------------------------------------------------------------------ UNet

template <typename T>
UNet<T>::UNet(const TransformNetConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  std::vector<std::size_t> width(cfg.depth + 1);
  for (std::size_t l = 0; l <= cfg.depth; ++l) width[l] = cfg.base_width << l;
  std::size_t in = cfg.channels;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    enc_.emplace_back("enc" + std::to_string(l), in, width[l], cfg.batch_norm, rng);
    in = width[l];
  }
  bottleneck_ = ConvBlock<T>("bottleneck", in, width[cfg.depth], cfg.batch_norm, rng);
  up_.resize(cfg.depth);
  dec_.resize(cfg.depth);
  for (std::size_t i = cfg.depth; i-- > 0;) {
    up_[i] = ConvTranspose2x2<T>("up" + std::to_string(i), width[i + 1], width[i], rng);
    dec_[i] = ConvBlock<T>("dec" + std::to_string(i), 2 * width[i], width[i], cfg.batch_norm, rng);
  }
  head_ = Conv2d<T>("head", width[0], cfg.channels, 1, 1, 0, true, rng);
}

template <typename T>
void UNet<T>::check_input(const Shape& s) const {
  if (s.c != cfg_.channels) {
    throw DomainError("transform net expects " + std::to_string(cfg_.channels) +
                      " channels, got " + s.str());
  }
  const std::size_t f = std::size_t{1} << cfg_.depth;
  if (s.h % f != 0 || s.w % f != 0 || s.h == 0 || s.w == 0) {
    throw DomainError("transform net of depth " + std::to_string(cfg_.depth) +
                      " needs spatial size divisible by " + std::to_string(f) + ", got " +
                      s.str());
  }
}

template <typename T>
Tensor<T> UNet<T>::forward(const Tensor<T>& x, Mode mode, Tape& tape) const {
  check_input(x.shape);
  const std::size_t d = cfg_.depth;
  tape.full = true;
  tape.bottleneck_run = true;
  tape.levels_run = d;
  tape.enc.assign(d, {});
  tape.dec.assign(d, {});
  tape.pool_argmax.assign(d, {});
  tape.pool_in.assign(d, {});
  tape.up_in.assign(d, {});
  Tensor<T> cur = x;
  for (std::size_t l = 0; l < d; ++l) {
    enc_[l].forward(cur, mode, tape.enc[l]);
    tape.pool_in[l] = tape.enc[l].out.shape;
    cur = maxpool2(tape.enc[l].out, tape.pool_argmax[l]);
  }
  cur = bottleneck_.forward(cur, mode, tape.bottleneck);
  for (std::size_t l = d; l-- > 0;) {
    tape.up_in[l] = std::move(cur);
    Tensor<T> u = up_[l].forward(tape.up_in[l]);
    cur = dec_[l].forward(concat_channels(u, tape.enc[l].out), mode, tape.dec[l]);
  }
  tape.head_in = std::move(cur);
  tape.out = sigmoid(head_.forward(tape.head_in));
  return tape.out;
}

template <typename T>
Tensor<T> UNet<T>::backward(const Tape& tape, const Tensor<T>& dy, bool accumulate) {
  if (!tape.full) throw DomainError("unet backward: tape is not from a full forward pass");
  require_same_shape(tape.out.shape, dy.shape, "unet backward");
  const std::size_t d = cfg_.depth;
  Tensor<T> g = head_.backward(tape.head_in, sigmoid_backward(tape.out, dy), accumulate);
  std::vector<Tensor<T>> dskip(d);
  for (std::size_t l = 0; l < d; ++l) {
    Tensor<T> dcat = dec_[l].backward(tape.dec[l], g, accumulate);
    Tensor<T> du;
    split_channels(dcat, dcat.shape.c - tape.enc[l].out.shape.c, du, dskip[l]);
    g = up_[l].backward(tape.up_in[l], du, accumulate);
  }
  g = bottleneck_.backward(tape.bottleneck, g, accumulate);
  for (std::size_t l = d; l-- > 0;) {
    Tensor<T> de = maxpool2_backward(tape.pool_in[l], tape.pool_argmax[l], g);
    add_inplace(de, dskip[l]);
    g = enc_[l].backward(tape.enc[l], de, accumulate);
  }
  return g;
}

template <typename T>
void UNet<T>::commit(const Tape& tape) {
  for (std::size_t l = 0; l < tape.levels_run; ++l) enc_[l].commit(tape.enc[l]);
  if (tape.bottleneck_run) bottleneck_.commit(tape.bottleneck);
  if (tape.full) {
    for (std::size_t l = 0; l < cfg_.depth; ++l) dec_[l].commit(tape.dec[l]);
  }
}

template <typename T>
Tensor<T> UNet<T>::forward_features(const Tensor<T>& x, std::size_t k, Mode mode,
                                    Tape& tape) const {
  if (k > feature_layers()) {
    throw ConfigError("feature layer " + std::to_string(k) + " beyond transform net depth (max " +
                      std::to_string(feature_layers()) + ")");
  }
  check_input(x.shape);
  tape.full = false;
  tape.bottleneck_run = k == cfg_.depth + 1;
  tape.levels_run = std::min(k, cfg_.depth);
  tape.enc.assign(tape.levels_run, {});
  tape.pool_argmax.assign(cfg_.depth, {});
  tape.pool_in.assign(cfg_.depth, {});
  if (k == 0) return x;
  Tensor<T> cur = x;
  for (std::size_t l = 0; l < tape.levels_run; ++l) {
    if (l > 0) {
      tape.pool_in[l - 1] = tape.enc[l - 1].out.shape;
      cur = maxpool2(tape.enc[l - 1].out, tape.pool_argmax[l - 1]);
    }
    cur = enc_[l].forward(cur, mode, tape.enc[l]);
  }
  if (k == cfg_.depth + 1) {
    const std::size_t last = cfg_.depth - 1;
    tape.pool_in[last] = tape.enc[last].out.shape;
    cur = maxpool2(tape.enc[last].out, tape.pool_argmax[last]);
    cur = bottleneck_.forward(cur, mode, tape.bottleneck);
  }
  return cur;
}

template <typename T>
Tensor<T> UNet<T>::backward_features(const Tape& tape, const Tensor<T>& dfeat) {
  Tensor<T> g = dfeat;
  if (tape.levels_run == 0) return g;
  if (tape.bottleneck_run) {
    g = bottleneck_.backward(tape.bottleneck, g, false);
    g = maxpool2_backward(tape.pool_in[cfg_.depth - 1], tape.pool_argmax[cfg_.depth - 1], g);
  }
  for (std::size_t l = tape.levels_run; l-- > 0;) {
    g = enc_[l].backward(tape.enc[l], g, false);
    if (l > 0) g = maxpool2_backward(tape.pool_in[l - 1], tape.pool_argmax[l - 1], g);
  }
  return g;
}

template <typename T>
void UNet<T>::collect(ParamList<T>& params, StateList<T>& state) {
  for (auto& b : enc_) b.collect(params, state);
  bottleneck_.collect(params, state);
  for (std::size_t l = cfg_.depth; l-- > 0;) {
    up_[l].collect(params, state);
    dec_[l].collect(params, state);
  }
  head_.collect(params, state);
}

// ------------------------------------------------------------ BasicBlock

namespace {

// Option-A shortcut: spatial subsampling plus symmetric zero channel padding.
template <typename T>
Tensor<T> shortcut(const Tensor<T>& x, std::size_t out_c, std::size_t stride) {
  const Shape& s = x.shape;
  const std::size_t ho = (s.h + stride - 1) / stride, wo = (s.w + stride - 1) / stride;
  const std::size_t front = (out_c - s.c) / 2;
  Tensor<T> y(Shape{s.n, out_c, ho, wo});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) y.at(n, c + front, i, j) = x.at(n, c, i * stride, j * stride);
  return y;
}

template <typename T>
void shortcut_backward(const Tensor<T>& dy, std::size_t stride, Tensor<T>& dx) {
  const Shape& s = dx.shape;
  const std::size_t front = (dy.shape.c - s.c) / 2;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < dy.shape.h; ++i)
        for (std::size_t j = 0; j < dy.shape.w; ++j)
          dx.at(n, c, i * stride, j * stride) += dy.at(n, c + front, i, j);
}

}  // namespace

template <typename T>
BasicBlock<T>::BasicBlock(const std::string& name, std::size_t in, std::size_t out,
                          std::size_t stride, Rng& rng)
    : in_(in),
      out_(out),
      stride_(stride),
      conv1_(name + ".conv1", in, out, 3, stride, 1, false, rng),
      conv2_(name + ".conv2", out, out, 3, 1, 1, false, rng),
      bn1_(name + ".bn1", out),
      bn2_(name + ".bn2", out) {}

template <typename T>
Tensor<T> BasicBlock<T>::forward(const Tensor<T>& x, Mode mode, Tape& tape) const {
  tape.x = x;
  tape.r1 = relu(bn1_.forward(conv1_.forward(x), mode, tape.bn1));
  Tensor<T> b = bn2_.forward(conv2_.forward(tape.r1), mode, tape.bn2);
  if (stride_ == 1 && in_ == out_) {
    add_inplace(b, x);
  } else {
    add_inplace(b, shortcut(x, out_, stride_));
  }
  tape.out = relu(b);
  return tape.out;
}

template <typename T>
Tensor<T> BasicBlock<T>::backward(const Tape& tape, const Tensor<T>& dy, bool accumulate) {
  const Tensor<T> dpre = relu_backward(tape.out, dy);
  Tensor<T> d = bn2_.backward(tape.bn2, dpre, accumulate);
  d = conv2_.backward(tape.r1, d, accumulate);
  d = relu_backward(tape.r1, d);
  d = bn1_.backward(tape.bn1, d, accumulate);
  Tensor<T> dx = conv1_.backward(tape.x, d, accumulate);
  if (stride_ == 1 && in_ == out_) {
    add_inplace(dx, dpre);
  } else {
    shortcut_backward(dpre, stride_, dx);
  }
  return dx;
}

template <typename T>
void BasicBlock<T>::commit(const Tape& tape) {
  bn1_.commit(tape.bn1);
  bn2_.commit(tape.bn2);
}

template <typename T>
void BasicBlock<T>::collect(ParamList<T>& params, StateList<T>& state) {
  conv1_.collect(params, state);
  bn1_.collect(params, state);
  conv2_.collect(params, state);
  bn2_.collect(params, state);
}

// ------------------------------------------------------------ Classifier

template <typename T>
Classifier<T>::Classifier(const ClassifierConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const auto& w = cfg.stage_widths;
  stem_ = Conv2d<T>("stem.conv", cfg.channels, w[0], 3, 1, 1, false, rng);
  stem_bn_ = BatchNorm2d<T>("stem.bn", w[0]);
  std::size_t in = w[0];
  for (std::size_t s = 0; s < w.size(); ++s) {
    for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      blocks_.emplace_back("stage" + std::to_string(s) + ".block" + std::to_string(b), in, w[s],
                           stride, rng);
      in = w[s];
    }
    stage_end_.push_back(blocks_.size());
  }
  fc_ = Linear<T>("fc", w.back(), cfg.classes, rng);
}

template <typename T>
Tensor<T> Classifier<T>::run(const Tensor<T>& x, Mode mode, Tape& tape, std::size_t stop) const {
  if (x.shape.c != cfg_.channels) {
    throw DomainError("classifier expects " + std::to_string(cfg_.channels) +
                      " channels, got " + x.shape.str());
  }
  tape.layers_run = 0;
  tape.blocks.clear();
  if (stop == 0) return x;
  tape.x = x;
  tape.stem_out = relu(stem_bn_.forward(stem_.forward(x), mode, tape.stem_bn));
  tape.layers_run = 1;
  Tensor<T> cur = tape.stem_out;
  const std::size_t nblocks = stop == std::numeric_limits<std::size_t>::max()
                                  ? blocks_.size()
                                  : (stop == 1 ? 0 : stage_end_[stop - 2]);
  tape.blocks.resize(nblocks);
  for (std::size_t b = 0; b < nblocks; ++b) cur = blocks_[b].forward(cur, mode, tape.blocks[b]);
  if (stop != std::numeric_limits<std::size_t>::max()) {
    tape.layers_run = stop;
    return cur;
  }
  tape.layers_run = std::numeric_limits<std::size_t>::max();
  tape.gap_in = cur.shape;
  tape.pooled = global_avg_pool(cur);
  return fc_.forward(tape.pooled);
}

template <typename T>
Tensor<T> Classifier<T>::unwind(const Tape& tape, Tensor<T> d, bool accumulate) {
  if (tape.layers_run == 0) return d;
  if (tape.layers_run == std::numeric_limits<std::size_t>::max()) {
    d = fc_.backward(tape.pooled, d, accumulate);
    d = global_avg_pool_backward(tape.gap_in, d);
  }
  for (std::size_t b = tape.blocks.size(); b-- > 0;) {
    d = blocks_[b].backward(tape.blocks[b], d, accumulate);
  }
  d = relu_backward(tape.stem_out, d);
  d = stem_bn_.backward(tape.stem_bn, d, accumulate);
  return stem_.backward(tape.x, d, accumulate);
}

template <typename T>
Tensor<T> Classifier<T>::forward(const Tensor<T>& x, Mode mode, Tape& tape) const {
  return run(x, mode, tape, std::numeric_limits<std::size_t>::max());
}

template <typename T>
Tensor<T> Classifier<T>::backward(const Tape& tape, const Tensor<T>& dlogits, bool accumulate) {
  if (tape.layers_run != std::numeric_limits<std::size_t>::max()) {
    throw DomainError("classifier backward: tape is not from a full forward pass");
  }
  return unwind(tape, dlogits, accumulate);
}

template <typename T>
void Classifier<T>::commit(const Tape& tape) {
  if (tape.layers_run == 0) return;
  stem_bn_.commit(tape.stem_bn);
  for (std::size_t b = 0; b < tape.blocks.size(); ++b) blocks_[b].commit(tape.blocks[b]);
}

template <typename T>
Tensor<T> Classifier<T>::forward_features(const Tensor<T>& x, std::size_t k, Mode mode,
                                          Tape& tape) const {
  if (k > feature_layers()) {
    throw ConfigError("feature layer " + std::to_string(k) + " beyond classifier depth (max " +
                      std::to_string(feature_layers()) + ")");
  }
  return run(x, mode, tape, k);
}

template <typename T>
Tensor<T> Classifier<T>::backward_features(const Tape& tape, const Tensor<T>& dfeat) {
  return unwind(tape, dfeat, false);
}

template <typename T>
void Classifier<T>::collect(ParamList<T>& params, StateList<T>& state) {
  stem_.collect(params, state);
  stem_bn_.collect(params, state);
  for (auto& b : blocks_) b.collect(params, state);
  fc_.collect(params, state);
}

// ---------------------------------------------------------- TransformNet

template <typename T>
TransformNet<T>::TransformNet(const TransformNetConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg), seed_(init_seed) {
  cfg_.validate();
  if (cfg_.kind == "unet") {
    Rng rng(init_seed);
    unet_.emplace(cfg_, rng);
  }
}

template <typename T>
Tensor<T> TransformNet<T>::forward(const Tensor<T>& x, Mode mode, Tape& tape) const {
  if (unet_) return unet_->forward(x, mode, tape);
  if (x.shape.c != cfg_.channels) throw DomainError("identity transform: channel mismatch");
  tape = Tape{};
  return x;
}

template <typename T>
Tensor<T> TransformNet<T>::backward(const Tape& tape, const Tensor<T>& dy, bool accumulate) {
  if (unet_) return unet_->backward(tape, dy, accumulate);
  return dy;
}

template <typename T>
void TransformNet<T>::commit(const Tape& tape) {
  if (unet_) unet_->commit(tape);
}

template <typename T>
ParamList<T> TransformNet<T>::parameters() {
  ParamList<T> p;
  StateList<T> s;
  if (unet_) unet_->collect(p, s);
  return p;
}

template <typename T>
StateList<T> TransformNet<T>::state() {
  ParamList<T> p;
  StateList<T> s;
  if (unet_) unet_->collect(p, s);
  return s;
}

// ------------------------------------------------------ FeatureExtractor

template <typename T>
FeatureExtractor<T> FeatureExtractor<T>::identity() {
  return FeatureExtractor{};
}

template <typename T>
FeatureExtractor<T> FeatureExtractor<T>::of_classifier(Classifier<T>& net, std::size_t k) {
  if (k > net.feature_layers()) {
    throw ConfigError("feature layer " + std::to_string(k) + " beyond classifier depth (max " +
                      std::to_string(net.feature_layers()) + ")");
  }
  FeatureExtractor f;
  if (k > 0) f.cls_ = &net;
  f.k_ = k;
  return f;
}

template <typename T>
FeatureExtractor<T> FeatureExtractor<T>::of_transform(TransformNet<T>& net, std::size_t k) {
  if (net.is_identity()) {
    if (k != 0) throw ConfigError("feature: identity transform only has layer 0");
    return identity();
  }
  if (k > net.unet()->feature_layers()) {
    throw ConfigError("feature layer " + std::to_string(k) + " beyond transform net depth (max " +
                      std::to_string(net.unet()->feature_layers()) + ")");
  }
  FeatureExtractor f;
  if (k > 0) f.unet_ = net.unet();
  f.k_ = k;
  return f;
}

template <typename T>
Tensor<T> FeatureExtractor<T>::extract(const Tensor<T>& x) const {
  Tape tape;
  return extract(x, tape);
}

template <typename T>
Tensor<T> FeatureExtractor<T>::extract(const Tensor<T>& x, Tape& tape) const {
  if (cls_) return cls_->forward_features(x, k_, Mode::Eval, tape.cls);
  if (unet_) return unet_->forward_features(x, k_, Mode::Eval, tape.unet);
  return x;
}

template <typename T>
Tensor<T> FeatureExtractor<T>::backward(const Tape& tape, const Tensor<T>& dfeat) const {
  if (cls_) return cls_->backward_features(tape.cls, dfeat);
  if (unet_) return unet_->backward_features(tape.unet, dfeat);
  return dfeat;
}

// --------------------------------------------------------- entry points

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  const std::size_t n = logits.shape.n, c = logits.shape.sample_size();
  Tensor<T> p(logits.shape);
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.ptr() + i * c;
    T* out = p.ptr() + i * c;
    const T mx = *std::max_element(z, z + c);
    double sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(z[j] - mx));
    for (std::size_t j = 0; j < c; ++j) {
      out[j] = static_cast<T>(std::exp(static_cast<double>(z[j] - mx)) / sum);
    }
  }
  return p;
}

ImageBatch forward_transform(const TransformNet<float>& net, const ImageBatch& x) {
  TransformNet<float>::Tape tape;
  return net.forward(x, Mode::Eval, tape);
}

std::vector<std::vector<double>> classify(const Classifier<float>& net, const ImageBatch& x) {
  Classifier<float>::Tape tape;
  const Tensor<float> p = softmax_rows(net.forward(x, Mode::Eval, tape));
  const std::size_t c = net.classes();
  std::vector<std::vector<double>> rows(x.shape.n, std::vector<double>(c));
  for (std::size_t i = 0; i < x.shape.n; ++i) {
    for (std::size_t j = 0; j < c; ++j) rows[i][j] = p.data[i * c + j];
  }
  return rows;
}

Tensor<float> extract_features(const FeatureExtractor<float>& phi, const ImageBatch& x) {
  return phi.extract(x);
}

template class ConvBlock<float>;
template class ConvBlock<double>;
template class UNet<float>;
template class UNet<double>;
template class BasicBlock<float>;
template class BasicBlock<double>;
template class Classifier<float>;
template class Classifier<double>;
template class TransformNet<float>;
template class TransformNet<double>;
template class FeatureExtractor<float>;
template class FeatureExtractor<double>;
template Tensor<float> softmax_rows(const Tensor<float>&);
template Tensor<double> softmax_rows(const Tensor<double>&);

}  // namespace protnet
