#include "protnet/checkpoint.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <map>

#include "protnet/image_io.hpp"

namespace protnet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

namespace {

constexpr std::size_t kDigestBytes = 32;

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  std::uint8_t b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.insert(out.end(), b, b + sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) throw SerializationError("checkpoint truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::array<std::uint8_t, kDigestBytes> sha256(std::span<const std::uint8_t> bytes) {
  std::array<std::uint8_t, kDigestBytes> d{};
  unsigned len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), d.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw SerializationError("SHA-256 computation failed");
  }
  return d;
}

template <typename Net>
void add_state(Checkpoint& ckpt, const std::string& prefix, Net& net) {
  ParamList<float> p;
  StateList<float> s;
  net.collect(p, s);
  for (const auto& ref : s) ckpt.tensors.push_back({prefix + "." + ref.name, *ref.tensor});
}

void restore_state(const Checkpoint& ckpt, const std::string& prefix, StateList<float> state) {
  for (const auto& ref : state) {
    const std::string name = prefix + "." + ref.name;
    const Tensor<float>* t = ckpt.find(name);
    if (!t) throw SerializationError("checkpoint lacks tensor " + name);
    if (!(t->shape == ref.tensor->shape)) {
      throw SerializationError("checkpoint tensor " + name + " has shape " + t->shape.str() +
                               ", network expects " + ref.tensor->shape.str());
    }
    ref.tensor->data = t->data;
  }
}

}  // namespace

void to_json(nlohmann::json& j, const CheckpointManifest& m) {
  j = {{"architecture", m.architecture}, {"epoch", m.epoch},   {"val_loss", m.val_loss},
       {"alpha", m.alpha},               {"seed", m.seed},     {"dataset", m.dataset},
       {"networks", m.networks},         {"extra", m.extra}};
}

void from_json(const nlohmann::json& j, CheckpointManifest& m) {
  m.architecture = j.value("architecture", "");
  m.epoch = j.value("epoch", 0);
  m.val_loss = j.value("val_loss", 0.0);
  m.alpha = j.value("alpha", 0.0);
  m.seed = j.value("seed", std::uint64_t{0});
  m.dataset = j.value("dataset", "");
  m.networks = j.value("networks", nlohmann::json::object());
  m.extra = j.value("extra", nlohmann::json::object());
}

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.tensor;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string manifest = nlohmann::json(ckpt.manifest).dump(2);
  put<std::uint64_t>(out, manifest.size());
  out.insert(out.end(), manifest.begin(), manifest.end());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (t.size() != t.shape.size()) throw SerializationError("tensor " + name + " inconsistent");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint8_t>(out, 0);  // dtype: float32
    put<std::uint64_t>(out, t.shape.n);
    put<std::uint64_t>(out, t.shape.c);
    put<std::uint64_t>(out, t.shape.h);
    put<std::uint64_t>(out, t.shape.w);
    const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data.data());
    out.insert(out.end(), raw, raw + t.size() * sizeof(float));
  }
  const auto digest = sha256(out);
  out.insert(out.end(), digest.begin(), digest.end());
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) + 4 + kDigestBytes) {
    throw SerializationError("checkpoint truncated");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw SerializationError("not a checkpoint archive (bad magic)");
  }
  Reader head(bytes.subspan(sizeof(kCheckpointMagic)));
  const auto version = head.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw SerializationError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto body = bytes.first(bytes.size() - kDigestBytes);
  const auto stored = bytes.last(kDigestBytes);
  const auto digest = sha256(body);
  if (!std::equal(digest.begin(), digest.end(), stored.begin())) {
    throw SerializationError("checkpoint corrupt or truncated (digest mismatch)");
  }

  Reader r(body.subspan(sizeof(kCheckpointMagic) + 4));
  Checkpoint ckpt;
  const auto mlen = r.get<std::uint64_t>();
  const auto mbytes = r.take(mlen);
  try {
    ckpt.manifest = nlohmann::json::parse(mbytes.begin(), mbytes.end()).get<CheckpointManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw SerializationError(std::string("checkpoint manifest unreadable: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    const auto nlen = r.get<std::uint32_t>();
    const auto name = r.take(nlen);
    nt.name.assign(name.begin(), name.end());
    if (r.get<std::uint8_t>() != 0) throw SerializationError("unsupported dtype in " + nt.name);
    Shape s;
    s.n = r.get<std::uint64_t>();
    s.c = r.get<std::uint64_t>();
    s.h = r.get<std::uint64_t>();
    s.w = r.get<std::uint64_t>();
    if (s.size() * sizeof(float) > r.remaining()) throw SerializationError("checkpoint truncated");
    const auto raw = r.take(s.size() * sizeof(float));
    nt.tensor = Tensor<float>(s);
    std::memcpy(nt.tensor.data.data(), raw.data(), raw.size());
    ckpt.tensors.push_back(std::move(nt));
  }
  if (r.remaining() != 0) throw SerializationError("trailing bytes in checkpoint");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_bytes(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FileError("checkpoint not found: " + path.string());
  return decode_checkpoint(read_bytes(path));
}

void add_network(Checkpoint& ckpt, const std::string& prefix, TransformNet<float>& net) {
  nlohmann::json d = net.config();
  d["role"] = "transform";
  d["init_seed"] = net.init_seed();
  ckpt.manifest.networks[prefix] = d;
  for (const auto& ref : net.state()) ckpt.tensors.push_back({prefix + "." + ref.name, *ref.tensor});
}

void add_network(Checkpoint& ckpt, const std::string& prefix, Classifier<float>& net) {
  nlohmann::json d = net.config();
  d["role"] = "classifier";
  ckpt.manifest.networks[prefix] = d;
  add_state(ckpt, prefix, net);
}

void restore_network(const Checkpoint& ckpt, const std::string& prefix, TransformNet<float>& net) {
  restore_state(ckpt, prefix, net.state());
}

void restore_network(const Checkpoint& ckpt, const std::string& prefix, Classifier<float>& net) {
  restore_state(ckpt, prefix, state_of(net));
}

bool has_network(const Checkpoint& ckpt, const std::string& prefix) {
  return ckpt.manifest.networks.contains(prefix);
}

TransformNet<float> load_transform_net(const Checkpoint& ckpt, const std::string& prefix) {
  if (!has_network(ckpt, prefix)) {
    throw SerializationError("checkpoint holds no network '" + prefix + "'");
  }
  nlohmann::json d = ckpt.manifest.networks.at(prefix);
  if (d.value("role", "") != "transform") {
    throw SerializationError("network '" + prefix + "' is not a transform network");
  }
  const auto seed = d.value("init_seed", std::uint64_t{0});
  d.erase("role");
  d.erase("init_seed");
  TransformNet<float> net;
  try {
    net = TransformNet<float>(d.get<TransformNetConfig>(), seed);
  } catch (const ConfigError& e) {
    throw SerializationError(std::string("bad network descriptor: ") + e.what());
  }
  restore_network(ckpt, prefix, net);
  return net;
}

Classifier<float> load_classifier(const Checkpoint& ckpt, const std::string& prefix) {
  if (!has_network(ckpt, prefix)) {
    throw SerializationError("checkpoint holds no network '" + prefix + "'");
  }
  nlohmann::json d = ckpt.manifest.networks.at(prefix);
  if (d.value("role", "") != "classifier") {
    throw SerializationError("network '" + prefix + "' is not a classifier");
  }
  d.erase("role");
  Classifier<float> net;
  try {
    net = build_classifier<float>(d.get<ClassifierConfig>(), 0);
  } catch (const ConfigError& e) {
    throw SerializationError(std::string("bad network descriptor: ") + e.what());
  }
  restore_network(ckpt, prefix, net);
  return net;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  for (std::uint8_t b : sha256(bytes)) {
    s.push_back(kHex[b >> 4]);
    s.push_back(kHex[b & 15]);
  }
  return s;
}

}  // namespace protnet
