// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctvr/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "ctvr/errors.hpp"
#include "ctvr/ops.hpp"

namespace ctvr::model {

using nn::Tensor;

Model::Model(backbone::BackboneParams backbone, const ModelConfig& config)
    : backbone_(std::move(backbone)), config_(config) {
  backbone_.params.freeze_all();
  const auto& bc = backbone_.config;
  if (config_.attach_depth > bc.vision_layers) {
    throw ConfigError("attach_depth " + std::to_string(config_.attach_depth) + " exceeds vision depth " +
                      std::to_string(bc.vision_layers));
  }
  config_.tame.lambda = static_cast<float>(config_.tame.lambda);
  if (!config_.tame_enabled) config_.tame.lambda = 0.0;

  Rng rng(mix_seed(config_.seed, 0xAD));
  ffa_ = ffa::make_stack(config_.attach_depth, bc.width, bc.heads, rng);
  ffa::register_parameters(ffa_, adapters_);
  if (config_.tame_enabled) {
    tame_ = tame::make_stack(bc.text_layers, bc.width, config_.tame, rng);
    tame::register_parameters(tame_, adapters_);
  } else {
    tame_.config = config_.tame;
    tame_.enabled = false;
  }
  // Without routing a prototype has nothing to condition, so it stays pinned.
  bank_ = tame::PrototypeBank(bc.width, config_.prototypes_pinned || !config_.tame_enabled);
  adapters_.round_to_float();
}

void Model::begin_task(std::size_t t) { bank_.begin_task(t, &adapters_); }

Tensor Model::encode_videos(std::span<const data::Video* const> videos) const {
  return backbone::video_features(backbone::encode_video_batch(videos, backbone_, &ffa_));
}

Tensor Model::encode_queries(std::span<const std::vector<std::int32_t>* const> queries, std::size_t prototype) const {
  const Tensor* p = prototype == 0 ? nullptr : &bank_.prototype(prototype);
  return backbone::encode_text_batch(queries, backbone_, &tame_, p).eos;
}

std::vector<Tensor> Model::conditional_query_sweep(std::span<const std::vector<std::int32_t>* const> queries) const {
  if (bank_.empty()) throw ProtocolError("conditional_query_sweep: no prototypes stored");
  std::vector<Tensor> out;
  if (!tame_.enabled) {
    // Prototypes never reach the text path; one pass serves every task.
    const Tensor q = encode_queries(queries, 1);
    out.assign(bank_.size(), q);
    return out;
  }
  for (std::size_t i = 1; i <= bank_.size(); ++i) out.push_back(encode_queries(queries, i));
  return out;
}

std::vector<std::pair<std::size_t, Tensor>> Model::conditional_query_sweep(const std::vector<std::int32_t>& ids) const {
  const std::vector<std::int32_t>* one[] = {&ids};
  const auto batched = conditional_query_sweep(std::span<const std::vector<std::int32_t>* const>(one));
  std::vector<std::pair<std::size_t, Tensor>> out;
  for (std::size_t i = 0; i < batched.size(); ++i)
    out.emplace_back(i + 1, nn::reshape(batched[i], {width()}));
  return out;
}

backbone::AttentionCapture Model::capture_attention(const data::Video& video, std::size_t layer) const {
  if (layer >= backbone_.config.vision_layers) {
    throw UsageError("layer " + std::to_string(layer) + " out of range (vision depth " +
                     std::to_string(backbone_.config.vision_layers) + ")");
  }
  nn::NoGradGuard guard;
  backbone::AttentionCapture capture;
  capture.layer = layer;
  const data::Video* one[] = {&video};
  backbone::encode_video_batch(one, backbone_, &ffa_, &capture);
  return capture;
}

// ---- checkpoint I/O ----

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

namespace {

template <typename T>
void put(std::string& buf, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  buf.append(bytes, sizeof(T));
}

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;

  template <typename T>
  T get() {
    if (pos + sizeof(T) > bytes.size()) throw FormatError("checkpoint truncated at byte " + std::to_string(pos));
    T value;
    std::memcpy(&value, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
  }
};

using TensorMap = std::map<std::string, Tensor>;

TensorMap to_map(const NamedTensors& tensors) {
  TensorMap m;
  for (const auto& [name, t] : tensors)
    if (!m.emplace(name, t).second) throw FormatError("checkpoint repeats tensor '" + name + "'");
  return m;
}

double scalar(const TensorMap& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw FormatError("checkpoint lacks '" + name + "'");
  if (it->second.numel() != 1) throw FormatError("checkpoint entry '" + name + "' is not a scalar");
  return it->second.item();
}

std::size_t count(const TensorMap& m, const std::string& name) {
  const double v = scalar(m, name);
  if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v))) {
    throw FormatError("checkpoint entry '" + name + "' is not a count");
  }
  return static_cast<std::size_t>(v);
}

// Copies values for every name in `target` from `source`; shapes must agree.
void fill(nn::ParameterSet& target, const TensorMap& source, std::set<std::string>& used) {
  for (const auto& name : target.names()) {
    auto it = source.find(name);
    if (it == source.end()) throw FormatError("checkpoint lacks tensor '" + name + "'");
    Tensor& dst = target.at(name);
    if (it->second.shape() != dst.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + nn::shape_str(it->second.shape()) +
                        ", expected " + nn::shape_str(dst.shape()));
    }
    auto out = dst.mutable_values();
    auto in = it->second.values();
    std::copy(in.begin(), in.end(), out.begin());
    used.insert(name);
  }
}

void backbone_tensors(NamedTensors& out, const backbone::BackboneParams& bp) {
  const auto& c = bp.config;
  auto s = [&](const char* name, double v) { out.emplace_back(std::string("config.") + name, Tensor::scalar(v)); };
  s("width", static_cast<double>(c.width));
  s("heads", static_cast<double>(c.heads));
  s("vision_layers", static_cast<double>(c.vision_layers));
  s("text_layers", static_cast<double>(c.text_layers));
  s("patches", static_cast<double>(c.patches));
  s("input_width", static_cast<double>(c.input_width));
  s("vocab", static_cast<double>(c.vocab));
  s("context", static_cast<double>(c.context));
  s("mlp_ratio", static_cast<double>(c.mlp_ratio));
  s("ln_eps", c.ln_eps);
  for (const auto& [name, t] : bp.params.entries()) out.emplace_back(name, t);
}

backbone::BackboneParams backbone_from(const TensorMap& m, std::set<std::string>& used) {
  backbone::BackboneConfig c;
  c.width = count(m, "config.width");
  c.heads = count(m, "config.heads");
  c.vision_layers = count(m, "config.vision_layers");
  c.text_layers = count(m, "config.text_layers");
  c.patches = count(m, "config.patches");
  c.input_width = count(m, "config.input_width");
  c.vocab = count(m, "config.vocab");
  c.context = count(m, "config.context");
  c.mlp_ratio = count(m, "config.mlp_ratio");
  c.ln_eps = scalar(m, "config.ln_eps");
  c.tau_pre = scalar(m, "logit.tau_pre");
  for (const char* k : {"width", "heads", "vision_layers", "text_layers", "patches", "input_width", "vocab",
                        "context", "mlp_ratio", "ln_eps"})
    used.insert(std::string("config.") + k);
  backbone::BackboneParams bp = backbone::init_backbone(c);
  fill(bp.params, m, used);
  bp.params.freeze_all();
  return bp;
}

void reject_unused(const TensorMap& m, const std::set<std::string>& used) {
  for (const auto& [name, t] : m)
    if (!used.count(name)) throw FormatError("checkpoint has unexpected tensor '" + name + "'");
}

}  // namespace

void write_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::string buf(kCheckpointMagic, sizeof kCheckpointMagic);
  put(buf, kCheckpointVersion);
  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.size() > 0xFFFF) throw FormatError("tensor name length out of range");
    if (t.rank() > 0xFF) throw FormatError("tensor rank out of range");
    put(buf, static_cast<std::uint16_t>(name.size()));
    buf.append(name);
    put(buf, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put(buf, static_cast<std::uint32_t>(d));
    for (double v : t.values()) put(buf, static_cast<float>(v));
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

NamedTensors read_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::string bytes(std::istreambuf_iterator<char>(in), {});
  if (bytes.size() < sizeof kCheckpointMagic + 4 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw FormatError("bad checkpoint magic in " + path.string());
  }
  Reader r{bytes, sizeof kCheckpointMagic};
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  NamedTensors out;
  while (r.pos < bytes.size()) {
    const auto len = r.get<std::uint16_t>();
    if (r.pos + len > bytes.size()) throw FormatError("checkpoint truncated in a tensor name");
    std::string name = bytes.substr(r.pos, len);
    r.pos += len;
    const auto rank = r.get<std::uint8_t>();
    nn::Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    std::vector<double> values(nn::numel(shape));
    for (auto& v : values) v = r.get<float>();
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  return out;
}

void save_backbone(const std::filesystem::path& path, const backbone::BackboneParams& backbone) {
  NamedTensors t;
  backbone_tensors(t, backbone);
  write_tensors(path, t);
}

backbone::BackboneParams load_backbone(const std::filesystem::path& path) {
  const TensorMap m = to_map(read_tensors(path));
  std::set<std::string> used;
  auto bp = backbone_from(m, used);
  reject_unused(m, used);
  return bp;
}

void save_model(const std::filesystem::path& path, const Model& model) {
  NamedTensors t;
  backbone_tensors(t, model.backbone());
  const auto& c = model.config();
  auto s = [&](const char* name, double v) { t.emplace_back(std::string("config.") + name, Tensor::scalar(v)); };
  s("attach_depth", static_cast<double>(c.attach_depth));
  s("tame.enabled", c.tame_enabled ? 1.0 : 0.0);
  s("tame.experts", static_cast<double>(c.tame.experts));
  s("tame.k", static_cast<double>(c.tame.effective_k()));
  s("tame.rank", static_cast<double>(c.tame.rank));
  s("tame.lambda", c.tame.lambda);
  double roles = 0;
  for (auto role : c.tame.roles) roles += static_cast<double>(1u << static_cast<unsigned>(role));
  s("tame.roles", roles);
  s("proto.pinned", c.prototypes_pinned ? 1.0 : 0.0);
  s("proto.count", static_cast<double>(model.bank().size()));
  for (const auto& [name, tensor] : model.adapters().entries()) t.emplace_back(name, tensor);
  write_tensors(path, t);
}

Model load_model(const std::filesystem::path& path) {
  const TensorMap m = to_map(read_tensors(path));
  std::set<std::string> used;
  auto bp = backbone_from(m, used);

  ModelConfig c;
  c.attach_depth = count(m, "config.attach_depth");
  c.tame_enabled = scalar(m, "config.tame.enabled") != 0.0;
  c.tame.experts = count(m, "config.tame.experts");
  c.tame.top_k = count(m, "config.tame.k");
  c.tame.rank = count(m, "config.tame.rank");
  c.tame.lambda = scalar(m, "config.tame.lambda");
  const std::size_t roles = count(m, "config.tame.roles");
  c.tame.roles.clear();
  for (auto role : {tame::Role::kQ, tame::Role::kK, tame::Role::kV, tame::Role::kOut})
    if (roles & (1u << static_cast<unsigned>(role))) c.tame.roles.push_back(role);
  c.prototypes_pinned = scalar(m, "config.proto.pinned") != 0.0;
  const std::size_t prototypes = count(m, "config.proto.count");
  for (const char* k : {"attach_depth", "tame.enabled", "tame.experts", "tame.k", "tame.rank", "tame.lambda",
                        "tame.roles", "proto.pinned", "proto.count"})
    used.insert(std::string("config.") + k);

  Model model(std::move(bp), c);
  for (std::size_t t = 1; t <= prototypes; ++t) model.begin_task(t);
  fill(model.adapters_, m, used);
  reject_unused(m, used);
  return model;
}

}  // namespace ctvr::model
