// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctvr/backbone.hpp"

#include <cmath>
#include <numeric>

#include "ctvr/errors.hpp"
#include "ctvr/losses.hpp"
#include "ctvr/ops.hpp"
#include "ctvr/optim.hpp"

namespace ctvr::backbone {

namespace {

using nn::Tensor;

void add_block(nn::ParameterSet& p, const std::string& prefix, const BackboneConfig& c, Rng& rng) {
  const std::size_t o = c.width, h = c.width * c.mlp_ratio;
  const double s = 1.0 / std::sqrt(static_cast<double>(o));
  const double out_s = s / std::sqrt(2.0 * static_cast<double>(std::max(c.vision_layers, c.text_layers)));
  p.add(prefix + "ln1.g", Tensor::full({o}, 1.0));
  p.add(prefix + "ln1.b", Tensor::zeros({o}));
  p.add(prefix + "wq", rng.normal_tensor({o, o}, s));
  p.add(prefix + "wk", rng.normal_tensor({o, o}, s));
  p.add(prefix + "wv", rng.normal_tensor({o, o}, s));
  p.add(prefix + "wo", rng.normal_tensor({o, o}, out_s));
  p.add(prefix + "ln2.g", Tensor::full({o}, 1.0));
  p.add(prefix + "ln2.b", Tensor::zeros({o}));
  p.add(prefix + "fc1", rng.normal_tensor({h, o}, s));
  p.add(prefix + "fc1_b", Tensor::zeros({h}));
  p.add(prefix + "fc2", rng.normal_tensor({o, h}, out_s * std::sqrt(static_cast<double>(o) / static_cast<double>(h))));
  p.add(prefix + "fc2_b", Tensor::zeros({o}));
}

struct Block {
  const Tensor &ln1_g, &ln1_b, &wq, &wk, &wv, &wo, &ln2_g, &ln2_b, &fc1, &fc1_b, &fc2, &fc2_b;
};

Block block(const nn::ParameterSet& p, const std::string& prefix) {
  return {p.at(prefix + "ln1.g"), p.at(prefix + "ln1.b"), p.at(prefix + "wq"), p.at(prefix + "wk"),
          p.at(prefix + "wv"),    p.at(prefix + "wo"),    p.at(prefix + "ln2.g"), p.at(prefix + "ln2.b"),
          p.at(prefix + "fc1"),   p.at(prefix + "fc1_b"), p.at(prefix + "fc2"), p.at(prefix + "fc2_b")};
}

Tensor mlp(const Block& b, const Tensor& x, double eps) {
  const Tensor h = nn::layer_norm(x, b.ln2_g, b.ln2_b, eps);
  return nn::add_row(nn::linear(nn::gelu(nn::add_row(nn::linear(h, b.fc1), b.fc1_b)), b.fc2), b.fc2_b);
}

nn::AttentionSpec attention_spec(const BackboneConfig& c, std::size_t blocks, bool causal) {
  nn::AttentionSpec spec;
  spec.blocks = blocks;
  spec.heads = c.heads;
  spec.scale_divisor = std::sqrt(static_cast<double>(c.width) / static_cast<double>(c.heads));
  spec.causal = causal;
  return spec;
}

}  // namespace

BackboneParams init_backbone(const BackboneConfig& config) {
  if (config.heads == 0 || config.width % config.heads != 0) {
    throw ConfigError("backbone width " + std::to_string(config.width) + " not divisible by " +
                      std::to_string(config.heads) + " heads");
  }
  BackboneParams bp;
  bp.config = config;
  // Scalars that end up in 32-bit checkpoints. Written one at a time through
  // a float local: gcc 11 at -O3 merged the two round trips into a plain copy.
  for (double* v : {&bp.config.ln_eps, &bp.config.tau_pre}) {
    volatile float f = static_cast<float>(*v);
    *v = f;
  }
  Rng rng(mix_seed(config.seed, 0xBB));
  auto& p = bp.params;
  const std::size_t o = config.width;
  p.add("vision.patch_proj", rng.normal_tensor({o, config.input_width}, 1.0 / std::sqrt(static_cast<double>(config.input_width))));
  p.add("vision.cls", rng.normal_tensor({o}, 0.5));
  p.add("vision.pos", rng.normal_tensor({config.patches + 1, o}, 0.1));
  p.add("vision.ln_pre.g", Tensor::full({o}, 1.0));
  p.add("vision.ln_pre.b", Tensor::zeros({o}));
  for (std::size_t b = 0; b < config.vision_layers; ++b) add_block(p, "vision." + std::to_string(b) + ".", config, rng);
  p.add("vision.ln_post.g", Tensor::full({o}, 1.0));
  p.add("vision.ln_post.b", Tensor::zeros({o}));

  p.add("text.tok_emb", rng.normal_tensor({config.vocab, o}, 1.0));
  p.add("text.pos", rng.normal_tensor({config.context, o}, 0.1));
  for (std::size_t b = 0; b < config.text_layers; ++b) add_block(p, "text." + std::to_string(b) + ".", config, rng);
  p.add("text.ln_final.g", Tensor::full({o}, 1.0));
  p.add("text.ln_final.b", Tensor::zeros({o}));
  p.add("logit.tau_pre", Tensor::scalar(bp.config.tau_pre));
  p.freeze("logit.tau_pre");
  return bp;
}

VideoBatch encode_video_batch(std::span<const data::Video* const> videos, const BackboneParams& bp,
                              const ffa::FFAStack* ffa, AttentionCapture* capture) {
  const auto& c = bp.config;
  const auto& p = bp.params;
  if (videos.empty()) throw DimensionError("encode_video_batch: no videos");
  const std::size_t frames = videos[0]->frames;
  if (frames < 1) throw DimensionError("video has no frames");
  for (const auto* v : videos) {
    if (v->frames != frames || v->patches != c.patches || v->width != c.input_width ||
        v->data.size() != v->frames * v->patches * v->width) {
      throw DimensionError("inconsistent frame shapes: expected " + std::to_string(frames) + "x" +
                           std::to_string(c.patches) + "x" + std::to_string(c.input_width));
    }
  }
  if (ffa && ffa->attach_depth() > c.vision_layers) {
    throw ConfigError("FFA attach depth exceeds vision depth");
  }
  const std::size_t n = videos.size(), tokens = c.patches + 1, blocks = n * frames;

  std::vector<double> raw;
  raw.reserve(blocks * c.patches * c.input_width);
  for (const auto* v : videos) raw.insert(raw.end(), v->data.begin(), v->data.end());
  const Tensor patches = nn::linear(Tensor::from({blocks * c.patches, c.input_width}, std::move(raw)),
                                    p.at("vision.patch_proj"));
  // Row 0 of the stacked source is the CLS embedding, patches follow.
  const Tensor source = nn::concat_rows(nn::reshape(p.at("vision.cls"), {1, c.width}), patches);
  std::vector<std::size_t> layout(blocks * tokens), pos_rows(blocks * tokens);
  for (std::size_t f = 0; f < blocks; ++f)
    for (std::size_t t = 0; t < tokens; ++t) {
      layout[f * tokens + t] = t == 0 ? 0 : 1 + f * c.patches + (t - 1);
      pos_rows[f * tokens + t] = t;
    }
  Tensor x = nn::add(nn::gather_rows(source, layout), nn::gather_rows(p.at("vision.pos"), pos_rows));
  x = nn::layer_norm(x, p.at("vision.ln_pre.g"), p.at("vision.ln_pre.b"), c.ln_eps);

  const std::size_t depth = ffa ? ffa->attach_depth() : 0;
  std::vector<std::size_t> prev_rows;
  if (depth > 0) prev_rows = ffa::previous_frame_rows(n, frames, tokens);
  const auto spec = attention_spec(c, blocks, false);
  for (std::size_t l = 0; l < c.vision_layers; ++l) {
    const Block b = block(p, "vision." + std::to_string(l) + ".");
    const bool record = capture && capture->layer == l;
    const Tensor h = nn::layer_norm(x, b.ln1_g, b.ln1_b, c.ln_eps);
    const Tensor sa = nn::linear(
        nn::scaled_dot_attention(nn::linear(h, b.wq), nn::linear(h, b.wk), nn::linear(h, b.wv), spec,
                                 record ? &capture->self_attention : nullptr),
        b.wo);
    if (l < depth) {
      const auto& layer = ffa->layers[l];
      const Tensor ca = ffa::cross_attend(layer, nn::gather_rows(h, prev_rows), h, blocks,
                                          record ? &capture->cross_attention : nullptr);
      x = nn::add(x, ffa::fuse_frame(layer, sa, ca));
    } else {
      x = nn::add(x, sa);
    }
    x = nn::add(x, mlp(b, x, c.ln_eps));
  }
  x = nn::layer_norm(x, p.at("vision.ln_post.g"), p.at("vision.ln_post.b"), c.ln_eps);

  std::vector<std::size_t> cls_rows(blocks);
  for (std::size_t f = 0; f < blocks; ++f) cls_rows[f] = f * tokens;
  VideoBatch out;
  out.videos = n;
  out.frames = frames;
  out.tokens_per_frame = tokens;
  out.cls = nn::gather_rows(x, cls_rows);
  out.tokens = x;
  return out;
}

FrameTokens encode_frames(const data::Video& video, const BackboneParams& params, const ffa::FFAStack* ffa) {
  const data::Video* one[] = {&video};
  VideoBatch batch = encode_video_batch(one, params, ffa);
  FrameTokens out;
  out.tokens = nn::reshape(batch.tokens, {batch.frames, batch.tokens_per_frame, params.config.width});
  out.cls = batch.cls;
  return out;
}

Tensor avg_pool_video(const FrameTokens& frames) {
  const Tensor cls = frames.cls.rank() == 2 ? frames.cls : nn::reshape(frames.cls, {1, frames.cls.numel()});
  return nn::reshape(nn::mean_row_groups(cls, cls.dim(0)), {cls.dim(1)});
}

Tensor video_features(const VideoBatch& batch) { return nn::mean_row_groups(batch.cls, batch.frames); }

std::size_t validate_query(std::span<const std::int32_t> ids, const BackboneConfig& config) {
  if (ids.empty()) throw InputError("empty query");
  if (ids.size() > config.context) {
    throw InputError("query of " + std::to_string(ids.size()) + " tokens exceeds context " +
                     std::to_string(config.context));
  }
  std::size_t eos = ids.size();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= config.vocab) {
      throw InputError("token id " + std::to_string(ids[i]) + " outside vocabulary");
    }
    if (ids[i] == data::kEosToken) {
      if (eos != ids.size()) throw InputError("query contains more than one EOS");
      eos = i;
    } else if (eos != ids.size() && ids[i] != data::kPadToken) {
      throw InputError("non-padding token after EOS");
    }
  }
  if (eos == ids.size()) throw InputError("query has no EOS token");
  return eos;
}

TextBatch encode_text_batch(std::span<const std::vector<std::int32_t>* const> queries, const BackboneParams& bp,
                            const tame::TameStack* tame, const Tensor* prototype) {
  const auto& c = bp.config;
  const auto& p = bp.params;
  if (queries.empty()) throw InputError("encode_text_batch: no queries");
  TextBatch out;
  out.sequences = queries.size();
  for (const auto* q : queries) {
    out.eos_index.push_back(validate_query(*q, c));
    out.length = std::max(out.length, q->size());
  }
  const std::size_t n = out.sequences, len = out.length;
  std::vector<std::size_t> tok_rows(n * len), pos_rows(n * len), eos_rows(n);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < len; ++i) {
      tok_rows[s * len + i] = i < queries[s]->size() ? static_cast<std::size_t>((*queries[s])[i])
                                                     : static_cast<std::size_t>(data::kPadToken);
      pos_rows[s * len + i] = i;
    }
    eos_rows[s] = s * len + out.eos_index[s];
  }
  Tensor x = nn::add(nn::gather_rows(p.at("text.tok_emb"), tok_rows), nn::gather_rows(p.at("text.pos"), pos_rows));

  const bool adapt = tame && tame->enabled;
  const auto spec = attention_spec(c, n, true);
  for (std::size_t l = 0; l < c.text_layers; ++l) {
    const Block b = block(p, "text." + std::to_string(l) + ".");
    auto project = [&](const Tensor& in, const Tensor& w, tame::Role role) {
      const tame::TAMEAdapter* adapter = adapt ? tame->find(l, role) : nullptr;
      if (!adapter) return nn::linear(in, w);
      const Tensor gates = tame::route(*adapter, nn::gather_rows(in, eos_rows), prototype);
      return tame::adapted_linear(*adapter, w, in, gates, len);
    };
    const Tensor h = nn::layer_norm(x, b.ln1_g, b.ln1_b, c.ln_eps);
    const Tensor attn = nn::scaled_dot_attention(project(h, b.wq, tame::Role::kQ), project(h, b.wk, tame::Role::kK),
                                                 project(h, b.wv, tame::Role::kV), spec);
    x = nn::add(x, project(attn, b.wo, tame::Role::kOut));
    x = nn::add(x, mlp(b, x, c.ln_eps));
  }
  out.hidden = nn::layer_norm(x, p.at("text.ln_final.g"), p.at("text.ln_final.b"), c.ln_eps);
  out.eos = nn::gather_rows(out.hidden, eos_rows);
  return out;
}

QueryTokens encode_text(const std::vector<std::int32_t>& ids, const BackboneParams& params,
                        const tame::TameStack* tame, const Tensor* prototype) {
  const std::vector<std::int32_t>* one[] = {&ids};
  TextBatch batch = encode_text_batch(one, params, tame, prototype);
  QueryTokens out;
  out.ids = ids;
  out.eos_index = batch.eos_index[0];
  out.eos_feature = nn::reshape(batch.eos, {params.config.width});
  return out;
}

PretrainResult pretrain_backbone(BackboneParams& bp, const data::TaskStream& stream, const PretrainConfig& config) {
  const auto& pairs = stream.base.pairs;
  if (pairs.empty()) throw UsageError("pretrain_backbone: empty base set");
  for (const auto& task : stream.tasks)
    for (auto cat : task.categories)
      for (auto base_cat : stream.base.categories)
        if (cat == base_cat) throw UsageError("base categories overlap continual categories");

  std::vector<data::Video> videos;
  videos.reserve(pairs.size());
  for (const auto& pr : pairs) videos.push_back(data::render_video(stream, pr));

  nn::Optimizer opt(nn::OptimizerScheme::kAdam);
  Rng rng(mix_seed(config.seed, 0x9E));
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = std::max<std::size_t>(2, config.batch_size);
  const std::size_t steps_per_epoch = (pairs.size() + bs - 1) / bs;
  const std::size_t total = steps_per_epoch * config.epochs;
  const double tau = bp.params.at("logit.tau_pre").item();

  PretrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      if (end - start < 2) continue;
      std::vector<const data::Video*> vb;
      std::vector<const std::vector<std::int32_t>*> qb;
      for (std::size_t i = start; i < end; ++i) {
        vb.push_back(&videos[order[i]]);
        qb.push_back(&pairs[order[i]].query_tokens);
      }
      losses::SimilarityBatch batch;
      batch.v = video_features(encode_video_batch(vb, bp));
      batch.q = encode_text_batch(qb, bp).eos;
      batch.tau = tau;
      const Tensor loss = losses::total_loss(batch, 0.0);
      const auto grads = nn::backward(loss, bp.params);
      opt.step(bp.params, grads, nn::cosine_lr(config.lr, step++, total));
      epoch_loss += loss.item();
      ++batches;
    }
    result.epoch_loss.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
  }
  bp.params.round_to_float();
  bp.params.freeze_all();
  result.checksum = bp.checksum();
  return result;
}

}  // namespace ctvr::backbone

namespace ctvr::ffa {

backbone::FrameTokens encode_video_with_ffa(const data::Video& video, const backbone::BackboneParams& params,
                                            const FFAStack& stack) {
  return backbone::encode_frames(video, params, &stack);
}

}  // namespace ctvr::ffa
