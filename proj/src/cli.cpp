// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctvr/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <type_traits>

#include "CLI11.hpp"
#include "ctvr/errors.hpp"
#include "ctvr/eval.hpp"
#include "ctvr/featuredb.hpp"
#include "json.hpp"

namespace ctvr::cli {

namespace {

using harness::RunConfig;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, eval::Scoring>) {
    return eval::scoring_name(v);
  } else {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
  }
}

template <typename T>
void parse_value(const std::string& text, T& out, const std::string& key) {
  auto bad = [&](const char* what) {
    return ConfigError("config key '" + key + "': '" + text + "' is not " + what);
  };
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") out = true;
    else if (text == "false" || text == "0") out = false;
    else throw bad("a boolean (true/false)");
  } else if constexpr (std::is_same_v<T, eval::Scoring>) {
    try {
      out = eval::parse_scoring(text);
    } catch (const ConfigError& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  } else {
    T v{};
    const char* end = text.data() + text.size();
    const auto res = std::from_chars(text.data(), end, v);
    if (text.empty() || res.ec != std::errc() || res.ptr != end) {
      throw bad(std::is_floating_point_v<T> ? "a number" : "a non-negative integer");
    }
    if constexpr (std::is_floating_point_v<T>) {
      if (!std::isfinite(v)) throw bad("finite");
    }
    out = v;
  }
}

struct Key {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename Access>
Key make_key(std::string name, Access access) {
  Key k;
  k.name = name;
  k.get = [access](const RunConfig& c) { return format_value(access(const_cast<RunConfig&>(c))); };
  k.set = [access, name](RunConfig& c, const std::string& s) { parse_value(s, access(c), name); };
  return k;
}

#define CTVR_KEY(name, member) make_key(name, [](RunConfig& c) -> auto& { return c.member; })

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      CTVR_KEY("seed", seed),
      CTVR_KEY("epochs", epochs),
      CTVR_KEY("batch_size", batch_size),
      CTVR_KEY("lr", lr),
      CTVR_KEY("beta", beta),
      CTVR_KEY("attach_depth", attach_depth),
      CTVR_KEY("experts", experts),
      CTVR_KEY("top_k", top_k),
      CTVR_KEY("rank", rank),
      CTVR_KEY("lambda", lambda),
      CTVR_KEY("tau", tau),
      CTVR_KEY("ref_negatives", ref_negatives),
      CTVR_KEY("no_ffa", no_ffa),
      CTVR_KEY("no_tame", no_tame),
      CTVR_KEY("no_tp", no_tp),
      CTVR_KEY("no_ct", no_ct),
      CTVR_KEY("scoring", scoring),
      CTVR_KEY("stream.seed", stream.seed),
      CTVR_KEY("stream.tasks", stream.tasks),
      CTVR_KEY("stream.cats_per_task", stream.cats_per_task),
      CTVR_KEY("stream.videos_per_cat", stream.videos_per_cat),
      CTVR_KEY("stream.test_per_cat", stream.test_per_cat),
      CTVR_KEY("stream.base_categories", stream.base_categories),
      CTVR_KEY("stream.base_videos_per_cat", stream.base_videos_per_cat),
      CTVR_KEY("stream.frames", stream.frames),
      CTVR_KEY("stream.patches", stream.patches),
      CTVR_KEY("stream.input_width", stream.input_width),
      CTVR_KEY("stream.latent_dim", stream.latent_dim),
      CTVR_KEY("stream.query_len", stream.query_len),
      CTVR_KEY("stream.vocab", stream.vocab),
      CTVR_KEY("stream.magnitude_buckets", stream.magnitude_buckets),
      CTVR_KEY("stream.appearance_dims", stream.appearance_dims),
      CTVR_KEY("stream.motion_dims", stream.motion_dims),
      CTVR_KEY("stream.min_center_distance", stream.min_center_distance),
      CTVR_KEY("stream.instance_scale", stream.instance_scale),
      CTVR_KEY("stream.drift_scale", stream.drift_scale),
      CTVR_KEY("stream.frame_noise", stream.frame_noise),
      CTVR_KEY("stream.frame_noise_corr", stream.frame_noise_corr),
      CTVR_KEY("stream.patch_noise", stream.patch_noise),
      CTVR_KEY("stream.motion_token_weight", stream.motion_token_weight),
      // patches, input_width and vocab follow the stream
      CTVR_KEY("backbone.width", backbone.width),
      CTVR_KEY("backbone.heads", backbone.heads),
      CTVR_KEY("backbone.vision_layers", backbone.vision_layers),
      CTVR_KEY("backbone.text_layers", backbone.text_layers),
      CTVR_KEY("backbone.context", backbone.context),
      CTVR_KEY("backbone.mlp_ratio", backbone.mlp_ratio),
      CTVR_KEY("backbone.ln_eps", backbone.ln_eps),
      CTVR_KEY("backbone.tau_pre", backbone.tau_pre),
      CTVR_KEY("backbone.seed", backbone.seed),
      CTVR_KEY("pretrain.epochs", pretrain.epochs),
      CTVR_KEY("pretrain.batch_size", pretrain.batch_size),
      CTVR_KEY("pretrain.lr", pretrain.lr),
      CTVR_KEY("pretrain.seed", pretrain.seed),
  };
  return table;
}

#undef CTVR_KEY

const std::vector<std::string>& path_keys() {
  static const std::vector<std::string> names = {"backbone", "store", "manifest", "out_dir"};
  return names;
}

bool known_key(const std::string& k) {
  if (std::find(path_keys().begin(), path_keys().end(), k) != path_keys().end()) return true;
  return std::any_of(keys().begin(), keys().end(), [&](const Key& x) { return x.name == k; });
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path.string());
  f << text;
  if (!f) throw FormatError("write failed: " + path.string());
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path.string());
  f << std::setprecision(9);
  return f;
}

}  // namespace

std::vector<std::string> required_keys() {
  std::vector<std::string> out;
  for (const auto& k : keys()) out.push_back(k.name);
  return out;
}

KeyValues parse_key_values(std::istream& in, const std::string& origin) {
  KeyValues kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(line_no);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!known_key(key)) throw ConfigError(where + ": unknown config key '" + key + "'");
    if (!kv.emplace(key, value).second) throw ConfigError(where + ": duplicate config key '" + key + "'");
  }
  return kv;
}

void apply_overrides(KeyValues& base, std::span<const std::string> overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    const std::string key = trim(o.substr(0, eq));
    if (!known_key(key)) throw ConfigError("unknown config key '" + key + "'");
    base[key] = trim(o.substr(eq + 1));
  }
}

CliConfig to_config(const KeyValues& kv) {
  CliConfig c;
  for (const auto& [k, v] : kv)
    if (!known_key(k)) throw ConfigError("unknown config key '" + k + "'");
  for (const auto& key : keys()) {
    auto it = kv.find(key.name);
    if (it == kv.end()) throw ConfigError("missing config key '" + key.name + "'");
    key.set(c.run, it->second);
  }
  auto path = [&](const char* name, std::optional<std::filesystem::path>& out) {
    if (auto it = kv.find(name); it != kv.end() && !it->second.empty()) out = it->second;
  };
  path("backbone", c.backbone);
  path("store", c.store);
  path("manifest", c.manifest);
  path("out_dir", c.out_dir);
  c.run.backbone.patches = c.run.stream.patches;
  c.run.backbone.input_width = c.run.stream.input_width;
  c.run.backbone.vocab = c.run.stream.vocab;
  c.run.validate();
  return c;
}

KeyValues to_key_values(const CliConfig& config) {
  KeyValues kv;
  for (const auto& key : keys()) kv[key.name] = key.get(config.run);
  if (config.backbone) kv["backbone"] = config.backbone->string();
  if (config.store) kv["store"] = config.store->string();
  if (config.manifest) kv["manifest"] = config.manifest->string();
  if (config.out_dir) kv["out_dir"] = config.out_dir->string();
  return kv;
}

std::string render_config(const CliConfig& config) {
  std::string out;
  for (const auto& key : keys()) out += key.name + " = " + key.get(config.run) + "\n";
  if (config.backbone) out += "backbone = " + config.backbone->string() + "\n";
  if (config.store) out += "store = " + config.store->string() + "\n";
  if (config.manifest) out += "manifest = " + config.manifest->string() + "\n";
  if (config.out_dir) out += "out_dir = " + config.out_dir->string() + "\n";
  return out;
}

CliConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  KeyValues kv = parse_key_values(f, path.string());
  apply_overrides(kv, overrides);
  return to_config(kv);
}

void export_attention_maps(const model::Model& model, const data::Video& video, std::size_t layer,
                           const std::filesystem::path& out_path) {
  const std::size_t depth = model.ffa().attach_depth();
  if (layer >= depth) {
    throw UsageError("layer " + std::to_string(layer) + " is not adapted (attach depth " + std::to_string(depth) +
                     ")");
  }
  const auto cap = model.capture_attention(video, layer);
  const auto& ffa_layer = model.ffa().layers[layer];
  const std::size_t tokens = model.backbone().config.patches + 1;
  const std::size_t sa_heads = model.backbone().config.heads, ca_heads = ffa_layer.heads;
  const std::size_t frames = video.frames;
  const double alpha = ffa_layer.alpha.item();

  auto f = open_out(out_path);
  f << "kind,frame,head,row,alpha";
  for (std::size_t k = 0; k < tokens; ++k) f << ",k" << k;
  f << "\n";
  auto emit = [&](const char* kind, const std::vector<double>& maps, std::size_t heads, std::size_t m) {
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t r = 0; r < tokens; ++r) {
        const double* row = maps.data() + ((m * heads + h) * tokens + r) * tokens;
        f << kind << ',' << m << ',' << h << ',' << r << ',' << alpha;
        for (std::size_t k = 0; k < tokens; ++k) f << ',' << row[k];
        f << "\n";
      }
  };
  for (std::size_t m = 1; m < frames; ++m) {
    emit("sa", cap.self_attention, sa_heads, m);
    emit("ca", cap.cross_attention, ca_heads, m);
  }
  if (!f) throw FormatError("write failed: " + out_path.string());
}

void export_query_drift(std::span<const model::Model* const> checkpoints, std::span<const data::Pair* const> queries,
                        const std::filesystem::path& out_path) {
  if (checkpoints.empty()) throw UsageError("export_query_drift: at least one checkpoint is needed");
  const std::size_t width = checkpoints[0]->width();
  for (const auto* m : checkpoints)
    if (m->width() != width) throw DimensionError("checkpoints disagree on feature width");

  // features[c][q] under the query's own prototype, empty when unavailable
  std::vector<std::vector<std::vector<double>>> features(checkpoints.size(),
                                                         std::vector<std::vector<double>>(queries.size()));
  for (std::size_t c = 0; c < checkpoints.size(); ++c) {
    const auto& model = *checkpoints[c];
    std::map<std::size_t, std::vector<std::size_t>> by_task;
    for (std::size_t q = 0; q < queries.size(); ++q)
      if (queries[q]->task >= 1 && queries[q]->task <= model.bank().size()) by_task[queries[q]->task].push_back(q);
    nn::NoGradGuard guard;
    for (const auto& [task, idx] : by_task) {
      std::vector<const std::vector<std::int32_t>*> tokens;
      for (auto q : idx) tokens.push_back(&queries[q]->query_tokens);
      const auto feats = model.encode_queries(tokens, task);
      auto vals = feats.values();
      for (std::size_t j = 0; j < idx.size(); ++j)
        features[c][idx[j]].assign(vals.begin() + j * width, vals.begin() + (j + 1) * width);
    }
  }

  auto f = open_out(out_path);
  f << "video_id,task,checkpoint,drift";
  for (std::size_t d = 0; d < width; ++d) f << ",f" << d;
  f << "\n";
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const std::size_t task = queries[q]->task;
    // origin: exactly `task` prototypes, else the earliest checkpoint past it
    std::optional<std::size_t> origin;
    for (std::size_t c = 0; c < checkpoints.size(); ++c) {
      const std::size_t n = checkpoints[c]->bank().size();
      if (n < task || features[c][q].empty()) continue;
      if (!origin || n < checkpoints[*origin]->bank().size()) origin = c;
    }
    if (!origin) continue;
    const auto& base = features[*origin][q];
    for (std::size_t c = 0; c < checkpoints.size(); ++c) {
      const auto& v = features[c][q];
      if (v.empty()) continue;
      double ss = 0.0;
      for (std::size_t d = 0; d < width; ++d) ss += (v[d] - base[d]) * (v[d] - base[d]);
      f << queries[q]->video_id << ',' << task << ',' << checkpoints[c]->bank().size() << ',' << std::sqrt(ss);
      for (double x : v) f << ',' << x;
      f << "\n";
    }
  }
  if (!f) throw FormatError("write failed: " + out_path.string());
}

// ---- command line ----

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "flat key = value config file (defaults when omitted)");
  sub->add_option("--set", c.sets, "override, key=value (repeatable)");
}

CliConfig resolve(const Common& c) {
  if (!c.config.empty()) return load_config(c.config, c.sets);
  KeyValues kv = to_key_values(CliConfig{});
  apply_overrides(kv, c.sets);
  return to_config(kv);
}

std::vector<data::Pair> read_manifest_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open manifest " + path.string());
  return data::read_manifest(f);
}

backbone::BackboneParams pretrained(const CliConfig& cfg, const data::TaskStream& stream, std::ostream& out) {
  auto bb = backbone::init_backbone(cfg.run.backbone);
  const auto res = backbone::pretrain_backbone(bb, stream, cfg.run.pretrain);
  for (std::size_t e = 0; e < res.epoch_loss.size(); ++e)
    out << "pretrain epoch " << e + 1 << " loss " << res.epoch_loss[e] << "\n";
  return bb;
}

backbone::BackboneParams obtain_backbone(const CliConfig& cfg, const data::TaskStream& stream,
                                         const std::filesystem::path& out_dir, std::ostream& out) {
  if (cfg.backbone) return model::load_backbone(*cfg.backbone);
  auto bb = pretrained(cfg, stream, out);
  std::filesystem::create_directories(out_dir);
  model::save_backbone(out_dir / "backbone.ckpt", bb);
  return bb;
}

void write_manifest_file(const std::filesystem::path& path, const data::TaskStream& stream) {
  std::ostringstream s;
  data::write_manifest(s, stream);
  write_text(path, s.str());
}

harness::RunResult run_one(const CliConfig& cfg, const data::TaskStream& stream, const backbone::BackboneParams& bb,
                           const std::filesystem::path& dir, std::ostream& out) {
  std::filesystem::create_directories(dir);
  write_text(dir / "config.txt", render_config(cfg));
  write_manifest_file(dir / "manifest.jsonl", stream);
  harness::RunOptions opts;
  opts.out_dir = dir;
  opts.progress = [&out](const std::string& line) { out << line << "\n"; };
  auto result = harness::run_stream(stream, bb, cfg.run, opts);
  write_text(dir / "report.json", result.final_report.to_json());
  return result;
}

// Ledger rows from a previous run, as written by RunLedger::to_jsonl.
void load_ledger(const std::filesystem::path& path, eval::RunLedger& ledger, std::size_t below) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open ledger " + path.string());
  std::vector<std::tuple<std::size_t, std::size_t, double>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      rows.emplace_back(j.at("t").get<std::size_t>(), j.at("i").get<std::size_t>(), j.at("r1").get<double>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("ledger " + path.string() + ": " + e.what());
    }
  }
  // diagonal entries must land before the rest of their column
  std::sort(rows.begin(), rows.end());
  for (const auto& [t, i, r1] : rows)
    if (t < below) ledger.set(t, i, r1);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Continual text-to-video retrieval on synthetic task streams", "ctvr"};
  app.require_subcommand(1);

  auto* config_cmd = app.add_subcommand("config", "print the resolved configuration");
  Common config_opts;
  add_common(config_cmd, config_opts);

  auto* pretrain_cmd = app.add_subcommand("pretrain", "pretrain and save a backbone");
  Common pre_opts;
  std::string pre_out;
  add_common(pretrain_cmd, pre_opts);
  pretrain_cmd->add_option("--out", pre_out, "backbone checkpoint path");

  auto* run_cmd = app.add_subcommand("run", "train over the whole task stream");
  Common run_opts;
  std::string run_backbone, run_dir;
  add_common(run_cmd, run_opts);
  run_cmd->add_option("--backbone", run_backbone, "pretrained backbone (pretrains when absent)");
  run_cmd->add_option("--out-dir", run_dir, "output directory");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a model checkpoint against a feature store");
  std::string ev_store, ev_manifest, ev_ckpt, ev_report = "report.json", ev_ledger, ev_scoring = "task_matched";
  eval_cmd->add_option("--store", ev_store, "feature store")->required();
  eval_cmd->add_option("--manifest", ev_manifest, "query manifest")->required();
  eval_cmd->add_option("--ckpt", ev_ckpt, "model checkpoint")->required();
  eval_cmd->add_option("--report", ev_report, "report path")->capture_default_str();
  eval_cmd->add_option("--ledger", ev_ledger, "ledger of earlier checkpoints, for forgetting");
  eval_cmd->add_option("--scoring", ev_scoring, "task_matched or max_over_tasks")->capture_default_str();

  auto* ablate_cmd = app.add_subcommand("ablate", "run the ablation variants on one backbone");
  Common ab_opts;
  std::string ab_backbone, ab_dir, ab_variants = "full,no_ffa,no_tame,no_tp,no_ct";
  add_common(ablate_cmd, ab_opts);
  ablate_cmd->add_option("--backbone", ab_backbone, "pretrained backbone (pretrains when absent)");
  ablate_cmd->add_option("--out-dir", ab_dir, "output directory");
  ablate_cmd->add_option("--variants", ab_variants, "comma separated")->capture_default_str();

  auto* attn_cmd = app.add_subcommand("export-attn", "dump self and cross attention maps of one video");
  Common attn_opts;
  std::string attn_ckpt, attn_out;
  std::uint64_t attn_video = 0;
  std::size_t attn_layer = 0;
  add_common(attn_cmd, attn_opts);
  attn_cmd->add_option("--ckpt", attn_ckpt, "model checkpoint")->required();
  attn_cmd->add_option("--video-id", attn_video, "video id from the manifest")->required();
  attn_cmd->add_option("--layer", attn_layer, "adapted vision block")->capture_default_str();
  attn_cmd->add_option("--out", attn_out, "csv path")->required();

  auto* drift_cmd = app.add_subcommand("export-drift", "dump conditional query features across checkpoints");
  std::string drift_manifest, drift_out;
  std::vector<std::string> drift_ckpts;
  drift_cmd->add_option("--manifest", drift_manifest, "query manifest")->required();
  drift_cmd->add_option("--ckpt", drift_ckpts, "model checkpoints (repeatable)")->required();
  drift_cmd->add_option("--out", drift_out, "csv path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (config_cmd->parsed()) {
      out << render_config(resolve(config_opts));
    } else if (pretrain_cmd->parsed()) {
      const auto cfg = resolve(pre_opts);
      const std::filesystem::path path = !pre_out.empty() ? std::filesystem::path(pre_out)
                                         : cfg.backbone     ? *cfg.backbone
                                                            : throw UsageError("pretrain needs --out or backbone");
      const auto stream = data::generate_stream(cfg.run.stream);
      const auto bb = pretrained(cfg, stream, out);
      model::save_backbone(path, bb);
      out << "backbone checksum " << bb.checksum() << " -> " << path.string() << "\n";
    } else if (run_cmd->parsed()) {
      auto cfg = resolve(run_opts);
      if (!run_backbone.empty()) cfg.backbone = run_backbone;
      if (!run_dir.empty()) cfg.out_dir = run_dir;
      if (!cfg.out_dir) throw UsageError("run needs --out-dir or out_dir");
      const auto stream = data::generate_stream(cfg.run.stream);
      const auto bb = obtain_backbone(cfg, stream, *cfg.out_dir, out);
      const auto result = run_one(cfg, stream, bb, *cfg.out_dir, out);
      out << "final r1 " << result.final_report.r1 << " bwf " << result.final_report.bwf << "\n";
    } else if (eval_cmd->parsed()) {
      const auto scoring = eval::parse_scoring(ev_scoring);
      const auto model = model::load_model(ev_ckpt);
      const auto db = featuredb::read_store(ev_store);
      const auto pairs = read_manifest_file(ev_manifest);
      const std::size_t t = db.max_task();
      if (t == 0) throw ProtocolError("feature store is empty");
      if (model.bank().size() != t) {
        throw ProtocolError("checkpoint holds " + std::to_string(model.bank().size()) +
                            " prototypes but the store holds tasks up to " + std::to_string(t));
      }
      std::set<std::uint64_t> stored;
      for (const auto& r : db.records()) stored.insert(r.video_id);
      std::vector<const data::Pair*> queries;
      for (const auto& p : pairs)
        if (p.task >= 1 && p.task <= t && stored.count(p.video_id)) queries.push_back(&p);
      eval::RunLedger ledger;
      if (!ev_ledger.empty()) load_ledger(ev_ledger, ledger, t);
      const bool full_history = ledger.rows() + 1 >= t;
      auto report = eval::evaluate_checkpoint(model, db, queries, t, full_history ? &ledger : nullptr, scoring);
      write_text(ev_report, report.to_json());
      out << "r1 " << report.r1 << " r5 " << report.r5 << " r10 " << report.r10 << " medr " << report.medr
          << " -> " << ev_report << "\n";
    } else if (ablate_cmd->parsed()) {
      auto cfg = resolve(ab_opts);
      if (!ab_backbone.empty()) cfg.backbone = ab_backbone;
      if (!ab_dir.empty()) cfg.out_dir = ab_dir;
      if (!cfg.out_dir) throw UsageError("ablate needs --out-dir or out_dir");
      std::vector<std::string> variants;
      std::stringstream ss(ab_variants);
      for (std::string v; std::getline(ss, v, ',');)
        if (!trim(v).empty()) variants.push_back(trim(v));
      for (const auto& v : variants)
        if (v != "full" && v != "no_ffa" && v != "no_tame" && v != "no_tp" && v != "no_ct")
          throw UsageError("unknown variant '" + v + "'");
      const auto stream = data::generate_stream(cfg.run.stream);
      const auto bb = obtain_backbone(cfg, stream, *cfg.out_dir, out);
      std::ostringstream table;
      table << std::setprecision(9) << "variant,r1,r5,r10,medr,meanr,bwf,mean_bwf\n";
      for (const auto& v : variants) {
        CliConfig vc = cfg;
        vc.run.no_ffa = v == "no_ffa";
        vc.run.no_tame = v == "no_tame";
        vc.run.no_tp = v == "no_tp";
        vc.run.no_ct = v == "no_ct";
        out << "== " << v << "\n";
        const auto r = run_one(vc, stream, bb, *cfg.out_dir / v, out);
        const auto& f = r.final_report;
        table << v << ',' << f.r1 << ',' << f.r5 << ',' << f.r10 << ',' << f.medr << ',' << f.meanr << ',' << f.bwf
              << ',' << r.mean_bwf() << "\n";
      }
      write_text(*cfg.out_dir / "ablation.csv", table.str());
      out << table.str();
    } else if (attn_cmd->parsed()) {
      const auto cfg = resolve(attn_opts);
      const auto model = model::load_model(attn_ckpt);
      const auto stream = data::generate_stream(cfg.run.stream);
      const data::Pair* pair = nullptr;
      for (const auto& task : stream.tasks)
        for (const auto& p : task.pairs)
          if (p.video_id == attn_video) pair = &p;
      if (!pair) throw UsageError("video " + std::to_string(attn_video) + " is not in the stream");
      export_attention_maps(model, data::render_video(stream, *pair), attn_layer, attn_out);
    } else if (drift_cmd->parsed()) {
      std::vector<model::Model> models;
      for (const auto& c : drift_ckpts) models.push_back(model::load_model(c));
      std::vector<const model::Model*> ptrs;
      for (const auto& m : models) ptrs.push_back(&m);
      const auto pairs = read_manifest_file(drift_manifest);
      std::vector<const data::Pair*> queries;
      for (const auto& p : pairs)
        if (p.task >= 1 && p.test) queries.push_back(&p);
      export_query_drift(ptrs, queries, drift_out);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace ctvr::cli
