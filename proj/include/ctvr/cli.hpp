// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctvr/harness.hpp"
#include "ctvr/model.hpp"
#include "ctvr/taskgen.hpp"

namespace ctvr::cli {

// Flat `key = value` configuration. Every run key must be present; path keys
// are optional and may also come from flags.
struct CliConfig {
  harness::RunConfig run;
  std::optional<std::filesystem::path> backbone;
  std::optional<std::filesystem::path> store;
  std::optional<std::filesystem::path> manifest;
  std::optional<std::filesystem::path> out_dir;
};

// Names of the required keys, in file order.
std::vector<std::string> required_keys();

using KeyValues = std::map<std::string, std::string>;

// Throws ConfigError on syntax errors, duplicates and unknown keys.
KeyValues parse_key_values(std::istream& in, const std::string& origin = "config");
// Applies `key=value` overrides on top of `base`; unknown keys throw.
void apply_overrides(KeyValues& base, std::span<const std::string> overrides);
// Throws ConfigError naming the first missing key or the first bad value.
CliConfig to_config(const KeyValues& kv);
KeyValues to_key_values(const CliConfig& config);
std::string render_config(const CliConfig& config);

CliConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides = {});

// Self- and cross-attention rows of one adapted vision block, one row per
// query token: kind,frame,head,row,alpha,k0..kP. Cross rows for frame m use
// frame m-1 as the query side. Throws UsageError unless layer < attach depth.
void export_attention_maps(const model::Model& model, const data::Video& video, std::size_t layer,
                           const std::filesystem::path& out_path);

// One row per (query, checkpoint) with checkpoint >= the query's task:
// video_id,task,checkpoint,drift,f0..f{O-1}. The feature is taken under the
// query's own prototype; drift is its L2 distance to the same feature at the
// origin checkpoint (the one with exactly `task` prototypes, or the earliest
// later one when that is absent).
void export_query_drift(std::span<const model::Model* const> checkpoints, std::span<const data::Pair* const> queries,
                        const std::filesystem::path& out_path);

// Exit status: 0 success, 1 runtime error, 2 usage or configuration error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ctvr::cli
