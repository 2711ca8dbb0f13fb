// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ctvr/tensor.hpp"

namespace ctvr::featuredb {

// On-disk layout, all little-endian:
//   "CTVRFDB1" | u32 version=1 | u32 width | u64 count |
//   count × (u32 task_id | u64 video_id | u32 category_id | width × f32)
inline constexpr char kMagic[8] = {'C', 'T', 'V', 'R', 'F', 'D', 'B', '1'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 8 + 4 + 4 + 8;
inline constexpr std::size_t kCountOffset = 16;

struct VideoFeatureRecord {
  std::uint32_t task_id = 0;
  std::uint64_t video_id = 0;
  std::uint32_t category_id = 0;
  std::vector<float> feature;

  friend bool operator==(const VideoFeatureRecord&, const VideoFeatureRecord&) = default;
};

struct FeatureRange {
  nn::Tensor features;  // [n × width], widened to double
  std::vector<std::uint64_t> video_ids;
  std::vector<std::uint32_t> task_ids;
  std::vector<std::uint32_t> category_ids;

  std::size_t size() const { return video_ids.size(); }
};

// In-memory store. Records are grouped by task in ascending task order;
// features are kept exactly as extracted (unnormalized).
class FeatureStore {
 public:
  explicit FeatureStore(std::uint32_t width = 0) : width_(width) {}

  std::uint32_t width() const { return width_; }
  std::size_t size() const { return records_.size(); }
  std::uint32_t max_task() const { return records_.empty() ? 0 : records_.back().task_id; }
  const std::vector<VideoFeatureRecord>& records() const { return records_; }

  // Rejects t <= max_task(), duplicates, wrong widths, and records whose
  // task_id differs from t. Nothing is appended on error.
  void append_task_features(std::uint32_t t, std::vector<VideoFeatureRecord> records);

  // Records with task_id <= up_to_task, in append order.
  FeatureRange load_range(std::uint32_t up_to_task) const;

  std::size_t record_bytes() const { return 4 + 8 + 4 + 4 * static_cast<std::size_t>(width_); }

  // Reads performed through load_range; lets callers assert that a code
  // path never consulted the store.
  std::size_t read_count() const { return reads_; }

 private:
  std::uint32_t width_;
  std::vector<VideoFeatureRecord> records_;
  mutable std::size_t reads_ = 0;
};

// Writes the whole store to a temporary file and renames it into place.
void write_store(const std::filesystem::path& path, const FeatureStore& store);

// Throws FormatError on a bad magic, version or a payload shorter than the
// committed count; nothing is returned in that case. Bytes beyond the
// committed count (an interrupted append) are ignored.
FeatureStore read_store(const std::filesystem::path& path);

// Appends one task's records to an existing file: record bytes are written
// after the committed payload, flushed, and only then the header count is
// rewritten. No other previously written byte changes.
void append_task_file(const std::filesystem::path& path, std::uint32_t t,
                      const std::vector<VideoFeatureRecord>& records);

}  // namespace ctvr::featuredb
