// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctvr/featuredb.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "ctvr/errors.hpp"

namespace ctvr::featuredb {

static_assert(std::endian::native == std::endian::little, "feature store assumes a little-endian host");

namespace {

template <typename T>
void put(std::string& buf, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  buf.append(bytes, sizeof(T));
}

template <typename T>
T get(const char*& p) {
  T value;
  std::memcpy(&value, p, sizeof(T));
  p += sizeof(T);
  return value;
}

std::string encode_records(const std::vector<VideoFeatureRecord>& records) {
  std::string buf;
  for (const auto& r : records) {
    put(buf, r.task_id);
    put(buf, r.video_id);
    put(buf, r.category_id);
    for (float f : r.feature) put(buf, f);
  }
  return buf;
}

std::string encode_header(std::uint32_t width, std::uint64_t count) {
  std::string buf(kMagic, sizeof kMagic);
  put(buf, kVersion);
  put(buf, width);
  put(buf, count);
  return buf;
}

struct Header {
  std::uint32_t width;
  std::uint64_t count;
};

Header parse_header(const std::string& bytes) {
  if (bytes.size() < kHeaderBytes) throw FormatError("feature store shorter than its header");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw FormatError("bad feature store magic");
  const char* p = bytes.data() + sizeof kMagic;
  const auto version = get<std::uint32_t>(p);
  if (version != kVersion) throw FormatError("unsupported feature store version " + std::to_string(version));
  Header h;
  h.width = get<std::uint32_t>(p);
  h.count = get<std::uint64_t>(p);
  return h;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open feature store " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

void FeatureStore::append_task_features(std::uint32_t t, std::vector<VideoFeatureRecord> records) {
  if (t == 0 || t <= max_task()) {
    throw ProtocolError("append for task " + std::to_string(t) + " after task " + std::to_string(max_task()));
  }
  std::set<std::uint64_t> seen;
  for (const auto& r : records_) seen.insert(r.video_id);
  for (const auto& r : records) {
    if (r.task_id != t) throw ProtocolError("record task " + std::to_string(r.task_id) + " in append for task " + std::to_string(t));
    if (r.feature.size() != width_) throw DimensionError("feature width differs from store width");
    if (!seen.insert(r.video_id).second) {
      throw ProtocolError("duplicate record (task " + std::to_string(r.task_id) + ", video " + std::to_string(r.video_id) + ")");
    }
  }
  records_.insert(records_.end(), std::make_move_iterator(records.begin()), std::make_move_iterator(records.end()));
}

FeatureRange FeatureStore::load_range(std::uint32_t up_to_task) const {
  ++reads_;
  FeatureRange out;
  std::vector<double> values;
  for (const auto& r : records_) {
    if (r.task_id > up_to_task) continue;
    out.video_ids.push_back(r.video_id);
    out.task_ids.push_back(r.task_id);
    out.category_ids.push_back(r.category_id);
    values.insert(values.end(), r.feature.begin(), r.feature.end());
  }
  if (!out.video_ids.empty()) out.features = nn::Tensor::from({out.video_ids.size(), width_}, std::move(values));
  return out;
}

void write_store(const std::filesystem::path& path, const FeatureStore& store) {
  const std::string bytes = encode_header(store.width(), store.size()) + encode_records(store.records());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

FeatureStore read_store(const std::filesystem::path& path) {
  const std::string bytes = slurp(path);
  const Header h = parse_header(bytes);
  FeatureStore probe(h.width);
  const std::size_t rec = probe.record_bytes();
  if (h.count > (bytes.size() - kHeaderBytes) / rec) {
    throw FormatError("feature store truncated: header commits " + std::to_string(h.count) + " records");
  }
  std::vector<VideoFeatureRecord> records(h.count);
  const char* p = bytes.data() + kHeaderBytes;
  for (auto& r : records) {
    r.task_id = get<std::uint32_t>(p);
    r.video_id = get<std::uint64_t>(p);
    r.category_id = get<std::uint32_t>(p);
    r.feature.resize(h.width);
    for (auto& f : r.feature) f = get<float>(p);
  }
  FeatureStore store(h.width);
  std::size_t i = 0;
  while (i < records.size()) {
    std::size_t j = i;
    while (j < records.size() && records[j].task_id == records[i].task_id) ++j;
    std::vector<VideoFeatureRecord> group(records.begin() + static_cast<long>(i), records.begin() + static_cast<long>(j));
    try {
      store.append_task_features(records[i].task_id, std::move(group));
    } catch (const Error& e) {
      throw FormatError(std::string("feature store content invalid: ") + e.what());
    }
    i = j;
  }
  return store;
}

void append_task_file(const std::filesystem::path& path, std::uint32_t t,
                      const std::vector<VideoFeatureRecord>& records) {
  // Validate against the committed content first.
  FeatureStore current = read_store(path);
  current.append_task_features(t, records);

  const std::string bytes = slurp(path);
  const Header h = parse_header(bytes);
  const std::size_t committed = kHeaderBytes + h.count * current.record_bytes();
  std::filesystem::resize_file(path, committed);  // drop an uncommitted tail, if any
  {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    const std::string payload = encode_records(records);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.flush();
    if (!out) throw FormatError("short append to " + path.string());
  }
  std::fstream io(path, std::ios::binary | std::ios::in | std::ios::out);
  io.seekp(static_cast<std::streamoff>(kCountOffset));
  const std::uint64_t count = h.count + records.size();
  io.write(reinterpret_cast<const char*>(&count), sizeof count);
  io.flush();
  if (!io) throw FormatError("cannot commit count in " + path.string());
}

}  // namespace ctvr::featuredb
