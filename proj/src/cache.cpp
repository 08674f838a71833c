#include <filesystem>
#include <fstream>

#include "crc/backend.hpp"
#include "crc/errors.hpp"
#include "crc/hash.hpp"

namespace crc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string encode_line(const GenerationRecord& r) {
  const auto payload = to_json(r).dump();
  return sha256_hex(payload) + "\t" + payload + "\n";
}

}  // namespace

GenerationCache::GenerationCache(std::string path) : path_(std::move(path)) {
  const fs::path p(path_);
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw IoError("cannot create cache directory " + p.parent_path().string());
  }
  if (!fs::exists(p)) {
    std::ofstream touch(path_, std::ios::binary);
    if (!touch) throw IoError("cannot create cache " + path_);
    return;
  }

  std::ifstream in(path_, std::ios::binary);
  if (!in) throw IoError("cannot open cache " + path_);
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();

  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < data.size()) {
    const auto nl = data.find('\n', pos);
    if (nl == std::string::npos) {
      // Torn write from an interrupted run; drop it so appends stay aligned.
      fs::resize_file(p, pos);
      break;
    }
    ++line_no;
    const std::string_view line(data.data() + pos, nl - pos);
    pos = nl + 1;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) {
      throw CacheError("corrupted cache " + path_ + ": line " + std::to_string(line_no) +
                       " has no checksum");
    }
    const auto payload = line.substr(tab + 1);
    if (sha256_hex(payload) != line.substr(0, tab)) {
      throw CacheError("corrupted cache " + path_ + ": checksum mismatch at line " +
                       std::to_string(line_no));
    }
    try {
      auto rec = generation_record_from_json(json::parse(payload));
      auto key = rec.cache_key;
      records_.insert_or_assign(std::move(key), std::move(rec));
    } catch (const json::exception& e) {
      throw CacheError("corrupted cache " + path_ + ": line " + std::to_string(line_no) +
                       ": " + e.what());
    }
  }
}

std::optional<GenerationRecord> GenerationCache::get(const std::string& key) const {
  std::lock_guard lock(mu_);
  auto it = records_.find(key);
  if (it == records_.end()) return std::nullopt;
  return it->second;
}

void GenerationCache::put(const GenerationRecord& record) {
  std::lock_guard lock(mu_);
  std::ofstream out(path_, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot append to cache " + path_);
  out << encode_line(record);
  out.flush();
  if (!out) throw IoError("write failure on cache " + path_);
  records_.insert_or_assign(record.cache_key, record);
}

void GenerationCache::compact() {
  std::lock_guard lock(mu_);
  const auto tmp = path_ + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    for (const auto& [_, rec] : records_) out << encode_line(rec);
    if (!out) throw IoError("write failure on " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path_, ec);
  if (ec) throw IoError("cannot replace cache " + path_ + ": " + ec.message());
}

std::size_t GenerationCache::size() const {
  std::lock_guard lock(mu_);
  return records_.size();
}

}  // namespace crc
