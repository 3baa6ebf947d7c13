#pragma once

#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <spdlog/spdlog.h>
#include <string>
#include <vector>

#include "annopref/pref_data/record.hpp"

namespace annopref {

/// Append-only preference dataset, optionally backed by a JSON-lines file.
/// One writer at a time; readers see a consistent prefix.
class PreferenceStore {
 public:
  PreferenceStore() = default;

  /// Opens (creating if needed) a dataset file. Corrupt or invalid lines are
  /// skipped with a warning rather than failing the load.
  explicit PreferenceStore(std::filesystem::path path, std::size_t max_segment_len = kDefaultMaxSegmentLen)
      : path_(std::move(path)), max_len_(max_segment_len) {
    if (std::filesystem::exists(*path_)) load_existing();
    out_.open(*path_, std::ios::app);
    if (!out_) throw std::runtime_error("cannot open dataset file " + path_->string());
  }

  PreferenceStore(const PreferenceStore&) = delete;
  PreferenceStore& operator=(const PreferenceStore&) = delete;

  /// Validates and appends; throws InvalidInput listing every violated field.
  void append(PreferenceRecord record) {
    const auto problems = violations(record, max_len_);
    if (!problems.empty()) {
      std::string msg = "rejected preference record:";
      for (const auto& p : problems) msg += " [" + p + "]";
      throw InvalidInput(msg);
    }
    std::unique_lock lock(mutex_);
    if (out_.is_open()) {
      out_ << to_json(record).dump() << '\n';
      out_.flush();
      if (!out_) throw std::runtime_error("dataset write failed");
    }
    records_.push_back(std::move(record));
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return records_.size();
  }

  bool empty() const { return size() == 0; }

  PreferenceRecord at(std::size_t i) const {
    std::shared_lock lock(mutex_);
    return records_.at(i);
  }

  std::vector<PreferenceRecord> snapshot() const {
    std::shared_lock lock(mutex_);
    return records_;
  }

  std::size_t skipped_on_load() const { return skipped_; }
  const std::optional<std::filesystem::path>& path() const { return path_; }

  /// Drops every record past the first `n` and rewrites the backing file.
  void truncate(std::size_t n) {
    std::unique_lock lock(mutex_);
    if (n >= records_.size()) return;
    records_.resize(n);
    if (path_) {
      out_.close();
      std::ofstream rewrite(*path_, std::ios::trunc);
      for (const auto& r : records_) rewrite << to_json(r).dump() << '\n';
      rewrite.close();
      out_.open(*path_, std::ios::app);
    }
  }

 private:
  void load_existing() {
    std::ifstream in(*path_);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        auto record = record_from_json(nlohmann::json::parse(line));
        const auto problems = violations(record, max_len_);
        if (!problems.empty()) throw InvalidInput(problems.front());
        records_.push_back(std::move(record));
      } catch (const std::exception& e) {
        ++skipped_;
        spdlog::warn("{}:{}: skipping corrupt record ({})", path_->string(), line_no, e.what());
      }
    }
  }

  std::optional<std::filesystem::path> path_;
  std::size_t max_len_ = kDefaultMaxSegmentLen;
  std::ofstream out_;
  mutable std::shared_mutex mutex_;
  std::vector<PreferenceRecord> records_;
  std::size_t skipped_ = 0;
};

}  // namespace annopref
