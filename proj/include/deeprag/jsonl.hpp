#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deeprag/core.hpp"
#include "deeprag/errors.hpp"
#include "deeprag/util.hpp"

namespace deeprag {

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open: " + path.string());
  std::vector<nlohmann::json> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim_view(line).empty()) continue;
    try {
      records.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write: " + path.string());
  for (const auto& r : records) out << r.dump() << "\n";
  if (!out) throw Error("short write: " + path.string());
}

/// QA dataset: one {id, question, answers: [..]} object per line.
inline std::vector<QAInstance> load_dataset(const std::filesystem::path& path) {
  std::vector<QAInstance> dataset;
  for (const auto& j : read_jsonl(path)) {
    QAInstance qa{j.at("id").get<std::string>(), j.at("question").get<std::string>(),
                  j.at("answers").get<std::vector<std::string>>()};
    validate(qa);
    dataset.push_back(std::move(qa));
  }
  return dataset;
}

/// Provenance record written next to every output artifact. Deliberately free
/// of timestamps so identical configurations produce identical manifests.
struct Manifest {
  std::string command;
  nlohmann::json config;  // resolved settings, seeds included
  std::size_t kept = 0;
  std::size_t discarded = 0;
  nlohmann::json extra;
};

inline std::string config_hash(const nlohmann::json& config) {
  return to_hex(fnv1a64(config.dump()));
}

inline void write_manifest(const std::filesystem::path& artifact_path, const Manifest& manifest) {
  nlohmann::json j{{"command", manifest.command},
                   {"artifact", artifact_path.filename().string()},
                   {"config", manifest.config},
                   {"config_hash", config_hash(manifest.config)},
                   {"kept", manifest.kept},
                   {"discarded", manifest.discarded}};
  if (!manifest.extra.is_null()) j["extra"] = manifest.extra;
  std::filesystem::path path = artifact_path;
  path += ".manifest.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write manifest: " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace deeprag
