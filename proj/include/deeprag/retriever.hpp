#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <ranges>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "deeprag/core.hpp"
#include "deeprag/errors.hpp"
#include "deeprag/util.hpp"

namespace deeprag {

struct CorpusRecord {
  std::string doc_id;
  std::string body;
  std::string title;
};

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
  bool remove_stopwords = false;
};

namespace detail {
inline const std::unordered_set<std::string_view>& stopword_set() {
  static const std::unordered_set<std::string_view> kStopwords{
      "a",  "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is",
      "it", "of", "on",  "or",  "s",  "t",  "the", "to", "was", "were", "with"};
  return kStopwords;
}
}  // namespace detail

/// Lowercases and splits on any non-alphanumeric ASCII byte; multi-byte UTF-8
/// sequences stay inside tokens. No stemming.
inline std::vector<std::string> tokenize(std::string_view text, bool remove_stopwords = false) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      if (!remove_stopwords || detail::stopword_set().count(current) == 0) tokens.push_back(current);
      current.clear();
    }
  };
  for (char c : text) {
    auto uc = static_cast<unsigned char>(c);
    if (uc >= 0x80 || std::isalnum(uc) != 0) {
      current.push_back(static_cast<char>(std::tolower(uc)));
    } else {
      flush();
    }
  }
  flush();
  return tokens;
}

/// Okapi BM25 over a single field (title and body share one bag of tokens).
/// Immutable once built; concurrent searches need no locking.
class SearchIndex {
 public:
  struct Posting {
    std::uint32_t doc = 0;  // index into the document arrays
    std::uint32_t tf = 0;
  };

  template <std::ranges::input_range R>
    requires std::convertible_to<std::ranges::range_reference_t<R>, const CorpusRecord&>
  static SearchIndex build(R&& records, Bm25Params params = {}) {
    SearchIndex index;
    index.params_ = params;
    for (const CorpusRecord& rec : records) index.ingest(rec);
    if (index.doc_ids_.empty()) throw EmptyCorpus();
    return index;
  }

  /// Top-k documents by score descending, ties broken by ascending doc_id.
  /// Documents sharing no token with the query are never candidates.
  std::vector<Document> search(std::string_view query, std::size_t k) const {
    if (k == 0) throw Error("search requires k >= 1");
    std::vector<std::string> terms = unique_query_terms(query);
    std::vector<std::uint32_t> candidates;
    for (const auto& term : terms) {
      auto it = postings_.find(term);
      if (it == postings_.end()) continue;
      for (const Posting& p : it->second) candidates.push_back(p.doc);
    }
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    std::vector<Document> results;
    results.reserve(candidates.size());
    for (std::uint32_t doc : candidates) {
      Document d{doc_ids_[doc], doc_titles_[doc], doc_bodies_[doc], score_terms(terms, doc)};
      results.push_back(std::move(d));
    }
    std::sort(results.begin(), results.end(), [](const Document& a, const Document& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.doc_id < b.doc_id;
    });
    if (results.size() > k) results.resize(k);
    return results;
  }

  /// BM25 score of one document for a query; idf uses the +1 form so the
  /// result is never negative.
  double score(std::string_view query, std::string_view doc_id) const {
    auto it = id_to_index_.find(std::string(doc_id));
    if (it == id_to_index_.end()) throw UnknownDocId(std::string(doc_id));
    return score_terms(unique_query_terms(query), it->second);
  }

  std::size_t doc_count() const { return doc_ids_.size(); }
  double avg_doc_length() const {
    return static_cast<double>(total_tokens_) / static_cast<double>(doc_ids_.size());
  }
  const Bm25Params& params() const { return params_; }

  bool contains(std::string_view doc_id) const { return id_to_index_.count(std::string(doc_id)) > 0; }
  std::size_t doc_length(std::string_view doc_id) const { return doc_lengths_.at(index_of(doc_id)); }
  std::size_t term_df(std::string_view term) const {
    auto it = postings_.find(std::string(term));
    return it == postings_.end() ? 0 : it->second.size();
  }
  std::size_t term_tf(std::string_view term, std::string_view doc_id) const {
    auto it = postings_.find(std::string(term));
    if (it == postings_.end()) return 0;
    std::uint32_t doc = index_of(doc_id);
    auto pit = std::lower_bound(it->second.begin(), it->second.end(), doc,
                                [](const Posting& p, std::uint32_t d) { return p.doc < d; });
    return (pit != it->second.end() && pit->doc == doc) ? pit->tf : 0;
  }
  std::size_t vocabulary_size() const { return postings_.size(); }

  void save(const std::filesystem::path& path) const;
  static SearchIndex load(const std::filesystem::path& path);

 private:
  SearchIndex() = default;

  void ingest(const CorpusRecord& rec) {
    if (rec.doc_id.empty()) throw Error("corpus record with empty doc_id");
    auto [it, inserted] = id_to_index_.emplace(rec.doc_id, static_cast<std::uint32_t>(doc_ids_.size()));
    if (!inserted) throw DuplicateDocId(rec.doc_id);
    std::uint32_t doc = it->second;
    doc_ids_.push_back(rec.doc_id);
    doc_titles_.push_back(rec.title);
    doc_bodies_.push_back(rec.body);

    std::vector<std::string> tokens = tokenize(rec.title + " " + rec.body, params_.remove_stopwords);
    doc_lengths_.push_back(static_cast<std::uint32_t>(tokens.size()));
    total_tokens_ += tokens.size();

    std::map<std::string, std::uint32_t> freqs;
    for (auto& t : tokens) ++freqs[t];
    for (auto& [term, tf] : freqs) postings_[term].push_back(Posting{doc, tf});
  }

  std::uint32_t index_of(std::string_view doc_id) const {
    auto it = id_to_index_.find(std::string(doc_id));
    if (it == id_to_index_.end()) throw UnknownDocId(std::string(doc_id));
    return it->second;
  }

  /// Sorted unique query tokens; sorting fixes the summation order so equal
  /// documents score bit-identically.
  std::vector<std::string> unique_query_terms(std::string_view query) const {
    std::vector<std::string> terms = tokenize(query, params_.remove_stopwords);
    std::sort(terms.begin(), terms.end());
    terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
    return terms;
  }

  double score_terms(std::span<const std::string> terms, std::uint32_t doc) const {
    double n = static_cast<double>(doc_ids_.size());
    double len = static_cast<double>(doc_lengths_[doc]);
    double norm = 1.0 - params_.b + params_.b * len / avg_doc_length();
    double total = 0.0;
    for (const auto& term : terms) {
      auto it = postings_.find(term);
      if (it == postings_.end()) continue;
      auto df = static_cast<double>(it->second.size());
      auto pit = std::lower_bound(it->second.begin(), it->second.end(), doc,
                                  [](const Posting& p, std::uint32_t d) { return p.doc < d; });
      if (pit == it->second.end() || pit->doc != doc) continue;
      double tf = static_cast<double>(pit->tf);
      double idf = std::log(1.0 + (n - df + 0.5) / (df + 0.5));
      total += idf * tf * (params_.k1 + 1.0) / (tf + params_.k1 * norm);
    }
    return total;
  }

  std::vector<std::string> doc_ids_;
  std::vector<std::string> doc_titles_;
  std::vector<std::string> doc_bodies_;
  std::vector<std::uint32_t> doc_lengths_;
  std::map<std::string, std::vector<Posting>, std::less<>> postings_;  // sorted terms, deterministic
  std::unordered_map<std::string, std::uint32_t> id_to_index_;
  std::uint64_t total_tokens_ = 0;
  Bm25Params params_;
};

// ---- TSV corpus ----------------------------------------------------------------

enum class TsvMode { Strict, Lenient };

/// Reads `id<TAB>text<TAB>title` lines. A first line whose id column is
/// literally "id" is treated as a header. Strict mode throws on malformed
/// lines; lenient mode skips them with a warning.
inline std::vector<CorpusRecord> read_corpus_tsv(const std::filesystem::path& path, TsvMode mode,
                                                 std::ostream* warnings = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open corpus file: " + path.string());
  std::vector<CorpusRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t t1 = line.find('\t');
    std::size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    bool malformed = t1 == std::string::npos || t2 == std::string::npos ||
                     line.find('\t', t2 + 1) != std::string::npos;
    if (malformed) {
      if (mode == TsvMode::Strict) throw TsvParseError(line_no, "expected exactly 3 tab-separated columns");
      if (warnings) *warnings << "warning: skipping malformed corpus line " << line_no << "\n";
      continue;
    }
    std::string id = line.substr(0, t1);
    if (line_no == 1 && id == "id") continue;  // header
    records.push_back(CorpusRecord{std::move(id), line.substr(t1 + 1, t2 - t1 - 1), line.substr(t2 + 1)});
  }
  return records;
}

// ---- Snapshot ------------------------------------------------------------------
//
// Layout (all integers little-endian, strings u32-length-prefixed):
//   magic "DRIX", u32 version,
//   section STATS    = u64 size, { u64 doc_count, u64 total_tokens, f64 k1, f64 b, u8 stopwords }
//   section DOCS     = u64 size, doc_count x { str id, str title, str body, u32 length }
//   section POSTINGS = u64 size, u64 n_terms, n_terms x { str term, u32 df, df x { u32 doc, u32 tf } }

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, sizeof(bits));
  put_u64(out, bits);
}
inline void put_str(std::string& out, std::string_view s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

class SnapshotReader {
 public:
  SnapshotReader(const std::string& data, const std::string& what) : data_(data), what_(what) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(data_[pos_ + static_cast<std::size_t>(i)]);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(data_[pos_ + static_cast<std::size_t>(i)]);
    pos_ += 8;
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::string str() {
    std::uint32_t n = u32();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void expect_bytes(std::string_view bytes) {
    need(bytes.size());
    if (data_.compare(pos_, bytes.size(), bytes) != 0) throw Error(what_ + ": bad magic");
    pos_ += bytes.size();
  }

 private:
  void need(std::size_t n) {
    if (pos_ + n > data_.size()) throw Error(what_ + ": truncated snapshot");
  }
  const std::string& data_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void SearchIndex::save(const std::filesystem::path& path) const {
  std::string stats;
  detail::put_u64(stats, doc_ids_.size());
  detail::put_u64(stats, total_tokens_);
  detail::put_f64(stats, params_.k1);
  detail::put_f64(stats, params_.b);
  stats.push_back(params_.remove_stopwords ? '\x01' : '\x00');

  std::string docs;
  for (std::size_t i = 0; i < doc_ids_.size(); ++i) {
    detail::put_str(docs, doc_ids_[i]);
    detail::put_str(docs, doc_titles_[i]);
    detail::put_str(docs, doc_bodies_[i]);
    detail::put_u32(docs, doc_lengths_[i]);
  }

  std::string postings;
  detail::put_u64(postings, postings_.size());
  for (const auto& [term, plist] : postings_) {
    detail::put_str(postings, term);
    detail::put_u32(postings, static_cast<std::uint32_t>(plist.size()));
    for (const Posting& p : plist) {
      detail::put_u32(postings, p.doc);
      detail::put_u32(postings, p.tf);
    }
  }

  std::string out;
  out.append("DRIX");
  detail::put_u32(out, 1);
  for (const std::string* section : {&stats, &docs, &postings}) {
    detail::put_u64(out, section->size());
    out.append(*section);
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw Error("cannot write snapshot: " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw Error("short write on snapshot: " + path.string());
}

inline SearchIndex SearchIndex::load(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw Error("cannot open snapshot: " + path.string());
  std::string data((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  detail::SnapshotReader r(data, path.string());
  r.expect_bytes("DRIX");
  std::uint32_t version = r.u32();
  if (version != 1) throw Error(path.string() + ": unsupported snapshot version " + std::to_string(version));

  SearchIndex index;
  r.u64();  // stats section size
  std::uint64_t doc_count = r.u64();
  index.total_tokens_ = r.u64();
  index.params_.k1 = r.f64();
  index.params_.b = r.f64();
  index.params_.remove_stopwords = r.u8() != 0;

  r.u64();  // docs section size
  for (std::uint64_t i = 0; i < doc_count; ++i) {
    std::string id = r.str();
    index.id_to_index_.emplace(id, static_cast<std::uint32_t>(i));
    index.doc_ids_.push_back(std::move(id));
    index.doc_titles_.push_back(r.str());
    index.doc_bodies_.push_back(r.str());
    index.doc_lengths_.push_back(r.u32());
  }

  r.u64();  // postings section size
  std::uint64_t n_terms = r.u64();
  for (std::uint64_t i = 0; i < n_terms; ++i) {
    std::string term = r.str();
    std::uint32_t df = r.u32();
    std::vector<Posting> plist(df);
    for (auto& p : plist) {
      p.doc = r.u32();
      p.tf = r.u32();
    }
    index.postings_.emplace(std::move(term), std::move(plist));
  }
  if (index.doc_ids_.empty()) throw EmptyCorpus();
  return index;
}

}  // namespace deeprag
