#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "deeprag/errors.hpp"
#include "deeprag/util.hpp"

namespace deeprag {

/// SQuAD-style normalization: lowercase, strip punctuation, drop the articles
/// a/an/the as whole words, collapse whitespace.
inline std::string normalize_answer(std::string_view text) {
  static constexpr std::string_view kPunct = R"(!"#$%&'()*+,-./:;<=>?@[\]^_`{|}~)";
  std::string depunct;
  depunct.reserve(text.size());
  for (char c : text) {
    if (kPunct.find(c) != std::string_view::npos) continue;
    depunct.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  std::string out;
  out.reserve(depunct.size());
  std::size_t i = 0;
  while (i < depunct.size()) {
    while (i < depunct.size() && std::isspace(static_cast<unsigned char>(depunct[i])) != 0) ++i;
    std::size_t j = i;
    while (j < depunct.size() && std::isspace(static_cast<unsigned char>(depunct[j])) == 0) ++j;
    if (j > i) {
      std::string_view word(depunct.data() + i, j - i);
      if (word != "a" && word != "an" && word != "the") {
        if (!out.empty()) out.push_back(' ');
        out.append(word);
      }
    }
    i = j;
  }
  return out;
}

inline std::vector<std::string> answer_tokens(std::string_view text) {
  std::vector<std::string> tokens;
  std::string norm = normalize_answer(text);
  std::size_t i = 0;
  while (i < norm.size()) {
    std::size_t j = norm.find(' ', i);
    if (j == std::string::npos) j = norm.size();
    if (j > i) tokens.emplace_back(norm.substr(i, j - i));
    i = j + 1;
  }
  return tokens;
}

inline bool exact_match(std::string_view pred, std::span<const std::string> golds) {
  std::string p = normalize_answer(pred);
  for (const auto& g : golds)
    if (p == normalize_answer(g)) return true;
  return false;
}

/// Bag-of-tokens F1 with multiplicity, maximized over gold aliases. Both bags
/// empty scores 1; one empty scores 0.
inline double token_f1(std::string_view pred, std::span<const std::string> golds) {
  std::vector<std::string> pt = answer_tokens(pred);
  double best = 0.0;
  for (const auto& g : golds) {
    std::vector<std::string> gt = answer_tokens(g);
    if (pt.empty() || gt.empty()) {
      best = std::max(best, (pt.empty() && gt.empty()) ? 1.0 : 0.0);
      continue;
    }
    std::unordered_map<std::string, std::size_t> counts;
    for (const auto& t : pt) ++counts[t];
    std::size_t common = 0;
    for (const auto& t : gt) {
      auto it = counts.find(t);
      if (it != counts.end() && it->second > 0) {
        --it->second;
        ++common;
      }
    }
    if (common == 0) continue;
    double precision = static_cast<double>(common) / static_cast<double>(pt.size());
    double recall = static_cast<double>(common) / static_cast<double>(gt.size());
    best = std::max(best, 2.0 * precision * recall / (precision + recall));
  }
  return best;
}

// ---- Retrieval efficiency ----------------------------------------------------

struct RetrievalRecord {
  std::size_t retrievals = 0;
  bool correct = false;
  double seconds = 0.0;
};

struct RetrievalStats {
  double em = 0.0;
  double avg_retrievals_all = 0.0;
  std::optional<double> avg_retrievals_correct;    // absent when no correct items
  std::optional<double> avg_retrievals_incorrect;  // absent when no incorrect items
  double avg_seconds_per_item = 0.0;
};

inline RetrievalStats retrieval_stats(std::span<const RetrievalRecord> records) {
  if (records.empty()) throw EmptyInput("retrieval_stats");
  double sum_all = 0.0, sum_correct = 0.0, sum_incorrect = 0.0, sum_seconds = 0.0;
  std::size_t n_correct = 0;
  for (const auto& r : records) {
    sum_all += static_cast<double>(r.retrievals);
    sum_seconds += r.seconds;
    if (r.correct) {
      sum_correct += static_cast<double>(r.retrievals);
      ++n_correct;
    } else {
      sum_incorrect += static_cast<double>(r.retrievals);
    }
  }
  std::size_t n = records.size();
  RetrievalStats stats;
  stats.em = static_cast<double>(n_correct) / static_cast<double>(n);
  stats.avg_retrievals_all = sum_all / static_cast<double>(n);
  if (n_correct > 0) stats.avg_retrievals_correct = sum_correct / static_cast<double>(n_correct);
  if (n_correct < n) stats.avg_retrievals_incorrect = sum_incorrect / static_cast<double>(n - n_correct);
  stats.avg_seconds_per_item = sum_seconds / static_cast<double>(n);
  return stats;
}

// ---- Knowledge-boundary calibration -------------------------------------------

struct BoundaryRecord {
  bool needs_retrieval = false;  // positive class: parametric knowledge insufficient
  bool did_retrieve = false;
};

struct BoundaryStats {
  double f1 = 0.0;
  double accuracy = 0.0;
  double balanced_accuracy = 0.0;
  double mcc = 0.0;
  struct Confusion {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  } confusion;
};

/// Confusion-matrix metrics with the zero-denominator conventions constant
/// predictors require: an undefined rate contributes 0.5 to balanced accuracy,
/// and MCC is 0 whenever any marginal is 0.
inline BoundaryStats boundary_metrics(std::span<const BoundaryRecord> records) {
  if (records.empty()) throw EmptyInput("boundary_metrics");
  BoundaryStats stats;
  auto& c = stats.confusion;
  for (const auto& r : records) {
    if (r.needs_retrieval && r.did_retrieve) ++c.tp;
    else if (!r.needs_retrieval && r.did_retrieve) ++c.fp;
    else if (r.needs_retrieval && !r.did_retrieve) ++c.fn;
    else ++c.tn;
  }
  double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  double tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
  double n = tp + fp + tn + fn;
  stats.f1 = (2.0 * tp + fp + fn) > 0.0 ? 2.0 * tp / (2.0 * tp + fp + fn) : 0.0;
  stats.accuracy = (tp + tn) / n;
  double tpr = (tp + fn) > 0.0 ? tp / (tp + fn) : 0.5;
  double tnr = (tn + fp) > 0.0 ? tn / (tn + fp) : 0.5;
  stats.balanced_accuracy = (tpr + tnr) / 2.0;
  double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  stats.mcc = denom > 0.0 ? (tp * tn - fp * fn) / std::sqrt(denom) : 0.0;
  return stats;
}

// ---- Decomposition statistics --------------------------------------------------

struct DecompositionRecord {
  std::vector<std::string> subqueries;
  std::size_t retrievals = 0;
};

struct DecompositionStats {
  // Subquery-count buckets 1,2,3,4,5,>=6; zero-subquery runs share the first bucket.
  std::array<std::size_t, 6> subquery_histogram{};
  // Retrieval-count buckets 0,1,2,>=3.
  std::array<std::size_t, 4> retrieval_histogram{};
  double avg_wh_words = 0.0;      // per subquery
  double avg_conjunctions = 0.0;  // per subquery
};

inline std::size_t count_whole_words(std::string_view text, std::span<const std::string_view> words) {
  std::size_t n = 0;
  std::string lower = lower_ascii(text);
  std::size_t i = 0;
  while (i < lower.size()) {
    while (i < lower.size() && std::isalnum(static_cast<unsigned char>(lower[i])) == 0) ++i;
    std::size_t j = i;
    while (j < lower.size() && std::isalnum(static_cast<unsigned char>(lower[j])) != 0) ++j;
    if (j > i) {
      std::string_view word(lower.data() + i, j - i);
      for (auto w : words)
        if (word == w) {
          ++n;
          break;
        }
    }
    i = j;
  }
  return n;
}

inline DecompositionStats decomposition_stats(std::span<const DecompositionRecord> records) {
  if (records.empty()) throw EmptyInput("decomposition_stats");
  static constexpr std::array<std::string_view, 9> kWhWords{"who", "what", "when", "where", "which",
                                                            "why", "whose", "whom", "how"};
  static constexpr std::array<std::string_view, 2> kConjunctions{"and", "or"};
  DecompositionStats stats;
  std::size_t total_subqueries = 0, total_wh = 0, total_conj = 0;
  for (const auto& r : records) {
    std::size_t nq = r.subqueries.size();
    std::size_t q_bucket = nq <= 1 ? 0 : std::min<std::size_t>(nq, 6) - 1;
    ++stats.subquery_histogram[q_bucket];
    ++stats.retrieval_histogram[std::min<std::size_t>(r.retrievals, 3)];
    for (const auto& q : r.subqueries) {
      ++total_subqueries;
      total_wh += count_whole_words(q, kWhWords);
      total_conj += count_whole_words(q, kConjunctions);
    }
  }
  if (total_subqueries > 0) {
    stats.avg_wh_words = static_cast<double>(total_wh) / static_cast<double>(total_subqueries);
    stats.avg_conjunctions = static_cast<double>(total_conj) / static_cast<double>(total_subqueries);
  }
  return stats;
}

}  // namespace deeprag
