#pragma once

#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "deeprag/core.hpp"
#include "deeprag/errors.hpp"
#include "deeprag/inference.hpp"
#include "deeprag/metrics.hpp"

namespace deeprag {

struct Report {
  std::size_t n_items = 0;
  double em = 0.0;
  double f1 = 0.0;
  RetrievalStats retrieval;
  std::optional<BoundaryStats> boundary;  // present when a parametric-only companion run was supplied
  DecompositionStats decomposition;
};

/// Scores a batch against the dataset. When a parametric-only companion run is
/// supplied, its per-question correctness becomes the needs-retrieval
/// indicator for the boundary metrics (needs retrieval = the parametric run
/// got it wrong); the main run's did-retrieve flag is n_retrievals >= 1.
inline Report build_report(std::span<const InferenceResult> results,
                           std::span<const QAInstance> dataset,
                           std::span<const InferenceResult> parametric_companion = {}) {
  if (results.empty()) throw EmptyInput("build_report");
  std::unordered_map<std::string, const QAInstance*> by_id;
  for (const auto& qa : dataset) by_id[qa.id] = &qa;
  auto golds_of = [&](const std::string& id) -> const std::vector<std::string>& {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw Error("result for unknown question id: " + id);
    return it->second->gold_answers;
  };

  Report report;
  report.n_items = results.size();
  std::vector<RetrievalRecord> retrieval_records;
  std::vector<DecompositionRecord> decomposition_records;
  double f1_sum = 0.0;
  for (const auto& r : results) {
    const auto& golds = golds_of(r.question_id);
    bool correct = !r.failed && exact_match(r.final_answer, golds);
    f1_sum += r.failed ? 0.0 : token_f1(r.final_answer, golds);
    retrieval_records.push_back(RetrievalRecord{r.n_retrievals, correct, r.wall_time_s});
    DecompositionRecord d;
    for (const auto& step : r.trajectory.state.steps()) d.subqueries.push_back(step.subquery);
    d.retrievals = r.n_retrievals;
    decomposition_records.push_back(std::move(d));
  }
  report.retrieval = retrieval_stats(retrieval_records);
  report.em = report.retrieval.em;
  report.f1 = f1_sum / static_cast<double>(results.size());
  report.decomposition = decomposition_stats(decomposition_records);

  if (!parametric_companion.empty()) {
    std::unordered_map<std::string, bool> parametric_correct;
    for (const auto& r : parametric_companion)
      parametric_correct[r.question_id] = !r.failed && exact_match(r.final_answer, golds_of(r.question_id));
    std::vector<BoundaryRecord> boundary_records;
    for (const auto& r : results) {
      auto it = parametric_correct.find(r.question_id);
      if (it == parametric_correct.end())
        throw Error("parametric companion lacks question id: " + r.question_id);
      boundary_records.push_back(BoundaryRecord{!it->second, r.n_retrievals >= 1});
    }
    report.boundary = boundary_metrics(boundary_records);
  }
  return report;
}

inline nlohmann::json report_to_json(const Report& report) {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json j{
      {"n_items", report.n_items},
      {"em", report.em},
      {"f1", report.f1},
      {"retrieval_stats",
       {{"em", report.retrieval.em},
        {"avg_retrievals_all", report.retrieval.avg_retrievals_all},
        {"avg_retrievals_correct", opt(report.retrieval.avg_retrievals_correct)},
        {"avg_retrievals_incorrect", opt(report.retrieval.avg_retrievals_incorrect)},
        {"avg_seconds_per_item", report.retrieval.avg_seconds_per_item}}},
      {"decomposition_stats",
       {{"subquery_histogram", report.decomposition.subquery_histogram},
        {"retrieval_histogram", report.decomposition.retrieval_histogram},
        {"avg_wh_words", report.decomposition.avg_wh_words},
        {"avg_conjunctions", report.decomposition.avg_conjunctions}}},
  };
  if (report.boundary) {
    const auto& b = *report.boundary;
    j["boundary_stats"] = {{"f1", b.f1},
                           {"accuracy", b.accuracy},
                           {"balanced_accuracy", b.balanced_accuracy},
                           {"mcc", b.mcc},
                           {"confusion",
                            {{"tp", b.confusion.tp},
                             {"fp", b.confusion.fp},
                             {"tn", b.confusion.tn},
                             {"fn", b.confusion.fn}}}};
  }
  return j;
}

inline std::string render_report_table(const Report& report) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  auto row = [&](std::string_view name, const std::string& value) {
    out << "  " << std::left << std::setw(28) << name << value << "\n";
  };
  auto num = [&](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << v;
    return s.str();
  };
  auto optnum = [&](const std::optional<double>& v) { return v ? num(*v) : std::string("-"); };

  out << "answer quality (" << report.n_items << " items)\n";
  row("EM", num(report.em));
  row("F1", num(report.f1));
  out << "retrieval efficiency\n";
  row("avg retrievals (all)", num(report.retrieval.avg_retrievals_all));
  row("avg retrievals (correct)", optnum(report.retrieval.avg_retrievals_correct));
  row("avg retrievals (incorrect)", optnum(report.retrieval.avg_retrievals_incorrect));
  row("avg seconds per item", num(report.retrieval.avg_seconds_per_item));
  if (report.boundary) {
    const auto& b = *report.boundary;
    out << "knowledge boundary\n";
    row("F1", num(b.f1));
    row("accuracy", num(b.accuracy));
    row("balanced accuracy", num(b.balanced_accuracy));
    row("MCC", num(b.mcc));
    row("confusion tp/fp/tn/fn", std::to_string(b.confusion.tp) + "/" + std::to_string(b.confusion.fp) +
                                     "/" + std::to_string(b.confusion.tn) + "/" +
                                     std::to_string(b.confusion.fn));
  }
  out << "decomposition\n";
  const auto& d = report.decomposition;
  row("subqueries 1/2/3/4/5/6+", std::to_string(d.subquery_histogram[0]) + "/" +
                                     std::to_string(d.subquery_histogram[1]) + "/" +
                                     std::to_string(d.subquery_histogram[2]) + "/" +
                                     std::to_string(d.subquery_histogram[3]) + "/" +
                                     std::to_string(d.subquery_histogram[4]) + "/" +
                                     std::to_string(d.subquery_histogram[5]));
  row("retrievals 0/1/2/3+", std::to_string(d.retrieval_histogram[0]) + "/" +
                                 std::to_string(d.retrieval_histogram[1]) + "/" +
                                 std::to_string(d.retrieval_histogram[2]) + "/" +
                                 std::to_string(d.retrieval_histogram[3]));
  row("avg WH-words per subquery", num(d.avg_wh_words));
  row("avg and/or per subquery", num(d.avg_conjunctions));
  return out.str();
}

}  // namespace deeprag
