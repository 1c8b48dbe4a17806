// deeprag: build a BM25 index over a passage corpus, synthesize training data
// by binary-tree search over a scripted or HTTP-served model, run adaptive
// inference, and score the results.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "deeprag/core.hpp"
#include "deeprag/inference.hpp"
#include "deeprag/jsonl.hpp"
#include "deeprag/metrics.hpp"
#include "deeprag/model.hpp"
#include "deeprag/report.hpp"
#include "deeprag/retriever.hpp"
#include "deeprag/synthesis.hpp"
#include "deeprag/tree_search.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RoleOptions {
  std::string script;  // scripted/behavior fixture file
  std::string url;     // chat-completion endpoint
  std::string model;
  std::string auth_env;
  double timeout_s = 60.0;
  std::size_t retries = 2;
};

struct CommonOptions {
  std::string index_path;
  std::string dataset_path;
  std::string shared_script;
  RoleOptions decomposer;
  RoleOptions target;
  std::size_t k = 3;
  std::size_t max_depth = deeprag::kDefaultMaxHistory;
  std::size_t max_expansions = 64;
  std::size_t max_calls = 256;
  std::size_t call_cap = 0;
  std::size_t jobs = 4;
  std::uint64_t seed = 0;
  std::string instruction_file;
};

void add_model_options(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--script", opts.shared_script, "scripted-model file used for both roles");
  cmd->add_option("--decomposer-script", opts.decomposer.script, "scripted-model file for the decomposer role");
  cmd->add_option("--target-script", opts.target.script, "scripted-model file for the target role");
  cmd->add_option("--decomposer-url", opts.decomposer.url, "chat-completion endpoint for the decomposer role");
  cmd->add_option("--decomposer-model", opts.decomposer.model, "model name sent to the decomposer endpoint");
  cmd->add_option("--decomposer-auth-env", opts.decomposer.auth_env,
                  "env var holding the decomposer bearer token");
  cmd->add_option("--target-url", opts.target.url, "chat-completion endpoint for the target role");
  cmd->add_option("--target-model", opts.target.model, "model name sent to the target endpoint");
  cmd->add_option("--target-auth-env", opts.target.auth_env, "env var holding the target bearer token");
  cmd->add_option("--timeout", opts.decomposer.timeout_s, "endpoint timeout in seconds");
  cmd->add_option("--retries", opts.decomposer.retries, "endpoint retry count");
  cmd->add_option("--call-cap", opts.call_cap, "per-run model call cap (0 = unlimited)");
}

void add_budget_options(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("-k,--k", opts.k, "documents per retrieval")->check(CLI::PositiveNumber);
  cmd->add_option("--max-depth", opts.max_depth, "max subqueries per question (T)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--max-expansions", opts.max_expansions, "max tree expansions per question")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--max-calls", opts.max_calls, "max model calls per question")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--jobs", opts.jobs, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", opts.seed, "seed for sampling and random policies");
  cmd->add_option("--instruction-file", opts.instruction_file,
                  "file overriding the built-in instruction text");
}

std::shared_ptr<deeprag::ModelBackend> make_backend(const RoleOptions& role,
                                                    const std::string& shared_script,
                                                    const RoleOptions& endpoint_defaults) {
  if (!role.url.empty()) {
    deeprag::EndpointConfig config;
    config.base_url = role.url;
    config.model = role.model;
    config.auth_env = role.auth_env;
    config.timeout_s = endpoint_defaults.timeout_s;
    config.retries = endpoint_defaults.retries;
    return std::make_shared<deeprag::HttpEndpointModel>(config);
  }
  const std::string& path = role.script.empty() ? shared_script : role.script;
  if (path.empty())
    throw deeprag::Error("no model configured: pass --script, a role-specific script, or an endpoint URL");
  return deeprag::load_scripted_model(path);
}

std::unique_ptr<deeprag::ModelGateway> make_gateway(const CommonOptions& opts) {
  auto gateway = std::make_unique<deeprag::ModelGateway>();
  auto decomposer = make_backend(opts.decomposer, opts.shared_script, opts.decomposer);
  gateway->set_role(std::string(deeprag::kDecomposerRole), decomposer);
  if (opts.target.script.empty() && opts.target.url.empty()) {
    gateway->set_role(std::string(deeprag::kTargetRole), decomposer);
  } else {
    gateway->set_role(std::string(deeprag::kTargetRole),
                      make_backend(opts.target, opts.shared_script, opts.decomposer));
  }
  if (opts.call_cap > 0) gateway->set_call_cap(opts.call_cap);
  return gateway;
}

std::string load_instruction(const CommonOptions& opts) {
  if (opts.instruction_file.empty()) return std::string(deeprag::kDefaultInstruction);
  std::ifstream in(opts.instruction_file);
  if (!in) throw deeprag::Error("cannot open instruction file: " + opts.instruction_file);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

json role_config_json(const RoleOptions& role) {
  return json{{"script", role.script}, {"url", role.url}, {"model", role.model},
              {"auth_env", role.auth_env}};
}

json common_config_json(const CommonOptions& opts) {
  return json{{"index", opts.index_path},
              {"dataset", opts.dataset_path},
              {"shared_script", opts.shared_script},
              {"decomposer", role_config_json(opts.decomposer)},
              {"target", role_config_json(opts.target)},
              {"k", opts.k},
              {"max_depth", opts.max_depth},
              {"max_expansions", opts.max_expansions},
              {"max_calls", opts.max_calls},
              {"call_cap", opts.call_cap},
              {"seed", opts.seed}};
}

std::vector<deeprag::QAInstance> sampled_dataset(const CommonOptions& opts, std::size_t sample_size) {
  std::vector<deeprag::QAInstance> dataset = deeprag::load_dataset(opts.dataset_path);
  if (sample_size > 0 && sample_size < dataset.size()) {
    std::mt19937_64 rng(opts.seed);
    std::shuffle(dataset.begin(), dataset.end(), rng);
    dataset.resize(sample_size);
  }
  return dataset;
}

// ---- index ---------------------------------------------------------------------

int run_index(const std::string& corpus_path, const std::string& out_path, double k1, double b,
              bool stopwords, bool lenient) {
  auto records = deeprag::read_corpus_tsv(corpus_path, lenient ? deeprag::TsvMode::Lenient
                                                               : deeprag::TsvMode::Strict,
                                          &std::cerr);
  deeprag::SearchIndex index = deeprag::SearchIndex::build(records, deeprag::Bm25Params{k1, b, stopwords});
  index.save(out_path);

  deeprag::Manifest manifest;
  manifest.command = "index";
  manifest.config = json{{"corpus", corpus_path}, {"k1", k1}, {"b", b},
                         {"stopwords", stopwords}, {"lenient", lenient}, {"seed", 0}};
  manifest.kept = index.doc_count();
  deeprag::write_manifest(out_path, manifest);

  std::cout << "indexed " << index.doc_count() << " documents, avg length " << index.avg_doc_length()
            << ", vocabulary " << index.vocabulary_size() << "\n";
  return 0;
}

// ---- synthesize -----------------------------------------------------------------

struct SynthesizeOptions {
  CommonOptions common;
  std::string stage = "imitation";
  std::string out_dir;
  std::string policy_name = "minimal";
  std::string pairs_from = "optimal";
  std::size_t sample_size = 0;
};

deeprag::SelectionPolicy policy_from_name(const std::string& name, std::uint64_t seed) {
  if (name == "minimal") return deeprag::SelectionPolicy::minimal();
  if (name == "most") return deeprag::SelectionPolicy::most();
  if (name == "random") return deeprag::SelectionPolicy::random(seed);
  throw deeprag::Error("unknown policy: " + name);
}

int run_synthesize(const SynthesizeOptions& opts) {
  const CommonOptions& common = opts.common;
  deeprag::SearchIndex index = deeprag::SearchIndex::load(common.index_path);
  auto gateway = make_gateway(common);
  std::string instruction = load_instruction(common);
  std::vector<deeprag::QAInstance> dataset = sampled_dataset(common, opts.sample_size);
  deeprag::SearchBudget budget{common.max_depth, common.max_expansions, common.max_calls};
  deeprag::SelectionPolicy policy = policy_from_name(opts.policy_name, common.seed);

  fs::create_directories(opts.out_dir);
  fs::path out_path = fs::path(opts.out_dir) / (opts.stage == "imitation" ? "imitation.jsonl"
                                                                          : "preference.jsonl");
  fs::path log_path = fs::path(opts.out_dir) / "search_log.jsonl";
  fs::path checkpoint_path = out_path;
  checkpoint_path += ".checkpoint.json";

  // Resume from a previous interrupted run of the same configuration.
  std::size_t start = 0, kept = 0, discarded = 0;
  json config = common_config_json(common);
  config["stage"] = opts.stage;
  config["policy"] = opts.policy_name;
  config["pairs_from"] = opts.pairs_from;
  config["sample_size"] = opts.sample_size;
  if (fs::exists(checkpoint_path)) {
    std::ifstream checkpoint_in(checkpoint_path);
    json checkpoint = json::parse(checkpoint_in);
    if (checkpoint.at("config_hash") == deeprag::config_hash(config)) {
      start = checkpoint.at("next").get<std::size_t>();
      kept = checkpoint.at("kept").get<std::size_t>();
      discarded = checkpoint.at("discarded").get<std::size_t>();
      std::cerr << "resuming from question " << start << "\n";
    }
  }
  std::ofstream out(out_path, start == 0 ? std::ios::trunc : std::ios::app);
  std::ofstream log(log_path, start == 0 ? std::ios::trunc : std::ios::app);
  if (!out || !log) throw deeprag::Error("cannot write outputs under " + opts.out_dir);

  for (std::size_t i = start; i < dataset.size(); ++i) {
    const deeprag::QAInstance& question = dataset[i];
    deeprag::SearchResult result =
        deeprag::synthesize(question, *gateway, std::string(deeprag::kDecomposerRole),
                            std::string(deeprag::kTargetRole), index, budget, common.k, policy,
                            instruction);
    for (const auto& line : deeprag::search_log_lines(question, result)) log << line << "\n";

    if (opts.stage == "imitation") {
      if (result.trajectory) {
        out << deeprag::imitation_to_json(
                   deeprag::to_imitation_example(*result.trajectory, instruction))
                   .dump()
            << "\n";
        ++kept;
      } else {
        ++discarded;
      }
    } else {
      std::vector<deeprag::PreferencePair> pairs;
      if (opts.pairs_from == "optimal") {
        if (result.trajectory)
          pairs = deeprag::build_preference_pairs(question, *result.trajectory, instruction);
      } else {
        auto terminals =
            deeprag::enumerate_all(question, *gateway, std::string(deeprag::kDecomposerRole),
                                   std::string(deeprag::kTargetRole), index, budget, common.k,
                                   instruction);
        pairs = opts.pairs_from == "all-nodes"
                    ? deeprag::preference_pairs_all_nodes(question, terminals, instruction)
                    : deeprag::preference_pairs_sentence_wise(question, terminals, instruction);
      }
      if (pairs.empty()) {
        ++discarded;
      } else {
        for (const auto& pair : pairs) out << deeprag::pair_to_json(pair).dump() << "\n";
        ++kept;
      }
    }
    out.flush();
    log.flush();
    std::ofstream checkpoint(checkpoint_path, std::ios::trunc);
    checkpoint << json{{"config_hash", deeprag::config_hash(config)},
                       {"next", i + 1},
                       {"kept", kept},
                       {"discarded", discarded}}
                      .dump()
               << "\n";
  }

  fs::remove(checkpoint_path);
  deeprag::Manifest manifest;
  manifest.command = "synthesize";
  manifest.config = config;
  manifest.kept = kept;
  manifest.discarded = discarded;
  deeprag::write_manifest(out_path, manifest);
  deeprag::write_manifest(log_path, manifest);
  std::cout << "synthesize stage=" << opts.stage << " kept=" << kept << " discarded=" << discarded
            << " -> " << out_path.string() << "\n";
  return 0;
}

// ---- infer -----------------------------------------------------------------------

int run_infer(const CommonOptions& common, const std::string& mode_name, const std::string& out_path) {
  deeprag::SearchIndex index = deeprag::SearchIndex::load(common.index_path);
  deeprag::IndexSearcher searcher(index);
  auto gateway = make_gateway(common);
  std::string instruction = load_instruction(common);
  std::vector<deeprag::QAInstance> dataset = deeprag::load_dataset(common.dataset_path);
  deeprag::InferenceMode mode = deeprag::inference_mode_from_string(mode_name);
  deeprag::SearchBudget budget{common.max_depth, common.max_expansions, common.max_calls};

  auto results = deeprag::run_batch(dataset, *gateway, std::string(deeprag::kTargetRole), searcher,
                                    mode, budget, common.k, common.jobs, instruction);
  std::vector<json> lines;
  lines.reserve(results.size());
  std::size_t failed = 0;
  for (const auto& r : results) {
    lines.push_back(deeprag::result_to_json(r));
    failed += r.failed ? 1 : 0;
  }
  deeprag::write_jsonl(out_path, lines);

  deeprag::Manifest manifest;
  manifest.command = "infer";
  manifest.config = common_config_json(common);
  manifest.config["mode"] = mode_name;
  manifest.kept = results.size() - failed;
  manifest.discarded = failed;
  deeprag::write_manifest(out_path, manifest);
  std::cout << "infer mode=" << mode_name << " items=" << results.size() << " failed=" << failed
            << " -> " << out_path << "\n";
  return 0;
}

// ---- report ----------------------------------------------------------------------

int run_report(const std::string& results_path, const std::string& dataset_path,
               const std::string& parametric_path, const std::string& out_path) {
  std::vector<deeprag::InferenceResult> results;
  for (const auto& j : deeprag::read_jsonl(results_path)) results.push_back(deeprag::result_from_json(j));
  std::vector<deeprag::QAInstance> dataset = deeprag::load_dataset(dataset_path);
  std::vector<deeprag::InferenceResult> companion;
  if (!parametric_path.empty())
    for (const auto& j : deeprag::read_jsonl(parametric_path))
      companion.push_back(deeprag::result_from_json(j));

  deeprag::Report report = deeprag::build_report(results, dataset, companion);
  std::cout << deeprag::render_report_table(report);
  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw deeprag::Error("cannot write report: " + out_path);
    out << deeprag::report_to_json(report).dump(2) << "\n";
    deeprag::Manifest manifest;
    manifest.command = "report";
    manifest.config = json{{"results", results_path},
                           {"dataset", dataset_path},
                           {"parametric_results", parametric_path},
                           {"seed", 0}};
    manifest.kept = report.n_items;
    deeprag::write_manifest(out_path, manifest);
  }
  return 0;
}

// ---- oracle-check ------------------------------------------------------------------

int run_oracle_check(const CommonOptions& common) {
  deeprag::SearchIndex index = deeprag::SearchIndex::load(common.index_path);
  auto gateway = make_gateway(common);
  std::string instruction = load_instruction(common);
  std::vector<deeprag::QAInstance> dataset = deeprag::load_dataset(common.dataset_path);
  deeprag::SearchBudget budget{common.max_depth, common.max_expansions, common.max_calls};

  std::size_t mismatches = 0;
  for (const auto& question : dataset) {
    deeprag::SearchResult result =
        deeprag::synthesize(question, *gateway, std::string(deeprag::kDecomposerRole),
                            std::string(deeprag::kTargetRole), index, budget, common.k,
                            deeprag::SelectionPolicy::minimal(), instruction);
    auto terminals =
        deeprag::enumerate_all(question, *gateway, std::string(deeprag::kDecomposerRole),
                               std::string(deeprag::kTargetRole), index, budget, common.k, instruction);
    std::optional<std::size_t> oracle_min;
    for (const auto& t : terminals)
      if (t.correct.value_or(false) && (!oracle_min || t.retrieval_count < *oracle_min))
        oracle_min = t.retrieval_count;

    bool ok;
    std::string detail;
    if (oracle_min.has_value() != result.trajectory.has_value()) {
      ok = false;
      detail = "presence mismatch";
    } else if (oracle_min && result.trajectory->retrieval_count != *oracle_min) {
      ok = false;
      detail = "count " + std::to_string(result.trajectory->retrieval_count) + " vs oracle " +
               std::to_string(*oracle_min);
    } else {
      ok = true;
      detail = oracle_min ? "minimal count " + std::to_string(*oracle_min) : "both absent";
    }
    std::cout << (ok ? "PASS " : "FAIL ") << question.id << ": " << detail << "\n";
    mismatches += ok ? 0 : 1;
  }
  std::cout << (mismatches == 0 ? "oracle-check passed" : "oracle-check FAILED") << " on "
            << dataset.size() << " questions\n";
  return mismatches == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DeepRAG-style adaptive retrieval pipeline"};
  app.set_config("--config", "", "TOML config file; flags override file values");
  app.require_subcommand(1);

  // index
  auto* index_cmd = app.add_subcommand("index", "build a BM25 snapshot from a TSV corpus");
  std::string corpus_path, index_out;
  double k1 = 1.2, b = 0.75;
  bool stopwords = false, lenient = false;
  index_cmd->add_option("--corpus", corpus_path, "TSV corpus (id<TAB>text<TAB>title)")->required();
  index_cmd->add_option("--out", index_out, "snapshot output path")->required();
  index_cmd->add_option("--k1", k1, "BM25 k1");
  index_cmd->add_option("--b", b, "BM25 b");
  index_cmd->add_flag("--stopwords", stopwords, "drop stopwords at tokenization");
  index_cmd->add_flag("--lenient", lenient, "skip malformed TSV lines instead of failing");

  // synthesize
  SynthesizeOptions syn;
  auto* syn_cmd = app.add_subcommand("synthesize", "emit Stage-I or Stage-II training data");
  syn_cmd->add_option("--stage", syn.stage, "imitation | preference")
      ->check(CLI::IsMember({"imitation", "preference"}))
      ->required();
  syn_cmd->add_option("--index", syn.common.index_path, "index snapshot")->required();
  syn_cmd->add_option("--dataset", syn.common.dataset_path, "QA JSONL")->required();
  syn_cmd->add_option("--out-dir", syn.out_dir, "output directory")->required();
  syn_cmd->add_option("--policy", syn.policy_name, "minimal | most | random")
      ->check(CLI::IsMember({"minimal", "most", "random"}));
  syn_cmd->add_option("--pairs-from", syn.pairs_from, "optimal | all-nodes | sentence-wise")
      ->check(CLI::IsMember({"optimal", "all-nodes", "sentence-wise"}));
  syn_cmd->add_option("--sample-size", syn.sample_size, "cap on sampled questions (0 = all)");
  add_model_options(syn_cmd, syn.common);
  add_budget_options(syn_cmd, syn.common);

  // infer
  CommonOptions infer_opts;
  std::string infer_mode = "adaptive", infer_out;
  auto* infer_cmd = app.add_subcommand("infer", "run the MDP loop over a dataset");
  infer_cmd->add_option("--mode", infer_mode, "adaptive | retrieve-all | parametric")
      ->check(CLI::IsMember({"adaptive", "retrieve-all", "parametric"}))
      ->required();
  infer_cmd->add_option("--index", infer_opts.index_path, "index snapshot")->required();
  infer_cmd->add_option("--dataset", infer_opts.dataset_path, "QA JSONL")->required();
  infer_cmd->add_option("--out", infer_out, "results JSONL path")->required();
  add_model_options(infer_cmd, infer_opts);
  add_budget_options(infer_cmd, infer_opts);

  // report
  std::string report_results, report_dataset, report_parametric, report_out;
  auto* report_cmd = app.add_subcommand("report", "score results and print the metric bundle");
  report_cmd->add_option("--results", report_results, "results JSONL")->required();
  report_cmd->add_option("--dataset", report_dataset, "QA JSONL")->required();
  report_cmd->add_option("--parametric-results", report_parametric,
                         "parametric-only companion results (enables boundary metrics)");
  report_cmd->add_option("--out", report_out, "machine-readable report JSON path");

  // oracle-check
  CommonOptions oracle_opts;
  auto* oracle_cmd = app.add_subcommand("oracle-check",
                                        "compare synthesize(minimal) against exhaustive enumeration");
  oracle_cmd->add_option("--index", oracle_opts.index_path, "index snapshot")->required();
  oracle_cmd->add_option("--dataset", oracle_opts.dataset_path, "QA JSONL")->required();
  add_model_options(oracle_cmd, oracle_opts);
  add_budget_options(oracle_cmd, oracle_opts);

  CLI11_PARSE(app, argc, argv);

  try {
    if (index_cmd->parsed()) return run_index(corpus_path, index_out, k1, b, stopwords, lenient);
    if (syn_cmd->parsed()) return run_synthesize(syn);
    if (infer_cmd->parsed()) return run_infer(infer_opts, infer_mode, infer_out);
    if (report_cmd->parsed()) return run_report(report_results, report_dataset, report_parametric, report_out);
    if (oracle_cmd->parsed()) return run_oracle_check(oracle_opts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
