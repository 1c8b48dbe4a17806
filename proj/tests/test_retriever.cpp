#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "deeprag/retriever.hpp"
#include "support/oracles.hpp"

using namespace deeprag;
namespace fs = std::filesystem;

namespace {

std::vector<CorpusRecord> random_corpus(std::mt19937_64& rng, int n_docs) {
  static const char* vocab[] = {"apple",  "river", "stone",  "cloud", "engine", "forest", "silver",
                                "harbor", "night", "signal", "mount", "valley", "copper", "token",
                                "quartz", "delta", "orbit",  "prism", "cable",  "meadow"};
  std::vector<CorpusRecord> records;
  for (int i = 0; i < n_docs; ++i) {
    std::ostringstream body;
    int len = 5 + static_cast<int>(rng() % 26);
    for (int w = 0; w < len; ++w) body << vocab[rng() % 20] << ' ';
    records.push_back(CorpusRecord{"doc" + std::to_string(i), body.str(),
                                   std::string(vocab[rng() % 20]) + " notes"});
  }
  return records;
}

fs::path temp_file(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "deeprag_retriever_tests";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("build counts documents") {
  std::vector<CorpusRecord> records{{"a", "one sentence here", "t1"},
                                    {"b", "another sentence", "t2"},
                                    {"c", "third body", "t3"}};
  SearchIndex index = SearchIndex::build(records);
  CHECK(index.doc_count() == 3);
}

TEST_CASE("duplicate doc ids are rejected by name") {
  std::vector<CorpusRecord> records{{"dup", "x", ""}, {"dup", "y", ""}};
  try {
    SearchIndex::build(records);
    FAIL("expected DuplicateDocId");
  } catch (const DuplicateDocId& e) {
    CHECK(e.doc_id() == "dup");
  }
  CHECK_THROWS_AS(SearchIndex::build(std::vector<CorpusRecord>{}), EmptyCorpus);
}

TEST_CASE("index statistics match a naive single-pass oracle on 100 records") {
  std::mt19937_64 rng(41);
  std::vector<CorpusRecord> records = random_corpus(rng, 100);
  SearchIndex index = SearchIndex::build(records);
  oracle::NaiveCorpusStats naive = oracle::naive_corpus_stats(records);

  CHECK(index.doc_count() == 100);
  CHECK(index.avg_doc_length() ==
        Catch::Approx(naive.avg_length).epsilon(1e-9));
  for (const auto& doc : naive.docs) {
    CHECK(index.doc_length(doc.doc_id) == doc.length);
    for (const auto& [term, tf] : doc.tf) CHECK(index.term_tf(term, doc.doc_id) == tf);
  }
  for (const auto& [term, df] : naive.df) CHECK(index.term_df(term) == df);
  CHECK(index.vocabulary_size() == naive.df.size());
}

TEST_CASE("search returns nothing when no token overlaps") {
  std::vector<CorpusRecord> records{{"a", "apple river stone", ""}};
  SearchIndex index = SearchIndex::build(records);
  CHECK(index.search("zebra xylophone", 5).empty());
}

TEST_CASE("single-document corpus ranks that document for its own first word") {
  std::vector<CorpusRecord> records{{"only", "harbor lights at dusk", ""}};
  SearchIndex index = SearchIndex::build(records);
  auto hits = index.search("harbor", 3);
  REQUIRE(hits.size() == 1);
  CHECK(hits[0].doc_id == "only");
  CHECK(hits[0].score > 0.0);
  CHECK(hits[0].body == "harbor lights at dusk");
}

TEST_CASE("score matches the closed form on a one-term single-document corpus") {
  std::vector<CorpusRecord> records{{"d", "quartz orbit prism cable", ""}};
  SearchIndex index = SearchIndex::build(records, Bm25Params{1.2, 0.75, false});
  // N=1, df=1, tf=1, len == avglen.
  double expected = std::log(1.0 + 0.5 / 1.5) * (1.0 * 2.2) / (1.0 + 1.2);
  CHECK(index.score("quartz", "d") == Catch::Approx(expected).epsilon(1e-12));
  CHECK(index.score("zebra", "d") == 0.0);  // absent term contributes nothing
  CHECK_THROWS_AS(index.score("quartz", "nosuch"), UnknownDocId);
}

TEST_CASE("scores are never negative") {
  std::mt19937_64 rng(43);
  std::vector<CorpusRecord> records = random_corpus(rng, 40);
  SearchIndex index = SearchIndex::build(records);
  for (int q = 0; q < 30; ++q) {
    std::string query = records[rng() % 40].body.substr(0, 18);
    for (const auto& hit : index.search(query, 40)) CHECK(hit.score >= 0.0);
  }
}

TEST_CASE("search ranking is a prefix of the brute-force ranking") {
  std::mt19937_64 rng(47);
  std::vector<CorpusRecord> records = random_corpus(rng, 100);
  SearchIndex index = SearchIndex::build(records);
  static const char* query_words[] = {"apple", "river", "stone",  "cloud", "engine",
                                      "forest", "silver", "harbor", "night", "zebra"};
  for (int q = 0; q < 20; ++q) {
    std::string query;
    int n = 1 + static_cast<int>(rng() % 4);
    for (int w = 0; w < n; ++w) query += std::string(query_words[rng() % 10]) + " ";
    auto expected = oracle::naive_bm25_ranking(records, query);
    auto hits = index.search(query, 10);
    REQUIRE(hits.size() == std::min<std::size_t>(10, expected.size()));
    for (std::size_t i = 0; i < hits.size(); ++i) {
      CHECK(hits[i].doc_id == expected[i].doc_id);
      CHECK(hits[i].score == Catch::Approx(expected[i].score).margin(1e-10));
    }
  }
}

TEST_CASE("stopword removal is off by default and honored when enabled") {
  std::vector<CorpusRecord> records{{"d1", "the apple of the valley", ""}};
  SearchIndex plain = SearchIndex::build(records);
  CHECK(plain.term_df("the") == 1);

  SearchIndex filtered = SearchIndex::build(records, Bm25Params{1.2, 0.75, true});
  CHECK(filtered.term_df("the") == 0);
  CHECK(filtered.term_df("apple") == 1);
  CHECK(filtered.doc_length("d1") < plain.doc_length("d1"));
}

TEST_CASE("tsv reader handles headers, strict errors and lenient skips") {
  fs::path good = temp_file("good.tsv");
  {
    std::ofstream out(good);
    out << "id\ttext\ttitle\n";
    out << "1\tfirst passage\tAlpha\n";
    out << "2\tsecond passage\tBeta\n";
  }
  auto records = read_corpus_tsv(good, TsvMode::Strict);
  REQUIRE(records.size() == 2);
  CHECK(records[0].doc_id == "1");
  CHECK(records[0].body == "first passage");
  CHECK(records[0].title == "Alpha");

  fs::path bad = temp_file("bad.tsv");
  {
    std::ofstream out(bad);
    out << "1\tfirst passage\tAlpha\n";
    out << "2\tmissing title\n";
    out << "3\tthird passage\tGamma\n";
  }
  try {
    read_corpus_tsv(bad, TsvMode::Strict);
    FAIL("expected TsvParseError");
  } catch (const TsvParseError& e) {
    CHECK(e.line_no() == 2);
  }
  std::ostringstream warnings;
  auto lenient = read_corpus_tsv(bad, TsvMode::Lenient, &warnings);
  CHECK(lenient.size() == 2);
  CHECK(warnings.str().find("line 2") != std::string::npos);
}

TEST_CASE("snapshot round-trip preserves search behavior and rebuilds are byte-identical") {
  std::mt19937_64 rng(53);
  std::vector<CorpusRecord> records = random_corpus(rng, 30);
  SearchIndex index = SearchIndex::build(records);

  fs::path snap_a = temp_file("a.idx");
  fs::path snap_b = temp_file("b.idx");
  index.save(snap_a);
  SearchIndex::build(records).save(snap_b);

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  CHECK(slurp(snap_a) == slurp(snap_b));

  SearchIndex loaded = SearchIndex::load(snap_a);
  CHECK(loaded.doc_count() == index.doc_count());
  CHECK(loaded.avg_doc_length() == index.avg_doc_length());
  for (int q = 0; q < 10; ++q) {
    std::string query = records[rng() % 30].body.substr(0, 12);
    auto a = index.search(query, 5);
    auto b = loaded.search(query, 5);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].doc_id == b[i].doc_id);
      CHECK(a[i].score == b[i].score);
    }
  }
}

TEST_CASE("identical record streams yield identical rankings") {
  std::mt19937_64 rng(59);
  std::vector<CorpusRecord> records = random_corpus(rng, 25);
  SearchIndex first = SearchIndex::build(records);
  SearchIndex second = SearchIndex::build(records);
  for (int q = 0; q < 10; ++q) {
    std::string query = records[rng() % 25].body.substr(0, 15);
    auto a = first.search(query, 8);
    auto b = second.search(query, 8);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].doc_id == b[i].doc_id);
  }
}
