#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <map>
#include <string>

#include "medent/analysis.hpp"
#include "medent/error.hpp"
#include "medent/util.hpp"
#include "test_support.hpp"

using namespace medent;
using test_support::fixture_path;

namespace {

Seq2SeqModel untrained_for(const Corpus& c) {
  ModelConfig cfg;
  cfg.embed_dim = 5;
  cfg.hidden_dim = 7;
  cfg.proc_vocab_size = c.proc_vocab.size();
  cfg.diag_vocab_size = c.diag_vocab.size();
  return Seq2SeqModel(cfg);
}

EntropyTrend flat_trend(const std::string& id, std::vector<double> bits) {
  EntropyTrend t{id, {}};
  for (std::size_t m = 0; m < bits.size(); ++m) {
    t.steps.push_back({m, m == 0 ? std::nullopt : std::optional<Code>("p"), bits[m]});
  }
  return t;
}

}  // namespace

TEST_CASE("n-gram tables on the five-admission fixture") {
  const Corpus c = load_jsonl(fixture_path("five_admissions.jsonl"));
  const auto model = untrained_for(c);
  const auto mode = InitialEntropyMode::kUniformProcedure;

  auto t1 = ngram_entropy_table(model, c, 1, 10, mode);
  REQUIRE(t1.rows.size() == 2);
  CHECK(t1.rows[0].prefix == std::vector<Code>{"0066"});
  CHECK(t1.rows[0].cases == 3);
  CHECK(t1.rows[0].frequency == 0.6);
  CHECK(t1.rows[1].prefix == std::vector<Code>{"8952"});
  CHECK(t1.rows[1].cases == 2);

  auto t2 = ngram_entropy_table(model, c, 2, 10, mode);
  REQUIRE(t2.rows.size() == 3);
  CHECK(t2.rows[0].prefix == std::vector<Code>{"0066", "8952"});
  CHECK(t2.rows[0].cases == 2);
  // one-case ties in lexicographic prefix order
  CHECK(t2.rows[1].prefix == std::vector<Code>{"0066", "3893"});
  CHECK(t2.rows[2].prefix == std::vector<Code>{"8952", "8744"});

  auto t3 = ngram_entropy_table(model, c, 3, 2, mode);
  REQUIRE(t3.rows.size() == 2);
  CHECK(t3.rows[0].prefix == std::vector<Code>{"0066", "3893", "8952"});
  CHECK(t3.rows[1].prefix == std::vector<Code>{"0066", "8952", "3893"});
  for (const auto& r : t3.rows) {
    CHECK(r.entropy_after.size() == 3);
    const auto trend = entropy_trend(model, c.proc_vocab, "", r.prefix, 0.0);
    for (std::size_t m = 1; m <= 3; ++m) CHECK(r.entropy_after[m - 1] == trend.steps[m].entropy_bits);
  }
  for (std::size_t i = 0; i < t2.rows.size(); ++i) CHECK(t2.rows[i].rank == i + 1);

  CHECK_THROWS_AS(ngram_entropy_table(model, c, 4, 10, mode), Error);
  CHECK_THROWS_AS(ngram_entropy_table(model, c, 1, 0, mode), Error);
}

TEST_CASE("n-gram counts match a brute-force recount") {
  const Corpus c = synth_generate(load_generator_spec(test_support::spec_path("oracle4.json")), 1000);
  for (std::size_t n = 1; n <= 3; ++n) {
    std::map<std::string, std::size_t> brute;
    std::size_t eligible = 0;
    for (const auto& a : c.admissions) {
      if (a.procedures.size() < n) continue;
      ++eligible;
      std::string key;
      for (std::size_t i = 0; i < n; ++i) key += a.procedures[i] + "\x1f";
      ++brute[key];
    }
    const auto counts = count_prefixes(c.admissions, n);
    CHECK(counts.size() == brute.size());
    std::size_t total = 0;
    for (const auto& [prefix, k] : counts) {
      std::string key;
      for (const auto& p : prefix) key += p + "\x1f";
      CHECK(brute[key] == k);
      total += k;
    }
    CHECK(total == eligible);
  }
}

TEST_CASE("degenerate corpus has a single n-gram row") {
  auto t = test_support::train_on_spec("deterministic.json", 30, 1);
  Corpus only;
  for (const auto& a : t.corpus.admissions) {
    if (a.procedures.front() == "p1") only.admissions.push_back(a);
  }
  only.proc_vocab = t.corpus.proc_vocab;
  only.diag_vocab = t.corpus.diag_vocab;
  const auto table = ngram_entropy_table(t.model, only, 2, 5, InitialEntropyMode::kUniformProcedure);
  REQUIRE(table.rows.size() == 1);
  CHECK(table.rows[0].frequency == 1.0);
}

TEST_CASE("cluster trends") {
  std::vector<Admission> as{
      {"1", {"p", "q"}, {"A"}}, {"2", {"p", "q"}, {"A", "B"}}, {"3", {"p", "r"}, {"B"}}, {"4", {"p"}, {"A"}}};
  std::vector<EntropyTrend> ts{flat_trend("1", {3, 1, 0.5}), flat_trend("2", {3, 3, 0.5}),
                               flat_trend("3", {3, 2, 1}), flat_trend("4", {3, 0})};
  const auto clusters = cluster_trends_from(as, ts, 2, {"A", "Z"});
  REQUIRE(clusters.size() == 3);
  CHECK(clusters[0].cluster_key == "A");
  CHECK(clusters[1].cluster_key == "Z");
  CHECK(clusters[2].cluster_key == "ALL");

  const auto& a = clusters[0];
  REQUIRE(a.per_step.size() == 3);
  CHECK(a.per_step[1].count == 2);
  CHECK(*a.per_step[1].mean_bits == 2.0);
  CHECK(*a.per_step[1].std_bits == 1.0);  // population: values 1 and 3
  CHECK(*a.per_step[2].std_bits == 0.0);

  CHECK(clusters[1].empty());
  CHECK(clusters[1].per_step.size() == 3);
  CHECK_FALSE(clusters[1].per_step[0].mean_bits.has_value());

  const auto& all = clusters[2];
  for (const auto& s : all.per_step) CHECK(s.count == 3);
  CHECK(std::abs(*all.per_step[2].mean_bits - 2.0 / 3.0) < 1e-15);

  SUBCASE("identical admissions have zero spread") {
    std::vector<Admission> same(5, Admission{"x", {"p", "q", "r"}, {"A"}});
    std::vector<EntropyTrend> st(5, flat_trend("x", {4.1, 2.3, 0.7, 0.1}));
    for (const auto& c : cluster_trends_from(same, st, 3, {"A"})) {
      for (const auto& s : c.per_step) CHECK(*s.std_bits == 0.0);
    }
  }
  SUBCASE("model-driven clusters count length-M admissions") {
    const Corpus c = load_jsonl(fixture_path("five_admissions.jsonl"));
    const auto model = untrained_for(c);
    const auto got = cluster_trends(model, c, 3, {"41401"}, InitialEntropyMode::kUniformProcedure);
    REQUIRE(got.size() == 2);
    CHECK(got[0].per_step[0].count == 1);
    CHECK(got[1].per_step[0].count == 3);
    CHECK(got[1].per_step.size() == 4);
  }
  SUBCASE("csv round trip") {
    const auto csv = cluster_trends_to_csv(clusters);
    CHECK(csv.substr(0, csv.find('\n')) == "cluster,step,mean_bits,std_bits,count");
    CHECK(csv.find("Z,0,,,0\n") != std::string::npos);
    CHECK(cluster_trends_from_csv(csv) == clusters);
    CHECK(cluster_trends_to_csv(cluster_trends_from_csv(csv)) == csv);
  }
  CHECK_THROWS_AS(cluster_trends_from(as, ts, 0, {}), Error);
}

TEST_CASE("exports") {
  const Corpus c = load_jsonl(fixture_path("five_admissions.jsonl"));
  const auto model = untrained_for(c);
  const auto mode = InitialEntropyMode::kUniformProcedure;
  TrendBundle bundle;
  for (const auto& a : c.admissions) bundle.trends.push_back(entropy_trend(model, a, mode, c));
  bundle.ngram_tables.push_back(ngram_entropy_table(model, c, 1, 10, mode));
  bundle.ngram_tables.push_back(ngram_entropy_table(model, c, 3, 10, mode));
  bundle.cluster_trends = cluster_trends(model, c, 3, {"41401", "78650", "nope"}, mode);
  test_support::TempDir dir;

  SUBCASE("ngram csv header and round trip") {
    const auto csv = ngram_table_to_csv(bundle.ngram_tables[1]);
    CHECK(csv.substr(0, csv.find('\n')) == "rank,codes,cases,frequency,entropy_step_1,entropy_step_2,entropy_step_3");
    CHECK(ngram_table_to_csv(ngram_table_from_csv(csv)) == csv);
  }
  SUBCASE("rendered units") {
    const auto one = render_ngram_table(bundle.ngram_tables[0]);
    CHECK(one.find("60.00%") != std::string::npos);
    const auto three = render_ngram_table(bundle.ngram_tables[1]);
    CHECK(three.find("200.0‰") != std::string::npos);
  }
  SUBCASE("csv files re-export byte-identically") {
    const auto files = export_trend_bundle(bundle, dir.path() / "out.csv", ExportFormat::kCsv);
    REQUIRE(files.size() == 4);
    const auto trends_csv = read_file(files[0]);
    CHECK(trends_to_csv(trends_from_csv(trends_csv)) == trends_csv);
    CHECK(files[1].filename() == "out.ngram1.csv");
    CHECK(files[3].filename() == "out.clusters.csv");
    const auto again = export_trend_bundle(bundle, dir.path() / "again.csv", ExportFormat::kCsv);
    for (std::size_t i = 0; i < files.size(); ++i) CHECK(read_file(files[i]) == read_file(again[i]));
  }
  SUBCASE("json re-exports byte-identically and validates against the schema") {
    const auto path = dir.path() / "bundle.json";
    export_trend_bundle(bundle, path, ExportFormat::kJson);
    const auto text = read_file(path);
    const auto parsed = bundle_from_json(nlohmann::json::parse(text));
    CHECK(parsed.trends == bundle.trends);
    CHECK(parsed.cluster_trends == bundle.cluster_trends);
    const auto path2 = dir.path() / "bundle2.json";
    export_trend_bundle(parsed, path2, ExportFormat::kJson);
    CHECK(read_file(path2) == text);

    const auto schema = test_support::source_dir() / "schemas" / "trend_bundle.schema.json";
    const std::string cmd = "python3 -c \"import json,sys,jsonschema; jsonschema.validate(json.load(open(sys.argv[1])), "
                            "json.load(open(sys.argv[2])))\" '" +
                            path.string() + "' '" + schema.string() + "'";
    CHECK(std::system(cmd.c_str()) == 0);
  }
  SUBCASE("schema version is enforced") {
    auto j = nlohmann::json::parse(bundle_to_json(bundle).dump());
    j["schema_version"] = 2;
    CHECK_THROWS_AS(bundle_from_json(j), Error);
  }
}
