#include "medent/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "medent/error.hpp"
#include "medent/util.hpp"

namespace medent {

std::map<std::vector<Code>, std::size_t> count_prefixes(std::span<const Admission> admissions, std::size_t n) {
  if (n < 1) throw Error("invalid_argument", "n must be >= 1");
  std::map<std::vector<Code>, std::size_t> counts;
  for (const auto& a : admissions) {
    if (a.procedures.size() < n) continue;
    ++counts[std::vector<Code>(a.procedures.begin(), a.procedures.begin() + static_cast<std::ptrdiff_t>(n))];
  }
  return counts;
}

NGramTable ngram_entropy_table(const Seq2SeqModel& model, const Corpus& corpus, std::size_t n,
                               std::size_t top, InitialEntropyMode mode) {
  if (top < 1) throw Error("invalid_argument", "top must be >= 1");
  const auto counts = count_prefixes(corpus.admissions, n);
  if (counts.empty()) {
    throw Error("no_admissions", "no admission has at least " + std::to_string(n) + " procedures");
  }
  std::vector<std::pair<std::vector<Code>, std::size_t>> ranked(counts.begin(), counts.end());
  // counts is keyed lexicographically, so a stable sort on cases leaves
  // ties in prefix order.
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > top) ranked.resize(top);

  NGramTable table;
  table.n = n;
  table.total_admissions = corpus.admissions.size();
  table.initial_bits = initial_entropy(mode, corpus);
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    NGramRow row;
    row.rank = i + 1;
    row.prefix = ranked[i].first;
    row.cases = ranked[i].second;
    row.frequency = static_cast<double>(row.cases) / static_cast<double>(table.total_admissions);
    const auto trend = entropy_trend(model, corpus.proc_vocab, "", row.prefix, table.initial_bits);
    for (std::size_t m = 1; m < trend.steps.size(); ++m) row.entropy_after.push_back(trend.steps[m].entropy_bits);
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::vector<ClusterTrend> cluster_trends_from(std::span<const Admission> admissions,
                                              std::span<const EntropyTrend> trends,
                                              std::size_t length_filter,
                                              const std::vector<Code>& cluster_keys) {
  if (length_filter < 1) throw Error("invalid_argument", "length filter must be >= 1");
  if (admissions.size() != trends.size()) {
    throw Error("invalid_argument", "one trend per admission expected");
  }
  std::vector<std::string> keys(cluster_keys.begin(), cluster_keys.end());
  keys.erase(std::remove(keys.begin(), keys.end(), std::string(kAllCluster)), keys.end());
  keys.push_back(kAllCluster);

  std::vector<ClusterTrend> out;
  for (const auto& key : keys) {
    std::vector<const EntropyTrend*> members;
    for (std::size_t i = 0; i < admissions.size(); ++i) {
      const auto& a = admissions[i];
      if (a.procedures.size() != length_filter) continue;
      if (key != kAllCluster && (a.diagnoses.empty() || a.diagnoses.front() != key)) continue;
      if (trends[i].steps.size() != length_filter + 1) {
        throw Error("invalid_argument", "trend of admission '" + a.id + "' has the wrong length");
      }
      members.push_back(&trends[i]);
    }
    ClusterTrend ct;
    ct.cluster_key = key;
    ct.length_filter = length_filter;
    for (std::size_t m = 0; m <= length_filter; ++m) {
      ClusterStep s;
      s.step = m;
      s.count = members.size();
      if (!members.empty()) {
        // Shifted two-pass moments: identical inputs give exactly zero spread.
        const double shift = members.front()->steps[m].entropy_bits;
        double sum = 0.0;
        for (const auto* t : members) sum += t->steps[m].entropy_bits - shift;
        const double n = static_cast<double>(members.size());
        const double md = sum / n;
        double sq = 0.0;
        for (const auto* t : members) {
          const double d = t->steps[m].entropy_bits - shift - md;
          sq += d * d;
        }
        s.mean_bits = shift + md;
        s.std_bits = std::sqrt(sq / n);
      }
      ct.per_step.push_back(s);
    }
    out.push_back(std::move(ct));
  }
  return out;
}

std::vector<ClusterTrend> cluster_trends(const Seq2SeqModel& model, const Corpus& corpus,
                                         std::size_t length_filter, const std::vector<Code>& cluster_keys,
                                         InitialEntropyMode mode) {
  if (length_filter < 1) throw Error("invalid_argument", "length filter must be >= 1");
  const double init = initial_entropy(mode, corpus);
  std::vector<Admission> selected;
  std::vector<EntropyTrend> trends;
  for (const auto& a : corpus.admissions) {
    if (a.procedures.size() != length_filter) continue;
    selected.push_back(a);
    trends.push_back(entropy_trend(model, corpus.proc_vocab, a.id, a.procedures, init));
  }
  return cluster_trends_from(selected, trends, length_filter, cluster_keys);
}

// ---------------------------------------------------------------------------
// CSV

std::string ngram_table_to_csv(const NGramTable& table) {
  std::string out = "rank,codes,cases,frequency";
  for (std::size_t k = 1; k <= table.n; ++k) out += ",entropy_step_" + std::to_string(k);
  out += '\n';
  for (const auto& r : table.rows) {
    std::string codes;
    for (std::size_t i = 0; i < r.prefix.size(); ++i) {
      if (i) codes += ' ';
      codes += r.prefix[i];
    }
    out += std::to_string(r.rank) + ',' + csv_field(codes) + ',' + std::to_string(r.cases) + ',' +
           format_double(r.frequency);
    for (double e : r.entropy_after) out += ',' + format_double(e);
    out += '\n';
  }
  return out;
}

NGramTable ngram_table_from_csv(const std::string& text) {
  const auto lines = nonempty_lines(text);
  if (lines.empty()) throw Error("bad_header", "empty n-gram CSV");
  const auto header = parse_csv_line(lines.front());
  if (header.size() < 5 || header[0] != "rank" || header[1] != "codes" || header[2] != "cases" ||
      header[3] != "frequency") {
    throw Error("bad_header", "n-gram CSV header must be rank,codes,cases,frequency,entropy_step_1..N");
  }
  NGramTable table;
  table.n = header.size() - 4;
  for (std::size_t k = 1; k <= table.n; ++k) {
    if (header[3 + k] != "entropy_step_" + std::to_string(k)) {
      throw Error("bad_header", "unexpected column '" + header[3 + k] + "'");
    }
  }
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = parse_csv_line(lines[i]);
    if (f.size() != header.size()) {
      throw Error("malformed_line", "line " + std::to_string(i + 1) + ": wrong field count");
    }
    NGramRow r;
    try {
      r.rank = std::stoul(f[0]);
      r.cases = std::stoul(f[2]);
    } catch (const std::exception&) {
      throw Error("malformed_line", "line " + std::to_string(i + 1) + ": bad integer");
    }
    r.prefix = split_string(f[1], ' ');
    r.frequency = parse_double(f[3]);
    for (std::size_t k = 0; k < table.n; ++k) r.entropy_after.push_back(parse_double(f[4 + k]));
    table.rows.push_back(std::move(r));
  }
  return table;
}

std::string cluster_trends_to_csv(std::span<const ClusterTrend> clusters) {
  std::string out = "cluster,step,mean_bits,std_bits,count\n";
  for (const auto& c : clusters) {
    for (const auto& s : c.per_step) {
      out += csv_field(c.cluster_key) + ',' + std::to_string(s.step) + ',' +
             (s.mean_bits ? format_double(*s.mean_bits) : "") + ',' +
             (s.std_bits ? format_double(*s.std_bits) : "") + ',' + std::to_string(s.count) + '\n';
    }
  }
  return out;
}

std::vector<ClusterTrend> cluster_trends_from_csv(const std::string& text) {
  const auto lines = nonempty_lines(text);
  if (lines.empty() || lines.front() != "cluster,step,mean_bits,std_bits,count") {
    throw Error("bad_header", "cluster CSV header must be cluster,step,mean_bits,std_bits,count");
  }
  std::vector<ClusterTrend> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = parse_csv_line(lines[i]);
    if (f.size() != 5) throw Error("malformed_line", "line " + std::to_string(i + 1) + ": expected 5 fields");
    ClusterStep s;
    try {
      s.step = std::stoul(f[1]);
      s.count = std::stoul(f[4]);
    } catch (const std::exception&) {
      throw Error("malformed_line", "line " + std::to_string(i + 1) + ": bad integer");
    }
    if (!f[2].empty()) s.mean_bits = parse_double(f[2]);
    if (!f[3].empty()) s.std_bits = parse_double(f[3]);
    if (s.step == 0 || out.empty() || out.back().cluster_key != f[0]) {
      out.push_back({f[0], 0, {}});
    }
    out.back().per_step.push_back(s);
    out.back().length_filter = s.step;
  }
  return out;
}

std::string render_ngram_table(const NGramTable& table) {
  std::string out = "| Rank | Codes | Cases | Frequency |";
  for (std::size_t k = 1; k <= table.n; ++k) out += " Entropy after #" + std::to_string(k) + " |";
  out += "\n|---|---|---|---|";
  for (std::size_t k = 1; k <= table.n; ++k) out += "---|";
  out += '\n';
  char buf[64];
  for (const auto& r : table.rows) {
    std::string codes;
    for (std::size_t i = 0; i < r.prefix.size(); ++i) codes += (i ? " " : "") + r.prefix[i];
    if (table.n == 1) {
      std::snprintf(buf, sizeof(buf), "%.2f%%", 100.0 * r.frequency);
    } else {
      std::snprintf(buf, sizeof(buf), "%.1f‰", 1000.0 * r.frequency);
    }
    out += "| " + std::to_string(r.rank) + " | " + codes + " | " + std::to_string(r.cases) + " | " + buf + " |";
    for (double e : r.entropy_after) {
      std::snprintf(buf, sizeof(buf), " %.4f |", e);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON bundle

nlohmann::ordered_json bundle_to_json(const TrendBundle& b) {
  using oj = nlohmann::ordered_json;
  oj j;
  j["schema_version"] = kBundleSchemaVersion;
  j["trends"] = oj::array();
  for (const auto& t : b.trends) {
    oj steps = oj::array();
    for (const auto& s : t.steps) {
      oj sj;
      sj["step"] = s.step;
      sj["procedure_code"] = s.procedure ? oj(*s.procedure) : oj(nullptr);
      sj["entropy_bits"] = s.entropy_bits;
      steps.push_back(std::move(sj));
    }
    oj tj;
    tj["admission_id"] = t.admission_id;
    tj["steps"] = std::move(steps);
    j["trends"].push_back(std::move(tj));
  }
  j["ngram_tables"] = oj::array();
  for (const auto& t : b.ngram_tables) {
    oj tj;
    tj["n"] = t.n;
    tj["total_admissions"] = t.total_admissions;
    tj["initial_bits"] = t.initial_bits;
    tj["rows"] = oj::array();
    for (const auto& r : t.rows) {
      oj rj;
      rj["rank"] = r.rank;
      rj["codes"] = r.prefix;
      rj["cases"] = r.cases;
      rj["frequency"] = r.frequency;
      rj["entropy_after"] = r.entropy_after;
      tj["rows"].push_back(std::move(rj));
    }
    j["ngram_tables"].push_back(std::move(tj));
  }
  j["cluster_trends"] = oj::array();
  for (const auto& c : b.cluster_trends) {
    oj cj;
    cj["cluster"] = c.cluster_key;
    cj["length_filter"] = c.length_filter;
    cj["steps"] = oj::array();
    for (const auto& s : c.per_step) {
      oj sj;
      sj["step"] = s.step;
      sj["mean_bits"] = s.mean_bits ? oj(*s.mean_bits) : oj(nullptr);
      sj["std_bits"] = s.std_bits ? oj(*s.std_bits) : oj(nullptr);
      sj["count"] = s.count;
      cj["steps"].push_back(std::move(sj));
    }
    j["cluster_trends"].push_back(std::move(cj));
  }
  return j;
}

TrendBundle bundle_from_json(const nlohmann::json& j) {
  TrendBundle b;
  try {
    if (j.at("schema_version").get<int>() != kBundleSchemaVersion) {
      throw Error("schema_version", "unsupported bundle schema_version");
    }
    for (const auto& tj : j.at("trends")) {
      EntropyTrend t;
      t.admission_id = tj.at("admission_id").get<std::string>();
      for (const auto& sj : tj.at("steps")) {
        TrendStep s;
        s.step = sj.at("step").get<std::size_t>();
        if (!sj.at("procedure_code").is_null()) s.procedure = sj.at("procedure_code").get<std::string>();
        s.entropy_bits = sj.at("entropy_bits").get<double>();
        t.steps.push_back(std::move(s));
      }
      b.trends.push_back(std::move(t));
    }
    for (const auto& tj : j.at("ngram_tables")) {
      NGramTable t;
      t.n = tj.at("n").get<std::size_t>();
      t.total_admissions = tj.at("total_admissions").get<std::size_t>();
      t.initial_bits = tj.at("initial_bits").get<double>();
      for (const auto& rj : tj.at("rows")) {
        NGramRow r;
        r.rank = rj.at("rank").get<std::size_t>();
        r.prefix = rj.at("codes").get<std::vector<Code>>();
        r.cases = rj.at("cases").get<std::size_t>();
        r.frequency = rj.at("frequency").get<double>();
        r.entropy_after = rj.at("entropy_after").get<std::vector<double>>();
        t.rows.push_back(std::move(r));
      }
      b.ngram_tables.push_back(std::move(t));
    }
    for (const auto& cj : j.at("cluster_trends")) {
      ClusterTrend c;
      c.cluster_key = cj.at("cluster").get<std::string>();
      c.length_filter = cj.at("length_filter").get<std::size_t>();
      for (const auto& sj : cj.at("steps")) {
        ClusterStep s;
        s.step = sj.at("step").get<std::size_t>();
        if (!sj.at("mean_bits").is_null()) s.mean_bits = sj.at("mean_bits").get<double>();
        if (!sj.at("std_bits").is_null()) s.std_bits = sj.at("std_bits").get<double>();
        s.count = sj.at("count").get<std::size_t>();
        c.per_step.push_back(s);
      }
      b.cluster_trends.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed_bundle", std::string("trend bundle: ") + e.what());
  }
  return b;
}

std::vector<std::filesystem::path> export_trend_bundle(const TrendBundle& bundle,
                                                       const std::filesystem::path& path,
                                                       ExportFormat format) {
  if (format == ExportFormat::kJson) {
    write_file_atomic(path, bundle_to_json(bundle).dump(2) + "\n");
    return {path};
  }
  const std::size_t sections = (bundle.trends.empty() ? 0 : 1) + bundle.ngram_tables.size() +
                               (bundle.cluster_trends.empty() ? 0 : 1);
  auto sibling = [&](const std::string& suffix) {
    if (sections <= 1) return path;
    auto p = path;
    p.replace_filename(path.stem().string() + suffix);
    return p;
  };
  std::vector<std::filesystem::path> written;
  if (!bundle.trends.empty()) {
    written.push_back(sibling(".trends.csv"));
    write_file_atomic(written.back(), trends_to_csv(bundle.trends));
  }
  for (const auto& t : bundle.ngram_tables) {
    written.push_back(sibling(".ngram" + std::to_string(t.n) + ".csv"));
    write_file_atomic(written.back(), ngram_table_to_csv(t));
  }
  if (!bundle.cluster_trends.empty()) {
    written.push_back(sibling(".clusters.csv"));
    write_file_atomic(written.back(), cluster_trends_to_csv(bundle.cluster_trends));
  }
  return written;
}

}  // namespace medent
