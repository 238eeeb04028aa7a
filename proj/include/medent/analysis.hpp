#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "medent/corpus.hpp"
#include "medent/entropy.hpp"
#include "medent/seq2seq.hpp"

namespace medent {

struct NGramRow {
  std::size_t rank = 0;
  std::vector<Code> prefix;
  std::size_t cases = 0;
  double frequency = 0.0;  // cases / total admissions
  std::vector<double> entropy_after;  // entry m-1: entropy after m procedures

  bool operator==(const NGramRow&) const = default;
};

struct NGramTable {
  std::size_t n = 0;
  std::size_t total_admissions = 0;
  double initial_bits = 0.0;
  std::vector<NGramRow> rows;

  bool operator==(const NGramTable&) const = default;
};

// Exact counts of every distinct first-n procedure prefix among admissions
// with at least n procedures.
std::map<std::vector<Code>, std::size_t> count_prefixes(std::span<const Admission> admissions, std::size_t n);

// The `top` most frequent first-n prefixes (ties in lexicographic prefix
// order) with the model's entropy after each of their procedures.
NGramTable ngram_entropy_table(const Seq2SeqModel& model, const Corpus& corpus, std::size_t n,
                               std::size_t top, InitialEntropyMode mode);

struct ClusterStep {
  std::size_t step = 0;
  std::optional<double> mean_bits;
  std::optional<double> std_bits;  // population standard deviation
  std::size_t count = 0;

  bool operator==(const ClusterStep&) const = default;
};

struct ClusterTrend {
  std::string cluster_key;  // a primary diagnosis code or "ALL"
  std::size_t length_filter = 0;
  std::vector<ClusterStep> per_step;  // steps 0..M

  bool empty() const { return per_step.empty() || per_step.front().count == 0; }
  bool operator==(const ClusterTrend&) const = default;
};

inline constexpr const char* kAllCluster = "ALL";

// Averages trends of admissions with exactly M procedures, grouped by
// primary diagnosis, plus an ALL cluster appended last.
std::vector<ClusterTrend> cluster_trends(const Seq2SeqModel& model, const Corpus& corpus,
                                         std::size_t length_filter, const std::vector<Code>& cluster_keys,
                                         InitialEntropyMode mode);

// Same aggregation over trends already computed; `trends[i]` belongs to
// `admissions[i]`.
std::vector<ClusterTrend> cluster_trends_from(std::span<const Admission> admissions,
                                              std::span<const EntropyTrend> trends,
                                              std::size_t length_filter,
                                              const std::vector<Code>& cluster_keys);

// Machine formats. Frequencies stay raw fractions here.
std::string ngram_table_to_csv(const NGramTable& table);
NGramTable ngram_table_from_csv(const std::string& text);
std::string cluster_trends_to_csv(std::span<const ClusterTrend> clusters);
std::vector<ClusterTrend> cluster_trends_from_csv(const std::string& text);

// Human-readable table: percent for N = 1, per-mille for N >= 2.
std::string render_ngram_table(const NGramTable& table);

struct TrendBundle {
  std::vector<EntropyTrend> trends;
  std::vector<NGramTable> ngram_tables;
  std::vector<ClusterTrend> cluster_trends;

  bool operator==(const TrendBundle&) const = default;
};

inline constexpr int kBundleSchemaVersion = 1;

nlohmann::ordered_json bundle_to_json(const TrendBundle& bundle);
TrendBundle bundle_from_json(const nlohmann::json& j);

enum class ExportFormat { kCsv, kJson };

// CSV writes one file per non-empty section: the path itself when only one
// section is present, otherwise `<stem>.trends.csv`, `<stem>.ngram<N>.csv`
// and `<stem>.clusters.csv` next to it. Returns the files written.
std::vector<std::filesystem::path> export_trend_bundle(const TrendBundle& bundle,
                                                       const std::filesystem::path& path,
                                                       ExportFormat format);

}  // namespace medent
