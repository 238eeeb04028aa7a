#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace medent {

// An ICD-9 style token such as "8952". Non-empty, no whitespace,
// case-sensitive.
using Code = std::string;

bool is_valid_code(const std::string& code);

struct Admission {
  std::string id;
  std::vector<Code> procedures;  // chronological
  std::vector<Code> diagnoses;   // priority order, first = primary

  bool operator==(const Admission&) const = default;
};

// Bijective code <-> index map. Indices 0..3 are reserved.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kSos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumReserved = 4;

  Vocab();
  // `codes` are the non-reserved entries in index order.
  explicit Vocab(const std::vector<Code>& codes);

  std::size_t size() const { return index_to_code_.size(); }
  std::size_t num_codes() const { return size() - kNumReserved; }

  // Unknown codes resolve to kUnk.
  int index_of(const Code& code) const;
  bool contains(const Code& code) const;
  const std::string& code_at(int index) const;

  const std::vector<std::string>& tokens() const { return index_to_code_; }
  // Non-reserved codes in index order.
  std::vector<Code> codes() const;

  std::vector<int> encode(const std::vector<Code>& codes) const;

  // FNV-1a over the ordered token list, each token followed by '\n'.
  std::uint64_t fingerprint() const;

  bool operator==(const Vocab& other) const { return index_to_code_ == other.index_to_code_; }

 private:
  std::vector<std::string> index_to_code_;
  std::unordered_map<std::string, int> code_to_index_;
};

enum class SplitName { kTrain, kVal, kTest };

const char* to_string(SplitName s);
SplitName parse_split_name(const std::string& s);

struct LoadSummary {
  std::size_t rejected_empty = 0;    // admissions without procedures or diagnoses
  std::size_t rejected_rows = 0;     // CSV rows with a bad seq_num
  std::size_t filtered_version = 0;  // CSV rows with icd_version != 9
  std::size_t dropped_unjoined = 0;  // admissions lacking one of the two lists
};

struct Corpus {
  std::vector<Admission> admissions;
  Vocab proc_vocab;
  Vocab diag_vocab;
  std::map<std::string, SplitName> split_of;
  LoadSummary summary;

  std::vector<const Admission*> admissions_in(SplitName s) const;
  const Admission* find(const std::string& admission_id) const;
  // FNV-1a of the canonical JSONL serialization.
  std::uint64_t fingerprint() const;
};

struct VocabPair {
  Vocab proc;
  Vocab diag;
};

// Codes seen fewer than `min_count` times are left out (they resolve to
// UNK). Indices follow descending frequency, ties lexicographic.
VocabPair build_vocabs(const std::vector<Admission>& admissions, std::size_t min_count = 1);

Corpus load_jsonl(const std::filesystem::path& path, std::size_t min_count = 1);
Corpus parse_jsonl(const std::string& text, std::size_t min_count = 1);
std::string to_jsonl(const std::vector<Admission>& admissions);
void save_jsonl(const std::vector<Admission>& admissions, const std::filesystem::path& path);

// MIMIC-IV style procedures_icd / diagnoses_icd tables. Only ICD-9 rows are
// kept; codes within an admission are ordered by seq_num.
Corpus load_mimic_csv(const std::filesystem::path& procedures_path,
                      const std::filesystem::path& diagnoses_path, std::size_t min_count = 1);
Corpus parse_mimic_csv(const std::string& procedures_csv, const std::string& diagnoses_csv,
                       std::size_t min_count = 1);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

// Seeded permutation; sizes are floor(ratio * n) with the remainder added
// to train.
Corpus split(Corpus corpus, SplitRatios ratios, std::uint64_t seed);

struct CorpusStats {
  std::size_t admissions = 0;
  std::size_t distinct_procedures = 0;
  std::size_t distinct_diagnoses = 0;
  std::size_t procedure_events = 0;
  std::size_t diagnosis_events = 0;
  double mean_procedures = 0.0;
  double mean_diagnoses = 0.0;
  std::size_t max_procedures = 0;
};

CorpusStats corpus_stats(const Corpus& corpus);

}  // namespace medent
