#include "medent/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "medent/error.hpp"
#include "medent/util.hpp"

namespace medent {

namespace {

const std::vector<std::string> kReservedTokens = {"<pad>", "<sos>", "<eos>", "<unk>"};

}  // namespace

bool is_valid_code(const std::string& code) {
  if (code.empty()) return false;
  return std::none_of(code.begin(), code.end(), [](unsigned char c) { return std::isspace(c); });
}

Vocab::Vocab() : index_to_code_(kReservedTokens) {
  for (int i = 0; i < kNumReserved; ++i) code_to_index_.emplace(index_to_code_[i], i);
}

Vocab::Vocab(const std::vector<Code>& codes) : Vocab() {
  for (const auto& c : codes) {
    if (!is_valid_code(c)) {
      throw Error("invalid_code", "invalid code '" + c + "'");
    }
    auto [it, inserted] = code_to_index_.emplace(c, static_cast<int>(index_to_code_.size()));
    if (!inserted) {
      throw Error("duplicate_code", "duplicate vocab entry '" + c + "'");
    }
    index_to_code_.push_back(c);
  }
}

int Vocab::index_of(const Code& code) const {
  auto it = code_to_index_.find(code);
  return it == code_to_index_.end() ? kUnk : it->second;
}

bool Vocab::contains(const Code& code) const {
  auto it = code_to_index_.find(code);
  return it != code_to_index_.end() && it->second >= kNumReserved;
}

const std::string& Vocab::code_at(int index) const {
  if (index < 0 || static_cast<std::size_t>(index) >= index_to_code_.size()) {
    throw Error("index_out_of_range", "vocab index " + std::to_string(index) + " out of range");
  }
  return index_to_code_[index];
}

std::vector<Code> Vocab::codes() const {
  return {index_to_code_.begin() + kNumReserved, index_to_code_.end()};
}

std::vector<int> Vocab::encode(const std::vector<Code>& codes) const {
  std::vector<int> out;
  out.reserve(codes.size());
  for (const auto& c : codes) out.push_back(index_of(c));
  return out;
}

std::uint64_t Vocab::fingerprint() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& t : index_to_code_) {
    h = fnv1a(t, h);
    h = fnv1a("\n", h);
  }
  return h;
}

const char* to_string(SplitName s) {
  switch (s) {
    case SplitName::kTrain: return "train";
    case SplitName::kVal: return "val";
    case SplitName::kTest: return "test";
  }
  return "?";
}

SplitName parse_split_name(const std::string& s) {
  if (s == "train") return SplitName::kTrain;
  if (s == "val") return SplitName::kVal;
  if (s == "test") return SplitName::kTest;
  throw Error("invalid_argument", "unknown split '" + s + "'");
}

std::vector<const Admission*> Corpus::admissions_in(SplitName s) const {
  std::vector<const Admission*> out;
  for (const auto& a : admissions) {
    auto it = split_of.find(a.id);
    if (it != split_of.end() && it->second == s) out.push_back(&a);
  }
  return out;
}

const Admission* Corpus::find(const std::string& admission_id) const {
  for (const auto& a : admissions) {
    if (a.id == admission_id) return &a;
  }
  return nullptr;
}

std::uint64_t Corpus::fingerprint() const { return fnv1a(to_jsonl(admissions)); }

VocabPair build_vocabs(const std::vector<Admission>& admissions, std::size_t min_count) {
  if (admissions.empty()) {
    throw Error("empty_corpus", "cannot build vocabularies from zero admissions");
  }
  if (min_count < 1) {
    throw Error("invalid_argument", "min_count must be >= 1");
  }
  auto make = [min_count](const std::map<Code, std::size_t>& counts) {
    std::vector<std::pair<Code, std::size_t>> kept;
    for (const auto& [code, n] : counts) {
      if (n >= min_count) kept.emplace_back(code, n);
    }
    // std::map iteration is already lexicographic; stable sort keeps that
    // order among equal counts.
    std::stable_sort(kept.begin(), kept.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<Code> codes;
    codes.reserve(kept.size());
    for (auto& [code, n] : kept) codes.push_back(code);
    return Vocab(codes);
  };
  std::map<Code, std::size_t> proc_counts, diag_counts;
  for (const auto& a : admissions) {
    for (const auto& c : a.procedures) ++proc_counts[c];
    for (const auto& c : a.diagnoses) ++diag_counts[c];
  }
  return {make(proc_counts), make(diag_counts)};
}

namespace {

std::vector<Code> read_code_array(const nlohmann::json& obj, const char* field, std::size_t line) {
  const std::string where = "line " + std::to_string(line) + ": ";
  if (!obj.contains(field)) {
    throw Error("missing_field", where + "missing field '" + field + "'");
  }
  const auto& arr = obj.at(field);
  if (!arr.is_array()) {
    throw Error("malformed_line", where + "field '" + field + "' is not an array");
  }
  std::vector<Code> out;
  out.reserve(arr.size());
  for (const auto& v : arr) {
    if (!v.is_string() || !is_valid_code(v.get<std::string>())) {
      throw Error("malformed_line", where + "field '" + field + "' holds an invalid code");
    }
    out.push_back(v.get<std::string>());
  }
  return out;
}

Corpus finish_corpus(std::vector<Admission> admissions, LoadSummary summary, std::size_t min_count) {
  Corpus corpus;
  auto vocabs = build_vocabs(admissions, min_count);
  corpus.admissions = std::move(admissions);
  corpus.proc_vocab = std::move(vocabs.proc);
  corpus.diag_vocab = std::move(vocabs.diag);
  corpus.summary = summary;
  return corpus;
}

}  // namespace

Corpus parse_jsonl(const std::string& text, std::size_t min_count) {
  std::vector<Admission> admissions;
  LoadSummary summary;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error("malformed_line", "line " + std::to_string(line_no) + ": invalid JSON");
    }
    if (!obj.is_object()) {
      throw Error("malformed_line", "line " + std::to_string(line_no) + ": not an object");
    }
    if (!obj.contains("admission_id")) {
      throw Error("missing_field", "line " + std::to_string(line_no) + ": missing field 'admission_id'");
    }
    Admission a;
    const auto& id = obj.at("admission_id");
    if (id.is_string()) {
      a.id = id.get<std::string>();
    } else if (id.is_number_integer()) {
      a.id = std::to_string(id.get<long long>());
    } else {
      throw Error("malformed_line", "line " + std::to_string(line_no) + ": bad admission_id");
    }
    a.procedures = read_code_array(obj, "procedures", line_no);
    a.diagnoses = read_code_array(obj, "diagnoses", line_no);
    if (a.procedures.empty() || a.diagnoses.empty()) {
      ++summary.rejected_empty;
      continue;
    }
    admissions.push_back(std::move(a));
  }
  if (admissions.empty()) {
    throw Error("empty_corpus", "no usable admissions");
  }
  return finish_corpus(std::move(admissions), summary, min_count);
}

Corpus load_jsonl(const std::filesystem::path& path, std::size_t min_count) {
  return parse_jsonl(read_file(path), min_count);
}

std::string to_jsonl(const std::vector<Admission>& admissions) {
  std::string out;
  for (const auto& a : admissions) {
    nlohmann::ordered_json obj;
    obj["admission_id"] = a.id;
    obj["procedures"] = a.procedures;
    obj["diagnoses"] = a.diagnoses;
    out += obj.dump();
    out += '\n';
  }
  return out;
}

void save_jsonl(const std::vector<Admission>& admissions, const std::filesystem::path& path) {
  write_file_atomic(path, to_jsonl(admissions));
}

namespace {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::size_t column(const std::string& name, const std::string& table) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw Error("missing_column", table + ": missing required column '" + name + "'");
    }
    return static_cast<std::size_t>(it - header.begin());
  }
};

CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first) {
      t.header = parse_csv_line(line);
      for (auto& h : t.header) {
        // Tolerate surrounding whitespace in header names.
        auto b = h.find_first_not_of(" \t");
        auto e = h.find_last_not_of(" \t");
        h = b == std::string::npos ? "" : h.substr(b, e - b + 1);
      }
      first = false;
    } else {
      t.rows.push_back(parse_csv_line(line));
    }
  }
  return t;
}

struct OrderedCode {
  long long seq_num;
  Code code;
};

std::map<std::string, std::vector<OrderedCode>> group_icd9(const CsvTable& t, const std::string& name,
                                                           LoadSummary& summary) {
  const auto hadm = t.column("hadm_id", name);
  const auto seq = t.column("seq_num", name);
  const auto code = t.column("icd_code", name);
  const auto version = t.column("icd_version", name);
  const auto needed = std::max({hadm, seq, code, version}) + 1;
  std::map<std::string, std::vector<OrderedCode>> grouped;
  for (const auto& row : t.rows) {
    if (row.size() < needed) {
      ++summary.rejected_rows;
      continue;
    }
    if (row[version] != "9") {
      ++summary.filtered_version;
      continue;
    }
    long long s = 0;
    try {
      std::size_t used = 0;
      s = std::stoll(row[seq], &used);
      if (used != row[seq].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      ++summary.rejected_rows;
      continue;
    }
    if (!is_valid_code(row[code]) || row[hadm].empty()) {
      ++summary.rejected_rows;
      continue;
    }
    grouped[row[hadm]].push_back({s, row[code]});
  }
  for (auto& [id, codes] : grouped) {
    std::stable_sort(codes.begin(), codes.end(),
                     [](const OrderedCode& a, const OrderedCode& b) { return a.seq_num < b.seq_num; });
  }
  return grouped;
}

}  // namespace

Corpus parse_mimic_csv(const std::string& procedures_csv, const std::string& diagnoses_csv,
                       std::size_t min_count) {
  LoadSummary summary;
  auto procs = group_icd9(parse_csv(procedures_csv), "procedures", summary);
  auto diags = group_icd9(parse_csv(diagnoses_csv), "diagnoses", summary);
  std::vector<Admission> admissions;
  for (auto& [id, codes] : procs) {
    auto it = diags.find(id);
    if (it == diags.end() || it->second.empty() || codes.empty()) {
      ++summary.dropped_unjoined;
      continue;
    }
    Admission a;
    a.id = id;
    for (auto& c : codes) a.procedures.push_back(c.code);
    for (auto& c : it->second) a.diagnoses.push_back(c.code);
    admissions.push_back(std::move(a));
  }
  for (const auto& [id, codes] : diags) {
    if (!procs.count(id)) ++summary.dropped_unjoined;
  }
  if (admissions.empty()) {
    throw Error("empty_corpus", "no admission has both ICD-9 procedures and diagnoses");
  }
  return finish_corpus(std::move(admissions), summary, min_count);
}

Corpus load_mimic_csv(const std::filesystem::path& procedures_path,
                      const std::filesystem::path& diagnoses_path, std::size_t min_count) {
  return parse_mimic_csv(read_file(procedures_path), read_file(diagnoses_path), min_count);
}

Corpus split(Corpus corpus, SplitRatios ratios, std::uint64_t seed) {
  if (!(ratios.train > 0 && ratios.val >= 0 && ratios.test >= 0) ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw Error("invalid_argument", "split ratios must be non-negative, train positive, and sum to 1");
  }
  const std::size_t n = corpus.admissions.size();
  if (n < 3) {
    throw Error("too_few_admissions", "need at least 3 admissions to split, have " + std::to_string(n));
  }
  // A tiny epsilon keeps exact products such as 0.1 * 10 from flooring
  // to one less.
  auto floor_of = [n](double r) {
    return static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 1e-9));
  };
  const std::size_t n_val = floor_of(ratios.val);
  const std::size_t n_test = floor_of(ratios.test);
  const std::size_t n_train = n - n_val - n_test;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  corpus.split_of.clear();
  for (std::size_t k = 0; k < n; ++k) {
    SplitName s = k < n_train ? SplitName::kTrain
                  : k < n_train + n_val ? SplitName::kVal
                                        : SplitName::kTest;
    const auto& id = corpus.admissions[order[k]].id;
    if (!corpus.split_of.emplace(id, s).second) {
      throw Error("duplicate_admission", "admission id '" + id + "' occurs more than once");
    }
  }
  return corpus;
}

CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats s;
  s.admissions = corpus.admissions.size();
  std::map<Code, int> procs, diags;
  for (const auto& a : corpus.admissions) {
    s.procedure_events += a.procedures.size();
    s.diagnosis_events += a.diagnoses.size();
    s.max_procedures = std::max(s.max_procedures, a.procedures.size());
    for (const auto& c : a.procedures) procs[c];
    for (const auto& c : a.diagnoses) diags[c];
  }
  s.distinct_procedures = procs.size();
  s.distinct_diagnoses = diags.size();
  if (s.admissions > 0) {
    s.mean_procedures = static_cast<double>(s.procedure_events) / static_cast<double>(s.admissions);
    s.mean_diagnoses = static_cast<double>(s.diagnosis_events) / static_cast<double>(s.admissions);
  }
  return s;
}

}  // namespace medent
