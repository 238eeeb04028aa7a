#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "medent/corpus.hpp"
#include "medent/seq2seq.hpp"

namespace medent {

// Probabilities below this contribute nothing to an entropy.
inline constexpr double kEntropyFloor = 1e-12;

// Shannon entropy in bits. Rejects inputs that do not sum to 1 within 1e-6.
double shannon_entropy(std::span<const double> probs);

// Entropy assigned before any procedure has been observed.
enum class InitialEntropyMode {
  kUniformProcedure,   // log2 of the procedure vocabulary size
  kUniformDiagnosis,   // log2 of the diagnosis vocabulary size
  kEmpiricalFrequency  // entropy of the observed first-procedure frequencies
};

const char* to_string(InitialEntropyMode mode);
// Accepts "uniform-proc", "uniform-diag", "empirical".
InitialEntropyMode parse_initial_entropy_mode(const std::string& text);

double initial_entropy(InitialEntropyMode mode, const Corpus& corpus);

struct TrendStep {
  std::size_t step = 0;
  std::optional<Code> procedure;  // none at step 0
  double entropy_bits = 0.0;

  bool operator==(const TrendStep&) const = default;
};

struct EntropyTrend {
  std::string admission_id;
  std::vector<TrendStep> steps;

  bool operator==(const EntropyTrend&) const = default;
};

// Entropies of the first-diagnosis distribution for every cumulative
// prefix of `procedures`, preceded by `initial_bits` at step 0. Unknown
// codes map to UNK.
EntropyTrend entropy_trend(const Seq2SeqModel& model, const Vocab& proc_vocab, const std::string& id,
                           const std::vector<Code>& procedures, double initial_bits);

EntropyTrend entropy_trend(const Seq2SeqModel& model, const Admission& admission,
                           InitialEntropyMode mode, const Corpus& corpus);

// First-diagnosis distribution for one procedure prefix.
std::vector<double> first_diagnosis_distribution(const Seq2SeqModel& model, const Vocab& proc_vocab,
                                                 const std::vector<Code>& procedures);

// Trend export: admission_id,step,procedure_code,entropy_bits
inline constexpr const char* kTrendCsvHeader = "admission_id,step,procedure_code,entropy_bits";

std::string trends_to_csv(std::span<const EntropyTrend> trends);
std::vector<EntropyTrend> trends_from_csv(const std::string& text);

}  // namespace medent
