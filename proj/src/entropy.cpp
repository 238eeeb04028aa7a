#include "medent/entropy.hpp"

#include <cmath>
#include <map>

#include "medent/error.hpp"
#include "medent/util.hpp"

namespace medent {

double shannon_entropy(std::span<const double> probs) {
  if (probs.empty()) {
    throw Error("invalid_distribution", "entropy of an empty distribution");
  }
  double total = 0.0;
  // Neumaier summation; large vocabularies otherwise drift past 1e-12.
  double h = 0.0;
  double carry = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw Error("invalid_distribution", "distribution has a negative or non-finite entry");
    }
    total += p;
    if (p < kEntropyFloor) continue;
    const double term = -p * std::log2(p);
    const double t = h + term;
    carry += std::abs(h) >= std::abs(term) ? (h - t) + term : (term - t) + h;
    h = t;
  }
  h += carry;
  if (std::abs(total - 1.0) > 1e-6) {
    throw Error("invalid_distribution", "distribution sums to " + format_double(total) + ", expected 1");
  }
  // -p log p is never negative; clamp the -0.0 of a one-hot input.
  return h > 0.0 ? h : 0.0;
}

const char* to_string(InitialEntropyMode mode) {
  switch (mode) {
    case InitialEntropyMode::kUniformProcedure: return "uniform-proc";
    case InitialEntropyMode::kUniformDiagnosis: return "uniform-diag";
    case InitialEntropyMode::kEmpiricalFrequency: return "empirical";
  }
  return "?";
}

InitialEntropyMode parse_initial_entropy_mode(const std::string& text) {
  if (text == "uniform-proc") return InitialEntropyMode::kUniformProcedure;
  if (text == "uniform-diag") return InitialEntropyMode::kUniformDiagnosis;
  if (text == "empirical") return InitialEntropyMode::kEmpiricalFrequency;
  throw Error("invalid_argument",
              "unknown initial entropy mode '" + text + "' (uniform-proc|uniform-diag|empirical)");
}

double initial_entropy(InitialEntropyMode mode, const Corpus& corpus) {
  auto uniform = [](std::size_t n, const char* what) {
    if (n == 0) throw Error("empty_vocab", std::string(what) + " vocabulary has no codes");
    return std::log2(static_cast<double>(n));
  };
  switch (mode) {
    case InitialEntropyMode::kUniformProcedure:
      return uniform(corpus.proc_vocab.num_codes(), "procedure");
    case InitialEntropyMode::kUniformDiagnosis:
      return uniform(corpus.diag_vocab.num_codes(), "diagnosis");
    case InitialEntropyMode::kEmpiricalFrequency: {
      std::map<Code, double> counts;
      double n = 0.0;
      for (const auto& a : corpus.admissions) {
        if (a.procedures.empty()) continue;
        counts[a.procedures.front()] += 1.0;
        n += 1.0;
      }
      if (n == 0.0) {
        throw Error("empty_corpus", "empirical initial entropy needs at least one admission");
      }
      std::vector<double> probs;
      probs.reserve(counts.size());
      for (const auto& [code, c] : counts) probs.push_back(c / n);
      return shannon_entropy(probs);
    }
  }
  throw Error("invalid_argument", "unknown initial entropy mode");
}

std::vector<double> first_diagnosis_distribution(const Seq2SeqModel& model, const Vocab& proc_vocab,
                                                 const std::vector<Code>& procedures) {
  const auto indices = proc_vocab.encode(procedures);
  return decode_first_distribution(model, encode(model, indices));
}

EntropyTrend entropy_trend(const Seq2SeqModel& model, const Vocab& proc_vocab, const std::string& id,
                           const std::vector<Code>& procedures, double initial_bits) {
  EntropyTrend trend;
  trend.admission_id = id;
  trend.steps.push_back({0, std::nullopt, initial_bits});
  if (procedures.empty()) return trend;
  const auto indices = proc_vocab.encode(procedures);
  // One pass over the full sequence; prefix m reuses the first m states.
  const EncodeResult full = encode(model, indices);
  for (std::size_t m = 1; m <= procedures.size(); ++m) {
    const auto dist = decode_first_distribution(model, full.prefix(m));
    trend.steps.push_back({m, procedures[m - 1], shannon_entropy(dist)});
  }
  return trend;
}

EntropyTrend entropy_trend(const Seq2SeqModel& model, const Admission& admission,
                           InitialEntropyMode mode, const Corpus& corpus) {
  return entropy_trend(model, corpus.proc_vocab, admission.id, admission.procedures,
                       initial_entropy(mode, corpus));
}

std::string trends_to_csv(std::span<const EntropyTrend> trends) {
  std::string out = kTrendCsvHeader;
  out += '\n';
  for (const auto& t : trends) {
    for (const auto& s : t.steps) {
      out += csv_field(t.admission_id);
      out += ',';
      out += std::to_string(s.step);
      out += ',';
      out += csv_field(s.procedure.value_or(""));
      out += ',';
      out += format_double(s.entropy_bits);
      out += '\n';
    }
  }
  return out;
}

std::vector<EntropyTrend> trends_from_csv(const std::string& text) {
  const auto lines = nonempty_lines(text);
  if (lines.empty() || lines.front() != kTrendCsvHeader) {
    throw Error("bad_header", std::string("trend CSV must start with '") + kTrendCsvHeader + "'");
  }
  std::vector<EntropyTrend> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = parse_csv_line(lines[i]);
    if (f.size() != 4) {
      throw Error("malformed_line", "line " + std::to_string(i + 1) + ": expected 4 fields");
    }
    TrendStep s;
    try {
      s.step = std::stoul(f[1]);
    } catch (const std::exception&) {
      throw Error("malformed_line", "line " + std::to_string(i + 1) + ": bad step");
    }
    if (!f[2].empty()) s.procedure = f[2];
    s.entropy_bits = parse_double(f[3]);
    if (s.step == 0 || out.empty() || out.back().admission_id != f[0]) {
      out.push_back({f[0], {}});
    }
    out.back().steps.push_back(std::move(s));
  }
  return out;
}

}  // namespace medent
