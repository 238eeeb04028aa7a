#include "medent/metrics.hpp"

#include <algorithm>
#include <set>

#include "medent/error.hpp"

namespace medent {

namespace {

std::set<Code> as_set(const std::vector<Code>& codes, std::size_t limit = SIZE_MAX) {
  std::set<Code> out;
  for (std::size_t i = 0; i < codes.size() && i < limit; ++i) out.insert(codes[i]);
  return out;
}

std::size_t intersection_size(const std::set<Code>& a, const std::set<Code>& b) {
  std::size_t n = 0;
  for (const auto& c : a) n += b.count(c);
  return n;
}

void require_truth(const std::vector<Code>& truth) {
  if (truth.empty()) throw Error("empty_truth", "ground-truth diagnosis list is empty");
}

}  // namespace

double f1_set(const std::vector<Code>& predicted, const std::vector<Code>& truth) {
  require_truth(truth);
  const auto p = as_set(predicted);
  const auto t = as_set(truth);
  if (p.empty()) return 0.0;
  const double inter = static_cast<double>(intersection_size(p, t));
  const double precision = inter / static_cast<double>(p.size());
  const double recall = inter / static_cast<double>(t.size());
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

double jaccard(const std::vector<Code>& predicted, const std::vector<Code>& truth) {
  require_truth(truth);
  const auto p = as_set(predicted);
  const auto t = as_set(truth);
  const std::size_t inter = intersection_size(p, t);
  const std::size_t uni = p.size() + t.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double first_n_accuracy(const std::vector<Code>& predicted, const std::vector<Code>& truth, std::size_t n) {
  require_truth(truth);
  if (n < 1) throw Error("invalid_argument", "First-N accuracy needs n >= 1");
  const auto p = as_set(predicted, n);
  const auto t = as_set(truth, n);
  const std::size_t denom = std::min(n, truth.size());
  return static_cast<double>(intersection_size(p, t)) / static_cast<double>(denom);
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["f1"] = r.f1;
  j["jaccard"] = r.jaccard;
  nlohmann::ordered_json fn;
  for (const auto& [n, v] : r.first_n) fn[std::to_string(n)] = v;
  j["first_n"] = fn;
  j["n_evaluated"] = r.n_evaluated;
  return j;
}

MetricsReport evaluate_predictions(std::span<const PredictionPair> pairs) {
  if (pairs.empty()) throw Error("empty_split", "nothing to evaluate");
  MetricsReport r;
  for (std::size_t n : {1, 2, 3}) r.first_n[n] = 0.0;
  for (const auto& p : pairs) {
    r.f1 += f1_set(p.predicted, p.truth);
    r.jaccard += jaccard(p.predicted, p.truth);
    for (auto& [n, v] : r.first_n) v += first_n_accuracy(p.predicted, p.truth, n);
  }
  const double inv = 1.0 / static_cast<double>(pairs.size());
  r.f1 *= inv;
  r.jaccard *= inv;
  for (auto& [n, v] : r.first_n) v *= inv;
  r.n_evaluated = pairs.size();
  return r;
}

MetricsReport evaluate(const Seq2SeqModel& model, const Corpus& corpus,
                       std::span<const Admission* const> admissions) {
  if (admissions.empty()) throw Error("empty_split", "split has no admissions");
  std::vector<PredictionPair> pairs;
  pairs.reserve(admissions.size());
  for (const Admission* a : admissions) {
    PredictionPair pair;
    for (int idx : greedy_decode(model, corpus.proc_vocab.encode(a->procedures))) {
      pair.predicted.push_back(corpus.diag_vocab.code_at(idx));
    }
    pair.truth = a->diagnoses;
    pairs.push_back(std::move(pair));
  }
  return evaluate_predictions(pairs);
}

MetricsReport evaluate(const Seq2SeqModel& model, const Corpus& corpus, SplitName split) {
  const auto pool = corpus.admissions_in(split);
  if (pool.empty()) {
    throw Error("empty_split", std::string("split '") + to_string(split) + "' has no admissions");
  }
  return evaluate(model, corpus, pool);
}

}  // namespace medent
