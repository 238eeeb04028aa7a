#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "medent/corpus.hpp"
#include "medent/seq2seq.hpp"

namespace medent {

// Set-based F1. Empty prediction scores 0; empty truth is an error.
double f1_set(const std::vector<Code>& predicted, const std::vector<Code>& truth);
// |P ∩ T| / |P ∪ T| on deduplicated sets.
double jaccard(const std::vector<Code>& predicted, const std::vector<Code>& truth);
// Overlap between the first n predictions and the first n truths, divided
// by min(n, |truth|).
double first_n_accuracy(const std::vector<Code>& predicted, const std::vector<Code>& truth, std::size_t n);

struct MetricsReport {
  double f1 = 0.0;
  double jaccard = 0.0;
  std::map<std::size_t, double> first_n;  // N in {1, 2, 3}
  std::size_t n_evaluated = 0;
};

nlohmann::json to_json(const MetricsReport& report);

struct PredictionPair {
  std::vector<Code> predicted;
  std::vector<Code> truth;
};

// Macro average over pairs.
MetricsReport evaluate_predictions(std::span<const PredictionPair> pairs);

// Greedy-decodes every admission of `split` and scores it.
MetricsReport evaluate(const Seq2SeqModel& model, const Corpus& corpus, SplitName split);
MetricsReport evaluate(const Seq2SeqModel& model, const Corpus& corpus,
                       std::span<const Admission* const> admissions);

}  // namespace medent
