#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "medent/corpus.hpp"

namespace medent {

// One latent condition of the synthetic world: a prior weight, a first-order
// Markov chain over procedure codes and a positional diagnosis emission.
struct Condition {
  std::string name;
  double prior = 0.0;
  std::map<Code, double> initial;
  std::map<Code, std::map<Code, double>> transitions;
  // Probability of ending the admission after emitting a given state.
  // States absent from the map use `default_stop`.
  std::map<Code, double> stop;
  double default_stop = 0.0;
  // diagnoses[k] is the distribution of the k-th diagnosis code.
  std::vector<std::map<Code, double>> diagnoses;

  double stop_probability(const Code& state) const;
};

struct GeneratorSpec {
  std::vector<Condition> conditions;
  std::uint64_t seed = 42;
  std::size_t max_procedures = 10;
};

// Throws Error("invalid_spec", ...) naming the violated invariant.
void validate(const GeneratorSpec& spec);

GeneratorSpec generator_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GeneratorSpec& spec);
GeneratorSpec load_generator_spec(const std::filesystem::path& path);

struct SynthResult {
  Corpus corpus;
  std::vector<std::size_t> condition_of;  // latent condition per admission
};

SynthResult synth_generate_labeled(const GeneratorSpec& spec, std::size_t n);
Corpus synth_generate(const GeneratorSpec& spec, std::size_t n);

// Exact posterior over the first diagnosis code given that the admission
// starts with `prefix`, by enumeration over conditions.
std::map<Code, double> oracle_first_dx_distribution(const GeneratorSpec& spec,
                                                    const std::vector<Code>& prefix);
double oracle_entropy(const GeneratorSpec& spec, const std::vector<Code>& prefix);

// Probability that a sampled admission from `condition` starts with `prefix`.
double prefix_probability(const Condition& condition, const std::vector<Code>& prefix,
                          std::size_t max_procedures);

struct WeightedSequence {
  std::vector<Code> procedures;
  double probability = 0.0;  // marginal over conditions
};

// Every complete procedure sequence with non-zero probability. Intended for
// small specs; throws if more than `limit` sequences exist.
std::vector<WeightedSequence> enumerate_sequences(const GeneratorSpec& spec,
                                                  std::size_t limit = 1'000'000);

// Every prefix of length 1..max_len with non-zero probability, sorted.
std::vector<std::vector<Code>> enumerate_prefixes(const GeneratorSpec& spec, std::size_t max_len);

}  // namespace medent
