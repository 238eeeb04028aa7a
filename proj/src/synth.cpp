#include "medent/synth.hpp"

#include <cmath>
#include <cstdio>
#include <set>

#include "medent/entropy.hpp"
#include "medent/error.hpp"
#include "medent/util.hpp"

namespace medent {

namespace {

constexpr double kSumTolerance = 1e-9;

void check_distribution(const std::map<Code, double>& dist, const std::string& what) {
  if (dist.empty()) {
    throw Error("invalid_spec", what + " is empty");
  }
  double total = 0.0;
  for (const auto& [code, p] : dist) {
    if (!is_valid_code(code)) {
      throw Error("invalid_spec", what + " contains invalid code '" + code + "'");
    }
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw Error("invalid_spec", what + " has a negative or non-finite probability");
    }
    total += p;
  }
  if (std::abs(total - 1.0) > kSumTolerance) {
    throw Error("invalid_spec", what + " sums to " + format_double(total) + ", expected 1");
  }
}

std::vector<double> weights_of(const std::map<Code, double>& dist) {
  std::vector<double> w;
  w.reserve(dist.size());
  for (const auto& [code, p] : dist) w.push_back(p);
  return w;
}

const Code& draw(const std::map<Code, double>& dist, Rng& rng) {
  auto w = weights_of(dist);
  auto k = rng.categorical(w);
  auto it = dist.begin();
  std::advance(it, static_cast<std::ptrdiff_t>(k));
  return it->first;
}

std::map<Code, double> read_dist(const nlohmann::json& j, const std::string& what) {
  if (!j.is_object()) {
    throw Error("invalid_spec", what + " must be an object of code -> probability");
  }
  std::map<Code, double> out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_number()) {
      throw Error("invalid_spec", what + " entry '" + it.key() + "' is not a number");
    }
    out[it.key()] = it.value().get<double>();
  }
  return out;
}

std::string admission_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%06zu", i + 1);
  return buf;
}

}  // namespace

double Condition::stop_probability(const Code& state) const {
  auto it = stop.find(state);
  return it == stop.end() ? default_stop : it->second;
}

void validate(const GeneratorSpec& spec) {
  if (spec.conditions.empty()) {
    throw Error("invalid_spec", "spec has no conditions");
  }
  if (spec.max_procedures < 1) {
    throw Error("invalid_spec", "max_procedures must be >= 1");
  }
  double prior_total = 0.0;
  for (const auto& c : spec.conditions) {
    const std::string who = "condition '" + c.name + "'";
    if (!(c.prior >= 0.0) || !std::isfinite(c.prior)) {
      throw Error("invalid_spec", who + " has a negative prior");
    }
    prior_total += c.prior;
    check_distribution(c.initial, who + " initial distribution");
    for (const auto& [state, row] : c.transitions) {
      check_distribution(row, who + " transition row '" + state + "'");
    }
    auto check_stop = [&](double p, const std::string& state) {
      if (!(p >= 0.0 && p <= 1.0)) {
        throw Error("invalid_spec", who + " stop probability for '" + state + "' outside [0,1]");
      }
    };
    check_stop(c.default_stop, "<default>");
    for (const auto& [state, p] : c.stop) check_stop(p, state);

    // Every reachable state must either stop surely or have a row.
    std::set<Code> states;
    for (const auto& [s, p] : c.initial) states.insert(s);
    for (const auto& [s, row] : c.transitions) {
      for (const auto& [t, p] : row) states.insert(t);
    }
    if (spec.max_procedures > 1) {
      for (const auto& s : states) {
        if (!c.transitions.count(s) && c.stop_probability(s) < 1.0) {
          throw Error("invalid_spec",
                      who + " state '" + s + "' has no transition row but stop probability < 1");
        }
      }
    }
    if (c.diagnoses.empty()) {
      throw Error("invalid_spec", who + " emits no diagnoses");
    }
    for (std::size_t k = 0; k < c.diagnoses.size(); ++k) {
      check_distribution(c.diagnoses[k], who + " diagnosis position " + std::to_string(k));
    }
  }
  if (std::abs(prior_total - 1.0) > kSumTolerance) {
    throw Error("invalid_spec", "condition priors sum to " + format_double(prior_total) + ", expected 1");
  }
}

GeneratorSpec generator_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("conditions") || !j.at("conditions").is_array()) {
    throw Error("invalid_spec", "spec must be an object with a 'conditions' array");
  }
  GeneratorSpec spec;
  spec.seed = j.value("seed", std::uint64_t{42});
  spec.max_procedures = j.value("max_procedures", std::size_t{10});
  std::size_t k = 0;
  for (const auto& cj : j.at("conditions")) {
    Condition c;
    c.name = cj.value("name", "c" + std::to_string(k));
    const std::string who = "condition '" + c.name + "'";
    if (!cj.contains("prior") || !cj.at("prior").is_number()) {
      throw Error("invalid_spec", who + " lacks a numeric prior");
    }
    c.prior = cj.at("prior").get<double>();
    c.initial = read_dist(cj.value("initial", nlohmann::json::object()), who + " initial");
    if (cj.contains("transitions")) {
      const auto& tj = cj.at("transitions");
      if (!tj.is_object()) throw Error("invalid_spec", who + " transitions must be an object");
      for (auto it = tj.begin(); it != tj.end(); ++it) {
        c.transitions[it.key()] = read_dist(it.value(), who + " transition row '" + it.key() + "'");
      }
    }
    c.default_stop = cj.value("default_stop", 0.0);
    if (cj.contains("stop")) {
      const auto& sj = cj.at("stop");
      if (sj.is_number()) {
        c.default_stop = sj.get<double>();
      } else {
        c.stop = read_dist(sj, who + " stop");
      }
    }
    if (!cj.contains("diagnoses") || !cj.at("diagnoses").is_array()) {
      throw Error("invalid_spec", who + " lacks a 'diagnoses' array");
    }
    for (const auto& dj : cj.at("diagnoses")) {
      c.diagnoses.push_back(read_dist(dj, who + " diagnoses"));
    }
    spec.conditions.push_back(std::move(c));
    ++k;
  }
  validate(spec);
  return spec;
}

nlohmann::json to_json(const GeneratorSpec& spec) {
  nlohmann::json j;
  j["seed"] = spec.seed;
  j["max_procedures"] = spec.max_procedures;
  j["conditions"] = nlohmann::json::array();
  for (const auto& c : spec.conditions) {
    nlohmann::json cj;
    cj["name"] = c.name;
    cj["prior"] = c.prior;
    cj["initial"] = c.initial;
    cj["transitions"] = c.transitions;
    cj["default_stop"] = c.default_stop;
    cj["stop"] = c.stop;
    cj["diagnoses"] = c.diagnoses;
    j["conditions"].push_back(std::move(cj));
  }
  return j;
}

GeneratorSpec load_generator_spec(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("invalid_spec", path.string() + ": " + e.what());
  }
  return generator_spec_from_json(j);
}

SynthResult synth_generate_labeled(const GeneratorSpec& spec, std::size_t n) {
  validate(spec);
  if (n < 1) {
    throw Error("invalid_argument", "n must be >= 1");
  }
  Rng rng(spec.seed);
  std::vector<double> priors;
  for (const auto& c : spec.conditions) priors.push_back(c.prior);

  SynthResult result;
  result.corpus.admissions.reserve(n);
  result.condition_of.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ci = rng.categorical(priors);
    const Condition& c = spec.conditions[ci];
    Admission a;
    a.id = admission_id(i);
    Code state = draw(c.initial, rng);
    while (true) {
      a.procedures.push_back(state);
      if (a.procedures.size() >= spec.max_procedures) break;
      if (rng.uniform() < c.stop_probability(state)) break;
      state = draw(c.transitions.at(state), rng);
    }
    std::set<Code> seen;
    for (const auto& position : c.diagnoses) {
      const Code& d = draw(position, rng);
      // Later positions never repeat an already emitted code.
      if (seen.insert(d).second) a.diagnoses.push_back(d);
    }
    result.corpus.admissions.push_back(std::move(a));
    result.condition_of.push_back(ci);
  }
  auto vocabs = build_vocabs(result.corpus.admissions);
  result.corpus.proc_vocab = std::move(vocabs.proc);
  result.corpus.diag_vocab = std::move(vocabs.diag);
  return result;
}

Corpus synth_generate(const GeneratorSpec& spec, std::size_t n) {
  return synth_generate_labeled(spec, n).corpus;
}

double prefix_probability(const Condition& condition, const std::vector<Code>& prefix,
                          std::size_t max_procedures) {
  if (prefix.empty()) return 1.0;
  if (prefix.size() > max_procedures) return 0.0;
  auto it = condition.initial.find(prefix[0]);
  if (it == condition.initial.end()) return 0.0;
  double p = it->second;
  for (std::size_t i = 0; i + 1 < prefix.size() && p > 0.0; ++i) {
    auto row = condition.transitions.find(prefix[i]);
    if (row == condition.transitions.end()) return 0.0;
    auto next = row->second.find(prefix[i + 1]);
    if (next == row->second.end()) return 0.0;
    p *= (1.0 - condition.stop_probability(prefix[i])) * next->second;
  }
  return p;
}

std::map<Code, double> oracle_first_dx_distribution(const GeneratorSpec& spec,
                                                    const std::vector<Code>& prefix) {
  std::map<Code, double> joint;
  double total = 0.0;
  for (const auto& c : spec.conditions) {
    const double w = c.prior * prefix_probability(c, prefix, spec.max_procedures);
    if (w <= 0.0) continue;
    for (const auto& [d, p] : c.diagnoses.front()) {
      joint[d] += w * p;
      total += w * p;
    }
  }
  if (!(total > 0.0)) {
    throw Error("impossible_prefix", "impossible prefix: probability 0 under every condition");
  }
  for (auto& [d, p] : joint) p /= total;
  return joint;
}

double oracle_entropy(const GeneratorSpec& spec, const std::vector<Code>& prefix) {
  auto dist = oracle_first_dx_distribution(spec, prefix);
  std::vector<double> probs;
  probs.reserve(dist.size());
  for (const auto& [d, p] : dist) probs.push_back(p);
  return shannon_entropy(probs);
}

std::vector<WeightedSequence> enumerate_sequences(const GeneratorSpec& spec, std::size_t limit) {
  validate(spec);
  std::map<std::vector<Code>, double> acc;
  for (const auto& c : spec.conditions) {
    if (c.prior <= 0.0) continue;
    std::vector<Code> seq;
    // Depth-first walk carrying the probability of the current prefix.
    auto walk = [&](auto&& self, double p) -> void {
      const Code& state = seq.back();
      const double stop = seq.size() >= spec.max_procedures ? 1.0 : c.stop_probability(state);
      if (stop > 0.0) {
        acc[seq] += p * stop;
        if (acc.size() > limit) {
          throw Error("too_many_sequences", "spec has more than " + std::to_string(limit) + " sequences");
        }
      }
      if (stop >= 1.0) return;
      for (const auto& [next, q] : c.transitions.at(state)) {
        if (q <= 0.0) continue;
        seq.push_back(next);
        self(self, p * (1.0 - stop) * q);
        seq.pop_back();
      }
    };
    for (const auto& [first, q] : c.initial) {
      if (q <= 0.0) continue;
      seq.assign(1, first);
      walk(walk, c.prior * q);
    }
  }
  std::vector<WeightedSequence> out;
  out.reserve(acc.size());
  for (auto& [seq, p] : acc) out.push_back({seq, p});
  return out;
}

std::vector<std::vector<Code>> enumerate_prefixes(const GeneratorSpec& spec, std::size_t max_len) {
  std::set<std::vector<Code>> found;
  const std::size_t depth = std::min(max_len, spec.max_procedures);
  for (const auto& c : spec.conditions) {
    if (c.prior <= 0.0) continue;
    std::vector<Code> seq;
    auto walk = [&](auto&& self) -> void {
      found.insert(seq);
      if (seq.size() >= depth) return;
      const Code& state = seq.back();
      if (c.stop_probability(state) >= 1.0) return;
      for (const auto& [next, q] : c.transitions.at(state)) {
        if (q <= 0.0) continue;
        seq.push_back(next);
        self(self);
        seq.pop_back();
      }
    };
    for (const auto& [first, q] : c.initial) {
      if (q <= 0.0) continue;
      seq.assign(1, first);
      walk(walk);
    }
  }
  return {found.begin(), found.end()};
}

}  // namespace medent
