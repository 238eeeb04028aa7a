#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "medent/corpus.hpp"
#include "medent/entropy.hpp"
#include "medent/seq2seq.hpp"

namespace httplib {
class Server;
}

namespace medent {

inline constexpr int kServiceSchemaVersion = 1;

struct PredictRequest {
  std::vector<Code> procedures;
  std::size_t top_k = 10;
};

struct ScoredCode {
  Code code;
  double probability = 0.0;
};

struct PredictResponse {
  double entropy_bits = 0.0;
  std::vector<double> step_entropies;  // step 0 = initial entropy
  std::vector<ScoredCode> top_k;       // descending probability
  std::vector<std::string> warnings;
};

struct WhatIfRequest {
  std::vector<Code> prefix;
  std::optional<std::vector<Code>> candidates;
};

struct WhatIfRow {
  Code code;
  double posterior_bits = 0.0;
  double delta_bits = 0.0;  // posterior minus the current entropy
};

struct WhatIfResponse {
  double current_bits = 0.0;
  std::vector<WhatIfRow> ranked;  // ascending posterior entropy, ties by code
  std::vector<std::string> warnings;
};

struct ServiceReply {
  int status = 200;
  nlohmann::ordered_json body;
};

struct ServiceOptions {
  InitialEntropyMode initial_mode = InitialEntropyMode::kUniformProcedure;
  std::size_t default_candidates = 20;
};

// Stateless request handlers over a frozen model. Every method is const and
// safe to call from concurrent request threads.
class DiagnosisService {
 public:
  // `model` may be null, in which case inference endpoints answer 503.
  DiagnosisService(std::shared_ptr<const LoadedModel> model, Corpus corpus, ServiceOptions options = {});

  bool model_loaded() const { return model_ != nullptr; }
  double initial_bits() const { return initial_bits_; }

  PredictResponse predict(const PredictRequest& request) const;
  WhatIfResponse whatif(const WhatIfRequest& request) const;

  ServiceReply handle_health() const;
  ServiceReply handle_model_info() const;
  ServiceReply handle_vocab(const std::string& query, std::size_t limit) const;
  ServiceReply handle_predict(const std::string& body) const;
  ServiceReply handle_whatif(const std::string& body) const;

 private:
  std::vector<std::string> unknown_warnings(const std::vector<Code>& codes) const;

  std::shared_ptr<const LoadedModel> model_;
  Corpus corpus_;
  ServiceOptions options_;
  double initial_bits_ = 0.0;
};

ServiceReply error_reply(int status, const std::string& code, const std::string& message);

// Routes: GET /health, GET /model/info, GET /vocab/procedures, POST /predict,
// POST /whatif, and static files under /ui/ when `ui_dir` is given.
void register_routes(httplib::Server& server, const DiagnosisService& service,
                     const std::optional<std::filesystem::path>& ui_dir = std::nullopt);

// Blocks until SIGINT/SIGTERM. `on_ready` receives the bound port.
void run_server(const DiagnosisService& service, const std::string& host, int port,
                const std::optional<std::filesystem::path>& ui_dir = std::nullopt,
                const std::function<void(int)>& on_ready = {});

}  // namespace medent
