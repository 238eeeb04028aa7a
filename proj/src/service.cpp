#include "medent/service.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <numeric>
#include <set>
#include <thread>

#include <httplib.h>

#include "medent/error.hpp"
#include "medent/util.hpp"

namespace medent {

namespace {

nlohmann::ordered_json envelope() {
  nlohmann::ordered_json j;
  j["schema_version"] = kServiceSchemaVersion;
  return j;
}

std::vector<Code> read_codes(const nlohmann::json& body, const char* field, bool required) {
  if (!body.contains(field)) {
    if (required) throw Error("bad_request", std::string("missing field '") + field + "'");
    return {};
  }
  const auto& arr = body.at(field);
  if (!arr.is_array()) throw Error("bad_request", std::string("'") + field + "' must be an array of codes");
  std::vector<Code> out;
  for (const auto& v : arr) {
    if (!v.is_string() || !is_valid_code(v.get<std::string>())) {
      throw Error("bad_request", std::string("'") + field + "' holds an invalid code");
    }
    out.push_back(v.get<std::string>());
  }
  return out;
}

nlohmann::json parse_body(const std::string& body) {
  if (body.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw Error("bad_request", "empty request body");
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error&) {
    throw Error("bad_request", "request body is not valid JSON");
  }
  if (!j.is_object()) throw Error("bad_request", "request body must be a JSON object");
  return j;
}

double entropy_of_prefix(const Seq2SeqModel& model, const Vocab& vocab, const std::vector<Code>& prefix) {
  return shannon_entropy(first_diagnosis_distribution(model, vocab, prefix));
}

}  // namespace

ServiceReply error_reply(int status, const std::string& code, const std::string& message) {
  ServiceReply r;
  r.status = status;
  r.body = envelope();
  r.body["error"] = {{"code", code}, {"message", message}};
  return r;
}

DiagnosisService::DiagnosisService(std::shared_ptr<const LoadedModel> model, Corpus corpus,
                                   ServiceOptions options)
    : model_(std::move(model)), corpus_(std::move(corpus)), options_(options) {
  initial_bits_ = initial_entropy(options_.initial_mode, corpus_);
  if (model_) {
    const auto& cfg = model_->model.config();
    if (cfg.proc_vocab_size != corpus_.proc_vocab.size() || cfg.diag_vocab_size != corpus_.diag_vocab.size()) {
      throw Error("vocab_mismatch", "model and corpus vocabularies differ in size");
    }
  }
}

std::vector<std::string> DiagnosisService::unknown_warnings(const std::vector<Code>& codes) const {
  std::vector<std::string> out;
  std::set<Code> seen;
  for (const auto& c : codes) {
    if (!corpus_.proc_vocab.contains(c) && seen.insert(c).second) {
      out.push_back("unknown procedure code '" + c + "' treated as <unk>");
    }
  }
  return out;
}

PredictResponse DiagnosisService::predict(const PredictRequest& request) const {
  if (!model_) throw Error("model_not_loaded", "no model loaded");
  const auto& model = model_->model;
  PredictResponse resp;
  resp.warnings = unknown_warnings(request.procedures);
  const auto trend = entropy_trend(model, corpus_.proc_vocab, "", request.procedures, initial_bits_);
  for (const auto& s : trend.steps) resp.step_entropies.push_back(s.entropy_bits);
  resp.entropy_bits = resp.step_entropies.back();
  if (request.procedures.empty() || request.top_k == 0) return resp;

  const auto dist = first_diagnosis_distribution(model, corpus_.proc_vocab, request.procedures);
  std::vector<int> order;
  for (int i = Vocab::kNumReserved; i < static_cast<int>(dist.size()); ++i) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return dist[a] > dist[b]; });
  if (order.size() > request.top_k) order.resize(request.top_k);
  for (int i : order) resp.top_k.push_back({corpus_.diag_vocab.code_at(i), dist[i]});
  return resp;
}

WhatIfResponse DiagnosisService::whatif(const WhatIfRequest& request) const {
  if (!model_) throw Error("model_not_loaded", "no model loaded");
  const auto& model = model_->model;
  WhatIfResponse resp;
  std::vector<Code> candidates;
  if (request.candidates) {
    std::set<Code> seen;
    for (const auto& c : *request.candidates) {
      if (seen.insert(c).second) candidates.push_back(c);
    }
  } else {
    // Procedure vocab order is descending corpus frequency.
    auto codes = corpus_.proc_vocab.codes();
    if (codes.size() > options_.default_candidates) codes.resize(options_.default_candidates);
    candidates = std::move(codes);
  }
  std::vector<Code> all = request.prefix;
  all.insert(all.end(), candidates.begin(), candidates.end());
  resp.warnings = unknown_warnings(all);

  resp.current_bits = request.prefix.empty() ? initial_bits_
                                             : entropy_of_prefix(model, corpus_.proc_vocab, request.prefix);
  std::vector<Code> extended = request.prefix;
  extended.emplace_back();
  for (const auto& c : candidates) {
    extended.back() = c;
    const double post = entropy_of_prefix(model, corpus_.proc_vocab, extended);
    resp.ranked.push_back({c, post, post - resp.current_bits});
  }
  std::sort(resp.ranked.begin(), resp.ranked.end(), [](const WhatIfRow& a, const WhatIfRow& b) {
    if (a.posterior_bits != b.posterior_bits) return a.posterior_bits < b.posterior_bits;
    return a.code < b.code;
  });
  return resp;
}

ServiceReply DiagnosisService::handle_health() const {
  ServiceReply r;
  r.body = envelope();
  r.body["status"] = "ok";
  r.body["model_loaded"] = model_loaded();
  return r;
}

ServiceReply DiagnosisService::handle_model_info() const {
  if (!model_) return error_reply(503, "model_not_loaded", "no model loaded");
  ServiceReply r;
  r.body = envelope();
  r.body["config"] = to_json(model_->model.config());
  r.body["proc_vocab_size"] = corpus_.proc_vocab.size();
  r.body["diag_vocab_size"] = corpus_.diag_vocab.size();
  r.body["proc_vocab_fingerprint"] = hex64(model_->info.proc_vocab_fingerprint);
  r.body["diag_vocab_fingerprint"] = hex64(model_->info.diag_vocab_fingerprint);
  r.body["checkpoint_fingerprint"] = hex64(model_->info.payload_fingerprint);
  r.body["format_version"] = model_->info.format_version;
  r.body["initial_entropy_mode"] = to_string(options_.initial_mode);
  r.body["initial_entropy_bits"] = initial_bits_;
  return r;
}

ServiceReply DiagnosisService::handle_vocab(const std::string& query, std::size_t limit) const {
  ServiceReply r;
  r.body = envelope();
  auto codes = nlohmann::ordered_json::array();
  for (const auto& c : corpus_.proc_vocab.codes()) {
    if (codes.size() >= limit) break;
    if (c.find(query) != std::string::npos) codes.push_back(c);
  }
  r.body["codes"] = std::move(codes);
  return r;
}

ServiceReply DiagnosisService::handle_predict(const std::string& body) const {
  try {
    if (!model_) return error_reply(503, "model_not_loaded", "no model loaded");
    const auto j = parse_body(body);
    PredictRequest req;
    req.procedures = read_codes(j, "procedures", true);
    if (j.contains("top_k")) {
      const auto& k = j.at("top_k");
      if (!k.is_number_integer() || k.get<long long>() < 0) {
        throw Error("bad_request", "'top_k' must be a non-negative integer");
      }
      req.top_k = k.get<std::size_t>();
    }
    const auto resp = predict(req);
    ServiceReply r;
    r.body = envelope();
    r.body["entropy_bits"] = resp.entropy_bits;
    r.body["step_entropies"] = resp.step_entropies;
    auto top = nlohmann::ordered_json::array();
    for (const auto& s : resp.top_k) top.push_back({{"code", s.code}, {"probability", s.probability}});
    r.body["top_k"] = std::move(top);
    r.body["warnings"] = resp.warnings;
    return r;
  } catch (const Error& e) {
    return error_reply(e.code() == "bad_request" ? 400 : 500, e.code(), e.what());
  }
}

ServiceReply DiagnosisService::handle_whatif(const std::string& body) const {
  try {
    if (!model_) return error_reply(503, "model_not_loaded", "no model loaded");
    const auto j = parse_body(body);
    WhatIfRequest req;
    req.prefix = read_codes(j, "prefix", false);
    if (j.contains("candidates") && !j.at("candidates").is_null()) {
      req.candidates = read_codes(j, "candidates", true);
    }
    const auto resp = whatif(req);
    ServiceReply r;
    r.body = envelope();
    r.body["current_entropy_bits"] = resp.current_bits;
    auto ranked = nlohmann::ordered_json::array();
    for (const auto& row : resp.ranked) {
      ranked.push_back({{"code", row.code}, {"posterior_entropy_bits", row.posterior_bits},
                        {"delta_bits", row.delta_bits}});
    }
    r.body["ranked"] = std::move(ranked);
    r.body["warnings"] = resp.warnings;
    return r;
  } catch (const Error& e) {
    return error_reply(e.code() == "bad_request" ? 400 : 500, e.code(), e.what());
  }
}

void register_routes(httplib::Server& server, const DiagnosisService& service,
                     const std::optional<std::filesystem::path>& ui_dir) {
  auto send = [](httplib::Response& res, const ServiceReply& reply) {
    res.status = reply.status;
    res.set_content(reply.body.dump(), "application/json");
  };
  server.Get("/health", [&service, send](const httplib::Request&, httplib::Response& res) {
    send(res, service.handle_health());
  });
  server.Get("/model/info", [&service, send](const httplib::Request&, httplib::Response& res) {
    send(res, service.handle_model_info());
  });
  server.Get("/vocab/procedures", [&service, send](const httplib::Request& req, httplib::Response& res) {
    std::size_t limit = 20;
    if (req.has_param("limit")) {
      try {
        limit = std::stoul(req.get_param_value("limit"));
      } catch (const std::exception&) {
        send(res, error_reply(400, "bad_request", "'limit' must be a non-negative integer"));
        return;
      }
    }
    send(res, service.handle_vocab(req.get_param_value("q"), limit));
  });
  server.Post("/predict", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.handle_predict(req.body));
  });
  server.Post("/whatif", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.handle_whatif(req.body));
  });
  if (ui_dir) {
    server.set_mount_point("/ui", ui_dir->string());
  }
  server.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string message = "internal error";
    try {
      if (ep) std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      message = e.what();
    } catch (...) {
    }
    send(res, error_reply(500, "internal", message));
  });
}

namespace {

std::atomic<bool> g_stop_requested{false};

extern "C" void on_stop_signal(int) { g_stop_requested.store(true); }

}  // namespace

void run_server(const DiagnosisService& service, const std::string& host, int port,
                const std::optional<std::filesystem::path>& ui_dir, const std::function<void(int)>& on_ready) {
  httplib::Server server;
  register_routes(server, service, ui_dir);
  int bound = port;
  if (port == 0) {
    bound = server.bind_to_any_port(host);
  } else if (!server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) {
    throw Error("bind_failed", "cannot bind " + host + ":" + std::to_string(port));
  }
  g_stop_requested.store(false);
  std::signal(SIGINT, on_stop_signal);
  std::signal(SIGTERM, on_stop_signal);
  std::atomic<bool> done{false};
  std::thread watcher([&] {
    while (!done.load()) {
      if (g_stop_requested.load()) {
        server.stop();
        return;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
  });
  if (on_ready) on_ready(bound);
  server.listen_after_bind();
  done.store(true);
  watcher.join();
  std::signal(SIGINT, SIG_DFL);
  std::signal(SIGTERM, SIG_DFL);
}

}  // namespace medent
