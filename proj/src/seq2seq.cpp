#include "medent/seq2seq.hpp"

#include <bit>
#include <cmath>
#include <unordered_map>

#include "medent/error.hpp"
#include "medent/util.hpp"

namespace medent {

using nn::Matrix;
using nn::Parameter;
using nn::Tape;
using nn::Var;

void validate(const ModelConfig& c) {
  if (c.num_layers < 1 || c.num_layers > 3) {
    throw Error("invalid_config", "num_layers must be 1, 2 or 3");
  }
  if (c.embed_dim < 1 || c.hidden_dim < 1) {
    throw Error("invalid_config", "embed_dim and hidden_dim must be >= 1");
  }
  if (c.proc_vocab_size <= static_cast<std::size_t>(Vocab::kNumReserved) ||
      c.diag_vocab_size <= static_cast<std::size_t>(Vocab::kNumReserved)) {
    throw Error("invalid_config", "vocabulary sizes must exceed the reserved slots");
  }
  if (c.max_decode_len < 1) {
    throw Error("invalid_config", "max_decode_len must be >= 1");
  }
  if (!(c.init_scale > 0.0)) {
    throw Error("invalid_config", "init_scale must be positive");
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["embed_dim"] = c.embed_dim;
  j["hidden_dim"] = c.hidden_dim;
  j["num_layers"] = c.num_layers;
  j["attention"] = c.attention;
  j["teacher_forcing"] = c.teacher_forcing;
  j["proc_vocab_size"] = c.proc_vocab_size;
  j["diag_vocab_size"] = c.diag_vocab_size;
  j["max_decode_len"] = c.max_decode_len;
  j["seed"] = c.seed;
  j["init_scale"] = c.init_scale;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.attention = j.at("attention").get<bool>();
    c.teacher_forcing = j.at("teacher_forcing").get<bool>();
    c.proc_vocab_size = j.at("proc_vocab_size").get<std::size_t>();
    c.diag_vocab_size = j.at("diag_vocab_size").get<std::size_t>();
    c.max_decode_len = j.at("max_decode_len").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.init_scale = j.value("init_scale", 0.08);
  } catch (const nlohmann::json::exception& e) {
    throw Error("invalid_config", std::string("model config: ") + e.what());
  }
  validate(c);
  return c;
}

namespace {

Parameter uniform_param(std::string name, std::size_t rows, std::size_t cols, Rng& rng, double scale) {
  Matrix m(rows, cols);
  for (auto& x : m.data()) x = rng.uniform(-scale, scale);
  return Parameter(std::move(name), std::move(m));
}

GruWeights make_gru(const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng,
                    double scale) {
  return GruWeights{
      uniform_param(prefix + ".w_input", in, 3 * hidden, rng, scale),
      uniform_param(prefix + ".w_hidden", hidden, 3 * hidden, rng, scale),
      uniform_param(prefix + ".b_input", 1, 3 * hidden, rng, scale),
      uniform_param(prefix + ".b_hidden", 1, 3 * hidden, rng, scale),
  };
}

}  // namespace

Seq2SeqModel::Seq2SeqModel(const ModelConfig& config) : config_(config) {
  validate(config_);
  Rng rng(config_.seed);
  const double s = config_.init_scale;
  const auto E = config_.embed_dim;
  const auto H = config_.hidden_dim;
  proc_embedding = uniform_param("proc_embedding", config_.proc_vocab_size, E, rng, s);
  diag_embedding = uniform_param("diag_embedding", config_.diag_vocab_size, E, rng, s);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    encoder.push_back(make_gru("encoder." + std::to_string(l), l == 0 ? E : H, H, rng, s));
  }
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    decoder.push_back(make_gru("decoder." + std::to_string(l), l == 0 ? E : H, H, rng, s));
  }
  if (config_.attention) {
    attn_combine_w = uniform_param("attn_combine_w", 2 * H, H, rng, s);
    attn_combine_b = uniform_param("attn_combine_b", 1, H, rng, s);
  }
  out_w = uniform_param("out_w", H, config_.diag_vocab_size, rng, s);
  out_b = uniform_param("out_b", 1, config_.diag_vocab_size, rng, s);
}

std::vector<Parameter*> Seq2SeqModel::parameters() {
  std::vector<Parameter*> out{&proc_embedding, &diag_embedding};
  for (auto* stack : {&encoder, &decoder}) {
    for (auto& g : *stack) {
      out.insert(out.end(), {&g.w_input, &g.w_hidden, &g.b_input, &g.b_hidden});
    }
  }
  if (config_.attention) out.insert(out.end(), {&attn_combine_w, &attn_combine_b});
  out.insert(out.end(), {&out_w, &out_b});
  return out;
}

std::vector<const Parameter*> Seq2SeqModel::parameters() const {
  auto mut = const_cast<Seq2SeqModel*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

Parameter& Seq2SeqModel::parameter(const std::string& name) {
  for (Parameter* p : parameters()) {
    if (p->name == name) return *p;
  }
  throw Error("unknown_parameter", "no parameter named '" + name + "'");
}

const Parameter& Seq2SeqModel::parameter(const std::string& name) const {
  return const_cast<Seq2SeqModel*>(this)->parameter(name);
}

// ---------------------------------------------------------------------------
// Graph construction shared by training (mutable model, gradients recorded)
// and inference (const model). Leaves are cached so every parameter appears
// once per tape.

namespace {

template <class Model>
class Graph {
 public:
  Graph(Tape& tape, Model& model) : t(tape), model_(model), H_(model.config().hidden_dim) {}

  template <class P>
  Var leaf(P& p) {
    auto [it, inserted] = cache_.try_emplace(&p, Var{});
    if (inserted) it->second = t.param(p);
    return it->second;
  }

  template <class W>
  Var gru(W& w, Var x, Var h) {
    Var gx = t.add(t.matmul(x, leaf(w.w_input)), leaf(w.b_input));
    Var gh = t.add(t.matmul(h, leaf(w.w_hidden)), leaf(w.b_hidden));
    Var r = t.sigmoid(t.add(t.slice_cols(gx, 0, H_), t.slice_cols(gh, 0, H_)));
    Var z = t.sigmoid(t.add(t.slice_cols(gx, H_, H_), t.slice_cols(gh, H_, H_)));
    Var n = t.tanh(t.add(t.slice_cols(gx, 2 * H_, H_), t.mul(r, t.slice_cols(gh, 2 * H_, H_))));
    // (1 - z) * n + z * h
    return t.add(n, t.mul(z, t.sub(h, n)));
  }

  // states[l][pos]
  std::vector<std::vector<Var>> encode(std::span<const int> procs) {
    const auto L = model_.config().num_layers;
    std::vector<std::vector<Var>> states(L);
    std::vector<Var> h(L, t.constant(Matrix(1, H_)));
    for (int idx : procs) {
      Var x = t.embedding(model_.proc_embedding, idx);
      for (std::size_t l = 0; l < L; ++l) {
        h[l] = gru(model_.encoder[l], x, h[l]);
        states[l].push_back(h[l]);
        x = h[l];
      }
    }
    return states;
  }

  struct AttentionVars {
    Var weights;
    Var context;
    Var combined;
  };

  // enc_stack: T x H top-layer encoder states; enc_stack_t: its transpose.
  AttentionVars attend(Var top, Var enc_stack, Var enc_stack_t) {
    Var scores = t.matmul(top, enc_stack_t);
    Var weights = t.softmax(scores);
    Var context = t.matmul(weights, enc_stack);
    Var combined = t.tanh(t.add(t.matmul(t.concat_cols(top, context), leaf(model_.attn_combine_w)),
                                leaf(model_.attn_combine_b)));
    return {weights, context, combined};
  }

  // One decoder step; updates `hidden` in place and returns the logits.
  Var decode_step(std::vector<Var>& hidden, int token, Var enc_stack, Var enc_stack_t) {
    Var x = t.embedding(model_.diag_embedding, token);
    for (std::size_t l = 0; l < hidden.size(); ++l) {
      hidden[l] = gru(model_.decoder[l], x, hidden[l]);
      x = hidden[l];
    }
    Var out = hidden.back();
    if (model_.config().attention) out = attend(out, enc_stack, enc_stack_t).combined;
    return t.add(t.matmul(out, leaf(model_.out_w)), leaf(model_.out_b));
  }

  Tape& t;

 private:
  Model& model_;
  std::size_t H_;
  std::unordered_map<const void*, Var> cache_;
};

void check_indices(std::span<const int> indices, std::size_t vocab_size, const char* what) {
  for (int i : indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= vocab_size) {
      throw Error("index_out_of_range", std::string(what) + " index " + std::to_string(i) +
                                            " out of range for vocabulary of " +
                                            std::to_string(vocab_size));
    }
  }
}

struct EncodedConstants {
  std::vector<Var> hidden;
  Var stack;
  Var stack_t;
};

template <class Model>
EncodedConstants load_encoding(Graph<Model>& g, const EncodeResult& enc) {
  if (enc.length() == 0) {
    throw Error("empty_input", "empty encoder result");
  }
  EncodedConstants c;
  for (const auto& m : enc.final_states()) c.hidden.push_back(g.t.constant(m));
  std::vector<Var> rows;
  for (const auto& m : enc.hidden_states()) rows.push_back(g.t.constant(m));
  c.stack = g.t.stack_rows(rows);
  c.stack_t = g.t.transpose(c.stack);
  return c;
}

}  // namespace

std::vector<Matrix> EncodeResult::hidden_states() const {
  return layer_states.empty() ? std::vector<Matrix>{} : layer_states.back();
}

std::vector<Matrix> EncodeResult::final_states() const {
  std::vector<Matrix> out;
  for (const auto& layer : layer_states) out.push_back(layer.back());
  return out;
}

const Matrix& EncodeResult::context() const {
  if (length() == 0) throw Error("empty_input", "empty encoder result");
  return layer_states.back().back();
}

EncodeResult EncodeResult::prefix(std::size_t m) const {
  if (m < 1 || m > length()) {
    throw Error("invalid_argument", "prefix length " + std::to_string(m) + " outside [1, " +
                                        std::to_string(length()) + "]");
  }
  EncodeResult out;
  for (const auto& layer : layer_states) out.layer_states.emplace_back(layer.begin(), layer.begin() + m);
  return out;
}

EncodeResult encode(const Seq2SeqModel& model, std::span<const int> proc_indices) {
  if (proc_indices.empty()) {
    throw Error("empty_input", "cannot encode an empty procedure sequence");
  }
  check_indices(proc_indices, model.config().proc_vocab_size, "procedure");
  Tape tape(false);
  Graph<const Seq2SeqModel> g(tape, model);
  auto states = g.encode(proc_indices);
  EncodeResult out;
  for (const auto& layer : states) {
    auto& dst = out.layer_states.emplace_back();
    for (Var v : layer) dst.push_back(tape.value(v));
  }
  return out;
}

AttentionResult attend(const Seq2SeqModel& model, const Matrix& decoder_hidden, const EncodeResult& enc) {
  if (!model.config().attention) {
    throw Error("attention_disabled", "model was configured without attention");
  }
  const auto H = model.config().hidden_dim;
  if (decoder_hidden.rows() != 1 || decoder_hidden.cols() != H) {
    throw Error("shape_mismatch", "decoder hidden " + decoder_hidden.shape_string() +
                                      " does not match hidden_dim " + std::to_string(H));
  }
  Tape tape(false);
  Graph<const Seq2SeqModel> g(tape, model);
  auto c = load_encoding(g, enc);
  if (tape.value(c.stack).cols() != H) {
    throw Error("shape_mismatch", "encoder states do not match hidden_dim");
  }
  auto a = g.attend(tape.constant(decoder_hidden), c.stack, c.stack_t);
  const auto& w = tape.value(a.weights);
  return {tape.value(a.context), {w.data().begin(), w.data().end()}, tape.value(a.combined)};
}

std::vector<double> decode_first_distribution(const Seq2SeqModel& model, const EncodeResult& enc) {
  Tape tape(false);
  Graph<const Seq2SeqModel> g(tape, model);
  auto c = load_encoding(g, enc);
  if (c.hidden.size() != model.config().num_layers) {
    throw Error("shape_mismatch", "encoder result has " + std::to_string(c.hidden.size()) +
                                      " layers, model has " + std::to_string(model.config().num_layers));
  }
  Var logits = g.decode_step(c.hidden, Vocab::kSos, c.stack, c.stack_t);
  return nn::softmax(tape.value(logits).data());
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::vector<int> greedy_decode(const Seq2SeqModel& model, std::span<const int> proc_indices) {
  const EncodeResult enc = encode(model, proc_indices);
  Tape tape(false);
  Graph<const Seq2SeqModel> g(tape, model);
  auto c = load_encoding(g, enc);
  std::vector<int> out;
  int token = Vocab::kSos;
  for (std::size_t step = 0; step < model.config().max_decode_len; ++step) {
    Var logits = g.decode_step(c.hidden, token, c.stack, c.stack_t);
    token = static_cast<int>(argmax(tape.value(logits).data()));
    if (token == Vocab::kEos) break;
    out.push_back(token);
  }
  return out;
}

Var admission_loss(Tape& tape, Seq2SeqModel& model, std::span<const int> proc_indices,
                   std::span<const int> diag_indices, bool prefix_augmentation) {
  if (proc_indices.empty() || diag_indices.empty()) {
    throw Error("empty_input", "admission needs procedures and diagnoses");
  }
  check_indices(proc_indices, model.config().proc_vocab_size, "procedure");
  check_indices(diag_indices, model.config().diag_vocab_size, "diagnosis");
  Graph<Seq2SeqModel> g(tape, model);
  const auto states = g.encode(proc_indices);
  const std::size_t M = proc_indices.size();
  const bool tf = model.config().teacher_forcing;
  const bool attention = model.config().attention;

  std::vector<int> targets(diag_indices.begin(), diag_indices.end());
  targets.push_back(Vocab::kEos);

  std::vector<Var> prefix_losses;
  for (std::size_t m = prefix_augmentation ? 1 : M; m <= M; ++m) {
    std::vector<Var> hidden;
    for (const auto& layer : states) hidden.push_back(layer[m - 1]);
    Var stack{}, stack_t{};
    if (attention) {
      std::span<const Var> top(states.back().data(), m);
      stack = tape.stack_rows(top);
      stack_t = tape.transpose(stack);
    }
    std::vector<Var> token_losses;
    int input = Vocab::kSos;
    for (int target : targets) {
      Var logits = g.decode_step(hidden, input, stack, stack_t);
      token_losses.push_back(tape.cross_entropy(logits, static_cast<std::size_t>(target)));
      input = tf ? target : static_cast<int>(argmax(tape.value(logits).data()));
    }
    prefix_losses.push_back(tape.mean(token_losses));
  }
  return prefix_losses.size() == 1 ? prefix_losses.front() : tape.mean(prefix_losses);
}

TrainResult train(Seq2SeqModel& model, const Corpus& corpus, const TrainOptions& options) {
  nn::validate(options.adam);
  if (options.batch_size < 1) {
    throw Error("invalid_argument", "batch_size must be >= 1");
  }
  const auto& cfg = model.config();
  if (corpus.proc_vocab.size() != cfg.proc_vocab_size || corpus.diag_vocab.size() != cfg.diag_vocab_size) {
    throw Error("vocab_mismatch", "corpus vocabularies do not match the model configuration");
  }
  std::vector<const Admission*> pool;
  if (corpus.split_of.empty()) {
    for (const auto& a : corpus.admissions) pool.push_back(&a);
  } else {
    pool = corpus.admissions_in(SplitName::kTrain);
  }
  if (pool.empty()) {
    throw Error("empty_split", "train split is empty");
  }
  struct Example {
    std::vector<int> procs;
    std::vector<int> diags;
  };
  std::vector<Example> examples;
  examples.reserve(pool.size());
  for (const Admission* a : pool) {
    examples.push_back({corpus.proc_vocab.encode(a->procedures), corpus.diag_vocab.encode(a->diagnoses)});
  }

  auto params = model.parameters();
  for (auto* p : params) p->zero_grad();
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  Tape tape;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      for (std::size_t k = start; k < end; ++k) {
        const Example& ex = examples[order[k]];
        tape.clear();
        Var loss = admission_loss(tape, model, ex.procs, ex.diags, options.prefix_augmentation);
        total += tape.value(loss)[0];
        tape.backward(loss);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (auto* p : params) {
        for (auto& x : p->grad.data()) x *= inv;
      }
      nn::adam_step(params, options.adam);
    }
    const double mean_loss = total / static_cast<double>(examples.size());
    result.loss_history.push_back(mean_loss);
    if (options.on_epoch) options.on_epoch(epoch, mean_loss);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'M', 'E', 'D', 'E', 'N', 'T', 'C', 'K'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(std::string_view in) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(in[static_cast<std::size_t>(i)]);
  return v;
}

std::uint64_t parse_hex64(const nlohmann::json& j, const char* field) {
  if (!j.contains(field) || !j.at(field).is_string()) {
    throw Error("corrupt_checkpoint", std::string("checkpoint header lacks '") + field + "'");
  }
  const auto s = j.at(field).get<std::string>();
  try {
    std::size_t used = 0;
    auto v = std::stoull(s, &used, 16);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error("corrupt_checkpoint", std::string("checkpoint field '") + field + "' is not hex");
  }
}

}  // namespace

void save_checkpoint(const Seq2SeqModel& model, const Vocab& proc_vocab, const Vocab& diag_vocab,
                     const std::filesystem::path& path, const nlohmann::json& extra) {
  const auto& cfg = model.config();
  if (proc_vocab.size() != cfg.proc_vocab_size || diag_vocab.size() != cfg.diag_vocab_size) {
    throw Error("vocab_mismatch", "vocabulary sizes do not match the model configuration");
  }
  std::string payload;
  nlohmann::ordered_json params = nlohmann::ordered_json::array();
  for (const Parameter* p : model.parameters()) {
    params.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
    for (double x : p->value.data()) put_u64(payload, std::bit_cast<std::uint64_t>(x));
  }
  nlohmann::ordered_json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["config"] = to_json(cfg);
  header["proc_vocab_fingerprint"] = hex64(proc_vocab.fingerprint());
  header["diag_vocab_fingerprint"] = hex64(diag_vocab.fingerprint());
  header["payload_fnv1a"] = hex64(fnv1a(payload));
  header["parameters"] = params;
  header["extra"] = extra;
  const std::string header_text = header.dump();

  std::string file(kMagic, sizeof(kMagic));
  put_u64(file, header_text.size());
  file += header_text;
  file += payload;
  write_file_atomic(path, file);
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16 || bytes.compare(0, 8, kMagic, 8) != 0) {
    throw Error("corrupt_checkpoint", path.string() + ": not a checkpoint file");
  }
  const std::uint64_t header_len = get_u64(std::string_view(bytes).substr(8, 8));
  if (header_len > bytes.size() - 16) {
    throw Error("truncated_checkpoint", path.string() + ": truncated header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::parse_error&) {
    throw Error("corrupt_checkpoint", path.string() + ": unreadable header");
  }
  const int version = header.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw Error("format_version", "format_version mismatch: file has " + std::to_string(version) +
                                      ", expected " + std::to_string(kCheckpointFormatVersion));
  }
  if (!header.contains("config")) {
    throw Error("corrupt_checkpoint", "checkpoint header lacks 'config'");
  }
  Seq2SeqModel model(model_config_from_json(header.at("config")));
  CheckpointInfo info;
  info.proc_vocab_fingerprint = parse_hex64(header, "proc_vocab_fingerprint");
  info.diag_vocab_fingerprint = parse_hex64(header, "diag_vocab_fingerprint");
  info.payload_fingerprint = parse_hex64(header, "payload_fnv1a");
  info.extra = header.value("extra", nlohmann::json::object());

  auto params = model.parameters();
  const auto& declared = header.value("parameters", nlohmann::json::array());
  if (declared.size() != params.size()) {
    throw Error("corrupt_checkpoint", "parameter count mismatch");
  }
  std::size_t expected = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& d = declared[i];
    if (d.value("name", "") != params[i]->name || d.value("rows", 0u) != params[i]->value.rows() ||
        d.value("cols", 0u) != params[i]->value.cols()) {
      throw Error("corrupt_checkpoint", "parameter block " + std::to_string(i) + " (" + params[i]->name +
                                            ") does not match the configuration");
    }
    expected += params[i]->value.size() * 8;
  }
  const std::string_view payload = std::string_view(bytes).substr(16 + header_len);
  if (payload.size() != expected) {
    throw Error("truncated_checkpoint", path.string() + ": payload has " + std::to_string(payload.size()) +
                                           " bytes, expected " + std::to_string(expected));
  }
  if (fnv1a(payload) != info.payload_fingerprint) {
    throw Error("corrupt_checkpoint", path.string() + ": payload checksum mismatch");
  }
  std::size_t offset = 0;
  for (Parameter* p : params) {
    for (auto& x : p->value.data()) {
      x = std::bit_cast<double>(get_u64(payload.substr(offset, 8)));
      offset += 8;
    }
  }
  return {std::move(model), info};
}

LoadedModel load_checkpoint(const std::filesystem::path& path, const Vocab& proc_vocab,
                            const Vocab& diag_vocab) {
  auto loaded = load_checkpoint(path);
  if (loaded.info.proc_vocab_fingerprint != proc_vocab.fingerprint()) {
    throw Error("fingerprint_mismatch", "proc_vocab_fingerprint mismatch: checkpoint was trained on a "
                                        "different procedure vocabulary");
  }
  if (loaded.info.diag_vocab_fingerprint != diag_vocab.fingerprint()) {
    throw Error("fingerprint_mismatch", "diag_vocab_fingerprint mismatch: checkpoint was trained on a "
                                        "different diagnosis vocabulary");
  }
  return loaded;
}

}  // namespace medent
