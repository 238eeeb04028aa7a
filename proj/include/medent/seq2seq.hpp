#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "medent/corpus.hpp"
#include "medent/nn.hpp"

namespace medent {

struct ModelConfig {
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t num_layers = 1;  // 1, 2 or 3
  bool attention = true;
  bool teacher_forcing = true;
  std::size_t proc_vocab_size = 0;
  std::size_t diag_vocab_size = 0;
  std::size_t max_decode_len = 20;
  std::uint64_t seed = 42;
  double init_scale = 0.08;  // weights ~ uniform(-init_scale, init_scale)
};

void validate(const ModelConfig& config);
nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Weights of one GRU layer; gates are packed [reset | update | candidate].
struct GruWeights {
  nn::Parameter w_input;   // in x 3H
  nn::Parameter w_hidden;  // H x 3H
  nn::Parameter b_input;   // 1 x 3H
  nn::Parameter b_hidden;  // 1 x 3H
};

// Stacked-GRU encoder/decoder with optional Luong dot attention.
class Seq2SeqModel {
 public:
  // Seeded uniform initialization.
  explicit Seq2SeqModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  // All parameters in declared (checkpoint) order.
  std::vector<nn::Parameter*> parameters();
  std::vector<const nn::Parameter*> parameters() const;
  nn::Parameter& parameter(const std::string& name);
  const nn::Parameter& parameter(const std::string& name) const;

  nn::Parameter proc_embedding;  // V_proc x E
  nn::Parameter diag_embedding;  // V_diag x E
  std::vector<GruWeights> encoder;
  std::vector<GruWeights> decoder;
  nn::Parameter attn_combine_w;  // 2H x H, attention only
  nn::Parameter attn_combine_b;  // 1 x H, attention only
  nn::Parameter out_w;           // H x V_diag
  nn::Parameter out_b;           // 1 x V_diag

 private:
  ModelConfig config_;
};

// Encoder states for every position and layer. Because the encoder is
// unidirectional, the result for the first m positions equals the
// encoding of the first m procedures alone (see prefix()).
struct EncodeResult {
  // layer_states[l][t] is the 1 x H state of layer l after position t.
  std::vector<std::vector<nn::Matrix>> layer_states;

  std::size_t length() const { return layer_states.empty() ? 0 : layer_states.front().size(); }
  // Top-layer state per input position.
  std::vector<nn::Matrix> hidden_states() const;
  // Final state of every layer; seeds the decoder.
  std::vector<nn::Matrix> final_states() const;
  // The context vector c: top-layer state after the last position.
  const nn::Matrix& context() const;
  EncodeResult prefix(std::size_t m) const;
};

EncodeResult encode(const Seq2SeqModel& model, std::span<const int> proc_indices);

struct AttentionResult {
  nn::Matrix context;            // weighted sum of encoder states
  std::vector<double> weights;   // one per encoder position, sums to 1
  nn::Matrix combined;           // tanh([h, context] W + b)
};

AttentionResult attend(const Seq2SeqModel& model, const nn::Matrix& decoder_hidden,
                       const EncodeResult& enc);

// s_{m,1}: softmax over the diagnosis vocabulary after one decoder step from
// SOS, seeded with the encoder's final states.
std::vector<double> decode_first_distribution(const Seq2SeqModel& model, const EncodeResult& enc);

// Argmax decoding (ties to the lowest index) until EOS or max_decode_len.
std::vector<int> greedy_decode(const Seq2SeqModel& model, std::span<const int> proc_indices);

// Index of the largest entry, lowest index on ties.
std::size_t argmax(std::span<const double> values);

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  nn::AdamHyper adam;
  // Also fit every cumulative procedure prefix of an admission against its
  // diagnoses, so the first-step distribution is trained for the partial
  // sequences it is queried on.
  bool prefix_augmentation = false;
  // Optional per-epoch hook: (epoch index, mean loss).
  std::function<void(std::size_t, double)> on_epoch;
};

struct TrainResult {
  std::vector<double> loss_history;  // mean per-admission loss per epoch
};

// Mean token cross-entropy of one admission (diagnoses followed by EOS),
// built onto `tape`. With prefix_augmentation, the mean over every
// cumulative procedure prefix.
nn::Var admission_loss(nn::Tape& tape, Seq2SeqModel& model, std::span<const int> proc_indices,
                       std::span<const int> diag_indices, bool prefix_augmentation = false);

// Trains on the corpus's train split (all admissions when no split is
// assigned). Deterministic given config.seed.
TrainResult train(Seq2SeqModel& model, const Corpus& corpus, const TrainOptions& options);

// Checkpoint file: "MEDENTCK", u64 LE header length, JSON header, then the
// parameter blocks as little-endian doubles in declared order.
inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointInfo {
  int format_version = kCheckpointFormatVersion;
  std::uint64_t proc_vocab_fingerprint = 0;
  std::uint64_t diag_vocab_fingerprint = 0;
  std::uint64_t payload_fingerprint = 0;
  // Free-form training metadata (min_count, split, hyperparameters).
  nlohmann::json extra = nlohmann::json::object();
};

struct LoadedModel {
  Seq2SeqModel model;
  CheckpointInfo info;
};

void save_checkpoint(const Seq2SeqModel& model, const Vocab& proc_vocab, const Vocab& diag_vocab,
                     const std::filesystem::path& path,
                     const nlohmann::json& extra = nlohmann::json::object());
LoadedModel load_checkpoint(const std::filesystem::path& path);
// Also verifies the vocabulary fingerprints.
LoadedModel load_checkpoint(const std::filesystem::path& path, const Vocab& proc_vocab,
                            const Vocab& diag_vocab);

}  // namespace medent
