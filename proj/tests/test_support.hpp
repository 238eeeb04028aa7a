#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "medent/seq2seq.hpp"
#include "medent/synth.hpp"

namespace test_support {

inline std::filesystem::path source_dir() { return MEDENT_SOURCE_DIR; }
inline std::filesystem::path spec_path(const std::string& name) { return source_dir() / "specs" / name; }
inline std::filesystem::path fixture_path(const std::string& name) {
  return source_dir() / "tests" / "fixtures" / name;
}

// Small model trained on a synthetic corpus; the tests share this recipe.
struct Trained {
  medent::Corpus corpus;
  medent::Seq2SeqModel model;
};

inline Trained train_on_spec(const std::string& spec_name, std::size_t n, std::size_t epochs,
                             bool prefix_augmentation = true, std::size_t hidden = 16) {
  medent::Corpus corpus = medent::synth_generate(medent::load_generator_spec(spec_path(spec_name)), n);
  medent::ModelConfig c;
  c.embed_dim = 8;
  c.hidden_dim = hidden;
  c.proc_vocab_size = corpus.proc_vocab.size();
  c.diag_vocab_size = corpus.diag_vocab.size();
  medent::Seq2SeqModel model(c);
  medent::TrainOptions opt;
  opt.epochs = epochs;
  opt.batch_size = 8;
  opt.adam.learning_rate = 0.01;
  opt.prefix_augmentation = prefix_augmentation;
  medent::train(model, corpus, opt);
  return {std::move(corpus), std::move(model)};
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("medent-test-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace test_support
