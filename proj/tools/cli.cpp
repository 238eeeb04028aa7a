#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "medent/analysis.hpp"
#include "medent/corpus.hpp"
#include "medent/entropy.hpp"
#include "medent/error.hpp"
#include "medent/metrics.hpp"
#include "medent/seq2seq.hpp"
#include "medent/service.hpp"
#include "medent/synth.hpp"
#include "medent/util.hpp"

namespace medent::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kManifestVersion = 1;

// Resolved run configuration in a fixed key order. Files and flags may only
// set keys that exist here.
ojson default_config() {
  ojson c;
  c["seed"] = 42;
  c["layers"] = 1;
  c["attention"] = true;
  c["teacher_forcing"] = true;
  c["embed_dim"] = 32;
  c["hidden_dim"] = 64;
  c["max_decode_len"] = 20;
  c["init_scale"] = 0.08;
  c["epochs"] = 10;
  c["batch_size"] = 32;
  c["lr"] = 1e-3;
  c["beta1"] = 0.9;
  c["beta2"] = 0.999;
  c["epsilon"] = 1e-8;
  c["prefix_augmentation"] = false;
  c["min_count"] = 1;
  c["val_ratio"] = 0.1;
  c["test_ratio"] = 0.1;
  c["initial_entropy"] = "uniform-proc";
  return c;
}

bool as_flag(const ojson& v, const std::string& key) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_string() && v == "on") return true;
  if (v.is_string() && v == "off") return false;
  throw Error("invalid_config", "'" + key + "' must be on/off or a boolean");
}

template <class T>
T number(const ojson& cfg, const std::string& key) {
  const auto& v = cfg.at(key);
  if (!v.is_number()) throw Error("invalid_config", "'" + key + "' must be a number");
  if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw Error("invalid_config", "'" + key + "' must be a non-negative integer");
    }
  }
  return v.get<T>();
}

// Normalizes and type-checks a merged configuration.
void check_config(ojson& cfg) {
  for (const char* k : {"attention", "teacher_forcing", "prefix_augmentation"}) cfg[k] = as_flag(cfg.at(k), k);
  for (const char* k : {"seed", "layers", "embed_dim", "hidden_dim", "max_decode_len", "epochs", "batch_size",
                        "min_count"}) {
    number<std::uint64_t>(cfg, k);
  }
  for (const char* k : {"init_scale", "lr", "beta1", "beta2", "epsilon", "val_ratio", "test_ratio"}) {
    number<double>(cfg, k);
  }
  if (!cfg.at("initial_entropy").is_string()) throw Error("invalid_config", "'initial_entropy' must be a string");
  parse_initial_entropy_mode(cfg.at("initial_entropy").get<std::string>());
}

ModelConfig model_config(const ojson& cfg, const Corpus& corpus) {
  ModelConfig m;
  m.embed_dim = number<std::size_t>(cfg, "embed_dim");
  m.hidden_dim = number<std::size_t>(cfg, "hidden_dim");
  m.num_layers = number<std::size_t>(cfg, "layers");
  m.attention = cfg.at("attention").get<bool>();
  m.teacher_forcing = cfg.at("teacher_forcing").get<bool>();
  m.max_decode_len = number<std::size_t>(cfg, "max_decode_len");
  m.init_scale = number<double>(cfg, "init_scale");
  m.seed = number<std::uint64_t>(cfg, "seed");
  m.proc_vocab_size = corpus.proc_vocab.size();
  m.diag_vocab_size = corpus.diag_vocab.size();
  validate(m);
  return m;
}

InitialEntropyMode entropy_mode(const ojson& cfg) {
  return parse_initial_entropy_mode(cfg.at("initial_entropy").get<std::string>());
}

std::vector<Code> split_codes(const std::string& text) {
  std::vector<Code> out;
  for (auto& s : split_string(text, ',')) {
    if (!s.empty()) out.push_back(s);
  }
  return out;
}

std::string absolute(const std::string& p) { return p == "-" ? p : fs::absolute(p).lexically_normal().string(); }

// One command execution: name, arguments (positional and command options)
// and the resolved configuration. Everything a rerun needs.
struct Invocation {
  std::string command;
  ojson args = ojson::object();
  ojson config;
  std::set<std::string> explicit_keys;
};

// Collects command outputs and their fingerprints for the manifest.
class Outputs {
 public:
  explicit Outputs(std::ostream& out) : out_(out) {}

  // Writes to `path`, or to stdout when the path is "-" or empty.
  void write(const std::string& path, const std::string& content) {
    if (path.empty() || path == "-") {
      out_ << content;
      records_.push_back({"-", fnv1a(content)});
    } else {
      write_file_atomic(path, content);
      records_.push_back({path, fnv1a(content)});
    }
  }
  // Records a file some other routine already wrote.
  void record_file(const std::string& path) { records_.push_back({path, fnv1a(read_file(path))}); }

  struct Record {
    std::string path;
    std::uint64_t hash;
  };
  const std::vector<Record>& records() const { return records_; }

 private:
  std::ostream& out_;
  std::vector<Record> records_;
};

struct Context {
  const Invocation& inv;
  Outputs& outputs;
  std::ostream& log;
  std::optional<std::uint64_t> corpus_fingerprint;
};

std::string arg_string(const Invocation& inv, const char* key) {
  if (!inv.args.contains(key) || inv.args.at(key).is_null()) return "";
  return inv.args.at(key).get<std::string>();
}

// Checkpoint plus the corpus re-read with the checkpoint's vocabulary and
// split settings.
struct ModelAndCorpus {
  std::shared_ptr<LoadedModel> model;
  Corpus corpus;
};

ModelAndCorpus load_model_and_corpus(const std::string& ckpt_path, const std::string& corpus_path) {
  auto loaded = std::make_shared<LoadedModel>(load_checkpoint(ckpt_path));
  const auto& extra = loaded->info.extra;
  const std::size_t min_count = extra.value("min_count", std::size_t{1});
  Corpus corpus = load_jsonl(corpus_path, min_count);
  if (loaded->info.proc_vocab_fingerprint != corpus.proc_vocab.fingerprint()) {
    throw Error("fingerprint_mismatch", "proc_vocab_fingerprint mismatch between checkpoint and corpus");
  }
  if (loaded->info.diag_vocab_fingerprint != corpus.diag_vocab.fingerprint()) {
    throw Error("fingerprint_mismatch", "diag_vocab_fingerprint mismatch between checkpoint and corpus");
  }
  if (extra.contains("split")) {
    const auto& s = extra.at("split");
    corpus = split(std::move(corpus), {s.at("train").get<double>(), s.at("val").get<double>(), s.at("test").get<double>()},
                   s.at("seed").get<std::uint64_t>());
  }
  return {std::move(loaded), std::move(corpus)};
}

// ---------------------------------------------------------------------------
// Commands

void cmd_synth(Context& ctx) {
  auto spec = load_generator_spec(arg_string(ctx.inv, "spec"));
  if (ctx.inv.explicit_keys.count("seed")) spec.seed = ctx.inv.config.at("seed").get<std::uint64_t>();
  const auto n = ctx.inv.args.at("n").get<std::size_t>();
  const Corpus corpus = synth_generate(spec, n);
  ctx.corpus_fingerprint = corpus.fingerprint();
  ctx.outputs.write(arg_string(ctx.inv, "out"), to_jsonl(corpus.admissions));
}

void cmd_convert_mimic(Context& ctx) {
  const Corpus corpus = load_mimic_csv(arg_string(ctx.inv, "procedures"), arg_string(ctx.inv, "diagnoses"),
                                       number<std::size_t>(ctx.inv.config, "min_count"));
  ctx.corpus_fingerprint = corpus.fingerprint();
  ctx.outputs.write(arg_string(ctx.inv, "out"), to_jsonl(corpus.admissions));
  const auto& s = corpus.summary;
  ctx.log << "admissions " << corpus.admissions.size() << " filtered_version " << s.filtered_version
          << " rejected_rows " << s.rejected_rows << " dropped_unjoined " << s.dropped_unjoined << "\n";
}

void cmd_stats(Context& ctx) {
  const Corpus corpus = load_jsonl(arg_string(ctx.inv, "corpus"), number<std::size_t>(ctx.inv.config, "min_count"));
  ctx.corpus_fingerprint = corpus.fingerprint();
  const auto s = corpus_stats(corpus);
  ojson j;
  j["admissions"] = s.admissions;
  j["distinct_procedures"] = s.distinct_procedures;
  j["distinct_diagnoses"] = s.distinct_diagnoses;
  j["procedure_vocab_size"] = corpus.proc_vocab.size();
  j["diagnosis_vocab_size"] = corpus.diag_vocab.size();
  j["procedure_events"] = s.procedure_events;
  j["diagnosis_events"] = s.diagnosis_events;
  j["mean_procedures"] = s.mean_procedures;
  j["mean_diagnoses"] = s.mean_diagnoses;
  j["max_procedures"] = s.max_procedures;
  j["rejected_empty"] = corpus.summary.rejected_empty;
  ctx.outputs.write(arg_string(ctx.inv, "out"), j.dump(2) + "\n");
}

void cmd_train(Context& ctx) {
  const auto& cfg = ctx.inv.config;
  const auto min_count = number<std::size_t>(cfg, "min_count");
  const auto seed = number<std::uint64_t>(cfg, "seed");
  Corpus corpus = load_jsonl(arg_string(ctx.inv, "corpus"), min_count);
  ctx.corpus_fingerprint = corpus.fingerprint();
  const double val = number<double>(cfg, "val_ratio");
  const double test = number<double>(cfg, "test_ratio");
  const SplitRatios ratios{1.0 - val - test, val, test};
  corpus = split(std::move(corpus), ratios, seed);

  Seq2SeqModel model(model_config(cfg, corpus));
  TrainOptions opt;
  opt.epochs = number<std::size_t>(cfg, "epochs");
  opt.batch_size = number<std::size_t>(cfg, "batch_size");
  opt.adam = {number<double>(cfg, "lr"), number<double>(cfg, "beta1"), number<double>(cfg, "beta2"),
              number<double>(cfg, "epsilon")};
  opt.prefix_augmentation = cfg.at("prefix_augmentation").get<bool>();
  opt.on_epoch = [&](std::size_t epoch, double loss) {
    ctx.log << "epoch " << epoch + 1 << " loss " << format_double(loss) << "\n";
    ctx.log.flush();
  };
  train(model, corpus, opt);

  nlohmann::json extra;
  extra["min_count"] = min_count;
  extra["split"] = {{"train", ratios.train}, {"val", ratios.val}, {"test", ratios.test}, {"seed", seed}};
  extra["training"] = {{"epochs", opt.epochs},
                       {"batch_size", opt.batch_size},
                       {"lr", opt.adam.learning_rate},
                       {"beta1", opt.adam.beta1},
                       {"beta2", opt.adam.beta2},
                       {"epsilon", opt.adam.epsilon},
                       {"prefix_augmentation", opt.prefix_augmentation}};
  extra["corpus_fingerprint"] = hex64(*ctx.corpus_fingerprint);
  const auto out = arg_string(ctx.inv, "checkpoint");
  save_checkpoint(model, corpus.proc_vocab, corpus.diag_vocab, out, extra);
  ctx.outputs.record_file(out);
}

void cmd_eval(Context& ctx) {
  auto mc = load_model_and_corpus(arg_string(ctx.inv, "checkpoint"), arg_string(ctx.inv, "corpus"));
  ctx.corpus_fingerprint = mc.corpus.fingerprint();
  MetricsReport report;
  if (mc.corpus.split_of.empty()) {
    std::vector<const Admission*> all;
    for (const auto& a : mc.corpus.admissions) all.push_back(&a);
    report = evaluate(mc.model->model, mc.corpus, all);
  } else {
    report = evaluate(mc.model->model, mc.corpus, parse_split_name(arg_string(ctx.inv, "split")));
  }
  ctx.outputs.write(arg_string(ctx.inv, "out"), to_json(report).dump(2) + "\n");
}

// Writes a bundle holding a single section in the requested format.
void write_bundle(Context& ctx, const TrendBundle& bundle, const std::string& csv) {
  const auto format = arg_string(ctx.inv, "format");
  if (format == "json") {
    ctx.outputs.write(arg_string(ctx.inv, "out"), bundle_to_json(bundle).dump(2) + "\n");
  } else {
    ctx.outputs.write(arg_string(ctx.inv, "out"), csv);
  }
}

void cmd_trend(Context& ctx) {
  auto mc = load_model_and_corpus(arg_string(ctx.inv, "checkpoint"), arg_string(ctx.inv, "corpus"));
  ctx.corpus_fingerprint = mc.corpus.fingerprint();
  const auto& model = mc.model->model;
  const auto mode = entropy_mode(ctx.inv.config);
  const double init = initial_entropy(mode, mc.corpus);
  TrendBundle bundle;
  const auto& a = ctx.inv.args;
  if (a.value("all", false)) {
    for (const auto& adm : mc.corpus.admissions) {
      bundle.trends.push_back(entropy_trend(model, mc.corpus.proc_vocab, adm.id, adm.procedures, init));
    }
  }
  for (const auto& id : a.value("admission", std::vector<std::string>{})) {
    const Admission* adm = mc.corpus.find(id);
    if (!adm) throw Error("unknown_admission", "no admission '" + id + "' in the corpus");
    bundle.trends.push_back(entropy_trend(model, mc.corpus.proc_vocab, adm->id, adm->procedures, init));
  }
  if (a.contains("procedures") && !a.at("procedures").is_null()) {
    bundle.trends.push_back(
        entropy_trend(model, mc.corpus.proc_vocab, "query", split_codes(a.at("procedures").get<std::string>()), init));
  }
  write_bundle(ctx, bundle, trends_to_csv(bundle.trends));
}

void cmd_ngram(Context& ctx) {
  auto mc = load_model_and_corpus(arg_string(ctx.inv, "checkpoint"), arg_string(ctx.inv, "corpus"));
  ctx.corpus_fingerprint = mc.corpus.fingerprint();
  const auto table = ngram_entropy_table(mc.model->model, mc.corpus, ctx.inv.args.at("n").get<std::size_t>(),
                                         ctx.inv.args.at("top").get<std::size_t>(), entropy_mode(ctx.inv.config));
  if (arg_string(ctx.inv, "format") == "table") {
    ctx.outputs.write(arg_string(ctx.inv, "out"), render_ngram_table(table));
    return;
  }
  TrendBundle bundle;
  bundle.ngram_tables.push_back(table);
  write_bundle(ctx, bundle, ngram_table_to_csv(table));
}

void cmd_clusters(Context& ctx) {
  auto mc = load_model_and_corpus(arg_string(ctx.inv, "checkpoint"), arg_string(ctx.inv, "corpus"));
  ctx.corpus_fingerprint = mc.corpus.fingerprint();
  const auto m = ctx.inv.args.at("length").get<std::size_t>();
  std::vector<Code> keys;
  if (ctx.inv.args.contains("keys") && !ctx.inv.args.at("keys").is_null()) {
    keys = split_codes(ctx.inv.args.at("keys").get<std::string>());
  } else {
    // Most frequent primary diagnoses among length-M admissions.
    std::map<Code, std::size_t> counts;
    for (const auto& a : mc.corpus.admissions) {
      if (a.procedures.size() == m) ++counts[a.diagnoses.front()];
    }
    std::vector<std::pair<Code, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) { return x.second > y.second; });
    const auto top = ctx.inv.args.at("top_keys").get<std::size_t>();
    for (std::size_t i = 0; i < ranked.size() && i < top; ++i) keys.push_back(ranked[i].first);
  }
  TrendBundle bundle;
  bundle.cluster_trends = cluster_trends(mc.model->model, mc.corpus, m, keys, entropy_mode(ctx.inv.config));
  write_bundle(ctx, bundle, cluster_trends_to_csv(bundle.cluster_trends));
}

void cmd_serve(Context& ctx) {
  auto mc = load_model_and_corpus(arg_string(ctx.inv, "checkpoint"), arg_string(ctx.inv, "corpus"));
  ServiceOptions options;
  options.initial_mode = entropy_mode(ctx.inv.config);
  DiagnosisService service(mc.model, mc.corpus, options);
  const auto bind = arg_string(ctx.inv, "bind");
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw Error("invalid_argument", "--bind expects host:port");
  const std::string host = bind.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(bind.substr(colon + 1));
  } catch (const std::exception&) {
    throw Error("invalid_argument", "--bind port is not a number");
  }
  std::optional<fs::path> ui;
  if (const auto u = arg_string(ctx.inv, "ui_dir"); !u.empty()) ui = u;
  run_server(service, host, port, ui, [&](int bound) {
    ctx.log << "listening on http://" << host << ":" << bound << "\n";
    ctx.log.flush();
  });
}

using CommandFn = void (*)(Context&);

const std::map<std::string, CommandFn>& commands() {
  static const std::map<std::string, CommandFn> table{
      {"synth", cmd_synth},   {"convert-mimic", cmd_convert_mimic}, {"stats", cmd_stats},
      {"train", cmd_train},   {"eval", cmd_eval},                   {"trend", cmd_trend},
      {"ngram", cmd_ngram},   {"clusters", cmd_clusters},           {"serve", cmd_serve},
  };
  return table;
}

ojson make_manifest(const Invocation& inv, const Context& ctx) {
  ojson m;
  m["manifest_version"] = kManifestVersion;
  m["command"] = inv.command;
  m["args"] = inv.args;
  m["config"] = inv.config;
  m["seed"] = inv.config.at("seed");
  m["corpus_fingerprint"] = ctx.corpus_fingerprint ? ojson(hex64(*ctx.corpus_fingerprint)) : ojson(nullptr);
  m["outputs"] = ojson::array();
  for (const auto& r : ctx.outputs.records()) m["outputs"].push_back({{"path", r.path}, {"fnv1a", hex64(r.hash)}});
  return m;
}

// Runs an invocation. Writes a manifest next to the first file output (or
// to `manifest_path`) unless `write_manifest` is false.
std::vector<Outputs::Record> execute(const Invocation& inv, std::ostream& out, std::ostream& log,
                                     const std::string& manifest_path, bool write_manifest) {
  Outputs outputs(out);
  Context ctx{inv, outputs, log, std::nullopt};
  commands().at(inv.command)(ctx);
  if (write_manifest) {
    std::string target = manifest_path;
    if (target.empty()) {
      for (const auto& r : outputs.records()) {
        if (r.path != "-") {
          target = r.path + ".manifest.json";
          break;
        }
      }
    }
    if (!target.empty()) write_file_atomic(target, make_manifest(inv, ctx).dump(2) + "\n");
  }
  return outputs.records();
}

int cmd_rerun(const std::string& manifest_path, std::ostream& out, std::ostream& err) {
  const auto m = nlohmann::ordered_json::parse(read_file(manifest_path));
  if (m.value("manifest_version", 0) != kManifestVersion) {
    throw Error("format_version", "unsupported manifest_version");
  }
  Invocation inv;
  inv.command = m.at("command").get<std::string>();
  if (!commands().count(inv.command) || inv.command == "serve") {
    throw Error("invalid_manifest", "cannot rerun command '" + inv.command + "'");
  }
  inv.args = m.at("args");
  inv.config = m.at("config");
  check_config(inv.config);
  // Every key was resolved when the manifest was written.
  for (auto it = inv.config.begin(); it != inv.config.end(); ++it) inv.explicit_keys.insert(it.key());

  std::ostringstream captured;
  const auto records = execute(inv, captured, err, "", false);
  const auto& expected = m.at("outputs");
  if (expected.size() != records.size()) {
    throw Error("rerun_mismatch", "rerun produced a different number of outputs");
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto want = expected[i].at("fnv1a").get<std::string>();
    if (hex64(records[i].hash) != want || expected[i].at("path") != records[i].path) {
      throw Error("rerun_mismatch", "output " + records[i].path + " differs from the manifest");
    }
  }
  if (!captured.str().empty()) out << captured.str();
  for (const auto& r : records) {
    if (r.path != "-") out << "reproduced " << r.path << " " << hex64(r.hash) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Argument parsing

struct ConfigFlags {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> layers, embed_dim, hidden_dim, epochs, batch_size, min_count, max_decode_len;
  std::optional<std::string> attention, teacher_forcing, prefix_augmentation, initial_entropy;
  std::optional<double> lr, val_ratio, test_ratio;

  void add_to(CLI::App& app) {
    app.add_option("--config", config, "JSON file with configuration keys; flags override it");
    app.add_option("--seed", seed, "Random seed (default 42)");
    app.add_option("--layers", layers, "GRU layers")->check(CLI::IsMember({1, 2, 3}));
    app.add_option("--attention", attention, "Luong dot attention")->check(CLI::IsMember({"on", "off"}));
    app.add_option("--teacher-forcing", teacher_forcing, "Teacher forcing during training")
        ->check(CLI::IsMember({"on", "off"}));
    app.add_option("--embed-dim", embed_dim, "Embedding width");
    app.add_option("--hidden-dim", hidden_dim, "GRU hidden width");
    app.add_option("--epochs", epochs, "Training epochs");
    app.add_option("--batch-size", batch_size, "Admissions per Adam step");
    app.add_option("--lr", lr, "Adam learning rate");
    app.add_option("--initial-entropy", initial_entropy, "Step-0 entropy convention")
        ->check(CLI::IsMember({"uniform-proc", "uniform-diag", "empirical"}));
    app.add_option("--min-count", min_count, "Codes rarer than this map to <unk>");
    app.add_option("--max-decode-len", max_decode_len, "Greedy decoding cap");
    app.add_option("--val-ratio", val_ratio, "Validation fraction of the split");
    app.add_option("--test-ratio", test_ratio, "Test fraction of the split");
    app.add_option("--prefix-augmentation", prefix_augmentation, "Also train on every procedure prefix")
        ->check(CLI::IsMember({"on", "off"}));
  }

  ojson resolve(std::set<std::string>& explicit_keys) const {
    ojson cfg = default_config();
    if (config) {
      const auto file = nlohmann::ordered_json::parse(read_file(*config));
      if (!file.is_object()) throw Error("invalid_config", *config + ": expected a JSON object");
      for (auto it = file.begin(); it != file.end(); ++it) {
        if (!cfg.contains(it.key())) throw Error("invalid_config", *config + ": unknown key '" + it.key() + "'");
        cfg[it.key()] = it.value();
        explicit_keys.insert(it.key());
      }
    }
    auto set = [&](const char* key, const auto& flag) {
      if (flag) {
        cfg[key] = *flag;
        explicit_keys.insert(key);
      }
    };
    set("seed", seed);
    set("layers", layers);
    set("attention", attention);
    set("teacher_forcing", teacher_forcing);
    set("embed_dim", embed_dim);
    set("hidden_dim", hidden_dim);
    set("epochs", epochs);
    set("batch_size", batch_size);
    set("lr", lr);
    set("initial_entropy", initial_entropy);
    set("min_count", min_count);
    set("max_decode_len", max_decode_len);
    set("val_ratio", val_ratio);
    set("test_ratio", test_ratio);
    set("prefix_augmentation", prefix_augmentation);
    check_config(cfg);
    return cfg;
  }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Medical entropy: procedure-to-diagnosis seq2seq with entropy trends", "medent"};
  app.require_subcommand(1);
  app.fallthrough();
  ConfigFlags flags;
  flags.add_to(app);
  std::string manifest;
  app.add_option("--manifest", manifest, "Manifest path (default: next to the first output file)");

  // Positional and command options, collected per subcommand.
  std::string spec, out_path, corpus, checkpoint, split_name = "test", format = "csv", bind = "127.0.0.1:8080";
  std::string procedures_csv, diagnoses_csv, ui_dir, manifest_in;
  std::size_t n = 0, top = 10, length = 5, top_keys = 2;
  std::vector<std::string> admission;
  std::optional<std::string> procs, keys;
  bool all = false;

  auto* synth = app.add_subcommand("synth", "Sample a synthetic corpus (JSONL) from a generator spec");
  synth->add_option("spec", spec, "Generator spec JSON")->required();
  synth->add_option("n", n, "Number of admissions")->required();
  synth->add_option("out", out_path, "Output JSONL")->required();

  auto* conv = app.add_subcommand("convert-mimic", "Convert MIMIC-IV procedures/diagnoses CSVs to JSONL");
  conv->add_option("procedures", procedures_csv, "procedures_icd.csv")->required();
  conv->add_option("diagnoses", diagnoses_csv, "diagnoses_icd.csv")->required();
  conv->add_option("out", out_path, "Output JSONL")->required();

  auto* stats = app.add_subcommand("stats", "Corpus statistics as JSON");
  stats->add_option("corpus", corpus, "Corpus JSONL")->required();
  stats->add_option("--out", out_path, "Output file (default stdout)");

  auto* trn = app.add_subcommand("train", "Train a model and save a checkpoint");
  trn->add_option("corpus", corpus, "Corpus JSONL")->required();
  trn->add_option("checkpoint", checkpoint, "Checkpoint to write")->required();

  auto* ev = app.add_subcommand("eval", "F1, Jaccard and First-N accuracy as JSON");
  ev->add_option("corpus", corpus, "Corpus JSONL")->required();
  ev->add_option("checkpoint", checkpoint, "Checkpoint")->required();
  ev->add_option("--split", split_name, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--out", out_path, "Output file (default stdout)");

  auto* tr = app.add_subcommand("trend", "Entropy trends over cumulative procedure prefixes");
  tr->add_option("checkpoint", checkpoint, "Checkpoint")->required();
  tr->add_option("corpus", corpus, "Corpus JSONL")->required();
  auto* adm_opt = tr->add_option("--admission", admission, "Admission id (repeatable)");
  auto* all_opt = tr->add_flag("--all", all, "Every admission in the corpus");
  auto* procs_opt = tr->add_option("--procedures", procs, "Comma separated procedure codes");
  tr->add_option("--out", out_path, "Output file (default stdout)");
  tr->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

  auto* ng = app.add_subcommand("ngram", "Most frequent first-N procedure prefixes with entropies");
  ng->add_option("checkpoint", checkpoint, "Checkpoint")->required();
  ng->add_option("corpus", corpus, "Corpus JSONL")->required();
  ng->add_option("n", n, "Prefix length")->required();
  ng->add_option("top", top, "Rows to keep")->required();
  ng->add_option("--out", out_path, "Output file (default stdout)");
  ng->add_option("--format", format, "csv, table or json")->check(CLI::IsMember({"csv", "table", "json"}));

  auto* cl = app.add_subcommand("clusters", "Mean and spread of trends grouped by primary diagnosis");
  cl->add_option("checkpoint", checkpoint, "Checkpoint")->required();
  cl->add_option("corpus", corpus, "Corpus JSONL")->required();
  cl->add_option("length", length, "Number of procedures M")->required();
  cl->add_option("--keys", keys, "Comma separated primary diagnoses (default: most frequent)");
  cl->add_option("--top-keys", top_keys, "How many frequent diagnoses when --keys is absent");
  cl->add_option("--out", out_path, "Output file (default stdout)");
  cl->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

  auto* sv = app.add_subcommand("serve", "HTTP inference service");
  sv->add_option("checkpoint", checkpoint, "Checkpoint")->required();
  sv->add_option("corpus", corpus, "Corpus JSONL")->required();
  sv->add_option("--bind", bind, "host:port (port 0 picks a free one)");
  sv->add_option("--ui-dir", ui_dir, "Static files served under /ui/");

  auto* rr = app.add_subcommand("rerun", "Re-execute a manifest and verify its outputs");
  rr->add_option("manifest", manifest_in, "Manifest JSON")->required();

  std::vector<std::string> argv_store{"medent"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << "error: usage: " << e.what() << "\n" << sub->help();
    return 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    if (sub == rr) return cmd_rerun(manifest_in, out, err);

    Invocation inv;
    inv.command = sub->get_name();
    inv.config = flags.resolve(inv.explicit_keys);
    auto& a = inv.args;
    if (sub == synth) {
      a["spec"] = absolute(spec);
      a["n"] = n;
      a["out"] = absolute(out_path);
    } else if (sub == conv) {
      a["procedures"] = absolute(procedures_csv);
      a["diagnoses"] = absolute(diagnoses_csv);
      a["out"] = absolute(out_path);
    } else if (sub == stats) {
      a["corpus"] = absolute(corpus);
      a["out"] = out_path.empty() ? "-" : absolute(out_path);
    } else if (sub == trn) {
      a["corpus"] = absolute(corpus);
      a["checkpoint"] = absolute(checkpoint);
    } else if (sub == ev) {
      a["corpus"] = absolute(corpus);
      a["checkpoint"] = absolute(checkpoint);
      a["split"] = split_name;
      a["out"] = out_path.empty() ? "-" : absolute(out_path);
    } else if (sub == tr) {
      if (adm_opt->count() == 0 && all_opt->count() == 0 && procs_opt->count() == 0) {
        err << "error: usage: trend needs --admission, --all or --procedures\n" << tr->help();
        return 2;
      }
      a["checkpoint"] = absolute(checkpoint);
      a["corpus"] = absolute(corpus);
      a["admission"] = admission;
      a["all"] = all;
      a["procedures"] = procs ? ojson(*procs) : ojson(nullptr);
      a["out"] = out_path.empty() ? "-" : absolute(out_path);
      a["format"] = format;
    } else if (sub == ng) {
      a["checkpoint"] = absolute(checkpoint);
      a["corpus"] = absolute(corpus);
      a["n"] = n;
      a["top"] = top;
      a["out"] = out_path.empty() ? "-" : absolute(out_path);
      a["format"] = format;
    } else if (sub == cl) {
      a["checkpoint"] = absolute(checkpoint);
      a["corpus"] = absolute(corpus);
      a["length"] = length;
      a["keys"] = keys ? ojson(*keys) : ojson(nullptr);
      a["top_keys"] = top_keys;
      a["out"] = out_path.empty() ? "-" : absolute(out_path);
      a["format"] = format;
    } else if (sub == sv) {
      a["checkpoint"] = absolute(checkpoint);
      a["corpus"] = absolute(corpus);
      a["bind"] = bind;
      a["ui_dir"] = ui_dir.empty() ? "" : absolute(ui_dir);
      execute(inv, out, out, "", false);
      return 0;
    }
    // Progress lines (training loss) go to stdout only when the command's
    // data output is a file.
    const bool data_on_stdout = a.value("out", std::string("-")) == "-" && sub != trn && sub != synth && sub != conv;
    std::ostringstream sink;
    execute(inv, out, data_on_stdout ? static_cast<std::ostream&>(sink) : out, manifest.empty() ? "" : absolute(manifest),
            true);
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.code() << ": " << e.what() << "\n";
  } catch (const nlohmann::json::exception& e) {
    err << "error: invalid_json: " << e.what() << "\n";
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
  }
  return 1;
}

}  // namespace medent::cli
