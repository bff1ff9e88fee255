#include "attrgen/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_map>
#include <utility>

#include <json.hpp>

#include "attrgen/common.hpp"
#include "attrgen/jsonio.hpp"
#include "attrgen/rng.hpp"

namespace attrgen::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_json_file(const fs::path& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

json parse_json_file(const fs::path& path) {
  json j = json::parse(read_text_file(path), nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw IoError("malformed JSON in " + path.string());
  return j;
}

std::uint64_t salt_seed(const ExperimentConfig& cfg, const std::string& salt) {
  return mix_seed(cfg.seed, fnv1a64(salt));
}

json stage_to_json(const train::StageSpec& s) {
  return json{{"stage", train::stage_name(s.stage)},
              {"max_epochs", s.max_epochs},
              {"patience", s.patience},
              {"min_delta", s.min_delta},
              {"batch_size", s.batch_size},
              {"optimizer",
               json{{"lr", s.optimizer.lr},
                    {"beta1", s.optimizer.beta1},
                    {"beta2", s.optimizer.beta2},
                    {"eps", s.optimizer.eps},
                    {"clip_norm", s.optimizer.clip_norm}}}};
}

train::StageSpec stage_from_json(const json& j, train::Stage fallback) {
  train::StageSpec s;
  s.stage = fallback;
  if (j.contains("stage")) {
    const auto name = j.at("stage").get<std::string>();
    if (name == train::stage_name(train::Stage::MixedWeakStrong)) {
      s.stage = train::Stage::MixedWeakStrong;
    } else if (name == train::stage_name(train::Stage::StrongOnly)) {
      s.stage = train::Stage::StrongOnly;
    } else {
      throw ValidationError("unknown training stage: " + name);
    }
  }
  s.max_epochs = j.value("max_epochs", s.max_epochs);
  s.patience = j.value("patience", s.patience);
  s.min_delta = j.value("min_delta", s.min_delta);
  s.batch_size = j.value("batch_size", s.batch_size);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    s.optimizer.lr = o.value("lr", s.optimizer.lr);
    s.optimizer.beta1 = o.value("beta1", s.optimizer.beta1);
    s.optimizer.beta2 = o.value("beta2", s.optimizer.beta2);
    s.optimizer.eps = o.value("eps", s.optimizer.eps);
    s.optimizer.clip_norm = o.value("clip_norm", s.optimizer.clip_norm);
  }
  return s;
}

std::unordered_map<std::string, const Product*> product_index(
    const std::vector<Product>& products) {
  std::unordered_map<std::string, const Product*> index;
  index.reserve(products.size());
  for (const auto& p : products) index[p.id] = &p;
  return index;
}

std::string record_key(const std::string& product_id, const PacScope& pac) {
  return product_id + "\x1f" + pac.key();
}

// The two negative atoms as target tokens; used to carve the ablated arm's
// training pools.
bool has_negative_target(const train::LabeledExample& ex) {
  for (int id : ex.target_tokens) {
    if (id == textproc::kNa || id == textproc::kNo) return true;
  }
  return false;
}

std::vector<train::LabeledExample> drop_negative_targets(
    const std::vector<train::LabeledExample>& examples) {
  std::vector<train::LabeledExample> kept;
  kept.reserve(examples.size());
  for (const auto& ex : examples) {
    if (!has_negative_target(ex)) kept.push_back(ex);
  }
  return kept;
}

bool contains_word(const std::string& text, const std::string& word) {
  std::istringstream iss(text);
  std::string tok;
  while (iss >> tok) {
    if (tok == word) return true;
  }
  return false;
}

// Everything a driver needs once cmd_synth has materialized a data directory.
struct LoadedData {
  catalog::WorldSpec spec;
  catalog::World world;
  catalog::Dataset dataset;
  DataSplits splits;
  textproc::Vocabulary vocab;
};

LoadedData load_run_data(const ExperimentConfig& cfg, const fs::path& data_dir) {
  for (const char* name : {"world.json", "products.jsonl", "labels.jsonl"}) {
    verify_artifact(data_dir, name);
  }
  LoadedData data;
  data.spec = catalog::WorldSpec::from_json(read_text_file(data_dir / "world.json"));
  data.world = catalog::generate_world(data.spec);
  data.dataset.products = catalog::read_products_jsonl((data_dir / "products.jsonl").string());
  data.dataset.labels = catalog::read_labels_jsonl((data_dir / "labels.jsonl").string());
  data.splits = split_dataset(data.dataset, cfg.seed, cfg.train_frac, cfg.eval_frac);
  data.vocab = build_vocab(data.spec, data.splits.train.products);
  return data;
}

model::ModelConfig resolve_model_config(const ExperimentConfig& cfg,
                                        const catalog::WorldSpec& spec,
                                        const textproc::Vocabulary& vocab) {
  auto mc = cfg.model;
  mc.vocab_size = vocab.size();
  if (mc.use_embedding_channel) mc.embedding_dim = spec.embedding_dim;
  mc.validate();
  return mc;
}

// Checkpoint selection needs labeled eval-split records: audited ones when
// any exist, catalog ones otherwise (a weak-only pool still needs a yardstick).
std::vector<train::LabeledExample> make_eval_set(const catalog::Dataset& eval_split,
                                                 const textproc::Vocabulary& vocab,
                                                 const model::ModelConfig& mc) {
  auto strong = make_examples(eval_split, vocab, mc, LabelSource::Strong);
  if (!strong.empty()) return strong;
  auto weak = make_examples(eval_split, vocab, mc, LabelSource::Weak);
  if (weak.empty()) throw ValidationError("eval split carries no labeled records");
  return weak;
}

struct TrainedArm {
  model::Parameters params;  // best checkpoint of the last stage run
  TrainSummary summary;
  train::TrainLog stage1_log, stage2_log;
  bool ran_stage2 = false;
};

// Stage 1 on weak ∪ strong, then (when configured and possible) stage 2 on
// the strong pool alone. Seeds derive from (config seed, salt) so arms of one
// experiment share nothing but the data they are given.
TrainedArm train_arm(const ExperimentConfig& cfg, const model::ModelConfig& mc,
                     const std::vector<train::LabeledExample>& weak,
                     const std::vector<train::LabeledExample>& strong,
                     const std::vector<train::LabeledExample>& eval_set, const std::string& salt,
                     const model::Parameters* start = nullptr) {
  const model::Parameters init =
      start ? *start : model::init_params(mc, salt_seed(cfg, salt + "/init"));
  auto s1 = train::run_stage1(mc, init, weak, strong, eval_set, cfg.stage1,
                              salt_seed(cfg, salt + "/stage1"));
  TrainedArm arm;
  arm.stage1_log = std::move(s1.log);
  arm.summary.stage1_best_accuracy = s1.best_accuracy;
  arm.summary.audit = std::move(s1.audit);
  if (cfg.two_stage && !strong.empty()) {
    auto s2 = train::run_stage2(mc, s1, strong, eval_set, cfg.stage2,
                                salt_seed(cfg, salt + "/stage2"));
    arm.params = std::move(s2.params);
    arm.stage2_log = std::move(s2.log);
    arm.summary.stage2_best_accuracy = s2.best_accuracy;
    arm.summary.audit.weak_examples += s2.audit.weak_examples;
    arm.summary.audit.strong_examples += s2.audit.strong_examples;
    arm.summary.audit.ids_seen.insert(s2.audit.ids_seen.begin(), s2.audit.ids_seen.end());
    arm.ran_stage2 = true;
  } else {
    arm.params = std::move(s1.params);
  }
  return arm;
}

json summary_to_json(const TrainSummary& s) {
  json j{{"stage1_best_accuracy", s.stage1_best_accuracy},
         {"weak_examples", s.audit.weak_examples},
         {"strong_examples", s.audit.strong_examples},
         {"distinct_products", s.audit.ids_seen.size()}};
  j["stage2_best_accuracy"] =
      s.stage2_best_accuracy ? json(*s.stage2_best_accuracy) : json(nullptr);
  return j;
}

double final_eval_accuracy(const TrainSummary& s) {
  return s.stage2_best_accuracy.value_or(s.stage1_best_accuracy);
}

std::vector<evalkit::EvalRecord> values_gold_only(const std::vector<evalkit::EvalRecord>& records) {
  std::vector<evalkit::EvalRecord> out;
  for (const auto& r : records) {
    if (r.gold.kind == ValueKind::Values) out.push_back(r);
  }
  return out;
}

evalkit::AggregateReport aggregate_records(const std::vector<evalkit::EvalRecord>& records,
                                           const ExperimentConfig& cfg) {
  return evalkit::aggregate(evalkit::evaluate(records, cfg.precision_target, cfg.min_support));
}

SubsetEval eval_subset(const std::vector<evalkit::EvalRecord>& records,
                       const ExperimentConfig& cfg) {
  const auto agg = aggregate_records(records, cfg);
  return SubsetEval{agg.n_pacs, agg.n_accepted, agg.ar_at_p, agg.recall_at_p};
}

json subset_to_json(const SubsetEval& s) {
  json j{{"n_pacs", s.n_pacs}, {"n_accepted", s.n_accepted}, {"ar_at_p", s.ar}};
  j["recall_at_p"] = s.recall ? json(*s.recall) : json(nullptr);
  return j;
}

// Per-PAC majority-gold guess: the strongest label-free-at-train-time
// reference for a slice the model never saw audited labels for.
double majority_gold_accuracy(const std::vector<evalkit::EvalRecord>& records) {
  std::map<std::string, std::map<std::string, int>> counts;  // pac -> display -> n
  for (const auto& r : records) counts[r.pac.key()][r.gold.to_display()] += 1;
  long long hits = 0, total = 0;
  for (const auto& [pac, modes] : counts) {
    int best = 0;
    for (const auto& [display, n] : modes) {
      best = std::max(best, n);
      total += n;
    }
    hits += best;
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

// Manifest entry helper: digest a file just written into dir.
void record_output(Manifest& m, const fs::path& dir, const std::string& name) {
  m.outputs[name] = digest_file(dir / name);
}

Manifest base_manifest(const ExperimentConfig& cfg, const std::string& command) {
  Manifest m;
  m.command = command;
  m.seed = cfg.seed;
  m.config_digest = cfg.digest();
  return m;
}

}  // namespace

// --- Experiment kinds ----------------------------------------------------------

const char* experiment_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::Main: return "main";
    case ExperimentKind::NegativeAblation: return "ablate-negative";
    case ExperimentKind::ZeroShot: return "zero-shot";
    case ExperimentKind::Applicability: return "applicability";
    case ExperimentKind::Multimodal: return "multimodal";
    case ExperimentKind::ArchSweep: return "arch-sweep";
  }
  return "main";
}

ExperimentKind experiment_from_name(const std::string& name) {
  for (ExperimentKind k :
       {ExperimentKind::Main, ExperimentKind::NegativeAblation, ExperimentKind::ZeroShot,
        ExperimentKind::Applicability, ExperimentKind::Multimodal, ExperimentKind::ArchSweep}) {
    if (name == experiment_name(k)) return k;
  }
  throw ValidationError("unknown experiment kind: " + name);
}

// --- ExperimentConfig ------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (world_spec_path.empty()) throw ValidationError("world_spec path must be set");
  if (!fs::exists(world_spec_path)) {
    throw ValidationError("world_spec file does not exist: " + world_spec_path.string());
  }
  if (output_dir.empty()) throw ValidationError("output_dir must be set");
  if (n_products < 1) throw ValidationError("n_products must be >= 1");
  if (!(strong_fraction >= 0.0 && strong_fraction <= 1.0)) {
    throw ValidationError("strong_fraction must be in [0, 1]");
  }
  if (!(train_frac > 0.0)) throw ValidationError("train_frac must be positive");
  if (!(eval_frac >= 0.0)) throw ValidationError("eval_frac must be >= 0");
  if (!(train_frac + eval_frac < 1.0)) {
    throw ValidationError("train_frac + eval_frac must leave a test remainder below 1");
  }
  if (!(precision_target > 0.0 && precision_target < 1.0)) {
    throw ValidationError("precision_target must be in (0, 1)");
  }
  if (min_support < 1) throw ValidationError("min_support must be >= 1");
  if (beam_k < 1) throw ValidationError("beam_k must be >= 1");
  if (!(zero_shot_holdout > 0.0 && zero_shot_holdout < 1.0)) {
    throw ValidationError("zero_shot_holdout must be in (0, 1)");
  }
  if (!(bucket_cut > 0.0 && bucket_cut <= 1.0)) {
    throw ValidationError("bucket_cut must be in (0, 1]");
  }
  if (applicability_sample_per_pac < 1) {
    throw ValidationError("applicability_sample_per_pac must be >= 1");
  }
  if (sweep_d_models.empty()) throw ValidationError("sweep_d_models must be non-empty");
  for (int d : sweep_d_models) {
    if (d < 1) throw ValidationError("sweep_d_models entries must be positive");
  }
  stage1.validate();
  stage2.validate();
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["world_spec"] = world_spec_path.string();
  j["n_products"] = n_products;
  j["strong_fraction"] = strong_fraction;
  j["train_frac"] = train_frac;
  j["eval_frac"] = eval_frac;
  j["model"] = json::parse(model.to_json());
  j["stage1"] = stage_to_json(stage1);
  j["stage2"] = stage_to_json(stage2);
  j["two_stage"] = two_stage;
  j["precision_target"] = precision_target;
  j["min_support"] = min_support;
  j["beam_k"] = beam_k;
  j["kind"] = experiment_name(kind);
  j["seed"] = seed;
  j["output_dir"] = output_dir.string();
  j["zero_shot_holdout"] = zero_shot_holdout;
  j["bucket_cut"] = bucket_cut;
  j["applicability_sample_per_pac"] = applicability_sample_per_pac;
  j["sweep_d_models"] = sweep_d_models;
  return j.dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) {
    throw ValidationError("malformed experiment config JSON");
  }
  ExperimentConfig c;
  try {
    c.world_spec_path = j.value("world_spec", std::string());
    c.n_products = j.value("n_products", c.n_products);
    c.strong_fraction = j.value("strong_fraction", c.strong_fraction);
    c.train_frac = j.value("train_frac", c.train_frac);
    c.eval_frac = j.value("eval_frac", c.eval_frac);
    if (j.contains("model")) c.model = model::ModelConfig::from_json(j.at("model").dump());
    if (j.contains("stage1")) {
      c.stage1 = stage_from_json(j.at("stage1"), train::Stage::MixedWeakStrong);
    }
    if (j.contains("stage2")) c.stage2 = stage_from_json(j.at("stage2"), train::Stage::StrongOnly);
    c.two_stage = j.value("two_stage", c.two_stage);
    c.precision_target = j.value("precision_target", c.precision_target);
    c.min_support = j.value("min_support", c.min_support);
    c.beam_k = j.value("beam_k", c.beam_k);
    if (j.contains("kind")) c.kind = experiment_from_name(j.at("kind").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", std::string());
    c.zero_shot_holdout = j.value("zero_shot_holdout", c.zero_shot_holdout);
    c.bucket_cut = j.value("bucket_cut", c.bucket_cut);
    c.applicability_sample_per_pac =
        j.value("applicability_sample_per_pac", c.applicability_sample_per_pac);
    if (j.contains("sweep_d_models")) {
      c.sweep_d_models = j.at("sweep_d_models").get<std::vector<int>>();
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("experiment config JSON: ") + e.what());
  }
  // Stage roles are fixed by position regardless of what the file says.
  c.stage1.stage = train::Stage::MixedWeakStrong;
  c.stage2.stage = train::Stage::StrongOnly;
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  return from_json(read_text_file(path));
}

std::string ExperimentConfig::digest() const { return digest_string(to_json()); }

// --- Data plumbing ---------------------------------------------------------------

DataSplits split_dataset(const catalog::Dataset& full, std::uint64_t seed, double train_frac,
                         double eval_frac) {
  DataSplits splits;
  for (const auto& p : full.products) {
    switch (catalog::assign_split(p.id, seed, train_frac, eval_frac)) {
      case Split::Train: splits.train.products.push_back(p); break;
      case Split::Eval: splits.eval.products.push_back(p); break;
      case Split::Test: splits.test.products.push_back(p); break;
    }
  }
  for (const auto& r : full.labels) {
    switch (catalog::assign_split(r.product_id, seed, train_frac, eval_frac)) {
      case Split::Train: splits.train.labels.push_back(r); break;
      case Split::Eval: splits.eval.labels.push_back(r); break;
      case Split::Test: splits.test.labels.push_back(r); break;
    }
  }
  return splits;
}

textproc::Vocabulary build_vocab(const catalog::WorldSpec& spec,
                                 const std::vector<Product>& train_products) {
  std::vector<std::string> corpus;
  corpus.reserve(train_products.size() * 5 + spec.attributes.size() * 8);
  for (const auto& attr : spec.attributes) {
    corpus.push_back(attr.name);
    for (const auto& v : attr.value_domain) corpus.push_back(v);
  }
  for (const auto& p : train_products) {
    corpus.push_back(p.pt);
    corpus.push_back(p.country);
    corpus.push_back(p.title);
    corpus.push_back(p.bullets);
    corpus.push_back(p.description);
  }
  return textproc::Vocabulary::build(corpus, /*min_count=*/1);
}

std::vector<train::LabeledExample> make_examples(const catalog::Dataset& split,
                                                 const textproc::Vocabulary& vocab,
                                                 const model::ModelConfig& config,
                                                 LabelSource source) {
  const auto products = product_index(split.products);
  std::vector<train::LabeledExample> examples;
  examples.reserve(split.labels.size());
  for (const auto& record : split.labels) {
    const auto& label =
        source == LabelSource::Weak ? record.weak_label : record.strong_label;
    if (!label) continue;
    const auto it = products.find(record.product_id);
    if (it == products.end()) {
      throw ValidationError("label references a product outside its split: " +
                            record.product_id);
    }
    train::LabeledExample ex;
    ex.product_id = record.product_id;
    ex.pac = record.pac;
    ex.input_tokens =
        textproc::serialize_input(vocab, record.pac.attribute, *it->second, config.max_input_len);
    if (config.use_embedding_channel && it->second->embedding) {
      ex.embedding = it->second->embedding;
    }
    ex.target_tokens = textproc::serialize_output(vocab, *label);
    ex.weak = source == LabelSource::Weak;
    examples.push_back(std::move(ex));
  }
  return examples;
}

std::vector<Task> tasks_from_labels(const std::vector<catalog::LabelRecord>& labels) {
  std::vector<Task> tasks;
  tasks.reserve(labels.size());
  for (const auto& r : labels) tasks.push_back(Task{r.product_id, r.pac});
  return tasks;
}

std::vector<Task> read_tasks_jsonl(const fs::path& path) {
  std::vector<Task> tasks;
  for (const auto& row : read_jsonl(path)) {
    try {
      tasks.push_back(Task{row.at("product_id").get<std::string>(),
                           PacScope{row.at("pt").get<std::string>(),
                                    row.at("attribute").get<std::string>(),
                                    row.at("country").get<std::string>()}});
    } catch (const json::exception& e) {
      throw IoError("labels record in " + path.string() + " lacks identity fields: " + e.what());
    }
  }
  return tasks;
}

std::vector<decode::PredictionRecord> predict_records(const model::ModelConfig& config,
                                                      const model::Parameters& params,
                                                      const textproc::Vocabulary& vocab,
                                                      const std::vector<Product>& products,
                                                      const std::vector<Task>& tasks, int k) {
  if (k < 1) throw ValidationError("beam width must be >= 1");
  const auto index = product_index(products);
  std::vector<const Product*> resolved(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto it = index.find(tasks[i].product_id);
    if (it == index.end()) {
      throw ValidationError("prediction task references unknown product: " +
                            tasks[i].product_id);
    }
    resolved[i] = it->second;
  }
  std::vector<decode::PredictionRecord> records(tasks.size());
  // Tasks are independent; output order is fixed by index, so the schedule
  // cannot change the bytes written downstream.
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto pred =
        decode::predict(config, params, vocab, tasks[i].pac.attribute, *resolved[i], k);
    decode::PredictionRecord rec;
    rec.product_id = tasks[i].product_id;
    rec.pac = tasks[i].pac;
    rec.predicted = pred.value_set;
    rec.confidence = pred.confidence;
    for (const auto& seq : pred.raw) {
      std::string joined;
      for (int id : seq.tokens) {
        if (!joined.empty()) joined += ' ';
        joined += vocab.token(id);
      }
      rec.raw_sequences.push_back(std::move(joined));
      rec.raw_scores.push_back(seq.score);
    }
    records[i] = std::move(rec);
  }
  return records;
}

std::vector<evalkit::EvalRecord> to_eval_records(
    const std::vector<decode::PredictionRecord>& predictions,
    const std::vector<catalog::LabelRecord>& gold) {
  std::unordered_map<std::string, const catalog::LabelRecord*> index;
  index.reserve(gold.size());
  for (const auto& r : gold) index[record_key(r.product_id, r.pac)] = &r;
  std::vector<evalkit::EvalRecord> records;
  records.reserve(predictions.size());
  for (const auto& p : predictions) {
    const auto it = index.find(record_key(p.product_id, p.pac));
    if (it == index.end()) {
      throw ValidationError("prediction without a gold record: " + p.product_id + " / " +
                            p.pac.key());
    }
    records.push_back(
        evalkit::EvalRecord{p.pac, p.product_id, it->second->gold, p.predicted, p.confidence});
  }
  return records;
}

double exact_match_rate(const std::vector<evalkit::EvalRecord>& records) {
  if (records.empty()) throw ValidationError("exact_match_rate over an empty record set");
  long long hits = 0;
  for (const auto& r : records) hits += evalkit::match(r.predicted, r.gold) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

double value_recall(const std::vector<evalkit::EvalRecord>& records) {
  long long hits = 0, total = 0;
  for (const auto& r : records) {
    if (r.gold.kind != ValueKind::Values) continue;
    ++total;
    hits += evalkit::match(r.predicted, r.gold) ? 1 : 0;
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

// --- Manifests -------------------------------------------------------------------

void write_manifest(const fs::path& dir, const Manifest& manifest) {
  json j;
  j["command"] = manifest.command;
  j["seed"] = manifest.seed;
  j["config_digest"] = manifest.config_digest;
  j["inputs"] = manifest.inputs;
  j["outputs"] = manifest.outputs;
  write_json_file(dir / "manifest.json", j);
}

Manifest read_manifest(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  if (!fs::exists(path)) throw IoError("no manifest.json in " + dir.string());
  const json j = parse_json_file(path);
  Manifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_digest = j.at("config_digest").get<std::string>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  return m;
}

void verify_artifact(const fs::path& dir, const std::string& filename) {
  const Manifest m = read_manifest(dir);
  const auto it = m.outputs.find(filename);
  if (it == m.outputs.end()) {
    throw IoError("manifest in " + dir.string() + " has no entry for " + filename);
  }
  const std::string actual = digest_file(dir / filename);
  if (actual != it->second) {
    throw IoError("digest mismatch for " + (dir / filename).string() + ": manifest records " +
                  it->second + " but the file digests to " + actual +
                  " — the artifact changed after it was produced");
  }
}

// --- Pipeline commands -------------------------------------------------------------

void cmd_synth(const ExperimentConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  ensure_dir(out_dir);
  const auto spec = catalog::WorldSpec::from_json(read_text_file(cfg.world_spec_path));
  const auto world = catalog::generate_world(spec);
  const auto dataset = catalog::emit_dataset(world, cfg.n_products, cfg.strong_fraction);
  write_text_file(out_dir / "world.json", spec.to_json());
  catalog::write_products_jsonl((out_dir / "products.jsonl").string(), dataset.products);
  catalog::write_labels_jsonl((out_dir / "labels.jsonl").string(), dataset.labels);
  Manifest m = base_manifest(cfg, "synth");
  m.inputs["world_spec"] = digest_file(cfg.world_spec_path);
  record_output(m, out_dir, "world.json");
  record_output(m, out_dir, "products.jsonl");
  record_output(m, out_dir, "labels.jsonl");
  write_manifest(out_dir, m);
}

namespace {

// Persists a trained arm the way cmd_train lays out its directory; shared by
// the standalone command and the drivers that keep several arms.
void write_train_dir(const ExperimentConfig& cfg, const model::ModelConfig& mc,
                     const textproc::Vocabulary& vocab, const TrainedArm& arm,
                     const fs::path& out_dir, Manifest m) {
  ensure_dir(out_dir);
  vocab.save(out_dir / "vocab.txt");
  write_text_file(out_dir / "model.json", mc.to_json());
  model::Checkpoint ckpt;
  ckpt.config = mc;
  ckpt.params = arm.params;
  ckpt.step = static_cast<long long>(arm.stage1_log.epochs.size() + arm.stage2_log.epochs.size());
  ckpt.seed = cfg.seed;
  model::save_checkpoint((out_dir / "ckpt").string(), ckpt);
  train::write_train_log_csv(out_dir / "stage1_log.csv", arm.stage1_log);
  if (arm.ran_stage2) train::write_train_log_csv(out_dir / "stage2_log.csv", arm.stage2_log);
  json audit = summary_to_json(arm.summary);
  audit["stage2_ran"] = arm.ran_stage2;
  write_json_file(out_dir / "audit.json", audit);
  record_output(m, out_dir, "vocab.txt");
  record_output(m, out_dir, "model.json");
  record_output(m, out_dir, "ckpt/manifest.json");
  record_output(m, out_dir, "ckpt/tensors.bin");
  record_output(m, out_dir, "stage1_log.csv");
  if (arm.ran_stage2) record_output(m, out_dir, "stage2_log.csv");
  record_output(m, out_dir, "audit.json");
  write_manifest(out_dir, m);
}

}  // namespace

TrainSummary cmd_train(const ExperimentConfig& cfg, const fs::path& data_dir,
                       const fs::path& out_dir) {
  cfg.validate();
  const auto data = load_run_data(cfg, data_dir);
  const auto mc = resolve_model_config(cfg, data.spec, data.vocab);
  const auto weak = make_examples(data.splits.train, data.vocab, mc, LabelSource::Weak);
  const auto strong = make_examples(data.splits.train, data.vocab, mc, LabelSource::Strong);
  const auto eval_set = make_eval_set(data.splits.eval, data.vocab, mc);
  const auto arm = train_arm(cfg, mc, weak, strong, eval_set, "model");
  Manifest m = base_manifest(cfg, "train");
  for (const char* name : {"world.json", "products.jsonl", "labels.jsonl"}) {
    m.inputs[std::string("data/") + name] = digest_file(data_dir / name);
  }
  write_train_dir(cfg, mc, data.vocab, arm, out_dir, std::move(m));
  return arm.summary;
}

void cmd_predict(const ExperimentConfig& cfg, const fs::path& model_dir, const fs::path& data_dir,
                 const fs::path& out_dir) {
  cfg.validate();
  for (const char* name : {"vocab.txt", "model.json", "ckpt/manifest.json", "ckpt/tensors.bin"}) {
    verify_artifact(model_dir, name);
  }
  verify_artifact(data_dir, "products.jsonl");
  verify_artifact(data_dir, "labels.jsonl");
  const auto vocab = textproc::Vocabulary::load(model_dir / "vocab.txt");
  const auto ckpt = model::load_checkpoint((model_dir / "ckpt").string());
  const auto products = catalog::read_products_jsonl((data_dir / "products.jsonl").string());
  // Identity-only task loading: gold labels stay unread on this path.
  const auto all_tasks = read_tasks_jsonl(data_dir / "labels.jsonl");
  std::vector<Task> test_tasks;
  for (const auto& t : all_tasks) {
    if (catalog::assign_split(t.product_id, cfg.seed, cfg.train_frac, cfg.eval_frac) ==
        Split::Test) {
      test_tasks.push_back(t);
    }
  }
  const auto records =
      predict_records(ckpt.config, ckpt.params, vocab, products, test_tasks, cfg.beam_k);
  ensure_dir(out_dir);
  decode::write_predictions_jsonl(out_dir / "predictions.jsonl", records);
  Manifest m = base_manifest(cfg, "predict");
  m.inputs["model/ckpt/tensors.bin"] = digest_file(model_dir / "ckpt/tensors.bin");
  m.inputs["model/vocab.txt"] = digest_file(model_dir / "vocab.txt");
  m.inputs["data/products.jsonl"] = digest_file(data_dir / "products.jsonl");
  m.inputs["data/labels.jsonl"] = digest_file(data_dir / "labels.jsonl");
  record_output(m, out_dir, "predictions.jsonl");
  write_manifest(out_dir, m);
}

evalkit::AggregateReport cmd_eval(const ExperimentConfig& cfg, const fs::path& predictions_dir,
                                  const fs::path& data_dir, const fs::path& out_dir) {
  cfg.validate();
  verify_artifact(predictions_dir, "predictions.jsonl");
  verify_artifact(data_dir, "labels.jsonl");
  const auto predictions =
      decode::read_predictions_jsonl(predictions_dir / "predictions.jsonl");
  const auto labels = catalog::read_labels_jsonl((data_dir / "labels.jsonl").string());
  const auto records = to_eval_records(predictions, labels);
  const auto reports = evalkit::evaluate(records, cfg.precision_target, cfg.min_support);
  const auto agg = evalkit::aggregate(reports);
  const auto app = evalkit::applicability_accuracy(records, cfg.bucket_cut);
  ensure_dir(out_dir);
  evalkit::write_pac_reports_csv(out_dir / "pac_reports.csv", reports);
  write_json_file(out_dir / "aggregate.json", evalkit::aggregate_to_json(agg));
  write_json_file(out_dir / "applicability.json", evalkit::applicability_to_json(app));
  Manifest m = base_manifest(cfg, "eval");
  m.inputs["predictions/predictions.jsonl"] = digest_file(predictions_dir / "predictions.jsonl");
  m.inputs["data/labels.jsonl"] = digest_file(data_dir / "labels.jsonl");
  record_output(m, out_dir, "pac_reports.csv");
  record_output(m, out_dir, "aggregate.json");
  record_output(m, out_dir, "applicability.json");
  write_manifest(out_dir, m);
  return agg;
}

// --- Experiment drivers --------------------------------------------------------------

MainResult run_main(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto out = cfg.output_dir;
  ensure_dir(out);
  cmd_synth(cfg, out / "data");
  const auto training = cmd_train(cfg, out / "data", out / "train");
  cmd_predict(cfg, out / "train", out / "data", out / "predict");
  const auto agg = cmd_eval(cfg, out / "predict", out / "data", out / "eval");
  json report;
  report["kind"] = "main";
  report["aggregate"] = evalkit::aggregate_to_json(agg);
  report["training"] = summary_to_json(training);
  write_json_file(out / "report.json", report);
  Manifest m = base_manifest(cfg, "main");
  record_output(m, out, "report.json");
  write_manifest(out, m);
  return MainResult{agg, training, out};
}

AblationResult run_ablate_negative(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto out = cfg.output_dir;
  ensure_dir(out);
  cmd_synth(cfg, out / "data");
  const auto data = load_run_data(cfg, out / "data");
  const auto mc = resolve_model_config(cfg, data.spec, data.vocab);

  const auto weak = make_examples(data.splits.train, data.vocab, mc, LabelSource::Weak);
  const auto strong = make_examples(data.splits.train, data.vocab, mc, LabelSource::Strong);
  const auto eval_set = make_eval_set(data.splits.eval, data.vocab, mc);
  // The ablated arm never sees a negative target, in training or in
  // checkpoint selection.
  const auto weak_wo = drop_negative_targets(weak);
  const auto strong_wo = drop_negative_targets(strong);
  const auto eval_wo = drop_negative_targets(eval_set);
  if (weak_wo.empty() && strong_wo.empty()) {
    throw ValidationError("ablated arm has no concrete-valued training examples");
  }
  if (eval_wo.empty()) {
    throw ValidationError("ablated arm has no concrete-valued eval examples");
  }

  const auto arm_with = train_arm(cfg, mc, weak, strong, eval_set, "with");
  const auto arm_without = train_arm(cfg, mc, weak_wo, strong_wo, eval_wo, "without");

  const auto tasks = tasks_from_labels(data.splits.test.labels);
  const auto preds_with =
      predict_records(mc, arm_with.params, data.vocab, data.dataset.products, tasks, cfg.beam_k);
  const auto preds_without = predict_records(mc, arm_without.params, data.vocab,
                                             data.dataset.products, tasks, cfg.beam_k);
  decode::write_predictions_jsonl(out / "predictions_with.jsonl", preds_with);
  decode::write_predictions_jsonl(out / "predictions_without.jsonl", preds_without);

  // Evaluation phase: gold enters here.
  const auto recs_with = to_eval_records(preds_with, data.splits.test.labels);
  const auto recs_without = to_eval_records(preds_without, data.splits.test.labels);
  const auto recs_with_values = values_gold_only(recs_with);
  const auto recs_without_values = values_gold_only(recs_without);

  const auto reports_with = evalkit::evaluate(recs_with, cfg.precision_target, cfg.min_support);
  const auto reports_without =
      evalkit::evaluate(recs_without, cfg.precision_target, cfg.min_support);
  evalkit::write_pac_reports_csv(out / "pac_reports_with.csv", reports_with);
  evalkit::write_pac_reports_csv(out / "pac_reports_without.csv", reports_without);
  const auto agg_with = evalkit::aggregate(reports_with);
  const auto agg_without = evalkit::aggregate(reports_without);
  const auto agg_with_values = aggregate_records(recs_with_values, cfg);
  const auto agg_without_values = aggregate_records(recs_without_values, cfg);

  AblationResult result;
  result.with_ar_full = agg_with.ar_at_p;
  result.without_ar_full = agg_without.ar_at_p;
  result.with_ar_restricted = agg_with_values.ar_at_p;
  result.without_ar_restricted = agg_without_values.ar_at_p;
  result.with_recall_full = agg_with.recall_at_p;
  result.without_recall_full = agg_without.recall_at_p;
  result.with_recall_restricted = agg_with_values.recall_at_p;
  result.without_recall_restricted = agg_without_values.recall_at_p;
  result.run_dir = out;

  // Token-level audit: the ablated arm has no business producing either atom.
  for (const auto& p : preds_without) {
    if (!p.raw_sequences.empty() && (contains_word(p.raw_sequences.front(), "[NA]") ||
                                     contains_word(p.raw_sequences.front(), "[NO]"))) {
      ++result.without_negative_outputs;
    }
  }

  // Per-phenomenon audit over the full test slice: where does each arm place
  // concrete predictions, and how many of them are right?
  std::unordered_map<std::string, const decode::PredictionRecord*> by_key_with, by_key_without;
  for (const auto& p : preds_with) by_key_with[record_key(p.product_id, p.pac)] = &p;
  for (const auto& p : preds_without) by_key_without[record_key(p.product_id, p.pac)] = &p;
  std::map<std::string, PhenomenonAuditRow> rows;
  for (const auto& r : data.splits.test.labels) {
    auto& row = rows[catalog::phenomenon_name(r.phenomenon)];
    row.phenomenon = catalog::phenomenon_name(r.phenomenon);
    row.records += 1;
    const auto key = record_key(r.product_id, r.pac);
    const auto* pw = by_key_with.at(key);
    const auto* po = by_key_without.at(key);
    if (pw->predicted.kind == ValueKind::Values) {
      row.with_candidates += 1;
      if (evalkit::match(pw->predicted, r.gold)) row.with_matches += 1;
    }
    if (po->predicted.kind == ValueKind::Values) {
      row.without_candidates += 1;
      if (evalkit::match(po->predicted, r.gold)) row.without_matches += 1;
    }
  }
  std::ostringstream audit_csv;
  audit_csv << "phenomenon,records,with_candidates,with_matches,without_candidates,"
               "without_matches\n";
  for (const auto& [name, row] : rows) {
    result.audit.push_back(row);
    audit_csv << name << ',' << row.records << ',' << row.with_candidates << ','
              << row.with_matches << ',' << row.without_candidates << ','
              << row.without_matches << '\n';
  }
  write_text_file(out / "phenomenon_audit.csv", audit_csv.str());

  json report;
  report["kind"] = "ablate-negative";
  report["with"] = {{"full", evalkit::aggregate_to_json(agg_with)},
                    {"restricted", evalkit::aggregate_to_json(agg_with_values)},
                    {"training", summary_to_json(arm_with.summary)}};
  report["without"] = {{"full", evalkit::aggregate_to_json(agg_without)},
                       {"restricted", evalkit::aggregate_to_json(agg_without_values)},
                       {"training", summary_to_json(arm_without.summary)}};
  report["without_negative_outputs"] = result.without_negative_outputs;
  json audit_rows = json::array();
  for (const auto& row : result.audit) {
    audit_rows.push_back(json{{"phenomenon", row.phenomenon},
                              {"records", row.records},
                              {"with_candidates", row.with_candidates},
                              {"with_matches", row.with_matches},
                              {"without_candidates", row.without_candidates},
                              {"without_matches", row.without_matches}});
  }
  report["phenomenon_audit"] = audit_rows;
  write_json_file(out / "report.json", report);

  Manifest m = base_manifest(cfg, "ablate-negative");
  for (const char* name : {"predictions_with.jsonl", "predictions_without.jsonl",
                           "pac_reports_with.csv", "pac_reports_without.csv",
                           "phenomenon_audit.csv", "report.json"}) {
    record_output(m, out, name);
  }
  write_manifest(out, m);
  return result;
}

ZeroShotResult run_zero_shot(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto out = cfg.output_dir;
  ensure_dir(out);
  cmd_synth(cfg, out / "data");
  const auto data = load_run_data(cfg, out / "data");
  const auto mc = resolve_model_config(cfg, data.spec, data.vocab);

  const auto [kept_pacs, held_pacs] =
      catalog::split_pacs(data.world, cfg.zero_shot_holdout, salt_seed(cfg, "pac-holdout"));
  std::set<std::string> held;
  for (const auto& pac : held_pacs) held.insert(pac.key());
  const auto in_held = [&held](const PacScope& pac) { return held.count(pac.key()) > 0; };

  const auto keep_subset_a = [&](std::vector<train::LabeledExample> examples) {
    std::erase_if(examples, [&](const train::LabeledExample& ex) { return in_held(ex.pac); });
    return examples;
  };

  const auto weak_all = make_examples(data.splits.train, data.vocab, mc, LabelSource::Weak);
  const auto weak_a = keep_subset_a(weak_all);
  // Audited labels for held-out slices are withheld from every arm; so is the
  // checkpoint-selection set, which must not leak them either.
  const auto strong_a =
      keep_subset_a(make_examples(data.splits.train, data.vocab, mc, LabelSource::Strong));
  auto eval_a = keep_subset_a(make_examples(data.splits.eval, data.vocab, mc, LabelSource::Strong));
  if (eval_a.empty()) {
    eval_a = keep_subset_a(make_examples(data.splits.eval, data.vocab, mc, LabelSource::Weak));
  }
  if (eval_a.empty()) throw ValidationError("no kept-subset eval examples");

  ZeroShotResult result;
  result.n_b_pacs = held_pacs.size();
  long long violations = 0;
  const std::vector<train::LabeledExample>* pools[] = {&weak_all, &weak_a, &strong_a, &eval_a};
  for (const auto* pool : pools) {
    for (const auto& ex : *pool) {
      if (!ex.weak && in_held(ex.pac)) ++violations;
    }
  }
  result.strong_b_withheld = violations == 0;

  const auto arm_with = train_arm(cfg, mc, weak_all, strong_a, eval_a, "with");
  const auto arm_without = train_arm(cfg, mc, weak_a, strong_a, eval_a, "without");

  const auto tasks = tasks_from_labels(data.splits.test.labels);
  const auto preds_with =
      predict_records(mc, arm_with.params, data.vocab, data.dataset.products, tasks, cfg.beam_k);
  const auto preds_without = predict_records(mc, arm_without.params, data.vocab,
                                             data.dataset.products, tasks, cfg.beam_k);
  decode::write_predictions_jsonl(out / "predictions_with.jsonl", preds_with);
  decode::write_predictions_jsonl(out / "predictions_without.jsonl", preds_without);

  // Evaluation phase.
  const auto split_subsets = [&](const std::vector<evalkit::EvalRecord>& records) {
    std::pair<std::vector<evalkit::EvalRecord>, std::vector<evalkit::EvalRecord>> out_pair;
    for (const auto& r : records) {
      (in_held(r.pac) ? out_pair.second : out_pair.first).push_back(r);
    }
    return out_pair;
  };
  const auto recs_with = to_eval_records(preds_with, data.splits.test.labels);
  const auto recs_without = to_eval_records(preds_without, data.splits.test.labels);
  const auto [with_a_recs, with_b_recs] = split_subsets(recs_with);
  const auto [without_a_recs, without_b_recs] = split_subsets(recs_without);
  result.with_a = eval_subset(with_a_recs, cfg);
  result.with_b = eval_subset(with_b_recs, cfg);
  result.without_a = eval_subset(without_a_recs, cfg);
  result.without_b = eval_subset(without_b_recs, cfg);
  result.model_accuracy_b = exact_match_rate(with_b_recs);
  result.majority_accuracy_b = majority_gold_accuracy(with_b_recs);
  result.run_dir = out;

  json report;
  report["kind"] = "zero-shot";
  report["held_out_pacs"] = static_cast<int>(result.n_b_pacs);
  report["strong_b_withheld"] = result.strong_b_withheld;
  report["with"] = {{"kept", subset_to_json(result.with_a)},
                    {"held_out", subset_to_json(result.with_b)},
                    {"training", summary_to_json(arm_with.summary)}};
  report["without"] = {{"kept", subset_to_json(result.without_a)},
                       {"held_out", subset_to_json(result.without_b)},
                       {"training", summary_to_json(arm_without.summary)}};
  report["held_out_accuracy"] = result.model_accuracy_b;
  report["held_out_majority_accuracy"] = result.majority_accuracy_b;
  write_json_file(out / "report.json", report);

  Manifest m = base_manifest(cfg, "zero-shot");
  for (const char* name :
       {"predictions_with.jsonl", "predictions_without.jsonl", "report.json"}) {
    record_output(m, out, name);
  }
  write_manifest(out, m);
  return result;
}

ApplicabilityResult run_applicability(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto out = cfg.output_dir;
  ensure_dir(out);
  cmd_synth(cfg, out / "data");
  const auto data = load_run_data(cfg, out / "data");
  const auto mc = resolve_model_config(cfg, data.spec, data.vocab);

  const auto weak = make_examples(data.splits.train, data.vocab, mc, LabelSource::Weak);
  const auto strong = make_examples(data.splits.train, data.vocab, mc, LabelSource::Strong);
  const auto eval_set = make_eval_set(data.splits.eval, data.vocab, mc);
  const auto arm = train_arm(cfg, mc, weak, strong, eval_set, "model");

  // Audited sample: the first N test records per PAC in product-id order.
  // Identity-only selection; the records' gold stays unread until evaluation.
  std::map<std::string, std::vector<const catalog::LabelRecord*>> by_pac;
  for (const auto& r : data.splits.test.labels) by_pac[r.pac.key()].push_back(&r);
  std::vector<const catalog::LabelRecord*> sampled;
  for (auto& [key, records] : by_pac) {
    std::sort(records.begin(), records.end(),
              [](const catalog::LabelRecord* a, const catalog::LabelRecord* b) {
                return a->product_id < b->product_id;
              });
    const std::size_t take =
        std::min(records.size(), static_cast<std::size_t>(cfg.applicability_sample_per_pac));
    sampled.insert(sampled.end(), records.begin(), records.begin() + take);
  }
  if (sampled.empty()) throw ValidationError("applicability audit sample is empty");

  std::vector<Task> tasks;
  tasks.reserve(sampled.size());
  for (const auto* r : sampled) tasks.push_back(Task{r->product_id, r->pac});
  const auto preds =
      predict_records(mc, arm.params, data.vocab, data.dataset.products, tasks, cfg.beam_k);
  decode::write_predictions_jsonl(out / "predictions.jsonl", preds);

  // Baseline training labels come from the training split's own labels
  // (audited where present, catalog otherwise) — never from the test slice.
  const auto train_products = product_index(data.splits.train.products);
  const auto applicable_label = [](const catalog::LabelRecord& r) {
    const auto& label = r.strong_label ? *r.strong_label : *r.weak_label;
    return label.kind == ValueKind::NA ? 0 : 1;
  };
  std::map<std::string, baselines::BowClassifier> bow_by_pac;
  {
    std::map<std::string, std::pair<std::vector<Product>, std::vector<int>>> pools;
    for (const auto& r : data.splits.train.labels) {
      if (!r.weak_label && !r.strong_label) continue;
      auto& pool = pools[r.pac.key()];
      pool.first.push_back(*train_products.at(r.product_id));
      pool.second.push_back(applicable_label(r));
    }
    const baselines::MlcConfig bow_config;
    for (const auto& [key, pool] : pools) {
      bow_by_pac.emplace(key, baselines::train_bow_classifier(pool.first, pool.second, bow_config));
    }
  }

  baselines::EncoderProbeConfig probe_config;
  probe_config.model = mc;
  probe_config.max_epochs = 6;
  probe_config.batch_size = 32;
  probe_config.optimizer.lr = 5e-3;
  std::vector<baselines::ClsItem> probe_items;
  for (const auto& r : data.splits.train.labels) {
    if (!r.weak_label && !r.strong_label) continue;
    const auto& product = *train_products.at(r.product_id);
    baselines::ClsItem item;
    item.product_id = r.product_id;
    item.input_tokens =
        textproc::serialize_input(data.vocab, r.pac.attribute, product, mc.max_input_len);
    if (mc.use_embedding_channel && product.embedding) item.embedding = product.embedding;
    item.label = applicable_label(r);
    probe_items.push_back(std::move(item));
  }
  const auto probe =
      baselines::train_encoder_probe(probe_config, probe_items, salt_seed(cfg, "probe"));

  // Evaluation phase: all three systems against the sampled records' gold.
  const auto all_products = product_index(data.dataset.products);
  std::vector<evalkit::EvalRecord> gen_records = to_eval_records(preds, data.splits.test.labels);
  std::vector<evalkit::EvalRecord> bow_records, probe_records;
  bow_records.reserve(sampled.size());
  probe_records.reserve(sampled.size());
  long long applicable_gold = 0;
  for (const auto* r : sampled) {
    if (r->gold.kind != ValueKind::NA) ++applicable_gold;
    const auto& product = *all_products.at(r->product_id);
    const auto bow_it = bow_by_pac.find(r->pac.key());
    if (bow_it == bow_by_pac.end()) {
      throw ValidationError("no training records to fit a bag-of-words probe for " +
                            r->pac.key());
    }
    const double p_bow = baselines::bow_classifier_prob(bow_it->second, product);
    bow_records.push_back(evalkit::EvalRecord{
        r->pac, r->product_id, r->gold,
        p_bow > bow_it->second.threshold ? ValueSet::no() : ValueSet::na(), p_bow});
    const auto tokens =
        textproc::serialize_input(data.vocab, r->pac.attribute, product, mc.max_input_len);
    const std::vector<double>* emb =
        mc.use_embedding_channel && product.embedding ? &*product.embedding : nullptr;
    const double p_probe = baselines::probe_prob(probe, tokens, emb);
    probe_records.push_back(evalkit::EvalRecord{
        r->pac, r->product_id, r->gold,
        p_probe > 0.5 ? ValueSet::no() : ValueSet::na(), p_probe});
  }

  ApplicabilityResult result;
  result.generative = evalkit::applicability_accuracy(gen_records, cfg.bucket_cut);
  result.bow = evalkit::applicability_accuracy(bow_records, cfg.bucket_cut);
  result.encoder = evalkit::applicability_accuracy(probe_records, cfg.bucket_cut);
  result.always_applicable_accuracy =
      static_cast<double>(applicable_gold) / static_cast<double>(sampled.size());
  result.n_records = sampled.size();
  result.run_dir = out;

  json report;
  report["kind"] = "applicability";
  report["n_records"] = static_cast<long long>(result.n_records);
  report["generative"] = evalkit::applicability_to_json(result.generative);
  report["bag_of_words"] = evalkit::applicability_to_json(result.bow);
  report["encoder_probe"] = evalkit::applicability_to_json(result.encoder);
  report["always_applicable"] = result.always_applicable_accuracy;
  report["training"] = summary_to_json(arm.summary);
  write_json_file(out / "report.json", report);

  Manifest m = base_manifest(cfg, "applicability");
  record_output(m, out, "predictions.jsonl");
  record_output(m, out, "report.json");
  write_manifest(out, m);
  return result;
}

MultimodalResult run_multimodal(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto out = cfg.output_dir;
  ensure_dir(out);
  cmd_synth(cfg, out / "data");
  const auto data = load_run_data(cfg, out / "data");
  if (data.world.image_attr.empty()) {
    throw ValidationError("multimodal experiment needs a world with an image_only attribute");
  }

  auto text_cfg = cfg;
  text_cfg.model.use_embedding_channel = false;
  const auto mc_text = resolve_model_config(text_cfg, data.spec, data.vocab);
  auto fused_cfg = cfg;
  fused_cfg.model.use_embedding_channel = true;
  const auto mc_fused = resolve_model_config(fused_cfg, data.spec, data.vocab);

  // Text-only arm first; the fused arm then starts from its weights.
  const auto weak_text = make_examples(data.splits.train, data.vocab, mc_text, LabelSource::Weak);
  const auto strong_text =
      make_examples(data.splits.train, data.vocab, mc_text, LabelSource::Strong);
  const auto eval_text = make_eval_set(data.splits.eval, data.vocab, mc_text);
  const auto arm_text = train_arm(cfg, mc_text, weak_text, strong_text, eval_text, "text");

  auto fused_start = model::init_params(mc_fused, salt_seed(cfg, "fused/init"));
  const auto transferred = model::transfer_params(fused_start, arm_text.params);
  MultimodalResult result;
  result.shared_tensors = transferred.size();
  result.shared_equal_at_start = !transferred.empty();
  for (const auto& name : transferred) {
    const auto& a = fused_start.at(name);
    const auto& b = arm_text.params.at(name);
    if (a.rows != b.rows || a.cols != b.cols || a.data != b.data) {
      result.shared_equal_at_start = false;
    }
  }

  const auto weak_fused =
      make_examples(data.splits.train, data.vocab, mc_fused, LabelSource::Weak);
  const auto strong_fused =
      make_examples(data.splits.train, data.vocab, mc_fused, LabelSource::Strong);
  const auto eval_fused = make_eval_set(data.splits.eval, data.vocab, mc_fused);
  const auto arm_fused =
      train_arm(cfg, mc_fused, weak_fused, strong_fused, eval_fused, "fused", &fused_start);

  const auto tasks = tasks_from_labels(data.splits.test.labels);
  const auto preds_text = predict_records(mc_text, arm_text.params, data.vocab,
                                          data.dataset.products, tasks, cfg.beam_k);
  const auto preds_fused = predict_records(mc_fused, arm_fused.params, data.vocab,
                                           data.dataset.products, tasks, cfg.beam_k);
  decode::write_predictions_jsonl(out / "predictions_text.jsonl", preds_text);
  decode::write_predictions_jsonl(out / "predictions_fused.jsonl", preds_fused);

  // Evaluation phase: unthresholded value recall per attribute slice.
  const auto recs_text = to_eval_records(preds_text, data.splits.test.labels);
  const auto recs_fused = to_eval_records(preds_fused, data.splits.test.labels);
  const auto slice_by_image = [&](const std::vector<evalkit::EvalRecord>& records, bool image) {
    std::vector<evalkit::EvalRecord> slice;
    for (const auto& r : records) {
      if ((r.pac.attribute == data.world.image_attr) == image) slice.push_back(r);
    }
    return slice;
  };
  result.image_recall_text = value_recall(slice_by_image(recs_text, true));
  result.image_recall_fused = value_recall(slice_by_image(recs_fused, true));
  result.nonimage_recall_text = value_recall(slice_by_image(recs_text, false));
  result.nonimage_recall_fused = value_recall(slice_by_image(recs_fused, false));
  result.run_dir = out;

  json per_attr = json::array();
  std::set<std::string> attrs;
  for (const auto& r : recs_text) attrs.insert(r.pac.attribute);
  for (const auto& attr : attrs) {
    const auto pick = [&attr](const std::vector<evalkit::EvalRecord>& records) {
      std::vector<evalkit::EvalRecord> slice;
      for (const auto& r : records) {
        if (r.pac.attribute == attr) slice.push_back(r);
      }
      return slice;
    };
    per_attr.push_back(json{{"attribute", attr},
                            {"image_only", attr == data.world.image_attr},
                            {"recall_text", value_recall(pick(recs_text))},
                            {"recall_fused", value_recall(pick(recs_fused))}});
  }

  json report;
  report["kind"] = "multimodal";
  report["image_attribute"] = data.world.image_attr;
  report["shared_tensors"] = static_cast<long long>(result.shared_tensors);
  report["shared_equal_at_start"] = result.shared_equal_at_start;
  report["image_recall"] = {{"text", result.image_recall_text},
                            {"fused", result.image_recall_fused}};
  report["nonimage_recall"] = {{"text", result.nonimage_recall_text},
                               {"fused", result.nonimage_recall_fused}};
  report["per_attribute"] = per_attr;
  report["training"] = {{"text", summary_to_json(arm_text.summary)},
                        {"fused", summary_to_json(arm_fused.summary)}};
  write_json_file(out / "report.json", report);

  Manifest m = base_manifest(cfg, "multimodal");
  for (const char* name :
       {"predictions_text.jsonl", "predictions_fused.jsonl", "report.json"}) {
    record_output(m, out, name);
  }
  write_manifest(out, m);
  return result;
}

SweepResult run_arch_sweep(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto out = cfg.output_dir;
  ensure_dir(out);
  cmd_synth(cfg, out / "data");
  const auto data = load_run_data(cfg, out / "data");

  SweepResult result;
  result.run_dir = out;
  json report_rows = json::array();
  std::ostringstream csv;
  csv << "d_model,param_count,best_eval_accuracy,ar_at_p,recall_at_p\n";
  for (int d : cfg.sweep_d_models) {
    auto size_cfg = cfg;
    size_cfg.model.d_model = d;
    size_cfg.model.d_ff = 3 * d;
    const auto mc = resolve_model_config(size_cfg, data.spec, data.vocab);
    // Identical splits and example sets across sizes: only the model changes.
    const auto weak = make_examples(data.splits.train, data.vocab, mc, LabelSource::Weak);
    const auto strong = make_examples(data.splits.train, data.vocab, mc, LabelSource::Strong);
    const auto eval_set = make_eval_set(data.splits.eval, data.vocab, mc);
    const std::string salt = "d" + std::to_string(d);
    const auto arm = train_arm(cfg, mc, weak, strong, eval_set, salt);
    const auto tasks = tasks_from_labels(data.splits.test.labels);
    const auto preds =
        predict_records(mc, arm.params, data.vocab, data.dataset.products, tasks, cfg.beam_k);
    const auto agg = aggregate_records(to_eval_records(preds, data.splits.test.labels), cfg);
    SweepRow row;
    row.d_model = d;
    row.param_count = model::param_count(arm.params);
    row.best_eval_accuracy = final_eval_accuracy(arm.summary);
    row.ar = agg.ar_at_p;
    row.recall = agg.recall_at_p;
    result.rows.push_back(row);
    csv << d << ',' << row.param_count << ',' << format_double(row.best_eval_accuracy) << ','
        << format_double(row.ar) << ','
        << (row.recall ? format_double(*row.recall) : std::string()) << '\n';
    json jrow{{"d_model", d},
              {"param_count", row.param_count},
              {"best_eval_accuracy", row.best_eval_accuracy},
              {"aggregate", evalkit::aggregate_to_json(agg)},
              {"training", summary_to_json(arm.summary)}};
    report_rows.push_back(jrow);
  }
  write_text_file(out / "sweep.csv", csv.str());
  json report;
  report["kind"] = "arch-sweep";
  report["rows"] = report_rows;
  write_json_file(out / "report.json", report);

  Manifest m = base_manifest(cfg, "arch-sweep");
  record_output(m, out, "sweep.csv");
  record_output(m, out, "report.json");
  write_manifest(out, m);
  return result;
}

std::string summarize_runs(const fs::path& runs_dir) {
  if (!fs::exists(runs_dir)) throw IoError("no such directory: " + runs_dir.string());
  std::vector<fs::path> children;
  for (const auto& entry : fs::directory_iterator(runs_dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json") &&
        fs::exists(entry.path() / "report.json")) {
      children.push_back(entry.path());
    }
  }
  std::sort(children.begin(), children.end());
  json rows = json::array();
  for (const auto& dir : children) {
    const auto m = read_manifest(dir);
    json row;
    row["run"] = dir.filename().string();
    row["command"] = m.command;
    row["seed"] = m.seed;
    row["config_digest"] = m.config_digest;
    row["report"] = parse_json_file(dir / "report.json");
    rows.push_back(row);
  }
  json summary;
  summary["runs"] = rows;
  return summary.dump(2) + "\n";
}

}  // namespace attrgen::pipeline
