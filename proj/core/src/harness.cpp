// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace shadowtune {

using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// Reads the keys of one JSON object and rejects any it did not ask for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + " must be an object");
  }

  void size(const char* key, std::size_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void u64(const char* key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void number(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void boolean(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + " must be a boolean");
      out = v->get<bool>();
    }
  }
  void string(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  template <typename F>
  void array(const char* key, F&& each) {
    if (const json* v = take(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + " must be an array");
      for (const auto& item : *v) each(item, where(key));
    }
  }
  const json* object(const char* key) { return take(key); }
  std::string where(const std::string& key) const { return path_.empty() ? key : key.empty() ? path_ : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + where(key) + "'");
  }

 private:
  const json* take(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json dims_json(const ModelDims& d) {
  return {{"d_model", d.d_model},   {"n_heads", d.n_heads},   {"d_ff", d.d_ff},
          {"seq_len", d.seq_len},   {"blk_size", d.blk_size}, {"attn_blk", d.attn_blk},
          {"vocab", d.vocab},       {"n_layers", d.n_layers}, {"causal", d.causal}};
}

void read_dims(const json& j, const std::string& path, ModelDims& d) {
  ObjectReader r(j, path);
  r.size("d_model", d.d_model);
  r.size("n_heads", d.n_heads);
  r.size("d_ff", d.d_ff);
  r.size("seq_len", d.seq_len);
  r.size("blk_size", d.blk_size);
  r.size("attn_blk", d.attn_blk);
  r.size("vocab", d.vocab);
  r.size("n_layers", d.n_layers);
  r.boolean("causal", d.causal);
  r.finish();
}

json rp_json(const RecallPrecision& rp) { return {{"recall", round9(rp.recall)}, {"precision", round9(rp.precision)}}; }

}  // namespace

const char* sparsity_mode_name(SparsityMode m) {
  switch (m) {
    case SparsityMode::kDense:
      return "dense";
    case SparsityMode::kShadowy:
      return "shadowy";
    case SparsityMode::kExposerOracle:
      return "exposer-oracle";
    case SparsityMode::kPredicted:
      return "predicted";
    case SparsityMode::kRandom:
      return "random";
  }
  return "?";
}

SparsityMode parse_sparsity_mode(const std::string& name) {
  for (auto m : {SparsityMode::kDense, SparsityMode::kShadowy, SparsityMode::kExposerOracle, SparsityMode::kPredicted,
                 SparsityMode::kRandom})
    if (name == sparsity_mode_name(m)) return m;
  throw ConfigError("unknown sparsity mode '" + name +
                    "' (expected dense, shadowy, exposer-oracle, predicted or random)");
}

double round9(double v) {
  if (!std::isfinite(v) || v == 0) return v;
  return std::strtod(fmt9(v).c_str(), nullptr);
}

void RunConfig::validate() const {
  dims.validate();
  if (corpus.vocab != dims.vocab || corpus.seq_len != dims.seq_len || corpus.n_topics != backbone.n_topics)
    throw ConfigError("corpus dimensions disagree with the model");
  corpus.validate();
  if (!(theta >= 0 && theta <= 1)) throw ConfigError("theta must lie in [0, 1]");
  if (!(tau > 0 && tau <= 1)) throw ConfigError("tau must lie in (0, 1]");
  if (!(random_density > 0 && random_density <= 1)) throw ConfigError("random_density must lie in (0, 1]");
  if (!(random_attn_density > 0 && random_attn_density <= 1))
    throw ConfigError("random_attn_density must lie in (0, 1]");
  if (!(optimizer.lr > 0)) throw ConfigError("optimizer.lr must be positive");
  if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1))
    throw ConfigError("optimizer betas must lie in [0, 1)");
  if (!(optimizer.eps > 0)) throw ConfigError("optimizer.eps must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (corpus.n_sequences == 0) throw ConfigError("corpus.n_sequences must be positive");
  if (predictor.source != "traces" && predictor.source != "synthetic")
    throw ConfigError("predictor.source must be traces or synthetic");
  if (predictor.n_traces == 0) throw ConfigError("predictor.n_traces must be positive");
  if (!(predictor.holdout >= 0 && predictor.holdout < 1)) throw ConfigError("predictor.holdout must lie in [0, 1)");
  predictor.train.validate();
  bench.validate();
  if (peft.method == PeftMethod::kLora && (peft.lora_rank == 0 || peft.lora_targets.empty()))
    throw ConfigError("LoRA needs a positive rank and at least one target");
  if (peft.method == PeftMethod::kAdapter && peft.adapter_rank == 0) throw ConfigError("adapter rank must be positive");
}

std::filesystem::path RunConfig::predictors_file() const {
  return predictor_path ? *predictor_path : out_dir / "predictors.bin";
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  ObjectReader root(j, "");
  if (const json* m = root.object("model")) read_dims(*m, "model", cfg.dims);
  if (const json* b = root.object("backbone")) {
    ObjectReader r(*b, "backbone");
    std::string style = backbone_style_name(cfg.backbone.style);
    r.string("style", style);
    cfg.backbone.style = parse_backbone_style(style);
    r.u64("seed", cfg.backbone_seed);
    r.size("n_topics", cfg.backbone.n_topics);
    r.number("logit_gain", cfg.backbone.logit_gain);
    r.finish();
  }
  if (const json* c = root.object("corpus")) {
    ObjectReader r(*c, "corpus");
    r.size("n_sequences", cfg.corpus.n_sequences);
    r.array("topics", [&](const json& v, const std::string& where) {
      if (!v.is_number_unsigned()) throw ConfigError(where + " entries must be non-negative integers");
      cfg.corpus.topics.push_back(v.get<std::size_t>());
    });
    r.size("branching", cfg.corpus.branching);
    r.number("topic_locality", cfg.corpus.topic_locality);
    r.number("smoothing", cfg.corpus.smoothing);
    r.u64("seed", cfg.corpus.seed);
    r.finish();
  }
  if (const json* p = root.object("peft")) {
    ObjectReader r(*p, "peft");
    std::string method = peft_method_name(cfg.peft.method);
    r.string("method", method);
    cfg.peft.method = parse_peft_method(method);
    r.size("lora_rank", cfg.peft.lora_rank);
    r.number("lora_scaling", cfg.peft.lora_scaling);
    r.number("lora_init_std", cfg.peft.lora_init_std);
    bool targets_given = false;
    std::vector<LinearSlot> targets;
    r.array("lora_targets", [&](const json& v, const std::string& where) {
      if (!v.is_string()) throw ConfigError(where + " entries must be strings");
      targets_given = true;
      targets.push_back(parse_slot(v.get<std::string>()));
    });
    if (targets_given || p->contains("lora_targets")) cfg.peft.lora_targets = targets;
    r.size("adapter_rank", cfg.peft.adapter_rank);
    r.number("adapter_init_std", cfg.peft.adapter_init_std);
    r.finish();
  }
  std::string mode = sparsity_mode_name(cfg.mode);
  root.string("mode", mode);
  cfg.mode = parse_sparsity_mode(mode);
  root.number("theta", cfg.theta);
  root.number("tau", cfg.tau);
  root.number("random_density", cfg.random_density);
  root.number("random_attn_density", cfg.random_attn_density);
  if (const json* o = root.object("optimizer")) {
    ObjectReader r(*o, "optimizer");
    r.number("lr", cfg.optimizer.lr);
    r.number("beta1", cfg.optimizer.beta1);
    r.number("beta2", cfg.optimizer.beta2);
    r.number("eps", cfg.optimizer.eps);
    r.finish();
  }
  root.size("steps", cfg.steps);
  root.size("batch_size", cfg.batch_size);
  root.size("log_every", cfg.log_every);
  root.u64("seed", cfg.seed);
  std::string out = cfg.out_dir.string();
  root.string("out_dir", out);
  cfg.out_dir = out;
  if (j.contains("predictor_path")) {
    std::string path;
    root.string("predictor_path", path);
    cfg.predictor_path = path;
  }
  if (const json* p = root.object("predictor")) {
    ObjectReader r(*p, "predictor");
    r.string("source", cfg.predictor.source);
    r.size("n_traces", cfg.predictor.n_traces);
    r.number("holdout", cfg.predictor.holdout);
    auto& t = cfg.predictor.train;
    r.number("noise_std", t.noise_std);
    r.number("recall_weight", t.recall_weight);
    r.size("epochs", t.epochs);
    r.number("lr", t.lr);
    r.number("attn_threshold", t.attn_threshold);
    r.number("mlp_threshold", t.mlp_threshold);
    r.number("tau_pred", t.tau_pred);
    r.size("rank", t.rank);
    r.u64("seed", t.seed);
    r.finish();
  }
  if (const json* b = root.object("bench")) {
    ObjectReader r(*b, "bench");
    bool ops_given = b->contains("ops");
    std::vector<BenchOp> ops;
    r.array("ops", [&](const json& v, const std::string& where) {
      if (!v.is_string()) throw ConfigError(where + " entries must be strings");
      ops.push_back(parse_bench_op(v.get<std::string>()));
    });
    if (ops_given) cfg.bench.ops = ops;
    if (b->contains("sizes")) cfg.bench.sizes.clear();
    r.array("sizes", [&](const json& v, const std::string& where) {
      if (!v.is_number_unsigned()) throw ConfigError(where + " entries must be non-negative integers");
      cfg.bench.sizes.push_back(v.get<std::size_t>());
    });
    if (b->contains("sparsities")) cfg.bench.sparsities.clear();
    r.array("sparsities", [&](const json& v, const std::string& where) {
      if (!v.is_number()) throw ConfigError(where + " entries must be numbers");
      cfg.bench.sparsities.push_back(v.get<double>());
    });
    r.size("repetitions", cfg.bench.repetitions);
    r.size("warmups", cfg.bench.warmups);
    r.size("tokens", cfg.bench.tokens);
    r.size("d_model", cfg.bench.d_model);
    r.size("blk_size", cfg.bench.blk_size);
    r.size("attn_blk", cfg.bench.attn_blk);
    r.size("head_dim", cfg.bench.head_dim);
    r.u64("seed", cfg.bench.seed);
    r.finish();
  }
  root.finish();
  cfg.corpus.vocab = cfg.dims.vocab;
  cfg.corpus.seq_len = cfg.dims.seq_len;
  cfg.corpus.n_topics = cfg.backbone.n_topics;
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_text(path)); }

std::string run_config_json(const RunConfig& cfg) {
  json targets = json::array();
  for (auto s : cfg.peft.lora_targets) targets.push_back(slot_name(s));
  json ops = json::array();
  for (auto op : cfg.bench.ops) ops.push_back(bench_op_name(op));
  json sparsities = json::array();
  for (double s : cfg.bench.sparsities) sparsities.push_back(round9(s));
  const auto& t = cfg.predictor.train;
  json j = {
      {"model", dims_json(cfg.dims)},
      {"backbone",
       {{"style", backbone_style_name(cfg.backbone.style)}, {"seed", cfg.backbone_seed}, {"n_topics", cfg.backbone.n_topics},
        {"logit_gain", round9(cfg.backbone.logit_gain)}}},
      {"corpus",
       {{"n_sequences", cfg.corpus.n_sequences},
        {"topics", cfg.corpus.topics},
        {"branching", cfg.corpus.branching},
        {"topic_locality", round9(cfg.corpus.topic_locality)},
        {"smoothing", round9(cfg.corpus.smoothing)},
        {"seed", cfg.corpus.seed}}},
      {"peft",
       {{"method", peft_method_name(cfg.peft.method)},
        {"lora_rank", cfg.peft.lora_rank},
        {"lora_scaling", round9(cfg.peft.lora_scaling)},
        {"lora_init_std", round9(cfg.peft.lora_init_std)},
        {"lora_targets", targets},
        {"adapter_rank", cfg.peft.adapter_rank},
        {"adapter_init_std", round9(cfg.peft.adapter_init_std)}}},
      {"mode", sparsity_mode_name(cfg.mode)},
      {"theta", round9(cfg.theta)},
      {"tau", round9(cfg.tau)},
      {"random_density", round9(cfg.random_density)},
      {"random_attn_density", round9(cfg.random_attn_density)},
      {"optimizer",
       {{"lr", round9(cfg.optimizer.lr)},
        {"beta1", round9(cfg.optimizer.beta1)},
        {"beta2", round9(cfg.optimizer.beta2)},
        {"eps", round9(cfg.optimizer.eps)}}},
      {"steps", cfg.steps},
      {"batch_size", cfg.batch_size},
      {"log_every", cfg.log_every},
      {"seed", cfg.seed},
      {"out_dir", cfg.out_dir.string()},
      {"predictor",
       {{"source", cfg.predictor.source},
        {"n_traces", cfg.predictor.n_traces},
        {"holdout", round9(cfg.predictor.holdout)},
        {"noise_std", round9(t.noise_std)},
        {"recall_weight", round9(t.recall_weight)},
        {"epochs", t.epochs},
        {"lr", round9(t.lr)},
        {"attn_threshold", round9(t.attn_threshold)},
        {"mlp_threshold", round9(t.mlp_threshold)},
        {"tau_pred", round9(t.tau_pred)},
        {"rank", t.rank},
        {"seed", t.seed}}},
      {"bench",
       {{"ops", ops},
        {"sizes", cfg.bench.sizes},
        {"sparsities", sparsities},
        {"repetitions", cfg.bench.repetitions},
        {"warmups", cfg.bench.warmups},
        {"tokens", cfg.bench.tokens},
        {"d_model", cfg.bench.d_model},
        {"blk_size", cfg.bench.blk_size},
        {"attn_blk", cfg.bench.attn_blk},
        {"head_dim", cfg.bench.head_dim},
        {"seed", cfg.bench.seed}}},
  };
  if (cfg.predictor_path) j["predictor_path"] = cfg.predictor_path->string();
  return j.dump(2);
}

CorpusSplit make_corpus(const RunConfig& cfg) {
  CorpusConfig c = cfg.corpus;
  c.vocab = cfg.dims.vocab;
  c.seq_len = cfg.dims.seq_len;
  c.n_topics = cfg.backbone.n_topics;
  c.n_sequences = cfg.corpus.n_sequences + cfg.predictor.n_traces;
  auto all = gen_corpus(c);
  CorpusSplit split;
  split.traces.assign(all.begin() + static_cast<std::ptrdiff_t>(cfg.corpus.n_sequences), all.end());
  all.resize(cfg.corpus.n_sequences);
  split.train = std::move(all);
  return split;
}

// ---------------------------------------------------------------------------
// Traces

namespace {

std::string trace_key(std::size_t r, std::size_t l, const std::string& what) {
  return "r" + std::to_string(r) + ".l" + std::to_string(l) + "." + what;
}

std::vector<std::int32_t> inputs_of(const Sequence& seq, std::size_t s) {
  if (seq.size() < s + 1) throw ConfigError("sequence shorter than seq_len + 1");
  return {seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(s)};
}

std::vector<std::int32_t> targets_of(const Sequence& seq, std::size_t s) {
  if (seq.size() < s + 1) throw ConfigError("sequence shorter than seq_len + 1");
  return {seq.begin() + 1, seq.begin() + static_cast<std::ptrdiff_t>(s) + 1};
}

}  // namespace

void TraceSet::save(TensorArchive& archive) const {
  archive.metadata = json{{"kind", "traces"}, {"dims", dims_json(dims)}, {"n_records", records.size()}}.dump();
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    for (std::size_t l = 0; l < rec.attn_input.size(); ++l) {
      archive.put(trace_key(r, l, "attn_input"), rec.attn_input[l]);
      for (std::size_t h = 0; h < rec.scores[l].size(); ++h)
        archive.put(trace_key(r, l, "scores" + std::to_string(h)), rec.scores[l][h]);
      archive.put(trace_key(r, l, "mlp_input"), rec.mlp_input[l]);
      archive.put(trace_key(r, l, "activations"), rec.activations[l]);
    }
  }
}

TraceSet TraceSet::load(const TensorArchive& archive) {
  const json meta = json::parse(archive.metadata, nullptr, false);
  if (meta.is_discarded() || !meta.is_object() || meta.value("kind", "") != "traces")
    throw IoError("not a trace archive");
  TraceSet set;
  try {
    read_dims(meta.at("dims"), "dims", set.dims);
  } catch (const ConfigError& e) {
    throw IoError(std::string("trace archive metadata: ") + e.what());
  }
  const auto n = meta.at("n_records").get<std::size_t>();
  for (std::size_t r = 0; r < n; ++r) {
    TraceRecord rec;
    for (std::size_t l = 0; l < set.dims.n_layers; ++l) {
      rec.attn_input.push_back(archive.get(trace_key(r, l, "attn_input")));
      auto& heads = rec.scores.emplace_back();
      for (std::size_t h = 0; h < set.dims.n_heads; ++h)
        heads.push_back(archive.get(trace_key(r, l, "scores" + std::to_string(h))));
      rec.mlp_input.push_back(archive.get(trace_key(r, l, "mlp_input")));
      rec.activations.push_back(archive.get(trace_key(r, l, "activations")));
    }
    set.records.push_back(std::move(rec));
  }
  return set;
}

TraceSet collect_traces(const FrozenWeights<float>& w, const PeftParams<float>& p,
                        const std::vector<Sequence>& sequences) {
  const auto& dims = w.dims;
  TraceSet set{dims, {}};
  DenseMasks<float> masks(dims);
  constexpr std::size_t kChunk = 4;
  for (std::size_t i0 = 0; i0 < sequences.size(); i0 += kChunk) {
    std::vector<std::vector<std::int32_t>> inputs;
    for (std::size_t i = i0; i < std::min(sequences.size(), i0 + kChunk); ++i)
      inputs.push_back(inputs_of(sequences[i], dims.seq_len));
    std::vector<ModelCache<float>> caches;
    model_forward_batch(w, p, inputs, masks, &caches);
    for (const auto& cache : caches) {
      TraceRecord rec;
      for (const auto& blk : cache.blocks) {
        rec.attn_input.push_back(blk.attn.x);
        auto& heads = rec.scores.emplace_back();
        for (const auto& probs : blk.attn.probs) heads.push_back(probs.to_dense());
        rec.mlp_input.push_back(blk.mlp.x);
        rec.activations.push_back(blk.mlp.h.to_dense());
      }
      set.records.push_back(std::move(rec));
    }
  }
  return set;
}

std::vector<AttnSample> attn_samples(const TraceSet& traces, std::size_t layer, std::size_t first,
                                     std::size_t last) {
  std::vector<AttnSample> out;
  for (std::size_t r = first; r < last; ++r) {
    const auto& rec = traces.records.at(r);
    AttnSample s{rec.attn_input.at(layer), {}};
    for (const auto& scores : rec.scores.at(layer)) s.targets.push_back(pool_scores(scores));
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<MlpSample> mlp_samples(const TraceSet& traces, std::size_t layer, std::size_t first, std::size_t last) {
  std::vector<MlpSample> out;
  for (std::size_t r = first; r < last; ++r) {
    const auto& rec = traces.records.at(r);
    out.push_back({rec.mlp_input.at(layer), block_labels(rec.activations.at(layer), traces.dims.blk_size)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Predictor training

std::string PredictorMetrics::to_json() const {
  json layers_j = json::array();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& m = layers[l];
    layers_j.push_back({{"layer", l},
                        {"attn_agreement", round9(m.attn_agreement)},
                        {"attn_loss", round9(m.attn_loss)},
                        {"mlp_token", rp_json(m.mlp_token)},
                        {"mlp_sequence", rp_json(m.mlp_sequence)},
                        {"mlp_loss", round9(m.mlp_loss)}});
  }
  return json{{"layers", layers_j},
              {"mean_attn_agreement", round9(mean_attn_agreement)},
              {"recall", round9(mean_token_recall)},
              {"precision", round9(mean_token_precision)},
              {"sequence_recall", round9(mean_sequence_recall)},
              {"sequence_precision", round9(mean_sequence_precision)}}
      .dump(2);
}

namespace {

void summarize(PredictorMetrics& m) {
  const double n = static_cast<double>(m.layers.size());
  m.mean_attn_agreement = m.mean_token_recall = m.mean_token_precision = 0;
  m.mean_sequence_recall = m.mean_sequence_precision = 0;
  for (const auto& l : m.layers) {
    m.mean_attn_agreement += l.attn_agreement / n;
    m.mean_token_recall += l.mlp_token.recall / n;
    m.mean_token_precision += l.mlp_token.precision / n;
    m.mean_sequence_recall += l.mlp_sequence.recall / n;
    m.mean_sequence_precision += l.mlp_sequence.precision / n;
  }
}

LayerPredictorMetrics evaluate_layer(const LayerPredictor& lp, std::span<const AttnSample> attn,
                                     std::span<const MlpSample> mlp, const PredictorTrainConfig& t,
                                     const PatternPool& pool) {
  LayerPredictorMetrics m;
  m.attn_agreement = attn_pattern_agreement(lp.attn, attn, t.attn_threshold, t.tau_pred, pool);
  m.attn_loss = attn_distill_loss(lp.attn, attn);
  m.mlp_token = mlp_token_metrics(lp.mlp, mlp, t.mlp_threshold);
  m.mlp_sequence = mlp_sequence_metrics(lp.mlp, mlp, t.mlp_threshold);
  m.mlp_loss = mlp_weighted_loss(lp.mlp, mlp, t.recall_weight);
  return m;
}

PredictorSet empty_set(const PredictorTrainConfig& t) {
  PredictorSet set;
  set.attn_threshold = t.attn_threshold;
  set.mlp_threshold = t.mlp_threshold;
  set.tau_pred = t.tau_pred;
  return set;
}

}  // namespace

PredictorTrainingResult train_predictors(const RunConfig& cfg, const TraceSet& traces) {
  if (traces.records.empty()) throw ConfigError("train_predictors: trace set is empty");
  if (!(traces.dims == cfg.dims)) throw ConfigError("trace dimensions do not match the run config");
  const auto& t = cfg.predictor.train;
  const std::size_t n = traces.records.size();
  std::size_t n_test = static_cast<std::size_t>(std::llround(cfg.predictor.holdout * static_cast<double>(n)));
  if (cfg.predictor.holdout > 0 && n >= 2) n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
  if (n < 2) n_test = 0;
  const std::size_t n_train = n - n_test;
  const std::size_t rank = t.rank ? t.rank : default_predictor_rank(cfg.dims.d_model);
  const auto pool = build_pool(cfg.dims.attn_grid());
  PredictorTrainingResult result{empty_set(t), {}};
  for (std::size_t l = 0; l < cfg.dims.n_layers; ++l) {
    const auto attn_train = attn_samples(traces, l, 0, n_train);
    const auto mlp_train = mlp_samples(traces, l, 0, n_train);
    const auto attn_test = n_test ? attn_samples(traces, l, n_train, n) : attn_train;
    const auto mlp_test = n_test ? mlp_samples(traces, l, n_train, n) : mlp_train;
    Rng rng(t.seed * 1000003 + l);
    LayerPredictor lp{init_attn_predictor(cfg.dims.d_model, cfg.dims.n_heads, rank, rng),
                      init_mlp_predictor(cfg.dims.d_model, cfg.dims.n_blk())};
    PredictorTrainConfig lt = t;
    lt.seed = t.seed * 1000003 + l;
    train_attn_predictor(lp.attn, attn_train, lt);
    train_mlp_predictor(lp.mlp, mlp_train, lt);
    result.metrics.layers.push_back(evaluate_layer(lp, attn_test, mlp_test, t, pool));
    result.predictors.layers.push_back(std::move(lp));
  }
  summarize(result.metrics);
  return result;
}

PredictorTrainingResult train_synthetic_predictors(const RunConfig& cfg) {
  const auto& t = cfg.predictor.train;
  const std::size_t rank = t.rank ? t.rank : default_predictor_rank(cfg.dims.d_model);
  const auto attn = make_realizable_attn_benchmark(cfg.dims.seq_len, cfg.dims.d_model, cfg.dims.n_heads,
                                                   std::max<std::size_t>(rank, 4), 32, 32, t.seed + 17);
  const auto mlp = make_realizable_mlp_benchmark(64, 32, 16, 64, 32, t.seed + 21);
  Rng rng(t.seed);
  LayerPredictor lp{init_attn_predictor(cfg.dims.d_model, cfg.dims.n_heads, std::max<std::size_t>(rank, 4), rng),
                    init_mlp_predictor(32, 16)};
  train_attn_predictor(lp.attn, attn.train, t);
  train_mlp_predictor(lp.mlp, mlp.train, t);
  const auto pool = build_pool(cfg.dims.attn_grid());
  PredictorTrainingResult result{empty_set(t), {}};
  result.metrics.layers.push_back(evaluate_layer(lp, attn.test, mlp.test, t, pool));
  result.predictors.layers.push_back(std::move(lp));
  summarize(result.metrics);
  return result;
}

// ---------------------------------------------------------------------------
// Fine-tuning

RandomMasks::RandomMasks(const ModelDims& dims, double mlp_density, double attn_density, std::uint64_t seed)
    : dims_(dims), rng_(seed) {
  const std::size_t n_blk = dims.n_blk();
  n_active_ = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(mlp_density * static_cast<double>(n_blk))), 1, n_blk);
  const std::size_t g = dims.attn_grid();
  const std::size_t admissible = dims.causal ? g * (g + 1) / 2 : g * g;
  n_attn_active_ = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(attn_density * static_cast<double>(admissible))), g, admissible);
}

CombinedLayout RandomMasks::attention_layout(std::size_t, std::span<const Tensor>) {
  const std::size_t g = dims_.attn_grid();
  std::vector<BlockIndex> off_diagonal;
  for (std::size_t r = 0; r < g; ++r)
    for (std::size_t c = 0; c < (dims_.causal ? r : g); ++c)
      if (c != r) off_diagonal.push_back({static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(c)});
  std::vector<std::vector<BlockIndex>> per_head(dims_.n_heads);
  for (auto& blocks : per_head) {
    std::shuffle(off_diagonal.begin(), off_diagonal.end(), rng_.engine());
    blocks.assign(off_diagonal.begin(), off_diagonal.begin() + static_cast<std::ptrdiff_t>(n_attn_active_ - g));
    for (std::size_t d = 0; d < g; ++d) blocks.push_back({static_cast<std::uint32_t>(d), static_cast<std::uint32_t>(d)});
    std::sort(blocks.begin(), blocks.end());
  }
  return CombinedLayout(g, per_head);
}

NeuronBlockMask RandomMasks::mlp_mask(std::size_t, std::span<const Tensor>) {
  const std::size_t n_blk = dims_.n_blk();
  std::vector<std::size_t> ids(n_blk);
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), rng_.engine());
  NeuronBlockMask mask(n_blk, false);
  for (std::size_t i = 0; i < n_active_; ++i) mask.set(ids[i], true);
  return mask;
}

CombinedLayout TimedMasks::attention_layout(std::size_t layer, std::span<const Tensor> normed_inputs) {
  const auto t0 = Clock::now();
  auto layout = inner_.attention_layout(layer, normed_inputs);
  seconds_ += seconds_since(t0);
  const std::size_t g = layout.grid();
  const std::size_t admissible = causal_ ? g * (g + 1) / 2 : g * g;
  const auto counted = causal_ ? causal_restrict(layout) : layout;
  attn_density_ += static_cast<double>(counted.total_blocks()) / static_cast<double>(admissible * layout.n_heads());
  ++attn_calls_;
  return layout;
}

NeuronBlockMask TimedMasks::mlp_mask(std::size_t layer, std::span<const Tensor> normed_inputs) {
  const auto t0 = Clock::now();
  auto mask = inner_.mlp_mask(layer, normed_inputs);
  seconds_ += seconds_since(t0);
  mlp_density_ += static_cast<double>(mask.active_count()) / static_cast<double>(mask.size());
  ++mlp_calls_;
  return mask;
}

double TimedMasks::mean_attn_density() const { return attn_calls_ ? attn_density_ / static_cast<double>(attn_calls_) : 1.0; }
double TimedMasks::mean_mlp_density() const { return mlp_calls_ ? mlp_density_ / static_cast<double>(mlp_calls_) : 1.0; }

double TimingReport::phase_total(std::size_t phase) const {
  double t = 0;
  for (const auto& s : steps) t += s.phase[phase];
  return t;
}

double TimingReport::total() const {
  double t = 0;
  for (const auto& s : steps) t += s.total;
  return t;
}

std::vector<double> TimingReport::phase_percent() const {
  double sum = 0;
  for (std::size_t p = 0; p < 4; ++p) sum += phase_total(p);
  std::vector<double> out(4, 0.0);
  if (sum <= 0) return out;
  for (std::size_t p = 0; p < 4; ++p) out[p] = 100.0 * phase_total(p) / sum;
  return out;
}

double TimingReport::attributed_fraction() const {
  double sum = 0;
  for (std::size_t p = 0; p < 4; ++p) sum += phase_total(p);
  const double t = total();
  return t > 0 ? sum / t : 1.0;
}

std::string FinetuneResult::report_json(const RunConfig& cfg) const {
  json phases = json::object();
  const auto pct = timing.phase_percent();
  for (std::size_t p = 0; p < 4; ++p) {
    const double total = timing.phase_total(p);
    phases[kPhaseNames[p]] = {{"seconds", round9(total)},
                              {"mean_step_ms", round9(timing.steps.empty() ? 0 : 1e3 * total / timing.steps.size())},
                              {"percent", round9(pct[p])}};
  }
  json j = {{"mode", sparsity_mode_name(cfg.mode)},
            {"peft", peft_method_name(cfg.peft.method)},
            {"steps", losses.size()},
            {"batch_size", cfg.batch_size},
            {"seed", cfg.seed},
            {"trainable_params", trainable_params},
            {"backbone_params", backbone_param_count(cfg.dims)},
            {"final_loss", round9(final_loss)},
            {"eval_loss", round9(eval_loss)},
            {"attn_density", round9(attn_density)},
            {"mlp_density", round9(mlp_density)},
            {"timing",
             {{"phases", phases},
              {"total_seconds", round9(timing.total())},
              {"attributed_fraction", round9(timing.attributed_fraction())}}}};
  return j.dump(2);
}

FinetuneResult finetune(const RunConfig& cfg, const FrozenWeights<float>& w, const std::vector<Sequence>& train,
                        const std::vector<Sequence>& eval, const PredictorSet* predictors) {
  cfg.validate();
  if (train.empty()) throw ConfigError("finetune: empty training corpus");
  const auto& dims = w.dims;
  Rng rng(cfg.seed);
  FinetuneResult result{{}, {}, 0, 0, 1, 1, 0, init_peft(w, cfg.peft, rng)};
  PeftParams<float>& p = result.peft;
  result.trainable_params = trainable_param_count(p);
  const auto pool = build_pool(dims.attn_grid());

  std::unique_ptr<MaskProvider<float>> inner;
  switch (cfg.mode) {
    case SparsityMode::kDense:
      inner = std::make_unique<DenseMasks<float>>(dims);
      break;
    case SparsityMode::kShadowy:
      inner = std::make_unique<ExposerMasks<float>>(w, p, pool, ExposerOptions{cfg.tau, 0.0, true, true});
      break;
    case SparsityMode::kExposerOracle:
      inner = std::make_unique<ExposerMasks<float>>(w, p, pool, ExposerOptions{cfg.tau, cfg.theta, true, false});
      break;
    case SparsityMode::kPredicted:
      if (predictors == nullptr) throw ConfigError("predicted mode needs trained predictors");
      if (predictors->layers.size() != dims.n_layers) throw ConfigError("predictor layer count does not match the model");
      inner = std::make_unique<PredictedMasks>(*predictors, pool);
      break;
    case SparsityMode::kRandom:
      inner = std::make_unique<RandomMasks>(dims, cfg.random_density, cfg.random_attn_density, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
      break;
  }
  TimedMasks masks(*inner, dims.causal);
  AdamState<float> state;

  const std::size_t B = cfg.batch_size;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::vector<std::int32_t>> inputs, targets;
    for (std::size_t b = 0; b < B; ++b) {
      const auto& seq = train[(step * B + b) % train.size()];
      inputs.push_back(inputs_of(seq, dims.seq_len));
      targets.push_back(targets_of(seq, dims.seq_len));
    }
    StepTiming timing;
    const auto step_start = Clock::now();

    const double pred_before = masks.seconds();
    auto t0 = Clock::now();
    std::vector<ModelCache<float>> caches;
    const auto logits = model_forward_batch(w, p, inputs, masks, &caches);
    double loss = 0;
    for (std::size_t b = 0; b < B; ++b) loss += static_cast<double>(loss_forward(logits[b], targets[b])) / B;
    const double prediction = masks.seconds() - pred_before;
    timing.phase[0] = std::max(0.0, seconds_since(t0) - prediction);
    timing.phase[3] = prediction;
    if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(step));

    t0 = Clock::now();
    auto grads = GradientSet<float>::zeros_like(p);
    for (std::size_t b = 0; b < B; ++b)
      grads.accumulate(model_backward(w, p, caches[b], targets[b]), 1.0f / static_cast<float>(B));
    timing.phase[1] = seconds_since(t0);

    t0 = Clock::now();
    optimizer_step(p, state, grads, cfg.optimizer);
    timing.phase[2] = seconds_since(t0);

    timing.total = seconds_since(step_start);
    result.timing.steps.push_back(timing);
    result.losses.push_back(loss);
    if (cfg.log_every && (step + 1) % cfg.log_every == 0)
      std::cerr << sparsity_mode_name(cfg.mode) << " step " << step + 1 << " loss " << fmt9(loss) << "\n";
  }

  if (!result.losses.empty()) {
    const std::size_t tail = std::max<std::size_t>(1, result.losses.size() / 10);
    double sum = 0;
    for (std::size_t i = result.losses.size() - tail; i < result.losses.size(); ++i) sum += result.losses[i];
    result.final_loss = sum / static_cast<double>(tail);
  }
  if (!eval.empty()) {
    DenseMasks<float> dense(dims);
    double sum = 0;
    for (const auto& seq : eval) {
      const auto in = inputs_of(seq, dims.seq_len);
      sum += loss_forward(model_forward(w, p, std::span<const std::int32_t>(in), dense, nullptr), targets_of(seq, dims.seq_len));
    }
    result.eval_loss = sum / static_cast<double>(eval.size());
  }
  result.attn_density = masks.mean_attn_density();
  result.mlp_density = masks.mean_mlp_density();
  return result;
}

std::string loss_curve_csv(const std::string& mode, const std::vector<double>& losses) {
  std::string out = "mode,step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) out += mode + "," + std::to_string(i) + "," + fmt9(losses[i]) + "\n";
  return out;
}

std::string step_timing_csv(const TimingReport& timing) {
  std::string out = "step,forward_s,backward_s,optimizer_step_s,prediction_s,total_s\n";
  for (std::size_t i = 0; i < timing.steps.size(); ++i) {
    const auto& s = timing.steps[i];
    out += std::to_string(i);
    for (double v : s.phase) out += "," + fmt9(v);
    out += "," + fmt9(s.total) + "\n";
  }
  return out;
}

std::string breakdown_csv(const TimingReport& timing) {
  std::string out = "phase,seconds,percent\n";
  const auto pct = timing.phase_percent();
  for (std::size_t p = 0; p < 4; ++p)
    out += std::string(kPhaseNames[p]) + "," + fmt9(timing.phase_total(p)) + "," + fmt9(pct[p]) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// File-level operations

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw IoError("write to '" + path.string() + "' failed");
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string error_json(const std::string& type, const std::string& message) {
  return json{{"error", {{"type", type}, {"message", message}}}}.dump();
}

namespace {

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

FrozenWeights<float> backbone_of(const RunConfig& cfg) { return init_backbone(cfg.dims, cfg.backbone, cfg.backbone_seed); }

std::string mode_suffix(const RunConfig& cfg) { return sparsity_mode_name(cfg.mode); }

}  // namespace

std::vector<std::filesystem::path> run_gen_corpus(const RunConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  const auto split = make_corpus(cfg);
  TensorArchive archive;
  archive.metadata = json{{"kind", "corpus"}, {"n_train", split.train.size()}, {"n_traces", split.traces.size()}}.dump();
  for (std::size_t i = 0; i < split.train.size(); ++i) archive.put_ints("train" + std::to_string(i), split.train[i]);
  for (std::size_t i = 0; i < split.traces.size(); ++i) archive.put_ints("trace" + std::to_string(i), split.traces[i]);
  const auto path = cfg.out_dir / "corpus.bin";
  archive.save(path);
  return {path};
}

std::vector<std::filesystem::path> run_collect_traces(const RunConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  const auto w = backbone_of(cfg);
  Rng rng(cfg.seed);
  const auto peft = init_peft(w, cfg.peft, rng);
  const auto traces = collect_traces(w, peft, make_corpus(cfg).traces);
  TensorArchive archive;
  traces.save(archive);
  const auto path = cfg.out_dir / "traces.bin";
  archive.save(path);
  return {path};
}

std::vector<std::filesystem::path> run_train_predictors(const RunConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  PredictorTrainingResult result;
  if (cfg.predictor.source == "synthetic") {
    result = train_synthetic_predictors(cfg);
  } else {
    const auto traces_path = cfg.out_dir / "traces.bin";
    if (!std::filesystem::exists(traces_path))
      throw IoError("missing '" + traces_path.string() + "' (run collect-traces first)");
    result = train_predictors(cfg, TraceSet::load(TensorArchive::load(traces_path)));
  }
  TensorArchive archive;
  result.predictors.save(archive);
  const auto params_path = cfg.predictors_file();
  if (params_path.has_parent_path()) ensure_dir(params_path.parent_path());
  archive.save(params_path);
  const auto metrics_path = cfg.out_dir / "predictor_metrics.json";
  write_text(metrics_path, result.metrics.to_json() + "\n");
  return {params_path, metrics_path};
}

std::vector<std::filesystem::path> run_finetune(const RunConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  const auto w = backbone_of(cfg);
  std::optional<PredictorSet> predictors;
  if (cfg.mode == SparsityMode::kPredicted) {
    const auto path = cfg.predictors_file();
    if (!std::filesystem::exists(path)) throw IoError("missing '" + path.string() + "' (run train-predictors first)");
    predictors = PredictorSet::load(TensorArchive::load(path));
  }
  const auto split = make_corpus(cfg);
  auto result = finetune(cfg, w, split.train, split.traces, predictors ? &*predictors : nullptr);
  const std::string m = mode_suffix(cfg);
  std::vector<std::filesystem::path> out = {cfg.out_dir / ("loss_curve_" + m + ".csv"),
                                            cfg.out_dir / ("timing_" + m + ".csv"),
                                            cfg.out_dir / ("timing_report_" + m + ".json"),
                                            cfg.out_dir / ("checkpoint_" + m + ".bin")};
  write_text(out[0], loss_curve_csv(m, result.losses));
  write_text(out[1], step_timing_csv(result.timing));
  write_text(out[2], result.report_json(cfg) + "\n");
  TensorArchive ckpt;
  ckpt.metadata = run_config_json(cfg);
  for (const auto& ref : trainable_params(result.peft)) ckpt.put(ref.name, *ref.value);
  ckpt.save(out[3]);
  return out;
}

std::vector<std::filesystem::path> run_bench_op(const RunConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  const auto path = cfg.out_dir / "bench.csv";
  write_text(path, bench_csv(run_bench(cfg.bench)));
  return {path};
}

std::vector<std::filesystem::path> run_report(const RunConfig& cfg) {
  cfg.validate();
  const std::string m = mode_suffix(cfg);
  const auto timing_path = cfg.out_dir / ("timing_report_" + m + ".json");
  const auto bench_path = cfg.out_dir / "bench.csv";
  std::vector<std::string> missing;
  for (const auto& p : {timing_path, bench_path})
    if (!std::filesystem::exists(p)) missing.push_back(p.string());
  if (!missing.empty()) {
    std::string msg = "report inputs missing:";
    for (const auto& p : missing) msg += " " + p;
    throw IoError(msg);
  }

  // Sparsity of the frozen model on a batch of training sequences.
  const auto w = backbone_of(cfg);
  Rng rng(cfg.seed);
  const auto peft = init_peft(w, cfg.peft, rng);
  const auto split = make_corpus(cfg);
  std::vector<std::vector<std::int32_t>> batch;
  for (std::size_t i = 0; i < std::min(cfg.batch_size, split.train.size()); ++i)
    batch.push_back(inputs_of(split.train[i], cfg.dims.seq_len));
  const auto pool = build_pool(cfg.dims.attn_grid());
  const std::vector<double> thetas = {0.05, 0.1, 0.2};
  const auto rows = layer_sparsity_report(w, peft, batch, thetas, cfg.tau, pool);
  const auto sparsity_path = cfg.out_dir / "sparsity.csv";
  write_text(sparsity_path, sparsity_csv(rows));

  // Phase breakdown.
  const json report = json::parse(read_text(timing_path), nullptr, false);
  if (report.is_discarded()) throw IoError("'" + timing_path.string() + "' is not valid JSON");
  std::string breakdown = "phase,seconds,percent\n";
  for (const char* phase : kPhaseNames) {
    const auto& ph = report.at("timing").at("phases").at(phase);
    breakdown += std::string(phase) + "," + fmt9(ph.at("seconds").get<double>()) + "," +
                 fmt9(ph.at("percent").get<double>()) + "\n";
  }
  const auto breakdown_path = cfg.out_dir / ("breakdown_" + m + ".csv");
  write_text(breakdown_path, breakdown);

  // Linear fit of each bench series.
  std::vector<BenchRecord> records;
  std::istringstream in(read_text(bench_path));
  std::string line;
  std::getline(in, line);
  if (line != "op,size,sparsity,active_blocks,median_ns,dense_median_ns,speedup")
    throw IoError("'" + bench_path.string() + "' has an unexpected header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    BenchRecord r;
    std::string f;
    std::vector<std::string> cols;
    while (std::getline(fields, f, ',')) cols.push_back(f);
    if (cols.size() != 7) throw IoError("malformed bench row: " + line);
    r.op = cols[0];
    r.size = std::stoul(cols[1]);
    r.sparsity = std::stod(cols[2]);
    r.active_blocks = std::stoul(cols[3]);
    r.median_ns = std::stod(cols[4]);
    r.dense_median_ns = std::stod(cols[5]);
    r.speedup = std::stod(cols[6]);
    records.push_back(r);
  }
  std::string fits = "op,size,slope_ns,intercept_ns,r2,monotone,max_speedup\n";
  std::set<std::pair<std::string, std::size_t>> series;
  for (const auto& r : records) series.insert({r.op, r.size});
  for (const auto& [op, size] : series) {
    std::vector<BenchRecord> rs;
    for (const auto& r : records)
      if (r.op == op && r.size == size) rs.push_back(r);
    std::sort(rs.begin(), rs.end(), [](const auto& a, const auto& b) { return a.sparsity < b.sparsity; });
    // Scale the density axis by the block count of the dense shape.
    const std::size_t total = std::max_element(rs.begin(), rs.end(), [](const auto& a, const auto& b) {
                                return a.active_blocks < b.active_blocks;
                              })->active_blocks;
    for (auto& r : rs) r.total_blocks = total;
    bool monotone = true;
    double best = 0;
    for (std::size_t i = 0; i < rs.size(); ++i) {
      if (i > 0 && rs[i].median_ns > rs[i - 1].median_ns) monotone = false;
      best = std::max(best, rs[i].speedup);
    }
    const auto fit = rs.size() >= 2 ? fit_time_vs_density(rs) : LinearFit{};
    fits += op + "," + std::to_string(size) + "," + fmt9(fit.slope) + "," + fmt9(fit.intercept) + "," + fmt9(fit.r2) +
            "," + (monotone ? "true" : "false") + "," + fmt9(best) + "\n";
  }
  const auto fit_path = cfg.out_dir / "bench_fit.csv";
  write_text(fit_path, fits);
  return {sparsity_path, breakdown_path, fit_path};
}

}  // namespace shadowtune
