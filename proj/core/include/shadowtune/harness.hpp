// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Experiment orchestration: run configuration, trace collection, predictor
// training, fine-tuning with per-phase timing, and report generation.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "shadowtune/autograd.hpp"
#include "shadowtune/backbone.hpp"
#include "shadowtune/bench.hpp"
#include "shadowtune/corpus.hpp"
#include "shadowtune/exposer.hpp"
#include "shadowtune/predictor.hpp"

namespace shadowtune {

enum class SparsityMode { kDense, kShadowy, kExposerOracle, kPredicted, kRandom };
const char* sparsity_mode_name(SparsityMode m);
SparsityMode parse_sparsity_mode(const std::string& name);

struct PredictorRunConfig {
  std::string source = "traces";  // "traces" | "synthetic"
  std::size_t n_traces = 8;
  double holdout = 0.25;          // fraction of traces kept for metrics
  PredictorTrainConfig train;
};

struct RunConfig {
  ModelDims dims;
  BackboneConfig backbone;
  std::uint64_t backbone_seed = 1;
  CorpusConfig corpus;
  PeftConfig peft;
  SparsityMode mode = SparsityMode::kDense;
  double theta = 0.0;
  double tau = 0.95;
  double random_density = 0.5;       // active MLP block fraction in random mode
  double random_attn_density = 0.5;  // active fraction of admissible attention blocks in random mode
  AdamConfig optimizer{3e-3, 0.9, 0.999, 1e-8};
  std::size_t steps = 500;
  std::size_t batch_size = 4;
  std::size_t log_every = 0;      // 0: silent
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "out";
  std::optional<std::filesystem::path> predictor_path;  // default: out_dir/predictors.bin
  PredictorRunConfig predictor;
  BenchConfig bench;

  /// Cross-field checks; the corpus is aligned with the model dims first.
  void validate() const;
  std::filesystem::path predictors_file() const;
};

/// Parses a JSON document; unknown keys and ill-typed values raise ConfigError.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical JSON of every field.
std::string run_config_json(const RunConfig& cfg);

/// Value rounded to 9 significant digits, the precision used in every output.
double round9(double v);

/// Training corpus plus the disjoint trace sequences after it.
struct CorpusSplit {
  std::vector<Sequence> train;
  std::vector<Sequence> traces;
};
CorpusSplit make_corpus(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Traces

struct TraceRecord {
  std::vector<Tensor> attn_input;               // per layer, s x d
  std::vector<std::vector<Tensor>> scores;      // per layer, per head, s x s
  std::vector<Tensor> mlp_input;                // per layer, s x d
  std::vector<Tensor> activations;              // per layer, s x d_ff post-ReLU
};

struct TraceSet {
  ModelDims dims;
  std::vector<TraceRecord> records;

  void save(TensorArchive& archive) const;
  static TraceSet load(const TensorArchive& archive);
};

/// Dense forward passes over `sequences` with the given adapters.
TraceSet collect_traces(const FrozenWeights<float>& w, const PeftParams<float>& p,
                        const std::vector<Sequence>& sequences);

std::vector<AttnSample> attn_samples(const TraceSet& traces, std::size_t layer, std::size_t first,
                                     std::size_t last);
std::vector<MlpSample> mlp_samples(const TraceSet& traces, std::size_t layer, std::size_t first, std::size_t last);

// ---------------------------------------------------------------------------
// Predictor training

struct LayerPredictorMetrics {
  double attn_agreement = 0;
  double attn_loss = 0;
  RecallPrecision mlp_token;
  RecallPrecision mlp_sequence;
  double mlp_loss = 0;
};

struct PredictorMetrics {
  std::vector<LayerPredictorMetrics> layers;
  double mean_attn_agreement = 0;
  double mean_token_recall = 0;
  double mean_token_precision = 0;
  double mean_sequence_recall = 0;
  double mean_sequence_precision = 0;

  std::string to_json() const;
};

struct PredictorTrainingResult {
  PredictorSet predictors;
  PredictorMetrics metrics;
};

PredictorTrainingResult train_predictors(const RunConfig& cfg, const TraceSet& traces);
/// Realizable synthetic benchmark sized from the config (one "layer").
PredictorTrainingResult train_synthetic_predictors(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Fine-tuning

/// Random block layout per head and a random subset of MLP blocks, both of
/// fixed size and redrawn on every call. Each head keeps its diagonal blocks
/// so that every query row attends somewhere; the other blocks are drawn
/// from the admissible ones (lower triangle when causal).
class RandomMasks final : public MaskProvider<float> {
 public:
  RandomMasks(const ModelDims& dims, double mlp_density, double attn_density, std::uint64_t seed);
  CombinedLayout attention_layout(std::size_t layer, std::span<const Tensor> normed_inputs) override;
  NeuronBlockMask mlp_mask(std::size_t layer, std::span<const Tensor> normed_inputs) override;

 private:
  ModelDims dims_;
  std::size_t n_active_;
  std::size_t n_attn_active_;
  Rng rng_;
};

/// Forwards to another provider, timing every call and recording densities.
class TimedMasks final : public MaskProvider<float> {
 public:
  explicit TimedMasks(MaskProvider<float>& inner, bool causal) : inner_(inner), causal_(causal) {}
  CombinedLayout attention_layout(std::size_t layer, std::span<const Tensor> normed_inputs) override;
  NeuronBlockMask mlp_mask(std::size_t layer, std::span<const Tensor> normed_inputs) override;

  double seconds() const { return seconds_; }
  /// Mean active fraction of attention blocks (admissible under causality)
  /// and of MLP blocks over all calls.
  double mean_attn_density() const;
  double mean_mlp_density() const;

 private:
  MaskProvider<float>& inner_;
  bool causal_;
  double seconds_ = 0;
  double attn_density_ = 0, mlp_density_ = 0;
  std::size_t attn_calls_ = 0, mlp_calls_ = 0;
};

inline constexpr const char* kPhaseNames[4] = {"forward", "backward", "optimizer_step", "prediction"};

struct StepTiming {
  double phase[4] = {0, 0, 0, 0};  // seconds, in kPhaseNames order
  double total = 0;
};

struct TimingReport {
  std::vector<StepTiming> steps;

  double phase_total(std::size_t phase) const;
  double total() const;
  /// Percentages of the summed phase time; they add up to 100.
  std::vector<double> phase_percent() const;
  /// Phase time over measured step time.
  double attributed_fraction() const;
};

struct FinetuneResult {
  std::vector<double> losses;  // per step
  TimingReport timing;
  double final_loss = 0;       // mean over the last tenth of the steps
  double eval_loss = 0;        // dense forward on the trace sequences
  double attn_density = 1;
  double mlp_density = 1;
  std::size_t trainable_params = 0;
  PeftParams<float> peft;

  std::string report_json(const RunConfig& cfg) const;
};

/// Runs the configured number of steps. Predictors are needed (and only
/// used) in predicted mode. NumericError names the step of a non-finite loss.
FinetuneResult finetune(const RunConfig& cfg, const FrozenWeights<float>& w, const std::vector<Sequence>& train,
                        const std::vector<Sequence>& eval, const PredictorSet* predictors);

std::string loss_curve_csv(const std::string& mode, const std::vector<double>& losses);
std::string step_timing_csv(const TimingReport& timing);
std::string breakdown_csv(const TimingReport& timing);

// ---------------------------------------------------------------------------
// File-level operations behind the CLI subcommands. Each returns the paths
// it wrote.

std::vector<std::filesystem::path> run_gen_corpus(const RunConfig& cfg);
std::vector<std::filesystem::path> run_collect_traces(const RunConfig& cfg);
std::vector<std::filesystem::path> run_train_predictors(const RunConfig& cfg);
std::vector<std::filesystem::path> run_finetune(const RunConfig& cfg);
std::vector<std::filesystem::path> run_bench_op(const RunConfig& cfg);
std::vector<std::filesystem::path> run_report(const RunConfig& cfg);

/// {"error":{"type":...,"message":...}}
std::string error_json(const std::string& type, const std::string& message);

/// Writes text, creating parent directories. IoError on failure.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace shadowtune
