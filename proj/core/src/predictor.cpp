// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/predictor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>

#include "json.hpp"
#include "shadowtune/exposer.hpp"
#include "shadowtune/flops.hpp"

namespace shadowtune {

std::size_t downsampled_rows(std::size_t s) {
  if (s == 0) throw ConfigError("downsample: sequence length must be positive");
  auto g = static_cast<std::size_t>(std::sqrt(static_cast<double>(s)));
  while (g * g < s) ++g;
  while (g > 1 && (g - 1) * (g - 1) >= s) --g;
  return g;
}

std::vector<std::size_t> downsample_indices(std::size_t s) {
  const std::size_t g = downsampled_rows(s);
  std::vector<std::size_t> idx(g);
  for (std::size_t k = 0; k < g; ++k) idx[k] = k * s / g;
  return idx;
}

Tensor downsample(const Tensor& x) {
  require_rank2(x.shape(), "downsample");
  const auto idx = downsample_indices(x.rows());
  return gather_rows(x, idx);
}

std::size_t default_predictor_rank(std::size_t d_model) { return std::max<std::size_t>(4, d_model / 16); }

AttnPredictorParams init_attn_predictor(std::size_t d, std::size_t n_heads, std::size_t rank, Rng& rng) {
  if (rank == 0 || d == 0) throw ConfigError("attention predictor needs positive width and rank");
  AttnPredictorParams p;
  const double sd = 0.3 / std::sqrt(static_cast<double>(d));
  for (std::size_t h = 0; h < n_heads; ++h) {
    p.wq.push_back(randn<float>(rng, {d, rank}, sd));
    p.wk.push_back(randn<float>(rng, {d, rank}, sd));
  }
  return p;
}

MlpPredictorParams init_mlp_predictor(std::size_t d, std::size_t n_blk) {
  return {Tensor({d, n_blk}), Tensor({n_blk})};
}

Tensor approx_attention_scores(const Tensor& x_tilde, const Tensor& wq, const Tensor& wk) {
  const Tensor q = matmul(x_tilde, wq);
  const Tensor k = matmul(x_tilde, wk);
  const std::size_t g = x_tilde.rows(), d = x_tilde.cols(), r = wq.cols();
  count_macs(MacCategory::kPredictorAttn, 2 * g * d * r + g * g * r);
  return matmul_nt(q, k);
}

Tensor binarize_relative(const Tensor& scores, double rel_threshold) {
  if (!std::isfinite(rel_threshold)) throw ConfigError("attention threshold must be finite");
  require_rank2(scores.shape(), "binarize_relative");
  Tensor out(scores.shape());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const auto row = scores.row(i);
    const float peak = *std::max_element(row.begin(), row.end());
    const double cut = peak > 0 ? rel_threshold * peak : peak;
    for (std::size_t j = 0; j < row.size(); ++j) out(i, j) = static_cast<double>(row[j]) >= cut ? 1.0f : 0.0f;
  }
  return out;
}

Tensor upsample_mask(const Tensor& mask, std::size_t grid) {
  require_rank2(mask.shape(), "upsample_mask");
  const std::size_t g = mask.rows();
  Tensor out({grid, grid});
  for (std::size_t a = 0; a < grid; ++a) {
    const std::size_t sa = std::min(g - 1, (2 * a + 1) * g / (2 * grid));
    for (std::size_t b = 0; b < grid; ++b) {
      const std::size_t sb = std::min(g - 1, (2 * b + 1) * g / (2 * grid));
      out(a, b) = mask(sa, sb);
    }
  }
  return out;
}

namespace {

std::size_t categorize_binary(const Tensor& binary, double tau_pred, const PatternPool& pool) {
  const Tensor grid = upsample_mask(binary, pool.grid());
  return select_pattern(grid.cast<double>(), pool, tau_pred);
}

void or_into(Tensor& acc, const Tensor& binary) {
  if (acc.empty()) {
    acc = binary;
    return;
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = std::max(acc[i], binary[i]);
}

}  // namespace

HeadPatternAssignment categorize_predicted_scores(const std::vector<std::vector<Tensor>>& scores,
                                                  double rel_threshold, double tau_pred, const PatternPool& pool) {
  if (scores.empty()) throw ConfigError("attention prediction needs at least one batch item");
  const std::size_t n_heads = scores.front().size();
  HeadPatternAssignment out;
  for (std::size_t h = 0; h < n_heads; ++h) {
    Tensor acc;
    for (const auto& item : scores) or_into(acc, binarize_relative(item.at(h), rel_threshold));
    out.pattern_ids.push_back(categorize_binary(acc, tau_pred, pool));
  }
  return out;
}

HeadPatternAssignment predict_attention_patterns(std::span<const Tensor> batch, const AttnPredictorParams& params,
                                                 double rel_threshold, double tau_pred, const PatternPool& pool) {
  std::vector<std::vector<Tensor>> scores;
  for (const auto& x : batch) {
    const Tensor xt = downsample(x);
    auto& item = scores.emplace_back();
    for (std::size_t h = 0; h < params.n_heads(); ++h)
      item.push_back(approx_attention_scores(xt, params.wq[h], params.wk[h]));
  }
  return categorize_predicted_scores(scores, rel_threshold, tau_pred, pool);
}

Tensor approx_mlp_scores(const Tensor& x, const MlpPredictorParams& params) {
  Tensor s = matmul(x, params.wa);
  if (!params.bias.empty()) add_row_bias(s, params.bias);
  count_macs(MacCategory::kPredictorMlp, x.rows() * x.cols() * params.wa.cols());
  return s;
}

NeuronBlockMask predict_mlp_mask(std::span<const Tensor> scores, double threshold) {
  if (scores.empty()) throw ConfigError("mlp prediction needs at least one batch item");
  const std::size_t n_blk = scores.front().cols();
  NeuronBlockMask mask(n_blk, false);
  for (const auto& s : scores) {
    if (s.cols() != n_blk) throw ShapeError("mlp prediction: inconsistent block counts");
    for (std::size_t t = 0; t < s.rows(); ++t) {
      const auto row = s.row(t);
      for (std::size_t b = 0; b < n_blk; ++b)
        if (static_cast<double>(row[b]) > threshold) mask.set(b, true);
    }
    count_macs(MacCategory::kPredictorReduce, s.rows() * ((n_blk + 63) / 64));
  }
  return mask;
}

RecallPrecision eval_recall_precision(const NeuronBlockMask& predicted, const NeuronBlockMask& truth) {
  if (predicted.size() != truth.size()) throw ShapeError("recall/precision: mask length mismatch");
  std::size_t both = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) both += predicted[i] && truth[i];
  RecallPrecision rp;
  if (truth.active_count() > 0) rp.recall = static_cast<double>(both) / static_cast<double>(truth.active_count());
  if (predicted.active_count() > 0)
    rp.precision = static_cast<double>(both) / static_cast<double>(predicted.active_count());
  return rp;
}

PredictorCost predictor_cost_flops(std::size_t s, std::size_t d, std::size_t r) {
  if (s == 0 || d == 0 || r == 0) throw ConfigError("predictor_cost_flops: arguments must be positive");
  const std::uint64_t rs = downsampled_rows(s);
  return {2 * rs * d * r + static_cast<std::uint64_t>(s) * r, static_cast<std::uint64_t>(s) * d * r + s};
}

void PredictorTrainConfig::validate() const {
  if (!(noise_std >= 0)) throw ConfigError("noise_std must be >= 0");
  if (!(recall_weight >= 1)) throw ConfigError("recall_weight must be >= 1");
  if (!(lr > 0)) throw ConfigError("predictor learning rate must be positive");
  if (!(tau_pred > 0 && tau_pred <= 1)) throw ConfigError("tau_pred must lie in (0, 1]");
  if (!std::isfinite(attn_threshold) || !std::isfinite(mlp_threshold)) throw ConfigError("thresholds must be finite");
}

Tensor pool_scores(const Tensor& scores) {
  require_rank2(scores.shape(), "pool_scores");
  const std::size_t s = scores.rows();
  const auto idx = downsample_indices(s);
  const std::size_t g = idx.size();
  std::vector<std::size_t> tile(s);
  for (std::size_t k = 0; k < g; ++k) {
    const std::size_t end = k + 1 < g ? idx[k + 1] : s;
    for (std::size_t i = idx[k]; i < end; ++i) tile[i] = k;
  }
  BasicTensor<double> acc({g, g});
  std::vector<double> rows(g, 0.0);
  for (std::size_t i = 0; i < s; ++i) {
    rows[tile[i]] += 1;
    const auto r = scores.row(i);
    for (std::size_t j = 0; j < s; ++j) acc(tile[i], tile[j]) += r[j];
  }
  Tensor out({g, g});
  for (std::size_t a = 0; a < g; ++a)
    for (std::size_t b = 0; b < g; ++b) out(a, b) = static_cast<float>(acc(a, b) / rows[a]);
  return out;
}

Tensor block_labels(const Tensor& activations, std::size_t blk_size) {
  require_rank2(activations.shape(), "block_labels");
  const std::size_t n_blk = n_neuron_blocks(activations.cols(), blk_size);
  Tensor out({activations.rows(), n_blk});
  for (std::size_t t = 0; t < activations.rows(); ++t) {
    const auto row = activations.row(t);
    for (std::size_t c = 0; c < row.size(); ++c)
      if (row[c] > 0) out(t, c / blk_size) = 1;
  }
  return out;
}

namespace {

struct AdamBuffer {
  Tensor m, v;
};

void adam_update(Tensor& param, const Tensor& grad, AdamBuffer& buf, std::size_t step, double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (buf.m.empty()) {
    buf.m = Tensor(param.shape());
    buf.v = Tensor(param.shape());
  }
  const double c1 = 1 - std::pow(b1, static_cast<double>(step));
  const double c2 = 1 - std::pow(b2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = b1 * buf.m[i] + (1 - b1) * g;
    const double v = b2 * buf.v[i] + (1 - b2) * g * g;
    buf.m[i] = static_cast<float>(m);
    buf.v[i] = static_cast<float>(v);
    param[i] -= static_cast<float>(lr * (m / c1) / (std::sqrt(v / c2) + eps));
  }
}

Tensor with_noise(const Tensor& x, double sd, Rng& rng) {
  if (sd <= 0) return x;
  Tensor out = x;
  for (auto& v : out.storage()) v += static_cast<float>(rng.normal() * sd);
  return out;
}

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Mean squared error of one head and, when `grads` is set, its gradients.
double attn_head_loss(const Tensor& xt, const Tensor& target, const Tensor& wq, const Tensor& wk, Tensor* gq,
                      Tensor* gk) {
  const Tensor q = matmul(xt, wq), k = matmul(xt, wk);
  const Tensor s = matmul_nt(q, k);
  const double n = static_cast<double>(s.size());
  Tensor ds(s.shape());
  double loss = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double r = static_cast<double>(s[i]) - target[i];
    loss += r * r;
    ds[i] = static_cast<float>(2 * r / n);
  }
  if (gq != nullptr) {
    *gq = matmul_tn(xt, matmul(ds, k));
    *gk = matmul_tn(xt, matmul_tn(ds, q));
  }
  return loss / n;
}

double mlp_loss(const Tensor& x, const Tensor& labels, const MlpPredictorParams& p, double lambda, Tensor* gw,
                Tensor* gb) {
  Tensor z = matmul(x, p.wa);
  add_row_bias(z, p.bias);
  const double n = static_cast<double>(z.size());
  double loss = 0;
  Tensor dz(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double zi = z[i], y = labels[i];
    loss += lambda * y * softplus(-zi) + (1 - y) * softplus(zi);
    const double sg = sigmoid(zi);
    dz[i] = static_cast<float>((lambda * y * (sg - 1) + (1 - y) * sg) / n);
  }
  if (gw != nullptr) {
    *gw = matmul_tn(x, dz);
    *gb = column_sums(dz);
  }
  return loss / n;
}

void check_finite(double loss, const char* what, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw NumericError(std::string(what) + " training diverged at epoch " + std::to_string(epoch));
  }
}

}  // namespace

double attn_distill_loss(const AttnPredictorParams& params, std::span<const AttnSample> samples) {
  double total = 0;
  std::size_t n = 0;
  for (const auto& s : samples) {
    const Tensor xt = downsample(s.x);
    for (std::size_t h = 0; h < params.n_heads(); ++h, ++n)
      total += attn_head_loss(xt, s.targets.at(h), params.wq[h], params.wk[h], nullptr, nullptr);
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

TrainResult train_attn_predictor(AttnPredictorParams& params, std::span<const AttnSample> samples,
                                 const PredictorTrainConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw ConfigError("train_attn_predictor: no traces");
  TrainResult result;
  result.initial_loss = attn_distill_loss(params, samples);
  result.final_loss = result.initial_loss;
  if (cfg.epochs == 0) return result;
  Rng rng(cfg.seed);
  std::vector<AdamBuffer> bq(params.n_heads()), bk(params.n_heads());
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Tensor> clean(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) clean[i] = downsample(samples[i].x);
  std::size_t step = 0;
  Tensor gq, gk;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double epoch_loss = 0;
    for (std::size_t i : order) {
      const Tensor xt = with_noise(clean[i], cfg.noise_std, rng);
      ++step;
      for (std::size_t h = 0; h < params.n_heads(); ++h) {
        epoch_loss += attn_head_loss(xt, samples[i].targets.at(h), params.wq[h], params.wk[h], &gq, &gk);
        adam_update(params.wq[h], gq, bq[h], step, cfg.lr);
        adam_update(params.wk[h], gk, bk[h], step, cfg.lr);
      }
    }
    check_finite(epoch_loss, "attention predictor", epoch);
  }
  result.final_loss = attn_distill_loss(params, samples);
  check_finite(result.final_loss, "attention predictor", cfg.epochs);
  return result;
}

double mlp_weighted_loss(const MlpPredictorParams& params, std::span<const MlpSample> samples, double recall_weight) {
  double total = 0;
  for (const auto& s : samples) total += mlp_loss(s.x, s.labels, params, recall_weight, nullptr, nullptr);
  return samples.empty() ? 0.0 : total / static_cast<double>(samples.size());
}

TrainResult train_mlp_predictor(MlpPredictorParams& params, std::span<const MlpSample> samples,
                                const PredictorTrainConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw ConfigError("train_mlp_predictor: no traces");
  TrainResult result;
  result.initial_loss = mlp_weighted_loss(params, samples, cfg.recall_weight);
  result.final_loss = result.initial_loss;
  if (cfg.epochs == 0) return result;
  // Warm-start the block biases at the weighted log-odds of the base rate.
  const std::size_t n_blk = params.wa.cols();
  std::vector<double> active(n_blk, 0.0);
  double rows = 0;
  for (const auto& s : samples) {
    rows += static_cast<double>(s.labels.rows());
    for (std::size_t t = 0; t < s.labels.rows(); ++t)
      for (std::size_t b = 0; b < n_blk; ++b) active[b] += s.labels(t, b);
  }
  for (std::size_t b = 0; b < n_blk; ++b) {
    const double p = std::clamp(active[b] / rows, 1e-4, 1 - 1e-4);
    params.bias[b] = static_cast<float>(std::log(cfg.recall_weight * p / (1 - p)));
  }
  Rng rng(cfg.seed);
  AdamBuffer bw, bb;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  Tensor gw, gb;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double epoch_loss = 0;
    for (std::size_t i : order) {
      const Tensor x = with_noise(samples[i].x, cfg.noise_std, rng);
      epoch_loss += mlp_loss(x, samples[i].labels, params, cfg.recall_weight, &gw, &gb);
      ++step;
      adam_update(params.wa, gw, bw, step, cfg.lr);
      adam_update(params.bias, gb, bb, step, cfg.lr);
    }
    check_finite(epoch_loss, "mlp predictor", epoch);
  }
  result.final_loss = mlp_weighted_loss(params, samples, cfg.recall_weight);
  check_finite(result.final_loss, "mlp predictor", cfg.epochs);
  return result;
}

double attn_pattern_agreement(const AttnPredictorParams& params, std::span<const AttnSample> samples,
                              double rel_threshold, double tau_pred, const PatternPool& pool) {
  std::size_t agree = 0, total = 0;
  for (const auto& s : samples) {
    const Tensor xt = downsample(s.x);
    for (std::size_t h = 0; h < params.n_heads(); ++h, ++total) {
      const Tensor pred = approx_attention_scores(xt, params.wq[h], params.wk[h]);
      const auto a = categorize_binary(binarize_relative(pred, rel_threshold), tau_pred, pool);
      const auto b = categorize_binary(binarize_relative(s.targets.at(h), rel_threshold), tau_pred, pool);
      agree += a == b;
    }
  }
  return total ? static_cast<double>(agree) / static_cast<double>(total) : 1.0;
}

RecallPrecision mlp_sequence_metrics(const MlpPredictorParams& params, std::span<const MlpSample> samples,
                                     double threshold) {
  RecallPrecision mean{0, 0};
  for (const auto& s : samples) {
    const Tensor scores = approx_mlp_scores(s.x, params);
    const auto pred = predict_mlp_mask(std::span<const Tensor>(&scores, 1), threshold);
    const auto truth = predict_mlp_mask(std::span<const Tensor>(&s.labels, 1), 0.5);
    const auto rp = eval_recall_precision(pred, truth);
    mean.recall += rp.recall;
    mean.precision += rp.precision;
  }
  if (!samples.empty()) {
    mean.recall /= static_cast<double>(samples.size());
    mean.precision /= static_cast<double>(samples.size());
  }
  return mean;
}

RecallPrecision mlp_token_metrics(const MlpPredictorParams& params, std::span<const MlpSample> samples,
                                  double threshold) {
  double tp = 0, fp = 0, fn = 0;
  for (const auto& s : samples) {
    const Tensor scores = approx_mlp_scores(s.x, params);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool p = static_cast<double>(scores[i]) > threshold, y = s.labels[i] > 0.5f;
      tp += p && y;
      fp += p && !y;
      fn += !p && y;
    }
  }
  return {tp + fn > 0 ? tp / (tp + fn) : 1.0, tp + fp > 0 ? tp / (tp + fp) : 1.0};
}

void PredictorSet::save(TensorArchive& archive) const {
  nlohmann::json meta;
  meta["kind"] = "predictors";
  meta["n_layers"] = layers.size();
  meta["attn_threshold"] = attn_threshold;
  meta["mlp_threshold"] = mlp_threshold;
  meta["tau_pred"] = tau_pred;
  archive.metadata = meta.dump();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    for (std::size_t h = 0; h < layers[l].attn.n_heads(); ++h) {
      archive.put(p + "attn.wq." + std::to_string(h), layers[l].attn.wq[h]);
      archive.put(p + "attn.wk." + std::to_string(h), layers[l].attn.wk[h]);
    }
    archive.put(p + "mlp.wa", layers[l].mlp.wa);
    archive.put(p + "mlp.bias", layers[l].mlp.bias);
  }
}

PredictorSet PredictorSet::load(const TensorArchive& archive) {
  const auto meta = nlohmann::json::parse(archive.metadata, nullptr, false);
  if (meta.is_discarded() || meta.value("kind", "") != "predictors") throw IoError("not a predictor archive");
  PredictorSet set;
  set.attn_threshold = meta.at("attn_threshold").get<double>();
  set.mlp_threshold = meta.at("mlp_threshold").get<double>();
  set.tau_pred = meta.at("tau_pred").get<double>();
  const auto n_layers = meta.at("n_layers").get<std::size_t>();
  for (std::size_t l = 0; l < n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerPredictor lp;
    for (std::size_t h = 0; archive.contains(p + "attn.wq." + std::to_string(h)); ++h) {
      lp.attn.wq.push_back(archive.get(p + "attn.wq." + std::to_string(h)));
      lp.attn.wk.push_back(archive.get(p + "attn.wk." + std::to_string(h)));
    }
    lp.mlp.wa = archive.get(p + "mlp.wa");
    lp.mlp.bias = archive.get(p + "mlp.bias");
    set.layers.push_back(std::move(lp));
  }
  return set;
}

PredictedMasks::PredictedMasks(const PredictorSet& predictors, const PatternPool& pool)
    : predictors_(predictors), pool_(pool) {}

CombinedLayout PredictedMasks::attention_layout(std::size_t layer, std::span<const Tensor> normed_inputs) {
  const auto start = std::chrono::steady_clock::now();
  const auto assignment = predict_attention_patterns(normed_inputs, predictors_.layers.at(layer).attn,
                                                     predictors_.attn_threshold, predictors_.tau_pred, pool_);
  auto layout = combine_layouts(assignment, pool_);
  seconds_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return layout;
}

NeuronBlockMask PredictedMasks::mlp_mask(std::size_t layer, std::span<const Tensor> normed_inputs) {
  const auto start = std::chrono::steady_clock::now();
  std::vector<Tensor> scores;
  scores.reserve(normed_inputs.size());
  for (const auto& x : normed_inputs) scores.push_back(approx_mlp_scores(x, predictors_.layers.at(layer).mlp));
  auto mask = predict_mlp_mask(scores, predictors_.mlp_threshold);
  seconds_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return mask;
}

SyntheticAttnBenchmark make_realizable_attn_benchmark(std::size_t s, std::size_t d, std::size_t n_heads,
                                                      std::size_t rank, std::size_t n_train, std::size_t n_test,
                                                      std::uint64_t seed) {
  // Inputs carry sinusoidal position features at a few periods (in
  // downsampled rows); each head's teacher reads two of them, so its scores
  // sum two shifted cosines of the row offset: rank 4 <= rank.
  if (rank < 4) throw ConfigError("realizable attention benchmark needs rank >= 4");
  const std::vector<double> periods = {2, 3, 4, 6, 8, 16, 32};
  if (d < 2 * periods.size()) throw ConfigError("realizable attention benchmark needs d >= 14");
  const std::size_t g = downsampled_rows(s);
  const double stride = static_cast<double>(s) / static_cast<double>(g);
  Rng rng(seed);
  struct Teacher {
    Tensor wq, wk;
  };
  std::vector<Teacher> teachers;
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t a = rng.index(periods.size());
    std::size_t b = rng.index(periods.size() - 1);
    if (b >= a) ++b;
    Teacher t{Tensor({d, rank}), Tensor({d, rank})};
    const double wa = 0.5 + rng.uniform(), wb = 0.5 + rng.uniform();
    const std::size_t dims[4] = {2 * a, 2 * a + 1, 2 * b, 2 * b + 1};
    const double weights[4] = {wa, wa, wb, wb};
    for (std::size_t c = 0; c < 4; ++c) {
      t.wq(dims[c], c) = static_cast<float>(std::sqrt(weights[c]));
      t.wk(dims[c], c) = static_cast<float>(std::sqrt(weights[c]));
    }
    teachers.push_back(std::move(t));
  }
  auto make = [&](std::size_t count) {
    std::vector<AttnSample> out;
    for (std::size_t n = 0; n < count; ++n) {
      Tensor x = randn<float>(rng, {s, d}, 0.5);
      const double phase = rng.uniform() * 64;
      for (std::size_t k = 0; k < periods.size(); ++k) {
        const double amp = 0.5 + rng.uniform();
        const double omega = 2 * std::numbers::pi / (periods[k] * stride);
        for (std::size_t t = 0; t < s; ++t) {
          x(t, 2 * k) = static_cast<float>(amp * std::cos(omega * (static_cast<double>(t) + phase)));
          x(t, 2 * k + 1) = static_cast<float>(amp * std::sin(omega * (static_cast<double>(t) + phase)));
        }
      }
      AttnSample sample{x, {}};
      const Tensor xt = downsample(x);
      for (const auto& t : teachers) sample.targets.push_back(matmul_nt(matmul(xt, t.wq), matmul(xt, t.wk)));
      out.push_back(std::move(sample));
    }
    return out;
  };
  SyntheticAttnBenchmark bench;
  bench.train = make(n_train);
  bench.test = make(n_test);
  return bench;
}

SyntheticMlpBenchmark make_realizable_mlp_benchmark(std::size_t s, std::size_t d, std::size_t n_blk,
                                                    std::size_t n_train, std::size_t n_test, std::uint64_t seed) {
  // Each sequence draws its tokens around one of a few cluster centres; a
  // linear teacher with negative offsets decides per-token block activity,
  // so whole blocks stay silent for a sequence.
  Rng rng(seed);
  const std::size_t n_clusters = 4;
  std::vector<Tensor> centres;
  for (std::size_t c = 0; c < n_clusters; ++c) centres.push_back(randn<float>(rng, {d}, 1.0));
  SyntheticMlpBenchmark bench;
  bench.teacher_w = randn<float>(rng, {d, n_blk}, 1.0 / std::sqrt(static_cast<double>(d)));
  bench.teacher_b = Tensor({n_blk});
  for (auto& v : bench.teacher_b.storage()) v = static_cast<float>(-1.0 - 1.0 * rng.uniform());
  auto make = [&](std::size_t count) {
    std::vector<MlpSample> out;
    for (std::size_t n = 0; n < count; ++n) {
      const auto& mu = centres[rng.index(n_clusters)];
      Tensor x = randn<float>(rng, {s, d}, 0.5);
      for (std::size_t t = 0; t < s; ++t)
        for (std::size_t i = 0; i < d; ++i) x(t, i) += mu[i];
      Tensor labels = bench.labels_for(x);
      out.push_back({std::move(x), std::move(labels)});
    }
    return out;
  };
  bench.train = make(n_train);
  bench.test = make(n_test);
  return bench;
}

Tensor SyntheticMlpBenchmark::labels_for(const Tensor& x) const {
  Tensor z = matmul(x, teacher_w);
  add_row_bias(z, teacher_b);
  for (auto& v : z.storage()) v = v > 0 ? 1.0f : 0.0f;
  return z;
}

}  // namespace shadowtune
