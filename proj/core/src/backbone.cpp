// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/backbone.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <memory>
#include <numbers>

#include "shadowtune/error.hpp"

namespace shadowtune {

namespace {

struct DimLayout {
  std::size_t n_pos = 0;     // token-level sinusoid dims start at 0
  std::size_t block_phase = 0;
  std::size_t bos = 0;
  std::size_t topics = 0;
  std::size_t reserved = 0;
};

DimLayout dim_layout(const BackboneConfig& cfg, const ModelDims& dims) {
  DimLayout l;
  l.n_pos = std::max<std::size_t>(2, std::min(cfg.n_pos, dims.d_model / 4) & ~std::size_t{1});
  l.block_phase = l.n_pos;
  l.bos = l.block_phase + 2;
  l.topics = l.bos + 1;
  l.reserved = l.topics + cfg.n_topics;
  return l;
}

Tensor scaled_randn(Rng& rng, Shape shape, double std) {
  if (std <= 0) return Tensor(std::move(shape));
  return randn<float>(rng, std::move(shape), std);
}

void zero_output_cols(Tensor& w, std::size_t n) {
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < n && c < w.cols(); ++c) w(r, c) = 0.0f;
}

BlockWeights<float> empty_block(const ModelDims& dims) {
  const std::size_t d = dims.d_model;
  BlockWeights<float> b;
  for (std::size_t i = 0; i < kLinearSlots; ++i) {
    b.bias[i] = Tensor({static_cast<LinearSlot>(i) == LinearSlot::kUp ? dims.d_ff : d});
  }
  b.ln1_gain = Tensor::full({d}, 1.0f);
  b.ln2_gain = Tensor::full({d}, 1.0f);
  b.ln1_shift = Tensor({d});
  b.ln2_shift = Tensor({d});
  return b;
}

BlockWeights<float> random_block(const ModelDims& dims, Rng& rng) {
  const std::size_t d = dims.d_model, f = dims.d_ff;
  const double s_in = 1.0 / std::sqrt(static_cast<double>(d));
  BlockWeights<float> b = empty_block(dims);
  b.wq = randn<float>(rng, {d, d}, s_in);
  b.wk = randn<float>(rng, {d, d}, s_in);
  b.wv = randn<float>(rng, {d, d}, s_in);
  b.wo = randn<float>(rng, {d, d}, s_in);
  for (auto& bias : b.bias) bias = randn<float>(rng, bias.shape(), 0.1);
  b.mlp = LayeredWeights<float>::from_logical(randn<float>(rng, {d, f}, s_in),
                                              randn<float>(rng, {f, d}, 1.0 / std::sqrt(static_cast<double>(f))));
  return b;
}

BlockWeights<float> structured_block(const ModelDims& dims, const BackboneConfig& cfg, const DimLayout& lay,
                                     std::size_t layer, Rng& rng) {
  const std::size_t d = dims.d_model, f = dims.d_ff, hd = dims.head_dim();
  const double s_in = 1.0 / std::sqrt(static_cast<double>(d));
  BlockWeights<float> b = empty_block(dims);
  b.wq = scaled_randn(rng, {d, d}, cfg.attn_noise * s_in);
  b.wk = scaled_randn(rng, {d, d}, cfg.attn_noise * s_in);
  auto& bq = b.bias[static_cast<std::size_t>(LinearSlot::kQ)];
  for (std::size_t h = 0; h < dims.n_heads; ++h) {
    const std::size_t h0 = h * hd;
    switch ((h + layer) % 4) {
      case 0:  // local
        for (std::size_t i = 0; i < std::min(lay.n_pos, hd); ++i) {
          b.wq(i, h0 + i) = static_cast<float>(cfg.local_gain);
          b.wk(i, h0 + i) = static_cast<float>(cfg.local_gain);
        }
        break;
      case 1:  // strided
        for (std::size_t i = 0; i < std::min<std::size_t>(2, hd); ++i) {
          b.wq(lay.block_phase + i, h0 + i) = static_cast<float>(cfg.stride_gain);
          b.wk(lay.block_phase + i, h0 + i) = static_cast<float>(cfg.stride_gain);
        }
        break;
      case 2:  // global (BOS sink)
        bq[h0] = static_cast<float>(cfg.global_gain);
        b.wk(lay.bos, h0) = static_cast<float>(cfg.global_gain);
        break;
      default:  // content
        for (std::size_t r = 0; r < d; ++r) {
          for (std::size_t c = h0; c < h0 + hd; ++c) {
            b.wq(r, c) = static_cast<float>(rng.normal() * cfg.content_gain * s_in);
            b.wk(r, c) = static_cast<float>(rng.normal() * cfg.content_gain * s_in);
          }
        }
        break;
    }
  }
  b.wv = randn<float>(rng, {d, d}, s_in);
  b.wo = scaled_randn(rng, {d, d}, cfg.attn_out * s_in);
  zero_output_cols(b.wo, lay.reserved);

  const std::size_t n_blk = dims.n_blk();
  Tensor w1 = scaled_randn(rng, {d, f}, cfg.mlp_noise * s_in);
  for (std::size_t blk = 0; blk < n_blk; ++blk) {
    const std::size_t topic = blk % cfg.n_topics;
    const double gain = cfg.mlp_gain * (0.6 + 0.8 * rng.uniform());
    for (std::size_t c = blk * dims.blk_size; c < std::min(f, (blk + 1) * dims.blk_size); ++c) {
      w1(lay.topics + topic, c) = static_cast<float>(gain);
    }
  }
  auto& b1 = b.bias[static_cast<std::size_t>(LinearSlot::kUp)];
  for (auto& v : b1.storage()) v = static_cast<float>(-cfg.mlp_bias);
  Tensor w2 = scaled_randn(rng, {f, d}, cfg.mlp_out / std::sqrt(static_cast<double>(f)));
  zero_output_cols(w2, lay.reserved);
  b.mlp = LayeredWeights<float>::from_logical(w1, w2);
  return b;
}

}  // namespace

const char* backbone_style_name(BackboneStyle s) { return s == BackboneStyle::kRandom ? "random" : "structured"; }

BackboneStyle parse_backbone_style(const std::string& name) {
  if (name == "random") return BackboneStyle::kRandom;
  if (name == "structured") return BackboneStyle::kStructured;
  throw ConfigError("unknown backbone style '" + name + "' (expected random or structured)");
}

std::size_t token_topic(std::int32_t token, std::size_t vocab, std::size_t n_topics) {
  if (token <= kBosToken || static_cast<std::size_t>(token) >= vocab || n_topics == 0) return n_topics;
  return static_cast<std::size_t>(token - 1) % n_topics;
}

std::size_t reserved_dims(const BackboneConfig& cfg, const ModelDims& dims) { return dim_layout(cfg, dims).reserved; }

Tensor positional_table(const ModelDims& dims, const BackboneConfig& cfg) {
  const DimLayout lay = dim_layout(cfg, dims);
  Tensor pe({dims.seq_len, dims.d_model});
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t t = 0; t < dims.seq_len; ++t) {
    for (std::size_t k = 0; 2 * k + 1 < lay.n_pos && 2 * k + 1 < dims.d_model; ++k) {
      // Golden-ratio spaced periods keep the summed kernel free of aliasing peaks.
      const double period = 2.0 * static_cast<double>(dims.attn_blk) * std::pow(std::numbers::phi, static_cast<double>(k));
      pe(t, 2 * k) = static_cast<float>(cfg.pos_amp * std::sin(two_pi * static_cast<double>(t) / period));
      pe(t, 2 * k + 1) = static_cast<float>(cfg.pos_amp * std::cos(two_pi * static_cast<double>(t) / period));
    }
    if (lay.block_phase + 1 < dims.d_model) {
      const double phase = two_pi * static_cast<double>(t / dims.attn_blk) / 4.0;
      pe(t, lay.block_phase) = static_cast<float>(cfg.pos_amp * std::sin(phase));
      pe(t, lay.block_phase + 1) = static_cast<float>(cfg.pos_amp * std::cos(phase));
    }
  }
  return pe;
}

FrozenWeights<float> init_backbone(const ModelDims& dims, const BackboneConfig& cfg, std::uint64_t seed) {
  dims.validate();
  const DimLayout lay = dim_layout(cfg, dims);
  Rng rng(seed);
  FrozenWeights<float> w;
  w.dims = dims;
  w.positional = positional_table(dims, cfg);
  w.lnf_gain = Tensor::full({dims.d_model}, 1.0f);
  w.lnf_shift = Tensor({dims.d_model});
  w.logit_scale = 1.0f / std::sqrt(static_cast<float>(dims.d_model));

  if (cfg.style == BackboneStyle::kRandom) {
    w.embedding = randn<float>(rng, {dims.vocab, dims.d_model}, 1.0);
    for (std::size_t l = 0; l < dims.n_layers; ++l) w.blocks.push_back(random_block(dims, rng));
    return w;
  }

  if (cfg.n_topics == 0) throw ConfigError("structured backbone needs at least one topic");
  if (!(cfg.logit_gain > 0)) throw ConfigError("logit_gain must be positive");
  w.logit_scale = static_cast<float>(cfg.logit_gain / std::sqrt(static_cast<double>(dims.d_model)));
  if (lay.reserved + 4 > dims.d_model) {
    throw ConfigError("structured backbone needs d_model >= " + std::to_string(lay.reserved + 4));
  }
  const std::size_t free = dims.d_model - lay.reserved;
  w.embedding = Tensor({dims.vocab, dims.d_model});
  for (std::size_t v = 0; v < dims.vocab; ++v) {
    auto row = w.embedding.row(v);
    const std::size_t topic = token_topic(static_cast<std::int32_t>(v), dims.vocab, cfg.n_topics);
    if (topic == cfg.n_topics) {
      row[lay.bos] = static_cast<float>(cfg.bos_amp);
    } else {
      row[lay.topics + topic] = static_cast<float>(cfg.topic_amp);
    }
    for (std::size_t i = lay.reserved; i < dims.d_model; ++i) {
      row[i] = static_cast<float>(rng.normal() * cfg.token_noise / std::sqrt(static_cast<double>(free)));
    }
  }
  for (std::size_t l = 0; l < dims.n_layers; ++l) w.blocks.push_back(structured_block(dims, cfg, lay, l, rng));
  return w;
}

std::string frozen_digest(const FrozenWeights<float>& w) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("internal", "SHA-256 init failed");
  auto feed = [&](std::span<const float> data) {
    EVP_DigestUpdate(ctx.get(), data.data(), data.size_bytes());
  };
  const std::uint64_t header[] = {w.dims.d_model, w.dims.n_heads, w.dims.d_ff, w.dims.seq_len,
                                  w.dims.blk_size, w.dims.attn_blk, w.dims.vocab, w.dims.n_layers};
  EVP_DigestUpdate(ctx.get(), header, sizeof(header));
  feed(w.embedding.data());
  feed(w.positional.data());
  for (const auto& b : w.blocks) {
    for (const auto* t : {&b.wq, &b.wk, &b.wv, &b.wo}) feed(t->data());
    for (const auto& bias : b.bias) feed(bias.data());
    feed(b.mlp.w1.storage());
    feed(b.mlp.w2.storage());
    for (const auto* t : {&b.ln1_gain, &b.ln1_shift, &b.ln2_gain, &b.ln2_shift}) feed(t->data());
  }
  feed(w.lnf_gain.data());
  feed(w.lnf_shift.data());
  feed(std::span<const float>(&w.logit_scale, 1));
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 0xF];
  }
  return out;
}

}  // namespace shadowtune
