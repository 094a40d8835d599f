// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/sparse_ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <regex>
#include <thread>

#include "shadowtune/flops.hpp"

namespace shadowtune {

NeuronBlockMask& NeuronBlockMask::operator|=(const NeuronBlockMask& other) {
  if (other.size() != size()) throw ShapeError("NeuronBlockMask OR: length mismatch");
  for (std::size_t i = 0; i < bits_.size(); ++i) bits_[i] |= other.bits_[i];
  return *this;
}

// ---------------------------------------------------------------------------
// Patterns

bool AtomicPattern::contains(std::size_t row, std::size_t col) const {
  const std::size_t dist = row > col ? row - col : col - row;
  switch (kind) {
    case PatternKind::kDense:
      return true;
    case PatternKind::kBandedLocal:
      return dist <= param;
    case PatternKind::kGlobalRowCol:
      return row < param || col < param || row == col;
    case PatternKind::kBlockDiagonal:
      return row == col;
    case PatternKind::kStrided:
      return dist % param == 0;
    case PatternKind::kCausalLocal:
      return row >= col && row - col <= param;
  }
  return false;
}

std::string AtomicPattern::name() const {
  switch (kind) {
    case PatternKind::kDense:
      return "dense";
    case PatternKind::kBandedLocal:
      return "banded_local(" + std::to_string(param) + ")";
    case PatternKind::kGlobalRowCol:
      return "global_row_col(" + std::to_string(param) + ")";
    case PatternKind::kBlockDiagonal:
      return "block_diagonal";
    case PatternKind::kStrided:
      return "strided(" + std::to_string(param) + ")";
    case PatternKind::kCausalLocal:
      return "causal_local(" + std::to_string(param) + ")";
  }
  return "unknown";
}

AtomicPattern AtomicPattern::parse(const std::string& text) {
  if (text == "dense") return {PatternKind::kDense, 0};
  if (text == "block_diagonal") return {PatternKind::kBlockDiagonal, 0};
  static const std::regex with_param(R"((banded_local|global_row_col|strided|causal_local)\((\d+)\))");
  std::smatch m;
  if (!std::regex_match(text, m, with_param)) throw ConfigError("unknown atomic pattern '" + text + "'");
  const std::size_t param = std::stoul(m[2].str());
  const std::string kind = m[1].str();
  if (kind == "banded_local") return {PatternKind::kBandedLocal, param};
  if (kind == "global_row_col") return {PatternKind::kGlobalRowCol, param};
  if (kind == "strided") return {PatternKind::kStrided, param};
  return {PatternKind::kCausalLocal, param};
}

PatternPool::PatternPool(std::size_t grid, std::vector<LayoutTable> tables)
    : grid_(grid), tables_(std::move(tables)) {}

const LayoutTable& PatternPool::at(std::size_t id) const {
  if (id >= tables_.size()) {
    throw ConfigError("pattern id " + std::to_string(id) + " is not in the pool (size " +
                      std::to_string(tables_.size()) + ")");
  }
  return tables_[id];
}

std::size_t PatternPool::find(const AtomicPattern& pattern) const {
  for (const auto& t : tables_)
    if (t.pattern == pattern) return t.id;
  return tables_.size();
}

std::vector<AtomicPattern> default_patterns(std::size_t grid) {
  const std::vector<AtomicPattern> candidates = {
      {PatternKind::kDense, 0},        {PatternKind::kBlockDiagonal, 0}, {PatternKind::kCausalLocal, 1},
      {PatternKind::kBandedLocal, 1},  {PatternKind::kCausalLocal, 2},   {PatternKind::kBandedLocal, 2},
      {PatternKind::kCausalLocal, 4},  {PatternKind::kStrided, 2},       {PatternKind::kStrided, 4},
      {PatternKind::kGlobalRowCol, 1}, {PatternKind::kGlobalRowCol, 2},
  };
  std::vector<AtomicPattern> out;
  for (const auto& p : candidates) {
    const bool needs_param = p.kind != PatternKind::kDense && p.kind != PatternKind::kBlockDiagonal;
    // A parameter >= grid degenerates into another pattern; skip those.
    if (needs_param && p.param >= grid) continue;
    out.push_back(p);
  }
  return out;
}

void validate_blocks(std::span<const BlockIndex> blocks, std::size_t grid) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i].row >= grid || blocks[i].col >= grid) {
      throw ConfigError("block (" + std::to_string(blocks[i].row) + "," + std::to_string(blocks[i].col) +
                        ") outside a " + std::to_string(grid) + "x" + std::to_string(grid) + " grid");
    }
    if (i > 0 && !(blocks[i - 1] < blocks[i])) throw ConfigError("block list not sorted and unique");
  }
}

PatternPool build_pool(std::size_t grid, std::span<const AtomicPattern> patterns) {
  if (grid == 0) throw ConfigError("build_pool: grid must be at least 1");
  std::vector<AtomicPattern> ordered(patterns.begin(), patterns.end());
  if (std::find(ordered.begin(), ordered.end(), AtomicPattern{}) == ordered.end()) {
    ordered.insert(ordered.begin(), AtomicPattern{});
  } else if (!(ordered.front() == AtomicPattern{})) {
    std::erase(ordered, AtomicPattern{});
    ordered.insert(ordered.begin(), AtomicPattern{});
  }
  std::vector<LayoutTable> tables;
  for (const auto& p : ordered) {
    switch (p.kind) {
      case PatternKind::kBandedLocal:
      case PatternKind::kCausalLocal:
      case PatternKind::kGlobalRowCol:
        if (p.param > grid) {
          throw ConfigError("pattern " + p.name() + " exceeds a grid of " + std::to_string(grid));
        }
        break;
      case PatternKind::kStrided:
        if (p.param == 0 || p.param > grid) {
          throw ConfigError("pattern " + p.name() + " needs a period in [1, " + std::to_string(grid) + "]");
        }
        break;
      default:
        break;
    }
    LayoutTable t;
    t.id = tables.size();
    t.pattern = p;
    t.grid = grid;
    for (std::uint32_t r = 0; r < grid; ++r)
      for (std::uint32_t c = 0; c < grid; ++c)
        if (p.contains(r, c)) t.blocks.push_back({r, c});
    tables.push_back(std::move(t));
  }
  return PatternPool(grid, std::move(tables));
}

// ---------------------------------------------------------------------------
// Combined layouts

CombinedLayout::CombinedLayout(std::size_t grid, const std::vector<std::vector<BlockIndex>>& per_head)
    : grid_(grid) {
  offsets_.push_back(0);
  for (const auto& blocks : per_head) {
    validate_blocks(blocks, grid);
    blocks_.insert(blocks_.end(), blocks.begin(), blocks.end());
    offsets_.push_back(blocks_.size());
  }
}

std::span<const BlockIndex> CombinedLayout::head_blocks(std::size_t h) const {
  if (h + 1 >= offsets_.size()) throw ConfigError("head index out of range in combined layout");
  return std::span<const BlockIndex>(blocks_).subspan(offsets_[h], offsets_[h + 1] - offsets_[h]);
}

std::vector<HeadBlock> CombinedLayout::entries() const {
  std::vector<HeadBlock> out;
  out.reserve(blocks_.size());
  for (std::size_t h = 0; h + 1 < offsets_.size(); ++h)
    for (std::size_t i = offsets_[h]; i < offsets_[h + 1]; ++i)
      out.push_back({static_cast<std::uint32_t>(h), blocks_[i].row, blocks_[i].col});
  return out;
}

CombinedLayout combine_layouts(const HeadPatternAssignment& assignment, const PatternPool& pool) {
  CombinedLayout out;
  out.grid_ = pool.grid();
  out.offsets_.reserve(assignment.n_heads() + 1);
  out.offsets_.push_back(0);
  for (std::size_t id : assignment.pattern_ids) {
    const LayoutTable& t = pool.at(id);
    out.blocks_.insert(out.blocks_.end(), t.blocks.begin(), t.blocks.end());
    out.offsets_.push_back(out.blocks_.size());
  }
  return out;
}

CombinedLayout uniform_layout(std::size_t n_heads, std::size_t grid, std::vector<BlockIndex> blocks) {
  std::sort(blocks.begin(), blocks.end());
  blocks.erase(std::unique(blocks.begin(), blocks.end()), blocks.end());
  return CombinedLayout(grid, std::vector<std::vector<BlockIndex>>(n_heads, blocks));
}

CombinedLayout causal_restrict(const CombinedLayout& layout) {
  std::vector<std::vector<BlockIndex>> per_head(layout.n_heads());
  for (std::size_t h = 0; h < layout.n_heads(); ++h)
    for (const auto& b : layout.head_blocks(h))
      if (b.col <= b.row) per_head[h].push_back(b);
  return CombinedLayout(layout.grid(), per_head);
}

double layout_sparsity(std::span<const BlockIndex> blocks, std::size_t grid) {
  const double total = static_cast<double>(grid * grid);
  return total == 0 ? 0.0 : 1.0 - static_cast<double>(blocks.size()) / total;
}

// ---------------------------------------------------------------------------
// Block-sparse attention

namespace {

/// Runs fn(begin, end) over [0, n) split into contiguous chunks.
void run_partitioned(std::size_t n, std::size_t workers, const std::function<void(std::size_t, std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    fn(0, n);
    return;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk, e = std::min(n, b + chunk);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
}

template <typename T>
void require_token_rows(const BasicTensor<T>& x, std::size_t dim, const char* op) {
  require_rank2(x.shape(), op);
  if (x.rows() != dim) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(dim) + " token rows, got " +
                     shape_string(x.shape()));
  }
}

}  // namespace

template <typename T>
BlockSparseMatrix<T>::BlockSparseMatrix(std::size_t grid, std::size_t blk, std::vector<BlockIndex> blocks)
    : grid_(grid), blk_(blk), blocks_(std::move(blocks)) {
  if (blk_ == 0) throw ConfigError("block size must be positive");
  validate_blocks(blocks_, grid_);
  row_start_.assign(grid_ + 1, 0);
  for (const auto& b : blocks_) ++row_start_[b.row + 1];
  for (std::size_t r = 0; r < grid_; ++r) row_start_[r + 1] += row_start_[r];
  values_.assign(blocks_.size() * blk_ * blk_, T(0));
}

template <typename T>
BasicTensor<T> BlockSparseMatrix<T>::to_dense(T fill) const {
  BasicTensor<T> out = BasicTensor<T>::full({dim(), dim()}, fill);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto vals = block(i);
    for (std::size_t a = 0; a < blk_; ++a)
      for (std::size_t b = 0; b < blk_; ++b)
        out(blocks_[i].row * blk_ + a, blocks_[i].col * blk_ + b) = vals[a * blk_ + b];
  }
  return out;
}

template <typename T>
BlockSparseMatrix<T> sdd(const BasicTensor<T>& q, const BasicTensor<T>& k, std::span<const BlockIndex> blocks,
                         std::size_t blk, T scale, std::size_t workers) {
  require_rank2(q.shape(), "sdd");
  if (blk == 0 || q.rows() % blk != 0) throw ShapeError("sdd: token count not divisible by block size");
  const std::size_t grid = q.rows() / blk;
  require_token_rows(k, q.rows(), "sdd");
  if (k.cols() != q.cols()) throw ShapeError("sdd: Q and K head dims differ");
  BlockSparseMatrix<T> out(grid, blk, std::vector<BlockIndex>(blocks.begin(), blocks.end()));
  const std::size_t hd = q.cols();
  run_partitioned(grid, workers, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = out.row_begin(r0); i < out.row_begin(r1); ++i) {
      const auto b = out.blocks()[i];
      auto vals = out.block(i);
      for (std::size_t a = 0; a < blk; ++a) {
        const T* qrow = q.row(b.row * blk + a).data();
        for (std::size_t c = 0; c < blk; ++c) vals[a * blk + c] = scale * dot(qrow, k.row(b.col * blk + c).data(), hd);
      }
    }
  });
  count_macs(MacCategory::kAttentionScores, blocks.size() * blk * blk * hd);
  return out;
}

template <typename T>
BlockSparseMatrix<T> sparse_softmax(const BlockSparseMatrix<T>& scores, bool causal) {
  BlockSparseMatrix<T> p = scores;
  const std::size_t blk = p.blk();
  constexpr T neg_inf = -std::numeric_limits<T>::infinity();
  for (std::size_t br = 0; br < p.grid(); ++br) {
    const std::size_t i0 = p.row_begin(br), i1 = p.row_begin(br + 1);
    for (std::size_t a = 0; a < blk; ++a) {
      const std::size_t token = br * blk + a;
      T mx = neg_inf;
      for (std::size_t i = i0; i < i1; ++i) {
        const std::size_t col0 = p.blocks()[i].col * blk;
        auto row = p.block(i).subspan(a * blk, blk);
        for (std::size_t c = 0; c < blk; ++c)
          if (!causal || col0 + c <= token) mx = std::max(mx, row[c]);
      }
      if (mx == neg_inf) {
        throw ConfigError("sparse_softmax: token row " + std::to_string(token) + " has no active entries");
      }
      T total = 0;
      for (std::size_t i = i0; i < i1; ++i) {
        const std::size_t col0 = p.blocks()[i].col * blk;
        auto row = p.block(i).subspan(a * blk, blk);
        for (std::size_t c = 0; c < blk; ++c) {
          row[c] = (!causal || col0 + c <= token) ? std::exp(row[c] - mx) : T(0);
          total += row[c];
        }
      }
      const T inv = T(1) / total;
      for (std::size_t i = i0; i < i1; ++i) {
        auto row = p.block(i).subspan(a * blk, blk);
        for (T& v : row) v *= inv;
      }
    }
  }
  return p;
}

template <typename T>
BlockSparseMatrix<T> sparse_softmax_backward(const BlockSparseMatrix<T>& probs,
                                             const BlockSparseMatrix<T>& grad_probs) {
  if (probs.grid() != grad_probs.grid() || probs.blk() != grad_probs.blk() ||
      !std::ranges::equal(probs.blocks(), grad_probs.blocks())) {
    throw ConfigError("sparse_softmax_backward: layouts differ");
  }
  BlockSparseMatrix<T> ds = grad_probs;
  const std::size_t blk = probs.blk();
  for (std::size_t br = 0; br < probs.grid(); ++br) {
    const std::size_t i0 = probs.row_begin(br), i1 = probs.row_begin(br + 1);
    for (std::size_t a = 0; a < blk; ++a) {
      T inner = 0;
      for (std::size_t i = i0; i < i1; ++i)
        inner += dot(probs.block(i).data() + a * blk, grad_probs.block(i).data() + a * blk, blk);
      for (std::size_t i = i0; i < i1; ++i) {
        auto pr = probs.block(i).subspan(a * blk, blk);
        auto out = ds.block(i).subspan(a * blk, blk);
        for (std::size_t c = 0; c < blk; ++c) out[c] = pr[c] * (out[c] - inner);
      }
    }
  }
  return ds;
}

template <typename T>
BasicTensor<T> dsd(const BlockSparseMatrix<T>& p, const BasicTensor<T>& v, std::size_t workers) {
  require_token_rows(v, p.dim(), "dsd");
  const std::size_t blk = p.blk(), hd = v.cols();
  BasicTensor<T> out({p.dim(), hd});
  run_partitioned(p.grid(), workers, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = p.row_begin(r0); i < p.row_begin(r1); ++i) {
      const auto b = p.blocks()[i];
      auto vals = p.block(i);
      for (std::size_t a = 0; a < blk; ++a) {
        T* orow = out.row(b.row * blk + a).data();
        for (std::size_t c = 0; c < blk; ++c) {
          const T w = vals[a * blk + c];
          if (w != T(0)) axpy(w, v.row(b.col * blk + c).data(), orow, hd);
        }
      }
    }
  });
  count_macs(MacCategory::kAttentionContext, p.n_blocks() * blk * blk * hd);
  return out;
}

template <typename T>
BasicTensor<T> dsd_transposed(const BlockSparseMatrix<T>& p, const BasicTensor<T>& x, std::size_t workers) {
  require_token_rows(x, p.dim(), "dsd_transposed");
  const std::size_t blk = p.blk(), hd = x.cols();
  BasicTensor<T> out({p.dim(), hd});
  // Each worker owns a range of output block columns and walks the layout in
  // order, so accumulation order per output row is fixed.
  run_partitioned(p.grid(), workers, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t i = 0; i < p.n_blocks(); ++i) {
      const auto b = p.blocks()[i];
      if (b.col < c0 || b.col >= c1) continue;
      auto vals = p.block(i);
      for (std::size_t a = 0; a < blk; ++a) {
        const T* xrow = x.row(b.row * blk + a).data();
        for (std::size_t c = 0; c < blk; ++c) {
          const T w = vals[a * blk + c];
          if (w != T(0)) axpy(w, xrow, out.row(b.col * blk + c).data(), hd);
        }
      }
    }
  });
  count_macs(MacCategory::kAttentionContext, p.n_blocks() * blk * blk * hd);
  return out;
}

// ---------------------------------------------------------------------------
// Neuron-block matmuls

template <typename T>
LayeredMatrix<T> LayeredMatrix<T>::from_logical(const BasicTensor<T>& logical, StorageOrder order) {
  require_rank2(logical.shape(), "LayeredMatrix");
  LayeredMatrix m;
  m.rows_ = logical.rows();
  m.cols_ = logical.cols();
  m.order_ = order;
  if (order == StorageOrder::kRowMajor) {
    m.storage_ = logical.storage();
  } else {
    m.storage_.resize(logical.size());
    for (std::size_t r = 0; r < m.rows_; ++r)
      for (std::size_t c = 0; c < m.cols_; ++c) m.storage_[c * m.rows_ + r] = logical(r, c);
  }
  return m;
}

template <typename T>
BasicTensor<T> LayeredMatrix<T>::to_logical() const {
  BasicTensor<T> out({rows_, cols_});
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) out(r, c) = at(r, c);
  return out;
}

template <typename T>
LayeredWeights<T> LayeredWeights<T>::from_logical(const BasicTensor<T>& w1, const BasicTensor<T>& w2) {
  require_rank2(w1.shape(), "LayeredWeights w1");
  require_rank2(w2.shape(), "LayeredWeights w2");
  if (w1.cols() != w2.rows() || w1.rows() != w2.cols()) {
    throw ShapeError("LayeredWeights: w1 " + shape_string(w1.shape()) + " and w2 " + shape_string(w2.shape()) +
                     " are not d x d_ff / d_ff x d");
  }
  return {LayeredMatrix<T>::from_logical(w1, StorageOrder::kColumnMajor),
          LayeredMatrix<T>::from_logical(w2, StorageOrder::kRowMajor)};
}

std::size_t n_neuron_blocks(std::size_t d_ff, std::size_t blk_size) {
  if (blk_size == 0) throw ConfigError("neuron block size must be positive");
  return (d_ff + blk_size - 1) / blk_size;
}

ActiveNeuronSet ActiveNeuronSet::from_mask(const NeuronBlockMask& mask, std::size_t blk_size, std::size_t d_ff) {
  if (mask.size() != n_neuron_blocks(d_ff, blk_size)) {
    throw ShapeError("neuron mask has " + std::to_string(mask.size()) + " blocks, expected " +
                     std::to_string(n_neuron_blocks(d_ff, blk_size)));
  }
  ActiveNeuronSet s;
  s.blk_size = blk_size;
  s.d_ff = d_ff;
  s.blocks = mask.active_blocks();
  s.offsets.push_back(0);
  for (auto b : s.blocks) {
    const std::size_t begin = b * blk_size;
    s.offsets.push_back(s.offsets.back() + std::min(d_ff, begin + blk_size) - begin);
  }
  return s;
}

template <typename T>
BasicTensor<T> NeuronActivations<T>::to_dense() const {
  BasicTensor<T> out({values.rows(), set.d_ff});
  for (std::size_t t = 0; t < values.rows(); ++t)
    for (std::size_t i = 0; i < set.blocks.size(); ++i)
      for (std::size_t j = 0; j < set.block_width(i); ++j)
        out(t, set.block_begin(i) + j) = values(t, set.offsets[i] + j);
  return out;
}

namespace {
constexpr std::size_t kTokenTile = 32;
}

template <typename T>
NeuronActivations<T> neuron_matmul_fwd1(const BasicTensor<T>& x, const LayeredMatrix<T>& w1,
                                        const NeuronBlockMask& mask, std::size_t blk_size) {
  require_rank2(x.shape(), "neuron_matmul_fwd1");
  if (w1.order() != StorageOrder::kColumnMajor) throw ConfigError("neuron_matmul_fwd1: W1 must be column-major");
  if (x.cols() != w1.rows()) throw ShapeError("neuron_matmul_fwd1: X width does not match W1 rows");
  NeuronActivations<T> out{BasicTensor<T>(), ActiveNeuronSet::from_mask(mask, blk_size, w1.cols())};
  const std::size_t s = x.rows(), d = x.cols(), width = out.set.width();
  out.values = BasicTensor<T>({s, width});
  T* po = out.values.data().data();
  for (std::size_t t0 = 0; t0 < s; t0 += kTokenTile) {
    const std::size_t t1 = std::min(s, t0 + kTokenTile);
    for (std::size_t i = 0; i < out.set.blocks.size(); ++i) {
      for (std::size_t j = 0; j < out.set.block_width(i); ++j) {
        const T* col = w1.column(out.set.block_begin(i) + j);
        const std::size_t packed = out.set.offsets[i] + j;
        for (std::size_t t = t0; t < t1; ++t) po[t * width + packed] = dot(x.row(t).data(), col, d);
      }
    }
  }
  count_macs(MacCategory::kNeuronUp, s * width * d);
  return out;
}

template <typename T>
BasicTensor<T> neuron_matmul_fwd2(const NeuronActivations<T>& h, const LayeredMatrix<T>& w2,
                                  const NeuronBlockMask& mask) {
  if (w2.order() != StorageOrder::kRowMajor) throw ConfigError("neuron_matmul_fwd2: W2 must be row-major");
  if (h.set.d_ff != w2.rows() || h.set.blocks != mask.active_blocks()) {
    throw ConfigError("neuron_matmul_fwd2: hidden activations were produced with a different mask");
  }
  const std::size_t s = h.values.rows(), d = w2.cols(), width = h.set.width();
  BasicTensor<T> out({s, d});
  const T* ph = h.values.data().data();
  for (std::size_t t0 = 0; t0 < s; t0 += kTokenTile) {
    const std::size_t t1 = std::min(s, t0 + kTokenTile);
    for (std::size_t i = 0; i < h.set.blocks.size(); ++i) {
      for (std::size_t t = t0; t < t1; ++t) {
        T* orow = out.row(t).data();
        for (std::size_t j = 0; j < h.set.block_width(i); ++j) {
          const T a = ph[t * width + h.set.offsets[i] + j];
          if (a != T(0)) axpy(a, w2.row(h.set.block_begin(i) + j), orow, d);
        }
      }
    }
  }
  count_macs(MacCategory::kNeuronDown, s * width * d);
  return out;
}

template <typename T>
NeuronActivations<T> neuron_matmul_bwd_hidden(const BasicTensor<T>& grad_out, const LayeredMatrix<T>& w2,
                                              const ActiveNeuronSet& set) {
  if (w2.order() != StorageOrder::kRowMajor) throw ConfigError("neuron_matmul_bwd_hidden: W2 must be row-major");
  if (grad_out.cols() != w2.cols()) throw ShapeError("neuron_matmul_bwd_hidden: gradient width mismatch");
  const std::size_t s = grad_out.rows(), d = w2.cols(), width = set.width();
  NeuronActivations<T> out{BasicTensor<T>({s, width}), set};
  T* po = out.values.data().data();
  for (std::size_t t0 = 0; t0 < s; t0 += kTokenTile) {
    const std::size_t t1 = std::min(s, t0 + kTokenTile);
    for (std::size_t i = 0; i < set.blocks.size(); ++i) {
      for (std::size_t j = 0; j < set.block_width(i); ++j) {
        const T* wrow = w2.row(set.block_begin(i) + j);
        for (std::size_t t = t0; t < t1; ++t) po[t * width + set.offsets[i] + j] = dot(grad_out.row(t).data(), wrow, d);
      }
    }
  }
  count_macs(MacCategory::kNeuronDown, s * width * d);
  return out;
}

template <typename T>
BasicTensor<T> neuron_matmul_bwd_input(const NeuronActivations<T>& grad_z, const LayeredMatrix<T>& w1) {
  if (w1.order() != StorageOrder::kColumnMajor) throw ConfigError("neuron_matmul_bwd_input: W1 must be column-major");
  const auto& set = grad_z.set;
  if (set.d_ff != w1.cols()) throw ShapeError("neuron_matmul_bwd_input: W1 width mismatch");
  const std::size_t s = grad_z.values.rows(), d = w1.rows(), width = set.width();
  BasicTensor<T> out({s, d});
  const T* pg = grad_z.values.data().data();
  for (std::size_t t0 = 0; t0 < s; t0 += kTokenTile) {
    const std::size_t t1 = std::min(s, t0 + kTokenTile);
    for (std::size_t i = 0; i < set.blocks.size(); ++i) {
      for (std::size_t t = t0; t < t1; ++t) {
        T* orow = out.row(t).data();
        for (std::size_t j = 0; j < set.block_width(i); ++j) {
          const T g = pg[t * width + set.offsets[i] + j];
          if (g != T(0)) axpy(g, w1.column(set.block_begin(i) + j), orow, d);
        }
      }
    }
  }
  count_macs(MacCategory::kNeuronUp, s * width * d);
  return out;
}

#define SHADOWTUNE_INSTANTIATE_SPARSE(T)                                                                    \
  template class BlockSparseMatrix<T>;                                                                      \
  template BlockSparseMatrix<T> sdd(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const BlockIndex>, \
                                    std::size_t, T, std::size_t);                                           \
  template BlockSparseMatrix<T> sparse_softmax(const BlockSparseMatrix<T>&, bool);                          \
  template BlockSparseMatrix<T> sparse_softmax_backward(const BlockSparseMatrix<T>&, const BlockSparseMatrix<T>&); \
  template BasicTensor<T> dsd(const BlockSparseMatrix<T>&, const BasicTensor<T>&, std::size_t);             \
  template BasicTensor<T> dsd_transposed(const BlockSparseMatrix<T>&, const BasicTensor<T>&, std::size_t);  \
  template class LayeredMatrix<T>;                                                                          \
  template struct LayeredWeights<T>;                                                                        \
  template struct NeuronActivations<T>;                                                                     \
  template NeuronActivations<T> neuron_matmul_fwd1(const BasicTensor<T>&, const LayeredMatrix<T>&,          \
                                                   const NeuronBlockMask&, std::size_t);                    \
  template BasicTensor<T> neuron_matmul_fwd2(const NeuronActivations<T>&, const LayeredMatrix<T>&,          \
                                             const NeuronBlockMask&);                                       \
  template NeuronActivations<T> neuron_matmul_bwd_hidden(const BasicTensor<T>&, const LayeredMatrix<T>&,    \
                                                         const ActiveNeuronSet&);                           \
  template BasicTensor<T> neuron_matmul_bwd_input(const NeuronActivations<T>&, const LayeredMatrix<T>&);

SHADOWTUNE_INSTANTIATE_SPARSE(float)
SHADOWTUNE_INSTANTIATE_SPARSE(double)

#undef SHADOWTUNE_INSTANTIATE_SPARSE

}  // namespace shadowtune
