// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Dynamic block-sparse operators: the offline atomic-pattern pool, online
// per-head layout combination, SDD / sparse softmax / DSD for attention, and
// neuron-block matmuls for the MLP.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "shadowtune/masks.hpp"
#include "shadowtune/tensor.hpp"

namespace shadowtune {

// ---------------------------------------------------------------------------
// Patterns and layouts

struct BlockIndex {
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  auto operator<=>(const BlockIndex&) const = default;
};

struct HeadBlock {
  std::uint32_t head = 0;
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  auto operator<=>(const HeadBlock&) const = default;
};

enum class PatternKind { kDense, kBandedLocal, kGlobalRowCol, kBlockDiagonal, kStrided, kCausalLocal };

/// A canonical block-sparse attention shape on an n_b x n_b block grid.
/// `param` is the window (BandedLocal, CausalLocal), border width
/// (GlobalRowCol) or period (Strided); unused otherwise.
struct AtomicPattern {
  PatternKind kind = PatternKind::kDense;
  std::size_t param = 0;

  bool contains(std::size_t row, std::size_t col) const;
  std::string name() const;
  /// Inverse of name(), e.g. "banded_local(2)". Throws ConfigError.
  static AtomicPattern parse(const std::string& text);

  bool operator==(const AtomicPattern&) const = default;
};

/// Precomputed, lexicographically sorted active-block list of one pattern.
struct LayoutTable {
  std::size_t id = 0;
  AtomicPattern pattern;
  std::size_t grid = 0;
  std::vector<BlockIndex> blocks;

  std::size_t active_blocks() const { return blocks.size(); }
};

/// Offline pool of layout tables for one grid size. Table 0 is always Dense.
class PatternPool {
 public:
  PatternPool() = default;
  PatternPool(std::size_t grid, std::vector<LayoutTable> tables);

  std::size_t grid() const { return grid_; }
  std::size_t size() const { return tables_.size(); }
  static constexpr std::size_t dense_id() { return 0; }

  /// Throws ConfigError for ids outside the pool.
  const LayoutTable& at(std::size_t id) const;
  std::span<const LayoutTable> tables() const { return tables_; }
  /// Id of `pattern`, or size() when absent.
  std::size_t find(const AtomicPattern& pattern) const;

 private:
  std::size_t grid_ = 0;
  std::vector<LayoutTable> tables_;
};

/// The default pattern list for a grid, restricted to parameters that fit.
std::vector<AtomicPattern> default_patterns(std::size_t grid);

/// Builds one LayoutTable per pattern (Dense is prepended when missing).
/// Throws ConfigError for grid == 0 or a parameter exceeding the grid.
PatternPool build_pool(std::size_t grid, std::span<const AtomicPattern> patterns);
inline PatternPool build_pool(std::size_t grid) {
  const auto patterns = default_patterns(grid);
  return build_pool(grid, patterns);
}

/// Checks a block list is unique, inside the grid and sorted. Throws ConfigError.
void validate_blocks(std::span<const BlockIndex> blocks, std::size_t grid);

/// Per-head block lists concatenated into one flat index space; head h owns
/// entries [head_offset(h), head_offset(h + 1)).
class CombinedLayout {
 public:
  CombinedLayout() = default;
  CombinedLayout(std::size_t grid, const std::vector<std::vector<BlockIndex>>& per_head);

  std::size_t grid() const { return grid_; }
  std::size_t n_heads() const { return offsets_.empty() ? 0 : offsets_.size() - 1; }
  std::size_t total_blocks() const { return blocks_.size(); }
  std::size_t head_offset(std::size_t h) const { return offsets_.at(h); }
  std::span<const BlockIndex> head_blocks(std::size_t h) const;
  std::vector<HeadBlock> entries() const;

  bool operator==(const CombinedLayout&) const = default;

 private:
  friend CombinedLayout combine_layouts(const HeadPatternAssignment&, const PatternPool&);
  std::size_t grid_ = 0;
  std::vector<BlockIndex> blocks_;
  std::vector<std::size_t> offsets_;
};

/// Concatenates each head's precomputed table, tagging entries by offset.
/// Throws ConfigError for ids outside the pool.
CombinedLayout combine_layouts(const HeadPatternAssignment& assignment, const PatternPool& pool);

/// Same block list for every head.
CombinedLayout uniform_layout(std::size_t n_heads, std::size_t grid, std::vector<BlockIndex> blocks);

/// Drops blocks strictly above the diagonal (fully masked under causal attention).
CombinedLayout causal_restrict(const CombinedLayout& layout);

/// Fraction of grid blocks that are inactive.
double layout_sparsity(std::span<const BlockIndex> blocks, std::size_t grid);

// ---------------------------------------------------------------------------
// Block-sparse attention

/// blk x blk value blocks stored contiguously in layout order.
template <typename T>
class BlockSparseMatrix {
 public:
  BlockSparseMatrix() = default;
  /// Validates the block list; values start at zero.
  BlockSparseMatrix(std::size_t grid, std::size_t blk, std::vector<BlockIndex> blocks);

  std::size_t grid() const { return grid_; }
  std::size_t blk() const { return blk_; }
  std::size_t dim() const { return grid_ * blk_; }
  std::size_t n_blocks() const { return blocks_.size(); }
  std::span<const BlockIndex> blocks() const { return blocks_; }
  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  std::span<T> block(std::size_t i) { return std::span<T>(values_).subspan(i * blk_ * blk_, blk_ * blk_); }
  std::span<const T> block(std::size_t i) const {
    return std::span<const T>(values_).subspan(i * blk_ * blk_, blk_ * blk_);
  }
  /// Layout entries of block row `br` are [row_begin(br), row_begin(br + 1)).
  std::size_t row_begin(std::size_t br) const { return row_start_[br]; }

  /// Dense view with `fill` at inactive positions.
  BasicTensor<T> to_dense(T fill = T(0)) const;

 private:
  std::size_t grid_ = 0;
  std::size_t blk_ = 0;
  std::vector<BlockIndex> blocks_;
  std::vector<std::size_t> row_start_;
  std::vector<T> values_;
};

/// Scores on active blocks only: block(br, bc) = scale * Q[rows br] * K[rows bc]ᵀ.
/// `workers` > 1 splits block rows across threads; results do not depend on it.
template <typename T>
BlockSparseMatrix<T> sdd(const BasicTensor<T>& q, const BasicTensor<T>& k,
                         std::span<const BlockIndex> blocks, std::size_t blk, T scale,
                         std::size_t workers = 1);

/// Row softmax over the active entries of each token row; inactive entries
/// (and, when `causal`, keys after the query) have probability zero.
/// Throws ConfigError if some token row has no admissible entry.
template <typename T>
BlockSparseMatrix<T> sparse_softmax(const BlockSparseMatrix<T>& scores, bool causal = false);

/// dS from dP through the sparse softmax (zero outside active entries).
template <typename T>
BlockSparseMatrix<T> sparse_softmax_backward(const BlockSparseMatrix<T>& probs,
                                             const BlockSparseMatrix<T>& grad_probs);

/// out[rows br] += P.block(br, bc) * V[rows bc].
template <typename T>
BasicTensor<T> dsd(const BlockSparseMatrix<T>& p, const BasicTensor<T>& v, std::size_t workers = 1);

/// out[rows bc] += P.block(br, bc)ᵀ * X[rows br]   (i.e. Pᵀ X).
template <typename T>
BasicTensor<T> dsd_transposed(const BlockSparseMatrix<T>& p, const BasicTensor<T>& x,
                              std::size_t workers = 1);

// ---------------------------------------------------------------------------
// Neuron-block MLP matmuls

enum class StorageOrder { kRowMajor, kColumnMajor };

/// A matrix with an explicit storage order. Logical indexing is (row, col)
/// regardless of the order.
template <typename T>
class LayeredMatrix {
 public:
  LayeredMatrix() = default;
  static LayeredMatrix from_logical(const BasicTensor<T>& logical, StorageOrder order);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  StorageOrder order() const { return order_; }
  T at(std::size_t r, std::size_t c) const {
    return order_ == StorageOrder::kRowMajor ? storage_[r * cols_ + c] : storage_[c * rows_ + r];
  }
  /// Contiguous column; column-major only.
  const T* column(std::size_t c) const { return storage_.data() + c * rows_; }
  /// Contiguous row; row-major only.
  const T* row(std::size_t r) const { return storage_.data() + r * cols_; }
  std::span<const T> storage() const { return storage_; }
  std::span<T> storage() { return storage_; }

  BasicTensor<T> to_logical() const;

  bool operator==(const LayeredMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  StorageOrder order_ = StorageOrder::kRowMajor;
  std::vector<T> storage_;
};

/// First MLP weight (d x d_ff) column-major, second (d_ff x d) row-major.
template <typename T>
struct LayeredWeights {
  LayeredMatrix<T> w1;
  LayeredMatrix<T> w2;

  static LayeredWeights from_logical(const BasicTensor<T>& w1, const BasicTensor<T>& w2);
};

/// Active neuron blocks and where their columns land in packed storage.
struct ActiveNeuronSet {
  std::vector<std::uint32_t> blocks;
  std::vector<std::size_t> offsets;  // packed column offset per active block, plus end
  std::size_t blk_size = 0;
  std::size_t d_ff = 0;

  static ActiveNeuronSet from_mask(const NeuronBlockMask& mask, std::size_t blk_size, std::size_t d_ff);
  std::size_t width() const { return offsets.empty() ? 0 : offsets.back(); }
  std::size_t block_begin(std::size_t i) const { return blocks[i] * blk_size; }
  std::size_t block_width(std::size_t i) const { return offsets[i + 1] - offsets[i]; }
};

std::size_t n_neuron_blocks(std::size_t d_ff, std::size_t blk_size);

/// s x width values for the active neuron columns, packed in block order.
template <typename T>
struct NeuronActivations {
  BasicTensor<T> values;
  ActiveNeuronSet set;

  /// Scatters back to s x d_ff with zeros in inactive columns.
  BasicTensor<T> to_dense() const;
};

/// X * W1 restricted to active column blocks.
template <typename T>
NeuronActivations<T> neuron_matmul_fwd1(const BasicTensor<T>& x, const LayeredMatrix<T>& w1,
                                        const NeuronBlockMask& mask, std::size_t blk_size);

/// Sum over active blocks of H[:, b] * W2[rows of b, :]. Throws ConfigError
/// when `h` was produced with a different mask.
template <typename T>
BasicTensor<T> neuron_matmul_fwd2(const NeuronActivations<T>& h, const LayeredMatrix<T>& w2,
                                  const NeuronBlockMask& mask);

/// dH = dOut * W2[active rows]ᵀ, packed like `set`.
template <typename T>
NeuronActivations<T> neuron_matmul_bwd_hidden(const BasicTensor<T>& grad_out, const LayeredMatrix<T>& w2,
                                              const ActiveNeuronSet& set);

/// dX = dZ * W1[:, active]ᵀ.
template <typename T>
BasicTensor<T> neuron_matmul_bwd_input(const NeuronActivations<T>& grad_z, const LayeredMatrix<T>& w1);

}  // namespace shadowtune
