// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small layer building blocks shared by the encoders and the fusion module.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "flexireid/autodiff.hpp"
#include "flexireid/rng.hpp"

namespace flexireid {

using ad::Tensor;

// Named parameter handles. Entries share storage with the owning module, so
// writes through either are visible to both.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  void add(std::string name, Tensor value) {
    entries_.push_back(Entry{std::move(name), std::move(value)});
  }

  void append(const ParameterSet& other, const std::string& prefix = {}) {
    for (const auto& e : other.entries_) add(prefix + e.name, e.value);
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  ParameterSet trainable() const {
    ParameterSet out;
    for (const auto& e : entries_)
      if (e.value.requires_grad()) out.add(e.name, e.value);
    return out;
  }

  ParameterSet frozen() const {
    ParameterSet out;
    for (const auto& e : entries_)
      if (!e.value.requires_grad()) out.add(e.name, e.value);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
};

inline Tensor normal_tensor(Rng& rng, ad::Shape shape, double stddev, bool trainable) {
  const auto n = ad::shape_numel(shape);
  return Tensor(std::move(shape), rng.normal_vector(n, stddev), trainable);
}

inline Tensor constant_tensor(ad::Shape shape, double value, bool trainable) {
  const auto n = ad::shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), trainable);
}

// y = x W^T + b with W stored [out, in].
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(Rng& rng, std::size_t in, std::size_t out, bool trainable, double stddev = -1.0,
         bool with_bias = true) {
    if (stddev < 0.0) stddev = 1.0 / std::sqrt(static_cast<double>(in));
    weight = normal_tensor(rng, {out, in}, stddev, trainable);
    if (with_bias) bias = constant_tensor({out}, 0.0, trainable);
  }

  std::size_t in_features() const { return weight.cols(); }
  std::size_t out_features() const { return weight.rows(); }

  Tensor operator()(const Tensor& x) const {
    Tensor y = ad::matmul_nt(x, weight);
    return bias.defined() ? ad::add_row(y, bias) : y;
  }

  void collect(ParameterSet& ps, const std::string& prefix) const {
    ps.add(prefix + ".weight", weight);
    if (bias.defined()) ps.add(prefix + ".bias", bias);
  }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  LayerNorm(std::size_t dim, bool trainable)
      : gamma(constant_tensor({dim}, 1.0, trainable)), beta(constant_tensor({dim}, 0.0, trainable)) {}

  Tensor operator()(const Tensor& x) const { return ad::layer_norm_rows(x, gamma, beta); }

  void collect(ParameterSet& ps, const std::string& prefix) const {
    ps.add(prefix + ".gamma", gamma);
    ps.add(prefix + ".beta", beta);
  }
};

// Scaled dot-product attention with `heads` heads. Queries come from
// `query_src` [Lq, d]; keys and values from `kv_src` [Lk, d]. The key
// projection has no bias: it would shift every score in a row equally and
// cancel in the softmax.
struct MultiHeadAttention {
  Linear q_proj, k_proj, v_proj, out_proj;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(Rng& rng, std::size_t dim, std::size_t num_heads, bool trainable)
      : q_proj(rng, dim, dim, trainable),
        k_proj(rng, dim, dim, trainable, -1.0, false),
        v_proj(rng, dim, dim, trainable),
        out_proj(rng, dim, dim, trainable),
        heads(num_heads) {
    if (num_heads == 0 || dim % num_heads != 0) {
      throw ShapeError("attention: model_dim must be divisible by num_heads");
    }
  }

  Tensor operator()(const Tensor& query_src, const Tensor& kv_src) const {
    const Tensor q = q_proj(query_src);
    const Tensor k = k_proj(kv_src);
    const Tensor v = v_proj(kv_src);
    const std::size_t dim = q.cols();
    const std::size_t head_dim = dim / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    if (heads == 1) {
      Tensor attn = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), inv_sqrt));
      return out_proj(ad::matmul(attn, v));
    }
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor qh = ad::slice_cols(q, h * head_dim, head_dim);
      const Tensor kh = ad::slice_cols(k, h * head_dim, head_dim);
      const Tensor vh = ad::slice_cols(v, h * head_dim, head_dim);
      Tensor attn = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
      outs.push_back(ad::matmul(attn, vh));
    }
    return out_proj(ad::concat_cols(outs));
  }

  void collect(ParameterSet& ps, const std::string& prefix) const {
    q_proj.collect(ps, prefix + ".q");
    k_proj.collect(ps, prefix + ".k");
    v_proj.collect(ps, prefix + ".v");
    out_proj.collect(ps, prefix + ".out");
  }
};

// Row vector [d] viewed as a [1, d] matrix.
inline Tensor as_row(const Tensor& v) { return ad::reshape(v, {1, v.numel()}); }

// Stacks equally sized vectors into an [N, d] matrix.
inline Tensor stack_rows(const std::vector<Tensor>& vectors) {
  std::vector<Tensor> rows;
  rows.reserve(vectors.size());
  for (const auto& v : vectors) rows.push_back(v.rank() == 1 ? as_row(v) : v);
  return ad::concat_rows(rows);
}

}  // namespace flexireid
