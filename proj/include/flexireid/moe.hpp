// SPDX-License-Identifier: Apache-2.0
#pragma once

// Adaptive Expert Allocation mixture of experts.
//
// A gating network scores every expert per token, P = softmax(W_r x). The
// adaptive router activates experts in descending confidence until their
// cumulative confidence reaches the threshold; the selected experts are
// weighted by their raw confidence (no renormalization) and summed. Top-K,
// soft and hash routers share the same decision type for ablations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "flexireid/autodiff.hpp"
#include "flexireid/nn.hpp"
#include "flexireid/rng.hpp"

namespace flexireid {

enum class RouterKind { adaptive, topk, soft, hash };

inline const char* router_name(RouterKind kind) {
  switch (kind) {
    case RouterKind::adaptive: return "adaptive";
    case RouterKind::topk: return "topk";
    case RouterKind::soft: return "soft";
    case RouterKind::hash: return "hash";
  }
  return "unknown";
}

inline RouterKind parse_router(const std::string& name) {
  if (name == "adaptive") return RouterKind::adaptive;
  if (name == "topk") return RouterKind::topk;
  if (name == "soft") return RouterKind::soft;
  if (name == "hash") return RouterKind::hash;
  throw Error("unknown router kind '" + name + "'");
}

struct RoutingDecision {
  std::vector<std::size_t> selected;  // in activation order
  std::vector<double> gains;          // length n; zero off the selected set

  std::size_t size() const { return selected.size(); }
};

// Expert indices by descending confidence; ties go to the lower index.
inline std::vector<std::size_t> descending_order(std::span<const double> probs) {
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  return order;
}

inline void validate_confidence(std::span<const double> probs) {
  if (probs.empty()) throw Error("routing: empty confidence vector");
  for (double p : probs) {
    if (!std::isfinite(p) || p < 0.0) throw Error("routing: invalid confidence entry");
  }
}

// Minimal descending-confidence prefix whose cumulative confidence reaches
// `threshold`. A leading expert at or above the threshold is activated alone.
inline RoutingDecision adaptive_route(std::span<const double> probs, double threshold) {
  validate_confidence(probs);
  if (!(threshold > 0.0 && threshold <= 1.0)) throw Error("routing: threshold must lie in (0, 1]");
  RoutingDecision d;
  d.gains.assign(probs.size(), 0.0);
  double cumulative = 0.0;
  for (std::size_t idx : descending_order(probs)) {
    d.selected.push_back(idx);
    d.gains[idx] = probs[idx];
    cumulative += probs[idx];
    if (cumulative >= threshold) break;
  }
  return d;
}

inline RoutingDecision topk_route(std::span<const double> probs, std::size_t k) {
  validate_confidence(probs);
  if (k < 1 || k > probs.size()) {
    throw Error("routing: top-k requires 1 <= K <= " + std::to_string(probs.size()) + ", got " +
                std::to_string(k));
  }
  RoutingDecision d;
  d.gains.assign(probs.size(), 0.0);
  auto order = descending_order(probs);
  for (std::size_t i = 0; i < k; ++i) {
    d.selected.push_back(order[i]);
    d.gains[order[i]] = probs[order[i]];
  }
  return d;
}

inline RoutingDecision soft_route(std::span<const double> probs) {
  validate_confidence(probs);
  RoutingDecision d;
  d.selected.resize(probs.size());
  std::iota(d.selected.begin(), d.selected.end(), std::size_t{0});
  d.gains.assign(probs.begin(), probs.end());
  return d;
}

// Deterministic position hash; the selected expert gets gain 1.
inline RoutingDecision hash_route(std::uint64_t token_index, std::size_t num_experts) {
  if (num_experts < 1) throw Error("routing: hash routing needs at least one expert");
  RoutingDecision d;
  d.gains.assign(num_experts, 0.0);
  const auto idx = static_cast<std::size_t>(mix64(token_index) % num_experts);
  d.selected.push_back(idx);
  d.gains[idx] = 1.0;
  return d;
}

// Entropy of a confidence vector, -sum P_i log P_i, with log clamped at 1e-12.
inline double adaptive_loss(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) h -= p * std::log(std::max(p, 1e-12));
  return h;
}

// Per-row entropy of a [L, n] confidence matrix, as a differentiable [L].
inline Tensor entropy_rows(const Tensor& probs) {
  return ad::scale(ad::sum_rows(ad::mul(probs, ad::log_clamped(probs))), -1.0);
}

struct GatingNetwork {
  Tensor weight;  // [num_experts, model_dim]

  GatingNetwork() = default;
  GatingNetwork(Rng& rng, std::size_t num_experts, std::size_t model_dim)
      : weight(normal_tensor(rng, {num_experts, model_dim},
                             1.0 / std::sqrt(static_cast<double>(model_dim)), true)) {}

  std::size_t num_experts() const { return weight.rows(); }

  // [L, d] -> [L, n] confidences; a single token [d] gives [1, n].
  Tensor confidence(const Tensor& x) const {
    const Tensor rows = x.rank() == 1 ? as_row(x) : x;
    if (rows.cols() != weight.cols()) {
      throw ShapeError("gate: token width " + std::to_string(rows.cols()) +
                       " does not match gate width " + std::to_string(weight.cols()));
    }
    return ad::softmax_rows(ad::matmul_nt(rows, weight));
  }
};

// Bottleneck adapter: down-project, GELU, up-project.
struct ExpertAdapter {
  Linear down;
  Linear up;

  ExpertAdapter() = default;
  ExpertAdapter(Rng& rng, std::size_t model_dim, std::size_t bottleneck_dim, double up_stddev)
      : down(rng, model_dim, bottleneck_dim, true), up(rng, bottleneck_dim, model_dim, true, up_stddev) {
    if (bottleneck_dim >= model_dim) throw Error("adapter: bottleneck must be narrower than model");
  }

  Tensor operator()(const Tensor& x) const { return up(ad::gelu(down(x))); }

  void collect(ParameterSet& ps, const std::string& prefix) const {
    down.collect(ps, prefix + ".down");
    up.collect(ps, prefix + ".up");
  }
};

struct MoeSettings {
  std::size_t num_experts = 6;
  double threshold = 0.6;
  RouterKind router = RouterKind::adaptive;
  std::size_t top_k = 2;
  // Standard deviation of the up-projection init; 0 starts every adapter as
  // a zero map so the residual stream is initially untouched.
  double adapter_up_stddev = 0.0;
};

struct MoeOutput {
  Tensor y;               // [L, d]
  Tensor entropy_sum;     // [1], sum of per-token gate entropies
  std::size_t tokens = 0;
  std::size_t activated = 0;  // total selected experts over all tokens
};

// Computes Adapter_i(x) for every token; overridable for test fixtures.
using ExpertFn = std::function<Tensor(std::size_t expert, const Tensor& x)>;

class AEAMoELayer {
 public:
  AEAMoELayer() = default;
  AEAMoELayer(Rng& rng, std::size_t model_dim, const MoeSettings& settings)
      : settings_(settings), gate_(rng, settings.num_experts, model_dim) {
    if (settings.num_experts < 1) throw Error("moe: at least one expert required");
    if (!(settings.threshold > 0.0 && settings.threshold <= 1.0)) {
      throw Error("moe: threshold must lie in (0, 1]");
    }
    const std::size_t bottleneck = std::max<std::size_t>(1, model_dim / 4);
    for (std::size_t i = 0; i < settings.num_experts; ++i) {
      experts_.emplace_back(rng, model_dim, bottleneck, settings.adapter_up_stddev);
    }
  }

  const MoeSettings& settings() const { return settings_; }
  MoeSettings& settings() { return settings_; }
  const GatingNetwork& gate() const { return gate_; }
  GatingNetwork& gate() { return gate_; }
  const std::vector<ExpertAdapter>& experts() const { return experts_; }
  std::vector<ExpertAdapter>& experts() { return experts_; }
  std::size_t num_experts() const { return experts_.size(); }

  RoutingDecision route(std::span<const double> probs, std::size_t token_index) const {
    switch (settings_.router) {
      case RouterKind::adaptive: return adaptive_route(probs, settings_.threshold);
      case RouterKind::topk: return topk_route(probs, std::min(settings_.top_k, probs.size()));
      case RouterKind::soft: return soft_route(probs);
      case RouterKind::hash: return hash_route(token_index, probs.size());
    }
    throw Error("moe: unknown router");
  }

  // y = sum_i g_i(x) Adapter_i(x), routed per token. Selection is a constant
  // mask, so gradients reach the gate only through the confidences of the
  // selected experts.
  MoeOutput forward(const Tensor& x, const ExpertFn& expert_fn = {}) const {
    const Tensor tokens = x.rank() == 1 ? as_row(x) : x;
    const std::size_t len = tokens.rows();
    const std::size_t n = num_experts();
    const Tensor probs = gate_.confidence(tokens);

    std::vector<double> mask(len * n, 0.0);
    std::vector<bool> used(n, false);
    MoeOutput out;
    out.tokens = len;
    for (std::size_t t = 0; t < len; ++t) {
      auto row = probs.data().subspan(t * n, n);
      RoutingDecision d = route(row, t);
      out.activated += d.size();
      for (std::size_t i : d.selected) {
        // Hash routing uses a fixed unit gain rather than P_i.
        mask[t * n + i] = settings_.router == RouterKind::hash ? d.gains[i] : 1.0;
        used[i] = true;
      }
    }
    const Tensor mask_t({len, n}, std::move(mask));
    const Tensor gains = settings_.router == RouterKind::hash ? mask_t : ad::mul(probs, mask_t);

    Tensor y;
    for (std::size_t i = 0; i < n; ++i) {
      if (!used[i]) continue;
      const Tensor expert_out = expert_fn ? expert_fn(i, tokens) : experts_[i](tokens);
      const Tensor weighted = ad::scale_rows(expert_out, ad::column(gains, i));
      y = y.defined() ? ad::add(y, weighted) : weighted;
    }
    out.y = y;
    out.entropy_sum = ad::sum(entropy_rows(probs));
    return out;
  }

  void collect(ParameterSet& ps, const std::string& prefix) const {
    ps.add(prefix + ".gate", gate_.weight);
    for (std::size_t i = 0; i < experts_.size(); ++i) {
      experts_[i].collect(ps, prefix + ".expert" + std::to_string(i));
    }
  }

 private:
  MoeSettings settings_;
  GatingNetwork gate_;
  std::vector<ExpertAdapter> experts_;
};

// Running mean of gate entropy across tokens, layers and modalities.
class AdaptiveLossAccumulator {
 public:
  void add(const MoeOutput& out) {
    total_ = total_.defined() ? ad::add(total_, out.entropy_sum) : out.entropy_sum;
    tokens_ += out.tokens;
    activated_ += out.activated;
  }

  // Mean per-token entropy; zero when nothing was routed.
  Tensor mean() const {
    if (!total_.defined() || tokens_ == 0) return Tensor::scalar(0.0);
    return ad::scale(total_, 1.0 / static_cast<double>(tokens_));
  }

  std::size_t tokens() const { return tokens_; }
  double mean_activated() const {
    return tokens_ == 0 ? 0.0 : static_cast<double>(activated_) / static_cast<double>(tokens_);
  }

 private:
  Tensor total_;
  std::size_t tokens_ = 0;
  std::size_t activated_ = 0;
};

}  // namespace flexireid
