// SPDX-License-Identifier: Apache-2.0
#pragma once

// Cross-modal query fusion of sketch, infrared and text token features.
//
// Each modality block attends over its own tokens with queries formed from
// the sum of the other two modalities; the three outputs are concatenated,
// passed through a shared block and mean pooled. Absent modalities are
// replaced by learnable placeholder sequences so that all seven retrieval
// modes traverse the same path.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "flexireid/autodiff.hpp"
#include "flexireid/encoder.hpp"
#include "flexireid/nn.hpp"
#include "flexireid/rng.hpp"

namespace flexireid {

// Query modality combination; the target is always the rgb gallery.
struct RetrievalMode {
  bool sketch = false;
  bool infrared = false;
  bool text = false;

  std::string name() const {
    std::string out;
    auto put = [&](bool on, const char* tag) {
      if (!on) return;
      if (!out.empty()) out += '+';
      out += tag;
    };
    put(text, "t");
    put(sketch, "s");
    put(infrared, "ir");
    return out;
  }

  bool valid() const { return sketch || infrared || text; }
  bool operator==(const RetrievalMode&) const = default;
};

// t, s, ir, t+s, t+ir, s+ir, t+s+ir.
inline const std::array<RetrievalMode, 7>& all_modes() {
  static const std::array<RetrievalMode, 7> modes = {{
      {false, false, true},
      {true, false, false},
      {false, true, false},
      {true, false, true},
      {false, true, true},
      {true, true, false},
      {true, true, true},
  }};
  return modes;
}

inline RetrievalMode parse_mode(const std::string& text) {
  RetrievalMode m;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find('+', start);
    const std::string part = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
    bool* slot = nullptr;
    if (part == "t") slot = &m.text;
    else if (part == "s") slot = &m.sketch;
    else if (part == "ir") slot = &m.infrared;
    if (slot == nullptr || *slot) throw Error("invalid retrieval mode '" + text + "'");
    *slot = true;
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return m;
}

inline std::vector<RetrievalMode> parse_mode_list(const std::string& text) {
  std::vector<RetrievalMode> out;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find(',', start);
    if (end == std::string::npos) end = text.size();
    std::string part = text.substr(start, end - start);
    part.erase(0, part.find_first_not_of(" \t"));
    part.erase(part.find_last_not_of(" \t") + 1);
    if (!part.empty()) out.push_back(parse_mode(part));
    start = end + 1;
  }
  if (out.empty()) throw Error("empty retrieval mode list");
  return out;
}

struct ModalityBundle {
  std::optional<Tensor> sketch;
  std::optional<Tensor> infrared;
  std::optional<Tensor> text;

  bool has_sketch() const { return sketch.has_value(); }
  bool has_infrared() const { return infrared.has_value(); }
  bool has_text() const { return text.has_value(); }
  bool any() const { return has_sketch() || has_infrared() || has_text(); }

  RetrievalMode presence() const { return {has_sketch(), has_infrared(), has_text()}; }

  // The sub-bundle holding only the modalities `mode` needs.
  ModalityBundle restrict_to(const RetrievalMode& mode) const {
    ModalityBundle out;
    if (mode.sketch) out.sketch = sketch;
    if (mode.infrared) out.infrared = infrared;
    if (mode.text) out.text = text;
    if (out.presence() != mode) throw Error("bundle lacks a modality required by mode " + mode.name());
    return out;
  }
};

struct ModalityTriple {
  Tensor sketch;
  Tensor infrared;
  Tensor text;
};

enum class PlaceholderKind { learned, zeros };

// Placeholder token sequences for absent modalities.
struct LearnableEmbeddingFeature {
  Tensor sketch;
  Tensor infrared;
  Tensor text;

  LearnableEmbeddingFeature() = default;
  LearnableEmbeddingFeature(Rng& rng, std::size_t length, std::size_t model_dim,
                            PlaceholderKind kind = PlaceholderKind::learned) {
    const bool learned = kind == PlaceholderKind::learned;
    for (Tensor* slot : {&sketch, &infrared, &text}) {
      *slot = learned ? normal_tensor(rng, {length, model_dim}, 0.02, true)
                      : constant_tensor({length, model_dim}, 0.0, false);
    }
  }

  void collect(ParameterSet& ps, const std::string& prefix) const {
    ps.add(prefix + ".sketch", sketch);
    ps.add(prefix + ".infrared", infrared);
    ps.add(prefix + ".text", text);
  }
};

inline ModalityTriple resolve_bundle(const ModalityBundle& bundle,
                                     const LearnableEmbeddingFeature& lef,
                                     const RetrievalMode& mode) {
  if (!mode.valid()) throw Error("resolve_bundle: empty retrieval mode");
  if (bundle.presence() != mode) {
    throw Error("resolve_bundle: bundle modalities " + bundle.presence().name() +
                " do not match mode " + mode.name());
  }
  return ModalityTriple{bundle.sketch.value_or(lef.sketch), bundle.infrared.value_or(lef.infrared),
                        bundle.text.value_or(lef.text)};
}

// Attention block with a small feed-forward adapter. Every piece except the
// attention itself can be switched off for hand-checkable fixtures.
struct FusionBlock {
  LayerNorm ln_query;
  LayerNorm ln_kv;
  MultiHeadAttention attn;
  LayerNorm ln_ffn;
  Linear ffn_down;
  Linear ffn_up;
  bool normalize = true;
  bool residual = true;
  bool feed_forward = true;

  FusionBlock() = default;
  FusionBlock(Rng& rng, std::size_t dim, std::size_t heads)
      : ln_query(dim, true), ln_kv(dim, true), attn(rng, dim, heads, true), ln_ffn(dim, true),
        ffn_down(rng, dim, std::max<std::size_t>(1, dim / 2), true),
        ffn_up(rng, std::max<std::size_t>(1, dim / 2), dim, true, 0.0) {}

  // `query_src` feeds the query projection; `kv_src` feeds keys and values.
  Tensor operator()(const Tensor& query_src, const Tensor& kv_src) const {
    const Tensor q = normalize ? ln_query(query_src) : query_src;
    const Tensor kv = normalize ? ln_kv(kv_src) : kv_src;
    Tensor y = attn(q, kv);
    if (residual) y = ad::add(query_src, y);
    if (feed_forward) {
      const Tensor h = normalize ? ln_ffn(y) : y;
      y = ad::add(y, ffn_up(ad::gelu(ffn_down(h))));
    }
    return y;
  }

  void collect(ParameterSet& ps, const std::string& prefix) const {
    ln_query.collect(ps, prefix + ".ln_query");
    ln_kv.collect(ps, prefix + ".ln_kv");
    attn.collect(ps, prefix + ".attn");
    ln_ffn.collect(ps, prefix + ".ln_ffn");
    ffn_down.collect(ps, prefix + ".ffn_down");
    ffn_up.collect(ps, prefix + ".ffn_up");
  }
};

struct FusionBlockParams {
  FusionBlock sketch;
  FusionBlock infrared;
  FusionBlock text;
  FusionBlock fuse;

  FusionBlockParams() = default;
  FusionBlockParams(Rng& rng, std::size_t dim, std::size_t heads)
      : sketch(rng, dim, heads), infrared(rng, dim, heads), text(rng, dim, heads),
        fuse(rng, dim, heads) {}

  void collect(ParameterSet& ps, const std::string& prefix) const {
    sketch.collect(ps, prefix + ".tl_s");
    infrared.collect(ps, prefix + ".tl_ir");
    text.collect(ps, prefix + ".tl_t");
    fuse.collect(ps, prefix + ".tl_fu");
  }
};

// Captures the query-projection inputs of the three modality blocks.
struct FusionTrace {
  Tensor sketch_query;
  Tensor infrared_query;
  Tensor text_query;
};

namespace detail {

inline void check_triple(const ModalityTriple& triple, std::size_t dim) {
  for (const Tensor* t : {&triple.sketch, &triple.infrared, &triple.text}) {
    if (!t->defined()) throw ShapeError("fusion: empty modality sequence");
    if (t->rank() != 2 || t->cols() != dim) {
      throw ShapeError("fusion: sequence width " + std::to_string(t->cols()) +
                       " does not match model width " + std::to_string(dim));
    }
  }
}

// Elementwise sum after zero-padding both to the longer length.
inline Tensor padded_sum(const Tensor& a, const Tensor& b) {
  const std::size_t len = std::max(a.rows(), b.rows());
  const Tensor pa = a.rows() == len ? a : ad::pad_rows(a, len);
  const Tensor pb = b.rows() == len ? b : ad::pad_rows(b, len);
  return ad::add(pa, pb);
}

inline std::size_t block_width(const FusionBlock& b) { return b.attn.q_proj.in_features(); }

}  // namespace detail

inline Tensor cmqf_fuse(const ModalityTriple& triple, const FusionBlockParams& params,
                        FusionTrace* trace = nullptr) {
  detail::check_triple(triple, detail::block_width(params.fuse));
  const Tensor q_s = detail::padded_sum(triple.infrared, triple.text);
  const Tensor q_ir = detail::padded_sum(triple.sketch, triple.text);
  const Tensor q_t = detail::padded_sum(triple.sketch, triple.infrared);
  if (trace != nullptr) *trace = FusionTrace{q_s, q_ir, q_t};
  const Tensor y_s = params.sketch(q_s, triple.sketch);
  const Tensor y_ir = params.infrared(q_ir, triple.infrared);
  const Tensor y_t = params.text(q_t, triple.text);
  const Tensor y = ad::concat_rows({y_s, y_ir, y_t});
  return ad::mean_rows(params.fuse(y, y));
}

enum class FusionKind { cmqf, concat, sum, hierarchical, none };

inline const char* fusion_name(FusionKind k) {
  switch (k) {
    case FusionKind::cmqf: return "cmqf";
    case FusionKind::concat: return "concat";
    case FusionKind::sum: return "sum";
    case FusionKind::hierarchical: return "hierarchical";
    case FusionKind::none: return "none";
  }
  return "unknown";
}

inline FusionKind parse_fusion(const std::string& name) {
  if (name == "cmqf") return FusionKind::cmqf;
  if (name == "concat") return FusionKind::concat;
  if (name == "sum") return FusionKind::sum;
  if (name == "hierarchical") return FusionKind::hierarchical;
  if (name == "none") return FusionKind::none;
  throw Error("unknown fusion kind '" + name + "'");
}

// Baseline fusers over the same resolved triple.
//   concat:       shared block over the raw concatenation
//   sum:          shared block over the token-aligned (zero-padded) sum
//   hierarchical: per-modality self-attention, then the shared block
inline Tensor baseline_fuse(FusionKind kind, const ModalityTriple& triple,
                            const FusionBlockParams& params) {
  detail::check_triple(triple, detail::block_width(params.fuse));
  switch (kind) {
    case FusionKind::cmqf: return cmqf_fuse(triple, params);
    case FusionKind::concat: {
      const Tensor y = ad::concat_rows({triple.sketch, triple.infrared, triple.text});
      return ad::mean_rows(params.fuse(y, y));
    }
    case FusionKind::sum: {
      const Tensor y = detail::padded_sum(detail::padded_sum(triple.sketch, triple.infrared), triple.text);
      return ad::mean_rows(params.fuse(y, y));
    }
    case FusionKind::hierarchical: {
      const Tensor y = ad::concat_rows({params.sketch(triple.sketch, triple.sketch),
                                        params.infrared(triple.infrared, triple.infrared),
                                        params.text(triple.text, triple.text)});
      return ad::mean_rows(params.fuse(y, y));
    }
    case FusionKind::none: break;
  }
  throw Error("baseline_fuse: fusion kind has no token-level fuser");
}

struct FusedFeatureSet {
  // Indexed like all_modes(): t, s, ir, t+s, t+ir, s+ir, t+s+ir.
  std::array<Tensor, 7> queries;
  Tensor gallery;  // rgb global feature

  const Tensor& f_s() const { return queries[1]; }
  const Tensor& f_ir() const { return queries[2]; }
  const Tensor& f_t() const { return queries[0]; }
  const Tensor& f_s_ir() const { return queries[5]; }
  const Tensor& f_s_t() const { return queries[3]; }
  const Tensor& f_ir_t() const { return queries[4]; }
  const Tensor& f_s_ir_t() const { return queries[6]; }
};

inline FusedFeatureSet produce_fused_set(const ModalityBundle& bundle,
                                         const LearnableEmbeddingFeature& lef,
                                         const FusionBlockParams& params,
                                         const EncodedSequence& gallery,
                                         FusionKind kind = FusionKind::cmqf) {
  if (gallery.modality != Modality::rgb) throw Error("produce_fused_set: gallery must be rgb");
  FusedFeatureSet out;
  const auto& modes = all_modes();
  for (std::size_t i = 0; i < modes.size(); ++i) {
    const ModalityTriple triple = resolve_bundle(bundle.restrict_to(modes[i]), lef, modes[i]);
    out.queries[i] = kind == FusionKind::cmqf ? cmqf_fuse(triple, params)
                                              : baseline_fuse(kind, triple, params);
  }
  out.gallery = gallery.global_feature;
  return out;
}

}  // namespace flexireid
