// SPDX-License-Identifier: Apache-2.0
#pragma once

// Full retrieval model: shared visual encoder, text encoder, query fusion
// and placeholder features, plus the frozen/trainable parameter split.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "flexireid/autodiff.hpp"
#include "flexireid/binary_io.hpp"
#include "flexireid/encoder.hpp"
#include "flexireid/fusion.hpp"
#include "flexireid/moe.hpp"
#include "flexireid/nn.hpp"
#include "flexireid/synth.hpp"

namespace flexireid {

struct ModelConfig {
  EncoderConfig encoder;
  bool use_moe = true;
  MoeSettings moe;
  FusionKind fusion = FusionKind::cmqf;
  PlaceholderKind placeholders = PlaceholderKind::learned;
  std::size_t placeholder_len = 4;
  std::uint64_t init_seed = 1;
};

struct ParameterPartition {
  ParameterSet frozen;
  ParameterSet trainable;
};

// Encodings of one identity's rgb, sketch, infrared and text samples.
struct IdentityEncodings {
  EncodedSequence rgb;
  EncodedSequence sketch;
  EncodedSequence infrared;
  EncodedSequence text;
};

class FlexiReIDModel {
 public:
  explicit FlexiReIDModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.encoder.validate();
    Rng adapter_rng(derive_seed(cfg.init_seed, 1));
    const MoeSettings* moe = cfg.use_moe ? &cfg_.moe : nullptr;
    visual_ = VisualEncoder(cfg.encoder, moe, adapter_rng);
    text_ = TextEncoder(cfg.encoder, moe, adapter_rng);
    Rng fusion_rng(derive_seed(cfg.init_seed, 2));
    fusion_ = FusionBlockParams(fusion_rng, cfg.encoder.model_dim, cfg.encoder.num_heads);
    Rng lef_rng(derive_seed(cfg.init_seed, 3));
    lef_ = LearnableEmbeddingFeature(lef_rng, cfg.placeholder_len, cfg.encoder.model_dim,
                                     cfg.placeholders);

    visual_.collect(params_, "visual");
    text_.collect(params_, "text");
    if (uses_token_fusion()) {
      fusion_.collect(params_, "fusion");
      lef_.collect(params_, "lef");
    }
  }

  const ModelConfig& config() const { return cfg_; }
  const VisualEncoder& visual() const { return visual_; }
  VisualEncoder& visual() { return visual_; }
  const TextEncoder& text() const { return text_; }
  TextEncoder& text() { return text_; }
  const FusionBlockParams& fusion() const { return fusion_; }
  FusionBlockParams& fusion() { return fusion_; }
  const LearnableEmbeddingFeature& placeholders() const { return lef_; }
  const ParameterSet& parameters() const { return params_; }
  ParameterSet& parameters() { return params_; }

  bool uses_token_fusion() const { return cfg_.fusion != FusionKind::none; }

  ParameterPartition freeze_partition() const {
    return ParameterPartition{params_.frozen(), params_.trainable()};
  }

  // Every encoder MoE layer, visual first.
  std::vector<AEAMoELayer*> moe_layers() {
    std::vector<AEAMoELayer*> out;
    for (auto& l : visual_.moe_layers()) out.push_back(&l);
    for (auto& l : text_.moe_layers()) out.push_back(&l);
    return out;
  }

  EncodedSequence encode(const Sample& s, AdaptiveLossAccumulator* ada = nullptr) const {
    if (s.modality == Modality::text) return text_.encode(s.tokens(), ada);
    return visual_.encode(s.image(), s.modality, ada);
  }

  IdentityEncodings encode_identity(const Sample& rgb, const Sample& sketch, const Sample& infrared,
                                    const Sample& text, AdaptiveLossAccumulator* ada = nullptr) const {
    return IdentityEncodings{encode(rgb, ada), encode(sketch, ada), encode(infrared, ada),
                             encode(text, ada)};
  }

  // Query feature for `mode` from whichever encodings the mode needs; the
  // unused slots may be null.
  Tensor query_feature(const RetrievalMode& mode, const EncodedSequence* sketch,
                       const EncodedSequence* infrared, const EncodedSequence* text) const {
    if (!mode.valid()) throw Error("query_feature: empty retrieval mode");
    if ((mode.sketch && !sketch) || (mode.infrared && !infrared) || (mode.text && !text)) {
      throw Error("query_feature: missing encoding for mode " + mode.name());
    }
    if (!uses_token_fusion()) {
      // Without a fusion module, the query is the mean of the normalized
      // global features of the present modalities.
      std::vector<Tensor> globals;
      if (mode.sketch) globals.push_back(sketch->global_feature);
      if (mode.infrared) globals.push_back(infrared->global_feature);
      if (mode.text) globals.push_back(text->global_feature);
      return ad::mean_rows(ad::l2_normalize_rows(stack_rows(globals)));
    }
    ModalityBundle bundle;
    if (mode.sketch) bundle.sketch = sketch->tokens;
    if (mode.infrared) bundle.infrared = infrared->tokens;
    if (mode.text) bundle.text = text->tokens;
    const ModalityTriple triple = resolve_bundle(bundle, lef_, mode);
    return cfg_.fusion == FusionKind::cmqf ? cmqf_fuse(triple, fusion_)
                                           : baseline_fuse(cfg_.fusion, triple, fusion_);
  }

  FusedFeatureSet fused_set(const IdentityEncodings& enc) const {
    FusedFeatureSet out;
    const auto& modes = all_modes();
    for (std::size_t i = 0; i < modes.size(); ++i) {
      out.queries[i] = query_feature(modes[i], &enc.sketch, &enc.infrared, &enc.text);
    }
    out.gallery = enc.rgb.global_feature;
    return out;
  }

  // FNV-1a over the raw bytes of every frozen parameter, in registry order.
  std::uint64_t frozen_digest() const { return digest(params_.frozen()); }
  std::uint64_t trainable_digest() const { return digest(params_.trainable()); }

  static std::uint64_t digest(const ParameterSet& ps) {
    std::uint64_t h = fnv1a64("");
    for (const auto& e : ps.entries()) {
      h = fnv1a64(e.name, h);
      auto data = e.value.data();
      h = fnv1a64(std::string_view(reinterpret_cast<const char*>(data.data()), data.size_bytes()), h);
    }
    return h;
  }

 private:
  ModelConfig cfg_;
  VisualEncoder visual_;
  TextEncoder text_;
  FusionBlockParams fusion_;
  LearnableEmbeddingFeature lef_;
  ParameterSet params_;
};

}  // namespace flexireid
