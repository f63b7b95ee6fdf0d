// SPDX-License-Identifier: Apache-2.0
#pragma once

// Toy-scale image and text encoders with frozen embeddings and attention.
//
// Each block is pre-norm: x += MHA(LN(x)); x += MoE(LN(x)). The MoE adapter
// path is the only trainable part of a block. One visual encoder serves the
// rgb, sketch and infrared modalities; the text encoder is separate.

#include <cstdint>
#include <string>
#include <vector>

#include "flexireid/autodiff.hpp"
#include "flexireid/moe.hpp"
#include "flexireid/nn.hpp"
#include "flexireid/rng.hpp"

namespace flexireid {

enum class Modality : std::uint8_t { rgb = 0, sketch = 1, infrared = 2, text = 3 };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::rgb: return "rgb";
    case Modality::sketch: return "sketch";
    case Modality::infrared: return "infrared";
    case Modality::text: return "text";
  }
  return "unknown";
}

struct EncoderConfig {
  std::size_t model_dim = 32;
  std::size_t num_blocks = 2;
  std::size_t num_heads = 4;
  std::size_t patch_rows = 8;
  std::size_t patch_cols = 4;
  std::size_t patch_height = 2;  // pixels per patch, vertical
  std::size_t patch_width = 2;   // pixels per patch, horizontal
  std::size_t channels = 3;
  std::size_t vocab_size = 128;
  std::size_t max_text_len = 20;
  std::uint64_t freeze_seed = 7;

  // The pretrained backbone this stands in for uses a 49,152-word vocabulary,
  // 77-token text and 384x128 images; those sizes are far beyond toy scale.
  static constexpr std::size_t full_scale_vocab_size = 49152;
  static constexpr std::size_t full_scale_text_len = 77;
  static constexpr std::size_t full_scale_image_height = 384;
  static constexpr std::size_t full_scale_image_width = 128;

  std::size_t image_height() const { return patch_rows * patch_height; }
  std::size_t image_width() const { return patch_cols * patch_width; }
  std::size_t num_patches() const { return patch_rows * patch_cols; }
  std::size_t patch_dim() const { return channels * patch_height * patch_width; }

  void validate() const {
    if (model_dim == 0 || num_blocks == 0 || num_heads == 0 || patch_rows == 0 ||
        patch_cols == 0 || patch_height == 0 || patch_width == 0 || channels == 0 ||
        vocab_size == 0) {
      throw Error("encoder config: dimensions must be positive");
    }
    if (model_dim % num_heads != 0) throw Error("encoder config: model_dim mod num_heads != 0");
    if (max_text_len < 3) throw Error("encoder config: max_text_len must be >= 3");
    if (model_dim < 4) throw Error("encoder config: model_dim must be >= 4 for adapters");
  }
};

// Channel-major pixel grid [channels, height, width].
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  bool operator==(const Image&) const = default;
};

struct EncodedSequence {
  Tensor tokens;          // [seq_len, model_dim]
  Tensor global_feature;  // [model_dim]
  Modality modality = Modality::rgb;

  std::size_t seq_len() const { return tokens.rows(); }
};

// Frozen attention sublayer plus the trainable MoE adapter path.
struct EncoderBlock {
  LayerNorm ln_attn;
  MultiHeadAttention attn;
  LayerNorm ln_moe;

  EncoderBlock() = default;
  EncoderBlock(Rng& rng, const EncoderConfig& cfg)
      : ln_attn(cfg.model_dim, false), attn(rng, cfg.model_dim, cfg.num_heads, false),
        ln_moe(cfg.model_dim, false) {}

  // `moe` may be null, leaving only the attention sublayer.
  Tensor operator()(const Tensor& x, const AEAMoELayer* moe, AdaptiveLossAccumulator* ada) const {
    const Tensor normed = ln_attn(x);
    Tensor h = ad::add(x, attn(normed, normed));
    if (moe == nullptr) return h;
    MoeOutput routed = moe->forward(ln_moe(h));
    if (ada != nullptr) ada->add(routed);
    return ad::add(h, routed.y);
  }

  void collect(ParameterSet& ps, const std::string& prefix) const {
    ln_attn.collect(ps, prefix + ".ln_attn");
    attn.collect(ps, prefix + ".attn");
    ln_moe.collect(ps, prefix + ".ln_moe");
  }
};

namespace detail {

inline std::vector<AEAMoELayer> make_moe_stack(Rng& rng, const EncoderConfig& cfg,
                                               const MoeSettings* settings) {
  std::vector<AEAMoELayer> layers;
  if (settings == nullptr) return layers;
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) layers.emplace_back(rng, cfg.model_dim, *settings);
  return layers;
}

}  // namespace detail

class VisualEncoder {
 public:
  VisualEncoder() = default;

  // Frozen weights come from cfg.freeze_seed; adapters from `adapter_rng`.
  // A null `moe` builds the encoder without adapters.
  VisualEncoder(const EncoderConfig& cfg, const MoeSettings* moe, Rng& adapter_rng) : cfg_(cfg) {
    cfg.validate();
    Rng rng(derive_seed(cfg.freeze_seed, 0x5649535541ULL));
    patch_embed_ = Linear(rng, cfg.patch_dim(), cfg.model_dim, false);
    cls_ = normal_tensor(rng, {1, cfg.model_dim}, 1.0, false);
    pos_ = normal_tensor(rng, {cfg.num_patches() + 1, cfg.model_dim}, 0.1, false);
    for (std::size_t b = 0; b < cfg.num_blocks; ++b) blocks_.emplace_back(rng, cfg);
    ln_post_ = LayerNorm(cfg.model_dim, false);
    moe_ = detail::make_moe_stack(adapter_rng, cfg, moe);
  }

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<AEAMoELayer>& moe_layers() const { return moe_; }
  std::vector<AEAMoELayer>& moe_layers() { return moe_; }

  // [num_patches, patch_dim], patches in row-major grid order, each patch
  // flattened channel-major.
  Tensor patchify(const Image& img) const {
    if (img.pixels.size() != img.channels * img.height * img.width || img.pixels.empty()) {
      throw ShapeError("encode_image: pixel buffer does not match its dimensions");
    }
    if (img.height % cfg_.patch_rows != 0 || img.width % cfg_.patch_cols != 0) {
      throw ShapeError("encode_image: " + std::to_string(img.height) + "x" +
                       std::to_string(img.width) + " grid is not divisible into " +
                       std::to_string(cfg_.patch_rows) + "x" + std::to_string(cfg_.patch_cols) +
                       " patches");
    }
    const std::size_t ph = img.height / cfg_.patch_rows;
    const std::size_t pw = img.width / cfg_.patch_cols;
    if (img.channels != cfg_.channels || ph != cfg_.patch_height || pw != cfg_.patch_width) {
      throw Error("encode_image: image " + std::to_string(img.channels) + "x" +
                  std::to_string(img.height) + "x" + std::to_string(img.width) +
                  " does not match encoder config " + std::to_string(cfg_.channels) + "x" +
                  std::to_string(cfg_.image_height()) + "x" + std::to_string(cfg_.image_width()));
    }
    std::vector<double> out;
    out.reserve(cfg_.num_patches() * cfg_.patch_dim());
    for (std::size_t gr = 0; gr < cfg_.patch_rows; ++gr)
      for (std::size_t gc = 0; gc < cfg_.patch_cols; ++gc)
        for (std::size_t c = 0; c < img.channels; ++c)
          for (std::size_t y = 0; y < ph; ++y)
            for (std::size_t x = 0; x < pw; ++x) out.push_back(img.at(c, gr * ph + y, gc * pw + x));
    return Tensor({cfg_.num_patches(), cfg_.patch_dim()}, std::move(out));
  }

  EncodedSequence encode(const Image& img, Modality modality,
                         AdaptiveLossAccumulator* ada = nullptr) const {
    if (modality == Modality::text) throw Error("encode_image: text is not a visual modality");
    Tensor x = ad::concat_rows({cls_, patch_embed_(patchify(img))});
    x = ad::add(x, pos_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      x = blocks_[b](x, moe_.empty() ? nullptr : &moe_[b], ada);
    }
    x = ln_post_(x);
    return EncodedSequence{x, ad::reshape(ad::slice_rows(x, 0, 1), {cfg_.model_dim}), modality};
  }

  void collect(ParameterSet& ps, const std::string& prefix) const {
    patch_embed_.collect(ps, prefix + ".patch_embed");
    ps.add(prefix + ".cls", cls_);
    ps.add(prefix + ".pos", pos_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      blocks_[b].collect(ps, prefix + ".block" + std::to_string(b));
    }
    ln_post_.collect(ps, prefix + ".ln_post");
    for (std::size_t b = 0; b < moe_.size(); ++b) {
      moe_[b].collect(ps, prefix + ".moe" + std::to_string(b));
    }
  }

 private:
  EncoderConfig cfg_;
  Linear patch_embed_;
  Tensor cls_;
  Tensor pos_;
  std::vector<EncoderBlock> blocks_;
  LayerNorm ln_post_;
  std::vector<AEAMoELayer> moe_;
};

class TextEncoder {
 public:
  TextEncoder() = default;

  TextEncoder(const EncoderConfig& cfg, const MoeSettings* moe, Rng& adapter_rng) : cfg_(cfg) {
    cfg.validate();
    Rng rng(derive_seed(cfg.freeze_seed, 0x54455854ULL));
    word_embed_ = normal_tensor(rng, {cfg.vocab_size, cfg.model_dim}, 1.0, false);
    bos_ = normal_tensor(rng, {1, cfg.model_dim}, 1.0, false);
    eos_ = normal_tensor(rng, {1, cfg.model_dim}, 1.0, false);
    pos_ = normal_tensor(rng, {cfg.max_text_len, cfg.model_dim}, 0.1, false);
    for (std::size_t b = 0; b < cfg.num_blocks; ++b) blocks_.emplace_back(rng, cfg);
    ln_post_ = LayerNorm(cfg.model_dim, false);
    moe_ = detail::make_moe_stack(adapter_rng, cfg, moe);
  }

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<AEAMoELayer>& moe_layers() const { return moe_; }
  std::vector<AEAMoELayer>& moe_layers() { return moe_; }

  // BOS + tokens + EOS; the global feature is the output row at EOS.
  EncodedSequence encode(const std::vector<std::uint32_t>& token_ids,
                         AdaptiveLossAccumulator* ada = nullptr) const {
    if (token_ids.size() + 2 > cfg_.max_text_len) {
      throw Error("encode_text: " + std::to_string(token_ids.size()) +
                  " tokens exceed the limit of " + std::to_string(cfg_.max_text_len - 2));
    }
    const std::size_t d = cfg_.model_dim;
    const std::size_t len = token_ids.size() + 2;
    std::vector<double> rows;
    rows.reserve(len * d);
    auto bos = bos_.data();
    rows.insert(rows.end(), bos.begin(), bos.end());
    for (auto id : token_ids) {
      if (id >= cfg_.vocab_size) {
        throw Error("encode_text: token id " + std::to_string(id) + " outside vocabulary of " +
                    std::to_string(cfg_.vocab_size));
      }
      auto row = word_embed_.data().subspan(static_cast<std::size_t>(id) * d, d);
      rows.insert(rows.end(), row.begin(), row.end());
    }
    auto eos = eos_.data();
    rows.insert(rows.end(), eos.begin(), eos.end());
    // Embeddings are frozen, so the lookup needs no tape node.
    Tensor x({len, d}, std::move(rows));
    x = ad::add(x, ad::slice_rows(pos_, 0, len));
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      x = blocks_[b](x, moe_.empty() ? nullptr : &moe_[b], ada);
    }
    x = ln_post_(x);
    return EncodedSequence{x, ad::reshape(ad::slice_rows(x, len - 1, 1), {d}), Modality::text};
  }

  void collect(ParameterSet& ps, const std::string& prefix) const {
    ps.add(prefix + ".word_embed", word_embed_);
    ps.add(prefix + ".bos", bos_);
    ps.add(prefix + ".eos", eos_);
    ps.add(prefix + ".pos", pos_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      blocks_[b].collect(ps, prefix + ".block" + std::to_string(b));
    }
    ln_post_.collect(ps, prefix + ".ln_post");
    for (std::size_t b = 0; b < moe_.size(); ++b) {
      moe_[b].collect(ps, prefix + ".moe" + std::to_string(b));
    }
  }

 private:
  EncoderConfig cfg_;
  Tensor word_embed_;
  Tensor bos_;
  Tensor eos_;
  Tensor pos_;
  std::vector<EncoderBlock> blocks_;
  LayerNorm ln_post_;
  std::vector<AEAMoELayer> moe_;
};

}  // namespace flexireid
