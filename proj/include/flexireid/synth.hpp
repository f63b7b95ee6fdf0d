// SPDX-License-Identifier: Apache-2.0
#pragma once

// Deterministic four-modality toy dataset.
//
// Every identity owns a latent vector. Visual samples (rgb, sketch,
// infrared) are a per-modality linear map of the latent plus noise, laid out
// on the encoder's pixel grid. Text samples quantize each latent dimension
// into a bin and emit one token per (dimension, bin) pair.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "flexireid/binary_io.hpp"
#include "flexireid/encoder.hpp"
#include "flexireid/rng.hpp"

namespace flexireid {

struct SyntheticConfig {
  std::size_t num_identities = 64;
  std::size_t test_identities = 32;
  std::size_t samples_per_identity = 2;  // per modality
  std::size_t latent_dim = 16;
  double noise_scale = 0.1;
  // Weight of the transform shared by all visual modalities; the remainder
  // is modality specific.
  double modality_shared = 0.5;
  std::uint64_t modality_seed = 11;
  std::size_t text_tokens = 16;
  std::size_t text_levels = 8;
  std::uint64_t seed = 1;

  // Image geometry and vocabulary follow the encoder.
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 8;
  std::size_t vocab_size = 128;
  std::size_t max_text_len = 20;

  std::size_t train_identities() const { return num_identities - test_identities; }

  void adopt_encoder(const EncoderConfig& enc) {
    channels = enc.channels;
    height = enc.image_height();
    width = enc.image_width();
    vocab_size = enc.vocab_size;
    max_text_len = enc.max_text_len;
  }

  void validate() const {
    if (num_identities < 2) throw Error("synthetic config: num_identities must be >= 2");
    if (test_identities < 1 || test_identities >= num_identities) {
      throw Error("synthetic config: test_identities must lie in [1, num_identities)");
    }
    if (samples_per_identity < 1 || latent_dim < 1 || text_levels < 1) {
      throw Error("synthetic config: counts must be positive");
    }
    if (!(noise_scale >= 0.0)) throw Error("synthetic config: noise_scale must be >= 0");
    if (!(modality_shared >= 0.0 && modality_shared <= 1.0)) {
      throw Error("synthetic config: modality_shared must lie in [0, 1]");
    }
    if (text_tokens + 2 > max_text_len) {
      throw Error("synthetic config: text_tokens " + std::to_string(text_tokens) +
                  " exceed max_text_len - 2 = " + std::to_string(max_text_len - 2));
    }
    if (latent_dim * text_levels > vocab_size) {
      throw Error("synthetic config: latent_dim * text_levels exceeds vocab_size");
    }
  }

  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "num_identities=" << num_identities << '\n'
       << "test_identities=" << test_identities << '\n'
       << "samples_per_identity=" << samples_per_identity << '\n'
       << "latent_dim=" << latent_dim << '\n'
       << "noise_scale=" << noise_scale << '\n'
       << "modality_shared=" << modality_shared << '\n'
       << "modality_seed=" << modality_seed << '\n'
       << "text_tokens=" << text_tokens << '\n'
       << "text_levels=" << text_levels << '\n'
       << "seed=" << seed << '\n'
       << "channels=" << channels << '\n'
       << "height=" << height << '\n'
       << "width=" << width << '\n'
       << "vocab_size=" << vocab_size << '\n'
       << "max_text_len=" << max_text_len << '\n';
    return os.str();
  }
};

using TokenIds = std::vector<std::uint32_t>;

struct Sample {
  std::uint32_t identity = 0;
  Modality modality = Modality::rgb;
  std::uint32_t index = 0;  // sample number within (identity, modality)
  std::variant<Image, TokenIds> payload;

  const Image& image() const { return std::get<Image>(payload); }
  const TokenIds& tokens() const { return std::get<TokenIds>(payload); }
  bool operator==(const Sample&) const = default;
};

enum class SplitTag : std::uint8_t { train = 0, test = 1 };

struct DatasetSplit {
  SplitTag tag = SplitTag::train;
  std::string config_echo;
  std::vector<Sample> samples;

  bool operator==(const DatasetSplit&) const = default;

  std::vector<std::uint32_t> identities() const {
    std::vector<std::uint32_t> ids;
    for (const auto& s : samples) ids.push_back(s.identity);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
  }

  // Samples of one identity and modality, ordered by sample index.
  std::vector<const Sample*> find(std::uint32_t identity, Modality modality) const {
    std::vector<const Sample*> out;
    for (const auto& s : samples)
      if (s.identity == identity && s.modality == modality) out.push_back(&s);
    std::sort(out.begin(), out.end(), [](const Sample* a, const Sample* b) { return a->index < b->index; });
    return out;
  }

  std::size_t count(Modality modality) const {
    return static_cast<std::size_t>(std::count_if(
        samples.begin(), samples.end(), [&](const Sample& s) { return s.modality == modality; }));
  }
};

struct SyntheticDataset {
  DatasetSplit train;
  DatasetSplit test;
};

namespace detail {

inline std::vector<double> modality_transform(Rng& rng, std::size_t out_dim, std::size_t latent_dim) {
  return rng.normal_vector(out_dim * latent_dim, 1.0 / std::sqrt(static_cast<double>(latent_dim)));
}

inline std::uint32_t quantize(double v, std::size_t levels) {
  // Latents are standard normal; bins span [-2.5, 2.5].
  const double unit = (v + 2.5) / 5.0;
  const auto bin = static_cast<long long>(std::floor(unit * static_cast<double>(levels)));
  return static_cast<std::uint32_t>(std::clamp<long long>(bin, 0, static_cast<long long>(levels) - 1));
}

}  // namespace detail

inline SyntheticDataset generate(const SyntheticConfig& cfg) {
  cfg.validate();
  const std::size_t pixels = cfg.channels * cfg.height * cfg.width;
  const std::size_t dim = cfg.latent_dim;

  Rng transform_rng(cfg.modality_seed);
  const auto shared = detail::modality_transform(transform_rng, pixels, dim);
  std::array<std::vector<double>, 3> transforms;
  const double ws = std::sqrt(cfg.modality_shared);
  const double wm = std::sqrt(1.0 - cfg.modality_shared);
  for (auto& m : transforms) {
    const auto specific = detail::modality_transform(transform_rng, pixels, dim);
    m.resize(specific.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = ws * shared[i] + wm * specific[i];
  }

  Rng rng(cfg.seed);
  std::vector<std::vector<double>> latents(cfg.num_identities);
  for (auto& z : latents) z = rng.normal_vector(dim, 1.0);

  SyntheticDataset ds;
  ds.train.tag = SplitTag::train;
  ds.test.tag = SplitTag::test;
  ds.train.config_echo = ds.test.config_echo = cfg.to_text();
  const std::size_t first_test = cfg.train_identities();

  for (std::size_t id = 0; id < cfg.num_identities; ++id) {
    DatasetSplit& split = id < first_test ? ds.train : ds.test;
    const auto& z = latents[id];
    for (Modality m : {Modality::rgb, Modality::sketch, Modality::infrared}) {
      const auto& transform = transforms[static_cast<std::size_t>(m)];
      for (std::size_t k = 0; k < cfg.samples_per_identity; ++k) {
        Image img{cfg.channels, cfg.height, cfg.width, std::vector<double>(pixels)};
        for (std::size_t p = 0; p < pixels; ++p) {
          double v = 0.0;
          for (std::size_t j = 0; j < dim; ++j) v += transform[p * dim + j] * z[j];
          img.pixels[p] = v + cfg.noise_scale * rng.normal();
        }
        split.samples.push_back(Sample{static_cast<std::uint32_t>(id), m,
                                       static_cast<std::uint32_t>(k), std::move(img)});
      }
    }
    for (std::size_t k = 0; k < cfg.samples_per_identity; ++k) {
      TokenIds tokens(cfg.text_tokens);
      for (std::size_t t = 0; t < cfg.text_tokens; ++t) {
        const std::size_t j = t % dim;
        const double v = z[j] + cfg.noise_scale * rng.normal();
        tokens[t] = static_cast<std::uint32_t>(j * cfg.text_levels) + detail::quantize(v, cfg.text_levels);
      }
      split.samples.push_back(Sample{static_cast<std::uint32_t>(id), Modality::text,
                                     static_cast<std::uint32_t>(k), std::move(tokens)});
    }
  }
  return ds;
}

// Also exposes the identity latents, for generator sanity checks.
inline std::vector<std::vector<double>> identity_latents(const SyntheticConfig& cfg) {
  Rng rng(cfg.seed);
  std::vector<std::vector<double>> latents(cfg.num_identities);
  for (auto& z : latents) z = rng.normal_vector(cfg.latent_dim, 1.0);
  return latents;
}

// --- Binary container -----------------------------------------------------
//   "CIRS" | u32 version | str config | u8 split | u64 count | records
//   record: u32 identity | u8 modality | u32 index | u8 kind | payload
//   image payload: u32 channels, height, width | f64s pixels
//   text payload:  u64 count | u32 ids

inline constexpr std::string_view kDatasetMagic = "CIRS";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::string serialize(const DatasetSplit& split) {
  ByteWriter w;
  w.raw(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.str(split.config_echo);
  w.u8(static_cast<std::uint8_t>(split.tag));
  w.u64(split.samples.size());
  for (const auto& s : split.samples) {
    w.u32(s.identity);
    w.u8(static_cast<std::uint8_t>(s.modality));
    w.u32(s.index);
    if (const auto* img = std::get_if<Image>(&s.payload)) {
      w.u8(0);
      w.u32(static_cast<std::uint32_t>(img->channels));
      w.u32(static_cast<std::uint32_t>(img->height));
      w.u32(static_cast<std::uint32_t>(img->width));
      w.f64s(img->pixels);
    } else {
      const auto& ids = std::get<TokenIds>(s.payload);
      w.u8(1);
      w.u64(ids.size());
      for (auto id : ids) w.u32(id);
    }
  }
  return w.bytes();
}

inline DatasetSplit deserialize(std::string_view bytes) {
  if (bytes.empty()) throw TruncationError("dataset: empty file");
  ByteReader r(bytes);
  if (bytes.size() < kDatasetMagic.size() || r.raw(kDatasetMagic.size()) != kDatasetMagic) {
    throw FormatError("dataset: bad magic header");
  }
  const auto version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError("dataset: unsupported format version " + std::to_string(version));
  }
  DatasetSplit split;
  split.config_echo = r.str();
  const auto tag = r.u8();
  if (tag > 1) throw FormatError("dataset: invalid split tag");
  split.tag = static_cast<SplitTag>(tag);
  const auto count = r.checked_size(r.u64(), 10);
  split.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Sample s;
    s.identity = r.u32();
    const auto modality = r.u8();
    if (modality > 3) throw FormatError("dataset: invalid modality tag");
    s.modality = static_cast<Modality>(modality);
    s.index = r.u32();
    const auto kind = r.u8();
    if (kind == 0) {
      Image img;
      img.channels = r.u32();
      img.height = r.u32();
      img.width = r.u32();
      img.pixels = r.f64s();
      if (img.pixels.size() != img.channels * img.height * img.width) {
        throw FormatError("dataset: image dimensions do not match pixel count");
      }
      if (s.modality == Modality::text) throw FormatError("dataset: text sample with image payload");
      s.payload = std::move(img);
    } else if (kind == 1) {
      TokenIds ids(r.checked_size(r.u64(), 4));
      for (auto& id : ids) id = r.u32();
      if (s.modality != Modality::text) throw FormatError("dataset: visual sample with token payload");
      s.payload = std::move(ids);
    } else {
      throw FormatError("dataset: invalid payload kind");
    }
    split.samples.push_back(std::move(s));
  }
  if (!r.done()) throw FormatError("dataset: trailing bytes after last record");
  return split;
}

inline void save(const DatasetSplit& split, const std::filesystem::path& path) {
  write_file_atomic(path, serialize(split));
}

inline DatasetSplit load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

// Per-identity/modality counts as printable text.
inline std::string describe(const DatasetSplit& split) {
  std::map<std::uint32_t, std::array<std::size_t, 4>> counts;
  for (const auto& s : split.samples) counts[s.identity][static_cast<std::size_t>(s.modality)]++;
  std::ostringstream os;
  os << "split " << (split.tag == SplitTag::train ? "train" : "test") << ": " << counts.size()
     << " identities, " << split.samples.size() << " samples (rgb " << split.count(Modality::rgb)
     << ", sketch " << split.count(Modality::sketch) << ", infrared "
     << split.count(Modality::infrared) << ", text " << split.count(Modality::text) << ")\n";
  os << "identity,rgb,sketch,infrared,text\n";
  for (const auto& [id, c] : counts) {
    os << id << ',' << c[0] << ',' << c[1] << ',' << c[2] << ',' << c[3] << '\n';
  }
  return os.str();
}

}  // namespace flexireid
