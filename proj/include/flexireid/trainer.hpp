// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training loop: identity-balanced batches of one sample per modality,
// Adam on the trainable partition with cosine-decayed learning rate and
// global-norm clipping, plus versioned checkpoints.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flexireid/autodiff.hpp"
#include "flexireid/binary_io.hpp"
#include "flexireid/config.hpp"
#include "flexireid/loss.hpp"
#include "flexireid/model.hpp"
#include "flexireid/moe.hpp"
#include "flexireid/nn.hpp"
#include "flexireid/rng.hpp"
#include "flexireid/synth.hpp"

namespace flexireid {

class Adam {
 public:
  Adam() = default;
  Adam(const ParameterSet& trainable, double beta1, double beta2, double eps)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& e : trainable.entries()) {
      m_.emplace_back(e.value.numel(), 0.0);
      v_.emplace_back(e.value.numel(), 0.0);
    }
  }

  // Parameters without a gradient this step are left untouched.
  void step(ParameterSet& trainable, double lr) {
    if (trainable.size() != m_.size()) throw Error("adam: parameter count changed");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto& entries = trainable.entries();
    for (std::size_t k = 0; k < entries.size(); ++k) {
      Tensor& p = entries[k].value;
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.mutable_data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

  std::uint64_t steps() const { return t_; }

  void write(ByteWriter& w) const {
    w.f64(beta1_);
    w.f64(beta2_);
    w.f64(eps_);
    w.u64(t_);
    w.u64(m_.size());
    for (std::size_t k = 0; k < m_.size(); ++k) {
      w.f64s(m_[k]);
      w.f64s(v_[k]);
    }
  }

  void read(ByteReader& r) {
    beta1_ = r.f64();
    beta2_ = r.f64();
    eps_ = r.f64();
    t_ = r.u64();
    const auto n = r.checked_size(r.u64(), 16);
    m_.assign(n, {});
    v_.assign(n, {});
    for (std::size_t k = 0; k < n; ++k) {
      m_[k] = r.f64s();
      v_[k] = r.f64s();
    }
  }

  bool operator==(const Adam&) const = default;

 private:
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

inline double cosine_lr(double base, std::size_t epoch, std::size_t epochs) {
  return base * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(epochs)));
}

// Scales all gradients so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
inline double clip_grad_norm(ParameterSet& params, double max_norm) {
  double ss = 0.0;
  for (const auto& e : params.entries())
    for (double g : e.value.grad()) ss += g * g;
  const double norm = std::sqrt(ss);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& e : params.entries())
      if (e.value.has_grad())
        for (double& g : e.value.grad_buffer()) g *= s;
  }
  return norm;
}

// One identity's rgb, sketch, infrared and text samples.
using IdentityQuad = std::array<const Sample*, 4>;

struct Batch {
  Labels labels;
  std::vector<IdentityQuad> samples;
};

// One epoch: samples_per_identity rounds, each a fresh shuffle of the
// identities cut into full batches; a trailing partial batch is dropped.
// Each identity contributes one randomly chosen sample per modality.
inline std::vector<Batch> epoch_batches(const DatasetSplit& split, std::size_t batch_identities,
                                        Rng& rng) {
  auto ids = split.identities();
  if (ids.empty()) throw Error("train: empty split");
  const std::size_t b = std::min(batch_identities, ids.size());
  std::size_t rounds = SIZE_MAX;
  for (auto id : ids)
    for (auto m : {Modality::rgb, Modality::sketch, Modality::infrared, Modality::text}) {
      const auto n = split.find(id, m).size();
      if (n == 0) throw Error("train: identity " + std::to_string(id) + " lacks " + modality_name(m));
      rounds = std::min(rounds, n);
    }
  std::vector<Batch> batches;
  for (std::size_t round = 0; round < rounds; ++round) {
    rng.shuffle(ids);
    for (std::size_t start = 0; start + b <= ids.size(); start += b) {
      Batch batch;
      for (std::size_t i = start; i < start + b; ++i) {
        IdentityQuad quad{};
        for (auto m : {Modality::rgb, Modality::sketch, Modality::infrared, Modality::text}) {
          const auto found = split.find(ids[i], m);
          quad[static_cast<std::size_t>(m)] = found[rng.below(found.size())];
        }
        batch.labels.push_back(ids[i]);
        batch.samples.push_back(quad);
      }
      batches.push_back(std::move(batch));
    }
  }
  return batches;
}

struct LossBreakdown {
  Tensor total;
  Tensor sdm;
  Tensor ada;
  std::array<double, 7> per_family{};
  double mean_activated = 0.0;
};

// Forward pass of the full objective on one batch, recorded on the active tape.
inline LossBreakdown batch_loss(const FlexiReIDModel& model, const Batch& batch, const SDMConfig& loss,
                                double lambda) {
  AdaptiveLossAccumulator ada;
  std::vector<FusedFeatureSet> fused;
  for (const auto& quad : batch.samples) {
    const auto enc = model.encode_identity(*quad[0], *quad[1], *quad[2], *quad[3], &ada);
    fused.push_back(model.fused_set(enc));
  }
  LossBreakdown out;
  out.sdm = sdm_sum(fused, batch.labels, loss, &out.per_family);
  out.ada = ada.mean();
  out.total = total_loss(out.sdm, out.ada, lambda);
  out.mean_activated = ada.mean_activated();
  return out;
}

struct StepResult {
  double total = 0.0;
  double sdm = 0.0;
  double ada = 0.0;
  double grad_norm = 0.0;
  double mean_activated = 0.0;
};

// One optimizer update of the trainable partition.
inline StepResult train_step(FlexiReIDModel& model, const Batch& batch, Adam& adam, double lr,
                             const RunConfig& cfg) {
  ParameterSet trainable = model.parameters().trainable();
  trainable.zero_grad();
  ad::Tape tape;
  StepResult r;
  {
    ad::TapeScope scope(tape);
    const LossBreakdown loss = batch_loss(model, batch, cfg.loss, cfg.train.lambda);
    r.total = loss.total.item();
    r.sdm = loss.sdm.item();
    r.ada = loss.ada.item();
    r.mean_activated = loss.mean_activated;
    if (!std::isfinite(r.total)) {
      std::ostringstream os;
      os << "train: non-finite loss (sdm=" << r.sdm << ", ada=" << r.ada << ")";
      throw NonFiniteError(os.str());
    }
    if (trainable.size() == 0) return r;
    tape.backward(loss.total);
  }
  r.grad_norm = clip_grad_norm(trainable, cfg.train.grad_clip);
  if (!std::isfinite(r.grad_norm)) throw NonFiniteError("train: non-finite gradient norm");
  adam.step(trainable, lr);
  trainable.zero_grad();
  return r;
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double learning_rate = 0.0;
  std::size_t steps = 0;
  double total = 0.0;
  double sdm = 0.0;
  double ada = 0.0;
  double mean_activated = 0.0;
  std::uint64_t frozen_digest = 0;
};

// Everything needed to continue a run: model, optimizer, progress and the
// batch-sampling stream.
struct TrainState {
  RunConfig config;
  FlexiReIDModel model;
  Adam adam;
  std::size_t epochs_done = 0;
  Rng rng;

  explicit TrainState(const RunConfig& cfg)
      : config(cfg),
        model(cfg.model),
        adam(model.parameters().trainable(), cfg.train.beta1, cfg.train.beta2, cfg.train.adam_eps),
        rng(derive_seed(cfg.train.seed, 0x6261746368)) {}

  // Tensors share storage on copy, so a copied state would alias this one.
  TrainState(const TrainState&) = delete;
  TrainState& operator=(const TrainState&) = delete;
  TrainState(TrainState&&) = default;
  TrainState& operator=(TrainState&&) = default;
};

using EpochCallback = std::function<void(const EpochRecord&, const TrainState&)>;

// Trains until `config.train.epochs` epochs are done, or `stop_after`
// epochs in this call, whichever comes first.
inline std::vector<EpochRecord> fit(TrainState& state, const DatasetSplit& train,
                                    const EpochCallback& on_epoch = {},
                                    std::size_t stop_after = SIZE_MAX) {
  if (train.samples.empty()) throw Error("fit: empty train split");
  const auto& cfg = state.config;
  std::vector<EpochRecord> curve;
  std::size_t ran = 0;
  while (state.epochs_done < cfg.train.epochs && ran < stop_after) {
    EpochRecord rec;
    rec.epoch = state.epochs_done + 1;
    rec.learning_rate = cosine_lr(cfg.train.learning_rate, state.epochs_done, cfg.train.epochs);
    for (const auto& batch : epoch_batches(train, cfg.train.batch_identities, state.rng)) {
      const auto r = train_step(state.model, batch, state.adam, rec.learning_rate, cfg);
      rec.total += r.total;
      rec.sdm += r.sdm;
      rec.ada += r.ada;
      rec.mean_activated += r.mean_activated;
      ++rec.steps;
    }
    if (rec.steps > 0) {
      const double n = static_cast<double>(rec.steps);
      rec.total /= n;
      rec.sdm /= n;
      rec.ada /= n;
      rec.mean_activated /= n;
    }
    rec.frozen_digest = state.model.frozen_digest();
    ++state.epochs_done;
    ++ran;
    curve.push_back(rec);
    if (on_epoch) on_epoch(rec, state);
  }
  return curve;
}

inline std::string loss_curve_csv(const std::vector<EpochRecord>& curve, const std::string& config_hash) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,learning_rate,steps,total,sdm,ada,mean_activated,frozen_digest,config_hash\n";
  for (const auto& r : curve) {
    os << r.epoch << ',' << r.learning_rate << ',' << r.steps << ',' << r.total << ',' << r.sdm << ','
       << r.ada << ',' << r.mean_activated << ',' << hex64(r.frozen_digest) << ',' << config_hash << '\n';
  }
  return os.str();
}

// Checkpoint layout: "FLXR", version, config text, epochs done, rng state,
// parameter count, then (name, shape, values) per parameter, then optimizer.
inline constexpr std::string_view kCheckpointMagic = "FLXR";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const TrainState& state) {
  ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(state.config.to_text());
  w.u64(state.epochs_done);
  w.str(state.rng.state());
  const auto& entries = state.model.parameters().entries();
  w.u64(entries.size());
  for (const auto& e : entries) {
    w.str(e.name);
    w.u8(e.value.requires_grad() ? 1 : 0);
    w.u64(e.value.rank());
    for (auto d : e.value.shape()) w.u64(d);
    w.f64s(e.value.data());
  }
  state.adam.write(w);
  return w.bytes();
}

inline TrainState deserialize_checkpoint(std::string_view bytes) {
  if (bytes.empty()) throw TruncationError("checkpoint: empty file");
  ByteReader r(bytes);
  if (bytes.size() < kCheckpointMagic.size() || r.raw(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw FormatError("checkpoint: bad magic");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  TrainState state(RunConfig::parse(r.str()));
  state.epochs_done = r.u64();
  state.rng.restore(r.str());
  auto& entries = state.model.parameters().entries();
  const auto n = r.u64();
  if (n != entries.size()) throw FormatError("checkpoint: parameter count mismatch");
  for (auto& e : entries) {
    const auto name = r.str();
    if (name != e.name) throw FormatError("checkpoint: expected parameter " + e.name + ", found " + name);
    const bool trainable = r.u8() != 0;
    if (trainable != e.value.requires_grad()) throw FormatError("checkpoint: freeze flag mismatch for " + name);
    const auto rank = r.checked_size(r.u64(), 8);
    ad::Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    if (shape != e.value.shape()) throw FormatError("checkpoint: shape mismatch for " + name);
    const auto values = r.f64s();
    if (values.size() != e.value.numel()) throw FormatError("checkpoint: size mismatch for " + name);
    std::copy(values.begin(), values.end(), e.value.mutable_data().begin());
  }
  state.adam.read(r);
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return state;
}

inline void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(state));
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace flexireid
