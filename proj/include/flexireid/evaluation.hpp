// SPDX-License-Identifier: Apache-2.0
#pragma once

// Retrieval evaluation: embed every query mode, rank the rgb gallery by
// cosine similarity and summarize Rank-k, mAP and mINP per mode.

#include <algorithm>
#include <chrono>
#include <climits>
#include <cmath>
#include <span>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "flexireid/autodiff.hpp"
#include "flexireid/fusion.hpp"
#include "flexireid/metrics.hpp"
#include "flexireid/model.hpp"
#include "flexireid/synth.hpp"

#include <json.hpp>

namespace flexireid {

class MissingModalityError : public Error {
 public:
  using Error::Error;
};

// A dataset whose grid or vocabulary disagrees with the encoder's.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

inline void check_compatible(const DatasetSplit& split, const EncoderConfig& enc) {
  for (const auto& s : split.samples) {
    if (const auto* img = std::get_if<Image>(&s.payload)) {
      if (img->channels != enc.channels || img->height != enc.image_height() ||
          img->width != enc.image_width()) {
        throw CompatibilityError("dataset images are " + std::to_string(img->channels) + "x" +
                                 std::to_string(img->height) + "x" + std::to_string(img->width) +
                                 " but the encoder expects " + std::to_string(enc.channels) + "x" +
                                 std::to_string(enc.image_height()) + "x" +
                                 std::to_string(enc.image_width()));
      }
    } else {
      const auto& ids = s.tokens();
      if (ids.size() + 2 > enc.max_text_len) {
        throw CompatibilityError("dataset text has " + std::to_string(ids.size()) +
                                 " tokens but the encoder accepts at most " +
                                 std::to_string(enc.max_text_len - 2));
      }
      for (auto id : ids) {
        if (id >= enc.vocab_size) {
          throw CompatibilityError("dataset token id " + std::to_string(id) +
                                   " lies outside the encoder vocabulary of " +
                                   std::to_string(enc.vocab_size));
        }
      }
    }
  }
}

namespace detail {

inline std::vector<double> normalized(std::span<const double> v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double inv = 1.0 / std::sqrt(ss + 1e-12);
  std::vector<double> out(v.begin(), v.end());
  for (auto& x : out) x *= inv;
  return out;
}

}  // namespace detail

// Gallery: every rgb sample. Queries for a mode: for each identity having
// all of the mode's modalities, the k-th samples of those modalities for
// k < the smallest per-modality sample count.
inline RetrievalReport evaluate_modes(const FlexiReIDModel& model, const DatasetSplit& split,
                                      std::span<const RetrievalMode> modes, std::uint64_t seed,
                                      const std::string& config_hash) {
  if (split.samples.empty()) throw Error("evaluate: empty split");
  const auto start = std::chrono::steady_clock::now();
  ad::NoGradScope no_grad;

  std::map<const Sample*, EncodedSequence> cache;
  auto encoded = [&](const Sample* s) -> const EncodedSequence& {
    auto it = cache.find(s);
    if (it == cache.end()) it = cache.emplace(s, model.encode(*s)).first;
    return it->second;
  };

  std::vector<std::uint32_t> gallery_ids;
  std::vector<std::vector<double>> gallery_features;
  for (const auto& s : split.samples) {
    if (s.modality != Modality::rgb) continue;
    gallery_ids.push_back(s.identity);
    gallery_features.push_back(detail::normalized(encoded(&s).global_feature.data()));
  }
  if (gallery_ids.empty()) throw MissingModalityError("evaluate: split has no rgb gallery samples");

  RetrievalReport report;
  report.seed = seed;
  report.config_hash = config_hash;
  const auto identities = split.identities();
  for (const auto& mode : modes) {
    std::vector<RankedGallery> ranked;
    for (auto id : identities) {
      std::vector<const Sample*> sk, ir, tx;
      std::size_t available = SIZE_MAX;
      if (mode.sketch) available = std::min(available, (sk = split.find(id, Modality::sketch)).size());
      if (mode.infrared) available = std::min(available, (ir = split.find(id, Modality::infrared)).size());
      if (mode.text) available = std::min(available, (tx = split.find(id, Modality::text)).size());
      if (available == SIZE_MAX) available = 0;
      std::vector<bool> relevance(gallery_ids.size());
      bool any_relevant = false;
      for (std::size_t g = 0; g < gallery_ids.size(); ++g) {
        relevance[g] = gallery_ids[g] == id;
        any_relevant = any_relevant || relevance[g];
      }
      if (!any_relevant) continue;
      for (std::size_t k = 0; k < available; ++k) {
        const Tensor q = model.query_feature(mode, mode.sketch ? &encoded(sk[k]) : nullptr,
                                             mode.infrared ? &encoded(ir[k]) : nullptr,
                                             mode.text ? &encoded(tx[k]) : nullptr);
        const auto qn = detail::normalized(q.data());
        std::vector<double> scores(gallery_features.size());
        for (std::size_t g = 0; g < scores.size(); ++g) {
          double dot = 0.0;
          for (std::size_t j = 0; j < qn.size(); ++j) dot += qn[j] * gallery_features[g][j];
          scores[g] = dot;
        }
        ranked.push_back(rank_by_score(scores, relevance));
      }
    }
    if (ranked.empty()) {
      throw MissingModalityError("evaluate: split has no queries for mode " + mode.name());
    }
    report.modes.push_back(summarize_mode(mode.name(), ranked));
  }
  report.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// One JSON object per line: a header record, then one record per mode.
inline std::string report_to_jsonl(const RetrievalReport& report) {
  std::ostringstream os;
  nlohmann::ordered_json header;
  header["record"] = "run";
  header["seed"] = report.seed;
  header["config_hash"] = report.config_hash;
  header["modes"] = report.modes.size();
  os << header.dump() << '\n';
  for (const auto& m : report.modes) {
    nlohmann::ordered_json j;
    j["record"] = "mode";
    j["mode"] = m.mode;
    j["queries"] = m.queries;
    j["gallery"] = m.gallery;
    j["r1"] = m.r1;
    j["r5"] = m.r5;
    j["r10"] = m.r10;
    j["map"] = m.map;
    j["minp"] = m.minp;
    os << j.dump() << '\n';
  }
  return os.str();
}

inline RetrievalReport report_from_jsonl(const std::string& text) {
  RetrievalReport report;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.at("record") == "run") {
      report.seed = j.at("seed").get<std::uint64_t>();
      report.config_hash = j.at("config_hash").get<std::string>();
    } else {
      ModeResult m;
      m.mode = j.at("mode").get<std::string>();
      m.queries = j.at("queries").get<std::size_t>();
      m.gallery = j.at("gallery").get<std::size_t>();
      m.r1 = j.at("r1").get<double>();
      m.r5 = j.at("r5").get<double>();
      m.r10 = j.at("r10").get<double>();
      m.map = j.at("map").get<double>();
      m.minp = j.at("minp").get<double>();
      report.modes.push_back(m);
    }
  }
  return report;
}

inline std::string report_to_csv(const RetrievalReport& report) {
  std::ostringstream os;
  os.precision(10);
  os << "mode,queries,gallery,r1,r5,r10,map,minp,seed,config_hash\n";
  for (const auto& m : report.modes) {
    os << m.mode << ',' << m.queries << ',' << m.gallery << ',' << m.r1 << ',' << m.r5 << ','
       << m.r10 << ',' << m.map << ',' << m.minp << ',' << report.seed << ',' << report.config_hash
       << '\n';
  }
  return os.str();
}

namespace detail {

inline double binomial_pmf(std::size_t n, std::size_t k, double p) {
  const double nd = static_cast<double>(n), kd = static_cast<double>(k);
  return std::exp(std::lgamma(nd + 1.0) - std::lgamma(kd + 1.0) - std::lgamma(nd - kd + 1.0) +
                  kd * std::log(p) + (nd - kd) * std::log1p(-p));
}

}  // namespace detail

// Upper edge of the central `coverage` band of a Binomial(n, p) count, as a
// rate: the smallest k/n with P(X <= k) >= 1 - (1 - coverage) / 2.
inline double binomial_upper_rate(std::size_t n, double p, double coverage = 0.99) {
  const double tail = (1.0 - coverage) / 2.0;
  double cdf = 0.0;
  for (std::size_t k = 0; k <= n; ++k) {
    cdf += detail::binomial_pmf(n, k, p);
    if (cdf >= 1.0 - tail) return static_cast<double>(k) / static_cast<double>(n);
  }
  return 1.0;
}

// Lower edge of the same band: the smallest k/n with P(X <= k) > tail.
inline double binomial_lower_rate(std::size_t n, double p, double coverage = 0.99) {
  const double tail = (1.0 - coverage) / 2.0;
  double cdf = 0.0;
  for (std::size_t k = 0; k <= n; ++k) {
    cdf += detail::binomial_pmf(n, k, p);
    if (cdf > tail) return static_cast<double>(k) / static_cast<double>(n);
  }
  return 0.0;
}

}  // namespace flexireid
