#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mp/error.hpp"
#include "mp/mp_head.hpp"
#include "mp/rng.hpp"
#include "mp/tensor.hpp"

// MPFT feature files, synthetic datasets and deterministic batching.
// The byte layout is documented in docs/format.md.

namespace mp {

inline constexpr std::array<char, 4> kFeatureMagic{'M', 'P', 'F', 'T'};
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 30;

struct FeatureFileHeader {
  std::uint32_t version = kFeatureVersion;
  std::uint64_t sample_count = 0;
  std::uint32_t tokens_per_sample = 0;  // word tokens, CLS excluded
  std::uint32_t feature_dim = 0;
  std::uint8_t has_cls = 0;
  std::uint8_t dtype = 0;  // 0 = float32
  std::uint32_t class_count = 0;

  std::size_t rows_per_sample() const { return tokens_per_sample + (has_cls ? 1u : 0u); }
  std::size_t floats_per_sample() const { return rows_per_sample() * feature_dim; }

  /// Total file length implied by the header; saturates instead of wrapping
  /// so hostile headers cannot alias a small file.
  std::uint64_t file_bytes() const {
    const unsigned __int128 n = static_cast<unsigned __int128>(sample_count) * (4 + 4 * floats_per_sample()) +
                                kFeatureHeaderBytes;
    return n > UINT64_MAX ? UINT64_MAX : static_cast<std::uint64_t>(n);
  }

  friend bool operator==(const FeatureFileHeader&, const FeatureFileHeader&) = default;
};

/// In-memory feature file: labels plus [sample x rows x dim] float32 values,
/// CLS as row 0 when present.
struct FeatureDataset {
  FeatureFileHeader header;
  std::vector<std::uint32_t> labels;
  std::vector<float> features;

  std::size_t size() const { return labels.size(); }

  /// Sample i promoted to double precision.
  TokenFeatures sample(std::size_t i) const {
    const std::size_t rows = header.rows_per_sample(), d = header.feature_dim;
    const float* base = features.data() + i * header.floats_per_sample();
    std::optional<Tensor> cls;
    if (header.has_cls) {
      cls = Tensor({d}, std::vector<double>(base, base + d));
      base += d;
    }
    const std::size_t n = rows - (header.has_cls ? 1 : 0);
    return TokenFeatures::constant(Tensor({n, d}, std::vector<double>(base, base + n * d)), std::move(cls),
                                   labels[i]);
  }

  /// Word tokens of sample i as an [N x d] tensor.
  Tensor tokens(std::size_t i) const {
    const std::size_t d = header.feature_dim, n = header.tokens_per_sample;
    const float* base = features.data() + i * header.floats_per_sample() + (header.has_cls ? d : 0);
    return Tensor({n, d}, std::vector<double>(base, base + n * d));
  }

  /// Subset in the given index order.
  FeatureDataset subset(const std::vector<std::size_t>& indices) const {
    FeatureDataset out;
    out.header = header;
    out.header.sample_count = indices.size();
    const std::size_t per = header.floats_per_sample();
    out.labels.reserve(indices.size());
    out.features.reserve(indices.size() * per);
    for (std::size_t i : indices) {
      out.labels.push_back(labels.at(i));
      out.features.insert(out.features.end(), features.begin() + static_cast<std::ptrdiff_t>(i * per),
                          features.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    }
    return out;
  }

  void validate() const {
    if (labels.size() != header.sample_count) throw DataError("label count disagrees with header");
    if (features.size() != header.sample_count * header.floats_per_sample()) {
      throw DataError("feature payload disagrees with header");
    }
    if (header.tokens_per_sample == 0 || header.feature_dim == 0) throw DataError("empty token grid");
    for (std::uint32_t l : labels) {
      if (l >= header.class_count) {
        throw DataError("label " + std::to_string(l) + " out of range for " + std::to_string(header.class_count) +
                        " classes");
      }
    }
    for (float f : features) {
      if (!std::isfinite(f)) throw DataError("feature payload contains NaN or Inf");
    }
  }

  friend bool operator==(const FeatureDataset& a, const FeatureDataset& b) {
    return a.header == b.header && a.labels == b.labels &&
           std::equal(a.features.begin(), a.features.end(), b.features.begin(), b.features.end(),
                      [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
  }
};

namespace detail {

template <class T>
void put_le(std::vector<char>& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

template <class T>
T get_le(const unsigned char* p) {
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(p[i]) << (8 * i);
  return static_cast<T>(u);
}

}  // namespace detail

inline std::vector<char> encode_feature_header(const FeatureFileHeader& h) {
  std::vector<char> out(kFeatureMagic.begin(), kFeatureMagic.end());
  detail::put_le(out, h.version);
  detail::put_le(out, h.sample_count);
  detail::put_le(out, h.tokens_per_sample);
  detail::put_le(out, h.feature_dim);
  detail::put_le(out, h.has_cls);
  detail::put_le(out, h.dtype);
  detail::put_le(out, h.class_count);
  return out;
}

inline void write_feature_file(const std::filesystem::path& path, const FeatureDataset& ds) {
  ds.validate();
  std::vector<char> bytes = encode_feature_header(ds.header);
  bytes.reserve(ds.header.file_bytes());
  for (std::uint32_t l : ds.labels) detail::put_le(bytes, l);
  for (float f : ds.features) detail::put_le(bytes, std::bit_cast<std::uint32_t>(f));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

/// Reads and validates a feature file. Magic, version, dtype and total length
/// are checked before the payload is allocated.
inline FeatureDataset read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  const std::uint64_t actual = std::filesystem::file_size(path);
  std::array<unsigned char, kFeatureHeaderBytes> raw{};
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(std::min<std::uint64_t>(actual, raw.size())));
  if (actual < 4 || std::memcmp(raw.data(), kFeatureMagic.data(), 4) != 0) {
    throw DataError(path.string() + " is not a feature file (bad magic)");
  }
  if (actual < kFeatureHeaderBytes) {
    throw CorruptionError("corrupt feature file " + path.string() + ": expected at least " +
                          std::to_string(kFeatureHeaderBytes) + " bytes, found " + std::to_string(actual));
  }
  FeatureFileHeader h;
  h.version = detail::get_le<std::uint32_t>(raw.data() + 4);
  h.sample_count = detail::get_le<std::uint64_t>(raw.data() + 8);
  h.tokens_per_sample = detail::get_le<std::uint32_t>(raw.data() + 16);
  h.feature_dim = detail::get_le<std::uint32_t>(raw.data() + 20);
  h.has_cls = raw[24];
  h.dtype = raw[25];
  h.class_count = detail::get_le<std::uint32_t>(raw.data() + 26);
  if (h.version != kFeatureVersion) {
    throw DataError("unsupported feature file version " + std::to_string(h.version));
  }
  if (h.dtype != 0) throw DataError("unsupported feature dtype " + std::to_string(h.dtype));
  if (h.has_cls > 1) throw DataError("has_cls flag must be 0 or 1");
  if (h.file_bytes() != actual) {
    throw CorruptionError("corrupt feature file " + path.string() + ": header implies " +
                          std::to_string(h.file_bytes()) + " bytes, found " + std::to_string(actual));
  }

  FeatureDataset ds;
  ds.header = h;
  std::vector<unsigned char> payload(actual - kFeatureHeaderBytes);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!in) throw CorruptionError("short read on " + path.string());
  ds.labels.resize(h.sample_count);
  for (std::size_t i = 0; i < h.sample_count; ++i) ds.labels[i] = detail::get_le<std::uint32_t>(payload.data() + 4 * i);
  const unsigned char* fp = payload.data() + 4 * h.sample_count;
  ds.features.resize(h.sample_count * h.floats_per_sample());
  for (std::size_t i = 0; i < ds.features.size(); ++i) {
    ds.features[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(fp + 4 * i));
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

enum class SynthRegime { mean_sep, cov_sep, mixed };

inline std::string_view regime_name(SynthRegime r) {
  switch (r) {
    case SynthRegime::mean_sep: return "mean-sep";
    case SynthRegime::cov_sep: return "cov-sep";
    case SynthRegime::mixed: return "mixed";
  }
  return "?";
}

inline SynthRegime parse_regime(std::string_view s) {
  if (s == "mean-sep" || s == "mean_sep") return SynthRegime::mean_sep;
  if (s == "cov-sep" || s == "cov_sep") return SynthRegime::cov_sep;
  if (s == "mixed") return SynthRegime::mixed;
  throw ConfigError("unknown regime '" + std::string(s) + "'");
}

/// Token distributions per class:
///  - mean_sep: N(mu_c, I), mu_c = (delta/sqrt2) e_c, so ||mu_c - mu_c'|| = delta.
///  - cov_sep: N(0, Sigma_c), Sigma_c = I with correlation rho on the
///    coordinate pair (2c, 2c+1).
///  - mixed: correlation rho on pair (2(c mod 2), 2(c mod 2)+1) and mean
///    (delta/sqrt2) e_{4 + c/2}; classes sharing a mean differ only in
///    covariance.
/// With `with_cls`, row 0 is a fixed convex combination of the word tokens.
struct SynthSpec {
  std::size_t classes = 2;
  std::size_t tokens = 32;
  std::size_t dim = 8;
  SynthRegime regime = SynthRegime::cov_sep;
  std::size_t per_class = 500;
  std::uint64_t seed = 0;
  double delta = 10.0;
  double rho = 0.8;
  bool with_cls = false;

  void validate() const {
    if (classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
    if (tokens == 0 || dim == 0 || per_class == 0) throw ConfigError("synthetic extents must be positive");
    if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("rho must lie in [0, 1)");
    if (!(delta >= 0.0) || !std::isfinite(delta)) throw ConfigError("delta must be finite and non-negative");
    switch (regime) {
      case SynthRegime::mean_sep:
        if (dim < classes) throw ConfigError("mean-sep needs dim >= classes");
        break;
      case SynthRegime::cov_sep:
        if (dim < 2 * classes) throw ConfigError("cov-sep needs dim >= 2 * classes");
        break;
      case SynthRegime::mixed:
        if (dim < 4 + (classes + 1) / 2) throw ConfigError("mixed needs dim >= 4 + ceil(classes / 2)");
        break;
    }
  }
};

/// The class-conditional token covariance implied by a spec.
inline Tensor synth_covariance(const SynthSpec& s, std::size_t c) {
  Tensor sigma = Tensor::identity(s.dim);
  std::size_t pair = 0;
  if (s.regime == SynthRegime::cov_sep) pair = c;
  else if (s.regime == SynthRegime::mixed) pair = c % 2;
  else return sigma;
  sigma(2 * pair, 2 * pair + 1) = s.rho;
  sigma(2 * pair + 1, 2 * pair) = s.rho;
  return sigma;
}

inline std::vector<double> synth_mean(const SynthSpec& s, std::size_t c) {
  std::vector<double> mu(s.dim, 0.0);
  const double a = s.delta / std::sqrt(2.0);
  if (s.regime == SynthRegime::mean_sep) mu[c] = a;
  if (s.regime == SynthRegime::mixed) mu[4 + c / 2] = a;
  return mu;
}

/// Weights of the synthetic CLS row over the word tokens (positive, sum 1).
inline std::vector<double> synth_cls_weights(const SynthSpec& s) {
  CounterRng rng = CounterRng::derive(s.seed, rng_purpose::kClsWeights);
  std::vector<double> w(s.tokens);
  for (double& x : w) x = 0.5 + rng.uniform();
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= total;
  return w;
}

/// Samples are ordered class by class; each sample draws from its own stream
/// so any sample can be regenerated independently.
inline FeatureDataset synth_generate(const SynthSpec& s) {
  s.validate();
  FeatureDataset ds;
  ds.header.sample_count = s.classes * s.per_class;
  ds.header.tokens_per_sample = static_cast<std::uint32_t>(s.tokens);
  ds.header.feature_dim = static_cast<std::uint32_t>(s.dim);
  ds.header.has_cls = s.with_cls ? 1 : 0;
  ds.header.class_count = static_cast<std::uint32_t>(s.classes);
  ds.labels.reserve(ds.header.sample_count);
  ds.features.reserve(ds.header.sample_count * ds.header.floats_per_sample());
  const std::vector<double> cls_w = s.with_cls ? synth_cls_weights(s) : std::vector<double>{};
  const double comp = std::sqrt(1.0 - s.rho * s.rho);
  std::vector<double> tok(s.tokens * s.dim);
  for (std::size_t c = 0; c < s.classes; ++c) {
    const std::vector<double> mu = synth_mean(s, c);
    std::size_t pair = s.dim;  // none
    if (s.regime == SynthRegime::cov_sep) pair = c;
    if (s.regime == SynthRegime::mixed) pair = c % 2;
    for (std::size_t k = 0; k < s.per_class; ++k) {
      CounterRng rng = CounterRng::derive(s.seed, rng_purpose::kSynth, c * s.per_class + k);
      for (std::size_t n = 0; n < s.tokens; ++n) {
        double* row = tok.data() + n * s.dim;
        for (std::size_t j = 0; j < s.dim; ++j) row[j] = rng.normal();
        if (pair < s.dim) {
          const std::size_t p = 2 * pair, q = p + 1;
          row[q] = s.rho * row[p] + comp * row[q];
        }
        for (std::size_t j = 0; j < s.dim; ++j) row[j] += mu[j];
      }
      ds.labels.push_back(static_cast<std::uint32_t>(c));
      if (s.with_cls) {
        for (std::size_t j = 0; j < s.dim; ++j) {
          double acc = 0.0;
          for (std::size_t n = 0; n < s.tokens; ++n) acc += cls_w[n] * tok[n * s.dim + j];
          ds.features.push_back(static_cast<float>(acc));
        }
      }
      for (double v : tok) ds.features.push_back(static_cast<float>(v));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batching and splitting
// ---------------------------------------------------------------------------

/// Fisher-Yates permutation of [0, n) keyed by (seed, epoch) only.
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng = CounterRng::derive(seed, rng_purpose::kShuffle, epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

/// Batches of sample indices for one epoch; the last partial batch is kept.
inline std::vector<std::vector<std::size_t>> batch_iter(std::size_t sample_count, std::size_t batch_size,
                                                        std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  const std::vector<std::size_t> order = epoch_permutation(sample_count, seed, epoch);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  return batches;
}

inline std::vector<std::vector<std::size_t>> batch_iter(const FeatureDataset& ds, std::size_t batch_size,
                                                        std::uint64_t seed, std::uint64_t epoch) {
  return batch_iter(ds.size(), batch_size, seed, epoch);
}

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Stratified split: round(fraction * n_c) of each class to train, the rest
/// to val, at least one each. Both lists are ascending.
inline SplitIndices stratified_split(const std::vector<std::uint32_t>& labels, std::size_t classes,
                                     double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(labels[i]).push_back(i);
  SplitIndices out;
  for (std::size_t c = 0; c < classes; ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    if (idx.size() < 2) {
      throw SplitError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                       " sample(s); at least 2 are needed to split");
    }
    CounterRng rng = CounterRng::derive(seed, rng_purpose::kSplit, c);
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.insert(out.val.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

inline std::pair<FeatureDataset, FeatureDataset> split_train_val(const FeatureDataset& ds, double fraction,
                                                                 std::uint64_t seed) {
  const SplitIndices s = stratified_split(ds.labels, ds.header.class_count, fraction, seed);
  return {ds.subset(s.train), ds.subset(s.val)};
}

}  // namespace mp
