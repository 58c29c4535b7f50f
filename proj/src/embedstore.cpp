/*
 * Copyright (c) 2026 The FineSSL Engine Authors. All Rights Reserved
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "finessl/embedstore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

#include "finessl/error.hpp"
#include "finessl/simd.hpp"

namespace finessl {

static_assert(std::endian::native == std::endian::little, "EMB1 I/O assumes a little-endian host");

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kFlagPrototypes = 1u << 0;
constexpr std::uint32_t kFlagOod = 1u << 1;
constexpr std::uint32_t kFlagNormalized = 1u << 2;
constexpr std::size_t kHeaderBytes = 24;

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    if (pos_ + sizeof(T) > bytes_.size()) throw ParseError(std::string("truncated body reading ") + what, pos_);
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  void require(std::uint64_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw ParseError(std::string("truncated body reading ") + what, pos_);
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<float> read_floats(Reader& in, std::uint64_t count, const char* what) {
  in.require(count * sizeof(float), what);
  std::vector<float> out(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t at = in.pos();
    out[i] = in.get<float>(what);
    if (!std::isfinite(out[i])) throw ParseError(std::string("non-finite float in ") + what, at);
  }
  return out;
}

void normalize_rows(std::vector<float>& values, std::size_t dim) {
  for (std::size_t off = 0; off + dim <= values.size(); off += dim) {
    double sq = 0.0;
    for (std::size_t j = 0; j < dim; ++j) sq += static_cast<double>(values[off + j]) * values[off + j];
    if (sq <= 0.0) continue;
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t j = 0; j < dim; ++j) values[off + j] = static_cast<float>(values[off + j] * inv);
  }
}

std::vector<std::uint32_t> broadcast(const std::vector<std::uint32_t>& counts, std::uint32_t classes,
                                     const char* what) {
  if (counts.size() == 1) return std::vector<std::uint32_t>(classes, counts[0]);
  if (counts.size() != classes) {
    throw ConfigError(std::string(what) + ": expected 1 or " + std::to_string(classes) + " counts");
  }
  return counts;
}

// Regular simplex: means along a random orthonormal frame, scaled so every
// pairwise distance equals min_dist exactly. Needs count <= dim.
void place_simplex(Matrix& means, double min_dist, RandomStream& rng) {
  const double scale = min_dist / std::numbers::sqrt2;
  for (std::size_t k = 0; k < means.rows; ++k) {
    auto row = means.row(k);
    for (double& v : row) v = rng.normal();
    for (std::size_t prev = 0; prev < k; ++prev) {
      const auto u = means.row(prev);
      simd::axpy(-simd::dot(row, u), u, row);
    }
    const double norm = std::sqrt(simd::dot(row, row));
    if (!(norm > 1e-8)) throw ConfigError("gen_blobs: degenerate frame while placing means");
    for (double& v : row) v /= norm;
  }
  for (double& v : means.data) v *= scale;
}

// Places `count` points on the sphere of radius `radius`, each at distance
// >= min_dist from every point already in `means`.
void place_means(Matrix& means, std::size_t first, std::size_t count, double radius, double min_dist,
                 RandomStream& rng) {
  constexpr int kAttempts = 2000;
  const std::size_t dim = means.cols;
  Vector candidate(dim);
  for (std::size_t k = first; k < first + count; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < kAttempts && !placed; ++attempt) {
      double sq = 0.0;
      for (double& v : candidate) {
        v = rng.normal();
        sq += v * v;
      }
      const double scale = radius / std::sqrt(sq);
      for (double& v : candidate) v *= scale;
      placed = true;
      for (std::size_t other = 0; other < k && placed; ++other) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
          const double diff = candidate[j] - means(other, j);
          d2 += diff * diff;
        }
        placed = std::sqrt(d2) >= min_dist;
      }
    }
    if (!placed) {
      throw ConfigError("gen_blobs: cannot place " + std::to_string(first + count) + " means in " +
                        std::to_string(dim) + " dims with the requested separation");
    }
    std::copy(candidate.begin(), candidate.end(), means.row(k).begin());
  }
}

void emit_sample(std::vector<float>& features, std::span<const double> mean, double sd, RandomStream& rng) {
  for (double m : mean) features.push_back(static_cast<float>(m + sd * rng.normal()));
}

}  // namespace

std::size_t EmbeddingDataset::count_labeled() const {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto y) { return y >= 0; }));
}

std::size_t EmbeddingDataset::count_unlabeled() const { return labels.size() - count_labeled(); }

void EmbeddingDataset::validate(bool require_ssl_split) const {
  if (num_classes < 1 || dim < 1) throw ConfigError("dataset: C and D must be positive");
  if (labels.size() != num_samples) throw ConfigError("dataset: label count != N");
  if (features.size() != static_cast<std::size_t>(num_samples) * dim) throw ConfigError("dataset: feature size != N*D");
  for (std::int32_t y : labels) {
    if (y != kUnlabeled && (y < 0 || y >= static_cast<std::int32_t>(num_classes))) {
      throw ConfigError("dataset: label " + std::to_string(y) + " out of range");
    }
  }
  for (float f : features) {
    if (!std::isfinite(f)) throw ConfigError("dataset: non-finite feature");
  }
  if (prototypes && prototypes->size() != static_cast<std::size_t>(num_classes) * dim) {
    throw ConfigError("dataset: prototype block size != C*D");
  }
  if (ood_mask) {
    if (ood_mask->size() != num_samples) throw ConfigError("dataset: ood mask size != N");
    for (std::size_t i = 0; i < num_samples; ++i) {
      if ((*ood_mask)[i] && labels[i] != kUnlabeled) throw ConfigError("dataset: OOD row carries a label");
    }
  }
  if (hidden_labels && hidden_labels->size() != num_samples) throw ConfigError("dataset: hidden label count != N");
  if (require_ssl_split) {
    if (count_labeled() == 0) throw ConfigError("SSL requires labeled samples");
    if (count_unlabeled() == 0) throw ConfigError("SSL requires unlabeled samples");
  }
}

std::vector<std::uint8_t> encode_emb1(const EmbeddingDataset& d) {
  d.validate();
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + d.labels.size() * 4 + d.features.size() * 4);
  out.insert(out.end(), {'E', 'M', 'B', '1'});
  std::uint32_t flags = 0;
  if (d.prototypes) flags |= kFlagPrototypes;
  if (d.ood_mask) flags |= kFlagOod;
  if (d.normalized) flags |= kFlagNormalized;
  put(out, kVersion);
  put(out, d.num_samples);
  put(out, d.dim);
  put(out, d.num_classes);
  put(out, flags);
  for (std::int32_t y : d.labels) put(out, y);
  for (float f : d.features) put(out, f);
  if (d.prototypes) {
    for (float f : *d.prototypes) put(out, f);
  }
  if (d.ood_mask) out.insert(out.end(), d.ood_mask->begin(), d.ood_mask->end());
  return out;
}

void write_emb1(const EmbeddingDataset& dataset, const std::filesystem::path& path) {
  const auto bytes = encode_emb1(dataset);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

EmbeddingDataset decode_emb1(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "EMB1", 4) != 0) throw ParseError("bad magic", 0);
  in.get<std::uint32_t>("magic");
  if (const auto version = in.get<std::uint32_t>("version"); version != kVersion) {
    throw ParseError("unsupported version " + std::to_string(version), 4);
  }
  EmbeddingDataset d;
  d.num_samples = in.get<std::uint32_t>("N");
  d.dim = in.get<std::uint32_t>("D");
  d.num_classes = in.get<std::uint32_t>("C");
  const std::size_t flags_at = in.pos();
  const auto flags = in.get<std::uint32_t>("flags");
  if (flags & ~(kFlagPrototypes | kFlagOod | kFlagNormalized)) throw ParseError("unknown flag bits", flags_at);
  if (d.dim == 0 || d.num_classes == 0) throw ParseError("D and C must be positive", 12);
  d.normalized = (flags & kFlagNormalized) != 0;

  const std::uint64_t n = d.num_samples;
  in.require(n * 4, "labels");
  d.labels.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::size_t at = in.pos();
    const auto y = in.get<std::int32_t>("labels");
    if (y != kUnlabeled && (y < 0 || y >= static_cast<std::int32_t>(d.num_classes))) {
      throw ParseError("label " + std::to_string(y) + " out of range", at);
    }
    d.labels[i] = y;
  }
  d.features = read_floats(in, n * d.dim, "features");
  if (flags & kFlagPrototypes) d.prototypes = read_floats(in, std::uint64_t{d.num_classes} * d.dim, "prototypes");
  if (flags & kFlagOod) {
    in.require(n, "ood flags");
    std::vector<std::uint8_t> mask(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      const std::size_t at = in.pos();
      mask[i] = in.get<std::uint8_t>("ood flags");
      if (mask[i] > 1) throw ParseError("ood flag must be 0 or 1", at);
      if (mask[i] && d.labels[i] != kUnlabeled) throw ParseError("OOD row carries a label", at);
    }
    d.ood_mask = std::move(mask);
  }
  if (in.remaining() != 0) throw ParseError("trailing bytes", in.pos());
  return d;
}

EmbeddingDataset read_emb1(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_emb1(bytes);
}

void write_label_sidecar(const std::vector<std::int32_t>& truth, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (std::int32_t y : truth) out << y << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::int32_t> read_label_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::int32_t> truth;
  std::int32_t y;
  while (in >> y) truth.push_back(y);
  if (!in.eof()) throw IoError("malformed label sidecar " + path.string());
  return truth;
}

std::optional<std::vector<std::int32_t>> ground_truth(const EmbeddingDataset& dataset) {
  if (dataset.hidden_labels) return dataset.hidden_labels;
  if (dataset.count_unlabeled() == 0) return dataset.labels;
  return std::nullopt;
}

void normalize_features(EmbeddingDataset& dataset) {
  if (dataset.normalized) return;
  normalize_rows(dataset.features, dataset.dim);
  if (dataset.prototypes) normalize_rows(*dataset.prototypes, dataset.dim);
  dataset.normalized = true;
}

GeneratedData gen_blobs(const BlobParams& p, RandomStream& rng) {
  if (p.classes < 2) throw ConfigError("gen_blobs: need at least 2 classes");
  if (p.dim < 2) throw ConfigError("gen_blobs: need at least 2 dims");
  if (!(p.noise_sd > 0.0)) throw ConfigError("gen_blobs: noise_sd must be positive");
  if (p.class_sep < 0.0) throw ConfigError("gen_blobs: class_sep must be non-negative");
  const auto labeled = broadcast(p.labeled_per_class, p.classes, "labeled_per_class");
  const auto unlabeled = broadcast(p.unlabeled_per_class, p.classes, "unlabeled_per_class");
  std::vector<double> bias(p.classes, 1.0);
  if (!p.bias_profile.empty()) {
    if (p.bias_profile.size() != p.classes) throw ConfigError("gen_blobs: bias_profile length != classes");
    for (double b : p.bias_profile) {
      if (!(b > 0.0)) throw ConfigError("gen_blobs: bias_profile entries must be positive");
    }
    bias = p.bias_profile;
  }

  // Tightest admissible geometry: a regular simplex with edge class_sep*noise_sd
  // when the centers fit in `dim` axes. Otherwise rejection sampling on a
  // sphere of radius class_sep*noise_sd, which makes "too many classes for
  // this dim" detectable.
  const double min_dist = p.class_sep * p.noise_sd;
  const std::uint32_t ood_centers = p.n_ood > 0 ? std::max<std::uint32_t>(1, p.classes / 2) : 0;
  const std::uint32_t centers = p.classes + ood_centers;
  GeneratedData out;
  out.class_means = Matrix(centers, p.dim);
  if (centers <= p.dim) {
    place_simplex(out.class_means, min_dist, rng);
  } else {
    place_means(out.class_means, 0, centers, std::max(min_dist, p.noise_sd), min_dist, rng);
  }

  EmbeddingDataset& d = out.train;
  d.dim = p.dim;
  d.num_classes = p.classes;
  std::vector<std::int32_t> truth;
  for (std::uint32_t k = 0; k < p.classes; ++k) {
    for (std::uint32_t i = 0; i < labeled[k]; ++i) {
      emit_sample(d.features, out.class_means.row(k), p.noise_sd * bias[k], rng);
      d.labels.push_back(static_cast<std::int32_t>(k));
      truth.push_back(static_cast<std::int32_t>(k));
    }
  }
  for (std::uint32_t k = 0; k < p.classes; ++k) {
    for (std::uint32_t i = 0; i < unlabeled[k]; ++i) {
      emit_sample(d.features, out.class_means.row(k), p.noise_sd * bias[k], rng);
      d.labels.push_back(kUnlabeled);
      truth.push_back(static_cast<std::int32_t>(k));
    }
  }
  if (p.n_ood > 0) {
    d.ood_mask = std::vector<std::uint8_t>(truth.size(), 0);
    for (std::uint32_t i = 0; i < p.n_ood; ++i) {
      const std::size_t center = p.classes + rng.uniform_index(ood_centers);
      emit_sample(d.features, out.class_means.row(center), p.noise_sd, rng);
      d.labels.push_back(kUnlabeled);
      truth.push_back(kUnlabeled);
      d.ood_mask->push_back(1);
    }
  }
  d.num_samples = static_cast<std::uint32_t>(d.labels.size());
  d.hidden_labels = std::move(truth);
  if (p.with_prototypes) {
    std::vector<float> protos;
    for (std::uint32_t k = 0; k < p.classes; ++k) {
      const auto row = out.class_means.row(k);
      const double norm = std::sqrt(simd::dot(row, row));
      for (double v : row) protos.push_back(static_cast<float>(v / norm));
    }
    d.prototypes = std::move(protos);
  }

  if (p.test_per_class > 0) {
    EmbeddingDataset t;
    t.dim = p.dim;
    t.num_classes = p.classes;
    for (std::uint32_t k = 0; k < p.classes; ++k) {
      for (std::uint32_t i = 0; i < p.test_per_class; ++i) {
        emit_sample(t.features, out.class_means.row(k), p.noise_sd * bias[k], rng);
        t.labels.push_back(static_cast<std::int32_t>(k));
      }
    }
    t.num_samples = static_cast<std::uint32_t>(t.labels.size());
    out.test = std::move(t);
  }
  return out;
}

std::vector<std::uint32_t> longtail_counts(std::uint32_t n1, std::uint32_t c, double rho) {
  if (n1 < 1 || c < 2 || !(rho >= 1.0)) throw ConfigError("longtail_counts: need n1 >= 1, c >= 2, rho >= 1");
  std::vector<std::uint32_t> counts(c);
  for (std::uint32_t k = 0; k < c; ++k) {
    const double exponent = -static_cast<double>(k) / static_cast<double>(c - 1);
    const double value = static_cast<double>(n1) * std::pow(rho, exponent);
    counts[k] = std::max<std::uint32_t>(1, static_cast<std::uint32_t>(std::llround(value)));
  }
  return counts;
}

Vector augment_view(std::span<const double> x, View view, const AugmentConfig& cfg, RandomStream& rng) {
  if (cfg.weak_noise_sd < 0.0 || cfg.strong_noise_sd < 0.0 || cfg.strong_drop_frac < 0.0 ||
      cfg.strong_drop_frac >= 1.0) {
    throw UsageError("augment_view: invalid augmentation config");
  }
  Vector out(x.begin(), x.end());
  if (view == View::kWeak) {
    if (cfg.weak_noise_sd > 0.0) {
      for (double& v : out) v += cfg.weak_noise_sd * rng.normal();
    }
    return out;
  }
  const std::size_t drop = static_cast<std::size_t>(std::floor(cfg.strong_drop_frac * static_cast<double>(x.size())));
  if (drop > 0) {
    // Partial Fisher-Yates: the first `drop` slots are a uniform subset.
    std::vector<std::size_t> dims(x.size());
    std::iota(dims.begin(), dims.end(), std::size_t{0});
    for (std::size_t i = 0; i < drop; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(dims.size() - i));
      std::swap(dims[i], dims[j]);
      out[dims[i]] = 0.0;
    }
  }
  if (cfg.strong_noise_sd > 0.0) {
    for (double& v : out) v += cfg.strong_noise_sd * rng.normal();
  }
  return out;
}

BatchSampler::BatchSampler(const EmbeddingDataset& dataset, std::uint32_t b, std::uint32_t mu, AugmentConfig aug,
                           std::uint64_t seed)
    : dataset_(dataset),
      b_(b),
      mu_(mu),
      aug_(aug),
      order_rng_(seed, StreamId::kBatchOrder),
      aug_rng_(seed, StreamId::kAugmentation) {
  if (b < 1 || mu < 1) throw ConfigError("batch sampler: b and mu must be >= 1");
  for (std::uint32_t i = 0; i < dataset.num_samples; ++i) {
    (dataset.labels[i] >= 0 ? labeled_pool_ : unlabeled_pool_).push_back(i);
  }
  if (labeled_pool_.empty()) throw ConfigError("batch sampler: empty labeled pool");
  if (unlabeled_pool_.empty()) throw ConfigError("batch sampler: empty unlabeled pool");
  order_rng_.shuffle(std::span(labeled_pool_));
  order_rng_.shuffle(std::span(unlabeled_pool_));
}

std::uint32_t BatchSampler::draw(std::vector<std::uint32_t>& pool, std::size_t& pos) {
  if (pos == pool.size()) {
    order_rng_.shuffle(std::span(pool));
    pos = 0;
  }
  return pool[pos++];
}

Batch BatchSampler::next() {
  const std::size_t dim = dataset_.dim;
  const std::size_t nu = static_cast<std::size_t>(b_) * mu_;
  Batch batch;
  batch.labeled_x = Matrix(b_, dim);
  batch.unlabeled_weak = Matrix(nu, dim);
  batch.unlabeled_strong = Matrix(nu, dim);
  Vector row(dim);
  for (std::uint32_t i = 0; i < b_; ++i) {
    const std::uint32_t src = draw(labeled_pool_, labeled_pos_);
    const auto f = dataset_.feature_row(src);
    std::copy(f.begin(), f.end(), batch.labeled_x.row(i).begin());
    batch.labeled_y.push_back(dataset_.labels[src]);
    batch.labeled_index.push_back(src);
  }
  for (std::size_t j = 0; j < nu; ++j) {
    const std::uint32_t src = draw(unlabeled_pool_, unlabeled_pos_);
    const auto f = dataset_.feature_row(src);
    std::copy(f.begin(), f.end(), row.begin());
    const Vector weak = augment_view(row, View::kWeak, aug_, aug_rng_);
    const Vector strong = augment_view(row, View::kStrong, aug_, aug_rng_);
    std::copy(weak.begin(), weak.end(), batch.unlabeled_weak.row(j).begin());
    std::copy(strong.begin(), strong.end(), batch.unlabeled_strong.row(j).begin());
    batch.unlabeled_index.push_back(src);
  }
  return batch;
}

std::vector<Batch> sample_batches(const EmbeddingDataset& dataset, std::uint32_t b, std::uint32_t mu,
                                  std::uint32_t epoch_steps, const AugmentConfig& aug, std::uint64_t seed) {
  BatchSampler sampler(dataset, b, mu, aug, seed);
  std::vector<Batch> out;
  out.reserve(epoch_steps);
  for (std::uint32_t s = 0; s < epoch_steps; ++s) out.push_back(sampler.next());
  return out;
}

Matrix to_matrix(const EmbeddingDataset& dataset) {
  Matrix m(dataset.num_samples, dataset.dim);
  std::transform(dataset.features.begin(), dataset.features.end(), m.data.begin(),
                 [](float f) { return static_cast<double>(f); });
  return m;
}

Matrix to_matrix(const EmbeddingDataset& dataset, std::span<const std::uint32_t> rows) {
  Matrix m(rows.size(), dataset.dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto f = dataset.feature_row(rows[i]);
    std::copy(f.begin(), f.end(), m.row(i).begin());
  }
  return m;
}

}  // namespace finessl
