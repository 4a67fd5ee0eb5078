#pragma once

// Dataset plumbing: CIFAR-10 binary records (1 label byte + 3072 pixel
// bytes, pixels mapped to [-1, 1] via v/127.5 - 1), seed-deterministic
// subsets, synthetic Gaussian blobs, and a latent-collision image fixture
// that trains like a small natural-image task.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lpbn/rng.hpp"
#include "lpbn/tensor.hpp"

namespace lpbn {

struct Dataset {
  Tensor<float> x;  // [n, 3072], [n, 3, 32, 32], or [n, dim]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t feature_size() const { return size() == 0 ? 0 : x.size() / size(); }
};

constexpr std::size_t kCifarPixels = 3072;
constexpr std::size_t kCifarRecord = kCifarPixels + 1;

namespace detail {

inline float cifar_pixel(std::uint8_t v) { return float(double(v) / 127.5 - 1.0); }

}  // namespace detail

// Raw CIFAR-format content: one label byte and 3072 pixel bytes per record.
struct RawCifar {
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;  // labels.size() * 3072 bytes

  std::size_t size() const { return labels.size(); }
};

inline void write_cifar_file(const std::string& path, const RawCifar& raw) {
  if (raw.pixels.size() != raw.labels.size() * kCifarPixels)
    throw std::invalid_argument("write_cifar_file: pixel byte count does not match records");
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    for (std::size_t i = 0; i < raw.labels.size(); ++i) {
      f.put(char(raw.labels[i]));
      f.write(reinterpret_cast<const char*>(raw.pixels.data() + i * kCifarPixels),
              std::streamsize(kCifarPixels));
    }
    if (!f.good()) throw std::runtime_error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Dataset dataset_from_raw(const RawCifar& raw, bool flatten) {
  if (raw.pixels.size() != raw.labels.size() * kCifarPixels)
    throw std::invalid_argument("dataset_from_raw: pixel byte count does not match records");
  std::size_t n = raw.size();
  Dataset d;
  if (n == 0) return d;
  d.labels.resize(n);
  d.x = flatten ? Tensor<float>({n, kCifarPixels}) : Tensor<float>({n, 3, 32, 32});
  for (std::size_t i = 0; i < n; ++i) {
    if (raw.labels[i] > 9)
      throw std::runtime_error("record " + std::to_string(i) + ": label out of range");
    d.labels[i] = int(raw.labels[i]);
    for (std::size_t p = 0; p < kCifarPixels; ++p)
      d.x[i * kCifarPixels + p] = detail::cifar_pixel(raw.pixels[i * kCifarPixels + p]);
  }
  return d;
}

inline Dataset load_cifar(const std::vector<std::string>& paths, bool flatten) {
  RawCifar raw;
  for (const std::string& path : paths) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::vector<std::uint8_t> chunk((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    if (chunk.size() % kCifarRecord != 0)
      throw std::runtime_error(path + ": malformed record length (file size " +
                               std::to_string(chunk.size()) + " is not a multiple of 3073)");
    for (std::size_t i = 0; i < chunk.size(); i += kCifarRecord) {
      raw.labels.push_back(chunk[i]);
      raw.pixels.insert(raw.pixels.end(), chunk.begin() + std::ptrdiff_t(i) + 1,
                        chunk.begin() + std::ptrdiff_t(i + kCifarRecord));
    }
  }
  return dataset_from_raw(raw, flatten);
}

inline Dataset load_cifar_file(const std::string& path, bool flatten) {
  return load_cifar(std::vector<std::string>{path}, flatten);
}

// Row gather; keeps the per-sample shape.
inline Dataset gather(const Dataset& d, const std::vector<std::size_t>& idx) {
  std::size_t fs = d.feature_size();
  Dataset out;
  if (idx.empty()) return out;
  std::vector<std::size_t> shape = d.x.shape();
  shape[0] = idx.size();
  out.x = Tensor<float>(shape);
  out.labels.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= d.size()) throw std::invalid_argument("gather: index out of range");
    const float* src = d.x.data() + idx[i] * fs;
    std::copy(src, src + fs, out.x.data() + i * fs);
    out.labels[i] = d.labels[idx[i]];
  }
  return out;
}

// The first `count` rows of a seed-determined shuffle.
inline Dataset take_subset(const Dataset& d, std::size_t count, std::uint64_t seed) {
  if (count > d.size())
    throw std::invalid_argument("take_subset: asked for " + std::to_string(count) +
                                " of " + std::to_string(d.size()) + " examples");
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  Rng rng(seed);
  rng.shuffle(idx);
  idx.resize(count);
  return gather(d, idx);
}

// Gaussian blobs with class-dependent means on random unit directions.
// Labels cycle 0..classes-1; at large separation the classes are linearly
// separable.
inline Dataset gen_synthetic(std::size_t classes, std::size_t dim, std::size_t n,
                             std::uint64_t seed, double separation = 10.0) {
  if (classes < 2) throw std::invalid_argument("gen_synthetic: need at least 2 classes");
  if (dim == 0) throw std::invalid_argument("gen_synthetic: zero dimension");
  if (n == 0) return Dataset{};
  Rng rng(seed);
  std::vector<std::vector<double>> means(classes, std::vector<double>(dim));
  for (auto& m : means) {
    double norm2 = 0;
    for (double& v : m) {
      v = rng.normal();
      norm2 += v * v;
    }
    double inv = separation / std::sqrt(norm2);
    for (double& v : m) v *= inv;
  }
  Dataset d;
  d.x = Tensor<float>({n, dim});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = i % classes;
    d.labels[i] = int(c);
    for (std::size_t j = 0; j < dim; ++j)
      d.x[i * dim + j] = float(means[c][j] + rng.normal());
  }
  return d;
}

// ---------------------------------------------------------------------------
// Latent-collision fixture.  Ten per-pixel class templates plus a shared
// low-rank latent subspace spanned by the normalized pairwise template
// differences: latent noise moves every image along exactly the directions
// that separate the classes, so the task is learnable but far from
// saturated, and label noise on the training split keeps train accuracy
// honest.  Emitted in CIFAR byte format so it flows through the same loader.

struct CollisionFixture {
  RawCifar train;
  RawCifar test;
};

inline CollisionFixture make_collision_fixture(std::size_t n_train, std::size_t n_test,
                                               std::uint64_t seed,
                                               double label_noise = 0.4) {
  const std::size_t classes = 10;
  Rng rng(seed);

  std::vector<std::vector<double>> tmpl(classes, std::vector<double>(kCifarPixels));
  for (auto& t : tmpl)
    for (double& v : t) v = rng.uniform(127.0 - 12.0, 127.0 + 12.0);

  std::vector<std::vector<double>> dirs;
  for (std::size_t i = 0; i < classes; ++i)
    for (std::size_t j = i + 1; j < classes; ++j) {
      std::vector<double> d(kCifarPixels);
      double norm2 = 0;
      for (std::size_t p = 0; p < kCifarPixels; ++p) {
        d[p] = tmpl[i][p] - tmpl[j][p];
        norm2 += d[p] * d[p];
      }
      double inv = 1.0 / std::sqrt(norm2);
      for (double& v : d) v *= inv;
      dirs.push_back(std::move(d));
    }
  const double latent_sd = 450.0 / std::sqrt(double(dirs.size()));

  auto emit = [&](std::size_t n, bool noisy_labels) {
    RawCifar raw;
    raw.labels.resize(n);
    raw.pixels.resize(n * kCifarPixels);
    std::vector<double> img(kCifarPixels);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t c = i % classes;
      img.assign(tmpl[c].begin(), tmpl[c].end());
      for (const auto& dir : dirs) {
        double u = latent_sd * rng.normal();
        for (std::size_t p = 0; p < kCifarPixels; ++p) img[p] += u * dir[p];
      }
      for (std::size_t p = 0; p < kCifarPixels; ++p) {
        double v = img[p] + 25.0 * rng.normal();
        raw.pixels[i * kCifarPixels + p] =
            std::uint8_t(std::lround(std::clamp(v, 0.0, 255.0)));
      }
      std::size_t label = c;
      if (noisy_labels && rng.uniform() < label_noise) label = rng.below(classes);
      raw.labels[i] = std::uint8_t(label);
    }
    return raw;
  };

  CollisionFixture fx;
  fx.train = emit(n_train, true);
  fx.test = emit(n_test, false);
  return fx;
}

// Writes fixture_train.bin / fixture_test.bin under dir; returns the paths.
inline std::pair<std::string, std::string> write_collision_fixture(const std::string& dir,
                                                                   std::size_t n_train,
                                                                   std::size_t n_test,
                                                                   std::uint64_t seed) {
  CollisionFixture fx = make_collision_fixture(n_train, n_test, seed);
  std::filesystem::create_directories(dir);
  std::string train_path = (std::filesystem::path(dir) / "fixture_train.bin").string();
  std::string test_path = (std::filesystem::path(dir) / "fixture_test.bin").string();
  write_cifar_file(train_path, fx.train);
  write_cifar_file(test_path, fx.test);
  return {train_path, test_path};
}

}  // namespace lpbn
