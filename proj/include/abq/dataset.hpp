#pragma once

// Dataset ingestion: IDX (MNIST layout), CIFAR-10 binary batches, seeded
// synthetic Gaussian blobs; plus the deterministic batch sampler and an
// optional prefetching reader.

#include <abq/tensor.hpp>

#include <algorithm>
#include <condition_variable>
#include <cstdio>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace abq {

enum class Split : std::uint8_t { train = 0, test = 1 };

struct Dataset {
  Tensor images;            // N x C x H x W
  std::vector<int> labels;  // N entries in [0, classes)
  std::size_t classes = 10;
  Split split = Split::train;

  std::size_t size() const noexcept { return labels.size(); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

  void validate() const {
    if (images.rank() != 4) throw FormatError("dataset images must be N x C x H x W");
    if (images.dim(0) != labels.size()) {
      throw FormatError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                        std::to_string(labels.size()) + " labels");
    }
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= classes) {
        throw FormatError("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
      }
    }
  }

  /// Copies the given samples into a batch.
  std::pair<Tensor, std::vector<int>> gather(std::span<const std::size_t> indices) const {
    Shape s = images.shape();
    const std::size_t per = images.size() / s[0];
    s[0] = indices.size();
    Tensor batch(s);
    std::vector<int> ls(indices.size());
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const std::size_t i = indices[b];
      std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(i * per), per,
                  batch.data().begin() + static_cast<std::ptrdiff_t>(b * per));
      ls[b] = labels[i];
    }
    return {std::move(batch), std::move(ls)};
  }

  /// First `n` samples (all when n == 0 or n >= size()).
  Dataset head(std::size_t n) const {
    if (n == 0 || n >= size()) return *this;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto [imgs, ls] = gather(idx);
    return Dataset{std::move(imgs), std::move(ls), classes, split};
  }
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw FormatError("cannot open " + path.string() + ": " + ec.message());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (static_cast<std::size_t>(in.gcount()) != size) throw FormatError("short read on " + path.string());
  return bytes;
}

inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

/// Reads an IDX header and checks the file holds exactly the declared payload
/// before any payload buffer is allocated.
inline std::vector<std::size_t> idx_header(const std::filesystem::path& path, std::uint32_t magic,
                                           std::size_t& payload_offset) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw FormatError("cannot open " + path.string() + ": " + ec.message());
  const std::size_t ndims = magic & 0xFFu;
  const std::size_t header = 4 + 4 * ndims;
  if (size < header) throw FormatError(path.string() + ": file too short for an IDX header");
  std::ifstream in(path, std::ios::binary);
  std::vector<std::uint8_t> head(header);
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(header));
  if (!in) throw FormatError("cannot read " + path.string());
  const std::uint32_t got = read_be32(head, 0);
  if (got != magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad IDX magic 0x%08X (expected 0x%08X)", got, magic);
    throw FormatError(path.string() + ": " + buf);
  }
  std::vector<std::size_t> dims(ndims);
  std::size_t payload = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    dims[i] = read_be32(head, 4 + 4 * i);
    if (dims[i] == 0) throw FormatError(path.string() + ": zero IDX dimension");
    payload *= dims[i];
  }
  if (size != header + payload) {
    throw FormatError(path.string() + ": expected " + std::to_string(header + payload) + " bytes, found " +
                      std::to_string(size) + (size < header + payload ? " (truncated)" : ""));
  }
  payload_offset = header;
  return dims;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// IDX image file -> N x 1 x H x W tensor scaled by 1/255.
inline Tensor load_idx_images(const std::filesystem::path& path) {
  std::size_t off = 0;
  const auto dims = detail::idx_header(path, kIdxImagesMagic, off);
  const auto bytes = detail::read_file(path);
  Tensor t(Shape{dims[0], 1, dims[1], dims[2]});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(bytes[off + i]) / 255.0f;
  return t;
}

inline std::vector<int> load_idx_labels(const std::filesystem::path& path) {
  std::size_t off = 0;
  const auto dims = detail::idx_header(path, kIdxLabelsMagic, off);
  const auto bytes = detail::read_file(path);
  return std::vector<int>(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end());
}

/// Paired IDX image and label files.
inline Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                        std::size_t classes = 10, Split split = Split::train) {
  std::size_t off = 0;
  const auto img_dims = detail::idx_header(images, kIdxImagesMagic, off);
  const auto lab_dims = detail::idx_header(labels, kIdxLabelsMagic, off);
  if (img_dims[0] != lab_dims[0]) {
    throw FormatError("IDX count mismatch: " + std::to_string(img_dims[0]) + " images vs " +
                      std::to_string(lab_dims[0]) + " labels");
  }
  Dataset d{load_idx_images(images), load_idx_labels(labels), classes, split};
  d.validate();
  return d;
}

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// CIFAR-10 binary batch: records of 1 label byte + 3x32x32 channel-major pixels.
inline Dataset load_cifar_bin(const std::filesystem::path& path, Split split = Split::train) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw FormatError("cannot open " + path.string() + ": " + ec.message());
  if (size == 0 || size % kCifarRecordBytes != 0) {
    throw FormatError(path.string() + ": size " + std::to_string(size) + " is not a positive multiple of 3073");
  }
  const auto bytes = detail::read_file(path);
  const std::size_t n = size / kCifarRecordBytes;
  Dataset d{Tensor(Shape{n, 3, 32, 32}), std::vector<int>(n), 10, split};
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t base = r * kCifarRecordBytes;
    d.labels[r] = bytes[base];
    for (std::size_t i = 0; i < 3072; ++i) d.images[r * 3072 + i] = static_cast<float>(bytes[base + 1 + i]) / 255.0f;
  }
  d.validate();
  return d;
}

/// `classes` isotropic Gaussian blobs in `dims` dimensions (shape N x dims x 1 x 1).
/// Class means are pairwise at least `margin` apart; label i is i % classes.
inline Dataset synthetic_gaussians(std::size_t classes, std::size_t dims, std::size_t n, std::uint64_t seed,
                                   double margin = 5.0, double noise = 0.5) {
  if (classes < 2 || dims == 0 || n == 0) throw ConfigError("synthetic data needs >= 2 classes, dims > 0, n > 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> means(classes, std::vector<double>(dims, 0.0));
  if (dims >= classes) {
    // Scaled simplex corners: every pair is exactly `margin` apart.
    for (std::size_t c = 0; c < classes; ++c) means[c][c] = margin / std::sqrt(2.0);
  } else {
    for (std::size_t c = 0; c < classes; ++c) {
      for (int attempt = 0;; ++attempt) {
        if (attempt > 10000) throw ConfigError("cannot place synthetic class means with the requested margin");
        for (auto& v : means[c]) v = normal(rng) * margin * static_cast<double>(classes);
        bool ok = true;
        for (std::size_t p = 0; p < c && ok; ++p) {
          double d2 = 0.0;
          for (std::size_t k = 0; k < dims; ++k) d2 += (means[c][k] - means[p][k]) * (means[c][k] - means[p][k]);
          ok = std::sqrt(d2) >= margin;
        }
        if (ok) break;
      }
    }
  }
  Dataset d{Tensor(Shape{n, dims, 1, 1}), std::vector<int>(n), classes, Split::train};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    d.labels[i] = static_cast<int>(c);
    for (std::size_t k = 0; k < dims; ++k) d.images[i * dims + k] = static_cast<float>(means[c][k] + noise * normal(rng));
  }
  return d;
}

/// Deterministic mini-batch order: each epoch is a seeded permutation, the
/// trailing partial batch is dropped. Batch `step` depends only on (seed, step).
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed)
      : n_(dataset_size), batch_(batch_size), seed_(seed) {
    if (batch_ == 0 || batch_ > n_) throw ConfigError("batch_size must lie in [1, dataset size]");
    per_epoch_ = n_ / batch_;
  }

  std::size_t batches_per_epoch() const noexcept { return per_epoch_; }

  std::vector<std::size_t> indices(std::uint64_t step) {
    const std::uint64_t epoch = step / per_epoch_;
    if (!cached_ || cached_epoch_ != epoch) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      std::mt19937_64 rng(seed_ ^ (0x9E3779B97F4A7C15ULL * (epoch + 1)));
      // Fisher-Yates with an explicit bounded draw so the order is fixed by the seed alone.
      for (std::size_t i = n_ - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
        std::swap(perm_[i], perm_[j]);
      }
      cached_epoch_ = epoch;
      cached_ = true;
    }
    const std::size_t start = static_cast<std::size_t>(step % per_epoch_) * batch_;
    return std::vector<std::size_t>(perm_.begin() + static_cast<std::ptrdiff_t>(start),
                                    perm_.begin() + static_cast<std::ptrdiff_t>(start + batch_));
  }

 private:
  std::size_t n_, batch_, per_epoch_ = 0;
  std::uint64_t seed_;
  std::vector<std::size_t> perm_;
  std::uint64_t cached_epoch_ = 0;
  bool cached_ = false;
};

struct Batch {
  std::uint64_t step = 0;
  Tensor images;
  std::vector<int> labels;
};

/// Background reader that assembles batches for steps [first, last] in order
/// and hands them over through a bounded queue.
class BatchPrefetcher {
 public:
  BatchPrefetcher(const Dataset& data, std::size_t batch_size, std::uint64_t seed, std::uint64_t first,
                  std::uint64_t last, std::size_t depth = 4)
      : depth_(depth == 0 ? 1 : depth) {
    worker_ = std::thread([this, &data, batch_size, seed, first, last] {
      BatchSampler sampler(data.size(), batch_size, seed);
      for (std::uint64_t s = first; s <= last; ++s) {
        auto idx = sampler.indices(s);
        auto [imgs, ls] = data.gather(idx);
        std::unique_lock lock(mu_);
        cv_.wait(lock, [this] { return stop_ || queue_.size() < depth_; });
        if (stop_) return;
        queue_.push_back(Batch{s, std::move(imgs), std::move(ls)});
        cv_.notify_all();
      }
    });
  }

  BatchPrefetcher(const BatchPrefetcher&) = delete;
  BatchPrefetcher& operator=(const BatchPrefetcher&) = delete;

  ~BatchPrefetcher() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }

  Batch next() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return !queue_.empty(); });
    Batch b = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return b;
  }

 private:
  std::size_t depth_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Batch> queue_;
  bool stop_ = false;
  std::thread worker_;
};

}  // namespace abq
