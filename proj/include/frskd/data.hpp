// SPDX-License-Identifier: Apache-2.0
#pragma once
// Dataset handling: a raw binary image-tensor format driven by a small text
// manifest, a synthetic pattern generator for self-contained runs, crop/flip
// augmentation and deterministic seeded batching.
//
// File layout. The manifest names an images file (row-major [N,3,s,s] unsigned
// bytes) and a labels file (unsigned 16-bit little-endian), plus count,
// extent, classes and optional pinned per-channel normalization statistics.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "frskd/kv.hpp"
#include "frskd/rng.hpp"
#include "frskd/tensor.hpp"

namespace frskd {

struct NormStats {
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> stddev{1, 1, 1};
};

struct Dataset {
  std::vector<std::uint8_t> images;  // [N,3,s,s] row-major
  std::vector<int> labels;           // [N]
  std::size_t count = 0;
  std::size_t extent = 0;
  std::size_t classes = 0;
  std::string split = "train";
  std::optional<NormStats> stats;

  std::size_t image_bytes() const { return 3 * extent * extent; }

  void validate() const {
    if (count == 0) throw DataError("dataset: empty");
    if (classes < 2) throw DataError("dataset: need at least 2 classes");
    if (images.size() != count * image_bytes()) throw DataError("dataset: image buffer size mismatch");
    if (labels.size() != count) throw DataError("dataset: label count mismatch");
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= classes) {
        throw DataError("dataset: label " + std::to_string(l) + " out of range");
      }
    }
  }
};

/// Per-channel mean and standard deviation of the byte images scaled to [0,1].
inline NormStats compute_norm_stats(const Dataset& ds) {
  NormStats st;
  const std::size_t plane = ds.extent * ds.extent;
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < ds.count; ++i) {
      const std::uint8_t* p = ds.images.data() + i * ds.image_bytes() + c * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const double v = p[j] / 255.0;
        s += v;
        s2 += v * v;
      }
    }
    const double n = static_cast<double>(ds.count * plane);
    st.mean[c] = s / n;
    const double var = s2 / n - st.mean[c] * st.mean[c];
    st.stddev[c] = std::sqrt(var > 1e-12 ? var : 1e-12);
  }
  return st;
}

namespace detail {

inline std::string join3(const std::array<double, 3>& a) {
  std::ostringstream os;
  os.precision(17);
  os << a[0] << ',' << a[1] << ',' << a[2];
  return os.str();
}

inline std::array<double, 3> parse3(const std::string& s) {
  std::array<double, 3> out{};
  std::istringstream is(s);
  std::string tok;
  for (int i = 0; i < 3; ++i) {
    if (!std::getline(is, tok, ',')) throw DataError("manifest: expected three comma-separated values");
    out[i] = std::stod(tok);
  }
  return out;
}

}  // namespace detail

/// Byte-exact load of a manifest-described dataset. Normalization statistics
/// come from the manifest when pinned there, otherwise they are computed from
/// this dataset.
inline Dataset load_dataset(const std::string& manifest_path) {
  const KvFile kv = KvFile::load(manifest_path);
  Dataset ds;
  try {
    ds.count = std::stoull(kv.get("count"));
    ds.extent = std::stoull(kv.get("extent"));
    ds.classes = std::stoull(kv.get("classes"));
  } catch (const ConfigError& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  ds.split = kv.get_or("split", "train");
  const std::string dtype = kv.get_or("dtype", "u8");
  if (dtype != "u8") throw DataError("manifest: unsupported dtype '" + dtype + "'");

  const auto dir = std::filesystem::path(manifest_path).parent_path();
  const auto resolve = [&](const std::string& name) { return (dir / name).string(); };

  std::string images_file, labels_file;
  try {
    images_file = resolve(kv.get("images_file"));
    labels_file = resolve(kv.get("labels_file"));
  } catch (const ConfigError& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }

  std::ifstream img(images_file, std::ios::binary | std::ios::ate);
  if (!img) throw DataError("cannot open images file '" + images_file + "'");
  const std::size_t img_bytes = static_cast<std::size_t>(img.tellg());
  if (img_bytes != ds.count * ds.image_bytes()) {
    throw DataError("images file holds " + std::to_string(img_bytes) + " bytes, expected " +
                    std::to_string(ds.count * ds.image_bytes()));
  }
  ds.images.resize(img_bytes);
  img.seekg(0);
  img.read(reinterpret_cast<char*>(ds.images.data()), static_cast<std::streamsize>(img_bytes));
  if (!img) throw DataError("short read on '" + images_file + "'");

  std::ifstream lab(labels_file, std::ios::binary | std::ios::ate);
  if (!lab) throw DataError("cannot open labels file '" + labels_file + "'");
  const std::size_t lab_bytes = static_cast<std::size_t>(lab.tellg());
  if (lab_bytes != 2 * ds.count) {
    throw DataError("labels file holds " + std::to_string(lab_bytes) + " bytes, expected " +
                    std::to_string(2 * ds.count));
  }
  lab.seekg(0);
  std::vector<std::uint8_t> raw(lab_bytes);
  lab.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(lab_bytes));
  ds.labels.resize(ds.count);
  for (std::size_t i = 0; i < ds.count; ++i) {
    ds.labels[i] = static_cast<int>(raw[2 * i] | (raw[2 * i + 1] << 8));
  }

  if (kv.has("mean") && kv.has("std")) {
    NormStats st;
    st.mean = detail::parse3(kv.get("mean"));
    st.stddev = detail::parse3(kv.get("std"));
    ds.stats = st;
  } else {
    ds.stats = compute_norm_stats(ds);
  }
  ds.validate();
  return ds;
}

/// Writes images/labels next to the manifest; statistics are pinned into the
/// manifest so later loads reuse them byte-for-byte.
inline void save_dataset(const Dataset& ds, const std::string& manifest_path) {
  ds.validate();
  const auto path = std::filesystem::path(manifest_path);
  const std::string stem = path.stem().string();
  const auto dir = path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  const std::string images_name = stem + "_images.bin";
  const std::string labels_name = stem + "_labels.bin";

  {
    std::ofstream img(dir / images_name, std::ios::binary);
    if (!img) throw DataError("cannot write images file");
    img.write(reinterpret_cast<const char*>(ds.images.data()), static_cast<std::streamsize>(ds.images.size()));
  }
  {
    std::ofstream lab(dir / labels_name, std::ios::binary);
    if (!lab) throw DataError("cannot write labels file");
    for (int l : ds.labels) {
      const std::uint8_t lo = static_cast<std::uint8_t>(l & 0xff);
      const std::uint8_t hi = static_cast<std::uint8_t>((l >> 8) & 0xff);
      lab.put(static_cast<char>(lo));
      lab.put(static_cast<char>(hi));
    }
  }

  KvFile kv;
  kv.set("images_file", images_name);
  kv.set("labels_file", labels_name);
  kv.set("count", std::to_string(ds.count));
  kv.set("extent", std::to_string(ds.extent));
  kv.set("classes", std::to_string(ds.classes));
  kv.set("dtype", "u8");
  kv.set("split", ds.split);
  const NormStats st = ds.stats ? *ds.stats : compute_norm_stats(ds);
  kv.set("mean", detail::join3(st.mean));
  kv.set("std", detail::join3(st.stddev));
  kv.save(manifest_path);
}

// ---------------------------------------------------------------------------
// Synthetic data: class-determined geometric pattern and hue, randomized
// position, scale, hue jitter and pixel noise. Shapes are mirror-symmetric so
// horizontal flips stay label-preserving.

namespace detail {

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c; g = x;
  } else if (hp < 2) {
    r = x; g = c;
  } else if (hp < 3) {
    g = c; b = x;
  } else if (hp < 4) {
    g = x; b = c;
  } else if (hp < 5) {
    r = x; b = c;
  } else {
    r = c; b = x;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

// Signed distance-like coverage in [0,1] for the supported pattern kinds.
inline double shape_coverage(int kind, double dx, double dy, double radius, double thick) {
  const double r = std::sqrt(dx * dx + dy * dy);
  const auto soft = [](double signed_dist) {  // 1 inside, 0 outside, 1px ramp
    if (signed_dist <= -0.5) return 1.0;
    if (signed_dist >= 0.5) return 0.0;
    return 0.5 - signed_dist;
  };
  switch (kind) {
    case 0:  // disk
      return soft(r - radius);
    case 1:  // ring
      return soft(std::abs(r - radius * 0.8) - thick * 0.5);
    case 2: {  // axis-aligned cross
      const double bar = std::min(std::abs(dx), std::abs(dy));
      return r < radius * 1.15 ? soft(bar - thick * 0.5) : 0.0;
    }
    case 3: {  // diagonal cross
      const double bar = std::min(std::abs(dx - dy), std::abs(dx + dy)) / std::sqrt(2.0);
      return r < radius * 1.15 ? soft(bar - thick * 0.5) : 0.0;
    }
    case 4: {  // square outline
      const double box = std::max(std::abs(dx), std::abs(dy));
      return soft(std::abs(box - radius * 0.8) - thick * 0.5);
    }
    default: {  // four dots
      const double o = radius * 0.62;
      double best = 1e9;
      for (const double sx : {-o, o})
        for (const double sy : {-o, o}) {
          const double d = std::sqrt((dx - sx) * (dx - sx) + (dy - sy) * (dy - sy));
          best = std::min(best, d);
        }
      return soft(best - thick * 0.8);
    }
  }
}

}  // namespace detail

/// Deterministic synthetic dataset: label i%classes, pattern kind and base hue
/// fixed by the class, position/scale/hue jitter/noise drawn per sample.
inline Dataset gen_synthetic(std::size_t classes, std::size_t count, std::size_t extent, std::uint64_t seed,
                             const std::string& split = "train") {
  if (classes < 2 || classes > 64) throw DataError("gen_synthetic: classes must be in [2,64]");
  if (count == 0) throw DataError("gen_synthetic: count must be positive");
  if (extent < 8) throw DataError("gen_synthetic: extent must be at least 8");
  Dataset ds;
  ds.count = count;
  ds.extent = extent;
  ds.classes = classes;
  ds.split = split;
  ds.images.resize(count * ds.image_bytes());
  ds.labels.resize(count);

  Rng rng(mix_seed(seed, 0x73796e74ULL));  // "synt"
  const double ext = static_cast<double>(extent);
  const std::size_t plane = extent * extent;
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % classes);
    ds.labels[i] = label;
    const int kind = label % 6;
    // Base hue is class-determined but heavily jittered, and the pattern lands
    // anywhere in the frame at a broadly random scale: per-pixel statistics
    // carry little class signal, the geometry carries almost all of it.
    const double base_hue = std::fmod(0.11 + 0.618033988749895 * label, 1.0);
    const double hue = base_hue + rng.uniform(-0.42, 0.42);
    const auto fg = detail::hsv_to_rgb(hue, rng.uniform(0.45, 0.95), rng.uniform(0.55, 1.0));
    const auto bg = detail::hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.4), rng.uniform(0.05, 0.35));
    // Filled patterns draw from a smaller size range so foreground mass
    // overlaps across classes.
    const double radius = kind == 0 ? ext * rng.uniform(0.12, 0.25) : ext * rng.uniform(0.16, 0.34);
    const double margin = radius * 1.2 + 1.0;
    const double cx = margin + rng.uniform() * (ext - 2.0 * margin);
    const double cy = margin + rng.uniform() * (ext - 2.0 * margin);
    const double thick = std::max(1.2, radius * rng.uniform(0.3, 0.6));
    const double noise = rng.uniform(6.0, 16.0);

    std::uint8_t* img = ds.images.data() + i * ds.image_bytes();
    for (std::size_t y = 0; y < extent; ++y) {
      for (std::size_t x = 0; x < extent; ++x) {
        const double cov =
            detail::shape_coverage(kind, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy,
                                   radius, thick);
        for (std::size_t ch = 0; ch < 3; ++ch) {
          double v = 255.0 * (bg[ch] + (fg[ch] - bg[ch]) * cov) + noise * rng.normal();
          if (v < 0) v = 0;
          if (v > 255) v = 255;
          img[ch * plane + y * extent + x] = static_cast<std::uint8_t>(v + 0.5);
        }
      }
    }
  }
  ds.stats = compute_norm_stats(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation: zero-pad then random crop back, independent horizontal flip.

struct AugmentConfig {
  std::size_t pad = 4;
  double flip_prob = 0.5;
  bool enabled = true;

  void validate() const {
    if (flip_prob < 0 || flip_prob > 1) throw ConfigError("augment: flip probability must be in [0,1]");
  }
};

/// In-place augmentation of a [count,3,extent,extent] byte batch. Per image the
/// draw order is crop-y, crop-x, flip.
inline void augment(std::vector<std::uint8_t>& batch, std::size_t count, std::size_t extent,
                    const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  if (!cfg.enabled) return;
  const std::size_t plane = extent * extent;
  std::vector<std::uint8_t> scratch(3 * plane);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint8_t* img = batch.data() + i * 3 * plane;
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(cfg.pad);
    const std::ptrdiff_t dy = pad == 0 ? 0 : static_cast<std::ptrdiff_t>(rng.integer(2 * cfg.pad + 1)) - pad;
    const std::ptrdiff_t dx = pad == 0 ? 0 : static_cast<std::ptrdiff_t>(rng.integer(2 * cfg.pad + 1)) - pad;
    const bool flip = rng.bernoulli(cfg.flip_prob);
    if (dy == 0 && dx == 0 && !flip) continue;
    for (std::size_t c = 0; c < 3; ++c) {
      const std::uint8_t* src = img + c * plane;
      std::uint8_t* dst = scratch.data() + c * plane;
      for (std::size_t y = 0; y < extent; ++y) {
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
        for (std::size_t x = 0; x < extent; ++x) {
          const std::size_t xo = flip ? extent - 1 - x : x;
          const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xo) + dx;
          std::uint8_t v = 0;
          if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(extent) && sx >= 0 &&
              sx < static_cast<std::ptrdiff_t>(extent)) {
            v = src[static_cast<std::size_t>(sy) * extent + static_cast<std::size_t>(sx)];
          }
          dst[y * extent + x] = v;
        }
      }
    }
    std::copy(scratch.begin(), scratch.end(), img);
  }
}

// ---------------------------------------------------------------------------
// Batching.

/// Seeded permutation of 0..n-1 partitioned into batches; the last batch may
/// be short.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                           std::uint64_t epoch_seed) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(epoch_seed);
  rng.shuffle(perm.begin(), perm.end());
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                         perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

/// Gathers raw bytes for the given indices.
inline std::vector<std::uint8_t> gather_images(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<std::uint8_t> out(idx.size() * ds.image_bytes());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= ds.count) throw DataError("batch index out of range");
    std::copy_n(ds.images.data() + idx[i] * ds.image_bytes(), ds.image_bytes(),
                out.data() + i * ds.image_bytes());
  }
  return out;
}

inline std::vector<int> gather_labels(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = ds.labels[idx[i]];
  return out;
}

/// Bytes -> reals in [0,1] -> per-channel standardization with the given
/// statistics (the training split's, per the normalization contract).
template <typename T>
Tensor<T> to_input_tensor(const std::vector<std::uint8_t>& raw, std::size_t count, std::size_t extent,
                          const NormStats& stats) {
  const std::size_t plane = extent * extent;
  std::vector<T> vals(raw.size());
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::uint8_t* src = raw.data() + (i * 3 + c) * plane;
      T* dst = vals.data() + (i * 3 + c) * plane;
      const T mean = static_cast<T>(stats.mean[c]);
      const T inv = static_cast<T>(1.0 / stats.stddev[c]);
      for (std::size_t j = 0; j < plane; ++j) {
        dst[j] = (static_cast<T>(src[j]) / T(255) - mean) * inv;
      }
    }
  }
  return Tensor<T>::create({count, 3, extent, extent}, std::move(vals));
}

}  // namespace frskd
