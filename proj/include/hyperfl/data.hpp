#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hyperfl/errors.hpp"
#include "hyperfl/network.hpp"
#include "hyperfl/rng.hpp"
#include "hyperfl/tensor.hpp"

namespace hyperfl {

/// Features [N, D] in [0, 1] with integer labels in [0, num_classes).
struct Dataset {
  Tensor x;
  std::vector<std::size_t> y;
  std::size_t num_classes = 0;

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return x.rank() == 2 ? x.dim(1) : 0; }

  void validate() const {
    if (y.empty()) throw ConsistencyError("dataset is empty");
    if (x.rank() != 2 || x.dim(0) != y.size()) {
      throw ConsistencyError("dataset has " + std::to_string(y.size()) + " labels for features " +
                             shape_str(x.shape()));
    }
    for (std::size_t label : y) {
      if (label >= num_classes) throw ConsistencyError("label outside class range");
    }
    if (!x.all_finite()) throw NumericError("dataset features are not finite");
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.num_classes = num_classes;
    const std::size_t d = dim();
    out.x = Tensor({indices.size(), d});
    out.y.reserve(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
      const std::size_t src = indices[r];
      std::copy_n(x.values().begin() + src * d, d, out.x.values().begin() + r * d);
      out.y.push_back(y[src]);
    }
    return out;
  }

  Batch batch(std::span<const std::size_t> indices) const {
    Dataset s = subset(indices);
    return Batch{std::move(s.x), std::move(s.y)};
  }

  Batch all() const { return Batch{x, y}; }

  Tensor row(std::size_t i) const {
    const std::size_t d = dim();
    return Tensor({1, d}, std::vector<double>(x.values().begin() + i * d, x.values().begin() + (i + 1) * d));
  }
};

/// Rescales all features jointly so the global minimum maps to 0 and the
/// maximum to 1.
inline void minmax_rescale(Tensor& x) {
  if (x.size() == 0) return;
  auto [lo, hi] = std::minmax_element(x.values().begin(), x.values().end());
  const double min = *lo, span = *hi - *lo;
  for (double& v : x.values()) v = span > 0.0 ? (v - min) / span : 0.5;
}

struct SynthSpec {
  std::size_t num_classes = 3;
  std::size_t dim = 32;
  std::size_t per_class = 400;
  double separation = 3.0;
  std::uint64_t seed = 0;
};

/// Gaussian blobs: class k has mean separation * e_k, where e_0..e_{K-1} are
/// seeded random orthonormal directions (random unit directions when K > D),
/// and unit-variance isotropic noise. Rows are shuffled and features min-max
/// rescaled to [0, 1].
inline Dataset synth_dataset(const SynthSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic data needs at least two classes");
  if (spec.dim < 1 || spec.per_class < 1) throw ConfigError("synthetic data needs D >= 1 and samples");
  Rng rng(derive_seed(spec.seed, {0x73796e7468ULL}));
  const std::size_t k = spec.num_classes, d = spec.dim;

  std::vector<std::vector<double>> dirs;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> e(d);
    for (double& v : e) v = rng.normal();
    if (k <= d) {
      for (const auto& prev : dirs) {
        double p = std::inner_product(e.begin(), e.end(), prev.begin(), 0.0);
        for (std::size_t i = 0; i < d; ++i) e[i] -= p * prev[i];
      }
    }
    double n = std::sqrt(std::inner_product(e.begin(), e.end(), e.begin(), 0.0));
    for (double& v : e) v /= n;
    dirs.push_back(std::move(e));
  }

  std::vector<std::size_t> order(k * spec.per_class);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  Dataset ds;
  ds.num_classes = k;
  ds.x = Tensor({order.size(), d});
  ds.y.resize(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    const std::size_t c = order[r] / spec.per_class;
    ds.y[r] = c;
    for (std::size_t i = 0; i < d; ++i) ds.x[r * d + i] = spec.separation * dirs[c][i] + rng.normal();
  }
  minmax_rescale(ds.x);
  return ds;
}

struct GlyphSpec {
  std::size_t num_classes = 10;
  std::size_t side = 16;
  std::size_t per_class = 60;
  std::size_t strokes = 3;
  std::size_t max_shift = 2;
  double noise = 0.05;
  std::uint64_t seed = 0;
};

/// Image-like data: each class owns a template of random thick strokes on a
/// dark background; samples are the template at a random offset with random
/// stroke intensities and pixel noise, clipped to [0, 1]. Flattened row-major
/// to side*side features.
inline Dataset synth_glyphs(const GlyphSpec& spec) {
  if (spec.num_classes < 2 || spec.side < 4) throw ConfigError("glyph data needs K >= 2 and side >= 4");
  Rng rng(derive_seed(spec.seed, {0x676c797068ULL}));
  const std::size_t s = spec.side;
  struct Stroke { double x0, y0, x1, y1; };
  std::vector<std::vector<Stroke>> templates(spec.num_classes);
  const double margin = static_cast<double>(spec.max_shift) + 1.0;
  for (auto& t : templates) {
    for (std::size_t j = 0; j < spec.strokes; ++j) {
      const double hi = static_cast<double>(s) - 1.0 - margin;
      t.push_back({rng.uniform(margin, hi), rng.uniform(margin, hi), rng.uniform(margin, hi),
                   rng.uniform(margin, hi)});
    }
  }

  auto dist_to_segment = [](double px, double py, const Stroke& st) {
    const double dx = st.x1 - st.x0, dy = st.y1 - st.y0;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - st.x0) * dx + (py - st.y0) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = st.x0 + t * dx - px, ey = st.y0 + t * dy - py;
    return std::sqrt(ex * ex + ey * ey);
  };

  const std::size_t n = spec.num_classes * spec.per_class;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.x = Tensor({n, s * s});
  ds.y.resize(n);
  const int shift_span = static_cast<int>(2 * spec.max_shift + 1);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t c = order[r] / spec.per_class;
    ds.y[r] = c;
    const double ox = static_cast<double>(static_cast<int>(rng.index(shift_span)) - static_cast<int>(spec.max_shift));
    const double oy = static_cast<double>(static_cast<int>(rng.index(shift_span)) - static_cast<int>(spec.max_shift));
    std::vector<double> intensity(spec.strokes);
    for (double& v : intensity) v = rng.uniform(0.6, 1.0);
    for (std::size_t py = 0; py < s; ++py) {
      for (std::size_t px = 0; px < s; ++px) {
        double val = 0.0;
        for (std::size_t j = 0; j < spec.strokes; ++j) {
          const double dd = dist_to_segment(static_cast<double>(px) - ox, static_cast<double>(py) - oy,
                                            templates[c][j]);
          val = std::max(val, intensity[j] * std::clamp(1.5 - dd, 0.0, 1.0));
        }
        val += spec.noise * rng.normal();
        ds.x[r * s * s + py * s + px] = std::clamp(val, 0.0, 1.0);
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// IDX files (big-endian header, unsigned byte payload)

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::uint32_t read_be32(const std::string& bytes, std::size_t at, const std::string& what) {
  if (bytes.size() < at + 4) throw FormatError(what + ": truncated header");
  return (std::uint32_t(static_cast<unsigned char>(bytes[at])) << 24) |
         (std::uint32_t(static_cast<unsigned char>(bytes[at + 1])) << 16) |
         (std::uint32_t(static_cast<unsigned char>(bytes[at + 2])) << 8) |
         std::uint32_t(static_cast<unsigned char>(bytes[at + 3]));
}

inline void append_be32(std::string& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<char>((v >> shift) & 0xff));
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace detail

/// Reads an IDX image/label pair; pixels are divided by 255 and images are
/// flattened to rows*cols features. The class count is max label + 1.
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const std::string img = detail::slurp(images_path);
  const std::string lab = detail::slurp(labels_path);
  if (detail::read_be32(img, 0, "images") != kIdxImagesMagic) throw FormatError("images: bad magic number");
  if (detail::read_be32(lab, 0, "labels") != kIdxLabelsMagic) throw FormatError("labels: bad magic number");
  const std::size_t n = detail::read_be32(img, 4, "images");
  const std::size_t rows = detail::read_be32(img, 8, "images");
  const std::size_t cols = detail::read_be32(img, 12, "images");
  const std::size_t n_labels = detail::read_be32(lab, 4, "labels");
  const std::size_t pixels = rows * cols;
  if (img.size() != 16 + n * pixels) throw FormatError("images: payload size does not match header");
  if (lab.size() != 8 + n_labels) throw FormatError("labels: payload size does not match header");
  if (n != n_labels) {
    throw ConsistencyError("IDX files disagree: " + std::to_string(n) + " images vs " +
                           std::to_string(n_labels) + " labels");
  }
  if (n == 0) throw ConsistencyError("IDX files contain no samples");

  Dataset ds;
  ds.x = Tensor({n, pixels});
  for (std::size_t i = 0; i < n * pixels; ++i) {
    ds.x[i] = static_cast<double>(static_cast<unsigned char>(img[16 + i])) / 255.0;
  }
  ds.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    ds.y[i] = static_cast<unsigned char>(lab[8 + i]);
    ds.num_classes = std::max(ds.num_classes, ds.y[i] + 1);
  }
  return ds;
}

/// Encodes images (values in [0,1], quantized to bytes) and labels as IDX.
inline std::pair<std::string, std::string> encode_idx(const Dataset& ds, std::size_t rows, std::size_t cols) {
  if (rows * cols != ds.dim()) throw DimensionError("encode_idx: rows*cols differs from feature width");
  std::string img, lab;
  detail::append_be32(img, kIdxImagesMagic);
  detail::append_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::append_be32(img, static_cast<std::uint32_t>(rows));
  detail::append_be32(img, static_cast<std::uint32_t>(cols));
  for (double v : ds.x.values()) img.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  detail::append_be32(lab, kIdxLabelsMagic);
  detail::append_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (std::size_t label : ds.y) lab.push_back(static_cast<char>(label));
  return {img, lab};
}

}  // namespace hyperfl
