#pragma once

// Dense row-major tensors over a scalar type, plus the seeded generator used
// everywhere randomness is needed. Eigen provides the matrix math; tensors
// expose Eigen::Map views of their storage instead of owning Eigen objects.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "scrub/errors.hpp"

namespace scrub {

namespace detail_alloc {
// Activation-sized temporaries (hundreds of KB) must be recycled on the
// heap; the default mmap threshold would hand each one to the kernel.
inline const bool tuned = [] {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 64 * 1024 * 1024);
#endif
  return true;
}();
}  // namespace detail_alloc

template <class S>
using MatrixR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMatrixR = Eigen::Map<MatrixR<S>>;
template <class S>
using ConstMapMatrixR = Eigen::Map<const MatrixR<S>>;

using Shape = std::vector<std::size_t>;

inline std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// N-dimensional dense array, row-major, value semantics. All public
/// construction paths reject non-finite scalars; masked-softmax inputs are
/// the one documented place where masked entries may hold arbitrary finite
/// values that are never read.
template <class S>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape), S{0}); }

  static TensorT full(Shape shape, S value) {
    check_finite_scalar(value);
    return TensorT(std::move(shape), value);
  }

  static TensorT from_data(Shape shape, std::vector<S> data) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_to_string(shape));
    }
    TensorT t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    t.check_finite();
    return t;
  }

  std::size_t rank() const { return shape_.size(); }
  const Shape& shape() const { return shape_; }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::span<S> values() { return data_; }
  std::span<const S> values() const { return data_; }

  S& operator[](std::size_t flat) { return data_[flat]; }
  const S& operator[](std::size_t flat) const { return data_[flat]; }

  S& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const S& at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

  /// Copy with a new shape of equal element count.
  TensorT reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("reshape " + shape_to_string(shape_) + " -> " + shape_to_string(shape) +
                       " changes element count");
    }
    TensorT t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  /// View the flat storage as an r x c Eigen matrix. Requires r*c == numel().
  MapMatrixR<S> mat_view(Eigen::Index rows, Eigen::Index cols) {
    require_view(rows, cols);
    return MapMatrixR<S>(data_.data(), rows, cols);
  }
  ConstMapMatrixR<S> mat_view(Eigen::Index rows, Eigen::Index cols) const {
    require_view(rows, cols);
    return ConstMapMatrixR<S>(data_.data(), rows, cols);
  }

  /// 2-D tensors only: view with the tensor's own extents.
  MapMatrixR<S> mat() {
    require_rank2();
    return mat_view(static_cast<Eigen::Index>(shape_[0]), static_cast<Eigen::Index>(shape_[1]));
  }
  ConstMapMatrixR<S> mat() const {
    require_rank2();
    return mat_view(static_cast<Eigen::Index>(shape_[0]), static_cast<Eigen::Index>(shape_[1]));
  }

  template <class T>
  TensorT<T> cast() const {
    std::vector<T> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
    return TensorT<T>::from_data(shape_, std::move(out));
  }

  bool operator==(const TensorT& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

  void check_finite() const {
    if constexpr (std::is_floating_point_v<S>) {
      for (const S v : data_) {
        if (!std::isfinite(v)) throw ValueError("tensor holds a non-finite value");
      }
    }
  }

 private:
  TensorT(Shape shape, S value) : shape_(std::move(shape)) {
    data_.assign(shape_numel(shape_), value);
  }

  static void check_finite_scalar(S value) {
    if constexpr (std::is_floating_point_v<S>) {
      if (!std::isfinite(value)) throw ValueError("non-finite fill value");
    }
  }

  void require_view(Eigen::Index rows, Eigen::Index cols) const {
    if (rows < 0 || cols < 0 ||
        static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) != numel()) {
      throw ShapeError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " does not cover tensor " + shape_to_string(shape_));
    }
  }

  void require_rank2() const {
    if (rank() != 2) throw ShapeError("expected a rank-2 tensor, got " + shape_to_string(shape_));
  }

  Shape shape_;
  std::vector<S> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

/// Binary tensors (masks) hold exactly {0,1}.
using MaskTensor = TensorT<std::uint8_t>;

inline void check_binary(const MaskTensor& m) {
  for (const auto v : m.values()) {
    if (v > 1) throw ValueError("mask holds a value outside {0,1}");
  }
}

/// out = a*x + b*y, elementwise.
template <class S>
TensorT<S> affine_combine(S a, const TensorT<S>& x, S b, const TensorT<S>& y) {
  if (!x.same_shape(y)) {
    throw ShapeError("affine_combine shape mismatch " + shape_to_string(x.shape()) + " vs " +
                     shape_to_string(y.shape()));
  }
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* px = x.data();
  const S* py = y.data();
  S* po = out.data();
  for (std::size_t i = 0; i < x.numel(); ++i) po[i] = a * px[i] + b * py[i];
  return out;
}

template <class S>
S max_abs_difference(const TensorT<S>& a, const TensorT<S>& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_difference shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  S worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Deterministic counter-style generator (SplitMix64: the state advances by a
/// fixed odd constant and the output is a bijective mix of the state). The
/// stream depends only on the 64-bit seed, never on platform or build flags.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t seed_state() const { return state_; }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform draw in (0, 1], 53-bit resolution.
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be positive. Modulo bias is below
  /// n / 2^64 and irrelevant at the sizes used here.
  std::size_t uniform_index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  /// Integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(uniform_index(static_cast<std::size_t>(hi - lo + 1)));
  }

  /// One standard normal draw via Box-Muller; always consumes two uniforms so
  /// streams stay aligned regardless of how results are used.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <class S>
  void fill_normal(TensorT<S>& t) {
    std::size_t i = 0;
    const std::size_t n = t.numel();
    while (i + 1 < n) {
      const double u1 = uniform();
      const double u2 = uniform();
      const double r = std::sqrt(-2.0 * std::log(u1));
      t[i++] = static_cast<S>(r * std::cos(2.0 * M_PI * u2));
      t[i++] = static_cast<S>(r * std::sin(2.0 * M_PI * u2));
    }
    if (i < n) t[i] = static_cast<S>(normal());
  }

  template <class S>
  TensorT<S> normal_tensor(Shape shape) {
    auto t = TensorT<S>::zeros(std::move(shape));
    fill_normal(t);
    return t;
  }

  /// Independent child stream; fork(i) is stable across runs for a given
  /// parent seed.
  Rng fork(std::uint64_t index) const {
    Rng mixer(state_ ^ (0xA5A5A5A55A5A5A5AULL + index * 0xD1B54A32D192ED03ULL));
    return Rng(mixer.next_u64());
  }

 private:
  std::uint64_t state_;
};

}  // namespace scrub
