#pragma once

// Free functions over rank-2 tensors. Reductions accumulate in double
// regardless of the tensor scalar; Eigen does the heavy lifting.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "scrub/errors.hpp"
#include "scrub/tensor.hpp"

namespace scrub {

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 tensors, got " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()));
  }
  if (a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul inner extents differ: " + shape_to_string(a.shape()) + " * " +
                     shape_to_string(b.shape()));
  }
  TensorT<S> out = TensorT<S>::zeros({a.extent(0), b.extent(1)});
  out.mat().noalias() = a.mat() * b.mat();
  return out;
}

/// Row softmax that excludes masked entries structurally: a masked cell is
/// never read and its output is exactly zero. Row maxima are taken over the
/// surviving entries and subtracted before exponentiation; the normalizer is
/// accumulated in double. A row with no surviving entry is an error.
template <class S>
TensorT<S> masked_row_softmax(const TensorT<S>& s, const MaskTensor& masked) {
  if (s.rank() != 2) throw ShapeError("masked_row_softmax expects a rank-2 tensor");
  if (s.shape() != masked.shape()) {
    throw ShapeError("softmax mask shape " + shape_to_string(masked.shape()) +
                     " does not match logits " + shape_to_string(s.shape()));
  }
  const std::size_t rows = s.extent(0), cols = s.extent(1);
  TensorT<S> out = TensorT<S>::zeros(s.shape());
  std::vector<double> expv(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    double row_max = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j) {
      if (!masked.at2(i, j)) row_max = std::max(row_max, static_cast<double>(s.at2(i, j)));
    }
    if (!std::isfinite(row_max)) {
      throw DegenerateMaskError("softmax row " + std::to_string(i) + " is fully masked");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      if (masked.at2(i, j)) {
        expv[j] = 0.0;
      } else {
        expv[j] = std::exp(static_cast<double>(s.at2(i, j)) - row_max);
        total += expv[j];
      }
    }
    for (std::size_t j = 0; j < cols; ++j) {
      out.at2(i, j) = masked.at2(i, j) ? S{0} : static_cast<S>(expv[j] / total);
    }
  }
  return out;
}

template <class S>
TensorT<S> row_softmax(const TensorT<S>& s) {
  return masked_row_softmax(s, MaskTensor::zeros(s.shape()));
}

namespace detail {

// Flip an eigen/singular vector so its largest-magnitude entry is positive;
// ties resolve to the lowest index.
inline void fix_sign(Eigen::VectorXd& v, Eigen::VectorXd* coupled = nullptr) {
  Eigen::Index arg = 0;
  double best = -1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::abs(v[i]) > best) {
      best = std::abs(v[i]);
      arg = i;
    }
  }
  if (v[arg] < 0.0) {
    v = -v;
    if (coupled) *coupled = -*coupled;
  }
}

}  // namespace detail

/// Projections of the mean-centered rows of x onto the top-k principal
/// directions. Directions come from the eigendecomposition of the sample
/// covariance; each is sign-fixed so its largest-magnitude loading is
/// positive.
template <class S>
TensorT<S> pca_top(const TensorT<S>& x, std::size_t k) {
  if (x.rank() != 2) throw ShapeError("pca_top expects a rank-2 tensor");
  const std::size_t n = x.extent(0), f = x.extent(1);
  if (k < 1 || k > f) {
    throw ShapeError("pca_top k=" + std::to_string(k) + " outside [1, " + std::to_string(f) + "]");
  }
  if (n < k) throw ShapeError("pca_top needs at least k rows");

  Eigen::MatrixXd centered = x.mat().template cast<double>();
  centered.rowwise() -= centered.colwise().mean();
  const double denom = (n > 1) ? static_cast<double>(n - 1) : 1.0;
  Eigen::MatrixXd cov = centered.transpose() * centered / denom;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw RuntimeFailure("pca_top eigensolver failed");

  TensorT<S> out = TensorT<S>::zeros({n, k});
  auto om = out.mat();
  for (std::size_t c = 0; c < k; ++c) {
    // Eigen orders eigenvalues ascending; take from the top.
    Eigen::VectorXd dir = solver.eigenvectors().col(static_cast<Eigen::Index>(f - 1 - c));
    detail::fix_sign(dir);
    Eigen::VectorXd proj = centered * dir;
    for (std::size_t r = 0; r < n; ++r) {
      om(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = static_cast<S>(proj[r]);
    }
  }
  return out;
}

template <class S>
struct SvdTop1 {
  TensorT<S> u;  // length r
  S sigma = 0;
  TensorT<S> v;  // length c
};

/// Leading singular triple, i.e. the best rank-1 approximation sigma*u*v^T in
/// Frobenius norm. v is sign-fixed like pca_top directions and u flipped with
/// it so the product is unchanged.
template <class S>
SvdTop1<S> svd_top1(const TensorT<S>& m) {
  if (m.rank() != 2) throw ShapeError("svd_top1 expects a rank-2 tensor");
  Eigen::MatrixXd md = m.mat().template cast<double>();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(md, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Eigen::VectorXd u = svd.matrixU().col(0);
  Eigen::VectorXd v = svd.matrixV().col(0);
  detail::fix_sign(v, &u);

  SvdTop1<S> out;
  out.sigma = static_cast<S>(svd.singularValues()[0]);
  out.u = TensorT<S>::zeros({m.extent(0)});
  out.v = TensorT<S>::zeros({m.extent(1)});
  for (std::size_t i = 0; i < m.extent(0); ++i) out.u[i] = static_cast<S>(u[static_cast<Eigen::Index>(i)]);
  for (std::size_t j = 0; j < m.extent(1); ++j) out.v[j] = static_cast<S>(v[static_cast<Eigen::Index>(j)]);
  return out;
}

/// Lloyd's algorithm with k-means++ seeding from the supplied stream.
/// Iteration is capped at 100 rounds and stops early once every center moves
/// less than 1e-6. Ties and empty clusters resolve deterministically (lowest
/// index; an empty cluster adopts the point farthest from its center).
template <class S>
std::vector<int> kmeans(const TensorT<S>& x, std::size_t k, Rng& rng) {
  if (x.rank() != 2) throw ShapeError("kmeans expects a rank-2 tensor");
  const std::size_t n = x.extent(0), f = x.extent(1);
  if (k < 1 || k > n) throw ShapeError("kmeans k outside [1, n]");

  Eigen::MatrixXd pts = x.mat().template cast<double>();
  Eigen::MatrixXd centers(k, f);

  auto dist2 = [&](std::size_t point, const Eigen::RowVectorXd& c) {
    return (pts.row(static_cast<Eigen::Index>(point)) - c).squaredNorm();
  };

  // k-means++ seeding.
  centers.row(0) = pts.row(static_cast<Eigen::Index>(rng.uniform_index(n)));
  std::vector<double> best(n);
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j) d = std::min(d, dist2(i, centers.row(static_cast<Eigen::Index>(j))));
      best[i] = d;
      total += d;
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double running = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        running += best[i];
        if (running >= target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_index(n);
    }
    centers.row(static_cast<Eigen::Index>(c)) = pts.row(static_cast<Eigen::Index>(pick));
  }

  std::vector<int> labels(n, 0);
  for (int round = 0; round < 100; ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      double d_best = std::numeric_limits<double>::infinity();
      int l_best = 0;
      for (std::size_t c = 0; c < k; ++c) {
        const double d = dist2(i, centers.row(static_cast<Eigen::Index>(c)));
        if (d < d_best) {
          d_best = d;
          l_best = static_cast<int>(c);
        }
      }
      labels[i] = l_best;
    }

    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(k, f);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      next.row(labels[i]) += pts.row(static_cast<Eigen::Index>(i));
      ++count[static_cast<std::size_t>(labels[i])];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) {
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = dist2(i, centers.row(labels[i]));
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        next.row(static_cast<Eigen::Index>(c)) = pts.row(static_cast<Eigen::Index>(far));
      } else {
        next.row(static_cast<Eigen::Index>(c)) /= static_cast<double>(count[c]);
      }
    }

    double moved = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      moved = std::max(moved, (next.row(static_cast<Eigen::Index>(c)) -
                               centers.row(static_cast<Eigen::Index>(c)))
                                  .norm());
    }
    centers = next;
    if (moved < 1e-6) break;
  }

  for (std::size_t i = 0; i < n; ++i) {
    double d_best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      const double d = dist2(i, centers.row(static_cast<Eigen::Index>(c)));
      if (d < d_best) {
        d_best = d;
        labels[i] = static_cast<int>(c);
      }
    }
  }
  return labels;
}

template <class S>
double kmeans_inertia(const TensorT<S>& x, const std::vector<int>& labels, std::size_t k) {
  const std::size_t n = x.extent(0), f = x.extent(1);
  Eigen::MatrixXd pts = x.mat().template cast<double>();
  Eigen::MatrixXd centers = Eigen::MatrixXd::Zero(k, f);
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    centers.row(labels[i]) += pts.row(static_cast<Eigen::Index>(i));
    ++count[static_cast<std::size_t>(labels[i])];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (count[c]) centers.row(static_cast<Eigen::Index>(c)) /= static_cast<double>(count[c]);
  }
  double inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    inertia += (pts.row(static_cast<Eigen::Index>(i)) - centers.row(labels[i])).squaredNorm();
  }
  return inertia;
}

}  // namespace scrub
