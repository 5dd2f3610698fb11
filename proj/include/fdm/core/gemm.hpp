#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace fdm::detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<RowMat<T>>;
template <class T>
using CMapRM = Eigen::Map<const RowMat<T>>;

// C[M x N] (+)= op(A) * op(B), all row-major. op(A) is M x K, op(B) is K x N.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  using Eigen::Index;
  const auto M = static_cast<Index>(m), N = static_cast<Index>(n), K = static_cast<Index>(k);
  MapRM<T> cm(c, M, N);
  if (K == 0) {
    if (!accumulate) cm.setZero();
    return;
  }
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate)
      cm.noalias() += lhs * rhs;
    else
      cm.noalias() = lhs * rhs;
  };
  if (!trans_a && !trans_b) run(CMapRM<T>(a, M, K), CMapRM<T>(b, K, N));
  else if (trans_a && !trans_b) run(CMapRM<T>(a, K, M).transpose(), CMapRM<T>(b, K, N));
  else if (!trans_a && trans_b) run(CMapRM<T>(a, M, K), CMapRM<T>(b, N, K).transpose());
  else run(CMapRM<T>(a, K, M).transpose(), CMapRM<T>(b, N, K).transpose());
}

}  // namespace fdm::detail
