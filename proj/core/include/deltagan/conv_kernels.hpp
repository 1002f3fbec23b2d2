#pragma once

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE  // threading happens at the batch level
#endif

#include <Eigen/Core>

#include <vector>

#include "deltagan/tensor.hpp"

namespace deltagan::detail {

template <typename T>
using MatCM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
template <typename T>
using MapCM = Eigen::Map<MatCM<T>>;
template <typename T>
using CMapCM = Eigen::Map<const MatCM<T>>;
template <typename T>
using MapRM =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CMapRM =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// Unfold one sample (C, H, W) into a (C*kh*kw) x (Ho*Wo) patch matrix,
/// column-major, zero padding, stride 1.
template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int pad, T* col) {
  const int Ho = H + 2 * pad - kh + 1;
  const int Wo = W + 2 * pad - kw + 1;
  const int rows = C * kh * kw;
  for (int ho = 0; ho < Ho; ++ho) {
    for (int wo = 0; wo < Wo; ++wo) {
      T* dst = col + static_cast<std::size_t>(ho * Wo + wo) * rows;
      for (int c = 0; c < C; ++c) {
        const T* plane = x + static_cast<std::size_t>(c) * H * W;
        for (int i = 0; i < kh; ++i) {
          const int h = ho + i - pad;
          if (h < 0 || h >= H) {
            for (int j = 0; j < kw; ++j) *dst++ = T(0);
            continue;
          }
          const T* row = plane + static_cast<std::size_t>(h) * W;
          for (int j = 0; j < kw; ++j) {
            const int w = wo + j - pad;
            *dst++ = (w < 0 || w >= W) ? T(0) : row[w];
          }
        }
      }
    }
  }
}

/// Fold a patch-matrix gradient back onto the input gradient (+=).
template <typename T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int pad, T* gx) {
  const int Ho = H + 2 * pad - kh + 1;
  const int Wo = W + 2 * pad - kw + 1;
  const int rows = C * kh * kw;
  for (int ho = 0; ho < Ho; ++ho) {
    for (int wo = 0; wo < Wo; ++wo) {
      const T* src = col + static_cast<std::size_t>(ho * Wo + wo) * rows;
      for (int c = 0; c < C; ++c) {
        T* plane = gx + static_cast<std::size_t>(c) * H * W;
        for (int i = 0; i < kh; ++i) {
          const int h = ho + i - pad;
          if (h < 0 || h >= H) {
            src += kw;
            continue;
          }
          T* row = plane + static_cast<std::size_t>(h) * W;
          for (int j = 0; j < kw; ++j) {
            const int w = wo + j - pad;
            if (w >= 0 && w < W) row[w] += *src;
            ++src;
          }
        }
      }
    }
  }
}

}  // namespace deltagan::detail
