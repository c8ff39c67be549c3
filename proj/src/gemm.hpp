#pragma once

#include <algorithm>
#include <cstddef>

namespace rtcnn::detail {

/// C(m x n) += A(m x k) * B(k x n), all row-major with the given leading dimensions.
/// Every C element accumulates its k products in ascending k, so the result matches a plain
/// triple loop bit for bit; only the traversal is blocked so the inner loop vectorizes over n.
template <typename T>
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
              std::size_t ldb, T* c, std::size_t ldc) {
    constexpr std::size_t kTile = 512 / sizeof(T);
    for (std::size_t j0 = 0; j0 < n; j0 += kTile) {
        const std::size_t jn = std::min(kTile, n - j0);
        std::size_t i = 0;
        for (; i + 4 <= m; i += 4) {
            T* __restrict c0 = c + (i + 0) * ldc + j0;
            T* __restrict c1 = c + (i + 1) * ldc + j0;
            T* __restrict c2 = c + (i + 2) * ldc + j0;
            T* __restrict c3 = c + (i + 3) * ldc + j0;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T a0 = a[(i + 0) * lda + kk];
                const T a1 = a[(i + 1) * lda + kk];
                const T a2 = a[(i + 2) * lda + kk];
                const T a3 = a[(i + 3) * lda + kk];
                const T* __restrict br = b + kk * ldb + j0;
                for (std::size_t j = 0; j < jn; ++j) {
                    const T bv = br[j];
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
        }
        for (; i < m; ++i) {
            T* __restrict c0 = c + i * ldc + j0;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T a0 = a[i * lda + kk];
                const T* __restrict br = b + kk * ldb + j0;
                for (std::size_t j = 0; j < jn; ++j) c0[j] += a0 * br[j];
            }
        }
    }
}

/// dst(cols x rows) = src(rows x cols)^T
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
    constexpr std::size_t kBlock = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += kBlock)
        for (std::size_t c0 = 0; c0 < cols; c0 += kBlock)
            for (std::size_t r = r0; r < std::min(rows, r0 + kBlock); ++r)
                for (std::size_t cc = c0; cc < std::min(cols, c0 + kBlock); ++cc) dst[cc * rows + r] = src[r * cols + cc];
}

}  // namespace rtcnn::detail
