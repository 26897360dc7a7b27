#include "cnf/mat.hpp"

namespace cnf {

void matmul(const Mat& A, const Mat& B, Mat& out, bool accumulate) {
  assert(A.cols == B.rows);
  if (out.rows != A.rows || out.cols != B.cols) out = Mat(A.rows, B.cols);
  if (!accumulate) out.fill(0.0);
  const int n = A.rows, k = A.cols, m = B.cols;
  for (int i = 0; i < n; ++i) {
    const double* __restrict__ ar = A.row(i);
    double* __restrict__ or_ = out.row(i);
    for (int p = 0; p < k; ++p) {
      const double av = ar[p];
      const double* __restrict__ br = B.row(p);
      for (int j = 0; j < m; ++j) or_[j] += av * br[j];
    }
  }
}

void matmul_nt(const Mat& A, const Mat& B, Mat& out, bool accumulate) {
  assert(A.cols == B.cols);
  if (out.rows != A.rows || out.cols != B.rows) out = Mat(A.rows, B.rows);
  if (!accumulate) out.fill(0.0);
  const int n = A.rows, k = A.cols, m = B.rows;
  for (int i = 0; i < n; ++i) {
    const double* __restrict__ ar = A.row(i);
    double* __restrict__ or_ = out.row(i);
    for (int j = 0; j < m; ++j) {
      const double* __restrict__ br = B.row(j);
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ar[p] * br[p];
      or_[j] += s;
    }
  }
}

void matmul_tn(const Mat& A, const Mat& B, Mat& out, bool accumulate) {
  assert(A.rows == B.rows);
  if (out.rows != A.cols || out.cols != B.cols) out = Mat(A.cols, B.cols);
  if (!accumulate) out.fill(0.0);
  const int n = A.cols, k = A.rows, m = B.cols;
  for (int p = 0; p < k; ++p) {
    const double* __restrict__ ar = A.row(p);
    const double* __restrict__ br = B.row(p);
    for (int i = 0; i < n; ++i) {
      const double av = ar[i];
      double* __restrict__ or_ = out.row(i);
      for (int j = 0; j < m; ++j) or_[j] += av * br[j];
    }
  }
}

}  // namespace cnf
