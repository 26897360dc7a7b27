#ifndef CNF_MAT_HPP
#define CNF_MAT_HPP

#include <cassert>
#include <cmath>
#include <vector>

namespace cnf {

// Dense row-major matrix of doubles. Small and unfancy: every tensor in this
// project is 2-D and fits comfortably in cache at desk scale.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}
  Mat(int r, int c, double fill) : rows(r), cols(c), a(static_cast<size_t>(r) * c, fill) {}

  double& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }

  double* row(int r) { return a.data() + static_cast<size_t>(r) * cols; }
  const double* row(int r) const { return a.data() + static_cast<size_t>(r) * cols; }

  size_t size() const { return a.size(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

  void fill(double v) { std::fill(a.begin(), a.end(), v); }

  bool finite() const {
    for (double x : a)
      if (!std::isfinite(x)) return false;
    return true;
  }

  static Mat from(std::initializer_list<std::initializer_list<double>> v) {
    Mat m(static_cast<int>(v.size()), static_cast<int>(v.begin()->size()));
    int r = 0;
    for (const auto& rowv : v) {
      int c = 0;
      for (double x : rowv) m(r, c++) = x;
      ++r;
    }
    return m;
  }
};

// out (+)= A * B
void matmul(const Mat& A, const Mat& B, Mat& out, bool accumulate = false);
// out (+)= A * B^T
void matmul_nt(const Mat& A, const Mat& B, Mat& out, bool accumulate = false);
// out (+)= A^T * B
void matmul_tn(const Mat& A, const Mat& B, Mat& out, bool accumulate = false);

inline Mat matmul(const Mat& A, const Mat& B) {
  Mat out(A.rows, B.cols);
  matmul(A, B, out);
  return out;
}

inline void axpy(double alpha, const Mat& x, Mat& y) {
  assert(x.same_shape(y));
  const double* xs = x.a.data();
  double* ys = y.a.data();
  for (size_t i = 0; i < x.size(); ++i) ys[i] += alpha * xs[i];
}

inline double dot_all(const Mat& x, const Mat& y) {
  assert(x.same_shape(y));
  double s = 0.0;
  for (size_t i = 0; i < x.size(); ++i) s += x.a[i] * y.a[i];
  return s;
}

inline double norm2(const Mat& x) { return std::sqrt(dot_all(x, x)); }

}  // namespace cnf

#endif
