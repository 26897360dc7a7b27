#include "cnf/tape.hpp"

#include <cassert>
#include <cmath>

#include "cnf/errors.hpp"

namespace cnf {

void Tape::reset() { nodes_.clear(); }

Var Tape::push(Node&& node) {
  if (!grad_enabled_) node.requires_grad = false;
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Mat value, bool requires_grad) {
  Node n;
  n.op = Op::Leaf;
  n.val = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Mat Tape::grad_of(Var var) const {
  const Node& n = nodes_[static_cast<size_t>(var.id)];
  if (n.grad_alloc) return n.grad;
  return Mat(n.val.rows, n.val.cols);
}

Mat& Tape::ensure_grad(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_alloc) {
    n.grad = Mat(n.val.rows, n.val.cols);
    n.grad_alloc = true;
  }
  return n.grad;
}

namespace {

void check(bool ok, const char* what) {
  if (!ok) throw ArgumentError(std::string("tape shape mismatch: ") + what);
}

}  // namespace

// ---- forward ---------------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
  check(v(a.id).cols == v(b.id).rows, "matmul");
  Node n;
  n.op = Op::MatMul;
  n.a = a.id;
  n.b = b.id;
  cnf::matmul(v(a.id), v(b.id), n.val);
  n.requires_grad = at(a).requires_grad || at(b).requires_grad;
  return push(std::move(n));
}

Var Tape::matmul_nt(Var a, Var b) {
  check(v(a.id).cols == v(b.id).cols, "matmul_nt");
  Node n;
  n.op = Op::MatMulNT;
  n.a = a.id;
  n.b = b.id;
  cnf::matmul_nt(v(a.id), v(b.id), n.val);
  n.requires_grad = at(a).requires_grad || at(b).requires_grad;
  return push(std::move(n));
}

Var Tape::matmul_tn(Var a, Var b) {
  check(v(a.id).rows == v(b.id).rows, "matmul_tn");
  Node n;
  n.op = Op::MatMulTN;
  n.a = a.id;
  n.b = b.id;
  cnf::matmul_tn(v(a.id), v(b.id), n.val);
  n.requires_grad = at(a).requires_grad || at(b).requires_grad;
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  check(v(a.id).same_shape(v(b.id)), "add");
  Node n;
  n.op = Op::Add;
  n.a = a.id;
  n.b = b.id;
  n.val = v(a.id);
  axpy(1.0, v(b.id), n.val);
  n.requires_grad = at(a).requires_grad || at(b).requires_grad;
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  check(v(a.id).same_shape(v(b.id)), "sub");
  Node n;
  n.op = Op::Sub;
  n.a = a.id;
  n.b = b.id;
  n.val = v(a.id);
  axpy(-1.0, v(b.id), n.val);
  n.requires_grad = at(a).requires_grad || at(b).requires_grad;
  return push(std::move(n));
}

Var Tape::hadamard(Var a, Var b) {
  check(v(a.id).same_shape(v(b.id)), "hadamard");
  Node n;
  n.op = Op::Hadamard;
  n.a = a.id;
  n.b = b.id;
  n.val = v(a.id);
  for (size_t i = 0; i < n.val.size(); ++i) n.val.a[i] *= v(b.id).a[i];
  n.requires_grad = at(a).requires_grad || at(b).requires_grad;
  return push(std::move(n));
}

Var Tape::scale(Var a, double s) {
  Node n;
  n.op = Op::Scale;
  n.a = a.id;
  n.scalar = s;
  n.val = v(a.id);
  for (double& x : n.val.a) x *= s;
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::mul_rowvec(Var a, Var vec) {
  check(v(vec.id).rows == 1 && v(vec.id).cols == v(a.id).cols, "mul_rowvec");
  Node n;
  n.op = Op::MulRowVec;
  n.a = a.id;
  n.b = vec.id;
  n.val = v(a.id);
  for (int r = 0; r < n.val.rows; ++r)
    for (int c = 0; c < n.val.cols; ++c) n.val(r, c) *= v(vec.id)(0, c);
  n.requires_grad = at(a).requires_grad || at(vec).requires_grad;
  return push(std::move(n));
}

Var Tape::add_rowvec(Var a, Var vec) {
  check(v(vec.id).rows == 1 && v(vec.id).cols == v(a.id).cols, "add_rowvec");
  Node n;
  n.op = Op::AddRowVec;
  n.a = a.id;
  n.b = vec.id;
  n.val = v(a.id);
  for (int r = 0; r < n.val.rows; ++r)
    for (int c = 0; c < n.val.cols; ++c) n.val(r, c) += v(vec.id)(0, c);
  n.requires_grad = at(a).requires_grad || at(vec).requires_grad;
  return push(std::move(n));
}

Var Tape::mul_colvec(Var a, Var vec) {
  check(v(vec.id).cols == 1 && v(vec.id).rows == v(a.id).rows, "mul_colvec");
  Node n;
  n.op = Op::MulColVec;
  n.a = a.id;
  n.b = vec.id;
  n.val = v(a.id);
  for (int r = 0; r < n.val.rows; ++r)
    for (int c = 0; c < n.val.cols; ++c) n.val(r, c) *= v(vec.id)(r, 0);
  n.requires_grad = at(a).requires_grad || at(vec).requires_grad;
  return push(std::move(n));
}

Var Tape::row_reduce_sum(Var a) {
  Node n;
  n.op = Op::RowReduceSum;
  n.a = a.id;
  n.val = Mat(1, v(a.id).cols);
  for (int r = 0; r < v(a.id).rows; ++r)
    for (int c = 0; c < v(a.id).cols; ++c) n.val(0, c) += v(a.id)(r, c);
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::row_sum(Var a) {
  Node n;
  n.op = Op::RowSum;
  n.a = a.id;
  n.val = Mat(v(a.id).rows, 1);
  for (int r = 0; r < v(a.id).rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < v(a.id).cols; ++c) s += v(a.id)(r, c);
    n.val(r, 0) = s;
  }
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::tanh(Var a) {
  Node n;
  n.op = Op::Tanh;
  n.a = a.id;
  n.val = v(a.id);
  for (double& x : n.val.a) x = std::tanh(x);
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::relu(Var a) {
  Node n;
  n.op = Op::Relu;
  n.a = a.id;
  n.val = v(a.id);
  for (double& x : n.val.a) x = x > 0.0 ? x : 0.0;
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::log(Var a) {
  Node n;
  n.op = Op::Log;
  n.a = a.id;
  n.val = v(a.id);
  for (double& x : n.val.a) x = std::log(x);
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::reciprocal(Var a) {
  Node n;
  n.op = Op::Reciprocal;
  n.a = a.id;
  n.val = v(a.id);
  for (double& x : n.val.a) x = 1.0 / x;
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::rsqrt_eps(Var a, double eps) {
  Node n;
  n.op = Op::RsqrtEps;
  n.a = a.id;
  n.scalar = eps;
  n.val = v(a.id);
  for (double& x : n.val.a) x = 1.0 / std::sqrt(x + eps);
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::softmax_rows_masked(Var a, Mat mask) {
  check(mask.same_shape(v(a.id)), "softmax mask");
  Node n;
  n.op = Op::SoftmaxRowsMasked;
  n.a = a.id;
  n.val = v(a.id);
  for (int r = 0; r < n.val.rows; ++r) {
    double mx = -1e300;
    bool any = false;
    for (int c = 0; c < n.val.cols; ++c)
      if (mask(r, c) != 0.0) {
        mx = std::max(mx, n.val(r, c));
        any = true;
      }
    if (!any) throw NumericError("softmax row has no unmasked entry");
    double sum = 0.0;
    for (int c = 0; c < n.val.cols; ++c) {
      if (mask(r, c) != 0.0) {
        n.val(r, c) = std::exp(n.val(r, c) - mx);
        sum += n.val(r, c);
      } else {
        n.val(r, c) = 0.0;
      }
    }
    for (int c = 0; c < n.val.cols; ++c) n.val(r, c) /= sum;
  }
  n.aux = std::move(mask);
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::gather_rows(Var a, std::vector<int> idx) {
  Node n;
  n.op = Op::GatherRows;
  n.a = a.id;
  n.val = Mat(static_cast<int>(idx.size()), v(a.id).cols);
  for (size_t r = 0; r < idx.size(); ++r) {
    check(idx[r] >= 0 && idx[r] < v(a.id).rows, "gather_rows index");
    for (int c = 0; c < n.val.cols; ++c) n.val(static_cast<int>(r), c) = v(a.id)(idx[r], c);
  }
  n.idx = std::move(idx);
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::scatter_rows(Var a, std::vector<int> idx, int target_rows) {
  check(static_cast<int>(idx.size()) == v(a.id).rows, "scatter_rows index count");
  Node n;
  n.op = Op::ScatterRows;
  n.a = a.id;
  n.scalar = target_rows;
  n.val = Mat(target_rows, v(a.id).cols);
  for (size_t r = 0; r < idx.size(); ++r) {
    check(idx[r] >= 0 && idx[r] < target_rows, "scatter_rows index");
    for (int c = 0; c < n.val.cols; ++c) n.val(idx[r], c) += v(a.id)(static_cast<int>(r), c);
  }
  n.idx = std::move(idx);
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::concat_rows(Var a, Var b) {
  check(v(a.id).cols == v(b.id).cols, "concat_rows");
  Node n;
  n.op = Op::ConcatRows;
  n.a = a.id;
  n.b = b.id;
  n.val = Mat(v(a.id).rows + v(b.id).rows, v(a.id).cols);
  for (int r = 0; r < v(a.id).rows; ++r)
    for (int c = 0; c < n.val.cols; ++c) n.val(r, c) = v(a.id)(r, c);
  for (int r = 0; r < v(b.id).rows; ++r)
    for (int c = 0; c < n.val.cols; ++c) n.val(v(a.id).rows + r, c) = v(b.id)(r, c);
  n.requires_grad = at(a).requires_grad || at(b).requires_grad;
  return push(std::move(n));
}

Var Tape::concat_cols(Var a, Var b) {
  check(v(a.id).rows == v(b.id).rows, "concat_cols");
  Node n;
  n.op = Op::ConcatCols;
  n.a = a.id;
  n.b = b.id;
  n.val = Mat(v(a.id).rows, v(a.id).cols + v(b.id).cols);
  for (int r = 0; r < n.val.rows; ++r) {
    for (int c = 0; c < v(a.id).cols; ++c) n.val(r, c) = v(a.id)(r, c);
    for (int c = 0; c < v(b.id).cols; ++c) n.val(r, v(a.id).cols + c) = v(b.id)(r, c);
  }
  n.requires_grad = at(a).requires_grad || at(b).requires_grad;
  return push(std::move(n));
}

Var Tape::slice_rows(Var a, int from, int to) {
  check(from >= 0 && to <= v(a.id).rows && from < to, "slice_rows range");
  Node n;
  n.op = Op::SliceRows;
  n.a = a.id;
  n.idx = {from, to};
  n.val = Mat(to - from, v(a.id).cols);
  for (int r = from; r < to; ++r)
    for (int c = 0; c < n.val.cols; ++c) n.val(r - from, c) = v(a.id)(r, c);
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::slice_cols(Var a, int from, int to) {
  check(from >= 0 && to <= v(a.id).cols && from < to, "slice_cols range");
  Node n;
  n.op = Op::SliceCols;
  n.a = a.id;
  n.idx = {from, to};
  n.val = Mat(v(a.id).rows, to - from);
  for (int r = 0; r < n.val.rows; ++r)
    for (int c = from; c < to; ++c) n.val(r, c - from) = v(a.id)(r, c);
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::pad_rows(Var a, int from, int total) {
  check(from >= 0 && from + v(a.id).rows <= total, "pad_rows range");
  Node n;
  n.op = Op::PadRows;
  n.a = a.id;
  n.idx = {from, total};
  n.val = Mat(total, v(a.id).cols);
  for (int r = 0; r < v(a.id).rows; ++r)
    for (int c = 0; c < n.val.cols; ++c) n.val(from + r, c) = v(a.id)(r, c);
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::pad_cols(Var a, int from, int total) {
  check(from >= 0 && from + v(a.id).cols <= total, "pad_cols range");
  Node n;
  n.op = Op::PadCols;
  n.a = a.id;
  n.idx = {from, total};
  n.val = Mat(v(a.id).rows, total);
  for (int r = 0; r < n.val.rows; ++r)
    for (int c = 0; c < v(a.id).cols; ++c) n.val(r, from + c) = v(a.id)(r, c);
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::pick_per_row(Var a, std::vector<int> idx) {
  check(static_cast<int>(idx.size()) == v(a.id).rows, "pick_per_row index count");
  Node n;
  n.op = Op::PickPerRow;
  n.a = a.id;
  n.val = Mat(v(a.id).rows, 1);
  for (int r = 0; r < n.val.rows; ++r) {
    check(idx[static_cast<size_t>(r)] >= 0 && idx[static_cast<size_t>(r)] < v(a.id).cols,
          "pick_per_row index");
    n.val(r, 0) = v(a.id)(r, idx[static_cast<size_t>(r)]);
  }
  n.idx = std::move(idx);
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::scatter_per_row(Var a, std::vector<int> idx, int cols) {
  check(v(a.id).cols == 1 && static_cast<int>(idx.size()) == v(a.id).rows,
        "scatter_per_row shape");
  Node n;
  n.op = Op::ScatterPerRow;
  n.a = a.id;
  n.scalar = cols;
  n.val = Mat(v(a.id).rows, cols);
  for (int r = 0; r < v(a.id).rows; ++r) {
    check(idx[static_cast<size_t>(r)] >= 0 && idx[static_cast<size_t>(r)] < cols,
          "scatter_per_row index");
    n.val(r, idx[static_cast<size_t>(r)]) = v(a.id)(r, 0);
  }
  n.idx = std::move(idx);
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::sum_all(Var a) {
  Node n;
  n.op = Op::SumAll;
  n.a = a.id;
  n.val = Mat(1, 1);
  for (double x : v(a.id).a) n.val(0, 0) += x;
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::transpose(Var a) {
  Node n;
  n.op = Op::Transpose;
  n.a = a.id;
  n.val = Mat(v(a.id).cols, v(a.id).rows);
  for (int r = 0; r < v(a.id).rows; ++r)
    for (int c = 0; c < v(a.id).cols; ++c) n.val(c, r) = v(a.id)(r, c);
  n.requires_grad = at(a).requires_grad;
  return push(std::move(n));
}

Var Tape::mul_scalar_var(Var a, Var s) {
  check(v(s.id).rows == 1 && v(s.id).cols == 1, "mul_scalar_var");
  Node n;
  n.op = Op::MulScalarVar;
  n.a = a.id;
  n.b = s.id;
  n.val = v(a.id);
  const double sv = v(s.id)(0, 0);
  for (double& x : n.val.a) x *= sv;
  n.requires_grad = at(a).requires_grad || at(s).requires_grad;
  return push(std::move(n));
}

Var Tape::tour_length(Var coords, std::vector<int> sequence, bool closed) {
  check(v(coords.id).cols == 2, "tour_length coords");
  Node n;
  n.op = Op::TourLength;
  n.a = coords.id;
  n.closed = closed;
  n.val = Mat(1, 1);
  const Mat& c = v(coords.id);
  double total = 0.0;
  auto edge = [&](int u, int w) {
    const double dx = c(u, 0) - c(w, 0);
    const double dy = c(u, 1) - c(w, 1);
    return std::sqrt(dx * dx + dy * dy);
  };
  for (size_t i = 0; i + 1 < sequence.size(); ++i) total += edge(sequence[i], sequence[i + 1]);
  if (closed && sequence.size() > 1) total += edge(sequence.back(), sequence.front());
  n.val(0, 0) = total;
  n.idx = std::move(sequence);
  n.requires_grad = at(coords).requires_grad;
  return push(std::move(n));
}

Var Tape::mean_rows(Var a) { return scale(row_reduce_sum(a), 1.0 / v(a.id).rows); }

Var Tape::norm_cols(Var a, Var gamma, Var beta, double eps) {
  const int rows = v(a.id).rows;
  Var mu = mean_rows(a);
  Var mu_tiled = gather_rows(mu, std::vector<int>(static_cast<size_t>(rows), 0));
  Var centered = sub(a, mu_tiled);
  Var variance = mean_rows(hadamard(centered, centered));
  Var inv = rsqrt_eps(variance, eps);
  Var xhat = mul_rowvec(centered, inv);
  return add_rowvec(mul_rowvec(xhat, gamma), beta);
}

Var Tape::softmax_rows(Var a) {
  return softmax_rows_masked(a, Mat(v(a.id).rows, v(a.id).cols, 1.0));
}

// ---- numeric backward -------------------------------------------------------

void Tape::backward(Var root) {
  if (!grad_enabled_) throw ArgumentError("backward on a value-only tape");
  check(v(root.id).rows == 1 && v(root.id).cols == 1, "backward root must be 1x1");
  ensure_grad(root.id)(0, 0) += 1.0;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad_alloc || !n.requires_grad) continue;
    backward_node(id);
  }
}

void Tape::backward_node(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  const Mat& g = n.grad;
  auto rg = [&](int input) { return input >= 0 && nodes_[static_cast<size_t>(input)].requires_grad; };

  switch (n.op) {
    case Op::Leaf:
      break;
    case Op::MatMul:
      if (rg(n.a)) cnf::matmul_nt(g, v(n.b), ensure_grad(n.a), true);
      if (rg(n.b)) cnf::matmul_tn(v(n.a), g, ensure_grad(n.b), true);
      break;
    case Op::MatMulNT:
      if (rg(n.a)) cnf::matmul(g, v(n.b), ensure_grad(n.a), true);
      if (rg(n.b)) cnf::matmul_tn(g, v(n.a), ensure_grad(n.b), true);
      break;
    case Op::MatMulTN:
      if (rg(n.a)) cnf::matmul_nt(v(n.b), g, ensure_grad(n.a), true);
      if (rg(n.b)) cnf::matmul(v(n.a), g, ensure_grad(n.b), true);
      break;
    case Op::Add:
      if (rg(n.a)) axpy(1.0, g, ensure_grad(n.a));
      if (rg(n.b)) axpy(1.0, g, ensure_grad(n.b));
      break;
    case Op::Sub:
      if (rg(n.a)) axpy(1.0, g, ensure_grad(n.a));
      if (rg(n.b)) axpy(-1.0, g, ensure_grad(n.b));
      break;
    case Op::Hadamard:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i] * v(n.b).a[i];
      }
      if (rg(n.b)) {
        Mat& gb = ensure_grad(n.b);
        for (size_t i = 0; i < g.size(); ++i) gb.a[i] += g.a[i] * v(n.a).a[i];
      }
      break;
    case Op::Scale:
      if (rg(n.a)) axpy(n.scalar, g, ensure_grad(n.a));
      break;
    case Op::MulRowVec:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < g.cols; ++c) ga(r, c) += g(r, c) * v(n.b)(0, c);
      }
      if (rg(n.b)) {
        Mat& gb = ensure_grad(n.b);
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < g.cols; ++c) gb(0, c) += g(r, c) * v(n.a)(r, c);
      }
      break;
    case Op::AddRowVec:
      if (rg(n.a)) axpy(1.0, g, ensure_grad(n.a));
      if (rg(n.b)) {
        Mat& gb = ensure_grad(n.b);
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < g.cols; ++c) gb(0, c) += g(r, c);
      }
      break;
    case Op::MulColVec:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < g.cols; ++c) ga(r, c) += g(r, c) * v(n.b)(r, 0);
      }
      if (rg(n.b)) {
        Mat& gb = ensure_grad(n.b);
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < g.cols; ++c) gb(r, 0) += g(r, c) * v(n.a)(r, c);
      }
      break;
    case Op::RowReduceSum:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < ga.rows; ++r)
          for (int c = 0; c < ga.cols; ++c) ga(r, c) += g(0, c);
      }
      break;
    case Op::RowSum:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < ga.rows; ++r)
          for (int c = 0; c < ga.cols; ++c) ga(r, c) += g(r, 0);
      }
      break;
    case Op::Tanh:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i] * (1.0 - n.val.a[i] * n.val.a[i]);
      }
      break;
    case Op::Relu:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (size_t i = 0; i < g.size(); ++i) ga.a[i] += v(n.a).a[i] > 0.0 ? g.a[i] : 0.0;
      }
      break;
    case Op::Log:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i] / v(n.a).a[i];
      }
      break;
    case Op::Reciprocal:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (size_t i = 0; i < g.size(); ++i) ga.a[i] -= g.a[i] * n.val.a[i] * n.val.a[i];
      }
      break;
    case Op::RsqrtEps:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (size_t i = 0; i < g.size(); ++i)
          ga.a[i] += -0.5 * g.a[i] * n.val.a[i] * n.val.a[i] * n.val.a[i];
      }
      break;
    case Op::SoftmaxRowsMasked:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < g.rows; ++r) {
          double rowdot = 0.0;
          for (int c = 0; c < g.cols; ++c) rowdot += g(r, c) * n.val(r, c);
          for (int c = 0; c < g.cols; ++c)
            ga(r, c) += n.val(r, c) * (g(r, c) - rowdot);
        }
      }
      break;
    case Op::GatherRows:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (size_t r = 0; r < n.idx.size(); ++r)
          for (int c = 0; c < g.cols; ++c) ga(n.idx[r], c) += g(static_cast<int>(r), c);
      }
      break;
    case Op::ScatterRows:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (size_t r = 0; r < n.idx.size(); ++r)
          for (int c = 0; c < g.cols; ++c) ga(static_cast<int>(r), c) += g(n.idx[r], c);
      }
      break;
    case Op::ConcatRows: {
      const int ra = v(n.a).rows;
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < ra; ++r)
          for (int c = 0; c < g.cols; ++c) ga(r, c) += g(r, c);
      }
      if (rg(n.b)) {
        Mat& gb = ensure_grad(n.b);
        for (int r = 0; r < gb.rows; ++r)
          for (int c = 0; c < g.cols; ++c) gb(r, c) += g(ra + r, c);
      }
      break;
    }
    case Op::ConcatCols: {
      const int ca = v(n.a).cols;
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < ca; ++c) ga(r, c) += g(r, c);
      }
      if (rg(n.b)) {
        Mat& gb = ensure_grad(n.b);
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < gb.cols; ++c) gb(r, c) += g(r, ca + c);
      }
      break;
    }
    case Op::SliceRows:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < g.cols; ++c) ga(n.idx[0] + r, c) += g(r, c);
      }
      break;
    case Op::SliceCols:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < g.cols; ++c) ga(r, n.idx[0] + c) += g(r, c);
      }
      break;
    case Op::PadRows:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < ga.rows; ++r)
          for (int c = 0; c < g.cols; ++c) ga(r, c) += g(n.idx[0] + r, c);
      }
      break;
    case Op::PadCols:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < ga.cols; ++c) ga(r, c) += g(r, n.idx[0] + c);
      }
      break;
    case Op::PickPerRow:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < g.rows; ++r) ga(r, n.idx[static_cast<size_t>(r)]) += g(r, 0);
      }
      break;
    case Op::ScatterPerRow:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < ga.rows; ++r) ga(r, 0) += g(r, n.idx[static_cast<size_t>(r)]);
      }
      break;
    case Op::SumAll:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (double& x : ga.a) x += g(0, 0);
      }
      break;
    case Op::Transpose:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < g.cols; ++c) ga(c, r) += g(r, c);
      }
      break;
    case Op::MulScalarVar:
      if (rg(n.a)) axpy(v(n.b)(0, 0), g, ensure_grad(n.a));
      if (rg(n.b)) ensure_grad(n.b)(0, 0) += dot_all(g, v(n.a));
      break;
    case Op::TourLength:
      if (rg(n.a)) {
        Mat& ga = ensure_grad(n.a);
        const Mat& c = v(n.a);
        const double adj = g(0, 0);
        auto push_edge = [&](int u, int w) {
          const double dx = c(u, 0) - c(w, 0);
          const double dy = c(u, 1) - c(w, 1);
          const double d = std::sqrt(dx * dx + dy * dy);
          if (d <= 0.0) return;  // coincident points: zero subgradient
          ga(u, 0) += adj * dx / d;
          ga(u, 1) += adj * dy / d;
          ga(w, 0) -= adj * dx / d;
          ga(w, 1) -= adj * dy / d;
        };
        for (size_t i = 0; i + 1 < n.idx.size(); ++i) push_edge(n.idx[i], n.idx[i + 1]);
        if (n.closed && n.idx.size() > 1) push_edge(n.idx.back(), n.idx.front());
      }
      break;
  }
}

// ---- symbolic backward ------------------------------------------------------

std::vector<Var> Tape::symbolic_grad(Var root, const std::vector<Var>& wrt) {
  check(v(root.id).rows == 1 && v(root.id).cols == 1, "symbolic_grad root must be 1x1");
  std::vector<int> adj(static_cast<size_t>(root.id) + 1, -1);
  adj[static_cast<size_t>(root.id)] = constant(Mat(1, 1, 1.0)).id;

  auto accum = [&](int input, Var grad_var) {
    if (input < 0 || !nodes_[static_cast<size_t>(input)].requires_grad) return;
    int& slot = adj[static_cast<size_t>(input)];
    slot = slot < 0 ? grad_var.id : add(Var{slot}, grad_var).id;
  };

  for (int id = root.id; id >= 0; --id) {
    if (adj[static_cast<size_t>(id)] < 0) continue;
    // copy: emitting ops may reallocate nodes_
    const Op op = nodes_[static_cast<size_t>(id)].op;
    const int ia = nodes_[static_cast<size_t>(id)].a;
    const int ib = nodes_[static_cast<size_t>(id)].b;
    const std::vector<int> idx = nodes_[static_cast<size_t>(id)].idx;
    const double scalar = nodes_[static_cast<size_t>(id)].scalar;
    const Var self{id};
    const Var g{adj[static_cast<size_t>(id)]};
    const Var a{ia};
    const Var b{ib};

    switch (op) {
      case Op::Leaf:
        break;
      case Op::MatMul:
        accum(ia, matmul_nt(g, b));
        accum(ib, matmul_tn(a, g));
        break;
      case Op::MatMulNT:
        accum(ia, matmul(g, b));
        accum(ib, matmul_tn(g, a));
        break;
      case Op::MatMulTN:
        accum(ia, matmul_nt(b, g));
        accum(ib, matmul(a, g));
        break;
      case Op::Add:
        accum(ia, g);
        accum(ib, g);
        break;
      case Op::Sub:
        accum(ia, g);
        accum(ib, scale(g, -1.0));
        break;
      case Op::Hadamard:
        accum(ia, hadamard(g, b));
        accum(ib, hadamard(g, a));
        break;
      case Op::Scale:
        accum(ia, scale(g, scalar));
        break;
      case Op::MulRowVec:
        accum(ia, mul_rowvec(g, b));
        accum(ib, row_reduce_sum(hadamard(g, a)));
        break;
      case Op::AddRowVec:
        accum(ia, g);
        accum(ib, row_reduce_sum(g));
        break;
      case Op::MulColVec:
        accum(ia, mul_colvec(g, b));
        accum(ib, row_sum(hadamard(g, a)));
        break;
      case Op::RowReduceSum:
        accum(ia, gather_rows(g, std::vector<int>(static_cast<size_t>(v(ia).rows), 0)));
        break;
      case Op::RowSum:
        accum(ia, mul_colvec(constant(Mat(v(ia).rows, v(ia).cols, 1.0)), g));
        break;
      case Op::Tanh: {
        Var one = constant(Mat(v(id).rows, v(id).cols, 1.0));
        accum(ia, hadamard(g, sub(one, hadamard(self, self))));
        break;
      }
      case Op::Relu: {
        Mat maskm(v(ia).rows, v(ia).cols);
        for (size_t i = 0; i < maskm.size(); ++i) maskm.a[i] = v(ia).a[i] > 0.0 ? 1.0 : 0.0;
        accum(ia, hadamard(g, constant(std::move(maskm))));
        break;
      }
      case Op::Log:
        accum(ia, hadamard(g, reciprocal(a)));
        break;
      case Op::Reciprocal:
        accum(ia, scale(hadamard(g, hadamard(self, self)), -1.0));
        break;
      case Op::RsqrtEps:
        accum(ia, scale(hadamard(g, hadamard(self, hadamard(self, self))), -0.5));
        break;
      case Op::SoftmaxRowsMasked: {
        Var t = hadamard(g, self);
        Var rd = row_sum(t);
        accum(ia, sub(t, mul_colvec(self, rd)));
        break;
      }
      case Op::GatherRows:
        accum(ia, scatter_rows(g, idx, v(ia).rows));
        break;
      case Op::ScatterRows:
        accum(ia, gather_rows(g, idx));
        break;
      case Op::ConcatRows: {
        const int ra = v(ia).rows;
        accum(ia, slice_rows(g, 0, ra));
        accum(ib, slice_rows(g, ra, ra + v(ib).rows));
        break;
      }
      case Op::ConcatCols: {
        const int ca = v(ia).cols;
        accum(ia, slice_cols(g, 0, ca));
        accum(ib, slice_cols(g, ca, ca + v(ib).cols));
        break;
      }
      case Op::SliceRows:
        accum(ia, pad_rows(g, idx[0], v(ia).rows));
        break;
      case Op::SliceCols:
        accum(ia, pad_cols(g, idx[0], v(ia).cols));
        break;
      case Op::PadRows:
        accum(ia, slice_rows(g, idx[0], idx[0] + v(ia).rows));
        break;
      case Op::PadCols:
        accum(ia, slice_cols(g, idx[0], idx[0] + v(ia).cols));
        break;
      case Op::PickPerRow:
        accum(ia, scatter_per_row(g, idx, v(ia).cols));
        break;
      case Op::ScatterPerRow:
        accum(ia, pick_per_row(g, idx));
        break;
      case Op::SumAll:
        accum(ia, mul_scalar_var(constant(Mat(v(ia).rows, v(ia).cols, 1.0)), g));
        break;
      case Op::Transpose:
        accum(ia, transpose(g));
        break;
      case Op::MulScalarVar:
        accum(ia, mul_scalar_var(g, b));
        accum(ib, sum_all(hadamard(g, a)));
        break;
      case Op::TourLength:
        throw ArgumentError("symbolic_grad through tour_length is not supported");
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (Var w : wrt) {
    if (w.id <= root.id && adj[static_cast<size_t>(w.id)] >= 0)
      out.push_back(Var{adj[static_cast<size_t>(w.id)]});
    else
      out.push_back(Var{-1});
  }
  return out;
}

}  // namespace cnf
