#ifndef CNF_TAPE_HPP
#define CNF_TAPE_HPP

#include <cstdint>
#include <vector>

#include "cnf/mat.hpp"

namespace cnf {

class Tape;

// Handle to a tape node. Cheap to copy; owned by the tape that produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode automatic differentiation over Mat values.
//
// Two gradient modes are provided:
//  - backward(root): numeric reverse pass accumulating into node grads;
//  - symbolic_grad(root, wrt): emits the reverse pass as new tape nodes, so
//    the returned gradients are themselves differentiable (used where a loss
//    depends on an input-gradient).
class Tape {
public:
  enum class Op : uint8_t {
    Leaf,
    MatMul,      // a * b
    MatMulNT,    // a * b^T
    MatMulTN,    // a^T * b
    Add,
    Sub,
    Hadamard,
    Scale,        // a * scalar
    MulRowVec,    // a (r x c) ⊙ rowvec b (1 x c)
    AddRowVec,    // a (r x c) + rowvec b (1 x c)
    MulColVec,    // a (r x c) ⊙ colvec b (r x 1)
    RowReduceSum, // sum over rows -> 1 x c
    RowSum,       // sum over cols -> r x 1
    Tanh,
    Relu,
    Log,
    Reciprocal,
    RsqrtEps,     // 1 / sqrt(x + eps)
    SoftmaxRowsMasked,  // rows sum to 1 over entries with aux mask != 0
    GatherRows,   // rows of a selected by idx
    ScatterRows,  // inverse of GatherRows; scalar holds target row count
    ConcatRows,
    ConcatCols,
    SliceRows,    // idx = {from, to}
    SliceCols,    // idx = {from, to}
    PadRows,      // idx = {from, total}
    PadCols,      // idx = {from, total}
    PickPerRow,   // out(i,0) = a(i, idx[i])
    ScatterPerRow,  // inverse of PickPerRow; scalar holds column count
    SumAll,       // 1 x 1
    Transpose,
    MulScalarVar, // a * b where b is 1 x 1
    TourLength,   // Euclidean length of a node sequence over coords a
  };

  struct Node {
    Op op = Op::Leaf;
    int a = -1, b = -1;
    Mat val;
    Mat grad;
    Mat aux;                 // softmax mask
    std::vector<int> idx;    // gather/scatter/slice/pick indices
    double scalar = 0.0;
    bool requires_grad = false;
    bool grad_alloc = false;
    bool closed = false;     // TourLength: include the closing edge
  };

  // When grads are disabled the tape only tracks values (cheap rollouts).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  int size() const { return static_cast<int>(nodes_.size()); }
  void reset();

  Var leaf(Mat value, bool requires_grad);
  Var constant(Mat value) { return leaf(std::move(value), false); }

  const Mat& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].val; }
  // Gradient of the node; zero matrix if the node never received one.
  Mat grad_of(Var v) const;
  bool requires_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }

  // ---- operations ----
  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);
  Var matmul_tn(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var hadamard(Var a, Var b);
  Var scale(Var a, double s);
  Var mul_rowvec(Var a, Var v);
  Var add_rowvec(Var a, Var v);
  Var mul_colvec(Var a, Var v);
  Var row_reduce_sum(Var a);
  Var row_sum(Var a);
  Var tanh(Var a);
  Var relu(Var a);
  Var log(Var a);
  Var reciprocal(Var a);
  Var rsqrt_eps(Var a, double eps);
  Var softmax_rows_masked(Var a, Mat mask);  // mask entries: nonzero = allowed
  Var gather_rows(Var a, std::vector<int> idx);
  Var scatter_rows(Var a, std::vector<int> idx, int target_rows);
  Var concat_rows(Var a, Var b);
  Var concat_cols(Var a, Var b);
  Var slice_rows(Var a, int from, int to);
  Var slice_cols(Var a, int from, int to);
  Var pad_rows(Var a, int from, int total);
  Var pad_cols(Var a, int from, int total);
  Var pick_per_row(Var a, std::vector<int> idx);
  Var scatter_per_row(Var a, std::vector<int> idx, int cols);
  Var sum_all(Var a);
  Var transpose(Var a);
  Var mul_scalar_var(Var a, Var s);
  Var tour_length(Var coords, std::vector<int> sequence, bool closed);

  // ---- composites ----
  Var linear(Var x, Var w, Var b) { return add_rowvec(matmul(x, w), b); }
  Var mean_rows(Var a);
  // Normalize each column over rows (mean 0, variance 1), then affine.
  Var norm_cols(Var a, Var gamma, Var beta, double eps = 1e-6);
  Var softmax_rows(Var a);

  // Numeric reverse pass from a 1x1 root. Gradients accumulate; call once
  // per tape unless accumulation is intended.
  void backward(Var root);

  // Emits the reverse pass of root w.r.t. each var in `wrt` as tape nodes.
  // Unreached vars yield invalid Vars (gradient identically zero).
  std::vector<Var> symbolic_grad(Var root, const std::vector<Var>& wrt);

private:
  Var push(Node&& node);
  Node& at(Var v) { return nodes_[static_cast<size_t>(v.id)]; }
  const Mat& v(int id) const { return nodes_[static_cast<size_t>(id)].val; }
  Mat& ensure_grad(int id);
  void backward_node(int id);

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

}  // namespace cnf

#endif
