#pragma once

#include <functional>
#include <string>
#include <vector>

#include "voco/common.hpp"

namespace voco {

// ---------------------------------------------------------------------------
// Dense row-major tensor of 64-bit floats. All training and equivalence
// checks run in f64; f32 exists only as a cache-file storage dtype with
// explicit conversion at (de)serialization time.
// ---------------------------------------------------------------------------

struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d);

  static Tensor zeros(std::vector<int> shape);
  static Tensor scalar(double v);

  int numel() const;
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  // 2-D accessors
  int rows() const;
  int cols() const;
  double& at(int i, int j);
  double at(int i, int j) const;

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
};

int shape_numel(const std::vector<int>& shape);

// Diagnostics for defined-but-degenerate cases (never NaN by contract).
struct SoftmaxDiag {
  int empty_rows = 0;  // rows with zero allowed positions -> all-zero output row
};

struct LossDiag {
  bool all_masked_out = false;  // every position excluded -> defined zero loss
};

// ---------------------------------------------------------------------------
// Reverse-mode autodiff over a tape of tensor nodes. Nodes are appended in
// topological order by construction; backward walks the tape once in
// reverse. A Graph instance is single-threaded; independent graphs can run
// on independent threads.
// ---------------------------------------------------------------------------

struct Value {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Value leaf(Tensor t, bool requires_grad = false);

  // linear algebra
  Value matmul(Value a, Value b);               // [m,k] x [k,n] -> [m,n]
  Value transpose(Value x);                     // [r,c] -> [c,r]
  Value reshape(Value x, std::vector<int> shape);

  // elementwise
  Value add(Value a, Value b);                  // same shape
  Value add_row(Value x, Value bias);           // [r,c] + [c] broadcast over rows
  Value mul(Value a, Value b);                  // same shape
  Value scale(Value a, double s);
  Value gelu(Value x);                          // tanh approximation, fixed
  Value sum(Value x);                           // -> scalar [1]

  // structure
  Value slice_rows(Value x, int r0, int r1);
  Value slice_cols(Value x, int c0, int c1);
  Value concat_rows(const std::vector<Value>& xs);
  Value concat_cols(const std::vector<Value>& xs);

  // neural net primitives
  Value layernorm(Value x, Value gain, Value bias);  // row-wise, eps = 1e-5
  Value embedding_lookup(Value table, std::vector<int> ids);

  // Masked softmax. Excluded positions get exactly zero probability: they are
  // left out of the normalizing sum rather than offset by a large negative
  // constant (the additive form survives only as a test oracle). A row with
  // no allowed position yields an all-zero row and bumps diag->empty_rows.
  Value masked_softmax(Value scores, BoolGrid mask, SoftmaxDiag* diag = nullptr);

  // Mean negative log-likelihood over positions with loss_mask != 0.
  Value cross_entropy(Value logits, std::vector<int> targets,
                      std::vector<uint8_t> loss_mask, LossDiag* diag = nullptr);

  // D_KL(softmax(p) || softmax(q)) for a single logit vector.
  Value kl_divergence(Value p_logits, Value q_logits);

  // Mean of row-wise KL over rows with row_mask != 0. Used by distillation.
  Value kl_rows_mean(Value p_logits, Value q_logits, std::vector<uint8_t> row_mask,
                     LossDiag* diag = nullptr);

  // Populates grads of every requires_grad leaf reachable from loss.
  void backward(Value loss);

  const Tensor& value(Value v) const;
  // Null when the node never received gradient (treat as zero).
  const Tensor* grad(Value v) const;
  bool requires_grad(Value v) const;
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;                 // empty until touched by backward
    bool requires_grad = false;  // leaf flag
    bool needs_grad = false;     // leaf flag or inherited from inputs
    std::vector<int> inputs;
    const char* op = "leaf";
    std::function<void(Graph&, int)> backprop;
  };

  int add_node(Tensor value, std::vector<int> inputs, const char* op,
               std::function<void(Graph&, int)> backprop);
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  Tensor& grad_buf(int id);
  bool wants_grad(int id) const { return node(id).needs_grad; }
  void check(Value v) const;

  std::vector<Node> nodes_;
};

// Plain (graph-free) kernels shared with the op implementations.
void matmul_raw(const double* a, const double* b, double* out, int m, int k, int n);
int masked_softmax_raw(const double* scores, const uint8_t* mask, double* out, int rows, int cols);
double log_sum_exp(const double* x, int n);

}  // namespace voco
