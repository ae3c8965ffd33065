#include "voco/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace voco {

namespace {
constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;
}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

int shape_numel(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) {
    if (d < 0) throw DimensionError("negative dimension");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != static_cast<int>(data.size()))
    throw DimensionError("tensor data length does not match shape");
}

Tensor Tensor::zeros(std::vector<int> shape) {
  int n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

int Tensor::numel() const { return static_cast<int>(data.size()); }

int Tensor::rows() const {
  if (rank() != 2) throw DimensionError("rows(): tensor is not 2-D");
  return shape[0];
}

int Tensor::cols() const {
  if (rank() != 2) throw DimensionError("cols(): tensor is not 2-D");
  return shape[1];
}

double& Tensor::at(int i, int j) {
  return data[static_cast<size_t>(i) * cols() + j];
}

double Tensor::at(int i, int j) const {
  return data[static_cast<size_t>(i) * cols() + j];
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Raw kernels
// ---------------------------------------------------------------------------

void matmul_raw(const double* a, const double* b, double* out, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* orow = out + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      double av = a[static_cast<size_t>(i) * k + l];
      const double* brow = b + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

int masked_softmax_raw(const double* scores, const uint8_t* mask, double* out,
                       int rows, int cols) {
  int empty = 0;
  for (int i = 0; i < rows; ++i) {
    const double* s = scores + static_cast<size_t>(i) * cols;
    const uint8_t* m = mask + static_cast<size_t>(i) * cols;
    double* o = out + static_cast<size_t>(i) * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < cols; ++j)
      if (m[j] && s[j] > mx) mx = s[j];
    if (mx == -std::numeric_limits<double>::infinity()) {
      std::fill(o, o + cols, 0.0);
      ++empty;
      continue;
    }
    double z = 0.0;
    for (int j = 0; j < cols; ++j) {
      o[j] = m[j] ? std::exp(s[j] - mx) : 0.0;
      z += o[j];
    }
    double inv = 1.0 / z;
    for (int j = 0; j < cols; ++j) o[j] *= inv;
  }
  return empty;
}

double log_sum_exp(const double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(x[i] - mx);
  return mx + std::log(s);
}

// ---------------------------------------------------------------------------
// Graph plumbing
// ---------------------------------------------------------------------------

int Graph::add_node(Tensor value, std::vector<int> inputs, const char* op,
                    std::function<void(Graph&, int)> backprop) {
  Node n;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.op = op;
  n.backprop = std::move(backprop);
  for (int in : n.inputs)
    if (node(in).needs_grad) n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Graph::grad_buf(int id) {
  Node& n = node(id);
  if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
  return n.grad;
}

void Graph::check(Value v) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
    throw UsageError("value does not belong to this graph");
}

Value Graph::leaf(Tensor t, bool requires_grad) {
  int id = add_node(std::move(t), {}, "leaf", nullptr);
  node(id).requires_grad = requires_grad;
  node(id).needs_grad = requires_grad;
  return {id};
}

const Tensor& Graph::value(Value v) const {
  check(v);
  return node(v.id).value;
}

const Tensor* Graph::grad(Value v) const {
  check(v);
  const Node& n = node(v.id);
  return n.grad.data.empty() ? nullptr : &n.grad;
}

bool Graph::requires_grad(Value v) const {
  check(v);
  return node(v.id).requires_grad;
}

void Graph::backward(Value loss) {
  check(loss);
  if (node(loss.id).value.numel() != 1)
    throw UsageError("backward: loss must be scalar");
  grad_buf(loss.id).data[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = node(id);
    if (n.grad.data.empty() || !n.backprop || !n.needs_grad) continue;
    n.backprop(*this, id);
  }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Value Graph::matmul(Value a, Value b) {
  check(a);
  check(b);
  const Tensor& ta = node(a.id).value;
  const Tensor& tb = node(b.id).value;
  if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows())
    throw DimensionError("matmul: inner dimensions disagree");
  int m = ta.rows(), k = ta.cols(), n = tb.cols();
  Tensor out = Tensor::zeros({m, n});
  matmul_raw(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
  int id = add_node(std::move(out), {a.id, b.id}, "matmul", [m, k, n](Graph& g, int self) {
    const auto& dy = g.node(self).grad.data;
    int ia = g.node(self).inputs[0], ib = g.node(self).inputs[1];
    const auto& av = g.node(ia).value.data;
    const auto& bv = g.node(ib).value.data;
    if (g.wants_grad(ia)) {
      auto& da = g.grad_buf(ia).data;
      // dA[i,l] += dot(dY[i,:], B[l,:])
      for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
          const double* dyr = dy.data() + static_cast<size_t>(i) * n;
          const double* br = bv.data() + static_cast<size_t>(l) * n;
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += dyr[j] * br[j];
          da[static_cast<size_t>(i) * k + l] += acc;
        }
    }
    if (g.wants_grad(ib)) {
      auto& db = g.grad_buf(ib).data;
      // dB[l,:] += A[i,l] * dY[i,:]
      for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
          double avv = av[static_cast<size_t>(i) * k + l];
          const double* dyr = dy.data() + static_cast<size_t>(i) * n;
          double* dbr = db.data() + static_cast<size_t>(l) * n;
          for (int j = 0; j < n; ++j) dbr[j] += avv * dyr[j];
        }
    }
  });
  return {id};
}

Value Graph::transpose(Value x) {
  check(x);
  const Tensor& t = node(x.id).value;
  int r = t.rows(), c = t.cols();
  Tensor out = Tensor::zeros({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(j, i) = t.at(i, j);
  int id = add_node(std::move(out), {x.id}, "transpose", [r, c](Graph& g, int self) {
    int ix = g.node(self).inputs[0];
    if (!g.wants_grad(ix)) return;
    const Tensor& dy = g.node(self).grad;
    Tensor& dx = g.grad_buf(ix);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) dx.at(i, j) += dy.at(j, i);
  });
  return {id};
}

Value Graph::reshape(Value x, std::vector<int> shape) {
  check(x);
  const Tensor& t = node(x.id).value;
  if (shape_numel(shape) != t.numel())
    throw DimensionError("reshape: element count mismatch");
  Tensor out(shape, t.data);
  int id = add_node(std::move(out), {x.id}, "reshape", [](Graph& g, int self) {
    int ix = g.node(self).inputs[0];
    if (!g.wants_grad(ix)) return;
    const auto& dy = g.node(self).grad.data;
    auto& dx = g.grad_buf(ix).data;
    for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
  return {id};
}

Value Graph::add(Value a, Value b) {
  check(a);
  check(b);
  const Tensor& ta = node(a.id).value;
  const Tensor& tb = node(b.id).value;
  if (!ta.same_shape(tb)) throw DimensionError("add: shape mismatch");
  Tensor out = ta;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
  int id = add_node(std::move(out), {a.id, b.id}, "add", [](Graph& g, int self) {
    const auto& dy = g.node(self).grad.data;
    for (int in : g.node(self).inputs) {
      if (!g.wants_grad(in)) continue;
      auto& d = g.grad_buf(in).data;
      for (size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
    }
  });
  return {id};
}

Value Graph::add_row(Value x, Value bias) {
  check(x);
  check(bias);
  const Tensor& tx = node(x.id).value;
  const Tensor& tb = node(bias.id).value;
  if (tb.rank() != 1 || tx.rank() != 2 || tb.dim(0) != tx.cols())
    throw DimensionError("add_row: bias must match column count");
  int r = tx.rows(), c = tx.cols();
  Tensor out = tx;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) += tb.data[static_cast<size_t>(j)];
  int id = add_node(std::move(out), {x.id, bias.id}, "add_row", [r, c](Graph& g, int self) {
    const Tensor& dy = g.node(self).grad;
    int ix = g.node(self).inputs[0], ib = g.node(self).inputs[1];
    if (g.wants_grad(ix)) {
      auto& dx = g.grad_buf(ix).data;
      for (size_t i = 0; i < dx.size(); ++i) dx[i] += dy.data[i];
    }
    if (g.wants_grad(ib)) {
      auto& db = g.grad_buf(ib).data;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) db[static_cast<size_t>(j)] += dy.at(i, j);
    }
  });
  return {id};
}

Value Graph::mul(Value a, Value b) {
  check(a);
  check(b);
  const Tensor& ta = node(a.id).value;
  const Tensor& tb = node(b.id).value;
  if (!ta.same_shape(tb)) throw DimensionError("mul: shape mismatch");
  Tensor out = ta;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
  int id = add_node(std::move(out), {a.id, b.id}, "mul", [](Graph& g, int self) {
    const auto& dy = g.node(self).grad.data;
    int ia = g.node(self).inputs[0], ib = g.node(self).inputs[1];
    const auto& av = g.node(ia).value.data;
    const auto& bv = g.node(ib).value.data;
    if (g.wants_grad(ia)) {
      auto& da = g.grad_buf(ia).data;
      for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
    }
    if (g.wants_grad(ib)) {
      auto& db = g.grad_buf(ib).data;
      for (size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
    }
  });
  return {id};
}

Value Graph::scale(Value a, double s) {
  check(a);
  Tensor out = node(a.id).value;
  for (double& v : out.data) v *= s;
  int id = add_node(std::move(out), {a.id}, "scale", [s](Graph& g, int self) {
    int ia = g.node(self).inputs[0];
    if (!g.wants_grad(ia)) return;
    const auto& dy = g.node(self).grad.data;
    auto& da = g.grad_buf(ia).data;
    for (size_t i = 0; i < dy.size(); ++i) da[i] += s * dy[i];
  });
  return {id};
}

Value Graph::gelu(Value x) {
  check(x);
  const Tensor& tx = node(x.id).value;
  Tensor out = tx;
  for (double& v : out.data) {
    double u = kGeluK * (v + kGeluC * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  int id = add_node(std::move(out), {x.id}, "gelu", [](Graph& g, int self) {
    int ix = g.node(self).inputs[0];
    if (!g.wants_grad(ix)) return;
    const auto& dy = g.node(self).grad.data;
    const auto& xv = g.node(ix).value.data;
    auto& dx = g.grad_buf(ix).data;
    for (size_t i = 0; i < dy.size(); ++i) {
      double v = xv[i];
      double u = kGeluK * (v + kGeluC * v * v * v);
      double t = std::tanh(u);
      double du = kGeluK * (1.0 + 3.0 * kGeluC * v * v);
      dx[i] += dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
  return {id};
}

Value Graph::sum(Value x) {
  check(x);
  double s = 0.0;
  for (double v : node(x.id).value.data) s += v;
  int id = add_node(Tensor::scalar(s), {x.id}, "sum", [](Graph& g, int self) {
    int ix = g.node(self).inputs[0];
    if (!g.wants_grad(ix)) return;
    double dy = g.node(self).grad.data[0];
    auto& dx = g.grad_buf(ix).data;
    for (double& v : dx) v += dy;
  });
  return {id};
}

Value Graph::slice_rows(Value x, int r0, int r1) {
  check(x);
  const Tensor& t = node(x.id).value;
  int r = t.rows(), c = t.cols();
  if (r0 < 0 || r1 < r0 || r1 > r) throw DimensionError("slice_rows: range out of bounds");
  Tensor out = Tensor::zeros({r1 - r0, c});
  std::copy(t.data.begin() + static_cast<size_t>(r0) * c,
            t.data.begin() + static_cast<size_t>(r1) * c, out.data.begin());
  int id = add_node(std::move(out), {x.id}, "slice_rows", [r0, c](Graph& g, int self) {
    int ix = g.node(self).inputs[0];
    if (!g.wants_grad(ix)) return;
    const auto& dy = g.node(self).grad.data;
    auto& dx = g.grad_buf(ix).data;
    for (size_t i = 0; i < dy.size(); ++i) dx[static_cast<size_t>(r0) * c + i] += dy[i];
  });
  return {id};
}

Value Graph::slice_cols(Value x, int c0, int c1) {
  check(x);
  const Tensor& t = node(x.id).value;
  int r = t.rows(), c = t.cols();
  if (c0 < 0 || c1 < c0 || c1 > c) throw DimensionError("slice_cols: range out of bounds");
  int w = c1 - c0;
  Tensor out = Tensor::zeros({r, w});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j) out.at(i, j) = t.at(i, c0 + j);
  int id = add_node(std::move(out), {x.id}, "slice_cols", [r, c, c0, w](Graph& g, int self) {
    int ix = g.node(self).inputs[0];
    if (!g.wants_grad(ix)) return;
    const Tensor& dy = g.node(self).grad;
    auto& dx = g.grad_buf(ix).data;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j) dx[static_cast<size_t>(i) * c + c0 + j] += dy.at(i, j);
  });
  return {id};
}

Value Graph::concat_rows(const std::vector<Value>& xs) {
  if (xs.empty()) throw UsageError("concat_rows: empty list");
  int c = -1, total = 0;
  std::vector<int> ids;
  for (Value v : xs) {
    check(v);
    const Tensor& t = node(v.id).value;
    if (c < 0) c = t.cols();
    if (t.cols() != c) throw DimensionError("concat_rows: column mismatch");
    total += t.rows();
    ids.push_back(v.id);
  }
  Tensor out = Tensor::zeros({total, c});
  size_t off = 0;
  for (int in : ids) {
    const auto& d = node(in).value.data;
    std::copy(d.begin(), d.end(), out.data.begin() + static_cast<long>(off));
    off += d.size();
  }
  int id = add_node(std::move(out), std::move(ids), "concat_rows", [](Graph& g, int self) {
    const auto& dy = g.node(self).grad.data;
    size_t off = 0;
    for (int in : g.node(self).inputs) {
      size_t n = g.node(in).value.data.size();
      if (g.wants_grad(in)) {
        auto& d = g.grad_buf(in).data;
        for (size_t i = 0; i < n; ++i) d[i] += dy[off + i];
      }
      off += n;
    }
  });
  return {id};
}

Value Graph::concat_cols(const std::vector<Value>& xs) {
  if (xs.empty()) throw UsageError("concat_cols: empty list");
  int r = -1, total = 0;
  std::vector<int> ids;
  std::vector<int> widths;
  for (Value v : xs) {
    check(v);
    const Tensor& t = node(v.id).value;
    if (r < 0) r = t.rows();
    if (t.rows() != r) throw DimensionError("concat_cols: row mismatch");
    widths.push_back(t.cols());
    total += t.cols();
    ids.push_back(v.id);
  }
  Tensor out = Tensor::zeros({r, total});
  int coff = 0;
  for (size_t s = 0; s < ids.size(); ++s) {
    const Tensor& t = node(ids[s]).value;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < widths[s]; ++j) out.at(i, coff + j) = t.at(i, j);
    coff += widths[s];
  }
  int id = add_node(std::move(out), std::move(ids), "concat_cols",
                    [r, widths, total](Graph& g, int self) {
    const Tensor& dy = g.node(self).grad;
    int coff = 0;
    const auto& ins = g.node(self).inputs;
    for (size_t s = 0; s < ins.size(); ++s) {
      if (g.wants_grad(ins[s])) {
        auto& d = g.grad_buf(ins[s]).data;
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < widths[s]; ++j)
            d[static_cast<size_t>(i) * widths[s] + j] += dy.at(i, coff + j);
      }
      coff += widths[s];
    }
    (void)total;
  });
  return {id};
}

Value Graph::layernorm(Value x, Value gain, Value bias) {
  check(x);
  check(gain);
  check(bias);
  const Tensor& tx = node(x.id).value;
  const Tensor& tg = node(gain.id).value;
  const Tensor& tb = node(bias.id).value;
  int r = tx.rows(), c = tx.cols();
  if (tg.rank() != 1 || tb.rank() != 1 || tg.dim(0) != c || tb.dim(0) != c)
    throw DimensionError("layernorm: gain/bias must match columns");
  Tensor out = Tensor::zeros({r, c});
  std::vector<double> xhat(static_cast<size_t>(r) * c);
  std::vector<double> inv_std(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    const double* row = tx.data.data() + static_cast<size_t>(i) * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += row[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      double d = row[j] - mu;
      var += d * d;
    }
    var /= c;
    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[static_cast<size_t>(i)] = inv;
    for (int j = 0; j < c; ++j) {
      double xh = (row[j] - mu) * inv;
      xhat[static_cast<size_t>(i) * c + j] = xh;
      out.at(i, j) = tg.data[static_cast<size_t>(j)] * xh + tb.data[static_cast<size_t>(j)];
    }
  }
  int id = add_node(std::move(out), {x.id, gain.id, bias.id}, "layernorm",
                    [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, int self) {
    const Tensor& dy = g.node(self).grad;
    int ix = g.node(self).inputs[0];
    int ig = g.node(self).inputs[1];
    int ib = g.node(self).inputs[2];
    const auto& gv = g.node(ig).value.data;
    if (g.wants_grad(ix)) {
      auto& dx = g.grad_buf(ix).data;
      for (int i = 0; i < r; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < c; ++j) {
          double gdy = gv[static_cast<size_t>(j)] * dy.at(i, j);
          m1 += gdy;
          m2 += gdy * xhat[static_cast<size_t>(i) * c + j];
        }
        m1 /= c;
        m2 /= c;
        double inv = inv_std[static_cast<size_t>(i)];
        for (int j = 0; j < c; ++j) {
          double gdy = gv[static_cast<size_t>(j)] * dy.at(i, j);
          double xh = xhat[static_cast<size_t>(i) * c + j];
          dx[static_cast<size_t>(i) * c + j] += inv * (gdy - m1 - xh * m2);
        }
      }
    }
    if (g.wants_grad(ig)) {
      auto& dg = g.grad_buf(ig).data;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          dg[static_cast<size_t>(j)] += dy.at(i, j) * xhat[static_cast<size_t>(i) * c + j];
    }
    if (g.wants_grad(ib)) {
      auto& db = g.grad_buf(ib).data;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) db[static_cast<size_t>(j)] += dy.at(i, j);
    }
  });
  return {id};
}

Value Graph::embedding_lookup(Value table, std::vector<int> ids) {
  check(table);
  const Tensor& t = node(table.id).value;
  int v = t.rows(), d = t.cols();
  for (int i : ids)
    if (i < 0 || i >= v) throw UsageError("embedding_lookup: id out of range");
  int l = static_cast<int>(ids.size());
  Tensor out = Tensor::zeros({l, d});
  for (int p = 0; p < l; ++p)
    std::copy(t.data.begin() + static_cast<size_t>(ids[static_cast<size_t>(p)]) * d,
              t.data.begin() + static_cast<size_t>(ids[static_cast<size_t>(p)] + 1) * d,
              out.data.begin() + static_cast<size_t>(p) * d);
  int id = add_node(std::move(out), {table.id}, "embedding_lookup",
                    [ids = std::move(ids), d](Graph& g, int self) {
    int it = g.node(self).inputs[0];
    if (!g.wants_grad(it)) return;
    const Tensor& dy = g.node(self).grad;
    auto& dt = g.grad_buf(it).data;
    for (size_t p = 0; p < ids.size(); ++p)
      for (int j = 0; j < d; ++j)
        dt[static_cast<size_t>(ids[p]) * d + j] += dy.at(static_cast<int>(p), j);
  });
  return {id};
}

Value Graph::masked_softmax(Value scores, BoolGrid mask, SoftmaxDiag* diag) {
  check(scores);
  const Tensor& ts = node(scores.id).value;
  int r = ts.rows(), c = ts.cols();
  if (mask.rows != r || mask.cols != c)
    throw DimensionError("masked_softmax: mask dimensions disagree with scores");
  Tensor out = Tensor::zeros({r, c});
  int empty = masked_softmax_raw(ts.data.data(), mask.bits.data(), out.data.data(), r, c);
  if (diag) diag->empty_rows += empty;
  int id = add_node(std::move(out), {scores.id}, "masked_softmax",
                    [r, c](Graph& g, int self) {
    int is = g.node(self).inputs[0];
    if (!g.wants_grad(is)) return;
    const Tensor& p = g.node(self).value;
    const Tensor& dy = g.node(self).grad;
    auto& ds = g.grad_buf(is).data;
    // p is exactly zero on excluded positions, so looping all columns is safe
    for (int i = 0; i < r; ++i) {
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += p.at(i, j) * dy.at(i, j);
      for (int j = 0; j < c; ++j)
        ds[static_cast<size_t>(i) * c + j] += p.at(i, j) * (dy.at(i, j) - dot);
    }
  });
  return {id};
}

Value Graph::cross_entropy(Value logits, std::vector<int> targets,
                           std::vector<uint8_t> loss_mask, LossDiag* diag) {
  check(logits);
  const Tensor& t = node(logits.id).value;
  int l = t.rows(), v = t.cols();
  if (static_cast<int>(targets.size()) != l || static_cast<int>(loss_mask.size()) != l)
    throw DimensionError("cross_entropy: targets/mask length must equal rows");
  int m = 0;
  double loss = 0.0;
  for (int p = 0; p < l; ++p) {
    if (!loss_mask[static_cast<size_t>(p)]) continue;
    int tgt = targets[static_cast<size_t>(p)];
    if (tgt < 0 || tgt >= v) throw UsageError("cross_entropy: target outside vocab");
    const double* row = t.data.data() + static_cast<size_t>(p) * v;
    loss += log_sum_exp(row, v) - row[tgt];
    ++m;
  }
  if (m == 0) {
    if (diag) diag->all_masked_out = true;
    loss = 0.0;
  } else {
    loss /= m;
  }
  int id = add_node(Tensor::scalar(loss), {logits.id}, "cross_entropy",
                    [targets = std::move(targets), loss_mask = std::move(loss_mask), m, v,
                     l](Graph& g, int self) {
    if (m == 0) return;
    int il = g.node(self).inputs[0];
    if (!g.wants_grad(il)) return;
    double dy = g.node(self).grad.data[0];
    const auto& lv = g.node(il).value.data;
    auto& dl = g.grad_buf(il).data;
    for (int p = 0; p < l; ++p) {
      if (!loss_mask[static_cast<size_t>(p)]) continue;
      const double* row = lv.data() + static_cast<size_t>(p) * v;
      double lse = log_sum_exp(row, v);
      double* drow = dl.data() + static_cast<size_t>(p) * v;
      double w = dy / m;
      for (int j = 0; j < v; ++j) drow[j] += w * std::exp(row[j] - lse);
      drow[targets[static_cast<size_t>(p)]] -= w;
    }
  });
  return {id};
}

namespace {

// KL of one row pair plus gradient weights; shared by both KL ops.
// Returns D_KL(softmax(p) || softmax(q)).
double row_kl(const double* p, const double* q, int v) {
  double lse_p = log_sum_exp(p, v);
  double lse_q = log_sum_exp(q, v);
  double kl = 0.0;
  for (int j = 0; j < v; ++j) {
    double lp = p[j] - lse_p;
    double lq = q[j] - lse_q;
    kl += std::exp(lp) * (lp - lq);
  }
  return kl;
}

void row_kl_backward(const double* p, const double* q, int v, double w, double kl,
                     double* dp, double* dq) {
  double lse_p = log_sum_exp(p, v);
  double lse_q = log_sum_exp(q, v);
  for (int j = 0; j < v; ++j) {
    double lp = p[j] - lse_p;
    double lq = q[j] - lse_q;
    double pj = std::exp(lp);
    double qj = std::exp(lq);
    if (dp) dp[j] += w * pj * ((lp - lq) - kl);
    if (dq) dq[j] += w * (qj - pj);
  }
}

}  // namespace

Value Graph::kl_divergence(Value p_logits, Value q_logits) {
  check(p_logits);
  check(q_logits);
  const Tensor& tp = node(p_logits.id).value;
  const Tensor& tq = node(q_logits.id).value;
  if (tp.numel() != tq.numel())
    throw DimensionError("kl_divergence: vocabulary dimensions disagree");
  if (!tp.all_finite() || !tq.all_finite())
    throw NumericError("kl_divergence: non-finite input");
  int v = tp.numel();
  double kl = row_kl(tp.data.data(), tq.data.data(), v);
  int id = add_node(Tensor::scalar(kl), {p_logits.id, q_logits.id}, "kl_divergence",
                    [v, kl](Graph& g, int self) {
    int ip = g.node(self).inputs[0], iq = g.node(self).inputs[1];
    double dy = g.node(self).grad.data[0];
    const auto& pv = g.node(ip).value.data;
    const auto& qv = g.node(iq).value.data;
    double* dp = g.wants_grad(ip) ? g.grad_buf(ip).data.data() : nullptr;
    double* dq = g.wants_grad(iq) ? g.grad_buf(iq).data.data() : nullptr;
    row_kl_backward(pv.data(), qv.data(), v, dy, kl, dp, dq);
  });
  return {id};
}

Value Graph::kl_rows_mean(Value p_logits, Value q_logits, std::vector<uint8_t> row_mask,
                          LossDiag* diag) {
  check(p_logits);
  check(q_logits);
  const Tensor& tp = node(p_logits.id).value;
  const Tensor& tq = node(q_logits.id).value;
  if (!tp.same_shape(tq)) throw UsageError("kl_rows_mean: shape mismatch");
  int r = tp.rows(), v = tp.cols();
  if (static_cast<int>(row_mask.size()) != r)
    throw DimensionError("kl_rows_mean: row mask length mismatch");
  if (!tp.all_finite() || !tq.all_finite())
    throw NumericError("kl_rows_mean: non-finite input");
  int m = 0;
  double total = 0.0;
  std::vector<double> per_row(static_cast<size_t>(r), 0.0);
  for (int i = 0; i < r; ++i) {
    if (!row_mask[static_cast<size_t>(i)]) continue;
    per_row[static_cast<size_t>(i)] =
        row_kl(tp.data.data() + static_cast<size_t>(i) * v,
               tq.data.data() + static_cast<size_t>(i) * v, v);
    total += per_row[static_cast<size_t>(i)];
    ++m;
  }
  if (m == 0) {
    if (diag) diag->all_masked_out = true;
  } else {
    total /= m;
  }
  int id = add_node(Tensor::scalar(total), {p_logits.id, q_logits.id}, "kl_rows_mean",
                    [r, v, m, row_mask = std::move(row_mask),
                     per_row = std::move(per_row)](Graph& g, int self) {
    if (m == 0) return;
    int ip = g.node(self).inputs[0], iq = g.node(self).inputs[1];
    double dy = g.node(self).grad.data[0];
    const auto& pv = g.node(ip).value.data;
    const auto& qv = g.node(iq).value.data;
    double* dp = g.wants_grad(ip) ? g.grad_buf(ip).data.data() : nullptr;
    double* dq = g.wants_grad(iq) ? g.grad_buf(iq).data.data() : nullptr;
    double w = dy / m;
    for (int i = 0; i < r; ++i) {
      if (!row_mask[static_cast<size_t>(i)]) continue;
      size_t off = static_cast<size_t>(i) * v;
      row_kl_backward(pv.data() + off, qv.data() + off, v, w, per_row[static_cast<size_t>(i)],
                      dp ? dp + off : nullptr, dq ? dq + off : nullptr);
    }
  });
  return {id};
}

}  // namespace voco
