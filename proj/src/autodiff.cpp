#include "taskdiff/autodiff.hpp"

#include <cblas.h>

#include <cmath>
#include <cstring>

namespace td {

namespace {

// Row-major sgemm: C = A(ta) * B(tb) + beta*C. OpenBLAS is pinned to one
// thread so results do not depend on its build-time thread pool.
void gemm(bool ta, bool tb, int m, int n, int k, const float* a, const float* b,
          float* c, float beta) {
  static const bool blas_once = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)blas_once;
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, 1.0f, a, ta ? m : k, b,
              tb ? k : n, beta, c, n);
}

int reflect_index(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

std::vector<float> gaussian_kernel(float sigma, int& radius) {
  radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<float> w(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    double val = std::exp(-0.5 * (static_cast<double>(k) * k) / (static_cast<double>(sigma) * sigma));
    w[static_cast<size_t>(k + radius)] = static_cast<float>(val);
    sum += val;
  }
  for (auto& x : w) x = static_cast<float>(x / sum);
  return w;
}

// Unpacks x:[Cin,H,W] into col:[Cin*9, Ho*Wo] for a 3x3 kernel with pad 1.
void im2col3(const Tensor& x, int stride, int ho, int wo, float* col) {
  const int cin = x.shape[0], h = x.shape[1], w = x.shape[2];
  const int nout = ho * wo;
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        float* row = col + static_cast<size_t>((c * 3 + ky) * 3 + kx) * nout;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride + ky - 1;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride + kx - 1;
            row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                    ? x.at(c, iy, ix)
                                    : 0.0f;
          }
        }
      }
    }
  }
}

// Adjoint of im2col3: scatter-adds col rows back into dx.
void col2im3(const float* col, int stride, int ho, int wo, Tensor& dx) {
  const int cin = dx.shape[0], h = dx.shape[1], w = dx.shape[2];
  const int nout = ho * wo;
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const float* row = col + static_cast<size_t>((c * 3 + ky) * 3 + kx) * nout;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= w) continue;
            dx.at(c, iy, ix) += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

void Tape::check_var(Var v, const char* op) const {
  TD_CHECK(v.id >= 0 && v.id < static_cast<int>(nodes_.size()), "bad_var",
           std::string(op) + ": invalid Var handle");
}

bool Tape::any_grad(std::initializer_list<Var> inputs) const {
  for (Var v : inputs)
    if (nodes_[static_cast<size_t>(v.id)].requires_grad) return true;
  return false;
}

Var Tape::leaf(const Tensor* t, bool requires_grad) {
  TD_CHECK(t != nullptr, "bad_arg", "leaf: null tensor");
  Node n;
  n.ext = t;
  n.requires_grad = grad_enabled_ && requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::input(Tensor t, bool requires_grad) {
  Node n;
  n.value = std::move(t);
  n.requires_grad = grad_enabled_ && requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Tensor t) { return input(std::move(t), false); }

const Tensor& Tape::val(Var v) const {
  check_var(v, "val");
  return nval(v.id);
}

Tensor& Tape::grad_slot(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_init) {
    n.grad = Tensor::zeros(nval(id).shape);
    n.grad_init = true;
  }
  return n.grad;
}

void Tape::add_grad(int id, const Tensor& g) {
  Tensor& slot = grad_slot(id);
  TD_CHECK(slot.shape == g.shape, "shape_mismatch", "gradient shape mismatch");
  for (size_t i = 0; i < slot.v.size(); ++i) slot.v[i] += g.v[i];
}

void Tape::backward(Var loss) {
  check_var(loss, "backward");
  TD_CHECK(grad_enabled_, "grad_disabled", "backward on a grad-disabled tape");
  TD_CHECK(!ran_backward_, "bad_arg", "backward may run once per tape");
  TD_CHECK(nval(loss.id).size() == 1, "not_scalar", "backward: loss must be scalar");
  TD_CHECK(nodes_[static_cast<size_t>(loss.id)].requires_grad, "no_grad",
           "backward: loss does not depend on any differentiable input");
  ran_backward_ = true;
  grad_slot(loss.id).v[0] = 1.0f;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad_init && n.back) n.back();
  }
}

bool Tape::has_grad(Var v) const {
  check_var(v, "has_grad");
  return ran_backward_ && nodes_[static_cast<size_t>(v.id)].requires_grad;
}

const Tensor& Tape::grad(Var v) {
  check_var(v, "grad");
  TD_CHECK(ran_backward_, "no_grad", "grad requested before backward");
  TD_CHECK(nodes_[static_cast<size_t>(v.id)].requires_grad, "no_grad",
           "grad requested for a non-differentiable Var");
  return grad_slot(v.id);
}

// ----------------------------------------------------------------------------
// elementwise / shape ops

Var Tape::add(Var a, Var b) {
  check_var(a, "add");
  check_var(b, "add");
  const Tensor &ta = nval(a.id), &tb = nval(b.id);
  TD_CHECK(ta.shape == tb.shape, "shape_mismatch",
           "add: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Tensor out = t_add(ta, tb);
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({a, b});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, a, b] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      if (nodes_[static_cast<size_t>(a.id)].requires_grad) add_grad(a.id, g);
      if (nodes_[static_cast<size_t>(b.id)].requires_grad) add_grad(b.id, g);
    };
  }
  return Var{id};
}

Var Tape::sub(Var a, Var b) {
  check_var(a, "sub");
  check_var(b, "sub");
  const Tensor &ta = nval(a.id), &tb = nval(b.id);
  TD_CHECK(ta.shape == tb.shape, "shape_mismatch",
           "sub: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Tensor out = t_sub(ta, tb);
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({a, b});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, a, b] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      if (nodes_[static_cast<size_t>(a.id)].requires_grad) add_grad(a.id, g);
      if (nodes_[static_cast<size_t>(b.id)].requires_grad)
        add_grad(b.id, t_scale(g, -1.0f));
    };
  }
  return Var{id};
}

Var Tape::mul(Var a, Var b) {
  check_var(a, "mul");
  check_var(b, "mul");
  const Tensor &ta = nval(a.id), &tb = nval(b.id);
  TD_CHECK(ta.shape == tb.shape, "shape_mismatch",
           "mul: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Tensor out = t_mul(ta, tb);
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({a, b});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, a, b] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      if (nodes_[static_cast<size_t>(a.id)].requires_grad)
        add_grad(a.id, t_mul(g, nval(b.id)));
      if (nodes_[static_cast<size_t>(b.id)].requires_grad)
        add_grad(b.id, t_mul(g, nval(a.id)));
    };
  }
  return Var{id};
}

Var Tape::scale(Var a, float s) {
  check_var(a, "scale");
  Tensor out = t_scale(nval(a.id), s);
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({a});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, a, s] {
      add_grad(a.id, t_scale(nodes_[static_cast<size_t>(id)].grad, s));
    };
  }
  return Var{id};
}

Var Tape::silu(Var a) {
  check_var(a, "silu");
  const Tensor& x = nval(a.id);
  Tensor out = x;
  for (auto& t : out.v) {
    float sg = 1.0f / (1.0f + std::exp(-t));
    t = t * sg;
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({a});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, a] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      const Tensor& x = nval(a.id);
      Tensor dx = g;
      for (size_t i = 0; i < dx.v.size(); ++i) {
        float sg = 1.0f / (1.0f + std::exp(-x.v[i]));
        dx.v[i] *= sg * (1.0f + x.v[i] * (1.0f - sg));
      }
      add_grad(a.id, dx);
    };
  }
  return Var{id};
}

Var Tape::add_row_bias(Var m, Var bias) {
  check_var(m, "add_row_bias");
  check_var(bias, "add_row_bias");
  const Tensor &tm = nval(m.id), &tb = nval(bias.id);
  TD_CHECK(tm.rank() == 2 && tb.rank() == 1 && tm.shape[1] == tb.shape[0],
           "shape_mismatch",
           "add_row_bias: " + shape_str(tm.shape) + " + " + shape_str(tb.shape));
  Tensor out = tm;
  int rows = tm.shape[0], cols = tm.shape[1];
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out.at(i, j) += tb.at(j);
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({m, bias});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, m, bias, rows, cols] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      if (nodes_[static_cast<size_t>(m.id)].requires_grad) add_grad(m.id, g);
      if (nodes_[static_cast<size_t>(bias.id)].requires_grad) {
        Tensor db = Tensor::zeros({cols});
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j) db.at(j) += g.at(i, j);
        add_grad(bias.id, db);
      }
    };
  }
  return Var{id};
}

Var Tape::add_channel_bias(Var x, Var bias) {
  check_var(x, "add_channel_bias");
  check_var(bias, "add_channel_bias");
  const Tensor &tx = nval(x.id), &tb = nval(bias.id);
  TD_CHECK(tx.rank() == 3 && tb.rank() == 1 && tx.shape[0] == tb.shape[0],
           "shape_mismatch",
           "add_channel_bias: " + shape_str(tx.shape) + " + " + shape_str(tb.shape));
  Tensor out = tx;
  int c = tx.shape[0];
  int hw = tx.shape[1] * tx.shape[2];
  for (int ci = 0; ci < c; ++ci) {
    float b = tb.at(ci);
    float* p = out.v.data() + static_cast<size_t>(ci) * hw;
    for (int i = 0; i < hw; ++i) p[i] += b;
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({x, bias});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, x, bias, c, hw] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      if (nodes_[static_cast<size_t>(x.id)].requires_grad) add_grad(x.id, g);
      if (nodes_[static_cast<size_t>(bias.id)].requires_grad) {
        Tensor db = Tensor::zeros({c});
        for (int ci = 0; ci < c; ++ci) {
          const float* p = g.v.data() + static_cast<size_t>(ci) * hw;
          double s = 0.0;
          for (int i = 0; i < hw; ++i) s += p[i];
          db.at(ci) = static_cast<float>(s);
        }
        add_grad(bias.id, db);
      }
    };
  }
  return Var{id};
}

Var Tape::concat_channels(Var a, Var b) {
  check_var(a, "concat_channels");
  check_var(b, "concat_channels");
  const Tensor &ta = nval(a.id), &tb = nval(b.id);
  TD_CHECK(ta.rank() == 3 && tb.rank() == 3 && ta.shape[1] == tb.shape[1] &&
               ta.shape[2] == tb.shape[2],
           "shape_mismatch",
           "concat_channels: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  size_t na = ta.v.size(), nb = tb.v.size();
  Tensor out = Tensor::zeros({ta.shape[0] + tb.shape[0], ta.shape[1], ta.shape[2]});
  std::memcpy(out.v.data(), ta.v.data(), na * sizeof(float));
  std::memcpy(out.v.data() + na, tb.v.data(), nb * sizeof(float));
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({a, b});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, a, b, na, nb] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      if (nodes_[static_cast<size_t>(a.id)].requires_grad) {
        Tensor ga(nval(a.id).shape, std::vector<float>(g.v.begin(), g.v.begin() + static_cast<long>(na)));
        add_grad(a.id, ga);
      }
      if (nodes_[static_cast<size_t>(b.id)].requires_grad) {
        Tensor gb(nval(b.id).shape, std::vector<float>(g.v.begin() + static_cast<long>(na), g.v.begin() + static_cast<long>(na + nb)));
        add_grad(b.id, gb);
      }
    };
  }
  return Var{id};
}

Var Tape::concat_rows(Var a, Var b) {
  check_var(a, "concat_rows");
  check_var(b, "concat_rows");
  const Tensor &ta = nval(a.id), &tb = nval(b.id);
  TD_CHECK(ta.rank() == 2 && tb.rank() == 2 && ta.shape[1] == tb.shape[1],
           "shape_mismatch",
           "concat_rows: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  size_t na = ta.v.size(), nb = tb.v.size();
  Tensor out = Tensor::zeros({ta.shape[0] + tb.shape[0], ta.shape[1]});
  std::memcpy(out.v.data(), ta.v.data(), na * sizeof(float));
  std::memcpy(out.v.data() + na, tb.v.data(), nb * sizeof(float));
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({a, b});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, a, b, na, nb] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      if (nodes_[static_cast<size_t>(a.id)].requires_grad) {
        Tensor ga(nval(a.id).shape, std::vector<float>(g.v.begin(), g.v.begin() + static_cast<long>(na)));
        add_grad(a.id, ga);
      }
      if (nodes_[static_cast<size_t>(b.id)].requires_grad) {
        Tensor gb(nval(b.id).shape, std::vector<float>(g.v.begin() + static_cast<long>(na), g.v.begin() + static_cast<long>(na + nb)));
        add_grad(b.id, gb);
      }
    };
  }
  return Var{id};
}

Var Tape::to_tokens(Var x) {
  check_var(x, "to_tokens");
  const Tensor& tx = nval(x.id);
  TD_CHECK(tx.rank() == 3, "shape_mismatch", "to_tokens expects [C,H,W], got " + shape_str(tx.shape));
  int c = tx.shape[0], hw = tx.shape[1] * tx.shape[2];
  Tensor out = Tensor::zeros({hw, c});
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < hw; ++p) out.at(p, ci) = tx.v[static_cast<size_t>(ci) * hw + p];
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({x});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, x, c, hw] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      Tensor dx = Tensor::zeros(nval(x.id).shape);
      for (int ci = 0; ci < c; ++ci)
        for (int p = 0; p < hw; ++p) dx.v[static_cast<size_t>(ci) * hw + p] = g.at(p, ci);
      add_grad(x.id, dx);
    };
  }
  return Var{id};
}

Var Tape::from_tokens(Var t, int h, int w) {
  check_var(t, "from_tokens");
  const Tensor& tt = nval(t.id);
  TD_CHECK(tt.rank() == 2 && tt.shape[0] == h * w, "shape_mismatch",
           "from_tokens: " + shape_str(tt.shape) + " does not match " +
               std::to_string(h) + "x" + std::to_string(w));
  int c = tt.shape[1], hw = h * w;
  Tensor out = Tensor::zeros({c, h, w});
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < hw; ++p) out.v[static_cast<size_t>(ci) * hw + p] = tt.at(p, ci);
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({t});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, t, c, hw] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      Tensor dt = Tensor::zeros(nval(t.id).shape);
      for (int ci = 0; ci < c; ++ci)
        for (int p = 0; p < hw; ++p) dt.at(p, ci) = g.v[static_cast<size_t>(ci) * hw + p];
      add_grad(t.id, dt);
    };
  }
  return Var{id};
}

Var Tape::upsample_nearest2x(Var x) {
  check_var(x, "upsample_nearest2x");
  const Tensor& tx = nval(x.id);
  TD_CHECK(tx.rank() == 3, "shape_mismatch", "upsample_nearest2x expects [C,H,W]");
  int c = tx.shape[0], h = tx.shape[1], w = tx.shape[2];
  Tensor out = Tensor::zeros({c, 2 * h, 2 * w});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        float val = tx.at(ci, y, xx);
        out.at(ci, 2 * y, 2 * xx) = val;
        out.at(ci, 2 * y, 2 * xx + 1) = val;
        out.at(ci, 2 * y + 1, 2 * xx) = val;
        out.at(ci, 2 * y + 1, 2 * xx + 1) = val;
      }
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({x});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, x, c, h, w] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      Tensor dx = Tensor::zeros({c, h, w});
      for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            dx.at(ci, y, xx) = g.at(ci, 2 * y, 2 * xx) + g.at(ci, 2 * y, 2 * xx + 1) +
                               g.at(ci, 2 * y + 1, 2 * xx) + g.at(ci, 2 * y + 1, 2 * xx + 1);
      add_grad(x.id, dx);
    };
  }
  return Var{id};
}

Var Tape::reshape(Var a, std::vector<int> shape) {
  check_var(a, "reshape");
  const Tensor& ta = nval(a.id);
  TD_CHECK(numel(shape) == ta.v.size(), "shape_mismatch",
           "reshape: " + shape_str(ta.shape) + " -> " + shape_str(shape));
  Tensor out;
  out.shape = std::move(shape);
  out.v = ta.v;
  std::vector<int> old_shape = ta.shape;
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({a});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, a, old_shape] {
      Tensor g = nodes_[static_cast<size_t>(id)].grad;
      g.shape = old_shape;
      add_grad(a.id, g);
    };
  }
  return Var{id};
}

// ----------------------------------------------------------------------------
// linear algebra

Var Tape::matmul(Var a, Var b) {
  check_var(a, "matmul");
  check_var(b, "matmul");
  const Tensor &ta = nval(a.id), &tb = nval(b.id);
  TD_CHECK(ta.rank() == 2 && tb.rank() == 2 && ta.shape[1] == tb.shape[0],
           "shape_mismatch",
           "matmul: " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
  int m = ta.shape[0], k = ta.shape[1], nn = tb.shape[1];
  Tensor out = Tensor::zeros({m, nn});
  gemm(false, false, m, nn, k, ta.v.data(), tb.v.data(), out.v.data(), 0.0f);
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({a, b});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, a, b, m, k, nn] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      if (nodes_[static_cast<size_t>(a.id)].requires_grad) {
        Tensor& ga = grad_slot(a.id);
        gemm(false, true, m, k, nn, g.v.data(), nval(b.id).v.data(), ga.v.data(), 1.0f);
      }
      if (nodes_[static_cast<size_t>(b.id)].requires_grad) {
        Tensor& gb = grad_slot(b.id);
        gemm(true, false, k, nn, m, nval(a.id).v.data(), g.v.data(), gb.v.data(), 1.0f);
      }
    };
  }
  return Var{id};
}

Var Tape::matmul_nt(Var a, Var b) {
  check_var(a, "matmul_nt");
  check_var(b, "matmul_nt");
  const Tensor &ta = nval(a.id), &tb = nval(b.id);
  TD_CHECK(ta.rank() == 2 && tb.rank() == 2 && ta.shape[1] == tb.shape[1],
           "shape_mismatch",
           "matmul_nt: " + shape_str(ta.shape) + " x " + shape_str(tb.shape) + "^T");
  int m = ta.shape[0], k = ta.shape[1], nn = tb.shape[0];
  Tensor out = Tensor::zeros({m, nn});
  gemm(false, true, m, nn, k, ta.v.data(), tb.v.data(), out.v.data(), 0.0f);
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({a, b});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, a, b, m, k, nn] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      if (nodes_[static_cast<size_t>(a.id)].requires_grad) {
        Tensor& ga = grad_slot(a.id);
        gemm(false, false, m, k, nn, g.v.data(), nval(b.id).v.data(), ga.v.data(), 1.0f);
      }
      if (nodes_[static_cast<size_t>(b.id)].requires_grad) {
        Tensor& gb = grad_slot(b.id);
        gemm(true, false, nn, k, m, g.v.data(), nval(a.id).v.data(), gb.v.data(), 1.0f);
      }
    };
  }
  return Var{id};
}

Var Tape::softmax_rows(Var m) {
  check_var(m, "softmax_rows");
  const Tensor& tm = nval(m.id);
  TD_CHECK(tm.rank() == 2, "shape_mismatch", "softmax_rows expects [M,N]");
  int rows = tm.shape[0], cols = tm.shape[1];
  Tensor out = tm;
  for (int i = 0; i < rows; ++i) {
    float mx = out.at(i, 0);
    for (int j = 1; j < cols; ++j) mx = std::max(mx, out.at(i, j));
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
      float e = std::exp(out.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    float inv = static_cast<float>(1.0 / sum);
    for (int j = 0; j < cols; ++j) out.at(i, j) *= inv;
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({m});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, m, rows, cols] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      const Tensor& p = nval(id);
      Tensor dm = Tensor::zeros(p.shape);
      for (int i = 0; i < rows; ++i) {
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += static_cast<double>(g.at(i, j)) * p.at(i, j);
        for (int j = 0; j < cols; ++j)
          dm.at(i, j) = p.at(i, j) * (g.at(i, j) - static_cast<float>(dot));
      }
      add_grad(m.id, dm);
    };
  }
  return Var{id};
}

Var Tape::gather_rows(Var table, std::vector<int> ids) {
  check_var(table, "gather_rows");
  const Tensor& tt = nval(table.id);
  TD_CHECK(tt.rank() == 2, "shape_mismatch", "gather_rows expects [V,C] table");
  int v = tt.shape[0], c = tt.shape[1];
  for (int i : ids)
    TD_CHECK(i >= 0 && i < v, "bad_arg",
             "gather_rows: id " + std::to_string(i) + " out of range [0," + std::to_string(v) + ")");
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), c});
  for (size_t r = 0; r < ids.size(); ++r)
    std::memcpy(out.v.data() + r * c, tt.v.data() + static_cast<size_t>(ids[r]) * c,
                static_cast<size_t>(c) * sizeof(float));
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({table});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, table, ids = std::move(ids), c] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      Tensor dt = Tensor::zeros(nval(table.id).shape);
      for (size_t r = 0; r < ids.size(); ++r) {
        float* dst = dt.v.data() + static_cast<size_t>(ids[r]) * c;
        const float* src = g.v.data() + r * c;
        for (int j = 0; j < c; ++j) dst[j] += src[j];
      }
      add_grad(table.id, dt);
    };
  }
  return Var{id};
}

// ----------------------------------------------------------------------------
// conv / norm / blur

Var Tape::conv2d(Var x, Var w, int stride) {
  check_var(x, "conv2d");
  check_var(w, "conv2d");
  const Tensor &tx = nval(x.id), &tw = nval(w.id);
  TD_CHECK(stride == 1 || stride == 2, "bad_arg", "conv2d: stride must be 1 or 2");
  TD_CHECK(tx.rank() == 3 && tw.rank() == 4 && tw.shape[2] == 3 && tw.shape[3] == 3 &&
               tw.shape[1] == tx.shape[0],
           "shape_mismatch",
           "conv2d: x " + shape_str(tx.shape) + " w " + shape_str(tw.shape));
  int cin = tx.shape[0], h = tx.shape[1], ww = tx.shape[2];
  int cout = tw.shape[0];
  int ho = (h + 2 - 3) / stride + 1;
  int wo = (ww + 2 - 3) / stride + 1;
  int k = cin * 9, nout = ho * wo;
  std::vector<float> col(static_cast<size_t>(k) * nout);
  im2col3(tx, stride, ho, wo, col.data());
  Tensor out = Tensor::zeros({cout, ho, wo});
  gemm(false, false, cout, nout, k, tw.v.data(), col.data(), out.v.data(), 0.0f);
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({x, w});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, x, w, stride, cout, k, ho, wo] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      int nout = ho * wo;
      // The unpacked input is recomputed rather than cached: the sgemm work
      // dwarfs the im2col pass and this keeps tape memory at one tensor/node.
      std::vector<float> col(static_cast<size_t>(k) * nout);
      im2col3(nval(x.id), stride, ho, wo, col.data());
      if (nodes_[static_cast<size_t>(w.id)].requires_grad) {
        Tensor& gw = grad_slot(w.id);
        gemm(false, true, cout, k, nout, g.v.data(), col.data(), gw.v.data(), 1.0f);
      }
      if (nodes_[static_cast<size_t>(x.id)].requires_grad) {
        std::vector<float> dcol(static_cast<size_t>(k) * nout);
        gemm(true, false, k, nout, cout, nval(w.id).v.data(), g.v.data(), dcol.data(), 0.0f);
        Tensor dx = Tensor::zeros(nval(x.id).shape);
        col2im3(dcol.data(), stride, ho, wo, dx);
        add_grad(x.id, dx);
      }
    };
  }
  return Var{id};
}

Var Tape::group_norm(Var x, Var gamma, Var beta, int groups) {
  check_var(x, "group_norm");
  check_var(gamma, "group_norm");
  check_var(beta, "group_norm");
  const Tensor &tx = nval(x.id), &tg = nval(gamma.id), &tb = nval(beta.id);
  TD_CHECK(tx.rank() == 3, "shape_mismatch", "group_norm expects [C,H,W]");
  int c = tx.shape[0], hw = tx.shape[1] * tx.shape[2];
  TD_CHECK(groups >= 1 && c % groups == 0, "bad_arg",
           "group_norm: channels " + std::to_string(c) + " not divisible by groups " +
               std::to_string(groups));
  TD_CHECK(tg.shape == std::vector<int>{c} && tb.shape == std::vector<int>{c},
           "shape_mismatch", "group_norm: gamma/beta must be [C]");
  const float eps = 1e-5f;
  int cpg = c / groups;
  int64_t gn = static_cast<int64_t>(cpg) * hw;
  std::vector<float> mean(static_cast<size_t>(groups)), inv(static_cast<size_t>(groups));
  Tensor out = tx;
  for (int gi = 0; gi < groups; ++gi) {
    const float* base = tx.v.data() + static_cast<size_t>(gi) * gn;
    double s = 0.0;
    for (int64_t i = 0; i < gn; ++i) s += base[i];
    double mu = s / static_cast<double>(gn);
    double var = 0.0;
    for (int64_t i = 0; i < gn; ++i) {
      double d = base[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(gn);
    mean[static_cast<size_t>(gi)] = static_cast<float>(mu);
    inv[static_cast<size_t>(gi)] = static_cast<float>(1.0 / std::sqrt(var + eps));
  }
  for (int ci = 0; ci < c; ++ci) {
    int gi = ci / cpg;
    float mu = mean[static_cast<size_t>(gi)], iv = inv[static_cast<size_t>(gi)];
    float ga = tg.at(ci), be = tb.at(ci);
    float* p = out.v.data() + static_cast<size_t>(ci) * hw;
    for (int i = 0; i < hw; ++i) p[i] = (p[i] - mu) * iv * ga + be;
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({x, gamma, beta});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, x, gamma, beta, groups, c, hw, cpg, gn,
                                            mean = std::move(mean), inv = std::move(inv)] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      const Tensor& tx = nval(x.id);
      const Tensor& tg = nval(gamma.id);
      Tensor dgamma = Tensor::zeros({c}), dbeta = Tensor::zeros({c});
      Tensor dx = Tensor::zeros(tx.shape);
      for (int gi = 0; gi < groups; ++gi) {
        float mu = mean[static_cast<size_t>(gi)], iv = inv[static_cast<size_t>(gi)];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int ci = gi * cpg; ci < (gi + 1) * cpg; ++ci) {
          const float* xp = tx.v.data() + static_cast<size_t>(ci) * hw;
          const float* gp = g.v.data() + static_cast<size_t>(ci) * hw;
          float gam = tg.at(ci);
          double dg = 0.0, db = 0.0;
          for (int i = 0; i < hw; ++i) {
            float xhat = (xp[i] - mu) * iv;
            float dxhat = gp[i] * gam;
            dg += static_cast<double>(gp[i]) * xhat;
            db += gp[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += static_cast<double>(dxhat) * xhat;
          }
          dgamma.at(ci) = static_cast<float>(dg);
          dbeta.at(ci) = static_cast<float>(db);
        }
        float m1 = static_cast<float>(sum_dxhat / static_cast<double>(gn));
        float m2 = static_cast<float>(sum_dxhat_xhat / static_cast<double>(gn));
        for (int ci = gi * cpg; ci < (gi + 1) * cpg; ++ci) {
          const float* xp = tx.v.data() + static_cast<size_t>(ci) * hw;
          const float* gp = g.v.data() + static_cast<size_t>(ci) * hw;
          float gam = tg.at(ci);
          float* dp = dx.v.data() + static_cast<size_t>(ci) * hw;
          for (int i = 0; i < hw; ++i) {
            float xhat = (xp[i] - mu) * iv;
            float dxhat = gp[i] * gam;
            dp[i] = iv * (dxhat - m1 - xhat * m2);
          }
        }
      }
      if (nodes_[static_cast<size_t>(x.id)].requires_grad) add_grad(x.id, dx);
      if (nodes_[static_cast<size_t>(gamma.id)].requires_grad) add_grad(gamma.id, dgamma);
      if (nodes_[static_cast<size_t>(beta.id)].requires_grad) add_grad(beta.id, dbeta);
    };
  }
  return Var{id};
}

Var Tape::gaussian_blur2d(Var x, float sigma) {
  check_var(x, "gaussian_blur2d");
  TD_CHECK(sigma > 0.0f, "bad_arg", "gaussian_blur2d: sigma must be positive");
  const Tensor& tx = nval(x.id);
  TD_CHECK(tx.rank() == 3, "shape_mismatch", "gaussian_blur2d expects [C,H,W]");
  int c = tx.shape[0], h = tx.shape[1], w = tx.shape[2];
  int radius = 0;
  std::vector<float> kern = gaussian_kernel(sigma, radius);
  Tensor tmp = Tensor::zeros(tx.shape);
  Tensor out = Tensor::zeros(tx.shape);
  for (int ci = 0; ci < c; ++ci) {
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double s = 0.0;
        for (int k = -radius; k <= radius; ++k)
          s += static_cast<double>(kern[static_cast<size_t>(k + radius)]) *
               tx.at(ci, y, reflect_index(xx + k, w));
        tmp.at(ci, y, xx) = static_cast<float>(s);
      }
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double s = 0.0;
        for (int k = -radius; k <= radius; ++k)
          s += static_cast<double>(kern[static_cast<size_t>(k + radius)]) *
               tmp.at(ci, reflect_index(y + k, h), xx);
        out.at(ci, y, xx) = static_cast<float>(s);
      }
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({x});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, x, c, h, w, radius, kern = std::move(kern)] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      Tensor dtmp = Tensor::zeros({c, h, w});
      Tensor dx = Tensor::zeros({c, h, w});
      for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            float gv = g.at(ci, y, xx);
            for (int k = -radius; k <= radius; ++k)
              dtmp.at(ci, reflect_index(y + k, h), xx) +=
                  kern[static_cast<size_t>(k + radius)] * gv;
          }
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            float gv = dtmp.at(ci, y, xx);
            for (int k = -radius; k <= radius; ++k)
              dx.at(ci, y, reflect_index(xx + k, w)) +=
                  kern[static_cast<size_t>(k + radius)] * gv;
          }
      }
      add_grad(x.id, dx);
    };
  }
  return Var{id};
}

// ----------------------------------------------------------------------------
// attention

Attention Tape::attention(Var q, Var k, Var v, const Tensor* probs_override) {
  check_var(q, "attention");
  check_var(k, "attention");
  check_var(v, "attention");
  const Tensor &tq = nval(q.id), &tk = nval(k.id), &tv = nval(v.id);
  TD_CHECK(tq.rank() == 2 && tk.rank() == 2 && tv.rank() == 2, "shape_mismatch",
           "attention expects 2-D q, k, v");
  TD_CHECK(tq.shape[1] == tk.shape[1], "shape_mismatch",
           "attention: q " + shape_str(tq.shape) + " vs k " + shape_str(tk.shape));
  TD_CHECK(tk.shape[0] == tv.shape[0], "shape_mismatch",
           "attention: k " + shape_str(tk.shape) + " vs v " + shape_str(tv.shape));
  Attention res;
  if (probs_override != nullptr) {
    TD_CHECK(!grad_enabled_, "grad_disabled",
             "attention: probability override is inference-only");
    TD_CHECK(probs_override->shape == std::vector<int>({tq.shape[0], tk.shape[0]}),
             "shape_mismatch",
             "attention: override " + shape_str(probs_override->shape) + " expected [" +
                 std::to_string(tq.shape[0]) + "," + std::to_string(tk.shape[0]) + "]");
    res.probs = constant(*probs_override);
  } else {
    Var scores = matmul_nt(q, k);
    float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(tq.shape[1]));
    res.probs = softmax_rows(scale(scores, inv_sqrt_d));
  }
  res.out = matmul(res.probs, v);
  return res;
}

// ----------------------------------------------------------------------------
// reductions / losses

Var Tape::mean_all(Var a) {
  check_var(a, "mean_all");
  const Tensor& ta = nval(a.id);
  TD_CHECK(ta.size() > 0, "bad_arg", "mean_all of empty tensor");
  Tensor out = Tensor::scalar(t_mean(ta));
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({a});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, a] {
      float g = nodes_[static_cast<size_t>(id)].grad.v[0];
      const Tensor& ta = nval(a.id);
      add_grad(a.id, Tensor::full(ta.shape, g / static_cast<float>(ta.size())));
    };
  }
  return Var{id};
}

Var Tape::mse_loss(Var a, Var b) {
  check_var(a, "mse_loss");
  check_var(b, "mse_loss");
  const Tensor &ta = nval(a.id), &tb = nval(b.id);
  TD_CHECK(ta.shape == tb.shape, "shape_mismatch",
           "mse_loss: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  TD_CHECK(ta.size() > 0, "bad_arg", "mse_loss of empty tensors");
  double s = 0.0;
  for (size_t i = 0; i < ta.v.size(); ++i) {
    double d = static_cast<double>(ta.v[i]) - tb.v[i];
    s += d * d;
  }
  Tensor out = Tensor::scalar(static_cast<float>(s / static_cast<double>(ta.size())));
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({a, b});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, a, b] {
      float g = nodes_[static_cast<size_t>(id)].grad.v[0];
      const Tensor &ta = nval(a.id), &tb = nval(b.id);
      float coef = 2.0f * g / static_cast<float>(ta.size());
      Tensor d = t_scale(t_sub(ta, tb), coef);
      if (nodes_[static_cast<size_t>(a.id)].requires_grad) add_grad(a.id, d);
      if (nodes_[static_cast<size_t>(b.id)].requires_grad) add_grad(b.id, t_scale(d, -1.0f));
    };
  }
  return Var{id};
}

Var Tape::softmax_cross_entropy(Var logits, std::vector<int> labels) {
  check_var(logits, "softmax_cross_entropy");
  const Tensor& tl = nval(logits.id);
  TD_CHECK(tl.rank() == 2, "shape_mismatch", "softmax_cross_entropy expects [N,C]");
  int rows = tl.shape[0], cols = tl.shape[1];
  TD_CHECK(static_cast<int>(labels.size()) == rows, "shape_mismatch",
           "softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
               std::to_string(rows) + " rows");
  for (int y : labels)
    TD_CHECK(y >= 0 && y < cols, "bad_arg", "softmax_cross_entropy: label out of range");
  double loss = 0.0;
  for (int i = 0; i < rows; ++i) {
    float mx = tl.at(i, 0);
    for (int j = 1; j < cols; ++j) mx = std::max(mx, tl.at(i, j));
    double lse = 0.0;
    for (int j = 0; j < cols; ++j) lse += std::exp(static_cast<double>(tl.at(i, j)) - mx);
    lse = std::log(lse) + mx;
    loss += lse - tl.at(i, labels[static_cast<size_t>(i)]);
  }
  Tensor out = Tensor::scalar(static_cast<float>(loss / rows));
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({logits});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, logits, labels = std::move(labels), rows, cols] {
      float g = nodes_[static_cast<size_t>(id)].grad.v[0];
      const Tensor& tl = nval(logits.id);
      Tensor dl = Tensor::zeros(tl.shape);
      for (int i = 0; i < rows; ++i) {
        float mx = tl.at(i, 0);
        for (int j = 1; j < cols; ++j) mx = std::max(mx, tl.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) sum += std::exp(static_cast<double>(tl.at(i, j)) - mx);
        for (int j = 0; j < cols; ++j) {
          float p = static_cast<float>(std::exp(static_cast<double>(tl.at(i, j)) - mx) / sum);
          float delta = (j == labels[static_cast<size_t>(i)]) ? 1.0f : 0.0f;
          dl.at(i, j) = g * (p - delta) / static_cast<float>(rows);
        }
      }
      add_grad(logits.id, dl);
    };
  }
  return Var{id};
}

Var Tape::l2_normalize_rows(Var m) {
  check_var(m, "l2_normalize_rows");
  const Tensor& tm = nval(m.id);
  TD_CHECK(tm.rank() == 2, "shape_mismatch", "l2_normalize_rows expects [T,C]");
  const float eps = 1e-12f;
  int rows = tm.shape[0], cols = tm.shape[1];
  Tensor out = tm;
  std::vector<float> norms(static_cast<size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += static_cast<double>(tm.at(i, j)) * tm.at(i, j);
    float nn = std::max(static_cast<float>(std::sqrt(s)), eps);
    norms[static_cast<size_t>(i)] = nn;
    for (int j = 0; j < cols; ++j) out.at(i, j) /= nn;
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = grad_enabled_ && any_grad({m});
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (nodes_[static_cast<size_t>(id)].requires_grad) {
    nodes_[static_cast<size_t>(id)].back = [this, id, m, rows, cols, norms = std::move(norms)] {
      const Tensor& g = nodes_[static_cast<size_t>(id)].grad;
      const Tensor& y = nval(id);
      Tensor dm = Tensor::zeros(y.shape);
      for (int i = 0; i < rows; ++i) {
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += static_cast<double>(g.at(i, j)) * y.at(i, j);
        float inv = 1.0f / norms[static_cast<size_t>(i)];
        for (int j = 0; j < cols; ++j)
          dm.at(i, j) = (g.at(i, j) - y.at(i, j) * static_cast<float>(dot)) * inv;
      }
      add_grad(m.id, dm);
    };
  }
  return Var{id};
}

// ----------------------------------------------------------------------------
// optimizer

void adam_step(Tensor& param, const Tensor& grad, AdamState& s, float lr, float beta1,
               float beta2, float eps) {
  TD_CHECK(param.shape == grad.shape, "shape_mismatch",
           "adam_step: param " + shape_str(param.shape) + " grad " + shape_str(grad.shape));
  TD_CHECK(lr >= 0.0f, "bad_arg", "adam_step: lr must not be negative");
  TD_CHECK(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f, "bad_arg",
           "adam_step: betas must lie in [0,1)");
  TD_CHECK(eps > 0.0f, "bad_arg", "adam_step: eps must be positive");
  if (s.step == 0) {
    s.m = Tensor::zeros(param.shape);
    s.v = Tensor::zeros(param.shape);
  }
  TD_CHECK(s.m.shape == param.shape && s.v.shape == param.shape, "shape_mismatch",
           "adam_step: state shape does not match parameter");
  s.step += 1;
  float bc1 = 1.0f - std::pow(beta1, static_cast<float>(s.step));
  float bc2 = 1.0f - std::pow(beta2, static_cast<float>(s.step));
  for (size_t i = 0; i < param.v.size(); ++i) {
    float gi = grad.v[i];
    s.m.v[i] = beta1 * s.m.v[i] + (1.0f - beta1) * gi;
    s.v.v[i] = beta2 * s.v.v[i] + (1.0f - beta2) * gi * gi;
    float mhat = s.m.v[i] / bc1;
    float vhat = s.v.v[i] / bc2;
    param.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace td
