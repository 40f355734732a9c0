#include "tslab/tape.hpp"

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <utility>

namespace tslab {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

CMap as_matrix(const Tensor& t) { return CMap(t.data(), t.rows(), t.cols()); }
MMap as_matrix(Tensor& t) { return MMap(t.data(), t.rows(), t.cols()); }

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

}  // namespace

Var Tape::push(Tensor value, bool needs_grad, BackpropFn backprop) {
  Node node;
  node.owned = std::move(value);
  node.needs_grad = needs_grad;
  node.backprop = std::move(backprop);
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(const Tensor& external) {
  Node node;
  node.external = &external;
  node.needs_grad = true;
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::input(const Tensor& external) {
  Node node;
  node.external = &external;
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Tensor owned) { return push(std::move(owned), false, {}); }

const Tensor& Tape::value(Var v) const {
  check(v.valid() && v.id < static_cast<int>(nodes_.size()), "invalid tape handle");
  return val(v.id);
}

bool Tape::requires_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }

Tensor& Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(val(id).shape());
  return n.grad;
}

void Tape::add_to_grad(int id, const Tensor& g) {
  Tensor& buf = grad_buf(id);
  for (std::int64_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

bool Tape::needs(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

Var Tape::matmul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check(ta.rank() == 2 && tb.rank() == 2, "matmul: operands must be matrices");
  check(ta.cols() == tb.rows(), "matmul: inner dimensions disagree " + ta.shape_string() +
                                    " vs " + tb.shape_string());
  Tensor out({ta.rows(), tb.cols()});
  as_matrix(out).noalias() = as_matrix(ta) * as_matrix(tb);
  const int ia = a.id, ib = b.id;
  return push(std::move(out), needs(ia) || needs(ib), [ia, ib](Tape& t, const Tensor& g) {
    if (t.needs(ia)) {
      Tensor da(t.val(ia).shape());
      as_matrix(da).noalias() = as_matrix(g) * as_matrix(t.val(ib)).transpose();
      t.add_to_grad(ia, da);
    }
    if (t.needs(ib)) {
      Tensor db(t.val(ib).shape());
      as_matrix(db).noalias() = as_matrix(t.val(ia)).transpose() * as_matrix(g);
      t.add_to_grad(ib, db);
    }
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check(ta.rank() == 2 && tb.rank() == 2, "matmul_nt: operands must be matrices");
  check(ta.cols() == tb.cols(), "matmul_nt: inner dimensions disagree " + ta.shape_string() +
                                    " vs " + tb.shape_string());
  Tensor out({ta.rows(), tb.rows()});
  as_matrix(out).noalias() = as_matrix(ta) * as_matrix(tb).transpose();
  const int ia = a.id, ib = b.id;
  return push(std::move(out), needs(ia) || needs(ib), [ia, ib](Tape& t, const Tensor& g) {
    if (t.needs(ia)) {
      Tensor da(t.val(ia).shape());
      as_matrix(da).noalias() = as_matrix(g) * as_matrix(t.val(ib));
      t.add_to_grad(ia, da);
    }
    if (t.needs(ib)) {
      Tensor db(t.val(ib).shape());
      as_matrix(db).noalias() = as_matrix(g).transpose() * as_matrix(t.val(ia));
      t.add_to_grad(ib, db);
    }
  });
}

Var Tape::transpose(Var a) {
  const Tensor& ta = value(a);
  check(ta.rank() == 2, "transpose: matrix expected");
  Tensor out({ta.cols(), ta.rows()});
  for (int i = 0; i < ta.rows(); ++i)
    for (int j = 0; j < ta.cols(); ++j) out.at(j, i) = ta.at(i, j);
  const int ia = a.id;
  return push(std::move(out), needs(ia), [ia](Tape& t, const Tensor& g) {
    if (!t.needs(ia)) return;
    Tensor da(t.val(ia).shape());
    for (int i = 0; i < da.rows(); ++i)
      for (int j = 0; j < da.cols(); ++j) da.at(i, j) = g.at(j, i);
    t.add_to_grad(ia, da);
  });
}

Var Tape::add(Var a, Var b) { return add_scaled(a, b, 1.0); }

Var Tape::sub(Var a, Var b) { return add_scaled(a, b, -1.0); }

Var Tape::add_scaled(Var a, Var b, double c) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check(ta.same_shape(tb), "add: shape mismatch " + ta.shape_string() + " vs " + tb.shape_string());
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] + c * tb[i];
  const int ia = a.id, ib = b.id;
  return push(std::move(out), needs(ia) || needs(ib), [ia, ib, c](Tape& t, const Tensor& g) {
    if (t.needs(ia)) t.add_to_grad(ia, g);
    if (t.needs(ib)) {
      Tensor& buf = t.grad_buf(ib);
      for (std::int64_t i = 0; i < buf.size(); ++i) buf[i] += c * g[i];
    }
  });
}

Var Tape::scale(Var a, double c) {
  const Tensor& ta = value(a);
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = c * ta[i];
  const int ia = a.id;
  return push(std::move(out), needs(ia), [ia, c](Tape& t, const Tensor& g) {
    if (!t.needs(ia)) return;
    Tensor& buf = t.grad_buf(ia);
    for (std::int64_t i = 0; i < buf.size(); ++i) buf[i] += c * g[i];
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check(ta.same_shape(tb), "mul: shape mismatch");
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
  const int ia = a.id, ib = b.id;
  return push(std::move(out), needs(ia) || needs(ib), [ia, ib](Tape& t, const Tensor& g) {
    if (t.needs(ia)) {
      Tensor& buf = t.grad_buf(ia);
      const Tensor& vb = t.val(ib);
      for (std::int64_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * vb[i];
    }
    if (t.needs(ib)) {
      Tensor& buf = t.grad_buf(ib);
      const Tensor& va = t.val(ia);
      for (std::int64_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * va[i];
    }
  });
}

Var Tape::gelu(Var a) {
  const Tensor& ta = value(a);
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = gelu_value(ta[i]);
  const int ia = a.id;
  return push(std::move(out), needs(ia), [ia](Tape& t, const Tensor& g) {
    if (!t.needs(ia)) return;
    Tensor& buf = t.grad_buf(ia);
    const Tensor& va = t.val(ia);
    for (std::int64_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * gelu_derivative(va[i]);
  });
}

Var Tape::softmax_rows(Var a, bool causal) {
  const Tensor& ta = value(a);
  check(ta.rank() == 2, "softmax_rows: matrix expected");
  const int m = ta.rows(), n = ta.cols();
  if (causal) check(m == n, "softmax_rows: causal mask needs a square matrix");
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    const int support = causal ? i + 1 : n;
    double mx = ta.at(i, 0);
    for (int j = 1; j < support; ++j) mx = std::max(mx, ta.at(i, j));
    double z = 0.0;
    for (int j = 0; j < support; ++j) {
      const double e = std::exp(ta.at(i, j) - mx);
      out.at(i, j) = e;
      z += e;
    }
    for (int j = 0; j < support; ++j) out.at(i, j) /= z;
    // entries beyond the causal support stay exactly zero
  }
  const int ia = a.id, out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(ia), [ia, out_id, causal](Tape& t, const Tensor& g) {
    if (!t.needs(ia)) return;
    const Tensor& y = t.val(out_id);
    Tensor& buf = t.grad_buf(ia);
    const int m = y.rows(), n = y.cols();
    for (int i = 0; i < m; ++i) {
      const int support = causal ? i + 1 : n;
      double dot = 0.0;
      for (int j = 0; j < support; ++j) dot += g.at(i, j) * y.at(i, j);
      for (int j = 0; j < support; ++j) buf.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
    }
  });
}

Var Tape::layernorm_rows(Var a, double eps) {
  const Tensor& ta = value(a);
  check(ta.rank() == 2, "layernorm_rows: matrix expected");
  check(eps > 0.0, "layernorm_rows: eps must be positive");
  // single-feature rows normalize to exactly zero (mean equals the entry)
  const int m = ta.rows(), n = ta.cols();
  Tensor out({m, n});
  Tensor inv_std({m});
  for (int i = 0; i < m; ++i) {
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += ta.at(i, j);
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = ta.at(i, j) - mean;
      var += d * d;
    }
    var /= n;  // biased variance, matching the fixed-layernorm definition
    const double s = 1.0 / std::sqrt(var + eps);
    inv_std[i] = s;
    for (int j = 0; j < n; ++j) out.at(i, j) = (ta.at(i, j) - mean) * s;
  }
  const int ia = a.id, out_id = static_cast<int>(nodes_.size());
  auto istd = std::make_shared<Tensor>(std::move(inv_std));
  return push(std::move(out), needs(ia), [ia, out_id, istd](Tape& t, const Tensor& g) {
    if (!t.needs(ia)) return;
    const Tensor& y = t.val(out_id);
    Tensor& buf = t.grad_buf(ia);
    const int m = y.rows(), n = y.cols();
    for (int i = 0; i < m; ++i) {
      double gmean = 0.0, gydot = 0.0;
      for (int j = 0; j < n; ++j) {
        gmean += g.at(i, j);
        gydot += g.at(i, j) * y.at(i, j);
      }
      gmean /= n;
      gydot /= n;
      const double s = (*istd)[i];
      for (int j = 0; j < n; ++j)
        buf.at(i, j) += s * (g.at(i, j) - gmean - y.at(i, j) * gydot);
    }
  });
}

Var Tape::mean_rows(Var a) {
  const Tensor& ta = value(a);
  check(ta.rank() == 2, "mean_rows: matrix expected");
  const int m = ta.rows(), n = ta.cols();
  Tensor out({1, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(0, j) += ta.at(i, j);
  for (int j = 0; j < n; ++j) out.at(0, j) /= m;
  const int ia = a.id;
  return push(std::move(out), needs(ia), [ia, m](Tape& t, const Tensor& g) {
    if (!t.needs(ia)) return;
    Tensor& buf = t.grad_buf(ia);
    const int n = buf.cols();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) buf.at(i, j) += g.at(0, j) / m;
  });
}

Var Tape::slice_cols(Var a, int col0, int width) {
  const Tensor& ta = value(a);
  check(ta.rank() == 2, "slice_cols: matrix expected");
  check(col0 >= 0 && width > 0 && col0 + width <= ta.cols(), "slice_cols: range out of bounds");
  const int m = ta.rows();
  Tensor out({m, width});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < width; ++j) out.at(i, j) = ta.at(i, col0 + j);
  const int ia = a.id;
  return push(std::move(out), needs(ia), [ia, col0, width](Tape& t, const Tensor& g) {
    if (!t.needs(ia)) return;
    Tensor& buf = t.grad_buf(ia);
    for (int i = 0; i < g.rows(); ++i)
      for (int j = 0; j < width; ++j) buf.at(i, col0 + j) += g.at(i, j);
  });
}

Var Tape::slice_rows(Var a, int row0, int count) {
  const Tensor& ta = value(a);
  check(ta.rank() == 2, "slice_rows: matrix expected");
  check(row0 >= 0 && count > 0 && row0 + count <= ta.rows(), "slice_rows: range out of bounds");
  const int n = ta.cols();
  Tensor out({count, n});
  for (int i = 0; i < count; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = ta.at(row0 + i, j);
  const int ia = a.id;
  return push(std::move(out), needs(ia), [ia, row0, count](Tape& t, const Tensor& g) {
    if (!t.needs(ia)) return;
    Tensor& buf = t.grad_buf(ia);
    for (int i = 0; i < count; ++i)
      for (int j = 0; j < g.cols(); ++j) buf.at(row0 + i, j) += g.at(i, j);
  });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_cols: no parts");
  const int m = value(parts[0]).rows();
  int total = 0;
  bool ng = false;
  for (Var p : parts) {
    const Tensor& tp = value(p);
    check(tp.rank() == 2 && tp.rows() == m, "concat_cols: row counts disagree");
    total += tp.cols();
    ng = ng || needs(p.id);
  }
  Tensor out({m, total});
  int off = 0;
  std::vector<int> ids, offs, widths;
  for (Var p : parts) {
    const Tensor& tp = value(p);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < tp.cols(); ++j) out.at(i, off + j) = tp.at(i, j);
    ids.push_back(p.id);
    offs.push_back(off);
    widths.push_back(tp.cols());
    off += tp.cols();
  }
  return push(std::move(out), ng, [ids, offs, widths](Tape& t, const Tensor& g) {
    for (size_t k = 0; k < ids.size(); ++k) {
      if (!t.needs(ids[k])) continue;
      Tensor& buf = t.grad_buf(ids[k]);
      for (int i = 0; i < g.rows(); ++i)
        for (int j = 0; j < widths[k]; ++j) buf.at(i, j) += g.at(i, offs[k] + j);
    }
  });
}

Var Tape::embed_rows(Var table, const std::vector<int>& ids, double scale_factor) {
  const Tensor& tt = value(table);
  check(tt.rank() == 2, "embed_rows: matrix table expected");
  const int n = tt.cols();
  Tensor out({static_cast<int>(ids.size()), n});
  for (size_t s = 0; s < ids.size(); ++s) {
    check(ids[s] >= 0 && ids[s] < tt.rows(), "embed_rows: id out of range");
    for (int j = 0; j < n; ++j) out.at(static_cast<int>(s), j) = scale_factor * tt.at(ids[s], j);
  }
  const int it = table.id;
  return push(std::move(out), needs(it), [it, ids, scale_factor](Tape& t, const Tensor& g) {
    if (!t.needs(it)) return;
    Tensor& buf = t.grad_buf(it);
    for (size_t s = 0; s < ids.size(); ++s)
      for (int j = 0; j < g.cols(); ++j)
        buf.at(ids[s], j) += scale_factor * g.at(static_cast<int>(s), j);
  });
}

Var Tape::sum(Var a) {
  const Tensor& ta = value(a);
  double s = 0.0;
  for (std::int64_t i = 0; i < ta.size(); ++i) s += ta[i];
  const int ia = a.id;
  return push(Tensor::scalar(s), needs(ia), [ia](Tape& t, const Tensor& g) {
    if (!t.needs(ia)) return;
    Tensor& buf = t.grad_buf(ia);
    for (std::int64_t i = 0; i < buf.size(); ++i) buf[i] += g[0];
  });
}

Var Tape::mse_loss(Var pred, Tensor target) {
  const Tensor& tp = value(pred);
  check(tp.same_shape(target), "mse_loss: prediction/target shape mismatch");
  double s = 0.0;
  for (std::int64_t i = 0; i < tp.size(); ++i) {
    const double d = tp[i] - target[i];
    s += 0.5 * d * d;
  }
  const int ip = pred.id;
  auto tgt = std::make_shared<Tensor>(std::move(target));
  return push(Tensor::scalar(s), needs(ip), [ip, tgt](Tape& t, const Tensor& g) {
    if (!t.needs(ip)) return;
    Tensor& buf = t.grad_buf(ip);
    const Tensor& vp = t.val(ip);
    for (std::int64_t i = 0; i < buf.size(); ++i) buf[i] += g[0] * (vp[i] - (*tgt)[i]);
  });
}

Var Tape::cross_entropy(Var logits, const std::vector<int>& labels) {
  const Tensor& tl = value(logits);
  check(tl.rank() == 2, "cross_entropy: logits matrix expected");
  check(static_cast<int>(labels.size()) == tl.rows(), "cross_entropy: one label per row");
  const int m = tl.rows(), n = tl.cols();
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    check(labels[i] >= 0 && labels[i] < n, "cross_entropy: label out of range");
    double mx = tl.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, tl.at(i, j));
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(tl.at(i, j) - mx);
    total += std::log(z) + mx - tl.at(i, labels[i]);
  }
  total /= m;
  const int il = logits.id;
  auto labs = std::make_shared<std::vector<int>>(labels);
  return push(Tensor::scalar(total), needs(il), [il, labs](Tape& t, const Tensor& g) {
    if (!t.needs(il)) return;
    Tensor& buf = t.grad_buf(il);
    const Tensor& vl = t.val(il);
    const int m = vl.rows(), n = vl.cols();
    for (int i = 0; i < m; ++i) {
      double mx = vl.at(i, 0);
      for (int j = 1; j < n; ++j) mx = std::max(mx, vl.at(i, j));
      double z = 0.0;
      for (int j = 0; j < n; ++j) z += std::exp(vl.at(i, j) - mx);
      for (int j = 0; j < n; ++j) {
        const double p = std::exp(vl.at(i, j) - mx) / z;
        buf.at(i, j) += g[0] * (p - (j == (*labs)[i] ? 1.0 : 0.0)) / m;
      }
    }
  });
}

void Tape::backward(Var loss_node) {
  check(loss_node.valid() && loss_node.id < static_cast<int>(nodes_.size()),
        "backward: invalid loss node");
  check(value(loss_node).size() == 1, "backward: loss must be scalar");
  for (Node& n : nodes_) n.grad = Tensor();
  grad_buf(loss_node.id)[0] = 1.0;
  for (int id = loss_node.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.backprop || n.grad.empty() || !n.needs_grad) continue;
    n.backprop(*this, n.grad);
  }
  ran_backward_ = true;
}

Tensor Tape::grad(Var v) const {
  check(ran_backward_, "grad: backward() has not run");
  const Node& n = nodes_[static_cast<size_t>(v.id)];
  if (n.grad.empty()) return Tensor(val(v.id).shape());
  return n.grad;
}

double finite_diff_check(const std::function<double(const std::vector<Tensor>&)>& f,
                         const std::vector<Tensor>& params,
                         const std::vector<Tensor>& analytic_grads, double step) {
  check(step > 0.0, "finite_diff_check: step must be positive");
  check(params.size() == analytic_grads.size(), "finite_diff_check: grads misaligned");
  std::vector<Tensor> work = params;
  double worst = 0.0;
  for (size_t p = 0; p < work.size(); ++p) {
    check(params[p].same_shape(analytic_grads[p]), "finite_diff_check: grad shape mismatch");
    for (std::int64_t i = 0; i < work[p].size(); ++i) {
      const double saved = work[p][i];
      work[p][i] = saved + step;
      const double up = f(work);
      work[p][i] = saved - step;
      const double down = f(work);
      work[p][i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double rel = std::abs(analytic_grads[p][i] - numeric) / (std::abs(numeric) + 1e-12);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace tslab
