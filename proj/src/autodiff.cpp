#include "cast/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <regex>

#include "cast/error.hpp"

namespace cast {

// ---------------------------------------------------------------- ParamStore

Tensor& ParamStore::add(const std::string& name, Tensor value, bool trainable) {
  auto [it, inserted] = params_.insert_or_assign(name, Parameter{std::move(value), trainable});
  return it->second.value;
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  require(it != params_.end(), ErrorCode::InvalidParameter, "unknown parameter '" + name + "'");
  return it->second;
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  require(it != params_.end(), ErrorCode::InvalidParameter, "unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, p] : params_) out.push_back(name);
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p.value.size();
  return n;
}

void ParamStore::set_trainable_only(const std::string& pattern) {
  const std::regex re(pattern);
  for (auto& [name, p] : params_) p.trainable = std::regex_search(name, re);
}

void ParamStore::set_all_trainable(bool trainable) {
  for (auto& [name, p] : params_) p.trainable = trainable;
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.params_.size() != b.params_.size()) return false;
  auto ib = b.params_.begin();
  for (const auto& [name, p] : a.params_) {
    if (name != ib->first || !(p.value == ib->second.value)) return false;
    ++ib;
  }
  return true;
}

// ---------------------------------------------------------------------- Tape

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(const ParamStore& store, const std::string& name) {
  if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var(this, it->second);
  const Parameter& p = store.at(name);
  nodes_.push_back(Node{p.value, {}, {}, p.trainable});
  param_ids_[name] = nodes_.size() - 1;
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (const Var& v : inputs) {
    require(v.tape() == this, ErrorCode::ShapeMismatch, "operands recorded on different tapes");
    needs = needs || nodes_[v.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, needs});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  require(loss.tape() == this, ErrorCode::NotScalarLoss, "loss belongs to another tape");
  require(value(loss.id()).size() == 1, ErrorCode::NotScalarLoss,
          "loss has shape " + shape_string(value(loss.id()).shape()));
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[loss.id()].requires_grad) return;
  grad(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, i);
  }
}

Gradients Tape::backward(Var loss, const ParamStore& store) {
  backward(loss);
  Gradients out;
  for (const auto& [name, p] : store) {
    if (!p.trainable) continue;
    auto it = param_ids_.find(name);
    if (it != param_ids_.end() && !nodes_[it->second].grad.empty())
      out[name] = nodes_[it->second].grad;
    else
      out[name] = Tensor(p.value.shape(), 0.0);
  }
  return out;
}

const Tensor* Tape::grad_of(Var v) const {
  const Node& n = nodes_[v.id()];
  return n.grad.empty() ? nullptr : &n.grad;
}

// ------------------------------------------------------------------------ ops

namespace ad {
namespace {

void check_finite(const Var& v, const char* op) {
  require(v.value().all_finite(), ErrorCode::NonFiniteInput, std::string(op) + " received a non-finite input");
}

void check_same(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::ShapeMismatch,
          std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

void check_matrix(const Var& a, const char* op) {
  require(a.value().rank() == 2, ErrorCode::ShapeMismatch,
          std::string(op) + " expects a matrix, got " + shape_string(a.shape()));
}

Tape& tape_of(const Var& v) {
  require(v.valid(), ErrorCode::ShapeMismatch, "operation on an empty variable");
  return *v.tape();
}

void axpy(Tensor& dst, const Tensor& src, double s = 1.0) {
  double* d = dst.data();
  const double* x = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s * x[i];
}

}  // namespace

Var add(Var a, Var b) {
  check_same(a, b, "add");
  check_finite(a, "add");
  check_finite(b, "add");
  Tensor out = a.value();
  axpy(out, b.value());
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  return tape_of(a).record(std::move(out), in, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) axpy(t.grad(ia), g);
    if (t.requires_grad(ib)) axpy(t.grad(ib), g);
  });
}

Var sub(Var a, Var b) {
  check_same(a, b, "sub");
  check_finite(a, "sub");
  check_finite(b, "sub");
  Tensor out = a.value();
  axpy(out, b.value(), -1.0);
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  return tape_of(a).record(std::move(out), in, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) axpy(t.grad(ia), g);
    if (t.requires_grad(ib)) axpy(t.grad(ib), g, -1.0);
  });
}

Var mul(Var a, Var b) {
  check_same(a, b, "mul");
  check_finite(a, "mul");
  check_finite(b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  return tape_of(a).record(std::move(out), in, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var add_rowvec(Var a, Var v) {
  check_matrix(a, "add_rowvec");
  require(v.value().size() == a.cols(), ErrorCode::ShapeMismatch,
          "add_rowvec: vector " + shape_string(v.shape()) + " vs matrix " + shape_string(a.shape()));
  check_finite(a, "add_rowvec");
  check_finite(v, "add_rowvec");
  Tensor out = a.value();
  const std::size_t n = out.rows(), d = out.cols();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) += v.value()[c];
  const std::size_t ia = a.id(), iv = v.id();
  const Var in[] = {a, v};
  return tape_of(a).record(std::move(out), in, [ia, iv, n, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) axpy(t.grad(ia), g);
    if (t.requires_grad(iv)) {
      Tensor& gv = t.grad(iv);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gv[c] += g(r, c);
    }
  });
}

Var mul_rowvec(Var a, Var v) {
  check_matrix(a, "mul_rowvec");
  require(v.value().size() == a.cols(), ErrorCode::ShapeMismatch,
          "mul_rowvec: vector " + shape_string(v.shape()) + " vs matrix " + shape_string(a.shape()));
  check_finite(a, "mul_rowvec");
  check_finite(v, "mul_rowvec");
  Tensor out = a.value();
  const std::size_t n = out.rows(), d = out.cols();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) *= v.value()[c];
  const std::size_t ia = a.id(), iv = v.id();
  const Var in[] = {a, v};
  return tape_of(a).record(std::move(out), in, [ia, iv, n, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ia);
    const Tensor& vv = t.value(iv);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) ga(r, c) += g(r, c) * vv[c];
    }
    if (t.requires_grad(iv)) {
      Tensor& gv = t.grad(iv);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gv[c] += g(r, c) * av(r, c);
    }
  });
}

Var scale(Var a, double s) {
  check_finite(a, "scale");
  Tensor out = a.value();
  for (double& x : out.values()) x *= s;
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return tape_of(a).record(std::move(out), in,
                           [ia, s](Tape& t, std::size_t self) { axpy(t.grad(ia), t.grad(self), s); });
}

Var scale_by(Var a, Var s) {
  require(s.value().size() == 1, ErrorCode::ShapeMismatch, "scale_by expects a scalar factor");
  check_finite(a, "scale_by");
  check_finite(s, "scale_by");
  const double sv = s.value()[0];
  Tensor out = a.value();
  for (double& x : out.values()) x *= sv;
  const std::size_t ia = a.id(), is = s.id();
  const Var in[] = {a, s};
  return tape_of(a).record(std::move(out), in, [ia, is](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) axpy(t.grad(ia), g, t.value(is)[0]);
    if (t.requires_grad(is)) {
      const Tensor& av = t.value(ia);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      t.grad(is)[0] += acc;
    }
  });
}

Var matmul(Var a, Var b) {
  check_matrix(a, "matmul");
  check_matrix(b, "matmul");
  require(a.shape()[1] == b.shape()[0], ErrorCode::ShapeMismatch,
          "matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  check_finite(a, "matmul");
  check_finite(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out = Tensor::matrix(m, n);
  kernel::matmul(a.value().data(), b.value().data(), out.data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  return tape_of(a).record(std::move(out), in, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) kernel::matmul_nt(g.data(), t.value(ib).data(), t.grad(ia).data(), m, n, k, true);
    if (t.requires_grad(ib)) kernel::matmul_tn(t.value(ia).data(), g.data(), t.grad(ib).data(), k, m, n, true);
  });
}

Var matmul_nt(Var a, Var b) {
  check_matrix(a, "matmul_nt");
  check_matrix(b, "matmul_nt");
  require(a.shape()[1] == b.shape()[1], ErrorCode::ShapeMismatch,
          "matmul_nt " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  check_finite(a, "matmul_nt");
  check_finite(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  Tensor out = Tensor::matrix(m, n);
  kernel::matmul_nt(a.value().data(), b.value().data(), out.data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  return tape_of(a).record(std::move(out), in, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    // out = A B^T: dA = G B, dB = G^T A
    if (t.requires_grad(ia)) kernel::matmul(g.data(), t.value(ib).data(), t.grad(ia).data(), m, n, k, true);
    if (t.requires_grad(ib)) kernel::matmul_tn(g.data(), t.value(ia).data(), t.grad(ib).data(), n, m, k, true);
  });
}

Var transpose(Var a) {
  check_matrix(a, "transpose");
  check_finite(a, "transpose");
  Tensor out = cast::transpose(a.value());
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return tape_of(a).record(std::move(out), in,
                           [ia](Tape& t, std::size_t self) { axpy(t.grad(ia), cast::transpose(t.grad(self))); });
}

Var softmax_rows(Var a) {
  check_matrix(a, "softmax_rows");
  check_finite(a, "softmax_rows");
  Tensor out = a.value();
  const std::size_t n = out.rows(), d = out.cols();
  for (std::size_t r = 0; r < n; ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double& x : row) s += (x = std::exp(x - mx));
    for (double& x : row) x /= s;
  }
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return tape_of(a).record(std::move(out), in, [ia, n, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < d; ++c) ga(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

Var log_softmax_rows(Var a) {
  check_matrix(a, "log_softmax_rows");
  check_finite(a, "log_softmax_rows");
  Tensor out = a.value();
  const std::size_t n = out.rows(), d = out.cols();
  for (std::size_t r = 0; r < n; ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double x : row) s += std::exp(x - mx);
    const double lse = mx + std::log(s);
    for (double& x : row) x -= lse;
  }
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return tape_of(a).record(std::move(out), in, [ia, n, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t r = 0; r < n; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < d; ++c) gs += g(r, c);
      for (std::size_t c = 0; c < d; ++c) ga(r, c) += g(r, c) - std::exp(y(r, c)) * gs;
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  check_matrix(x, "layer_norm");
  const std::size_t n = x.rows(), d = x.cols();
  require(gamma.value().size() == d && beta.value().size() == d, ErrorCode::ShapeMismatch,
          "layer_norm affine terms must have " + std::to_string(d) + " entries");
  check_finite(x, "layer_norm");
  check_finite(gamma, "layer_norm");
  check_finite(beta, "layer_norm");
  Tensor xhat = Tensor::matrix(n, d);
  std::vector<double> inv_std(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = x.value().row(r);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    if (var < 1e-12) continue;  // constant row -> normalised output 0
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) xhat(r, c) = (row[c] - mu) * inv_std[r];
  }
  Tensor out = xhat;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) = xhat(r, c) * gamma.value()[c] + beta.value()[c];
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  const Var in[] = {x, gamma, beta};
  return tape_of(x).record(
      std::move(out), in,
      [ix, ig, ib, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& gam = t.value(ig);
        if (t.requires_grad(ig)) {
          Tensor& gg = t.grad(ig);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) gg[c] += g(r, c) * xhat(r, c);
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad(ib);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) gb[c] += g(r, c);
        }
        if (t.requires_grad(ix)) {
          Tensor& gx = t.grad(ix);
          for (std::size_t r = 0; r < n; ++r) {
            if (inv_std[r] == 0.0) continue;
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dh = g(r, c) * gam[c];
              m1 += dh;
              m2 += dh * xhat(r, c);
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c)
              gx(r, c) += inv_std[r] * (g(r, c) * gam[c] - m1 - xhat(r, c) * m2);
          }
        }
      });
}

Var gelu(Var x) {
  check_finite(x, "gelu");
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a3 = 0.044715;
  Tensor out = x.value();
  for (double& v : out.values()) v = 0.5 * v * (1.0 + std::tanh(k * (v + a3 * v * v * v)));
  const std::size_t ix = x.id();
  const Var in[] = {x};
  return tape_of(x).record(std::move(out), in, [ix](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double th = std::tanh(k * (v + a3 * v * v * v));
      const double dudx = k * (1.0 + 3.0 * a3 * v * v);
      gx[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dudx);
    }
  });
}

Var sum_rows(Var a) {
  check_matrix(a, "sum_rows");
  check_finite(a, "sum_rows");
  const std::size_t n = a.rows(), d = a.cols();
  Tensor out = Tensor::matrix(1, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[c] += a.value()(r, c);
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return tape_of(a).record(std::move(out), in, [ia, n, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) ga(r, c) += g[c];
  });
}

Var mean_rows(Var a) { return scale(sum_rows(a), 1.0 / static_cast<double>(a.rows())); }

Var sum(Var a) {
  check_finite(a, "sum");
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return tape_of(a).record(Tensor::scalar(s), in, [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& v : t.grad(ia).values()) v += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), ErrorCode::ShapeMismatch, "concat_rows of nothing");
  const std::size_t d = parts[0].cols();
  std::size_t n = 0;
  for (const Var& p : parts) {
    check_matrix(p, "concat_rows");
    require(p.cols() == d, ErrorCode::ShapeMismatch, "concat_rows column mismatch");
    check_finite(p, "concat_rows");
    n += p.rows();
  }
  Tensor out = Tensor::matrix(n, d);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.data() + off * d);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.rows();
  }
  return tape_of(parts[0]).record(std::move(out), parts, [ids, offsets, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      Tensor& gp = t.grad(ids[k]);
      const double* src = g.data() + offsets[k] * d;
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), ErrorCode::ShapeMismatch, "concat_cols of nothing");
  const std::size_t n = parts[0].rows();
  std::size_t d = 0;
  for (const Var& p : parts) {
    check_matrix(p, "concat_cols");
    require(p.rows() == n, ErrorCode::ShapeMismatch, "concat_cols row mismatch");
    check_finite(p, "concat_cols");
    d += p.cols();
  }
  Tensor out = Tensor::matrix(n, d);
  std::vector<std::size_t> ids, offsets, widths;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < w; ++c) out(r, off + c) = p.value()(r, c);
    ids.push_back(p.id());
    offsets.push_back(off);
    widths.push_back(w);
    off += w;
  }
  return tape_of(parts[0]).record(std::move(out), parts, [ids, offsets, widths, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      Tensor& gp = t.grad(ids[k]);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < widths[k]; ++c) gp(r, c) += g(r, offsets[k] + c);
    }
  });
}

Var gather_rows(Var a, std::span<const std::size_t> index) {
  check_matrix(a, "gather_rows");
  check_finite(a, "gather_rows");
  const std::size_t d = a.cols();
  Tensor out = Tensor::matrix(index.size(), d);
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < a.rows(), ErrorCode::ShapeMismatch, "gather_rows index out of range");
    std::copy(a.value().row(index[i]).begin(), a.value().row(index[i]).end(), out.row(i).begin());
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> idx(index.begin(), index.end());
  const Var in[] = {a};
  return tape_of(a).record(std::move(out), in, [ia, idx = std::move(idx), d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) ga(idx[i], c) += g(i, c);
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  check_matrix(a, "slice_rows");
  require(begin <= end && end <= a.rows(), ErrorCode::ShapeMismatch, "slice_rows out of range");
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return gather_rows(a, idx);
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  check_matrix(a, "slice_cols");
  require(begin <= end && end <= a.cols(), ErrorCode::ShapeMismatch, "slice_cols out of range");
  check_finite(a, "slice_cols");
  const std::size_t n = a.rows(), d = a.cols(), w = end - begin;
  Tensor out = Tensor::matrix(n, w);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < w; ++c) out(r, c) = a.value()(r, begin + c);
  const std::size_t ia = a.id();
  const Var in[] = {a};
  (void)d;
  return tape_of(a).record(std::move(out), in, [ia, n, w, begin](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < w; ++c) ga(r, begin + c) += g(r, c);
  });
}

Var segment_mean(Var a, std::span<const std::size_t> labels, std::size_t n_segments) {
  check_matrix(a, "segment_mean");
  require(labels.size() == a.rows(), ErrorCode::ShapeMismatch, "segment_mean: one label per row required");
  check_finite(a, "segment_mean");
  const std::size_t d = a.cols();
  std::vector<double> count(n_segments, 0.0);
  Tensor out = Tensor::matrix(n_segments, d);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    require(labels[r] < n_segments, ErrorCode::ShapeMismatch, "segment_mean: label out of range");
    count[labels[r]] += 1.0;
    for (std::size_t c = 0; c < d; ++c) out(labels[r], c) += a.value()(r, c);
  }
  for (std::size_t s = 0; s < n_segments; ++s) {
    require(count[s] > 0.0, ErrorCode::EmptySegmentAtCellResolution,
            "segment " + std::to_string(s) + " has no rows");
    for (std::size_t c = 0; c < d; ++c) out(s, c) /= count[s];
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const Var in[] = {a};
  return tape_of(a).record(std::move(out), in,
                           [ia, lab = std::move(lab), count = std::move(count), d](Tape& t, std::size_t self) {
                             const Tensor& g = t.grad(self);
                             Tensor& ga = t.grad(ia);
                             for (std::size_t r = 0; r < lab.size(); ++r)
                               for (std::size_t c = 0; c < d; ++c) ga(r, c) += g(lab[r], c) / count[lab[r]];
                           });
}

Var div_rows(Var a, Var s, double floor) {
  check_matrix(a, "div_rows");
  require(s.value().size() == a.rows(), ErrorCode::ShapeMismatch, "div_rows: one divisor per row required");
  check_finite(a, "div_rows");
  check_finite(s, "div_rows");
  const std::size_t n = a.rows(), d = a.cols();
  Tensor out = a.value();
  for (std::size_t r = 0; r < n; ++r) {
    const double den = std::max(s.value()[r], floor);
    for (std::size_t c = 0; c < d; ++c) out(r, c) /= den;
  }
  const std::size_t ia = a.id(), is = s.id();
  const Var in[] = {a, s};
  return tape_of(a).record(std::move(out), in, [ia, is, n, d, floor](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& sv = t.value(is);
    const Tensor& av = t.value(ia);
    for (std::size_t r = 0; r < n; ++r) {
      const bool clamped = sv[r] < floor;
      const double den = clamped ? floor : sv[r];
      if (t.requires_grad(ia)) {
        Tensor& ga = t.grad(ia);
        for (std::size_t c = 0; c < d; ++c) ga(r, c) += g(r, c) / den;
      }
      if (t.requires_grad(is) && !clamped) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += g(r, c) * av(r, c);
        t.grad(is)[r] -= acc / (den * den);
      }
    }
  });
}

Var normalize_rows(Var a, double eps) {
  check_matrix(a, "normalize_rows");
  check_finite(a, "normalize_rows");
  const std::size_t n = a.rows(), d = a.cols();
  Tensor out = a.value();
  std::vector<double> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (double v : out.row(r)) s += v * v;
    norms[r] = std::sqrt(s);
    for (double& v : out.row(r)) v /= norms[r] + eps;
  }
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return tape_of(a).record(std::move(out), in,
                           [ia, n, d, eps, norms = std::move(norms)](Tape& t, std::size_t self) {
                             const Tensor& g = t.grad(self);
                             const Tensor& av = t.value(ia);
                             Tensor& ga = t.grad(ia);
                             for (std::size_t r = 0; r < n; ++r) {
                               const double den = norms[r] + eps;
                               double dot = 0.0;
                               for (std::size_t c = 0; c < d; ++c) dot += g(r, c) * av(r, c);
                               const double k = norms[r] > 0.0 ? dot / (den * den * norms[r]) : 0.0;
                               for (std::size_t c = 0; c < d; ++c) ga(r, c) += g(r, c) / den - av(r, c) * k;
                             }
                           });
}

Var conv2d(Var x, Var weight, Var bias, std::size_t h, std::size_t w, std::size_t kernel, std::size_t stride,
           std::size_t pad) {
  check_matrix(x, "conv2d");
  check_matrix(weight, "conv2d");
  require(x.rows() == h * w, ErrorCode::ShapeMismatch, "conv2d: input rows must equal h*w");
  const std::size_t cin = x.cols();
  const std::size_t cout = weight.rows();
  const std::size_t patch = kernel * kernel * cin;
  require(weight.cols() == patch, ErrorCode::ShapeMismatch, "conv2d: weight must be [c_out x k*k*c_in]");
  require(bias.value().size() == cout, ErrorCode::ShapeMismatch, "conv2d: bias must have c_out entries");
  require(h + 2 * pad >= kernel && w + 2 * pad >= kernel && stride > 0, ErrorCode::ShapeMismatch,
          "conv2d: kernel larger than padded input");
  check_finite(x, "conv2d");
  check_finite(weight, "conv2d");
  check_finite(bias, "conv2d");
  const std::size_t ho = (h + 2 * pad - kernel) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kernel) / stride + 1;
  // im2col; -1 marks padding.
  std::vector<std::ptrdiff_t> src(ho * wo * kernel * kernel, -1);
  Tensor col = Tensor::matrix(ho * wo, patch);
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox)
      for (std::size_t ky = 0; ky < kernel; ++ky)
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const std::size_t o = oy * wo + ox;
          const std::size_t slot = ky * kernel + kx;
          const std::size_t pix = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
          src[o * kernel * kernel + slot] = static_cast<std::ptrdiff_t>(pix);
          std::copy_n(x.value().data() + pix * cin, cin, col.data() + o * patch + slot * cin);
        }
  Tensor out = Tensor::matrix(ho * wo, cout);
  kernel::matmul_nt(col.data(), weight.value().data(), out.data(), ho * wo, patch, cout);
  for (std::size_t o = 0; o < ho * wo; ++o)
    for (std::size_t c = 0; c < cout; ++c) out(o, c) += bias.value()[c];
  const std::size_t ixd = x.id(), iw = weight.id(), ib = bias.id();
  const Var in[] = {x, weight, bias};
  const std::size_t taps = kernel * kernel;
  return tape_of(x).record(
      std::move(out), in,
      [ixd, iw, ib, cin, cout, patch, ho, wo, taps, col = std::move(col), src = std::move(src)](Tape& t,
                                                                                                 std::size_t self) {
        const Tensor& g = t.grad(self);
        const std::size_t n = ho * wo;
        if (t.requires_grad(iw)) kernel::matmul_tn(g.data(), col.data(), t.grad(iw).data(), cout, n, patch, true);
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad(ib);
          for (std::size_t o = 0; o < n; ++o)
            for (std::size_t c = 0; c < cout; ++c) gb[c] += g(o, c);
        }
        if (t.requires_grad(ixd)) {
          Tensor dcol = Tensor::matrix(n, patch);
          kernel::matmul(g.data(), t.value(iw).data(), dcol.data(), n, cout, patch);
          Tensor& gx = t.grad(ixd);
          for (std::size_t o = 0; o < n; ++o)
            for (std::size_t slot = 0; slot < taps; ++slot) {
              const std::ptrdiff_t pix = src[o * taps + slot];
              if (pix < 0) continue;
              const double* d = dcol.data() + o * patch + slot * cin;
              double* dst = gx.data() + static_cast<std::size_t>(pix) * cin;
              for (std::size_t c = 0; c < cin; ++c) dst[c] += d[c];
            }
        }
      });
}

Var pick(Var a, std::span<const std::size_t> index) {
  check_matrix(a, "pick");
  require(index.size() == a.rows(), ErrorCode::ShapeMismatch, "pick: one index per row required");
  check_finite(a, "pick");
  const std::size_t n = a.rows();
  Tensor out = Tensor::matrix(n, 1);
  for (std::size_t r = 0; r < n; ++r) {
    require(index[r] < a.cols(), ErrorCode::ShapeMismatch, "pick index out of range");
    out[r] = a.value()(r, index[r]);
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> idx(index.begin(), index.end());
  const Var in[] = {a};
  return tape_of(a).record(std::move(out), in, [ia, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t r = 0; r < idx.size(); ++r) ga(r, idx[r]) += g[r];
  });
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  return scale(mean(pick(log_softmax_rows(logits), labels)), -1.0);
}

Var softmax_entropy(Var logits) {
  Var p = softmax_rows(logits);
  Var lp = log_softmax_rows(logits);
  return scale(sum(mul(p, lp)), -1.0 / static_cast<double>(logits.rows()));
}

}  // namespace ad
}  // namespace cast
