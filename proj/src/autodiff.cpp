#include "gcrf/autodiff.hpp"

#include <algorithm>
#include <cassert>
#include <string>

namespace gcrf::ad {

namespace {

[[noreturn]] void shape_error(const char* op, Var a, Var b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) +
                              "x" + std::to_string(a.cols()) + " vs " +
                              std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

void same_tape(const char* op, Var a, Var b) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape())
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
}

// True when `b` is applied to every row of `a`.
bool broadcast_shape(const char* op, Var a, Var b) {
  same_tape(op, a, b);
  if (a.rows() == b.rows() && a.cols() == b.cols()) return false;
  if (b.rows() == 1 && b.cols() == a.cols()) return true;
  shape_error(op, a, b);
}

#ifndef NDEBUG
void assert_no_nan(const std::vector<double>& v) {
  for (double x : v) assert(!std::isnan(x) && "NaN produced on tape");
}
#else
void assert_no_nan(const std::vector<double>&) {}
#endif

}  // namespace

std::size_t Var::rows() const { return tape_->node(id_).rows; }
std::size_t Var::cols() const { return tape_->node(id_).cols; }
const std::vector<double>& Var::value() const { return tape_->node(id_).value; }
bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

double Var::scalar() const {
  if (rows() != 1 || cols() != 1) throw std::invalid_argument("Var::scalar: node is not 1x1");
  return value()[0];
}

Matrix Var::to_matrix() const { return Matrix(rows(), cols(), value()); }

Var Tape::leaf(const Matrix& value) {
  nodes_.push_back(Node{value.rows(), value.cols(), value.data(), {}, true, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(const Matrix& value) {
  return constant(value.rows(), value.cols(), value.data());
}

Var Tape::constant(std::size_t rows, std::size_t cols, std::vector<double> value) {
  if (value.size() != rows * cols) throw std::invalid_argument("constant: size/shape mismatch");
  nodes_.push_back(Node{rows, cols, std::move(value), {}, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::scalar_constant(double v) { return constant(1, 1, {v}); }

Var Tape::record(std::size_t rows, std::size_t cols, std::vector<double> value,
                 std::initializer_list<Var> parents, BackwardFn backward) {
  return record(rows, cols, std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(std::size_t rows, std::size_t cols, std::vector<double> value,
                 std::span<const Var> parents, BackwardFn backward) {
  assert_no_nan(value);
  bool needs = false;
  for (const Var& p : parents) needs = needs || nodes_[p.id()].requires_grad;
  nodes_.push_back(Node{rows, cols, std::move(value), {}, needs,
                        needs ? std::move(backward) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

void Tape::backprop(Var loss) {
  if (&loss.tape() != this) throw std::invalid_argument("backprop: loss is on another tape");
  if (loss.rows() != 1 || loss.cols() != 1)
    throw std::invalid_argument("backprop: loss must be a 1x1 scalar");
  for (auto& n : nodes_) {
    if (n.requires_grad)
      n.grad.assign(n.value.size(), 0.0);
    else
      n.grad.clear();
  }
  if (!nodes_[loss.id()].requires_grad) return;
  nodes_[loss.id()].grad[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    if (nodes_[i].backward) nodes_[i].backward(*this, i);
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return Matrix(n.rows, n.cols, 0.0);
  return Matrix(n.rows, n.cols, n.grad);
}

std::vector<double> Tape::grad_vector(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
  return n.grad;
}

namespace {

// Adjoint accumulation helpers that respect requires_grad.
std::vector<double>* grad_of(Tape& tape, std::size_t id) {
  auto& n = tape.node(id);
  return n.requires_grad ? &n.grad : nullptr;
}

}  // namespace

Var add(Var a, Var b) {
  const bool bc = broadcast_shape("add", a, b);
  const std::size_t C = a.cols();
  std::vector<double> out = a.value();
  const auto& bv = b.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += bv[bc ? k % C : k];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.rows(), C, std::move(out), {a, b}, [ia, ib, bc, C](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    if (auto* ga = grad_of(t, ia))
      for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += g[k];
    if (auto* gb = grad_of(t, ib))
      for (std::size_t k = 0; k < g.size(); ++k) (*gb)[bc ? k % C : k] += g[k];
  });
}

Var sub(Var a, Var b) {
  const bool bc = broadcast_shape("sub", a, b);
  const std::size_t C = a.cols();
  std::vector<double> out = a.value();
  const auto& bv = b.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] -= bv[bc ? k % C : k];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.rows(), C, std::move(out), {a, b}, [ia, ib, bc, C](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    if (auto* ga = grad_of(t, ia))
      for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += g[k];
    if (auto* gb = grad_of(t, ib))
      for (std::size_t k = 0; k < g.size(); ++k) (*gb)[bc ? k % C : k] -= g[k];
  });
}

Var mul(Var a, Var b) {
  const bool bc = broadcast_shape("mul", a, b);
  const std::size_t C = a.cols();
  std::vector<double> out = a.value();
  const auto& bv = b.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] *= bv[bc ? k % C : k];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.rows(), C, std::move(out), {a, b}, [ia, ib, bc, C](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& av = t.node(ia).value;
    const auto& bv = t.node(ib).value;
    if (auto* ga = grad_of(t, ia))
      for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += g[k] * bv[bc ? k % C : k];
    if (auto* gb = grad_of(t, ib))
      for (std::size_t k = 0; k < g.size(); ++k) (*gb)[bc ? k % C : k] += g[k] * av[k];
  });
}

Var matmul(Var a, Var b) {
  same_tape("matmul", a, b);
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  const std::size_t R = a.rows(), N = a.cols(), C = b.cols();
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<double> out(R * C, 0.0);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t k = 0; k < N; ++k) {
      const double x = av[r * N + k];
      for (std::size_t c = 0; c < C; ++c) out[r * C + c] += x * bv[k * C + c];
    }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(R, C, std::move(out), {a, b}, [ia, ib, R, N, C](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& av = t.node(ia).value;
    const auto& bv = t.node(ib).value;
    if (auto* ga = grad_of(t, ia))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t k = 0; k < N; ++k) {
          double s = 0.0;
          for (std::size_t c = 0; c < C; ++c) s += g[r * C + c] * bv[k * C + c];
          (*ga)[r * N + k] += s;
        }
    if (auto* gb = grad_of(t, ib))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t k = 0; k < N; ++k) {
          const double x = av[r * N + k];
          for (std::size_t c = 0; c < C; ++c) (*gb)[k * C + c] += x * g[r * C + c];
        }
  });
}

Var gather_row(Var a, std::size_t r) {
  if (r >= a.rows())
    throw std::invalid_argument("gather_row: row " + std::to_string(r) + " out of range for " +
                                std::to_string(a.rows()) + " rows");
  const std::size_t C = a.cols();
  const auto& av = a.value();
  std::vector<double> out(av.begin() + r * C, av.begin() + (r + 1) * C);
  const std::size_t ia = a.id();
  return a.tape().record(1, C, std::move(out), {a}, [ia, r, C](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    if (auto* ga = grad_of(t, ia))
      for (std::size_t c = 0; c < C; ++c) (*ga)[r * C + c] += g[c];
  });
}

Var pick(Var a, std::size_t r, std::size_t c) {
  if (r >= a.rows() || c >= a.cols()) throw std::invalid_argument("pick: index out of range");
  const std::size_t k = r * a.cols() + c;
  const std::size_t ia = a.id();
  return a.tape().record(1, 1, {a.value()[k]}, {a}, [ia, k](Tape& t, std::size_t self) {
    if (auto* ga = grad_of(t, ia)) (*ga)[k] += t.node(self).grad[0];
  });
}

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const std::size_t R = parts[0].rows();
  std::size_t C = 0;
  for (const Var& p : parts) {
    same_tape("concat", parts[0], p);
    if (p.rows() != R) shape_error("concat", parts[0], p);
    C += p.cols();
  }
  std::vector<double> out(R * C);
  std::vector<std::pair<std::size_t, std::size_t>> layout;  // (id, cols)
  std::size_t off = 0;
  for (const Var& p : parts) {
    const auto& v = p.value();
    for (std::size_t r = 0; r < R; ++r)
      std::copy(v.begin() + r * p.cols(), v.begin() + (r + 1) * p.cols(),
                out.begin() + r * C + off);
    layout.emplace_back(p.id(), p.cols());
    off += p.cols();
  }
  return parts[0].tape().record(R, C, std::move(out), parts, [layout, R, C](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    std::size_t off = 0;
    for (auto [id, pc] : layout) {
      if (auto* gp = grad_of(t, id))
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < pc; ++c) (*gp)[r * pc + c] += g[r * C + off + c];
      off += pc;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const std::size_t C = parts[0].cols();
  std::size_t R = 0;
  for (const Var& p : parts) {
    same_tape("concat", parts[0], p);
    if (p.cols() != C) shape_error("concat", parts[0], p);
    R += p.rows();
  }
  std::vector<double> out;
  out.reserve(R * C);
  std::vector<std::pair<std::size_t, std::size_t>> layout;  // (id, size)
  for (const Var& p : parts) {
    out.insert(out.end(), p.value().begin(), p.value().end());
    layout.emplace_back(p.id(), p.size());
  }
  return parts[0].tape().record(R, C, std::move(out), parts, [layout](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    std::size_t off = 0;
    for (auto [id, n] : layout) {
      if (auto* gp = grad_of(t, id))
        for (std::size_t k = 0; k < n; ++k) (*gp)[k] += g[off + k];
      off += n;
    }
  });
}

Var tanh(Var a) {
  std::vector<double> out = a.value();
  for (double& v : out) v = std::tanh(v);
  const std::size_t ia = a.id();
  return a.tape().record(a.rows(), a.cols(), std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const auto& n = t.node(self);
    if (auto* ga = grad_of(t, ia))
      for (std::size_t k = 0; k < n.grad.size(); ++k)
        (*ga)[k] += n.grad[k] * (1.0 - n.value[k] * n.value[k]);
  });
}

Var log(Var a) {
  std::vector<double> out = a.value();
  for (double& v : out) v = std::log(v);
  const std::size_t ia = a.id();
  return a.tape().record(a.rows(), a.cols(), std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& av = t.node(ia).value;
    if (auto* ga = grad_of(t, ia))
      for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += g[k] / av[k];
  });
}

Var exp(Var a) {
  std::vector<double> out = a.value();
  for (double& v : out) v = std::exp(v);
  const std::size_t ia = a.id();
  return a.tape().record(a.rows(), a.cols(), std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const auto& n = t.node(self);
    if (auto* ga = grad_of(t, ia))
      for (std::size_t k = 0; k < n.grad.size(); ++k) (*ga)[k] += n.grad[k] * n.value[k];
  });
}

Var softmax_with_temperature(Var a, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("softmax_with_temperature: tau must be positive");
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out(R * C);
  for (std::size_t r = 0; r < R; ++r) {
    const auto row = softmax(std::span<const double>(a.value().data() + r * C, C), tau);
    std::copy(row.begin(), row.end(), out.begin() + r * C);
  }
  const std::size_t ia = a.id();
  return a.tape().record(R, C, std::move(out), {a}, [ia, R, C, tau](Tape& t, std::size_t self) {
    const auto& n = t.node(self);
    auto* ga = grad_of(t, ia);
    if (!ga) return;
    for (std::size_t r = 0; r < R; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += n.grad[r * C + c] * n.value[r * C + c];
      for (std::size_t c = 0; c < C; ++c)
        (*ga)[r * C + c] += n.value[r * C + c] * (n.grad[r * C + c] - dot) / tau;
    }
  });
}

Var log_softmax_row(Var a) {
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out = a.value();
  for (std::size_t r = 0; r < R; ++r) {
    const double lse = logsumexp(std::span<const double>(out.data() + r * C, C));
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] -= lse;
  }
  const std::size_t ia = a.id();
  return a.tape().record(R, C, std::move(out), {a}, [ia, R, C](Tape& t, std::size_t self) {
    const auto& n = t.node(self);
    auto* ga = grad_of(t, ia);
    if (!ga) return;
    for (std::size_t r = 0; r < R; ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < C; ++c) gsum += n.grad[r * C + c];
      for (std::size_t c = 0; c < C; ++c)
        (*ga)[r * C + c] += n.grad[r * C + c] - std::exp(n.value[r * C + c]) * gsum;
    }
  });
}

Var logsumexp_row(Var a) {
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out(R);
  for (std::size_t r = 0; r < R; ++r)
    out[r] = logsumexp(std::span<const double>(a.value().data() + r * C, C));
  const std::size_t ia = a.id();
  return a.tape().record(R, 1, std::move(out), {a}, [ia, R, C](Tape& t, std::size_t self) {
    const auto& n = t.node(self);
    auto* ga = grad_of(t, ia);
    if (!ga) return;
    const auto& av = t.node(ia).value;
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c)
        (*ga)[r * C + c] += n.grad[r] * std::exp(av[r * C + c] - n.value[r]);
  });
}

Var max_row(Var a) {
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out(R);
  std::vector<std::size_t> arg(R);
  for (std::size_t r = 0; r < R; ++r) {
    arg[r] = argmax(std::span<const double>(a.value().data() + r * C, C));
    out[r] = a.value()[r * C + arg[r]];
  }
  const std::size_t ia = a.id();
  return a.tape().record(R, 1, std::move(out), {a}, [ia, arg, C](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    if (auto* ga = grad_of(t, ia))
      for (std::size_t r = 0; r < arg.size(); ++r) (*ga)[r * C + arg[r]] += g[r];
  });
}

Var transpose(Var a) {
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out(R * C);
  const auto& av = a.value();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[c * R + r] = av[r * C + c];
  const std::size_t ia = a.id();
  return a.tape().record(C, R, std::move(out), {a}, [ia, R, C](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    if (auto* ga = grad_of(t, ia))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) (*ga)[r * C + c] += g[c * R + r];
  });
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a.size())
    throw std::invalid_argument("reshape: cannot reshape " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " to " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  const std::size_t ia = a.id();
  return a.tape().record(rows, cols, a.value(), {a}, [ia](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    if (auto* ga = grad_of(t, ia))
      for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += g[k];
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(1, 1, {s}, {a}, [ia](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0];
    if (auto* ga = grad_of(t, ia))
      for (double& x : *ga) x += g;
  });
}

Var mean(Var a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty input");
  return scalar_scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var scalar_scale(Var a, double c) {
  std::vector<double> out = a.value();
  for (double& v : out) v *= c;
  const std::size_t ia = a.id();
  return a.tape().record(a.rows(), a.cols(), std::move(out), {a}, [ia, c](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    if (auto* ga = grad_of(t, ia))
      for (std::size_t k = 0; k < g.size(); ++k) (*ga)[k] += c * g[k];
  });
}

Var straight_through(Var hard, Var soft) {
  same_tape("straight_through", hard, soft);
  if (hard.rows() != soft.rows() || hard.cols() != soft.cols())
    shape_error("straight_through", hard, soft);
  const std::size_t is = soft.id();
  return soft.tape().record(hard.rows(), hard.cols(), hard.value(), {soft},
                            [is](Tape& t, std::size_t self) {
                              const auto& g = t.node(self).grad;
                              if (auto* gs = grad_of(t, is))
                                for (std::size_t k = 0; k < g.size(); ++k) (*gs)[k] += g[k];
                            });
}

std::vector<double> finite_diff(const std::function<double(std::span<const double>)>& loss,
                                std::span<const double> params, double step) {
  std::vector<double> x(params.begin(), params.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = loss(x);
    x[i] = orig - step;
    const double down = loss(x);
    x[i] = orig;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw std::invalid_argument("relative_error: size mismatch");
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / std::max(scale, floor);
}

}  // namespace gcrf::ad
