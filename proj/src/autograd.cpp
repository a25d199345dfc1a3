#include "metaforge/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace metaforge::ag {

namespace detail {

struct Buffer {
  Shape shape;
  std::vector<double> data;
};

struct Input {
  std::shared_ptr<const Buffer> value;
  std::int64_t node = -1;
};

struct Attr {
  double scalar = 0.0;
  std::size_t count = 0;
  std::shared_ptr<const std::vector<std::size_t>> indices;
};

struct Node {
  Op op = Op::leaf;
  std::array<Input, 2> inputs{};
  std::size_t arity = 0;
  std::shared_ptr<const Buffer> out;
  Attr attr;
  int generation = 1;
};

struct TapeImpl : std::enable_shared_from_this<TapeImpl> {
  std::vector<Node> nodes;
  int generation = 1;
};

namespace {
thread_local TapeImpl* active_tape = nullptr;
}  // namespace

struct Access {
  static Tensor constant(std::shared_ptr<const Buffer> buf) {
    Tensor t;
    t.buf_ = std::move(buf);
    return t;
  }

  static Tensor tracked(std::shared_ptr<const Buffer> buf, std::shared_ptr<TapeImpl> tape,
                        std::int64_t node) {
    Tensor t;
    t.buf_ = std::move(buf);
    t.tape_ = std::move(tape);
    t.node_ = node;
    return t;
  }

  static const std::shared_ptr<const Buffer>& buffer(const Tensor& t) { return t.buf_; }
  static const std::shared_ptr<TapeImpl>& tape(const Tensor& t) { return t.tape_; }
  static std::int64_t node(const Tensor& t) { return t.node_; }

  static Tensor leaf(const std::shared_ptr<TapeImpl>& tape, const Tensor& value) {
    Node n;
    n.op = Op::leaf;
    n.out = value.buf_;
    n.generation = tape->generation;
    tape->nodes.push_back(std::move(n));
    return tracked(value.buf_, tape, static_cast<std::int64_t>(tape->nodes.size() - 1));
  }

  // Wraps a freshly computed value, recording it when any operand is tracked.
  static Tensor record(Op op, std::initializer_list<const Tensor*> operands, Attr attr,
                       Buffer&& value) {
    auto out = std::make_shared<const Buffer>(std::move(value));
    std::shared_ptr<TapeImpl> tape;
    for (const Tensor* t : operands) {
      if (!t->tape_) continue;
      if (!tape) {
        tape = t->tape_;
      } else if (tape != t->tape_) {
        throw GradError(std::string(op_name(op)) + ": operands live on different tapes");
      }
    }
    if (!tape) return constant(std::move(out));

    Node n;
    n.op = op;
    n.out = out;
    n.attr = std::move(attr);
    n.generation = tape->generation;
    for (const Tensor* t : operands) {
      n.inputs[n.arity++] = Input{t->buf_, t->tape_ ? t->node_ : -1};
    }
    tape->nodes.push_back(std::move(n));
    return tracked(std::move(out), tape, static_cast<std::int64_t>(tape->nodes.size() - 1));
  }
};

}  // namespace detail

using detail::Access;
using detail::Attr;
using detail::Buffer;

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::neg: return "neg";
    case Op::scale: return "scale";
    case Op::matmul: return "matmul";
    case Op::transpose: return "transpose";
    case Op::tanh: return "tanh";
    case Op::relu: return "relu";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::sqrt: return "sqrt";
    case Op::square: return "square";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::broadcast: return "broadcast";
    case Op::sum_leading: return "sum_leading";
    case Op::reshape: return "reshape";
    case Op::index_rows: return "index_rows";
    case Op::scatter_rows: return "scatter_rows";
  }
  return "unknown";
}

UnusedInputError::UnusedInputError(std::size_t index)
    : GradError("backward: wrt tensor #" + std::to_string(index) +
                " does not influence the output"),
      index_(index) {}

// ---------------------------------------------------------------------------
// Tensor

namespace {

const std::shared_ptr<const Buffer>& zero_scalar_buffer() {
  static const auto buf = std::make_shared<const Buffer>(Buffer{{}, {0.0}});
  return buf;
}

}  // namespace

Tensor::Tensor() : buf_(zero_scalar_buffer()) {}

Tensor::Tensor(Shape shape, std::vector<double> data) {
  if (ag::numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " needs " +
                     std::to_string(ag::numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  buf_ = std::make_shared<const Buffer>(Buffer{std::move(shape), std::move(data)});
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }
Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = ag::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

const Shape& Tensor::shape() const { return buf_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape()));
  }
  return shape()[axis];
}

std::size_t Tensor::numel() const { return buf_->data.size(); }
std::span<const double> Tensor::data() const { return buf_->data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  }
  return buf_->data[0];
}

Tensor Tensor::detach() const { return Access::constant(buf_); }

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : impl_(std::make_shared<detail::TapeImpl>()) {}

Tensor Tape::leaf(const Tensor& value) const { return Access::leaf(impl_, value); }
std::size_t Tape::size() const { return impl_->nodes.size(); }
int Tape::generation() const { return impl_->generation; }

Tape::Scope::Scope(const Tape& tape) : previous_(detail::active_tape) {
  detail::active_tape = tape.impl_.get();
}

Tape::Scope::~Scope() { detail::active_tape = previous_; }

Tensor tensor_of(Shape shape, std::vector<double> data, bool requires_grad) {
  Tensor t(std::move(shape), std::move(data));
  if (!requires_grad) return t;
  if (detail::active_tape == nullptr) {
    throw GradError("tensor_of: requires_grad=true but no tape is active");
  }
  return Access::leaf(detail::active_tape->shared_from_this(), t);
}

// ---------------------------------------------------------------------------
// Forward kernels

namespace {

void require_same_shape(Op op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  }
}

template <typename F>
Tensor binary(Op op, const Tensor& a, const Tensor& b, F f) {
  require_same_shape(op, a, b);
  const auto x = a.data();
  const auto y = b.data();
  Buffer out{a.shape(), std::vector<double>(x.size())};
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f(x[i], y[i]);
  return Access::record(op, {&a, &b}, {}, std::move(out));
}

template <typename F>
Tensor unary(Op op, const Tensor& a, F f, Attr attr = {}) {
  const auto x = a.data();
  Buffer out{a.shape(), std::vector<double>(x.size())};
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f(x[i]);
  return Access::record(op, {&a}, std::move(attr), std::move(out));
}

std::size_t row_width(const Tensor& a) { return a.dim(0) == 0 ? 0 : a.numel() / a.dim(0); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(Op::add, a, b, [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(Op::sub, a, b, [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(Op::mul, a, b, [](double x, double y) { return x * y; });
}
Tensor div(const Tensor& a, const Tensor& b) {
  return binary(Op::div, a, b, [](double x, double y) { return x / y; });
}
Tensor neg(const Tensor& a) {
  return unary(Op::neg, a, [](double x) { return -x; });
}
Tensor scale(const Tensor& a, double factor) {
  Attr attr;
  attr.scalar = factor;
  return unary(Op::scale, a, [factor](double x) { return x * factor; }, std::move(attr));
}
Tensor tanh(const Tensor& a) {
  return unary(Op::tanh, a, [](double x) { return std::tanh(x); });
}
Tensor relu(const Tensor& a) {
  return unary(Op::relu, a, [](double x) { return x > 0.0 ? x : 0.0; });
}
Tensor exp(const Tensor& a) {
  return unary(Op::exp, a, [](double x) { return std::exp(x); });
}
Tensor log(const Tensor& a) {
  return unary(Op::log, a, [](double x) { return std::log(x); });
}
Tensor sqrt(const Tensor& a) {
  return unary(Op::sqrt, a, [](double x) { return std::sqrt(x); });
}
Tensor square(const Tensor& a) {
  return unary(Op::square, a, [](double x) { return x * x; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto x = a.data();
  const auto y = b.data();
  Buffer out{{m, n}, std::vector<double>(m * n, 0.0)};
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = x[i * k + p];
      const double* brow = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return Access::record(Op::matmul, {&a, &b}, {}, std::move(out));
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) {
    throw ShapeError("transpose: expected a matrix, got shape " + to_string(a.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto x = a.data();
  Buffer out{{n, m}, std::vector<double>(m * n)};
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = x[i * n + j];
  return Access::record(Op::transpose, {&a}, {}, std::move(out));
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Access::record(Op::sum, {&a}, {}, Buffer{{}, {s}});
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Access::record(Op::mean, {&a}, {}, Buffer{{}, {s / static_cast<double>(a.numel())}});
}

Tensor broadcast(const Tensor& a, std::size_t n) {
  Shape shape{n};
  shape.insert(shape.end(), a.shape().begin(), a.shape().end());
  const auto x = a.data();
  Buffer out{std::move(shape), {}};
  out.data.reserve(n * x.size());
  for (std::size_t r = 0; r < n; ++r) out.data.insert(out.data.end(), x.begin(), x.end());
  Attr attr;
  attr.count = n;
  return Access::record(Op::broadcast, {&a}, std::move(attr), std::move(out));
}

Tensor sum_leading(const Tensor& a) {
  if (a.rank() == 0) throw ShapeError("sum_leading: rank-0 tensor has no leading axis");
  const std::size_t n = a.dim(0);
  const std::size_t w = row_width(a);
  Shape rest(a.shape().begin() + 1, a.shape().end());
  Buffer out{rest, std::vector<double>(numel(rest), 0.0)};
  const auto x = a.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < w; ++j) out.data[j] += x[r * w + j];
  return Access::record(Op::sum_leading, {&a}, {}, std::move(out));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  const auto x = a.data();
  return Access::record(Op::reshape, {&a}, {},
                        Buffer{std::move(shape), std::vector<double>(x.begin(), x.end())});
}

Tensor index_rows(const Tensor& a, std::vector<std::size_t> indices) {
  if (a.rank() == 0) throw ShapeError("index_rows: rank-0 tensor has no rows");
  const std::size_t rows = a.dim(0);
  const std::size_t w = row_width(a);
  Shape shape = a.shape();
  shape[0] = indices.size();
  Buffer out{std::move(shape), std::vector<double>(indices.size() * w)};
  const auto x = a.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw ShapeError("index_rows: row " + std::to_string(indices[i]) +
                       " out of range for shape " + to_string(a.shape()));
    }
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(indices[i] * w), w,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * w));
  }
  Attr attr;
  attr.count = rows;
  attr.indices = std::make_shared<const std::vector<std::size_t>>(std::move(indices));
  return Access::record(Op::index_rows, {&a}, std::move(attr), std::move(out));
}

Tensor scatter_rows(const Tensor& a, std::vector<std::size_t> indices, std::size_t rows) {
  if (a.rank() == 0 || a.dim(0) != indices.size()) {
    throw ShapeError("scatter_rows: " + std::to_string(indices.size()) +
                     " indices for shape " + to_string(a.shape()));
  }
  const std::size_t w = row_width(a);
  Shape shape = a.shape();
  shape[0] = rows;
  Buffer out{std::move(shape), std::vector<double>(rows * w, 0.0)};
  const auto x = a.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw ShapeError("scatter_rows: destination row " + std::to_string(indices[i]) +
                       " out of range for " + std::to_string(rows) + " rows");
    }
    for (std::size_t j = 0; j < w; ++j) out.data[indices[i] * w + j] += x[i * w + j];
  }
  Attr attr;
  attr.count = rows;
  attr.indices = std::make_shared<const std::vector<std::size_t>>(std::move(indices));
  return Access::record(Op::scatter_rows, {&a}, std::move(attr), std::move(out));
}

Tensor apply(Op op, std::span<const Tensor> args) {
  auto need = [&](std::size_t n) {
    if (args.size() != n) {
      throw ShapeError(std::string(op_name(op)) + ": expected " + std::to_string(n) +
                       " operands, got " + std::to_string(args.size()));
    }
  };
  switch (op) {
    case Op::add: need(2); return add(args[0], args[1]);
    case Op::sub: need(2); return sub(args[0], args[1]);
    case Op::mul: need(2); return mul(args[0], args[1]);
    case Op::div: need(2); return div(args[0], args[1]);
    case Op::matmul: need(2); return matmul(args[0], args[1]);
    case Op::neg: need(1); return neg(args[0]);
    case Op::transpose: need(1); return transpose(args[0]);
    case Op::tanh: need(1); return tanh(args[0]);
    case Op::relu: need(1); return relu(args[0]);
    case Op::exp: need(1); return exp(args[0]);
    case Op::log: need(1); return log(args[0]);
    case Op::sqrt: need(1); return sqrt(args[0]);
    case Op::square: need(1); return square(args[0]);
    case Op::sum: need(1); return sum(args[0]);
    case Op::mean: need(1); return mean(args[0]);
    default:
      throw ShapeError(std::string(op_name(op)) + ": needs attributes, call it directly");
  }
}

// ---------------------------------------------------------------------------
// Backward

namespace {

// Gradient of a node's output w.r.t. its operand `which`, given the upstream
// gradient. Written with public ops so it records when operands are tracked.
Tensor local_grad(const detail::Node& node, std::size_t which, const Tensor& g,
                  const Tensor& out, const Tensor* in) {
  const Tensor& a = in[0];
  switch (node.op) {
    case Op::add: return g;
    case Op::sub: return which == 0 ? g : neg(g);
    case Op::mul: return mul(g, in[1 - which]);
    case Op::div:
      return which == 0 ? div(g, in[1]) : neg(div(mul(g, out), in[1]));
    case Op::neg: return neg(g);
    case Op::scale: return scale(g, node.attr.scalar);
    case Op::matmul:
      return which == 0 ? matmul(g, transpose(in[1])) : matmul(transpose(in[0]), g);
    case Op::transpose: return transpose(g);
    case Op::tanh: return mul(g, sub(Tensor::ones(out.shape()), square(out)));
    case Op::relu: {
      std::vector<double> mask(a.numel());
      const auto x = a.data();
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = x[i] > 0.0 ? 1.0 : 0.0;
      return mul(g, Tensor(a.shape(), std::move(mask)));
    }
    case Op::exp: return mul(g, out);
    case Op::log: return div(g, a);
    case Op::sqrt: return div(scale(g, 0.5), out);
    case Op::square: return scale(mul(g, a), 2.0);
    case Op::sum: return reshape(broadcast(reshape(g, {}), a.numel()), a.shape());
    case Op::mean:
      return scale(reshape(broadcast(reshape(g, {}), a.numel()), a.shape()),
                   1.0 / static_cast<double>(a.numel()));
    case Op::broadcast: return sum_leading(g);
    case Op::sum_leading: return broadcast(g, a.dim(0));
    case Op::reshape: return reshape(g, a.shape());
    case Op::index_rows: return scatter_rows(g, *node.attr.indices, node.attr.count);
    case Op::scatter_rows: return index_rows(g, *node.attr.indices);
    case Op::leaf: break;
  }
  throw GradError("backward: no rule for " + std::string(op_name(node.op)));
}

}  // namespace

std::vector<Tensor> backward(const Tensor& output, std::span<const Tensor> wrt,
                             GradOptions options) {
  if (output.numel() != 1) {
    throw GradError("backward: output must be a scalar, got shape " + to_string(output.shape()));
  }
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    if (!wrt[i].requires_grad()) {
      throw GradError("backward: wrt tensor #" + std::to_string(i) + " does not require grad");
    }
  }

  const auto& tape = Access::tape(output);
  std::vector<Tensor> result(wrt.size());
  std::vector<bool> found(wrt.size(), false);

  if (tape) {
    const std::int64_t hi = Access::node(output);
    std::int64_t lo = hi + 1;
    for (const Tensor& w : wrt) {
      if (Access::tape(w) == tape && Access::node(w) <= hi) lo = std::min(lo, Access::node(w));
    }

    if (lo <= hi) {
      const auto span_len = static_cast<std::size_t>(hi - lo + 1);
      std::vector<char> is_target(span_len, 0);
      for (const Tensor& w : wrt) {
        if (Access::tape(w) == tape && Access::node(w) >= lo && Access::node(w) <= hi)
          is_target[static_cast<std::size_t>(Access::node(w) - lo)] = 1;
      }
      // needed[i]: node lo+i lies on a path from some wrt tensor.
      std::vector<char> needed(is_target);
      for (std::int64_t i = lo; i <= hi; ++i) {
        auto& flag = needed[static_cast<std::size_t>(i - lo)];
        if (flag) continue;
        const auto& node = tape->nodes[static_cast<std::size_t>(i)];
        for (std::size_t k = 0; k < node.arity; ++k) {
          const std::int64_t p = node.inputs[k].node;
          if (p >= lo && needed[static_cast<std::size_t>(p - lo)]) {
            flag = 1;
            break;
          }
        }
      }

      if (options.create_graph) ++tape->generation;

      std::vector<Tensor> grads(span_len);
      std::vector<char> has(span_len, 0);
      grads.back() = Tensor::ones(output.shape());
      has.back() = needed.back();

      for (std::int64_t i = hi; i >= lo; --i) {
        const auto slot = static_cast<std::size_t>(i - lo);
        if (!has[slot]) continue;
        // Copy: recording new nodes may reallocate the node vector.
        const detail::Node node = tape->nodes[static_cast<std::size_t>(i)];
        if (node.op == Op::leaf) continue;

        auto as_tensor = [&](const std::shared_ptr<const Buffer>& buf, std::int64_t id) {
          if (options.create_graph && id >= 0) return Access::tracked(buf, tape, id);
          return Access::constant(buf);
        };
        Tensor in[2];
        for (std::size_t k = 0; k < node.arity; ++k)
          in[k] = as_tensor(node.inputs[k].value, node.inputs[k].node);
        const Tensor out = as_tensor(node.out, i);
        const Tensor& g = grads[slot];

        for (std::size_t k = 0; k < node.arity; ++k) {
          const std::int64_t p = node.inputs[k].node;
          if (p < lo || !needed[static_cast<std::size_t>(p - lo)]) continue;
          Tensor contribution = local_grad(node, k, g, out, in);
          const auto ps = static_cast<std::size_t>(p - lo);
          if (has[ps]) {
            grads[ps] = add(grads[ps], contribution);
          } else {
            grads[ps] = std::move(contribution);
            has[ps] = 1;
          }
        }
      }

      for (std::size_t j = 0; j < wrt.size(); ++j) {
        if (Access::tape(wrt[j]) != tape) continue;
        const std::int64_t id = Access::node(wrt[j]);
        if (id < lo || id > hi) continue;
        const auto slot = static_cast<std::size_t>(id - lo);
        if (has[slot]) {
          result[j] = grads[slot];
          found[j] = true;
        }
      }
    }
  }

  for (std::size_t j = 0; j < wrt.size(); ++j) {
    if (found[j]) continue;
    if (!options.allow_unused) throw UnusedInputError(j);
    result[j] = Tensor::zeros(wrt[j].shape());
  }
  return result;
}

Tensor backward(const Tensor& output, const Tensor& wrt, GradOptions options) {
  return backward(output, std::span<const Tensor>(&wrt, 1), options)[0];
}

Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& theta,
                   double step) {
  const auto base = theta.data();
  std::vector<double> grad(base.size());
  std::vector<double> probe(base.begin(), base.end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = f(Tensor(theta.shape(), probe));
    probe[i] = orig - step;
    const double down = f(Tensor(theta.shape(), probe));
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * step);
  }
  return Tensor(theta.shape(), std::move(grad));
}

}  // namespace metaforge::ag
