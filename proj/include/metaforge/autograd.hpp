#pragma once

// Dense 64-bit reverse-mode automatic differentiation with support for
// gradients of gradients.
//
// Tensors are immutable values. A tensor that requires grad refers to a node
// on a Tape; every operation whose operands live on a tape is appended to
// that tape together with the values its backward rule needs. Backward rules
// are themselves written with the public operations, so running backward
// with create_graph=true records the gradient computation on the same tape
// and the returned gradients can be differentiated again.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "metaforge/error.hpp"

namespace metaforge::ag {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

enum class Op {
  leaf,
  add,
  sub,
  mul,
  div,
  neg,
  scale,
  matmul,
  transpose,
  tanh,
  relu,
  exp,
  log,
  sqrt,
  square,
  sum,
  mean,
  broadcast,
  sum_leading,
  reshape,
  index_rows,
  scatter_rows,
};

std::string_view op_name(Op op);

class ShapeError : public Error {
 public:
  using Error::Error;
};

class GradError : public Error {
 public:
  using Error::Error;
};

// Raised by backward() when a wrt tensor does not influence the output and
// allow_unused was not requested. index() is the position in the wrt list.
class UnusedInputError : public GradError {
 public:
  explicit UnusedInputError(std::size_t index);
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

namespace detail {
struct Buffer;
struct TapeImpl;
struct Access;
}  // namespace detail

class Tensor {
 public:
  // A scalar zero constant.
  Tensor();
  // A constant (non-tracked) tensor. Throws ShapeError on length mismatch.
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  std::span<const double> data() const;
  double operator[](std::size_t i) const { return data()[i]; }
  // Value of a single-element tensor.
  double item() const;

  bool requires_grad() const { return tape_ != nullptr; }
  // Same values, no tape connection.
  Tensor detach() const;

 private:
  friend struct detail::Access;
  std::shared_ptr<const detail::Buffer> buf_;
  std::shared_ptr<detail::TapeImpl> tape_;
  std::int64_t node_ = -1;
};

// Owns the recorded computation for one evaluation context. Copies share
// the same underlying tape. Not thread-safe; confine each tape to a thread.
class Tape {
 public:
  Tape();

  // Registers a copy of `value` as a new differentiation target.
  Tensor leaf(const Tensor& value) const;

  std::size_t size() const;
  // Starts at 1; incremented every time backward records a differentiable
  // gradient graph (create_graph=true).
  int generation() const;

  // Makes this tape the active one on the current thread for the lifetime of
  // the scope; tensor_of(..., requires_grad=true) registers leaves there.
  class Scope {
   public:
    explicit Scope(const Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    detail::TapeImpl* previous_;
  };

 private:
  std::shared_ptr<detail::TapeImpl> impl_;
};

// Builds a tensor. With requires_grad the tensor is registered as a leaf on
// the active tape; a GradError is thrown when no tape is active.
Tensor tensor_of(Shape shape, std::vector<double> data, bool requires_grad = false);

// Elementwise, operands of identical shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);

// 2-D only.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Reductions to a rank-0 tensor.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// [d...] -> [n, d...] by repetition; the only broadcasting supported.
Tensor broadcast(const Tensor& a, std::size_t n);
// [n, d...] -> [d...]; adjoint of broadcast.
Tensor sum_leading(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
// Gathers rows (slices along axis 0). Indices may repeat.
Tensor index_rows(const Tensor& a, std::vector<std::size_t> indices);
// Adjoint of index_rows: output has `rows` rows, row indices[i] receives the
// sum of input rows i.
Tensor scatter_rows(const Tensor& a, std::vector<std::size_t> indices, std::size_t rows);

// Generic entry point for attribute-free operations.
Tensor apply(Op op, std::span<const Tensor> args);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

struct GradOptions {
  bool create_graph = false;
  bool allow_unused = false;
};

// d output / d wrt[i]. `output` must hold exactly one element and every wrt
// tensor must require grad. With create_graph the gradients are recorded on
// the tape and remain differentiable.
std::vector<Tensor> backward(const Tensor& output, std::span<const Tensor> wrt,
                             GradOptions options = {});
Tensor backward(const Tensor& output, const Tensor& wrt, GradOptions options = {});

// Central-difference gradient estimate of a scalar function, per coordinate.
Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& theta,
                   double step);

}  // namespace metaforge::ag
