#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace rainforge {

enum class DType { f32, f64 };

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t numel_of(const Shape& s);
const char* dtype_name(DType dt);

/// Raised for every contract violation in the library (bad shapes, bad
/// arguments, malformed files). Messages name the offending values.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Calls `f.template operator()<T>()` with T matching `dt`.
template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
  if (dt == DType::f32) return f.template operator()<float>();
  return f.template operator()<double>();
}

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

class Tape;
struct TensorImpl;

/// Shared handle to a dense row-major array. Copies alias the same storage;
/// use `clone()` for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, DType dt = DType::f32);
  static Tensor full(const Shape& shape, double value, DType dt = DType::f32);
  static Tensor ones(const Shape& shape, DType dt = DType::f32) { return full(shape, 1.0, dt); }
  static Tensor from_vector(const Shape& shape, const std::vector<double>& values,
                            DType dt = DType::f32);
  static Tensor scalar(double value, DType dt = DType::f32) { return full({1}, value, dt); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t dim() const { return static_cast<int64_t>(shape().size()); }
  int64_t size(int64_t axis) const;
  int64_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const;
  /// Writable view. Only parameter updates and tensor construction should use it.
  template <class T>
  std::span<T> mutable_data();

  double item() const;
  double at(int64_t flat_index) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  /// Gradient accumulated by backward(); undefined until populated.
  Tensor grad() const;
  void zero_grad();
  void set_grad(Tensor g);

  Tensor clone() const;
  /// Same storage, never recorded, no gradient.
  Tensor detach() const;
  Tensor to(DType dt) const;

  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }
  TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend class Tape;
  friend Tensor make_tensor(Shape shape, DType dt);
};

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::variant<std::vector<float>, std::vector<double>> storage;
  bool requires_grad = false;
  bool recorded = false;  // produced by a tape entry
  Tensor grad;
};

/// Allocates a zero-filled tensor.
Tensor make_tensor(Shape shape, DType dt);

template <class T>
std::span<const T> Tensor::data() const {
  if (!impl_) throw Error("data(): undefined tensor");
  auto* v = std::get_if<std::vector<T>>(&impl_->storage);
  if (!v) throw Error(std::string("data(): tensor dtype is ") + dtype_name(impl_->dtype));
  return {v->data(), v->size()};
}

template <class T>
std::span<T> Tensor::mutable_data() {
  if (!impl_) throw Error("mutable_data(): undefined tensor");
  auto* v = std::get_if<std::vector<T>>(&impl_->storage);
  if (!v) throw Error(std::string("mutable_data(): tensor dtype is ") + dtype_name(impl_->dtype));
  return {v->data(), v->size()};
}

/// Returns grads for each input of a recorded op given the output grad.
/// Entries may be left undefined for inputs that need no gradient.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

/// Explicit, scoped record of executed operations. Construct one (or use
/// TapeScope), run the forward pass, call backward() exactly once.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::vector<Tensor> inputs, const Tensor& output, BackwardFn fn);
  void backward(const Tensor& loss);

  bool consumed() const { return consumed_; }
  size_t size() const { return entries_.size(); }

  /// Tape currently receiving records on this thread, or nullptr.
  static Tape* active();

 private:
  struct Entry {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
  friend class TapeScope;
};

/// Makes `tape` the active tape for the current thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* previous_;
};

/// True when an op over `inputs` must be recorded.
bool needs_record(std::initializer_list<const Tensor*> inputs);
bool needs_record(const std::vector<Tensor>& inputs);

/// Records `out` as produced from `inputs` if any input requires grad.
void record_op(std::vector<Tensor> inputs, Tensor& out, BackwardFn fn);

/// Deterministic generator: mt19937_64 with hand-rolled distributions so
/// streams are identical on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  uint64_t seed() const { return seed_; }
  uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n);
  double normal();

  Tensor normal_tensor(const Shape& shape, double stddev, DType dt = DType::f32);
  Tensor uniform_tensor(const Shape& shape, double lo, double hi, DType dt = DType::f32);

  std::string state() const;
  void set_state(const std::string& s);

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Number of worker threads from RAINFORGE_THREADS (default 1).
int worker_threads();

}  // namespace rainforge
