#include "rainforge/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <numbers>
#include <sstream>
#include <unordered_map>

#include "rainforge/ops.hpp"

namespace rainforge {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

Tensor make_tensor(Shape shape, DType dt) {
  for (int64_t e : shape) {
    if (e <= 0) throw Error("tensor extents must be positive, got " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  const auto n = static_cast<size_t>(numel_of(shape));
  impl->shape = std::move(shape);
  impl->dtype = dt;
  if (dt == DType::f32) {
    impl->storage = std::vector<float>(n, 0.0f);
  } else {
    impl->storage = std::vector<double>(n, 0.0);
  }
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(const Shape& shape, DType dt) { return make_tensor(shape, dt); }

Tensor Tensor::full(const Shape& shape, double value, DType dt) {
  Tensor t = make_tensor(shape, dt);
  dispatch(dt, [&]<typename T>() {
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(value);
  });
  return t;
}

Tensor Tensor::from_vector(const Shape& shape, const std::vector<double>& values, DType dt) {
  if (numel_of(shape) != static_cast<int64_t>(values.size())) {
    throw Error("from_vector: shape " + shape_str(shape) + " needs " +
                std::to_string(numel_of(shape)) + " values, got " + std::to_string(values.size()));
  }
  Tensor t = make_tensor(shape, dt);
  dispatch(dt, [&]<typename T>() {
    auto d = t.mutable_data<T>();
    for (size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw Error("shape(): undefined tensor");
  return impl_->shape;
}

int64_t Tensor::size(int64_t axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<int64_t>(s.size());
  if (axis < 0 || axis >= static_cast<int64_t>(s.size())) {
    throw Error("size(): axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const { return numel_of(shape()); }

DType Tensor::dtype() const {
  if (!impl_) throw Error("dtype(): undefined tensor");
  return impl_->dtype;
}

double Tensor::item() const {
  if (numel() != 1) throw Error("item(): tensor has shape " + shape_str(shape()));
  return at(0);
}

double Tensor::at(int64_t flat_index) const {
  return dispatch(dtype(), [&]<typename T>() -> double {
    auto d = data<T>();
    if (flat_index < 0 || flat_index >= static_cast<int64_t>(d.size())) {
      throw Error("at(): index " + std::to_string(flat_index) + " out of range");
    }
    return static_cast<double>(d[static_cast<size_t>(flat_index)]);
  });
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<typename T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_) throw Error("set_requires_grad(): undefined tensor");
  impl_->requires_grad = on;
  return *this;
}

Tensor Tensor::grad() const { return impl_ ? impl_->grad : Tensor(); }

void Tensor::zero_grad() {
  if (impl_) impl_->grad = Tensor();
}

void Tensor::set_grad(Tensor g) {
  if (g.defined() && g.shape() != shape()) {
    throw Error("set_grad: grad shape " + shape_str(g.shape()) + " != tensor shape " +
                shape_str(shape()));
  }
  impl_->grad = std::move(g);
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->dtype = dtype();
  impl->storage = impl_->storage;
  return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->dtype = dtype();
  impl->storage = impl_->storage;
  return Tensor(std::move(impl));
}

Tensor Tensor::to(DType dt) const {
  if (dt == dtype()) return detach();
  Tensor out = make_tensor(shape(), dt);
  dispatch(dtype(), [&]<typename S>() {
    auto src = data<S>();
    dispatch(dt, [&]<typename D>() {
      auto dst = out.mutable_data<D>();
      for (size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  return out;
}

// ---------------------------------------------------------------- tape

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) {
  if (tape.consumed()) throw Error("TapeScope: tape was already consumed by backward()");
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradGuard::NoGradGuard() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = previous_; }

bool needs_record(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

bool needs_record(const std::vector<Tensor>& inputs) {
  if (!g_active_tape) return false;
  for (const Tensor& t : inputs) {
    if (t.defined() && t.requires_grad()) return true;
  }
  return false;
}

void record_op(std::vector<Tensor> inputs, Tensor& out, BackwardFn fn) {
  if (!needs_record(inputs)) return;
  g_active_tape->record(std::move(inputs), out, std::move(fn));
}

void Tape::record(std::vector<Tensor> inputs, const Tensor& output, BackwardFn fn) {
  if (consumed_) throw Error("Tape::record: tape already consumed");
  output.impl_->requires_grad = true;
  output.impl_->recorded = true;
  entries_.push_back({std::move(inputs), output, std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw Error("backward: tape already consumed; record a new forward region");
  if (!loss.defined() || loss.numel() != 1) {
    throw Error("backward: loss must be a scalar, got shape " +
                (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  consumed_ = true;
  NoGradGuard no_grad;

  std::unordered_map<TensorImpl*, Tensor> grads;
  auto accumulate = [&](const Tensor& target, const Tensor& g) {
    auto it = grads.find(target.impl());
    if (it == grads.end()) {
      grads.emplace(target.impl(), g);
    } else {
      it->second = add(it->second, g);
    }
  };

  grads.emplace(loss.impl(), Tensor::ones(loss.shape(), loss.dtype()));

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto found = grads.find(it->output.impl());
    if (found == grads.end()) continue;
    Tensor gout = found->second;
    grads.erase(found);
    std::vector<Tensor> gins = it->fn(gout);
    for (size_t i = 0; i < it->inputs.size() && i < gins.size(); ++i) {
      const Tensor& in = it->inputs[i];
      if (!gins[i].defined() || !in.requires_grad()) continue;
      if (gins[i].shape() != in.shape()) {
        throw Error("backward: rule produced grad " + shape_str(gins[i].shape()) +
                    " for input " + shape_str(in.shape()));
      }
      accumulate(in, gins[i]);
    }
  }

  // Whatever is left belongs to leaves (or to the loss itself when it is a leaf).
  for (auto& [impl, g] : grads) {
    if (impl->recorded || !impl->requires_grad) continue;
    if (impl->grad.defined()) {
      impl->grad = add(impl->grad, g);
    } else {
      impl->grad = g.detach();
    }
  }
  entries_.clear();
}

// ---------------------------------------------------------------- rng

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

uint64_t Rng::below(uint64_t n) {
  if (n == 0) throw Error("Rng::below: n must be positive");
  // Rejection sampling keeps the result unbiased.
  const uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
  uint64_t v;
  do {
    v = engine_();
  } while (v >= limit);
  return v % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

Tensor Rng::normal_tensor(const Shape& shape, double stddev, DType dt) {
  Tensor t = make_tensor(shape, dt);
  dispatch(dt, [&]<typename T>() {
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(stddev * normal());
  });
  return t;
}

Tensor Rng::uniform_tensor(const Shape& shape, double lo, double hi, DType dt) {
  Tensor t = make_tensor(shape, dt);
  dispatch(dt, [&]<typename T>() {
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(uniform(lo, hi));
  });
  return t;
}

std::string Rng::state() const {
  std::ostringstream os;
  uint64_t spare_bits;
  std::memcpy(&spare_bits, &spare_, sizeof spare_bits);
  os << seed_ << ' ' << (has_spare_ ? 1 : 0) << ' ' << spare_bits << ' ' << engine_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  uint64_t seed = 0, spare_bits = 0;
  int has_spare = 0;
  std::mt19937_64 engine;
  if (!(is >> seed >> has_spare >> spare_bits >> engine)) {
    throw Error("Rng::set_state: malformed state string");
  }
  seed_ = seed;
  has_spare_ = has_spare != 0;
  std::memcpy(&spare_, &spare_bits, sizeof spare_);
  engine_ = engine;
}

int worker_threads() {
  const char* env = std::getenv("RAINFORGE_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (end == env || n < 1) return 1;
  return static_cast<int>(n);
}

}  // namespace rainforge
