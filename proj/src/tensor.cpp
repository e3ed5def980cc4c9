// SPDX-License-Identifier: Apache-2.0

#include "adepth/tensor.hpp"

#include <atomic>

namespace adepth {

namespace {
std::atomic<Precision> g_precision{Precision::f32};
}

Precision precision() noexcept { return g_precision.load(std::memory_order_relaxed); }
void set_precision(Precision p) noexcept { g_precision.store(p, std::memory_order_relaxed); }

Tensor::Tensor(std::vector<int> shape, double fill) : shape_(std::move(shape)) {
  for (int d : shape_) {
    if (d <= 0) throw ShapeError("tensor extent must be positive, got shape " + shape_str(shape_));
  }
  data_.assign(static_cast<size_t>(shape_numel(shape_)), fill);
}

Tensor Tensor::scalar(double v) {
  Tensor t({1});
  t[0] = v;
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool Tensor::bitwise_equal(const Tensor& o) const {
  if (shape_ != o.shape_) return false;
  for (size_t i = 0; i < data_.size(); ++i) {
    // compare representations so that -0.0 != 0.0 and NaN == NaN
    uint64_t a, b;
    static_assert(sizeof(double) == sizeof(uint64_t));
    __builtin_memcpy(&a, &data_[i], sizeof a);
    __builtin_memcpy(&b, &o.data_[i], sizeof b);
    if (a != b) return false;
  }
  return true;
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

void enforce_precision(Tensor& t) {
  if (precision() == Precision::f64) return;
  double* p = t.data();
  const int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) p[i] = static_cast<double>(static_cast<float>(p[i]));
}

double enforce_precision(double v) {
  if (precision() == Precision::f64) return v;
  return static_cast<double>(static_cast<float>(v));
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NonFiniteError(std::string("non-finite values in ") + what);
}

uint64_t hash64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t Rng::next_u64() {
  state_ += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int lo, int hi) {
  const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  while (u1 <= 1e-300) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

Rng Rng::fork(uint64_t stream) const { return Rng(hash64(state_ ^ hash64(stream))); }

}  // namespace adepth
