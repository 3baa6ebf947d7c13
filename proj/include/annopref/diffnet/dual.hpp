#pragma once

#include <cmath>

namespace annopref::diffnet {

/// Forward-mode dual number `v + d·ε` with ε² = 0. Running reverse-mode
/// backprop on duals seeded with an input tangent yields the directional
/// derivative of the parameter gradient, i.e. a mixed second derivative.
template <class T>
struct Dual {
  T v{};
  T d{};

  constexpr Dual() = default;
  constexpr Dual(T value) : v(value) {}  // NOLINT(google-explicit-constructor)
  constexpr Dual(T value, T tangent) : v(value), d(tangent) {}

  constexpr Dual& operator+=(const Dual& o) {
    v += o.v;
    d += o.d;
    return *this;
  }
  constexpr Dual& operator-=(const Dual& o) {
    v -= o.v;
    d -= o.d;
    return *this;
  }
  constexpr Dual& operator*=(const Dual& o) {
    d = d * o.v + v * o.d;
    v *= o.v;
    return *this;
  }
};

template <class T>
constexpr Dual<T> operator+(Dual<T> a, const Dual<T>& b) { return a += b; }
template <class T>
constexpr Dual<T> operator-(Dual<T> a, const Dual<T>& b) { return a -= b; }
template <class T>
constexpr Dual<T> operator-(const Dual<T>& a) { return {-a.v, -a.d}; }
template <class T>
constexpr Dual<T> operator*(Dual<T> a, const Dual<T>& b) { return a *= b; }
template <class T>
constexpr Dual<T> operator*(T s, const Dual<T>& a) { return {s * a.v, s * a.d}; }
template <class T>
constexpr Dual<T> operator*(const Dual<T>& a, T s) { return {s * a.v, s * a.d}; }

template <class T>
inline Dual<T> tanh(const Dual<T>& a) {
  const T t = std::tanh(a.v);
  return {t, (T(1) - t * t) * a.d};
}

inline double value_of(double x) { return x; }
template <class T>
inline T value_of(const Dual<T>& x) { return x.v; }

inline bool is_finite(double x) { return std::isfinite(x); }
template <class T>
inline bool is_finite(const Dual<T>& x) { return std::isfinite(x.v) && std::isfinite(x.d); }

}  // namespace annopref::diffnet
