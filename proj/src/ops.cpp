#include "cafe/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace cafe::ops {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using SMapR = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CSMapR = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
bool any_meta(std::initializer_list<const Tensor<T>*> xs) {
  for (auto* x : xs)
    if (x->defined() && x->is_meta()) return true;
  return false;
}

template <typename T>
bool tracks(std::initializer_list<const Tensor<T>*> xs) {
  if (!GradMode::enabled()) return false;
  for (auto* x : xs)
    if (x->defined() && x->requires_grad()) return true;
  return false;
}

template <typename T, typename F>
void attach(Tensor<T>& out, std::vector<std::type_identity_t<ImplPtr<T>>> parents, F fn) {
  auto impl = out.impl();
  impl->requires_grad = true;
  impl->parents = std::move(parents);
  impl->backward = std::move(fn);
}

template <typename T>
bool wants(const ImplPtr<T>& p) {
  return p && p->requires_grad;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw_shape(what);
}

void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r)
    throw_shape(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                to_string(s));
}

// ---------------------------------------------------------------- broadcast

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> sa, sb;
  bool same = false;
};

Broadcast make_broadcast(const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  bc.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      throw_shape("cannot broadcast " + to_string(a) + " with " + to_string(b));
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  bc.sa.assign(r, 0);
  bc.sb.assign(r, 0);
  std::int64_t sa = 1, sb = 1;
  for (std::size_t k = r; k-- > 0;) {
    bc.sa[k] = pa[k] == 1 ? 0 : sa;
    bc.sb[k] = pb[k] == 1 ? 0 : sb;
    sa *= pa[k];
    sb *= pb[k];
  }
  return bc;
}

template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::int64_t n = numel(bc.out);
  if (bc.same) {
    for (std::int64_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const int r = static_cast<int>(bc.out.size());
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      const auto ud = static_cast<std::size_t>(d);
      ++idx[ud];
      ia += bc.sa[ud];
      ib += bc.sb[ud];
      if (idx[ud] < bc.out[ud]) break;
      ia -= bc.sa[ud] * bc.out[ud];
      ib -= bc.sb[ud] * bc.out[ud];
      idx[ud] = 0;
    }
  }
}

enum class Binary { add, sub, mul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Binary kind) {
  auto bc = make_broadcast(a.shape(), b.shape());
  if (any_meta<T>({&a, &b})) return Tensor<T>::meta(bc.out);
  auto out = Tensor<T>::zeros(bc.out);
  T* o = out.data().data();
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  switch (kind) {
    case Binary::add:
      for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { o[i] = pa[ia] + pb[ib]; });
      break;
    case Binary::sub:
      for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { o[i] = pa[ia] - pb[ib]; });
      break;
    case Binary::mul:
      for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { o[i] = pa[ia] * pb[ib]; });
      break;
  }
  if (tracks<T>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl();
    attach(out, {ai, bi}, [ai, bi, bc, kind](TensorImpl<T>& self) {
      const T* g = self.grad.data();
      if (wants(ai)) {
        T* ga = ai->grad_buffer().data();
        if (kind == Binary::mul) {
          const T* pb = bi->data.data();
          for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { ga[ia] += g[i] * pb[ib]; });
        } else {
          for_each_broadcast(bc, [&](auto i, auto ia, auto) { ga[ia] += g[i]; });
        }
      }
      if (wants(bi)) {
        T* gb = bi->grad_buffer().data();
        if (kind == Binary::mul) {
          const T* pa = ai->data.data();
          for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { gb[ib] += g[i] * pa[ia]; });
        } else if (kind == Binary::sub) {
          for_each_broadcast(bc, [&](auto i, auto, auto ib) { gb[ib] -= g[i]; });
        } else {
          for_each_broadcast(bc, [&](auto i, auto, auto ib) { gb[ib] += g[i]; });
        }
      }
    });
  }
  return out;
}

// Elementwise unary op with derivative computed from (x, y).
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, F f, D dfdx) {
  if (x.is_meta()) return Tensor<T>::meta(x.shape());
  auto out = Tensor<T>::zeros(x.shape());
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = f(xd[i]);
  if (tracks<T>({&x})) {
    auto xi = x.impl();
    attach(out, {xi}, [xi, dfdx](TensorImpl<T>& self) {
      auto& gx = xi->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i)
        gx[i] += self.grad[i] * dfdx(xi->data[i], self.data[i]);
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::add);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::sub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::mul);
}

template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift) {
  return unary(
      x, [=](T v) { return scale * v + shift; }, [=](T, T) { return scale; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v < T(0) ? T(0) : v; }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return unary(
      x, [=](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [=](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) +
               v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  if (x.is_meta()) return Tensor<T>::meta({1});
  T s = 0;
  for (T v : x.data()) s += v;
  auto out = Tensor<T>::scalar(s);
  if (tracks<T>({&x})) {
    auto xi = x.impl();
    attach(out, {xi}, [xi](TensorImpl<T>& self) {
      auto& gx = xi->grad_buffer();
      for (auto& g : gx) g += self.grad[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  auto s = sum(x);
  if (x.is_meta()) return s;
  return affine(s, T(1) / static_cast<T>(x.numel()), T(0));
}

// ------------------------------------------------------------------ linear

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank(w.shape(), 2, "linear weight");
  const std::int64_t in = w.dim(0), outf = w.dim(1);
  require(x.rank() >= 1 && x.dim(-1) == in,
          "linear: input " + to_string(x.shape()) + " does not match weight " + to_string(w.shape()));
  if (bias.defined())
    require(bias.rank() == 1 && bias.dim(0) == outf, "linear: bias shape " + to_string(bias.shape()));
  Shape os = x.shape();
  os.back() = outf;
  if (any_meta<T>({&x, &w, &bias})) return Tensor<T>::meta(os);
  const std::int64_t rows = x.numel() / in;
  auto out = Tensor<T>::zeros(os);
  MapR<T> Y(out.data().data(), rows, outf);
  Y.noalias() = CMapR<T>(x.data().data(), rows, in) * CMapR<T>(w.data().data(), in, outf);
  if (bias.defined()) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), outf);
  if (tracks<T>({&x, &w, &bias})) {
    auto xi = x.impl(), wi = w.impl(), bi = bias.defined() ? bias.impl() : nullptr;
    attach(out, {xi, wi, bi ? bi : xi}, [xi, wi, bi, rows, in, outf](TensorImpl<T>& self) {
      CMapR<T> G(self.grad.data(), rows, outf);
      if (wants(xi))
        MapR<T>(xi->grad_buffer().data(), rows, in).noalias() +=
            G * CMapR<T>(wi->data.data(), in, outf).transpose();
      if (wants(wi))
        MapR<T>(wi->grad_buffer().data(), in, outf).noalias() +=
            CMapR<T>(xi->data.data(), rows, in).transpose() * G;
      if (wants(bi)) MapR<T>(bi->grad_buffer().data(), 1, outf) += G.colwise().sum();
    });
  }
  return out;
}

// -------------------------------------------------------------- layer norm

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::int64_t d = x.dim(-1);
  require(gamma.numel() == d && beta.numel() == d, "layer_norm: affine size mismatch");
  if (any_meta<T>({&x, &gamma, &beta})) return Tensor<T>::meta(x.shape());
  const std::int64_t rows = x.numel() / d;
  auto out = Tensor<T>::zeros(x.shape());
  Buffer<T> xhat(static_cast<std::size_t>(x.numel())), rstd(static_cast<std::size_t>(rows));
  const T* px = x.data().data();
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  T* po = out.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * d;
    T mu = 0;
    for (std::int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(r)] = rs;
    for (std::int64_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * rs;
      xhat[static_cast<std::size_t>(r * d + j)] = h;
      po[r * d + j] = h * pg[j] + pb[j];
    }
  }
  if (tracks<T>({&x, &gamma, &beta})) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
    attach(out, {xi, gi, bi},
           [xi, gi, bi, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](TensorImpl<T>& self) {
             const T* g = self.grad.data();
             if (wants(gi) || wants(bi)) {
               T* gg = wants(gi) ? gi->grad_buffer().data() : nullptr;
               T* gb = wants(bi) ? bi->grad_buffer().data() : nullptr;
               for (std::int64_t r = 0; r < rows; ++r)
                 for (std::int64_t j = 0; j < d; ++j) {
                   const auto k = static_cast<std::size_t>(r * d + j);
                   if (gg) gg[j] += g[k] * xhat[k];
                   if (gb) gb[j] += g[k];
                 }
             }
             if (wants(xi)) {
               T* gx = xi->grad_buffer().data();
               const T* pg = gi->data.data();
               for (std::int64_t r = 0; r < rows; ++r) {
                 T m1 = 0, m2 = 0;
                 for (std::int64_t j = 0; j < d; ++j) {
                   const auto k = static_cast<std::size_t>(r * d + j);
                   const T dh = g[k] * pg[j];
                   m1 += dh;
                   m2 += dh * xhat[k];
                 }
                 m1 /= static_cast<T>(d);
                 m2 /= static_cast<T>(d);
                 const T rs = rstd[static_cast<std::size_t>(r)];
                 for (std::int64_t j = 0; j < d; ++j) {
                   const auto k = static_cast<std::size_t>(r * d + j);
                   gx[k] += rs * (g[k] * pg[j] - m1 - xhat[k] * m2);
                 }
               }
             }
           });
  }
  return out;
}

// --------------------------------------------------------------- attention

template <typename T>
Tensor<T> attention(const Tensor<T>& qkv, int heads) {
  require_rank(qkv.shape(), 3, "attention");
  const std::int64_t B = qkv.dim(0), N = qkv.dim(1), d3 = qkv.dim(2);
  require(heads > 0 && d3 % (3 * heads) == 0, "attention: width not divisible by 3*heads");
  const std::int64_t d = d3 / 3, dh = d / heads;
  if (qkv.is_meta()) return Tensor<T>::meta({B, N, d});
  auto out = Tensor<T>::zeros({B, N, d});
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Buffer<T> probs(static_cast<std::size_t>(B * heads * N * N));
  const T* base = qkv.data().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h) {
      const T* q = base + b * N * d3 + h * dh;
      CSMapR<T> Q(q, N, dh, Eigen::OuterStride<>(d3));
      CSMapR<T> K(q + d, N, dh, Eigen::OuterStride<>(d3));
      CSMapR<T> V(q + 2 * d, N, dh, Eigen::OuterStride<>(d3));
      MapR<T> P(probs.data() + (b * heads + h) * N * N, N, N);
      P.noalias() = (Q * K.transpose()) * scale;
      for (std::int64_t i = 0; i < N; ++i) {
        const T m = P.row(i).maxCoeff();
        P.row(i) = (P.row(i).array() - m).exp();
        P.row(i) /= P.row(i).sum();
      }
      SMapR<T> O(out.data().data() + b * N * d + h * dh, N, dh, Eigen::OuterStride<>(d));
      O.noalias() = P * V;
    }
  if (tracks<T>({&qkv})) {
    auto xi = qkv.impl();
    attach(out, {xi}, [xi, probs = std::move(probs), B, N, d, dh, heads, scale](TensorImpl<T>& self) {
      const std::int64_t d3 = 3 * d;
      T* gbase = xi->grad_buffer().data();
      const T* base = xi->data.data();
      MatR<T> dP(N, N), dS(N, N);
      for (std::int64_t b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h) {
          const std::int64_t off = b * N * d3 + h * dh;
          CSMapR<T> Q(base + off, N, dh, Eigen::OuterStride<>(d3));
          CSMapR<T> K(base + off + d, N, dh, Eigen::OuterStride<>(d3));
          CSMapR<T> V(base + off + 2 * d, N, dh, Eigen::OuterStride<>(d3));
          SMapR<T> dQ(gbase + off, N, dh, Eigen::OuterStride<>(d3));
          SMapR<T> dK(gbase + off + d, N, dh, Eigen::OuterStride<>(d3));
          SMapR<T> dV(gbase + off + 2 * d, N, dh, Eigen::OuterStride<>(d3));
          CMapR<T> P(probs.data() + (b * heads + h) * N * N, N, N);
          CSMapR<T> dO(self.grad.data() + b * N * d + h * dh, N, dh, Eigen::OuterStride<>(d));
          dV.noalias() += P.transpose() * dO;
          dP.noalias() = dO * V.transpose();
          for (std::int64_t i = 0; i < N; ++i) {
            const T rs = (dP.row(i).array() * P.row(i).array()).sum();
            dS.row(i) = P.row(i).array() * (dP.row(i).array() - rs);
          }
          dQ.noalias() += (dS * K) * scale;
          dK.noalias() += (dS.transpose() * Q) * scale;
        }
    });
  }
  return out;
}

// ------------------------------------------------------------ convolution

namespace {

struct ConvGeom {
  std::int64_t cin, h, w, k, stride, pad, ho, wo;
  PadMode mode;
};

// col[(c*k + ki)*k + kj][oh*wo + ow]
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::int64_t hw = g.ho * g.wo;
  for (std::int64_t c = 0; c < g.cin; ++c)
    for (std::int64_t ki = 0; ki < g.k; ++ki)
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * hw;
        const T* xc = x + c * g.h * g.w;
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          std::int64_t ih = oh * g.stride - g.pad + ki;
          const bool hin = ih >= 0 && ih < g.h;
          if (!hin && g.mode == PadMode::replicate) ih = std::clamp<std::int64_t>(ih, 0, g.h - 1);
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            std::int64_t iw = ow * g.stride - g.pad + kj;
            const bool win = iw >= 0 && iw < g.w;
            if (g.mode == PadMode::replicate) {
              iw = std::clamp<std::int64_t>(iw, 0, g.w - 1);
              row[oh * g.wo + ow] = xc[ih * g.w + iw];
            } else {
              row[oh * g.wo + ow] = (hin && win) ? xc[ih * g.w + iw] : T(0);
            }
          }
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const std::int64_t hw = g.ho * g.wo;
  for (std::int64_t c = 0; c < g.cin; ++c)
    for (std::int64_t ki = 0; ki < g.k; ++ki)
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * hw;
        T* xc = x + c * g.h * g.w;
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          std::int64_t ih = oh * g.stride - g.pad + ki;
          const bool hin = ih >= 0 && ih < g.h;
          if (g.mode == PadMode::replicate) ih = std::clamp<std::int64_t>(ih, 0, g.h - 1);
          else if (!hin) continue;
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            std::int64_t iw = ow * g.stride - g.pad + kj;
            if (g.mode == PadMode::replicate) iw = std::clamp<std::int64_t>(iw, 0, g.w - 1);
            else if (iw < 0 || iw >= g.w) continue;
            xc[ih * g.w + iw] += row[oh * g.wo + ow];
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride, int pad,
                 PadMode mode) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  const std::int64_t B = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t cout = w.dim(0), k = w.dim(2);
  require(w.dim(1) == cin && w.dim(3) == k,
          "conv2d: weight " + to_string(w.shape()) + " does not match input " + to_string(x.shape()));
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/padding");
  require(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than padded input");
  if (bias.defined()) require(bias.numel() == cout, "conv2d: bias size");
  ConvGeom g{cin, h, wd, k, stride, pad, (h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1, mode};
  const Shape os{B, cout, g.ho, g.wo};
  if (any_meta<T>({&x, &w, &bias})) return Tensor<T>::meta(os);

  auto out = Tensor<T>::zeros(os);
  const std::int64_t ckk = cin * k * k, hw = g.ho * g.wo;
  const bool pointwise = k == 1 && stride == 1 && pad == 0;
  Buffer<T> col(pointwise ? 0 : static_cast<std::size_t>(ckk * hw));
  CMapR<T> W(w.data().data(), cout, ckk);
  for (std::int64_t b = 0; b < B; ++b) {
    const T* xb = x.data().data() + b * cin * h * wd;
    const T* cp = xb;
    if (!pointwise) {
      im2col(xb, g, col.data());
      cp = col.data();
    }
    MapR<T> Y(out.data().data() + b * cout * hw, cout, hw);
    Y.noalias() = W * CMapR<T>(cp, ckk, hw);
    if (bias.defined())
      Y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.data().data(), cout);
  }
  if (tracks<T>({&x, &w, &bias})) {
    auto xi = x.impl(), wi = w.impl(), bi = bias.defined() ? bias.impl() : nullptr;
    attach(out, {xi, wi, bi ? bi : xi}, [xi, wi, bi, g, B, cout, ckk, hw, pointwise](TensorImpl<T>& self) {
      const std::int64_t in_sz = g.cin * g.h * g.w;
      Buffer<T> col(pointwise ? 0 : static_cast<std::size_t>(ckk * hw));
      Buffer<T> dcol(pointwise ? 0 : static_cast<std::size_t>(ckk * hw));
      CMapR<T> W(wi->data.data(), cout, ckk);
      for (std::int64_t b = 0; b < B; ++b) {
        CMapR<T> G(self.grad.data() + b * cout * hw, cout, hw);
        const T* xb = xi->data.data() + b * in_sz;
        if (wants(wi)) {
          const T* cp = xb;
          if (!pointwise) {
            im2col(xb, g, col.data());
            cp = col.data();
          }
          MapR<T>(wi->grad_buffer().data(), cout, ckk).noalias() += G * CMapR<T>(cp, ckk, hw).transpose();
        }
        if (wants(bi)) {
          Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(bi->grad_buffer().data(), cout) += G.rowwise().sum();
        }
        if (wants(xi)) {
          T* gx = xi->grad_buffer().data() + b * in_sz;
          if (pointwise) {
            MapR<T>(gx, ckk, hw).noalias() += W.transpose() * G;
          } else {
            MapR<T>(dcol.data(), ckk, hw).noalias() = W.transpose() * G;
            col2im(dcol.data(), g, gx);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv_transpose2x2(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank(x.shape(), 4, "conv_transpose2x2 input");
  require_rank(w.shape(), 4, "conv_transpose2x2 weight");
  const std::int64_t B = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3), cout = w.dim(1);
  require(w.dim(0) == cin && w.dim(2) == 2 && w.dim(3) == 2,
          "conv_transpose2x2: weight " + to_string(w.shape()) + " vs input " + to_string(x.shape()));
  if (bias.defined()) require(bias.numel() == cout, "conv_transpose2x2: bias size");
  const Shape os{B, cout, 2 * h, 2 * wd};
  if (any_meta<T>({&x, &w, &bias})) return Tensor<T>::meta(os);
  auto out = Tensor<T>::zeros(os);
  const std::int64_t hw = h * wd, c4 = cout * 4;
  CMapR<T> Wm(w.data().data(), cin, c4);
  MatR<T> Z(c4, hw);
  for (std::int64_t b = 0; b < B; ++b) {
    Z.noalias() = Wm.transpose() * CMapR<T>(x.data().data() + b * cin * hw, cin, hw);
    T* yb = out.data().data() + b * cout * 4 * hw;
    for (std::int64_t co = 0; co < cout; ++co) {
      const T bv = bias.defined() ? bias.data()[static_cast<std::size_t>(co)] : T(0);
      for (int di = 0; di < 2; ++di)
        for (int dj = 0; dj < 2; ++dj) {
          const T* zr = Z.data() + (co * 4 + di * 2 + dj) * hw;
          for (std::int64_t i = 0; i < h; ++i)
            for (std::int64_t j = 0; j < wd; ++j)
              yb[(co * 2 * h + 2 * i + di) * 2 * wd + 2 * j + dj] = zr[i * wd + j] + bv;
        }
    }
  }
  if (tracks<T>({&x, &w, &bias})) {
    auto xi = x.impl(), wi = w.impl(), bi = bias.defined() ? bias.impl() : nullptr;
    attach(out, {xi, wi, bi ? bi : xi}, [xi, wi, bi, B, cin, cout, h, wd](TensorImpl<T>& self) {
      const std::int64_t hw = h * wd, c4 = cout * 4;
      MatR<T> dZ(c4, hw);
      for (std::int64_t b = 0; b < B; ++b) {
        const T* gy = self.grad.data() + b * cout * 4 * hw;
        for (std::int64_t co = 0; co < cout; ++co)
          for (int di = 0; di < 2; ++di)
            for (int dj = 0; dj < 2; ++dj) {
              T* zr = dZ.data() + (co * 4 + di * 2 + dj) * hw;
              for (std::int64_t i = 0; i < h; ++i)
                for (std::int64_t j = 0; j < wd; ++j)
                  zr[i * wd + j] = gy[(co * 2 * h + 2 * i + di) * 2 * wd + 2 * j + dj];
            }
        CMapR<T> X(xi->data.data() + b * cin * hw, cin, hw);
        if (wants(wi)) MapR<T>(wi->grad_buffer().data(), cin, c4).noalias() += X * dZ.transpose();
        if (wants(xi))
          MapR<T>(xi->grad_buffer().data() + b * cin * hw, cin, hw).noalias() +=
              CMapR<T>(wi->data.data(), cin, c4) * dZ;
        if (wants(bi)) {
          T* gb = bi->grad_buffer().data();
          for (std::int64_t co = 0; co < cout; ++co) gb[co] += dZ.middleRows(co * 4, 4).sum();
        }
      }
    });
  }
  return out;
}

// ------------------------------------------------------------- batch norm

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum,
                     T eps) {
  require_rank(x.shape(), 4, "batch_norm");
  const std::int64_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(gamma.numel() == C && beta.numel() == C && running_mean.numel() == C &&
              running_var.numel() == C,
          "batch_norm: parameter size does not match channels of " + to_string(x.shape()));
  if (any_meta<T>({&x, &gamma, &beta})) return Tensor<T>::meta(x.shape());
  const std::int64_t n = B * hw;
  Buffer<T> mu(static_cast<std::size_t>(C)), rstd(static_cast<std::size_t>(C));
  const T* px = x.data().data();
  for (std::int64_t c = 0; c < C; ++c) {
    const auto uc = static_cast<std::size_t>(c);
    if (training) {
      T m = 0;
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < hw; ++i) m += px[(b * C + c) * hw + i];
      m /= static_cast<T>(n);
      T v = 0;
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < hw; ++i) {
          const T dv = px[(b * C + c) * hw + i] - m;
          v += dv * dv;
        }
      v /= static_cast<T>(n);
      mu[uc] = m;
      rstd[uc] = T(1) / std::sqrt(v + eps);
      const T unbiased = n > 1 ? v * static_cast<T>(n) / static_cast<T>(n - 1) : v;
      running_mean.data()[uc] = (T(1) - momentum) * running_mean.data()[uc] + momentum * m;
      running_var.data()[uc] = (T(1) - momentum) * running_var.data()[uc] + momentum * unbiased;
    } else {
      mu[uc] = running_mean.data()[uc];
      rstd[uc] = T(1) / std::sqrt(running_var.data()[uc] + eps);
    }
  }
  auto out = Tensor<T>::zeros(x.shape());
  T* po = out.data().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const auto uc = static_cast<std::size_t>(c);
      const T s = gamma.data()[uc] * rstd[uc];
      const T t = beta.data()[uc] - mu[uc] * s;
      for (std::int64_t i = 0; i < hw; ++i) po[(b * C + c) * hw + i] = px[(b * C + c) * hw + i] * s + t;
    }
  if (tracks<T>({&x, &gamma, &beta})) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
    attach(out, {xi, gi, bi}, [xi, gi, bi, mu = std::move(mu), rstd = std::move(rstd), B, C, hw, n,
                               training](TensorImpl<T>& self) {
      const T* g = self.grad.data();
      const T* px = xi->data.data();
      for (std::int64_t c = 0; c < C; ++c) {
        const auto uc = static_cast<std::size_t>(c);
        T sg = 0, sgx = 0;
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t i = 0; i < hw; ++i) {
            const auto k = (b * C + c) * hw + i;
            sg += g[k];
            sgx += g[k] * (px[k] - mu[uc]) * rstd[uc];
          }
        if (wants(gi)) gi->grad_buffer()[uc] += sgx;
        if (wants(bi)) bi->grad_buffer()[uc] += sg;
        if (wants(xi)) {
          T* gx = xi->grad_buffer().data();
          const T gam = gi->data[uc];
          const T rs = rstd[uc];
          for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t i = 0; i < hw; ++i) {
              const auto k = (b * C + c) * hw + i;
              if (training) {
                const T xh = (px[k] - mu[uc]) * rs;
                gx[k] += gam * rs * (g[k] - sg / static_cast<T>(n) - xh * sgx / static_cast<T>(n));
              } else {
                gx[k] += g[k] * gam * rs;
              }
            }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- pooling

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const std::int64_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (x.is_meta()) return Tensor<T>::meta({B, C, 1, 1});
  auto out = Tensor<T>::zeros({B, C, 1, 1});
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    T s = 0;
    for (std::int64_t i = 0; i < hw; ++i) s += x.data()[static_cast<std::size_t>(bc * hw + i)];
    out.data()[static_cast<std::size_t>(bc)] = s / static_cast<T>(hw);
  }
  if (tracks<T>({&x})) {
    auto xi = x.impl();
    attach(out, {xi}, [xi, B, C, hw](TensorImpl<T>& self) {
      auto& gx = xi->grad_buffer();
      for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const T g = self.grad[static_cast<std::size_t>(bc)] / static_cast<T>(hw);
        for (std::int64_t i = 0; i < hw; ++i) gx[static_cast<std::size_t>(bc * hw + i)] += g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "global_max_pool");
  const std::int64_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (x.is_meta()) return Tensor<T>::meta({B, C, 1, 1});
  auto out = Tensor<T>::zeros({B, C, 1, 1});
  std::vector<std::int64_t> arg(static_cast<std::size_t>(B * C));
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    std::int64_t best = bc * hw;
    for (std::int64_t i = 1; i < hw; ++i)
      if (x.data()[static_cast<std::size_t>(bc * hw + i)] > x.data()[static_cast<std::size_t>(best)])
        best = bc * hw + i;
    arg[static_cast<std::size_t>(bc)] = best;
    out.data()[static_cast<std::size_t>(bc)] = x.data()[static_cast<std::size_t>(best)];
  }
  if (tracks<T>({&x})) {
    auto xi = x.impl();
    attach(out, {xi}, [xi, arg = std::move(arg)](TensorImpl<T>& self) {
      auto& gx = xi->grad_buffer();
      for (std::size_t bc = 0; bc < arg.size(); ++bc) gx[static_cast<std::size_t>(arg[bc])] += self.grad[bc];
    });
  }
  return out;
}

template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "channel_mean");
  const std::int64_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  const Shape os{B, 1, x.dim(2), x.dim(3)};
  if (x.is_meta()) return Tensor<T>::meta(os);
  auto out = Tensor<T>::zeros(os);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < hw; ++i)
        out.data()[static_cast<std::size_t>(b * hw + i)] += x.data()[static_cast<std::size_t>((b * C + c) * hw + i)];
  for (auto& v : out.data()) v /= static_cast<T>(C);
  if (tracks<T>({&x})) {
    auto xi = x.impl();
    attach(out, {xi}, [xi, B, C, hw](TensorImpl<T>& self) {
      auto& gx = xi->grad_buffer();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t i = 0; i < hw; ++i)
            gx[static_cast<std::size_t>((b * C + c) * hw + i)] +=
                self.grad[static_cast<std::size_t>(b * hw + i)] / static_cast<T>(C);
    });
  }
  return out;
}

template <typename T>
Tensor<T> channel_max(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "channel_max");
  const std::int64_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  const Shape os{B, 1, x.dim(2), x.dim(3)};
  if (x.is_meta()) return Tensor<T>::meta(os);
  auto out = Tensor<T>::zeros(os);
  std::vector<std::int64_t> arg(static_cast<std::size_t>(B * hw));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < hw; ++i) {
      std::int64_t best = b * C * hw + i;
      for (std::int64_t c = 1; c < C; ++c) {
        const std::int64_t k = (b * C + c) * hw + i;
        if (x.data()[static_cast<std::size_t>(k)] > x.data()[static_cast<std::size_t>(best)]) best = k;
      }
      arg[static_cast<std::size_t>(b * hw + i)] = best;
      out.data()[static_cast<std::size_t>(b * hw + i)] = x.data()[static_cast<std::size_t>(best)];
    }
  if (tracks<T>({&x})) {
    auto xi = x.impl();
    attach(out, {xi}, [xi, arg = std::move(arg)](TensorImpl<T>& self) {
      auto& gx = xi->grad_buffer();
      for (std::size_t i = 0; i < arg.size(); ++i) gx[static_cast<std::size_t>(arg[i])] += self.grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int size) {
  require_rank(x.shape(), 4, "adaptive_avg_pool");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(size >= 1 && size <= H && size <= W,
          "adaptive_avg_pool: size " + std::to_string(size) + " exceeds input " + to_string(x.shape()));
  const Shape os{B, C, size, size};
  if (x.is_meta()) return Tensor<T>::meta(os);
  auto bins = [size](std::int64_t n) {
    std::vector<std::pair<std::int64_t, std::int64_t>> r;
    for (std::int64_t i = 0; i < size; ++i) r.emplace_back((i * n) / size, ((i + 1) * n + size - 1) / size);
    return r;
  };
  auto bh = bins(H), bw = bins(W);
  auto out = Tensor<T>::zeros(os);
  for (std::int64_t p = 0; p < B * C; ++p) {
    const T* xp = x.data().data() + p * H * W;
    for (int i = 0; i < size; ++i)
      for (int j = 0; j < size; ++j) {
        T s = 0;
        for (auto r = bh[static_cast<std::size_t>(i)].first; r < bh[static_cast<std::size_t>(i)].second; ++r)
          for (auto c = bw[static_cast<std::size_t>(j)].first; c < bw[static_cast<std::size_t>(j)].second; ++c)
            s += xp[r * W + c];
        const auto cnt = (bh[static_cast<std::size_t>(i)].second - bh[static_cast<std::size_t>(i)].first) *
                         (bw[static_cast<std::size_t>(j)].second - bw[static_cast<std::size_t>(j)].first);
        out.data()[static_cast<std::size_t>((p * size + i) * size + j)] = s / static_cast<T>(cnt);
      }
  }
  if (tracks<T>({&x})) {
    auto xi = x.impl();
    attach(out, {xi}, [xi, bh, bw, B, C, H, W, size](TensorImpl<T>& self) {
      auto& gx = xi->grad_buffer();
      for (std::int64_t p = 0; p < B * C; ++p)
        for (int i = 0; i < size; ++i)
          for (int j = 0; j < size; ++j) {
            const auto& [r0, r1] = bh[static_cast<std::size_t>(i)];
            const auto& [c0, c1] = bw[static_cast<std::size_t>(j)];
            const T g = self.grad[static_cast<std::size_t>((p * size + i) * size + j)] /
                        static_cast<T>((r1 - r0) * (c1 - c0));
            for (auto r = r0; r < r1; ++r)
              for (auto c = c0; c < c1; ++c) gx[static_cast<std::size_t>(p * H * W + r * W + c)] += g;
          }
    });
  }
  return out;
}

// --------------------------------------------------------------- resizing

namespace {

struct Lerp {
  std::int64_t i0, i1;
  double frac;
};

std::vector<Lerp> lerp_table(std::int64_t in, std::int64_t out) {
  std::vector<Lerp> t(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    t[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return t;
}

}  // namespace

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  require_rank(x.shape(), 4, "resize_bilinear");
  require(out_h >= 1 && out_w >= 1, "resize_bilinear: empty target");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Shape os{B, C, out_h, out_w};
  if (x.is_meta()) return Tensor<T>::meta(os);
  if (H == out_h && W == out_w) return reshape(x, os);
  auto th = lerp_table(H, out_h), tw = lerp_table(W, out_w);
  auto out = Tensor<T>::zeros(os);
  for (std::int64_t p = 0; p < B * C; ++p) {
    const T* xp = x.data().data() + p * H * W;
    T* op = out.data().data() + p * out_h * out_w;
    for (int i = 0; i < out_h; ++i) {
      const auto& a = th[static_cast<std::size_t>(i)];
      const T fa = static_cast<T>(a.frac);
      for (int j = 0; j < out_w; ++j) {
        const auto& c = tw[static_cast<std::size_t>(j)];
        const T fc = static_cast<T>(c.frac);
        const T top = (T(1) - fc) * xp[a.i0 * W + c.i0] + fc * xp[a.i0 * W + c.i1];
        const T bot = (T(1) - fc) * xp[a.i1 * W + c.i0] + fc * xp[a.i1 * W + c.i1];
        op[i * out_w + j] = (T(1) - fa) * top + fa * bot;
      }
    }
  }
  if (tracks<T>({&x})) {
    auto xi = x.impl();
    attach(out, {xi}, [xi, th, tw, B, C, H, W, out_h, out_w](TensorImpl<T>& self) {
      auto& gx = xi->grad_buffer();
      for (std::int64_t p = 0; p < B * C; ++p) {
        T* gp = gx.data() + p * H * W;
        const T* g = self.grad.data() + p * out_h * out_w;
        for (int i = 0; i < out_h; ++i) {
          const auto& a = th[static_cast<std::size_t>(i)];
          const T fa = static_cast<T>(a.frac);
          for (int j = 0; j < out_w; ++j) {
            const auto& c = tw[static_cast<std::size_t>(j)];
            const T fc = static_cast<T>(c.frac);
            const T v = g[i * out_w + j];
            gp[a.i0 * W + c.i0] += (T(1) - fa) * (T(1) - fc) * v;
            gp[a.i0 * W + c.i1] += (T(1) - fa) * fc * v;
            gp[a.i1 * W + c.i0] += fa * (T(1) - fc) * v;
            gp[a.i1 * W + c.i1] += fa * fc * v;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------- shape plumbing

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int dim) {
  require(!xs.empty(), "concat: no inputs");
  const int r = xs[0].rank();
  if (dim < 0) dim += r;
  require(dim >= 0 && dim < r, "concat: bad dim");
  Shape os = xs[0].shape();
  os[static_cast<std::size_t>(dim)] = 0;
  bool meta = false;
  for (const auto& x : xs) {
    require(x.rank() == r, "concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != dim)
        require(x.dim(i) == xs[0].dim(i),
                "concat: shape " + to_string(x.shape()) + " vs " + to_string(xs[0].shape()));
    os[static_cast<std::size_t>(dim)] += x.dim(dim);
    meta = meta || x.is_meta();
  }
  if (meta) return Tensor<T>::meta(os);
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= os[static_cast<std::size_t>(i)];
  for (int i = dim + 1; i < r; ++i) inner *= os[static_cast<std::size_t>(i)];
  const std::int64_t out_chunk = os[static_cast<std::size_t>(dim)] * inner;
  auto out = Tensor<T>::zeros(os);
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::int64_t chunk = x.dim(dim) * inner;
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(x.data().data() + o * chunk, chunk, out.data().data() + o * out_chunk + off);
    off += chunk;
  }
  bool any_grad = false;
  for (const auto& x : xs) any_grad = any_grad || x.requires_grad();
  if (GradMode::enabled() && any_grad) {
    std::vector<ImplPtr<T>> parents;
    std::vector<std::int64_t> chunks;
    for (const auto& x : xs) {
      parents.push_back(x.impl());
      chunks.push_back(x.dim(dim) * inner);
    }
    attach(out, parents, [parents, chunks, offsets, outer, out_chunk](TensorImpl<T>& self) {
      for (std::size_t k = 0; k < parents.size(); ++k) {
        if (!wants(parents[k])) continue;
        T* g = parents[k]->grad_buffer().data();
        for (std::int64_t o = 0; o < outer; ++o) {
          const T* src = self.grad.data() + o * out_chunk + offsets[k];
          for (std::int64_t i = 0; i < chunks[k]; ++i) g[o * chunks[k] + i] += src[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int dim, std::int64_t begin, std::int64_t end) {
  const int r = x.rank();
  if (dim < 0) dim += r;
  require(dim >= 0 && dim < r, "slice: bad dim");
  require(0 <= begin && begin <= end && end <= x.dim(dim), "slice: range out of bounds");
  Shape os = x.shape();
  os[static_cast<std::size_t>(dim)] = end - begin;
  if (x.is_meta()) return Tensor<T>::meta(os);
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= os[static_cast<std::size_t>(i)];
  for (int i = dim + 1; i < r; ++i) inner *= os[static_cast<std::size_t>(i)];
  const std::int64_t in_chunk = x.dim(dim) * inner, out_chunk = (end - begin) * inner, off = begin * inner;
  auto out = Tensor<T>::zeros(os);
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + o * in_chunk + off, out_chunk, out.data().data() + o * out_chunk);
  if (tracks<T>({&x})) {
    auto xi = x.impl();
    attach(out, {xi}, [xi, outer, in_chunk, out_chunk, off](TensorImpl<T>& self) {
      T* g = xi->grad_buffer().data();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < out_chunk; ++i) g[o * in_chunk + off + i] += self.grad[o * out_chunk + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_channels(const Tensor<T>& x, const std::vector<int>& indices) {
  require(x.rank() >= 2, "gather_channels: rank < 2");
  const std::int64_t B = x.dim(0), C = x.dim(1);
  for (int i : indices) require(i >= 0 && i < C, "gather_channels: index " + std::to_string(i) + " out of range");
  Shape os = x.shape();
  os[1] = static_cast<std::int64_t>(indices.size());
  if (x.is_meta()) return Tensor<T>::meta(os);
  const std::int64_t inner = x.numel() / (B * C);
  const auto K = static_cast<std::int64_t>(indices.size());
  auto out = Tensor<T>::zeros(os);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t k = 0; k < K; ++k)
      std::copy_n(x.data().data() + (b * C + indices[static_cast<std::size_t>(k)]) * inner, inner,
                  out.data().data() + (b * K + k) * inner);
  if (tracks<T>({&x})) {
    auto xi = x.impl();
    attach(out, {xi}, [xi, indices, B, C, K, inner](TensorImpl<T>& self) {
      T* g = xi->grad_buffer().data();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t k = 0; k < K; ++k)
          for (std::int64_t i = 0; i < inner; ++i)
            g[(b * C + indices[static_cast<std::size_t>(k)]) * inner + i] += self.grad[(b * K + k) * inner + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  require(numel(shape) == x.numel(), "reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  if (x.is_meta()) return Tensor<T>::meta(shape);
  auto out = Tensor<T>::from(shape, std::vector<T>(x.data().begin(), x.data().end()));
  if (tracks<T>({&x})) {
    auto xi = x.impl();
    attach(out, {xi}, [xi](TensorImpl<T>& self) {
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  require_rank(x.shape(), 3, "transpose_last2");
  const std::int64_t B = x.dim(0), A = x.dim(1), C = x.dim(2);
  if (x.is_meta()) return Tensor<T>::meta({B, C, A});
  auto out = Tensor<T>::zeros({B, C, A});
  for (std::int64_t b = 0; b < B; ++b)
    MapR<T>(out.data().data() + b * A * C, C, A) = CMapR<T>(x.data().data() + b * A * C, A, C).transpose();
  if (tracks<T>({&x})) {
    auto xi = x.impl();
    attach(out, {xi}, [xi, B, A, C](TensorImpl<T>& self) {
      T* g = xi->grad_buffer().data();
      for (std::int64_t b = 0; b < B; ++b)
        MapR<T>(g + b * A * C, A, C) += CMapR<T>(self.grad.data() + b * A * C, C, A).transpose();
    });
  }
  return out;
}

template <typename T>
Tensor<T> blend(const Tensor<T>& gate, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "blend: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  require_rank(a.shape(), 4, "blend");
  const bool single = gate.rank() == 4 && gate.dim(1) == 1 && gate.dim(0) == a.dim(0) &&
                      gate.dim(2) == a.dim(2) && gate.dim(3) == a.dim(3);
  require(single || gate.shape() == a.shape(), "blend: gate shape " + to_string(gate.shape()));
  if (any_meta<T>({&gate, &a, &b})) return Tensor<T>::meta(a.shape());
  const std::int64_t B = a.dim(0), C = a.dim(1), hw = a.dim(2) * a.dim(3);
  auto out = Tensor<T>::zeros(a.shape());
  const T* pg = gate.data().data();
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  auto gidx = [=](std::int64_t bb, std::int64_t c, std::int64_t i) {
    return single ? bb * hw + i : (bb * C + c) * hw + i;
  };
  for (std::int64_t bb = 0; bb < B; ++bb)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < hw; ++i) {
        const auto k = (bb * C + c) * hw + i;
        const T g = pg[gidx(bb, c, i)];
        po[k] = g * pa[k] + (T(1) - g) * pb[k];
      }
  if (tracks<T>({&gate, &a, &b})) {
    auto gi = gate.impl(), ai = a.impl(), bi = b.impl();
    attach(out, {gi, ai, bi}, [gi, ai, bi, B, C, hw, gidx](TensorImpl<T>& self) {
      const T* dy = self.grad.data();
      T* dg = wants(gi) ? gi->grad_buffer().data() : nullptr;
      T* da = wants(ai) ? ai->grad_buffer().data() : nullptr;
      T* db = wants(bi) ? bi->grad_buffer().data() : nullptr;
      for (std::int64_t bb = 0; bb < B; ++bb)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t i = 0; i < hw; ++i) {
            const auto k = (bb * C + c) * hw + i;
            const auto gk = gidx(bb, c, i);
            const T g = gi->data[static_cast<std::size_t>(gk)];
            if (da) da[k] += g * dy[k];
            if (db) db[k] += (T(1) - g) * dy[k];
            if (dg) dg[gk] += dy[k] * (ai->data[static_cast<std::size_t>(k)] - bi->data[static_cast<std::size_t>(k)]);
          }
    });
  }
  return out;
}

// ------------------------------------------------------------------- loss

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets, int ignore,
                        bool* all_ignored) {
  require_rank(logits.shape(), 4, "cross_entropy");
  const std::int64_t B = logits.dim(0), K = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  require(static_cast<std::int64_t>(targets.size()) == B * hw,
          "cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
              to_string(logits.shape()));
  if (logits.is_meta()) return Tensor<T>::meta({1});
  std::int64_t count = 0;
  T total = 0;
  const T* z = logits.data().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < hw; ++i) {
      const int t = targets[static_cast<std::size_t>(b * hw + i)];
      if (t == ignore) continue;
      if (t < 0 || t >= K) throw ShapeError("cross_entropy: label " + std::to_string(t) + " out of range");
      T m = z[(b * K) * hw + i];
      for (std::int64_t k = 1; k < K; ++k) m = std::max(m, z[(b * K + k) * hw + i]);
      T s = 0;
      for (std::int64_t k = 0; k < K; ++k) s += std::exp(z[(b * K + k) * hw + i] - m);
      total += m + std::log(s) - z[(b * K + t) * hw + i];
      ++count;
    }
  if (all_ignored) *all_ignored = count == 0;
  auto out = Tensor<T>::scalar(count ? total / static_cast<T>(count) : T(0));
  if (count && tracks<T>({&logits})) {
    auto li = logits.impl();
    attach(out, {li}, [li, targets, ignore, B, K, hw, count](TensorImpl<T>& self) {
      T* g = li->grad_buffer().data();
      const T* z = li->data.data();
      const T scale = self.grad[0] / static_cast<T>(count);
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < hw; ++i) {
          const int t = targets[static_cast<std::size_t>(b * hw + i)];
          if (t == ignore) continue;
          T m = z[(b * K) * hw + i];
          for (std::int64_t k = 1; k < K; ++k) m = std::max(m, z[(b * K + k) * hw + i]);
          T s = 0;
          for (std::int64_t k = 0; k < K; ++k) s += std::exp(z[(b * K + k) * hw + i] - m);
          for (std::int64_t k = 0; k < K; ++k) {
            const T p = std::exp(z[(b * K + k) * hw + i] - m) / s;
            g[(b * K + k) * hw + i] += scale * (p - (k == t ? T(1) : T(0)));
          }
        }
    });
  }
  return out;
}

#define CAFE_INSTANTIATE_OPS(T)                                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> affine(const Tensor<T>&, T, T);                                               \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> gelu(const Tensor<T>&);                                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                    \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> attention(const Tensor<T>&, int);                                             \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int, PadMode); \
  template Tensor<T> conv_transpose2x2(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&,  \
                                Tensor<T>&, bool, T, T);                                           \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                            \
  template Tensor<T> global_max_pool(const Tensor<T>&);                                            \
  template Tensor<T> channel_mean(const Tensor<T>&);                                               \
  template Tensor<T> channel_max(const Tensor<T>&);                                                \
  template Tensor<T> adaptive_avg_pool(const Tensor<T>&, int);                                     \
  template Tensor<T> resize_bilinear(const Tensor<T>&, int, int);                                  \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                   \
  template Tensor<T> slice(const Tensor<T>&, int, std::int64_t, std::int64_t);                     \
  template Tensor<T> gather_channels(const Tensor<T>&, const std::vector<int>&);                   \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                      \
  template Tensor<T> transpose_last2(const Tensor<T>&);                                            \
  template Tensor<T> blend(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<int>&, int, bool*);

CAFE_INSTANTIATE_OPS(float)
CAFE_INSTANTIATE_OPS(double)

}  // namespace cafe::ops
