#include "mcm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

MCM_BEGIN_NAMESPACE

namespace {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;
using BackwardFn = std::function<void(std::span<const Scalar>)>;

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

// Builds the result tensor and records the node when any input is
// differentiable. `make_backward` is only invoked when recording.
template <typename MakeBackward>
Tensor emit(const char* op, Shape shape, std::vector<Scalar> data,
            std::initializer_list<const Tensor*> inputs, MakeBackward&& make_backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  if (!wants_grad(inputs)) return out;
  auto node = std::make_shared<detail::Node>();
  node->op = op;
  for (const Tensor* t : inputs) node->inputs.push_back(t->impl_ptr());
  node->backward = make_backward();
  auto impl = out.impl_ptr();
  impl->requires_grad = true;
  impl->node = std::move(node);
  return out;
}

bool is_suffix(const Shape& small, const Shape& large) {
  if (small.size() > large.size()) return false;
  return std::equal(small.rbegin(), small.rend(), large.rbegin());
}

// Output shape of a suffix-broadcast between `a` and `b`.
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return a;
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible (leading batch extents only)");
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.dim() < rank) {
    throw DimensionError(std::string(op) + ": needs rank >= " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

template <typename Fwd, typename GradA, typename GradB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, GradA grad_a,
              GradB grad_b) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
  const std::size_t n = shape_numel(out_shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  auto ad = a.data();
  auto bd = b.data();
  std::vector<Scalar> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i % na], bd[i % nb]);
  return emit(op, std::move(out_shape), std::move(out), {&a, &b}, [&] {
    return BackwardFn([ai = a.impl_ptr(), bi = b.impl_ptr(), n, na, nb, grad_a,
                       grad_b](std::span<const Scalar> g) {
      auto ga = detail::grad_sink(*ai);
      auto gb = detail::grad_sink(*bi);
      const auto& av = ai->data;
      const auto& bv = bi->data;
      if (!ga.empty()) {
        for (std::size_t i = 0; i < n; ++i) ga[i % na] += grad_a(g[i], av[i % na], bv[i % nb]);
      }
      if (!gb.empty()) {
        for (std::size_t i = 0; i < n; ++i) gb[i % nb] += grad_b(g[i], av[i % na], bv[i % nb]);
      }
    });
  });
}

// c[m,n] += a[m,k] * b[k,n]
void gemm_acc(std::size_t m, std::size_t k, std::size_t n, const Scalar* __restrict a,
              const Scalar* __restrict b, Scalar* __restrict c) {
  for (std::size_t i = 0; i < m; ++i) {
    Scalar* __restrict crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar av = a[i * k + p];
      const Scalar* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Scalar gaussian_cdf(Scalar x) {
  return Scalar{0.5} * (Scalar{1} + std::erf(x / std::numbers::sqrt2_v<Scalar>));
}

Scalar gaussian_pdf(Scalar x) {
  return std::exp(Scalar{-0.5} * x * x) / std::sqrt(Scalar{2} * std::numbers::pi_v<Scalar>);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](Scalar x, Scalar y) { return x + y; },
      [](Scalar g, Scalar, Scalar) { return g; }, [](Scalar g, Scalar, Scalar) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](Scalar x, Scalar y) { return x - y; },
      [](Scalar g, Scalar, Scalar) { return g; }, [](Scalar g, Scalar, Scalar) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](Scalar x, Scalar y) { return x * y; },
      [](Scalar g, Scalar, Scalar y) { return g * y; },
      [](Scalar g, Scalar x, Scalar) { return g * x; });
}

Tensor scale(const Tensor& a, Scalar factor) {
  auto ad = a.data();
  std::vector<Scalar> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * factor;
  return emit("scale", a.shape(), std::move(out), {&a}, [&] {
    return BackwardFn([ai = a.impl_ptr(), factor](std::span<const Scalar> g) {
      auto ga = detail::grad_sink(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * factor;
    });
  });
}

Tensor square(const Tensor& a) {
  auto ad = a.data();
  std::vector<Scalar> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * ad[i];
  return emit("square", a.shape(), std::move(out), {&a}, [&] {
    return BackwardFn([ai = a.impl_ptr()](std::span<const Scalar> g) {
      auto ga = detail::grad_sink(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += Scalar{2} * ai->data[i] * g[i];
    });
  });
}

Tensor sum(const Tensor& a) {
  Scalar s = 0;
  for (Scalar v : a.data()) s += v;
  return emit("sum", Shape{1}, {s}, {&a}, [&] {
    return BackwardFn([ai = a.impl_ptr()](std::span<const Scalar> g) {
      auto ga = detail::grad_sink(*ai);
      for (auto& v : ga) v += g[0];
    });
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), Scalar{1} / static_cast<Scalar>(a.numel())); }

Tensor mean_lastdim(const Tensor& a) {
  const std::size_t e = a.size(-1);
  const std::size_t rows = a.numel() / e;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  auto ad = a.data();
  std::vector<Scalar> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Scalar s = 0;
    for (std::size_t j = 0; j < e; ++j) s += ad[r * e + j];
    out[r] = s / static_cast<Scalar>(e);
  }
  return emit("mean_lastdim", std::move(out_shape), std::move(out), {&a}, [&] {
    return BackwardFn([ai = a.impl_ptr(), rows, e](std::span<const Scalar> g) {
      auto ga = detail::grad_sink(*ai);
      const Scalar inv = Scalar{1} / static_cast<Scalar>(e);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < e; ++j) ga[r * e + j] += g[r] * inv;
      }
    });
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as[as.size() - 1];
  const std::size_t n = bs[bs.size() - 1];
  if (bs[bs.size() - 2] != k) {
    throw DimensionError("matmul: inner extents differ for " + shape_str(as) + " x " + shape_str(bs));
  }
  Shape abatch(as.begin(), as.end() - 2);
  Shape bbatch(bs.begin(), bs.end() - 2);
  Shape obatch;
  if (is_suffix(bbatch, abatch)) {
    obatch = abatch;
  } else if (is_suffix(abatch, bbatch)) {
    obatch = bbatch;
  } else {
    throw DimensionError("matmul: batch extents of " + shape_str(as) + " and " + shape_str(bs) +
                         " are not broadcast-compatible");
  }
  const std::size_t nbatch = shape_numel(obatch);
  const std::size_t na = shape_numel(abatch);
  const std::size_t nb = shape_numel(bbatch);

  Shape out_shape = obatch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<Scalar> out(nbatch * m * n, Scalar{0});
  auto ad = a.data();
  auto bd = b.data();
  if (auto* counter = MacCounter::active()) counter->add(nbatch * m * k * n);
  // A shared 2-D right operand lets the whole batch run as one tall product.
  std::size_t rows = m;
  std::size_t steps = nbatch;
  std::size_t a_tiles = na;
  if (nb == 1 && na == nbatch) {
    rows = m * nbatch;
    steps = 1;
    a_tiles = 1;
  }
  for (std::size_t t = 0; t < steps; ++t) {
    gemm_acc(rows, k, n, ad.data() + (t % a_tiles) * rows * k, bd.data() + (t % nb) * k * n,
             out.data() + t * rows * n);
  }

  return emit("matmul", std::move(out_shape), std::move(out), {&a, &b}, [&] {
    return BackwardFn([ai = a.impl_ptr(), bi = b.impl_ptr(), m = rows, k, n, nbatch = steps, na = a_tiles,
                       nb](std::span<const Scalar> g) {
      auto ga = detail::grad_sink(*ai);
      auto gb = detail::grad_sink(*bi);
      const Scalar* A = ai->data.data();
      const Scalar* B = bi->data.data();
      std::vector<Scalar> bt;
      if (!ga.empty()) bt.resize(k * n);
      for (std::size_t t = 0; t < nbatch; ++t) {
        const Scalar* gc = g.data() + t * m * n;
        const Scalar* at = A + (t % na) * m * k;
        const Scalar* btile = B + (t % nb) * k * n;
        if (!ga.empty()) {
          // dA += dC * B^T, using a transposed copy of B so the inner loop is contiguous.
          if (nb > 1 || t == 0) {
            for (std::size_t p = 0; p < k; ++p) {
              for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = btile[p * n + j];
            }
          }
          gemm_acc(m, n, k, gc, bt.data(), ga.data() + (t % na) * m * k);
        }
        if (!gb.empty()) {
          // dB += A^T * dC
          Scalar* gbt = gb.data() + (t % nb) * k * n;
          for (std::size_t i = 0; i < m; ++i) {
            const Scalar* grow = gc + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const Scalar av = at[i * k + p];
              Scalar* dst = gbt + p * n;
              for (std::size_t j = 0; j < n; ++j) dst[j] += av * grow[j];
            }
          }
        }
      }
    });
  });
}

Tensor transpose_last2(const Tensor& a) {
  require_rank(a, 2, "transpose_last2");
  Shape s = a.shape();
  const std::size_t r = s[s.size() - 2];
  const std::size_t c = s[s.size() - 1];
  const std::size_t batch = a.numel() / (r * c);
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  auto ad = a.data();
  std::vector<Scalar> out(ad.size());
  for (std::size_t t = 0; t < batch; ++t) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[t * r * c + j * r + i] = ad[t * r * c + i * c + j];
    }
  }
  return emit("transpose_last2", std::move(s), std::move(out), {&a}, [&] {
    return BackwardFn([ai = a.impl_ptr(), batch, r, c](std::span<const Scalar> g) {
      auto ga = detail::grad_sink(*ai);
      for (std::size_t t = 0; t < batch; ++t) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) ga[t * r * c + i * c + j] += g[t * r * c + j * r + i];
        }
      }
    });
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto ad = a.data();
  std::vector<Scalar> out(ad.begin(), ad.end());
  return emit("reshape", std::move(shape), std::move(out), {&a}, [&] {
    return BackwardFn([ai = a.impl_ptr()](std::span<const Scalar> g) {
      auto ga = detail::grad_sink(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    });
  });
}

Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t e = x.size(-1);
  const std::size_t rows = x.numel() / e;
  auto xd = x.data();
  std::vector<Scalar> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* in = xd.data() + r * e;
    Scalar* o = out.data() + r * e;
    Scalar mx = in[0];
    for (std::size_t j = 0; j < e; ++j) {
      if (std::isnan(in[j])) throw NumericError("softmax_lastdim: NaN input");
      mx = std::max(mx, in[j]);
    }
    Scalar s = 0;
    for (std::size_t j = 0; j < e; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    for (std::size_t j = 0; j < e; ++j) o[j] /= s;
  }
  Tensor result = Tensor::from(x.shape(), out);
  return emit("softmax_lastdim", x.shape(), std::move(out), {&x}, [&] {
    return BackwardFn([xi = x.impl_ptr(), y = result.impl_ptr(), rows, e](std::span<const Scalar> g) {
      auto gx = detail::grad_sink(*xi);
      const auto& yv = y->data;
      for (std::size_t r = 0; r < rows; ++r) {
        Scalar dot = 0;
        for (std::size_t j = 0; j < e; ++j) dot += g[r * e + j] * yv[r * e + j];
        for (std::size_t j = 0; j < e; ++j) gx[r * e + j] += yv[r * e + j] * (g[r * e + j] - dot);
      }
    });
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps) {
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t e = x.size(-1);
  if (gain.numel() != e || bias.numel() != e) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match last extent of " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / e;
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  std::vector<Scalar> out(xd.size());
  std::vector<Scalar> xhat(xd.size());
  std::vector<Scalar> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* in = xd.data() + r * e;
    Scalar mu = 0;
    for (std::size_t j = 0; j < e; ++j) mu += in[j];
    mu /= static_cast<Scalar>(e);
    Scalar var = 0;
    for (std::size_t j = 0; j < e; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<Scalar>(e);
    rstd[r] = Scalar{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < e; ++j) {
      xhat[r * e + j] = (in[j] - mu) * rstd[r];
      out[r * e + j] = xhat[r * e + j] * gd[j] + bd[j];
    }
  }
  return emit("layer_norm", x.shape(), std::move(out), {&x, &gain, &bias}, [&] {
    return BackwardFn([xi = x.impl_ptr(), gi = gain.impl_ptr(), bi = bias.impl_ptr(),
                       xhat = std::move(xhat), rstd = std::move(rstd), rows,
                       e](std::span<const Scalar> g) {
      auto gx = detail::grad_sink(*xi);
      auto gg = detail::grad_sink(*gi);
      auto gb = detail::grad_sink(*bi);
      const auto& gain_v = gi->data;
      std::vector<Scalar> dxhat(e);
      for (std::size_t r = 0; r < rows; ++r) {
        const Scalar* go = g.data() + r * e;
        const Scalar* xh = xhat.data() + r * e;
        if (!gg.empty()) {
          for (std::size_t j = 0; j < e; ++j) gg[j] += go[j] * xh[j];
        }
        if (!gb.empty()) {
          for (std::size_t j = 0; j < e; ++j) gb[j] += go[j];
        }
        if (gx.empty()) continue;
        Scalar mean_d = 0;
        Scalar mean_dx = 0;
        for (std::size_t j = 0; j < e; ++j) {
          dxhat[j] = go[j] * gain_v[j];
          mean_d += dxhat[j];
          mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= static_cast<Scalar>(e);
        mean_dx /= static_cast<Scalar>(e);
        for (std::size_t j = 0; j < e; ++j) {
          gx[r * e + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
      }
    });
  });
}

Tensor gelu(const Tensor& x) {
  auto xd = x.data();
  std::vector<Scalar> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * gaussian_cdf(xd[i]);
  return emit("gelu", x.shape(), std::move(out), {&x}, [&] {
    return BackwardFn([xi = x.impl_ptr()](std::span<const Scalar> g) {
      auto gx = detail::grad_sink(*xi);
      const auto& v = xi->data;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] += g[i] * (gaussian_cdf(v[i]) + v[i] * gaussian_pdf(v[i]));
      }
    });
  });
}

Tensor gather_rows(const Tensor& x, const IndexList& index) {
  require_rank(x, 2, "gather_rows");
  const std::size_t n = x.size(-2);
  const std::size_t e = x.size(-1);
  const std::size_t batch = x.numel() / (n * e);
  const std::size_t k = index.size();
  if (k == 0) throw DimensionError("gather_rows: empty index list");
  for (std::size_t idx : index) {
    if (idx >= n) {
      throw IndexError("gather_rows: index " + std::to_string(idx) + " out of range for " +
                       std::to_string(n) + " rows");
    }
  }
  Shape s = x.shape();
  s[s.size() - 2] = k;
  auto xd = x.data();
  std::vector<Scalar> out(batch * k * e);
  for (std::size_t t = 0; t < batch; ++t) {
    for (std::size_t i = 0; i < k; ++i) {
      std::copy_n(xd.data() + (t * n + index[i]) * e, e, out.data() + (t * k + i) * e);
    }
  }
  return emit("gather_rows", std::move(s), std::move(out), {&x}, [&] {
    return BackwardFn([xi = x.impl_ptr(), index, batch, n, k, e](std::span<const Scalar> g) {
      auto gx = detail::grad_sink(*xi);
      for (std::size_t t = 0; t < batch; ++t) {
        for (std::size_t i = 0; i < k; ++i) {
          Scalar* dst = gx.data() + (t * n + index[i]) * e;
          const Scalar* src = g.data() + (t * k + i) * e;
          for (std::size_t j = 0; j < e; ++j) dst[j] += src[j];
        }
      }
    });
  });
}

Tensor scatter_rows(const Tensor& x, const IndexList& index, std::size_t rows) {
  require_rank(x, 2, "scatter_rows");
  const std::size_t k = x.size(-2);
  const std::size_t e = x.size(-1);
  if (index.size() != k) {
    throw DimensionError("scatter_rows: " + std::to_string(index.size()) + " indices for " +
                         std::to_string(k) + " rows");
  }
  for (std::size_t idx : index) {
    if (idx >= rows) throw IndexError("scatter_rows: index " + std::to_string(idx) + " out of range");
  }
  const std::size_t batch = x.numel() / (k * e);
  Shape s = x.shape();
  s[s.size() - 2] = rows;
  auto xd = x.data();
  std::vector<Scalar> out(batch * rows * e, Scalar{0});
  for (std::size_t t = 0; t < batch; ++t) {
    for (std::size_t i = 0; i < k; ++i) {
      Scalar* dst = out.data() + (t * rows + index[i]) * e;
      const Scalar* src = xd.data() + (t * k + i) * e;
      for (std::size_t j = 0; j < e; ++j) dst[j] += src[j];
    }
  }
  return emit("scatter_rows", std::move(s), std::move(out), {&x}, [&] {
    return BackwardFn([xi = x.impl_ptr(), index, batch, rows, k, e](std::span<const Scalar> g) {
      auto gx = detail::grad_sink(*xi);
      for (std::size_t t = 0; t < batch; ++t) {
        for (std::size_t i = 0; i < k; ++i) {
          const Scalar* src = g.data() + (t * rows + index[i]) * e;
          Scalar* dst = gx.data() + (t * k + i) * e;
          for (std::size_t j = 0; j < e; ++j) dst[j] += src[j];
        }
      }
    });
  });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_rows");
  require_rank(b, 2, "concat_rows");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin()) ||
      as.back() != bs.back()) {
    throw DimensionError("concat_rows: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t n1 = as[as.size() - 2];
  const std::size_t n2 = bs[bs.size() - 2];
  const std::size_t e = as.back();
  const std::size_t batch = a.numel() / (n1 * e);
  Shape s = as;
  s[s.size() - 2] = n1 + n2;
  auto ad = a.data();
  auto bd = b.data();
  std::vector<Scalar> out(batch * (n1 + n2) * e);
  for (std::size_t t = 0; t < batch; ++t) {
    std::copy_n(ad.data() + t * n1 * e, n1 * e, out.data() + t * (n1 + n2) * e);
    std::copy_n(bd.data() + t * n2 * e, n2 * e, out.data() + t * (n1 + n2) * e + n1 * e);
  }
  return emit("concat_rows", std::move(s), std::move(out), {&a, &b}, [&] {
    return BackwardFn([ai = a.impl_ptr(), bi = b.impl_ptr(), batch, n1, n2, e](std::span<const Scalar> g) {
      auto ga = detail::grad_sink(*ai);
      auto gb = detail::grad_sink(*bi);
      for (std::size_t t = 0; t < batch; ++t) {
        const Scalar* src = g.data() + t * (n1 + n2) * e;
        if (!ga.empty()) {
          for (std::size_t j = 0; j < n1 * e; ++j) ga[t * n1 * e + j] += src[j];
        }
        if (!gb.empty()) {
          for (std::size_t j = 0; j < n2 * e; ++j) gb[t * n2 * e + j] += src[n1 * e + j];
        }
      }
    });
  });
}

Tensor expand_leading(const Tensor& x, std::size_t count) {
  if (count == 0) throw DimensionError("expand_leading: count must be positive");
  Shape s;
  s.push_back(count);
  s.insert(s.end(), x.shape().begin(), x.shape().end());
  auto xd = x.data();
  const std::size_t n = xd.size();
  std::vector<Scalar> out(count * n);
  for (std::size_t t = 0; t < count; ++t) std::copy(xd.begin(), xd.end(), out.begin() + t * n);
  return emit("expand_leading", std::move(s), std::move(out), {&x}, [&] {
    return BackwardFn([xi = x.impl_ptr(), count, n](std::span<const Scalar> g) {
      auto gx = detail::grad_sink(*xi);
      for (std::size_t t = 0; t < count; ++t) {
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[t * n + i];
      }
    });
  });
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.dim() != 3) throw DimensionError("split_heads: expected [b, L, E], got " + shape_str(x.shape()));
  const std::size_t b = x.size(0);
  const std::size_t len = x.size(1);
  const std::size_t width = x.size(2);
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("split_heads: width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t d = width / heads;
  auto xd = x.data();
  std::vector<Scalar> out(xd.size());
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t l = 0; l < len; ++l) {
        std::copy_n(xd.data() + (bi * len + l) * width + h * d, d,
                    out.data() + ((bi * heads + h) * len + l) * d);
      }
    }
  }
  return emit("split_heads", Shape{b, heads, len, d}, std::move(out), {&x}, [&] {
    return BackwardFn([xi = x.impl_ptr(), b, heads, len, d, width](std::span<const Scalar> g) {
      auto gx = detail::grad_sink(*xi);
      for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t l = 0; l < len; ++l) {
            const Scalar* src = g.data() + ((bi * heads + h) * len + l) * d;
            Scalar* dst = gx.data() + (bi * len + l) * width + h * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
          }
        }
      }
    });
  });
}

Tensor merge_heads(const Tensor& x) {
  if (x.dim() != 4) throw DimensionError("merge_heads: expected [b, h, L, d], got " + shape_str(x.shape()));
  const std::size_t b = x.size(0);
  const std::size_t heads = x.size(1);
  const std::size_t len = x.size(2);
  const std::size_t d = x.size(3);
  const std::size_t width = heads * d;
  auto xd = x.data();
  std::vector<Scalar> out(xd.size());
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t l = 0; l < len; ++l) {
        std::copy_n(xd.data() + ((bi * heads + h) * len + l) * d, d,
                    out.data() + (bi * len + l) * width + h * d);
      }
    }
  }
  return emit("merge_heads", Shape{b, len, width}, std::move(out), {&x}, [&] {
    return BackwardFn([xi = x.impl_ptr(), b, heads, len, d, width](std::span<const Scalar> g) {
      auto gx = detail::grad_sink(*xi);
      for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t l = 0; l < len; ++l) {
            const Scalar* src = g.data() + (bi * len + l) * width + h * d;
            Scalar* dst = gx.data() + ((bi * heads + h) * len + l) * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
          }
        }
      }
    });
  });
}

Tensor replace_row(const Tensor& x, std::size_t row, const Tensor& values) {
  if (x.dim() != 3) throw DimensionError("replace_row: expected [b, M, E], got " + shape_str(x.shape()));
  const std::size_t b = x.size(0);
  const std::size_t m = x.size(1);
  const std::size_t e = x.size(2);
  if (row >= m) throw IndexError("replace_row: row " + std::to_string(row) + " out of range");
  if (values.shape() != Shape{b, e}) {
    throw DimensionError("replace_row: values " + shape_str(values.shape()) + " do not match [" +
                         std::to_string(b) + "," + std::to_string(e) + "]");
  }
  auto xd = x.data();
  auto vd = values.data();
  std::vector<Scalar> out(xd.begin(), xd.end());
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::copy_n(vd.data() + bi * e, e, out.data() + (bi * m + row) * e);
  }
  return emit("replace_row", x.shape(), std::move(out), {&x, &values}, [&] {
    return BackwardFn([xi = x.impl_ptr(), vi = values.impl_ptr(), b, m, e, row](std::span<const Scalar> g) {
      auto gx = detail::grad_sink(*xi);
      auto gv = detail::grad_sink(*vi);
      for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t r = 0; r < m; ++r) {
          const Scalar* src = g.data() + (bi * m + r) * e;
          if (r == row) {
            if (!gv.empty()) {
              for (std::size_t j = 0; j < e; ++j) gv[bi * e + j] += src[j];
            }
          } else if (!gx.empty()) {
            for (std::size_t j = 0; j < e; ++j) gx[(bi * m + r) * e + j] += src[j];
          }
        }
      }
    });
  });
}

Tensor select_row(const Tensor& x, std::size_t row) {
  if (x.dim() != 3) throw DimensionError("select_row: expected [b, M, E], got " + shape_str(x.shape()));
  const std::size_t b = x.size(0);
  const std::size_t m = x.size(1);
  const std::size_t e = x.size(2);
  if (row >= m) throw IndexError("select_row: row " + std::to_string(row) + " out of range");
  auto xd = x.data();
  std::vector<Scalar> out(b * e);
  for (std::size_t bi = 0; bi < b; ++bi) std::copy_n(xd.data() + (bi * m + row) * e, e, out.data() + bi * e);
  return emit("select_row", Shape{b, e}, std::move(out), {&x}, [&] {
    return BackwardFn([xi = x.impl_ptr(), b, m, e, row](std::span<const Scalar> g) {
      auto gx = detail::grad_sink(*xi);
      for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t j = 0; j < e; ++j) gx[(bi * m + row) * e + j] += g[bi * e + j];
      }
    });
  });
}

MCM_END_NAMESPACE
