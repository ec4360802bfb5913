#include "latx/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

#include "latx/gemm.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace latx {

namespace {

using detail::Node;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

// Shared accumulate helper for backward closures.
void axpy(std::vector<double>& dst, const std::vector<double>& src, double s = 1.0) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor y = make_op(a.shape(), {a, b}, "add");
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& yv = y.vec();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] + bv[i];
  if (y.requires_grad()) {
    auto an = a.node_, bn = b.node_;
    y.node_->backward_fn = [an, bn](Node& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        axpy(an->grad, self.grad);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        axpy(bn->grad, self.grad);
      }
    };
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor y = make_op(a.shape(), {a, b}, "sub");
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& yv = y.vec();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] - bv[i];
  if (y.requires_grad()) {
    auto an = a.node_, bn = b.node_;
    y.node_->backward_fn = [an, bn](Node& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        axpy(an->grad, self.grad);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        axpy(bn->grad, self.grad, -1.0);
      }
    };
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor y = make_op(a.shape(), {a, b}, "mul");
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& yv = y.vec();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] * bv[i];
  if (y.requires_grad()) {
    auto an = a.node_, bn = b.node_;
    y.node_->backward_fn = [an, bn](Node& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
      }
    };
  }
  return y;
}

Tensor scale(const Tensor& a, double s) {
  Tensor y = make_op(a.shape(), {a}, "scale");
  const auto& av = a.vec();
  auto& yv = y.vec();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] * s;
  if (y.requires_grad()) {
    auto an = a.node_;
    y.node_->backward_fn = [an, s](Node& self) {
      an->ensure_grad();
      axpy(an->grad, self.grad, s);
    };
  }
  return y;
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor y = make_op(a.shape(), {a}, "add_scalar");
  const auto& av = a.vec();
  auto& yv = y.vec();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] + c;
  if (y.requires_grad()) {
    auto an = a.node_;
    y.node_->backward_fn = [an](Node& self) {
      an->ensure_grad();
      axpy(an->grad, self.grad);
    };
  }
  return y;
}

Tensor scale_t(const Tensor& a, const Tensor& s) {
  require(s.numel() == 1, "scale_t: scale must be a single-element tensor");
  Tensor y = make_op(a.shape(), {a, s}, "scale_t");
  const double sv = s.vec()[0];
  const auto& av = a.vec();
  auto& yv = y.vec();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] * sv;
  if (y.requires_grad()) {
    auto an = a.node_, sn = s.node_;
    y.node_->backward_fn = [an, sn](Node& self) {
      const double sv2 = sn->value[0];
      if (an->requires_grad) {
        an->ensure_grad();
        axpy(an->grad, self.grad, sv2);
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        double acc = 0.0;
        for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * an->value[i];
        sn->grad[0] += acc;
      }
    };
  }
  return y;
}

Tensor relu(const Tensor& x) {
  Tensor y = make_op(x.shape(), {x}, "relu");
  const auto& xv = x.vec();
  auto& yv = y.vec();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  if (y.requires_grad()) {
    auto xn = x.node_;
    y.node_->backward_fn = [xn](Node& self) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        if (xn->value[i] > 0.0) xn->grad[i] += self.grad[i];
    };
  }
  return y;
}

Tensor leaky_relu(const Tensor& x, double slope) {
  Tensor y = make_op(x.shape(), {x}, "leaky_relu");
  const auto& xv = x.vec();
  auto& yv = y.vec();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = xv[i] > 0.0 ? xv[i] : slope * xv[i];
  if (y.requires_grad()) {
    auto xn = x.node_;
    y.node_->backward_fn = [xn, slope](Node& self) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        xn->grad[i] += self.grad[i] * (xn->value[i] > 0.0 ? 1.0 : slope);
    };
  }
  return y;
}

Tensor sigmoid(const Tensor& x) {
  Tensor y = make_op(x.shape(), {x}, "sigmoid");
  const auto& xv = x.vec();
  auto& yv = y.vec();
  for (size_t i = 0; i < yv.size(); ++i) {
    const double v = xv[i];
    yv[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  if (y.requires_grad()) {
    auto xn = x.node_;
    auto yn = y.node_;
    y.node_->backward_fn = [xn, yn](Node& self) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        const double s = yn->value[i];
        xn->grad[i] += self.grad[i] * s * (1.0 - s);
      }
    };
  }
  return y;
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum_all(const Tensor& x) {
  Tensor y = make_op({1}, {x}, "sum_all");
  double acc = 0.0;
  for (double v : x.vec()) acc += v;
  y.vec()[0] = acc;
  if (y.requires_grad()) {
    auto xn = x.node_;
    y.node_->backward_fn = [xn](Node& self) {
      xn->ensure_grad();
      const double g = self.grad[0];
      for (auto& gv : xn->grad) gv += g;
    };
  }
  return y;
}

Tensor mean_all(const Tensor& x) {
  Tensor y = make_op({1}, {x}, "mean_all");
  double acc = 0.0;
  for (double v : x.vec()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  y.vec()[0] = acc * inv;
  if (y.requires_grad()) {
    auto xn = x.node_;
    y.node_->backward_fn = [xn, inv](Node& self) {
      xn->ensure_grad();
      const double g = self.grad[0] * inv;
      for (auto& gv : xn->grad) gv += g;
    };
  }
  return y;
}

// ---------------------------------------------------------------------------
// shape plumbing

Tensor reshape(const Tensor& x, const Shape& shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: element count " + std::to_string(x.numel()) + " does not fit " +
              shape_str(shape));
  Tensor y = make_op(shape, {x}, "reshape");
  y.vec() = x.vec();
  if (y.requires_grad()) {
    auto xn = x.node_;
    y.node_->backward_fn = [xn](Node& self) {
      xn->ensure_grad();
      axpy(xn->grad, self.grad);
    };
  }
  return y;
}

Tensor concat_ch(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 4 && b.ndim() == 4, "concat_ch: expects 4-D tensors");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_ch: non-channel dims differ " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  const int bs = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  Tensor y = make_op({bs, ca + cb, h, w}, {a, b}, "concat_ch");
  const size_t plane = static_cast<size_t>(h) * w;
  for (int n = 0; n < bs; ++n) {
    std::memcpy(y.data() + (static_cast<size_t>(n) * (ca + cb)) * plane,
                a.data() + (static_cast<size_t>(n) * ca) * plane, sizeof(double) * ca * plane);
    std::memcpy(y.data() + (static_cast<size_t>(n) * (ca + cb) + ca) * plane,
                b.data() + (static_cast<size_t>(n) * cb) * plane, sizeof(double) * cb * plane);
  }
  if (y.requires_grad()) {
    auto an = a.node_, bn = b.node_;
    y.node_->backward_fn = [an, bn, bs, ca, cb, plane](Node& self) {
      for (int n = 0; n < bs; ++n) {
        const double* g = self.grad.data() + (static_cast<size_t>(n) * (ca + cb)) * plane;
        if (an->requires_grad) {
          an->ensure_grad();
          double* dst = an->grad.data() + (static_cast<size_t>(n) * ca) * plane;
          for (size_t i = 0; i < ca * plane; ++i) dst[i] += g[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          double* dst = bn->grad.data() + (static_cast<size_t>(n) * cb) * plane;
          const double* gb = g + ca * plane;
          for (size_t i = 0; i < cb * plane; ++i) dst[i] += gb[i];
        }
      }
    };
  }
  return y;
}

Tensor slice_ch(const Tensor& x, int c0, int c1) {
  require(x.ndim() == 4, "slice_ch: expects a 4-D tensor");
  require(0 <= c0 && c0 < c1 && c1 <= x.dim(1),
          "slice_ch: channel range [" + std::to_string(c0) + "," + std::to_string(c1) +
              ") out of " + std::to_string(x.dim(1)));
  const int bs = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), cs = c1 - c0;
  Tensor y = make_op({bs, cs, h, w}, {x}, "slice_ch");
  const size_t plane = static_cast<size_t>(h) * w;
  for (int n = 0; n < bs; ++n)
    std::memcpy(y.data() + (static_cast<size_t>(n) * cs) * plane,
                x.data() + (static_cast<size_t>(n) * c + c0) * plane, sizeof(double) * cs * plane);
  if (y.requires_grad()) {
    auto xn = x.node_;
    y.node_->backward_fn = [xn, bs, c, c0, cs, plane](Node& self) {
      xn->ensure_grad();
      for (int n = 0; n < bs; ++n) {
        double* dst = xn->grad.data() + (static_cast<size_t>(n) * c + c0) * plane;
        const double* g = self.grad.data() + (static_cast<size_t>(n) * cs) * plane;
        for (size_t i = 0; i < cs * plane; ++i) dst[i] += g[i];
      }
    };
  }
  return y;
}

Tensor pad2d(const Tensor& x, int top, int bottom, int left, int right) {
  require(x.ndim() == 4, "pad2d: expects a 4-D tensor");
  const int bs = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h + top + bottom, wo = w + left + right;
  Tensor y = make_op({bs, c, ho, wo}, {x}, "pad2d");
  for (int n = 0; n < bs; ++n)
    for (int ch = 0; ch < c; ++ch) {
      const double* src = x.data() + ((static_cast<size_t>(n) * c + ch) * h) * w;
      double* dst = y.data() + ((static_cast<size_t>(n) * c + ch) * ho) * wo;
      for (int i = 0; i < h; ++i)
        std::memcpy(dst + static_cast<size_t>(i + top) * wo + left, src + static_cast<size_t>(i) * w,
                    sizeof(double) * w);
    }
  if (y.requires_grad()) {
    auto xn = x.node_;
    y.node_->backward_fn = [xn, bs, c, h, w, ho, wo, top, left](Node& self) {
      xn->ensure_grad();
      for (int n = 0; n < bs; ++n)
        for (int ch = 0; ch < c; ++ch) {
          double* dst = xn->grad.data() + ((static_cast<size_t>(n) * c + ch) * h) * w;
          const double* g = self.grad.data() + ((static_cast<size_t>(n) * c + ch) * ho) * wo;
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
              dst[static_cast<size_t>(i) * w + j] += g[static_cast<size_t>(i + top) * wo + left + j];
        }
    };
  }
  return y;
}

Tensor crop2d(const Tensor& x, int top, int height, int left, int width) {
  require(x.ndim() == 4, "crop2d: expects a 4-D tensor");
  require(top >= 0 && left >= 0 && top + height <= x.dim(2) && left + width <= x.dim(3),
          "crop2d: window exceeds input " + shape_str(x.shape()));
  const int bs = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y = make_op({bs, c, height, width}, {x}, "crop2d");
  for (int n = 0; n < bs; ++n)
    for (int ch = 0; ch < c; ++ch) {
      const double* src = x.data() + ((static_cast<size_t>(n) * c + ch) * h) * w;
      double* dst = y.data() + ((static_cast<size_t>(n) * c + ch) * height) * width;
      for (int i = 0; i < height; ++i)
        std::memcpy(dst + static_cast<size_t>(i) * width,
                    src + static_cast<size_t>(i + top) * w + left, sizeof(double) * width);
    }
  if (y.requires_grad()) {
    auto xn = x.node_;
    y.node_->backward_fn = [xn, bs, c, h, w, height, width, top, left](Node& self) {
      xn->ensure_grad();
      for (int n = 0; n < bs; ++n)
        for (int ch = 0; ch < c; ++ch) {
          double* dst = xn->grad.data() + ((static_cast<size_t>(n) * c + ch) * h) * w;
          const double* g = self.grad.data() + ((static_cast<size_t>(n) * c + ch) * height) * width;
          for (int i = 0; i < height; ++i)
            for (int j = 0; j < width; ++j)
              dst[static_cast<size_t>(i + top) * w + left + j] += g[static_cast<size_t>(i) * width + j];
        }
    };
  }
  return y;
}

Tensor tokens_from_map(const Tensor& x) {
  require(x.ndim() == 4, "tokens_from_map: expects a 4-D tensor");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int hw = h * w;
  Tensor y = make_op({b, hw, c}, {x}, "tokens_from_map");
  const auto& xv = x.vec();
  auto& yv = y.vec();
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch) {
      const double* src = xv.data() + ((static_cast<size_t>(n) * c + ch) * hw);
      for (int p = 0; p < hw; ++p) yv[(static_cast<size_t>(n) * hw + p) * c + ch] = src[p];
    }
  if (y.requires_grad()) {
    auto xn = x.node_;
    y.node_->backward_fn = [xn, b, c, hw](Node& self) {
      xn->ensure_grad();
      for (int n = 0; n < b; ++n)
        for (int ch = 0; ch < c; ++ch) {
          double* dst = xn->grad.data() + ((static_cast<size_t>(n) * c + ch) * hw);
          for (int p = 0; p < hw; ++p) dst[p] += self.grad[(static_cast<size_t>(n) * hw + p) * c + ch];
        }
    };
  }
  return y;
}

Tensor map_from_tokens(const Tensor& x, int h, int w) {
  require(x.ndim() == 3, "map_from_tokens: expects a 3-D tensor");
  require(x.dim(1) == h * w, "map_from_tokens: token count " + std::to_string(x.dim(1)) +
                                 " != " + std::to_string(h) + "*" + std::to_string(w));
  const int b = x.dim(0), c = x.dim(2);
  const int hw = h * w;
  Tensor y = make_op({b, c, h, w}, {x}, "map_from_tokens");
  const auto& xv = x.vec();
  auto& yv = y.vec();
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch) {
      double* dst = yv.data() + ((static_cast<size_t>(n) * c + ch) * hw);
      for (int p = 0; p < hw; ++p) dst[p] = xv[(static_cast<size_t>(n) * hw + p) * c + ch];
    }
  if (y.requires_grad()) {
    auto xn = x.node_;
    y.node_->backward_fn = [xn, b, c, hw](Node& self) {
      xn->ensure_grad();
      for (int n = 0; n < b; ++n)
        for (int ch = 0; ch < c; ++ch) {
          const double* g = self.grad.data() + ((static_cast<size_t>(n) * c + ch) * hw);
          for (int p = 0; p < hw; ++p) xn->grad[(static_cast<size_t>(n) * hw + p) * c + ch] += g[p];
        }
    };
  }
  return y;
}

Tensor transpose_last2(const Tensor& x) {
  require(x.ndim() == 2 || x.ndim() == 3, "transpose_last2: expects rank 2 or 3");
  const int b = x.ndim() == 3 ? x.dim(0) : 1;
  const int m = x.dim(-2), n = x.dim(-1);
  Shape out = x.shape();
  out[out.size() - 2] = n;
  out[out.size() - 1] = m;
  Tensor y = make_op(out, {x}, "transpose_last2");
  const auto& xv = x.vec();
  auto& yv = y.vec();
  for (int nb = 0; nb < b; ++nb) {
    const double* src = xv.data() + static_cast<size_t>(nb) * m * n;
    double* dst = yv.data() + static_cast<size_t>(nb) * m * n;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) dst[static_cast<size_t>(j) * m + i] = src[static_cast<size_t>(i) * n + j];
  }
  if (y.requires_grad()) {
    auto xn = x.node_;
    y.node_->backward_fn = [xn, b, m, n](Node& self) {
      xn->ensure_grad();
      for (int nb = 0; nb < b; ++nb) {
        double* dst = xn->grad.data() + static_cast<size_t>(nb) * m * n;
        const double* g = self.grad.data() + static_cast<size_t>(nb) * m * n;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) dst[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
      }
    };
  }
  return y;
}

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() == 2 && b.ndim() == 2) {
    require(a.dim(1) == b.dim(0), "matmul: inner dims " + std::to_string(a.dim(1)) + " vs " +
                                      std::to_string(b.dim(0)));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor y = make_op({m, n}, {a, b}, "matmul");
    detail::gemm(false, false, m, n, k, 1.0, a.data(), k, b.data(), n, 0.0, y.data(), n);
    if (y.requires_grad()) {
      auto an = a.node_, bn = b.node_;
      y.node_->backward_fn = [an, bn, m, k, n](Node& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          detail::gemm(false, true, m, k, n, 1.0, self.grad.data(), n, bn->value.data(), n, 1.0,
                       an->grad.data(), k);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::gemm(true, false, k, n, m, 1.0, an->value.data(), k, self.grad.data(), n, 1.0,
                       bn->grad.data(), n);
        }
      };
    }
    return y;
  }
  require(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0),
          "matmul: expects matching 2-D or batched 3-D operands, got " + shape_str(a.shape()) +
              " and " + shape_str(b.shape()));
  require(a.dim(2) == b.dim(1), "matmul: inner dims " + std::to_string(a.dim(2)) + " vs " +
                                    std::to_string(b.dim(1)));
  const int nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor y = make_op({nb, m, n}, {a, b}, "bmm");
  for (int i = 0; i < nb; ++i)
    detail::gemm(false, false, m, n, k, 1.0, a.data() + static_cast<size_t>(i) * m * k, k,
                 b.data() + static_cast<size_t>(i) * k * n, n, 0.0,
                 y.data() + static_cast<size_t>(i) * m * n, n);
  if (y.requires_grad()) {
    auto an = a.node_, bn = b.node_;
    y.node_->backward_fn = [an, bn, nb, m, k, n](Node& self) {
      for (int i = 0; i < nb; ++i) {
        const double* g = self.grad.data() + static_cast<size_t>(i) * m * n;
        if (an->requires_grad) {
          an->ensure_grad();
          detail::gemm(false, true, m, k, n, 1.0, g, n, bn->value.data() + static_cast<size_t>(i) * k * n,
                       n, 1.0, an->grad.data() + static_cast<size_t>(i) * m * k, k);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::gemm(true, false, k, n, m, 1.0, an->value.data() + static_cast<size_t>(i) * m * k, k,
                       g, n, 1.0, bn->grad.data() + static_cast<size_t>(i) * k * n, n);
        }
      }
    };
  }
  return y;
}

Tensor bmm_transb(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0),
          "bmm_transb: expects batched 3-D operands");
  require(a.dim(2) == b.dim(2), "bmm_transb: inner dims " + std::to_string(a.dim(2)) + " vs " +
                                    std::to_string(b.dim(2)));
  const int nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  Tensor y = make_op({nb, m, n}, {a, b}, "bmm_transb");
  for (int i = 0; i < nb; ++i)
    detail::gemm(false, true, m, n, k, 1.0, a.data() + static_cast<size_t>(i) * m * k, k,
                 b.data() + static_cast<size_t>(i) * n * k, k, 0.0,
                 y.data() + static_cast<size_t>(i) * m * n, n);
  if (y.requires_grad()) {
    auto an = a.node_, bn = b.node_;
    y.node_->backward_fn = [an, bn, nb, m, k, n](Node& self) {
      for (int i = 0; i < nb; ++i) {
        const double* g = self.grad.data() + static_cast<size_t>(i) * m * n;
        if (an->requires_grad) {
          an->ensure_grad();
          // dA = G * B, [M,N] x [N,K]
          detail::gemm(false, false, m, k, n, 1.0, g, n,
                       bn->value.data() + static_cast<size_t>(i) * n * k, k, 1.0,
                       an->grad.data() + static_cast<size_t>(i) * m * k, k);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          // dB = G^T * A, [N,M] x [M,K]
          detail::gemm(true, false, n, k, m, 1.0, g, n,
                       an->value.data() + static_cast<size_t>(i) * m * k, k, 1.0,
                       bn->grad.data() + static_cast<size_t>(i) * n * k, k);
        }
      }
    };
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(w.ndim() == 2, "linear: weight must be 2-D [out,in]");
  const int cin = w.dim(1), cout = w.dim(0);
  require(x.dim(-1) == cin, "linear: input features " + std::to_string(x.dim(-1)) +
                                " != weight in-features " + std::to_string(cin));
  if (b.defined()) require(b.numel() == cout, "linear: bias length != out-features");
  const int rows = static_cast<int>(x.numel() / cin);
  Shape out = x.shape();
  out[out.size() - 1] = cout;
  Tensor y = make_op(out, {x, w, b}, "linear");
  detail::gemm(false, true, rows, cout, cin, 1.0, x.data(), cin, w.data(), cin, 0.0, y.data(), cout);
  if (b.defined()) {
    auto& yv = y.vec();
    const auto& bv = b.vec();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cout; ++c) yv[static_cast<size_t>(r) * cout + c] += bv[c];
  }
  if (y.requires_grad()) {
    auto xn = x.node_, wn = w.node_;
    auto bnode = b.defined() ? b.node_ : nullptr;
    y.node_->backward_fn = [xn, wn, bnode, rows, cin, cout](Node& self) {
      if (xn->requires_grad) {
        xn->ensure_grad();
        detail::gemm(false, false, rows, cin, cout, 1.0, self.grad.data(), cout, wn->value.data(),
                     cin, 1.0, xn->grad.data(), cin);
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        detail::gemm(true, false, cout, cin, rows, 1.0, self.grad.data(), cout, xn->value.data(),
                     cin, 1.0, wn->grad.data(), cin);
      }
      if (bnode && bnode->requires_grad) {
        bnode->ensure_grad();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cout; ++c) bnode->grad[c] += self.grad[static_cast<size_t>(r) * cout + c];
      }
    };
  }
  return y;
}

Tensor softmax(const Tensor& x, int axis) {
  const int nd = x.ndim();
  if (axis < 0) axis += nd;
  require(axis >= 0 && axis < nd, "softmax: axis out of range for " + shape_str(x.shape()));
  const auto& s = x.shape();
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < nd; ++i) inner *= s[i];
  const int n = s[axis];
  Tensor y = make_op(x.shape(), {x}, "softmax");
  const auto& xv = x.vec();
  auto& yv = y.vec();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      const size_t base = static_cast<size_t>(o) * n * inner + in;
      double mx = -1e300;
      for (int i = 0; i < n; ++i) mx = std::max(mx, xv[base + static_cast<size_t>(i) * inner]);
      double denom = 0.0;
      for (int i = 0; i < n; ++i) {
        const double e = std::exp(xv[base + static_cast<size_t>(i) * inner] - mx);
        yv[base + static_cast<size_t>(i) * inner] = e;
        denom += e;
      }
      const double inv = 1.0 / denom;
      for (int i = 0; i < n; ++i) yv[base + static_cast<size_t>(i) * inner] *= inv;
    }
  if (y.requires_grad()) {
    auto xn = x.node_;
    auto yn = y.node_;
    y.node_->backward_fn = [xn, yn, outer, inner, n](Node& self) {
      xn->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          const size_t base = static_cast<size_t>(o) * n * inner + in;
          double dot = 0.0;
          for (int i = 0; i < n; ++i) {
            const size_t k = base + static_cast<size_t>(i) * inner;
            dot += self.grad[k] * yn->value[k];
          }
          for (int i = 0; i < n; ++i) {
            const size_t k = base + static_cast<size_t>(i) * inner;
            xn->grad[k] += yn->value[k] * (self.grad[k] - dot);
          }
        }
    };
  }
  return y;
}

// ---------------------------------------------------------------------------
// convolution family

namespace {

struct ConvGeom {
  int b, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
};

ConvGeom conv_geom(const Tensor& x, const Tensor& w, int stride, int pad, const char* op) {
  require(x.ndim() == 4, std::string(op) + ": input must be 4-D, got " + shape_str(x.shape()));
  require(w.ndim() == 4, std::string(op) + ": weight must be 4-D, got " + shape_str(w.shape()));
  require(stride >= 1, std::string(op) + ": stride must be >= 1");
  require(pad >= 0, std::string(op) + ": padding must be >= 0");
  ConvGeom g;
  g.b = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  require(w.dim(1) == g.cin, std::string(op) + ": input channels " + std::to_string(g.cin) +
                                 " != weight channels " + std::to_string(w.dim(1)));
  require(g.kh <= g.h + 2 * pad && g.kw <= g.w + 2 * pad,
          std::string(op) + ": kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
              " does not fit padded input " + std::to_string(g.h + 2 * pad) + "x" +
              std::to_string(g.w + 2 * pad));
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

// col is [cin*kh*kw, b*ho*wo]
void im2col(const double* x, const ConvGeom& g, double* col) {
  const int khw = g.kh * g.kw;
  const size_t ncols = static_cast<size_t>(g.b) * g.ho * g.wo;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) collapse(2)
#endif
  for (int c = 0; c < g.cin; ++c)
    for (int t = 0; t < khw; ++t) {
      const int i = t / g.kw, j = t % g.kw;
      double* crow = col + (static_cast<size_t>(c) * khw + t) * ncols;
      for (int n = 0; n < g.b; ++n) {
        const double* plane = x + (static_cast<size_t>(n) * g.cin + c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + i;
          double* dst = crow + (static_cast<size_t>(n) * g.ho + oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::memset(dst, 0, sizeof(double) * g.wo);
            continue;
          }
          const double* srow = plane + static_cast<size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + j;
            dst[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : 0.0;
          }
        }
      }
    }
}

// scatter-add of col back into x-shaped buffer
void col2im(const double* col, const ConvGeom& g, double* x) {
  const int khw = g.kh * g.kw;
  const size_t ncols = static_cast<size_t>(g.b) * g.ho * g.wo;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int c = 0; c < g.cin; ++c)
    for (int t = 0; t < khw; ++t) {
      const int i = t / g.kw, j = t % g.kw;
      const double* crow = col + (static_cast<size_t>(c) * khw + t) * ncols;
      for (int n = 0; n < g.b; ++n) {
        double* plane = x + (static_cast<size_t>(n) * g.cin + c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + i;
          if (iy < 0 || iy >= g.h) continue;
          const double* src = crow + (static_cast<size_t>(n) * g.ho + oy) * g.wo;
          double* drow = plane + static_cast<size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + j;
            if (ix >= 0 && ix < g.w) drow[ix] += src[ox];
          }
        }
      }
    }
}

// y2d[co, n*ho*wo + q] <-> y[n, co, q]
void scatter_out(const double* y2d, int b, int cout, int hw, double* y) {
  for (int n = 0; n < b; ++n)
    for (int co = 0; co < cout; ++co)
      std::memcpy(y + (static_cast<size_t>(n) * cout + co) * hw,
                  y2d + (static_cast<size_t>(co) * b + n) * hw, sizeof(double) * hw);
}

void gather_out(const double* y, int b, int cout, int hw, double* y2d) {
  for (int n = 0; n < b; ++n)
    for (int co = 0; co < cout; ++co)
      std::memcpy(y2d + (static_cast<size_t>(co) * b + n) * hw,
                  y + (static_cast<size_t>(n) * cout + co) * hw, sizeof(double) * hw);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const ConvGeom g = conv_geom(x, w, stride, pad, "conv2d");
  if (b.defined())
    require(b.numel() == g.cout, "conv2d: bias length " + std::to_string(b.numel()) +
                                     " != out channels " + std::to_string(g.cout));
  const int k = g.cin * g.kh * g.kw;
  const size_t ncols = static_cast<size_t>(g.b) * g.ho * g.wo;
  const int hw = g.ho * g.wo;
  Tensor y = make_op({g.b, g.cout, g.ho, g.wo}, {x, w, b}, "conv2d");

  std::vector<double> col(static_cast<size_t>(k) * ncols);
  im2col(x.data(), g, col.data());
  std::vector<double> y2d(static_cast<size_t>(g.cout) * ncols);
  detail::gemm(false, false, g.cout, static_cast<int>(ncols), k, 1.0, w.data(), k, col.data(),
               static_cast<int>(ncols), 0.0, y2d.data(), static_cast<int>(ncols));
  scatter_out(y2d.data(), g.b, g.cout, hw, y.data());
  if (b.defined()) {
    auto& yv = y.vec();
    const auto& bv = b.vec();
    for (int n = 0; n < g.b; ++n)
      for (int co = 0; co < g.cout; ++co) {
        double* dst = yv.data() + (static_cast<size_t>(n) * g.cout + co) * hw;
        const double bb = bv[co];
        for (int q = 0; q < hw; ++q) dst[q] += bb;
      }
  }

  if (y.requires_grad()) {
    auto xn = x.node_, wn = w.node_;
    auto bnode = b.defined() ? b.node_ : nullptr;
    y.node_->backward_fn = [xn, wn, bnode, g, k, ncols, hw](Node& self) {
      std::vector<double> g2d(static_cast<size_t>(g.cout) * ncols);
      gather_out(self.grad.data(), g.b, g.cout, hw, g2d.data());
      if (wn->requires_grad || xn->requires_grad) {
        if (wn->requires_grad) {
          std::vector<double> col(static_cast<size_t>(k) * ncols);
          im2col(xn->value.data(), g, col.data());
          wn->ensure_grad();
          detail::gemm(false, true, g.cout, k, static_cast<int>(ncols), 1.0, g2d.data(),
                       static_cast<int>(ncols), col.data(), static_cast<int>(ncols), 1.0,
                       wn->grad.data(), k);
        }
        if (xn->requires_grad) {
          std::vector<double> dcol(static_cast<size_t>(k) * ncols);
          detail::gemm(true, false, k, static_cast<int>(ncols), g.cout, 1.0, wn->value.data(), k,
                       g2d.data(), static_cast<int>(ncols), 0.0, dcol.data(),
                       static_cast<int>(ncols));
          xn->ensure_grad();
          col2im(dcol.data(), g, xn->grad.data());
        }
      }
      if (bnode && bnode->requires_grad) {
        bnode->ensure_grad();
        for (int co = 0; co < g.cout; ++co) {
          double acc = 0.0;
          const double* src = g2d.data() + static_cast<size_t>(co) * ncols;
          for (size_t q = 0; q < ncols; ++q) acc += src[q];
          bnode->grad[co] += acc;
        }
      }
    };
  }
  return y;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  require(x.ndim() == 4 && w.ndim() == 4, "conv_transpose2d: expects 4-D input and weight");
  require(w.dim(0) == x.dim(1), "conv_transpose2d: input channels " + std::to_string(x.dim(1)) +
                                    " != weight in-channels " + std::to_string(w.dim(0)));
  const int bs = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int ho = (h - 1) * stride - 2 * pad + kh;
  const int wo = (wd - 1) * stride - 2 * pad + kw;
  require(ho > 0 && wo > 0, "conv_transpose2d: output would be empty");
  if (b.defined()) require(b.numel() == cout, "conv_transpose2d: bias length != out channels");

  // Geometry of the equivalent forward conv: y (the big map) convolved down to x.
  ConvGeom g;
  g.b = bs;
  g.cin = cout;
  g.h = ho;
  g.w = wo;
  g.cout = cin;
  g.kh = kh;
  g.kw = kw;
  g.stride = stride;
  g.pad = pad;
  g.ho = h;
  g.wo = wd;

  const int k = cout * kh * kw;
  const size_t ncols = static_cast<size_t>(bs) * h * wd;
  Tensor y = make_op({bs, cout, ho, wo}, {x, w, b}, "conv_transpose2d");

  std::vector<double> x2d(static_cast<size_t>(cin) * ncols);
  gather_out(x.data(), bs, cin, h * wd, x2d.data());
  std::vector<double> col(static_cast<size_t>(k) * ncols);
  // col = W^T [k, cin] * x2d [cin, ncols]; w is [cin, cout*kh*kw] row-major
  detail::gemm(true, false, k, static_cast<int>(ncols), cin, 1.0, w.data(), k, x2d.data(),
               static_cast<int>(ncols), 0.0, col.data(), static_cast<int>(ncols));
  col2im(col.data(), g, y.data());
  if (b.defined()) {
    auto& yv = y.vec();
    const auto& bv = b.vec();
    const int hwo = ho * wo;
    for (int n = 0; n < bs; ++n)
      for (int co = 0; co < cout; ++co) {
        double* dst = yv.data() + (static_cast<size_t>(n) * cout + co) * hwo;
        for (int q = 0; q < hwo; ++q) dst[q] += bv[co];
      }
  }

  if (y.requires_grad()) {
    auto xn = x.node_, wn = w.node_;
    auto bnode = b.defined() ? b.node_ : nullptr;
    y.node_->backward_fn = [xn, wn, bnode, g, bs, cin, cout, h, wd, ho, wo, k, ncols](Node& self) {
      std::vector<double> dcol(static_cast<size_t>(k) * ncols);
      im2col(self.grad.data(), g, dcol.data());
      if (xn->requires_grad) {
        std::vector<double> dx2d(static_cast<size_t>(cin) * ncols);
        detail::gemm(false, false, cin, static_cast<int>(ncols), k, 1.0, wn->value.data(), k,
                     dcol.data(), static_cast<int>(ncols), 0.0, dx2d.data(),
                     static_cast<int>(ncols));
        xn->ensure_grad();
        std::vector<double> dx(xn->value.size());
        scatter_out(dx2d.data(), bs, cin, h * wd, dx.data());
        axpy(xn->grad, dx);
      }
      if (wn->requires_grad) {
        std::vector<double> x2d(static_cast<size_t>(cin) * ncols);
        gather_out(xn->value.data(), bs, cin, h * wd, x2d.data());
        wn->ensure_grad();
        detail::gemm(false, true, cin, k, static_cast<int>(ncols), 1.0, x2d.data(),
                     static_cast<int>(ncols), dcol.data(), static_cast<int>(ncols), 1.0,
                     wn->grad.data(), k);
      }
      if (bnode && bnode->requires_grad) {
        bnode->ensure_grad();
        const int hwo = ho * wo;
        for (int n = 0; n < bs; ++n)
          for (int co = 0; co < cout; ++co) {
            const double* src = self.grad.data() + (static_cast<size_t>(n) * cout + co) * hwo;
            double acc = 0.0;
            for (int q = 0; q < hwo; ++q) acc += src[q];
            bnode->grad[co] += acc;
          }
      }
    };
  }
  return y;
}

namespace {

inline void bilinear_weights(double py, double px, int h, int w, int idx[4], double wt[4],
                             double dwy[4], double dwx[4]) {
  const int y0 = static_cast<int>(std::floor(py));
  const int x0 = static_cast<int>(std::floor(px));
  const double fy = py - y0, fx = px - x0;
  const double wy[2] = {1.0 - fy, fy};
  const double wx[2] = {1.0 - fx, fx};
  const double dy[2] = {-1.0, 1.0};
  const double dx[2] = {-1.0, 1.0};
  for (int a = 0; a < 2; ++a)
    for (int bq = 0; bq < 2; ++bq) {
      const int yy = y0 + a, xx = x0 + bq;
      const int t = a * 2 + bq;
      if (yy >= 0 && yy < h && xx >= 0 && xx < w) {
        idx[t] = yy * w + xx;
        wt[t] = wy[a] * wx[bq];
        dwy[t] = dy[a] * wx[bq];
        dwx[t] = wy[a] * dx[bq];
      } else {
        idx[t] = -1;
        wt[t] = dwy[t] = dwx[t] = 0.0;
      }
    }
}

}  // namespace

Tensor deform_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& offsets,
                     int pad) {
  const ConvGeom g = conv_geom(x, w, 1, pad, "deform_conv2d");
  require(offsets.ndim() == 4, "deform_conv2d: offsets must be 4-D");
  require(offsets.dim(1) == 2 * g.kh * g.kw,
          "deform_conv2d: offset channel count " + std::to_string(offsets.dim(1)) +
              " != 2*kH*kW = " + std::to_string(2 * g.kh * g.kw));
  require(offsets.dim(0) == g.b && offsets.dim(2) == g.ho && offsets.dim(3) == g.wo,
          "deform_conv2d: offsets " + shape_str(offsets.shape()) + " not aligned with output [" +
              std::to_string(g.b) + ",.," + std::to_string(g.ho) + "," + std::to_string(g.wo) + "]");
  if (b.defined()) require(b.numel() == g.cout, "deform_conv2d: bias length != out channels");

  const int k = g.cin * g.kh * g.kw;
  const int khw = g.kh * g.kw;
  const int hw = g.ho * g.wo;
  const size_t ncols = static_cast<size_t>(g.b) * hw;
  Tensor y = make_op({g.b, g.cout, g.ho, g.wo}, {x, w, b, offsets}, "deform_conv2d");

  // Sample the deformed im2col matrix. Offset channel 2*t is the y shift of
  // tap t, channel 2*t+1 the x shift (t = i*kW + j).
  auto build_col = [g, k, khw, hw, ncols](const double* xv, const double* ov,
                                          std::vector<double>& col) {
    col.assign(static_cast<size_t>(k) * ncols, 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int n = 0; n < g.b; ++n)
      for (int t = 0; t < khw; ++t) {
        const int i = t / g.kw, j = t % g.kw;
        const double* offy = ov + ((static_cast<size_t>(n) * 2 * khw + 2 * t) * hw);
        const double* offx = ov + ((static_cast<size_t>(n) * 2 * khw + 2 * t + 1) * hw);
        for (int q = 0; q < hw; ++q) {
          const int oy = q / g.wo, ox = q % g.wo;
          const double py = oy - g.pad + i + offy[q];
          const double px = ox - g.pad + j + offx[q];
          int idx[4];
          double wt[4], dwy[4], dwx[4];
          bilinear_weights(py, px, g.h, g.w, idx, wt, dwy, dwx);
          for (int c = 0; c < g.cin; ++c) {
            const double* plane = xv + (static_cast<size_t>(n) * g.cin + c) * g.h * g.w;
            double v = 0.0;
            for (int a = 0; a < 4; ++a)
              if (idx[a] >= 0) v += wt[a] * plane[idx[a]];
            col[(static_cast<size_t>(c) * khw + t) * ncols + static_cast<size_t>(n) * hw + q] = v;
          }
        }
      }
  };

  std::vector<double> col;
  build_col(x.data(), offsets.data(), col);
  std::vector<double> y2d(static_cast<size_t>(g.cout) * ncols);
  detail::gemm(false, false, g.cout, static_cast<int>(ncols), k, 1.0, w.data(), k, col.data(),
               static_cast<int>(ncols), 0.0, y2d.data(), static_cast<int>(ncols));
  scatter_out(y2d.data(), g.b, g.cout, hw, y.data());
  if (b.defined()) {
    auto& yv = y.vec();
    const auto& bv = b.vec();
    for (int n = 0; n < g.b; ++n)
      for (int co = 0; co < g.cout; ++co) {
        double* dst = yv.data() + (static_cast<size_t>(n) * g.cout + co) * hw;
        for (int q = 0; q < hw; ++q) dst[q] += bv[co];
      }
  }

  if (y.requires_grad()) {
    auto xn = x.node_, wn = w.node_, on = offsets.node_;
    auto bnode = b.defined() ? b.node_ : nullptr;
    y.node_->backward_fn = [xn, wn, bnode, on, g, k, khw, hw, ncols, build_col](Node& self) {
      std::vector<double> g2d(static_cast<size_t>(g.cout) * ncols);
      gather_out(self.grad.data(), g.b, g.cout, hw, g2d.data());

      if (wn->requires_grad) {
        std::vector<double> col;
        build_col(xn->value.data(), on->value.data(), col);
        wn->ensure_grad();
        detail::gemm(false, true, g.cout, k, static_cast<int>(ncols), 1.0, g2d.data(),
                     static_cast<int>(ncols), col.data(), static_cast<int>(ncols), 1.0,
                     wn->grad.data(), k);
      }
      if (xn->requires_grad || on->requires_grad) {
        std::vector<double> dcol(static_cast<size_t>(k) * ncols);
        detail::gemm(true, false, k, static_cast<int>(ncols), g.cout, 1.0, wn->value.data(), k,
                     g2d.data(), static_cast<int>(ncols), 0.0, dcol.data(),
                     static_cast<int>(ncols));
        if (xn->requires_grad) xn->ensure_grad();
        if (on->requires_grad) on->ensure_grad();
        const double* xv = xn->value.data();
        const double* ov = on->value.data();
        for (int n = 0; n < g.b; ++n)
          for (int t = 0; t < khw; ++t) {
            const int i = t / g.kw, j = t % g.kw;
            const size_t oy_off = (static_cast<size_t>(n) * 2 * khw + 2 * t) * hw;
            const size_t ox_off = (static_cast<size_t>(n) * 2 * khw + 2 * t + 1) * hw;
            for (int q = 0; q < hw; ++q) {
              const int oy = q / g.wo, ox = q % g.wo;
              const double py = oy - g.pad + i + ov[oy_off + q];
              const double px = ox - g.pad + j + ov[ox_off + q];
              int idx[4];
              double wt[4], dwy[4], dwx[4];
              bilinear_weights(py, px, g.h, g.w, idx, wt, dwy, dwx);
              double acc_y = 0.0, acc_x = 0.0;
              for (int c = 0; c < g.cin; ++c) {
                const double gcol =
                    dcol[(static_cast<size_t>(c) * khw + t) * ncols + static_cast<size_t>(n) * hw + q];
                if (gcol == 0.0) continue;
                const double* plane = xv + (static_cast<size_t>(n) * g.cin + c) * g.h * g.w;
                if (xn->requires_grad) {
                  double* gplane =
                      xn->grad.data() + (static_cast<size_t>(n) * g.cin + c) * g.h * g.w;
                  for (int a = 0; a < 4; ++a)
                    if (idx[a] >= 0) gplane[idx[a]] += gcol * wt[a];
                }
                if (on->requires_grad) {
                  for (int a = 0; a < 4; ++a)
                    if (idx[a] >= 0) {
                      acc_y += gcol * dwy[a] * plane[idx[a]];
                      acc_x += gcol * dwx[a] * plane[idx[a]];
                    }
                }
              }
              if (on->requires_grad) {
                on->grad[oy_off + q] += acc_y;
                on->grad[ox_off + q] += acc_x;
              }
            }
          }
      }
      if (bnode && bnode->requires_grad) {
        bnode->ensure_grad();
        for (int co = 0; co < g.cout; ++co) {
          const double* src = g2d.data() + static_cast<size_t>(co) * ncols;
          double acc = 0.0;
          for (size_t q = 0; q < ncols; ++q) acc += src[q];
          bnode->grad[co] += acc;
        }
      }
    };
  }
  return y;
}

// ---------------------------------------------------------------------------
// pooling / normalisation

Tensor global_avg_pool2d(const Tensor& x) {
  require(x.ndim() == 4, "global_avg_pool2d: expects a 4-D tensor");
  const int b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y = make_op({b, c}, {x}, "global_avg_pool2d");
  const double inv = 1.0 / hw;
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch) {
      const double* src = x.data() + (static_cast<size_t>(n) * c + ch) * hw;
      double acc = 0.0;
      for (int q = 0; q < hw; ++q) acc += src[q];
      y.vec()[static_cast<size_t>(n) * c + ch] = acc * inv;
    }
  if (y.requires_grad()) {
    auto xn = x.node_;
    y.node_->backward_fn = [xn, b, c, hw, inv](Node& self) {
      xn->ensure_grad();
      for (int n = 0; n < b; ++n)
        for (int ch = 0; ch < c; ++ch) {
          const double gv = self.grad[static_cast<size_t>(n) * c + ch] * inv;
          double* dst = xn->grad.data() + (static_cast<size_t>(n) * c + ch) * hw;
          for (int q = 0; q < hw; ++q) dst[q] += gv;
        }
    };
  }
  return y;
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<double>* running_mean, std::vector<double>* running_var,
                   bool training, double momentum, double eps) {
  require(x.ndim() == 4, "batchnorm2d: expects a 4-D tensor");
  const int b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(gamma.numel() == c && beta.numel() == c, "batchnorm2d: affine params must have C entries");
  const int64_t n_per_c = static_cast<int64_t>(b) * hw;

  auto mean_v = std::make_shared<std::vector<double>>(c, 0.0);
  auto var_v = std::make_shared<std::vector<double>>(c, 0.0);
  if (training) {
    for (int ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (int n = 0; n < b; ++n) {
        const double* src = x.data() + (static_cast<size_t>(n) * c + ch) * hw;
        for (int q = 0; q < hw; ++q) acc += src[q];
      }
      const double m = acc / n_per_c;
      double vacc = 0.0;
      for (int n = 0; n < b; ++n) {
        const double* src = x.data() + (static_cast<size_t>(n) * c + ch) * hw;
        for (int q = 0; q < hw; ++q) {
          const double d = src[q] - m;
          vacc += d * d;
        }
      }
      (*mean_v)[ch] = m;
      (*var_v)[ch] = vacc / n_per_c;
    }
    if (running_mean && running_var) {
      require(running_mean->size() == static_cast<size_t>(c) &&
                  running_var->size() == static_cast<size_t>(c),
              "batchnorm2d: running stats must have C entries");
      for (int ch = 0; ch < c; ++ch) {
        (*running_mean)[ch] = momentum * (*running_mean)[ch] + (1.0 - momentum) * (*mean_v)[ch];
        (*running_var)[ch] = momentum * (*running_var)[ch] + (1.0 - momentum) * (*var_v)[ch];
      }
    }
  } else {
    require(running_mean && running_var, "batchnorm2d: eval mode requires running stats");
    *mean_v = *running_mean;
    *var_v = *running_var;
  }

  Tensor y = make_op(x.shape(), {x, gamma, beta}, "batchnorm2d");
  auto xhat = std::make_shared<std::vector<double>>(x.vec().size());
  {
    const auto& gv = gamma.vec();
    const auto& bv = beta.vec();
    for (int ch = 0; ch < c; ++ch) {
      const double inv_std = 1.0 / std::sqrt((*var_v)[ch] + eps);
      const double m = (*mean_v)[ch];
      for (int n = 0; n < b; ++n) {
        const double* src = x.data() + (static_cast<size_t>(n) * c + ch) * hw;
        double* xh = xhat->data() + (static_cast<size_t>(n) * c + ch) * hw;
        double* dst = y.data() + (static_cast<size_t>(n) * c + ch) * hw;
        for (int q = 0; q < hw; ++q) {
          xh[q] = (src[q] - m) * inv_std;
          dst[q] = gv[ch] * xh[q] + bv[ch];
        }
      }
    }
  }

  if (y.requires_grad()) {
    auto xn = x.node_, gn = gamma.node_, bn = beta.node_;
    y.node_->backward_fn = [xn, gn, bn, xhat, var_v, training, b, c, hw, n_per_c, eps](Node& self) {
      for (int ch = 0; ch < c; ++ch) {
        const double inv_std = 1.0 / std::sqrt((*var_v)[ch] + eps);
        double sum_g = 0.0, sum_gx = 0.0;
        for (int n = 0; n < b; ++n) {
          const double* gp = self.grad.data() + (static_cast<size_t>(n) * c + ch) * hw;
          const double* xh = xhat->data() + (static_cast<size_t>(n) * c + ch) * hw;
          for (int q = 0; q < hw; ++q) {
            sum_g += gp[q];
            sum_gx += gp[q] * xh[q];
          }
        }
        if (gn->requires_grad) {
          gn->ensure_grad();
          gn->grad[ch] += sum_gx;
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          bn->grad[ch] += sum_g;
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          const double gam = gn->value[ch];
          if (training) {
            const double inv_n = 1.0 / static_cast<double>(n_per_c);
            for (int n = 0; n < b; ++n) {
              const double* gp = self.grad.data() + (static_cast<size_t>(n) * c + ch) * hw;
              const double* xh = xhat->data() + (static_cast<size_t>(n) * c + ch) * hw;
              double* dst = xn->grad.data() + (static_cast<size_t>(n) * c + ch) * hw;
              for (int q = 0; q < hw; ++q)
                dst[q] += gam * inv_std * (gp[q] - inv_n * sum_g - xh[q] * inv_n * sum_gx);
            }
          } else {
            for (int n = 0; n < b; ++n) {
              const double* gp = self.grad.data() + (static_cast<size_t>(n) * c + ch) * hw;
              double* dst = xn->grad.data() + (static_cast<size_t>(n) * c + ch) * hw;
              for (int q = 0; q < hw; ++q) dst[q] += gam * inv_std * gp[q];
            }
          }
        }
      }
    };
  }
  return y;
}

// ---------------------------------------------------------------------------
// grid sample

Tensor grid_sample(const Tensor& x, const Tensor& grid) {
  require(x.ndim() == 4, "grid_sample: input must be 4-D");
  require(grid.ndim() == 4 && grid.dim(3) == 2,
          "grid_sample: grid must be [B,H,W,2], got " + shape_str(grid.shape()));
  require(grid.dim(0) == x.dim(0), "grid_sample: batch mismatch");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = grid.dim(1), wo = grid.dim(2);
  Tensor y = make_op({b, c, ho, wo}, {x, grid}, "grid_sample");

  const auto& gv = grid.vec();
  const auto& xv = x.vec();
  auto& yv = y.vec();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int n = 0; n < b; ++n)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const size_t gi = ((static_cast<size_t>(n) * ho + oy) * wo + ox) * 2;
        const double px = ((gv[gi] + 1.0) * w - 1.0) * 0.5;
        const double py = ((gv[gi + 1] + 1.0) * h - 1.0) * 0.5;
        int idx[4];
        double wt[4], dwy[4], dwx[4];
        bilinear_weights(py, px, h, w, idx, wt, dwy, dwx);
        for (int ch = 0; ch < c; ++ch) {
          const double* plane = xv.data() + (static_cast<size_t>(n) * c + ch) * h * w;
          double v = 0.0;
          for (int a = 0; a < 4; ++a)
            if (idx[a] >= 0) v += wt[a] * plane[idx[a]];
          yv[((static_cast<size_t>(n) * c + ch) * ho + oy) * wo + ox] = v;
        }
      }

  if (y.requires_grad()) {
    auto xn = x.node_, gn = grid.node_;
    y.node_->backward_fn = [xn, gn, b, c, h, w, ho, wo](Node& self) {
      if (xn->requires_grad) xn->ensure_grad();
      if (gn->requires_grad) gn->ensure_grad();
      const auto& gv = gn->value;
      for (int n = 0; n < b; ++n)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            const size_t gi = ((static_cast<size_t>(n) * ho + oy) * wo + ox) * 2;
            const double px = ((gv[gi] + 1.0) * w - 1.0) * 0.5;
            const double py = ((gv[gi + 1] + 1.0) * h - 1.0) * 0.5;
            int idx[4];
            double wt[4], dwy[4], dwx[4];
            bilinear_weights(py, px, h, w, idx, wt, dwy, dwx);
            double acc_x = 0.0, acc_y = 0.0;
            for (int ch = 0; ch < c; ++ch) {
              const double go = self.grad[((static_cast<size_t>(n) * c + ch) * ho + oy) * wo + ox];
              if (go == 0.0) continue;
              const double* plane = xn->value.data() + (static_cast<size_t>(n) * c + ch) * h * w;
              if (xn->requires_grad) {
                double* gplane = xn->grad.data() + (static_cast<size_t>(n) * c + ch) * h * w;
                for (int a = 0; a < 4; ++a)
                  if (idx[a] >= 0) gplane[idx[a]] += go * wt[a];
              }
              if (gn->requires_grad) {
                for (int a = 0; a < 4; ++a)
                  if (idx[a] >= 0) {
                    acc_y += go * dwy[a] * plane[idx[a]];
                    acc_x += go * dwx[a] * plane[idx[a]];
                  }
              }
            }
            if (gn->requires_grad) {
              gn->grad[gi] += acc_x * (0.5 * w);
              gn->grad[gi + 1] += acc_y * (0.5 * h);
            }
          }
    };
  }
  return y;
}

// ---------------------------------------------------------------------------
// losses

Tensor l1_loss(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred, gt, "l1_loss");
  Tensor y = make_op({1}, {pred, gt}, "l1_loss");
  const auto& pv = pred.vec();
  const auto& gv = gt.vec();
  double acc = 0.0;
  for (size_t i = 0; i < pv.size(); ++i) acc += std::abs(pv[i] - gv[i]);
  const double inv = 1.0 / static_cast<double>(pred.numel());
  y.vec()[0] = acc * inv;
  if (y.requires_grad()) {
    auto pn = pred.node_, gn = gt.node_;
    y.node_->backward_fn = [pn, gn, inv](Node& self) {
      const double g = self.grad[0] * inv;
      for (size_t i = 0; i < pn->value.size(); ++i) {
        const double d = pn->value[i] - gn->value[i];
        const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        if (pn->requires_grad) {
          pn->ensure_grad();
          pn->grad[i] += g * s;
        }
        if (gn->requires_grad) {
          gn->ensure_grad();
          gn->grad[i] -= g * s;
        }
      }
    };
  }
  return y;
}

Tensor mse_loss(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred, gt, "mse_loss");
  Tensor y = make_op({1}, {pred, gt}, "mse_loss");
  const auto& pv = pred.vec();
  const auto& gv = gt.vec();
  double acc = 0.0;
  for (size_t i = 0; i < pv.size(); ++i) {
    const double d = pv[i] - gv[i];
    acc += d * d;
  }
  const double inv = 1.0 / static_cast<double>(pred.numel());
  y.vec()[0] = acc * inv;
  if (y.requires_grad()) {
    auto pn = pred.node_, gn = gt.node_;
    y.node_->backward_fn = [pn, gn, inv](Node& self) {
      const double g = self.grad[0] * inv * 2.0;
      for (size_t i = 0; i < pn->value.size(); ++i) {
        const double d = pn->value[i] - gn->value[i];
        if (pn->requires_grad) {
          pn->ensure_grad();
          pn->grad[i] += g * d;
        }
        if (gn->requires_grad) {
          gn->ensure_grad();
          gn->grad[i] -= g * d;
        }
      }
    };
  }
  return y;
}

Tensor bce_with_logits(const Tensor& logits, double target) {
  require(target == 0.0 || target == 1.0, "bce_with_logits: target must be 0 or 1");
  Tensor y = make_op({1}, {logits}, "bce_with_logits");
  const auto& zv = logits.vec();
  double acc = 0.0;
  for (double z : zv) acc += std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::abs(z)));
  const double inv = 1.0 / static_cast<double>(logits.numel());
  y.vec()[0] = acc * inv;
  if (y.requires_grad()) {
    auto zn = logits.node_;
    y.node_->backward_fn = [zn, target, inv](Node& self) {
      zn->ensure_grad();
      const double g = self.grad[0] * inv;
      for (size_t i = 0; i < zn->value.size(); ++i) {
        const double z = zn->value[i];
        const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        zn->grad[i] += g * (s - target);
      }
    };
  }
  return y;
}

}  // namespace latx
