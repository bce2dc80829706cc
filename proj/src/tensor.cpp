#include "bevfuse/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace bevfuse {

namespace {

std::int64_t shape_size(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int e : shape) {
    BEVFUSE_CHECK(e >= 0, ShapeError, "negative extent");
    n *= e;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<std::size_t>(shape_size(shape_)), 0.0);
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * stddev;
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
  Tensor t(std::move(shape));
  BEVFUSE_CHECK(t.size() == static_cast<std::int64_t>(values.size()), ShapeError,
                "value count does not match shape");
  std::copy(values.begin(), values.end(), t.data());
  return t;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor& Tensor::add_(const Tensor& o) {
  check_same_shape(*this, o, "add_");
  for (std::int64_t i = 0; i < size(); ++i) data_[static_cast<std::size_t>(i)] += o[i];
  return *this;
}

Tensor& Tensor::scale_(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  if (!a.same_shape(b)) {
    std::ostringstream os;
    os << where << ": shape mismatch [";
    for (int e : a.shape()) os << e << " ";
    os << "] vs [";
    for (int e : b.shape()) os << e << " ";
    os << "]";
    throw ShapeError(os.str());
  }
}

void debug_check_finite(const Tensor& t, const char* where) {
#ifndef NDEBUG
  if (!t.all_finite()) throw ValueError(std::string(where) + ": non-finite output");
#else
  (void)t;
  (void)where;
#endif
}

// ---- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  BEVFUSE_CHECK(a.rank() == 2 && b.rank() == 2, ShapeError, "matmul: rank-2 inputs required");
  BEVFUSE_CHECK(a.extent(1) == b.extent(0), ShapeError, "matmul: inner extents differ");
  const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      if (av == 0.0) continue;
      const double* brow = b.data() + static_cast<std::size_t>(p) * n;
      double* orow = out.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  debug_check_finite(out, "matmul");
  return out;
}

void matmul_backward(const Tensor& gout, const Tensor& a, const Tensor& b, Tensor& ga, Tensor& gb) {
  const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
  BEVFUSE_CHECK(gout.extent(0) == m && gout.extent(1) == n, ShapeError, "matmul_backward: bad gout");
  check_same_shape(ga, a, "matmul_backward ga");
  check_same_shape(gb, b, "matmul_backward gb");
  // ga = gout * b^T
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      double s = 0.0;
      const double* grow = gout.data() + static_cast<std::size_t>(i) * n;
      const double* brow = b.data() + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
      ga.at(i, p) += s;
    }
  // gb = a^T * gout
  for (int p = 0; p < k; ++p)
    for (int i = 0; i < m; ++i) {
      const double av = a.at(i, p);
      if (av == 0.0) continue;
      const double* grow = gout.data() + static_cast<std::size_t>(i) * n;
      double* gbrow = gb.data() + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
    }
}

// ---- conv2d ---------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  BEVFUSE_CHECK(x.rank() == 3, ShapeError, "conv2d: input must be [C,H,W]");
  BEVFUSE_CHECK(w.rank() == 4, ShapeError, "conv2d: weight must be [Cout,Cin,kh,kw]");
  BEVFUSE_CHECK(w.extent(1) == x.extent(0), ShapeError, "conv2d: channel mismatch");
  BEVFUSE_CHECK(b.rank() == 1 && b.extent(0) == w.extent(0), ShapeError, "conv2d: bad bias");
  const int cin = x.extent(0), h = x.extent(1), wd = x.extent(2);
  const int cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  BEVFUSE_CHECK(kh % 2 == 1 && kw % 2 == 1, ShapeError, "conv2d: odd kernel extents required");
  BEVFUSE_CHECK(stride >= 1 && pad >= 0, ShapeError, "conv2d: bad stride/pad");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  BEVFUSE_CHECK(ho >= 1 && wo >= 1, ShapeError, "conv2d: empty output");

  Tensor out({cout, ho, wo});
  for (int oc = 0; oc < cout; ++oc) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double s = b.at(oc);
        const int y0 = oy * stride - pad;
        const int x0 = ox * stride - pad;
        for (int ic = 0; ic < cin; ++ic)
          for (int ky = 0; ky < kh; ++ky) {
            const int yy = y0 + ky;
            if (yy < 0 || yy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int xx = x0 + kx;
              if (xx < 0 || xx >= wd) continue;
              s += x.at(ic, yy, xx) * w.at(oc, ic, ky, kx);
            }
          }
        out.at(oc, oy, ox) = s;
      }
    }
  }
  debug_check_finite(out, "conv2d");
  return out;
}

void conv2d_backward(const Tensor& gout, const Tensor& x, const Tensor& w, int stride, int pad,
                     Tensor& gx, Tensor& gw, Tensor& gb) {
  const int cin = x.extent(0), h = x.extent(1), wd = x.extent(2);
  const int cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  const int ho = gout.extent(1), wo = gout.extent(2);
  BEVFUSE_CHECK(gout.extent(0) == cout, ShapeError, "conv2d_backward: bad gout");
  for (int oc = 0; oc < cout; ++oc) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const double g = gout.at(oc, oy, ox);
        if (g == 0.0) continue;
        gb.at(oc) += g;
        const int y0 = oy * stride - pad;
        const int x0 = ox * stride - pad;
        for (int ic = 0; ic < cin; ++ic)
          for (int ky = 0; ky < kh; ++ky) {
            const int yy = y0 + ky;
            if (yy < 0 || yy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int xx = x0 + kx;
              if (xx < 0 || xx >= wd) continue;
              gw.at(oc, ic, ky, kx) += g * x.at(ic, yy, xx);
              gx.at(ic, yy, xx) += g * w.at(oc, ic, ky, kx);
            }
          }
      }
    }
  }
}

// ---- softmax ----------------------------------------------------------------

namespace {

// Iterates the tensor as [outer, axis_extent, inner].
struct AxisView {
  std::int64_t outer, extent, inner;
};

AxisView axis_view(const Tensor& x, int axis) {
  BEVFUSE_CHECK(axis >= 0 && axis < x.rank(), ShapeError, "bad axis");
  AxisView v{1, x.extent(axis), 1};
  for (int i = 0; i < axis; ++i) v.outer *= x.extent(i);
  for (int i = axis + 1; i < x.rank(); ++i) v.inner *= x.extent(i);
  return v;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const AxisView v = axis_view(x, axis);
  Tensor out(x.shape());
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t in = 0; in < v.inner; ++in) {
      const std::int64_t base = o * v.extent * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t a = 0; a < v.extent; ++a) mx = std::max(mx, x[base + a * v.inner]);
      double sum = 0.0;
      for (std::int64_t a = 0; a < v.extent; ++a) {
        const double e = std::exp(x[base + a * v.inner] - mx);
        out[base + a * v.inner] = e;
        sum += e;
      }
      for (std::int64_t a = 0; a < v.extent; ++a) out[base + a * v.inner] /= sum;
    }
  debug_check_finite(out, "softmax");
  return out;
}

void softmax_backward(const Tensor& gout, const Tensor& y, int axis, Tensor& gx) {
  check_same_shape(gout, y, "softmax_backward");
  check_same_shape(gx, y, "softmax_backward gx");
  const AxisView v = axis_view(y, axis);
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t in = 0; in < v.inner; ++in) {
      const std::int64_t base = o * v.extent * v.inner + in;
      double dot = 0.0;
      for (std::int64_t a = 0; a < v.extent; ++a)
        dot += gout[base + a * v.inner] * y[base + a * v.inner];
      for (std::int64_t a = 0; a < v.extent; ++a)
        gx[base + a * v.inner] += y[base + a * v.inner] * (gout[base + a * v.inner] - dot);
    }
}

// ---- pointwise ----------------------------------------------------------------

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return out;
}

void relu_backward(const Tensor& gout, const Tensor& x, Tensor& gx) {
  check_same_shape(gout, x, "relu_backward");
  for (std::int64_t i = 0; i < x.size(); ++i)
    if (x[i] > 0.0) gx[i] += gout[i];
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
  debug_check_finite(out, "sigmoid");
  return out;
}

void sigmoid_backward(const Tensor& gout, const Tensor& y, Tensor& gx) {
  check_same_shape(gout, y, "sigmoid_backward");
  for (std::int64_t i = 0; i < y.size(); ++i) gx[i] += gout[i] * y[i] * (1.0 - y[i]);
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  BEVFUSE_CHECK(x.rank() == 3, ShapeError, "channel_affine: input must be [C,H,W]");
  BEVFUSE_CHECK(gamma.rank() == 1 && gamma.extent(0) == x.extent(0), ShapeError,
                "channel_affine: bad gamma");
  check_same_shape(gamma, beta, "channel_affine gamma/beta");
  const std::int64_t hw = static_cast<std::int64_t>(x.extent(1)) * x.extent(2);
  Tensor out(x.shape());
  for (int c = 0; c < x.extent(0); ++c) {
    const double g = gamma.at(c), b = beta.at(c);
    const double* xs = x.data() + c * hw;
    double* os = out.data() + c * hw;
    for (std::int64_t i = 0; i < hw; ++i) os[i] = g * xs[i] + b;
  }
  return out;
}

void channel_affine_backward(const Tensor& gout, const Tensor& x, const Tensor& gamma,
                             Tensor& gx, Tensor& ggamma, Tensor& gbeta) {
  check_same_shape(gout, x, "channel_affine_backward");
  const std::int64_t hw = static_cast<std::int64_t>(x.extent(1)) * x.extent(2);
  for (int c = 0; c < x.extent(0); ++c) {
    const double g = gamma.at(c);
    const double* xs = x.data() + c * hw;
    const double* gs = gout.data() + c * hw;
    double* gxs = gx.data() + c * hw;
    double sg = 0.0, sb = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) {
      gxs[i] += g * gs[i];
      sg += gs[i] * xs[i];
      sb += gs[i];
    }
    ggamma.at(c) += sg;
    gbeta.at(c) += sb;
  }
}

// ---- gradient checking ----------------------------------------------------

double grad_check(const std::function<double(const Tensor&)>& f, const Tensor& x,
                  const Tensor& analytic_grad, double eps) {
  check_same_shape(x, analytic_grad, "grad_check");
  {
    const double fx = f(x);
    BEVFUSE_CHECK(std::isfinite(fx), ValueError, "grad_check: f(x) is non-finite");
  }
  Tensor xp = x;
  double worst = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + eps;
    const double fp = f(xp);
    xp[i] = orig - eps;
    const double fm = f(xp);
    xp[i] = orig;
    BEVFUSE_CHECK(std::isfinite(fp) && std::isfinite(fm), ValueError,
                  "grad_check: perturbed evaluation is non-finite");
    const double numeric = (fp - fm) / (2.0 * eps);
    const double analytic = analytic_grad[i];
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
    worst = std::max(worst, std::fabs(analytic - numeric) / denom);
  }
  return worst;
}

// ---- serialization ----------------------------------------------------------

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  BEVFUSE_CHECK(is.good(), IoError, "tensor read: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) write_u32(os, static_cast<std::uint32_t>(t.extent(i)));
  static_assert(sizeof(double) == 8);
  os.write(reinterpret_cast<const char*>(t.data()), t.size() * 8);
  BEVFUSE_CHECK(os.good(), IoError, "tensor write failed");
}

Tensor read_tensor(std::istream& is) {
  const std::uint32_t rank = read_u32(is);
  BEVFUSE_CHECK(rank <= 8, IoError, "tensor read: implausible rank");
  std::vector<int> shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(read_u32(is));
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.data()), t.size() * 8);
  BEVFUSE_CHECK(is.good(), IoError, "tensor read: truncated data");
  return t;
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  BEVFUSE_CHECK(os.is_open(), IoError, "cannot open for write: " + path);
  write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  BEVFUSE_CHECK(is.is_open(), IoError, "cannot open for read: " + path);
  return read_tensor(is);
}

}  // namespace bevfuse
