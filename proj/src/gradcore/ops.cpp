#include "refuseg/gradcore/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace refuseg::grad {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void expect_rank(const Shape& shape, size_t rank, const char* op, const char* what) {
  require(shape.size() == rank, ErrorKind::dimension,
          std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
              shape_string(shape));
}

void expect_same(const Shape& a, const Shape& b, const char* op) {
  require(a == b, ErrorKind::dimension,
          std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

template <class T>
BasicTensor<T> make(Shape shape, std::vector<T> data) {
  BasicTensor<T> out;
  out.shape = std::move(shape);
  out.data = std::move(data);
  return out;
}

// Elementwise op with a local derivative: grad_in[i] += grad_out[i] * d(i).
template <class T, class Fwd, class Deriv>
Var<T> unary(std::string_view kind, Var<T> x, Fwd fwd, Deriv deriv) {
  auto& tape = x.tape();
  const auto& xv = x.value();
  std::vector<T> out(xv.data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(fwd(static_cast<double>(xv.data[i])));
  const int32_t xi = x.id();
  return tape.record(kind, make<T>(xv.shape, std::move(out)), {xi},
                     [xi, deriv](Tape<T>& t, int32_t self) {
                       const auto& g = t.grad(self);
                       const auto& xd = t.value(xi).data;
                       const auto& yd = t.value(self).data;
                       auto& gx = t.grad(xi);
                       for (size_t i = 0; i < g.size(); ++i)
                         gx[i] += static_cast<T>(static_cast<double>(g[i]) *
                                                 deriv(static_cast<double>(xd[i]),
                                                       static_cast<double>(yd[i])));
                     });
}

template <class T>
void im2col(const T* image, int64_t channels, int64_t height, int64_t width, int64_t kh,
            int64_t kw, int stride, int padding, int64_t out_h, int64_t out_w, MatD& cols) {
  cols.resize(channels * kh * kw, out_h * out_w);
  for (int64_t c = 0; c < channels; ++c) {
    const T* plane = image + c * height * width;
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        double* row = cols.data() + ((c * kh + ki) * kw + kj) * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
          const int64_t iy = oy * stride - padding + ki;
          double* dst = row + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(dst, dst + out_w, 0.0);
            continue;
          }
          for (int64_t ox = 0; ox < out_w; ++ox) {
            const int64_t ix = ox * stride - padding + kj;
            dst[ox] = (ix < 0 || ix >= width) ? 0.0 : static_cast<double>(plane[iy * width + ix]);
          }
        }
      }
    }
  }
}

void col2im_add(const MatD& cols, int64_t channels, int64_t height, int64_t width, int64_t kh,
                int64_t kw, int stride, int padding, int64_t out_h, int64_t out_w, double* image) {
  for (int64_t c = 0; c < channels; ++c) {
    double* plane = image + c * height * width;
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const double* row = cols.data() + ((c * kh + ki) * kw + kj) * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
          const int64_t iy = oy * stride - padding + ki;
          if (iy < 0 || iy >= height) continue;
          for (int64_t ox = 0; ox < out_w; ++ox) {
            const int64_t ix = ox * stride - padding + kj;
            if (ix >= 0 && ix < width) plane[iy * width + ix] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

template <class T>
MatD to_matrix(const std::vector<T>& data, int64_t rows, int64_t cols) {
  MatD m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

}  // namespace

// --- conv2d -----------------------------------------------------------------

template <class T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int stride, int padding) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  expect_rank(xs, 4, "conv2d", "input");
  expect_rank(ws, 4, "conv2d", "weight");
  expect_rank(bias.shape(), 1, "conv2d", "bias");
  const int64_t batch = xs[0], cin = xs[1], height = xs[2], width = xs[3];
  const int64_t cout = ws[0], kh = ws[2], kw = ws[3];
  require(ws[1] == cin, ErrorKind::dimension,
          "conv2d: weight expects " + std::to_string(ws[1]) + " input channels, input has " +
              std::to_string(cin));
  require(bias.dim(0) == cout, ErrorKind::dimension,
          "conv2d: bias has " + std::to_string(bias.dim(0)) + " entries for " +
              std::to_string(cout) + " output channels");
  require(kh % 2 == 1 && kw % 2 == 1, ErrorKind::configuration, "conv2d: kernel extents must be odd");
  require(stride >= 1 && padding >= 0, ErrorKind::configuration, "conv2d: invalid stride/padding");
  const int64_t span_h = height + 2 * padding - kh;
  const int64_t span_w = width + 2 * padding - kw;
  require(span_h >= 0 && span_w >= 0 && span_h % stride == 0 && span_w % stride == 0,
          ErrorKind::configuration,
          "conv2d: output extent is not a positive integer for input " + shape_string(xs) +
              ", kernel " + std::to_string(kh) + "x" + std::to_string(kw) + ", stride " +
              std::to_string(stride) + ", padding " + std::to_string(padding));
  const int64_t out_h = span_h / stride + 1;
  const int64_t out_w = span_w / stride + 1;
  const int64_t plane = out_h * out_w;

  const MatD wmat = to_matrix(weight.value().data, cout, cin * kh * kw);
  const auto& bv = bias.value().data;
  const auto& xv = x.value().data;
  std::vector<T> out(static_cast<size_t>(batch * cout * plane));
  MatD cols;
  MatD result;
  for (int64_t b = 0; b < batch; ++b) {
    im2col(xv.data() + b * cin * height * width, cin, height, width, kh, kw, stride, padding,
           out_h, out_w, cols);
    result.noalias() = wmat * cols;
    T* dst = out.data() + b * cout * plane;
    for (int64_t o = 0; o < cout; ++o)
      for (int64_t p = 0; p < plane; ++p)
        dst[o * plane + p] = static_cast<T>(result(o, p) + static_cast<double>(bv[o]));
  }

  const int32_t xi = x.id(), wi = weight.id(), bi = bias.id();
  return x.tape().record(
      "conv2d", make<T>({batch, cout, out_h, out_w}, std::move(out)), {xi, wi, bi},
      [=](Tape<T>& t, int32_t self) {
        const auto& g = t.grad(self);
        const auto& xdata = t.value(xi).data;
        const bool need_x = t.needs_grad(xi), need_w = t.needs_grad(wi), need_b = t.needs_grad(bi);
        const MatD wm = to_matrix(t.value(wi).data, cout, cin * kh * kw);
        MatD dw = MatD::Zero(cout, cin * kh * kw);
        std::vector<double> db(static_cast<size_t>(cout), 0.0);
        std::vector<double> dx_plane;
        MatD cols_b, gmat(cout, plane), dcols;
        for (int64_t b = 0; b < batch; ++b) {
          const T* gb = g.data() + b * cout * plane;
          for (int64_t i = 0; i < cout * plane; ++i) gmat.data()[i] = static_cast<double>(gb[i]);
          if (need_b)
            for (int64_t o = 0; o < cout; ++o) db[o] += gmat.row(o).sum();
          if (need_w) {
            im2col(xdata.data() + b * cin * height * width, cin, height, width, kh, kw, stride,
                   padding, out_h, out_w, cols_b);
            dw.noalias() += gmat * cols_b.transpose();
          }
          if (need_x) {
            dcols.noalias() = wm.transpose() * gmat;
            dx_plane.assign(static_cast<size_t>(cin * height * width), 0.0);
            col2im_add(dcols, cin, height, width, kh, kw, stride, padding, out_h, out_w,
                       dx_plane.data());
            auto& gx = t.grad(xi);
            T* dst = gx.data() + b * cin * height * width;
            for (size_t i = 0; i < dx_plane.size(); ++i) dst[i] += static_cast<T>(dx_plane[i]);
          }
        }
        if (need_w) {
          auto& gw = t.grad(wi);
          for (size_t i = 0; i < gw.size(); ++i) gw[i] += static_cast<T>(dw.data()[i]);
        }
        if (need_b) {
          auto& gb = t.grad(bi);
          for (size_t i = 0; i < gb.size(); ++i) gb[i] += static_cast<T>(db[i]);
        }
      });
}

// --- batchnorm ----------------------------------------------------------------

template <class T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> shift, BasicTensor<T>& running_mean,
                 BasicTensor<T>& running_var, const BatchNormOptions& options) {
  const auto& xs = x.shape();
  require(xs.size() == 2 || xs.size() == 4, ErrorKind::dimension,
          "batchnorm: input must be [B,C] or [B,C,H,W], got " + shape_string(xs));
  require(options.eps > 0.0, ErrorKind::configuration, "batchnorm: eps must be positive");
  const int64_t batch = xs[0], channels = xs[1];
  const int64_t spatial = xs.size() == 4 ? xs[2] * xs[3] : 1;
  const int64_t count = batch * spatial;
  for (const Shape* p : std::initializer_list<const Shape*>{&gamma.shape(), &shift.shape(), &running_mean.shape, &running_var.shape})
    require(*p == Shape{channels}, ErrorKind::dimension,
            "batchnorm: per-channel parameter has shape " + shape_string(*p) + ", expected [" +
                std::to_string(channels) + "]");
  if (options.training)
    require(count >= 2, ErrorKind::degenerate_batch,
            "batchnorm: training needs at least 2 values per channel, got " + std::to_string(count));

  const auto& xv = x.value().data;
  std::vector<double> mean(static_cast<size_t>(channels)), inv_std(static_cast<size_t>(channels));
  for (int64_t c = 0; c < channels; ++c) {
    if (options.training) {
      double s = 0.0;
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t p = 0; p < spatial; ++p) s += xv[(b * channels + c) * spatial + p];
      const double m = s / static_cast<double>(count);
      double ss = 0.0;
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t p = 0; p < spatial; ++p) {
          const double d = xv[(b * channels + c) * spatial + p] - m;
          ss += d * d;
        }
      const double var = ss / static_cast<double>(count);
      mean[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + options.eps);
      const double unbiased = ss / static_cast<double>(count - 1);
      running_mean.data[c] = static_cast<T>((1.0 - options.momentum) * running_mean.data[c] +
                                            options.momentum * m);
      running_var.data[c] = static_cast<T>((1.0 - options.momentum) * running_var.data[c] +
                                           options.momentum * unbiased);
    } else {
      mean[c] = running_mean.data[c];
      inv_std[c] = 1.0 / std::sqrt(static_cast<double>(running_var.data[c]) + options.eps);
    }
  }
  const auto& gv = gamma.value().data;
  const auto& sv = shift.value().data;
  std::vector<T> out(xv.size());
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t c = 0; c < channels; ++c)
      for (int64_t p = 0; p < spatial; ++p) {
        const size_t i = static_cast<size_t>((b * channels + c) * spatial + p);
        const double xhat = (xv[i] - mean[c]) * inv_std[c];
        out[i] = static_cast<T>(gv[c] * xhat + sv[c]);
      }

  const int32_t xi = x.id(), gi = gamma.id(), si = shift.id();
  const bool training = options.training;
  return x.tape().record(
      "batchnorm", make<T>(xs, std::move(out)), {xi, gi, si},
      [=, mean = std::move(mean), inv_std = std::move(inv_std)](Tape<T>& t, int32_t self) {
        const auto& g = t.grad(self);
        const auto& xd = t.value(xi).data;
        const auto& gam = t.value(gi).data;
        std::vector<double> sum_g(static_cast<size_t>(channels), 0.0);
        std::vector<double> sum_gx(static_cast<size_t>(channels), 0.0);
        for (int64_t b = 0; b < batch; ++b)
          for (int64_t c = 0; c < channels; ++c)
            for (int64_t p = 0; p < spatial; ++p) {
              const size_t i = static_cast<size_t>((b * channels + c) * spatial + p);
              const double xhat = (xd[i] - mean[c]) * inv_std[c];
              sum_g[c] += g[i];
              sum_gx[c] += g[i] * xhat;
            }
        if (t.needs_grad(gi)) {
          auto& gg = t.grad(gi);
          for (int64_t c = 0; c < channels; ++c) gg[c] += static_cast<T>(sum_gx[c]);
        }
        if (t.needs_grad(si)) {
          auto& gs = t.grad(si);
          for (int64_t c = 0; c < channels; ++c) gs[c] += static_cast<T>(sum_g[c]);
        }
        if (!t.needs_grad(xi)) return;
        auto& gx = t.grad(xi);
        const double n = static_cast<double>(count);
        for (int64_t b = 0; b < batch; ++b)
          for (int64_t c = 0; c < channels; ++c)
            for (int64_t p = 0; p < spatial; ++p) {
              const size_t i = static_cast<size_t>((b * channels + c) * spatial + p);
              double d;
              if (training) {
                const double xhat = (xd[i] - mean[c]) * inv_std[c];
                d = gam[c] * inv_std[c] * (g[i] - sum_g[c] / n - xhat * sum_gx[c] / n);
              } else {
                d = gam[c] * inv_std[c] * g[i];
              }
              gx[i] += static_cast<T>(d);
            }
      });
}

// --- linear / matmul ----------------------------------------------------------

namespace {

// out[m,n] = sum_k a[m,k] * b[n,k] (+ bias[n]), double accumulation.
template <class T>
Var<T> affine_nt(std::string_view kind, Var<T> a, Var<T> b, const Var<T>* bias) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const char* op = bias ? "linear" : "matmul_nt";
  expect_rank(as, 2, op, "left operand");
  expect_rank(bs, 2, op, "right operand");
  require(as[1] == bs[1], ErrorKind::dimension,
          std::string(op) + ": inner dimensions disagree " + shape_string(as) + " vs " +
              shape_string(bs));
  const int64_t rows = as[0], inner = as[1], cols = bs[0];
  if (bias)
    require(bias->shape() == Shape{cols}, ErrorKind::dimension,
            std::string(op) + ": bias shape " + shape_string(bias->shape()) + " for " +
                std::to_string(cols) + " outputs");
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  std::vector<T> out(static_cast<size_t>(rows * cols));
  for (int64_t m = 0; m < rows; ++m)
    for (int64_t n = 0; n < cols; ++n) {
      double acc = bias ? static_cast<double>(bias->value().data[n]) : 0.0;
      for (int64_t k = 0; k < inner; ++k)
        acc += static_cast<double>(av[m * inner + k]) * static_cast<double>(bv[n * inner + k]);
      out[m * cols + n] = static_cast<T>(acc);
    }
  std::vector<int32_t> inputs{a.id(), b.id()};
  if (bias) inputs.push_back(bias->id());
  const int32_t ai = a.id(), bi = b.id(), ci = bias ? bias->id() : -1;
  return a.tape().record(kind, make<T>({rows, cols}, std::move(out)), inputs,
                         [=](Tape<T>& t, int32_t self) {
                           const auto& g = t.grad(self);
                           const auto& ad = t.value(ai).data;
                           const auto& bd = t.value(bi).data;
                           if (t.needs_grad(ai)) {
                             auto& ga = t.grad(ai);
                             for (int64_t m = 0; m < rows; ++m)
                               for (int64_t k = 0; k < inner; ++k) {
                                 double acc = 0.0;
                                 for (int64_t n = 0; n < cols; ++n)
                                   acc += static_cast<double>(g[m * cols + n]) * bd[n * inner + k];
                                 ga[m * inner + k] += static_cast<T>(acc);
                               }
                           }
                           if (t.needs_grad(bi)) {
                             auto& gb = t.grad(bi);
                             for (int64_t n = 0; n < cols; ++n)
                               for (int64_t k = 0; k < inner; ++k) {
                                 double acc = 0.0;
                                 for (int64_t m = 0; m < rows; ++m)
                                   acc += static_cast<double>(g[m * cols + n]) * ad[m * inner + k];
                                 gb[n * inner + k] += static_cast<T>(acc);
                               }
                           }
                           if (ci >= 0 && t.needs_grad(ci)) {
                             auto& gc = t.grad(ci);
                             for (int64_t n = 0; n < cols; ++n) {
                               double acc = 0.0;
                               for (int64_t m = 0; m < rows; ++m) acc += g[m * cols + n];
                               gc[n] += static_cast<T>(acc);
                             }
                           }
                         });
}

}  // namespace

template <class T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return affine_nt("linear", x, weight, &bias);
}

template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  return affine_nt<T>("matmul_nt", a, b, nullptr);
}

// --- activations and resampling ------------------------------------------------

template <class T>
Var<T> relu(Var<T> x) {
  return unary<T>("relu", x, [](double v) { return v > 0.0 || std::isnan(v) ? v : 0.0; },
                  [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

template <class T>
Var<T> maxpool2d(Var<T> x) {
  const auto& xs = x.shape();
  expect_rank(xs, 4, "maxpool2d", "input");
  require(xs[2] % 2 == 0 && xs[3] % 2 == 0, ErrorKind::dimension,
          "maxpool2d: spatial extents must be even, got " + shape_string(xs));
  const int64_t planes = xs[0] * xs[1], h = xs[2], w = xs[3], oh = h / 2, ow = w / 2;
  const auto& xv = x.value().data;
  std::vector<T> out(static_cast<size_t>(planes * oh * ow));
  std::vector<int64_t> argmax(out.size());
  for (int64_t p = 0; p < planes; ++p)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t xx = 0; xx < ow; ++xx) {
        int64_t best = p * h * w + (2 * y) * w + 2 * xx;
        for (int64_t dy = 0; dy < 2; ++dy)
          for (int64_t dx = 0; dx < 2; ++dx) {
            const int64_t idx = p * h * w + (2 * y + dy) * w + 2 * xx + dx;
            if (xv[idx] > xv[best] || (std::isnan(xv[idx]) && !std::isnan(xv[best]))) best = idx;
          }
        const int64_t o = (p * oh + y) * ow + xx;
        out[o] = xv[best];
        argmax[o] = best;
      }
  const int32_t xi = x.id();
  return x.tape().record("maxpool2d", make<T>({xs[0], xs[1], oh, ow}, std::move(out)), {xi},
                         [xi, argmax = std::move(argmax)](Tape<T>& t, int32_t self) {
                           const auto& g = t.grad(self);
                           auto& gx = t.grad(xi);
                           for (size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
                         });
}

template <class T>
Var<T> upsample_nearest2x(Var<T> x) {
  const auto& xs = x.shape();
  expect_rank(xs, 4, "upsample_nearest2x", "input");
  const int64_t planes = xs[0] * xs[1], h = xs[2], w = xs[3], oh = 2 * h, ow = 2 * w;
  const auto& xv = x.value().data;
  std::vector<T> out(static_cast<size_t>(planes * oh * ow));
  for (int64_t p = 0; p < planes; ++p)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t xx = 0; xx < ow; ++xx)
        out[(p * oh + y) * ow + xx] = xv[(p * h + y / 2) * w + xx / 2];
  const int32_t xi = x.id();
  return x.tape().record("upsample_nearest2x", make<T>({xs[0], xs[1], oh, ow}, std::move(out)),
                         {xi}, [=](Tape<T>& t, int32_t self) {
                           const auto& g = t.grad(self);
                           auto& gx = t.grad(xi);
                           for (int64_t p = 0; p < planes; ++p)
                             for (int64_t y = 0; y < oh; ++y)
                               for (int64_t xx = 0; xx < ow; ++xx)
                                 gx[(p * h + y / 2) * w + xx / 2] += g[(p * oh + y) * ow + xx];
                         });
}

// --- joins -------------------------------------------------------------------------

template <class T>
Var<T> concat_channels(std::span<const Var<T>> inputs) {
  require(!inputs.empty(), ErrorKind::dimension, "concat_channels: no inputs");
  const auto& first = inputs[0].shape();
  expect_rank(first, 4, "concat_channels", "input");
  int64_t channels = 0;
  for (const auto& v : inputs) {
    const auto& s = v.shape();
    expect_rank(s, 4, "concat_channels", "input");
    require(s[0] == first[0] && s[2] == first[2] && s[3] == first[3], ErrorKind::dimension,
            "concat_channels: incompatible shapes " + shape_string(first) + " and " +
                shape_string(s));
    channels += s[1];
  }
  const int64_t batch = first[0], plane = first[2] * first[3];
  std::vector<T> out(static_cast<size_t>(batch * channels * plane));
  std::vector<int32_t> ids;
  std::vector<int64_t> widths;
  for (int64_t b = 0; b < batch; ++b) {
    int64_t offset = 0;
    for (const auto& v : inputs) {
      const int64_t c = v.dim(1);
      const auto& src = v.value().data;
      std::copy_n(src.begin() + b * c * plane, c * plane,
                  out.begin() + (b * channels + offset) * plane);
      offset += c;
    }
  }
  for (const auto& v : inputs) {
    ids.push_back(v.id());
    widths.push_back(v.dim(1));
  }
  return inputs[0].tape().record(
      "concat_channels", make<T>({batch, channels, first[2], first[3]}, std::move(out)), ids,
      [=](Tape<T>& t, int32_t self) {
        const auto& g = t.grad(self);
        int64_t offset = 0;
        for (size_t k = 0; k < ids.size(); ++k) {
          const int64_t c = widths[k];
          if (t.needs_grad(ids[k])) {
            auto& gk = t.grad(ids[k]);
            for (int64_t b = 0; b < batch; ++b)
              for (int64_t i = 0; i < c * plane; ++i)
                gk[b * c * plane + i] += g[(b * channels + offset) * plane + i];
          }
          offset += c;
        }
      });
}

template <class T>
Var<T> concat_rows(std::span<const Var<T>> inputs) {
  require(!inputs.empty(), ErrorKind::dimension, "concat_rows: no inputs");
  const int64_t cols = inputs[0].shape().size() == 2 ? inputs[0].dim(1) : -1;
  int64_t rows = 0;
  std::vector<int32_t> ids;
  std::vector<int64_t> counts;
  std::vector<T> out;
  for (const auto& v : inputs) {
    expect_rank(v.shape(), 2, "concat_rows", "input");
    require(v.dim(1) == cols, ErrorKind::dimension, "concat_rows: column count mismatch");
    rows += v.dim(0);
    out.insert(out.end(), v.value().data.begin(), v.value().data.end());
    ids.push_back(v.id());
    counts.push_back(v.numel());
  }
  return inputs[0].tape().record("concat_rows", make<T>({rows, cols}, std::move(out)), ids,
                                 [=](Tape<T>& t, int32_t self) {
                                   const auto& g = t.grad(self);
                                   int64_t offset = 0;
                                   for (size_t k = 0; k < ids.size(); ++k) {
                                     if (t.needs_grad(ids[k])) {
                                       auto& gk = t.grad(ids[k]);
                                       for (int64_t i = 0; i < counts[k]; ++i) gk[i] += g[offset + i];
                                     }
                                     offset += counts[k];
                                   }
                                 });
}

template <class T>
Var<T> elemwise_max_n(std::span<const Var<T>> inputs) {
  require(!inputs.empty(), ErrorKind::empty_fusion, "elemwise_max_n: no inputs to fuse");
  const auto& shape = inputs[0].shape();
  for (const auto& v : inputs) expect_same(shape, v.shape(), "elemwise_max_n");
  const size_t n = inputs[0].value().data.size();
  std::vector<T> out(inputs[0].value().data);
  std::vector<uint8_t> winner(n, 0);
  for (size_t k = 1; k < inputs.size(); ++k) {
    const auto& src = inputs[k].value().data;
    for (size_t i = 0; i < n; ++i)
      if (src[i] > out[i] || (std::isnan(src[i]) && !std::isnan(out[i]))) {
        out[i] = src[i];
        winner[i] = static_cast<uint8_t>(k);
      }
  }
  std::vector<int32_t> ids;
  for (const auto& v : inputs) ids.push_back(v.id());
  return inputs[0].tape().record("elemwise_max_n", make<T>(shape, std::move(out)), ids,
                                 [ids, winner = std::move(winner)](Tape<T>& t, int32_t self) {
                                   const auto& g = t.grad(self);
                                   for (size_t k = 0; k < ids.size(); ++k) {
                                     if (!t.needs_grad(ids[k])) continue;
                                     auto& gk = t.grad(ids[k]);
                                     for (size_t i = 0; i < g.size(); ++i)
                                       if (winner[i] == k) gk[i] += g[i];
                                   }
                                 });
}

template <class T>
Var<T> global_avgpool(Var<T> x) {
  const auto& xs = x.shape();
  expect_rank(xs, 4, "global_avgpool", "input");
  const int64_t planes = xs[0] * xs[1], plane = xs[2] * xs[3];
  const auto& xv = x.value().data;
  std::vector<T> out(static_cast<size_t>(planes));
  for (int64_t p = 0; p < planes; ++p) {
    double s = 0.0;
    for (int64_t i = 0; i < plane; ++i) s += xv[p * plane + i];
    out[p] = static_cast<T>(s / static_cast<double>(plane));
  }
  const int32_t xi = x.id();
  return x.tape().record("global_avgpool", make<T>({xs[0], xs[1]}, std::move(out)), {xi},
                         [=](Tape<T>& t, int32_t self) {
                           const auto& g = t.grad(self);
                           auto& gx = t.grad(xi);
                           const double inv = 1.0 / static_cast<double>(plane);
                           for (int64_t p = 0; p < planes; ++p) {
                             const T share = static_cast<T>(g[p] * inv);
                             for (int64_t i = 0; i < plane; ++i) gx[p * plane + i] += share;
                           }
                         });
}

template <class T>
Var<T> softmax_channels(Var<T> x) {
  const auto& xs = x.shape();
  expect_rank(xs, 4, "softmax_channels", "input");
  require(xs[1] >= 2, ErrorKind::dimension, "softmax_channels: need at least 2 channels");
  const int64_t batch = xs[0], channels = xs[1], plane = xs[2] * xs[3];
  const auto& xv = x.value().data;
  std::vector<T> out(xv.size());
  std::vector<double> e(static_cast<size_t>(channels));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t p = 0; p < plane; ++p) {
      const T* src = xv.data() + b * channels * plane + p;
      double top = -std::numeric_limits<double>::infinity();
      for (int64_t c = 0; c < channels; ++c) top = std::max(top, static_cast<double>(src[c * plane]));
      double total = 0.0;
      for (int64_t c = 0; c < channels; ++c) total += e[c] = std::exp(src[c * plane] - top);
      T* dst = out.data() + b * channels * plane + p;
      for (int64_t c = 0; c < channels; ++c) dst[c * plane] = static_cast<T>(e[c] / total);
    }
  const int32_t xi = x.id();
  return x.tape().record("softmax_channels", make<T>(xs, std::move(out)), {xi},
                         [=](Tape<T>& t, int32_t self) {
                           const auto& g = t.grad(self);
                           const auto& y = t.value(self).data;
                           auto& gx = t.grad(xi);
                           for (int64_t b = 0; b < batch; ++b)
                             for (int64_t p = 0; p < plane; ++p) {
                               const int64_t base = b * channels * plane + p;
                               double dot = 0.0;
                               for (int64_t c = 0; c < channels; ++c)
                                 dot += static_cast<double>(g[base + c * plane]) * y[base + c * plane];
                               for (int64_t c = 0; c < channels; ++c) {
                                 const int64_t i = base + c * plane;
                                 gx[i] += static_cast<T>(y[i] * (g[i] - dot));
                               }
                             }
                         });
}

// --- elementwise ------------------------------------------------------------------

namespace {

template <class T, class Fwd, class Back>
Var<T> binary(std::string_view kind, Var<T> a, Var<T> b, Fwd fwd, Back back) {
  expect_same(a.shape(), b.shape(), std::string(kind).c_str());
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  std::vector<T> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(fwd(double(av[i]), double(bv[i])));
  const int32_t ai = a.id(), bi = b.id();
  return a.tape().record(kind, make<T>(a.shape(), std::move(out)), {ai, bi},
                         [=](Tape<T>& t, int32_t self) {
                           const auto& g = t.grad(self);
                           const auto& ad = t.value(ai).data;
                           const auto& bd = t.value(bi).data;
                           const bool na = t.needs_grad(ai), nb = t.needs_grad(bi);
                           std::vector<T>* ga = na ? &t.grad(ai) : nullptr;
                           std::vector<T>* gb = nb ? &t.grad(bi) : nullptr;
                           for (size_t i = 0; i < g.size(); ++i) {
                             const auto [da, db] = back(double(ad[i]), double(bd[i]));
                             if (ga) (*ga)[i] += static_cast<T>(g[i] * da);
                             if (gb) (*gb)[i] += static_cast<T>(g[i] * db);
                           }
                         });
}

}  // namespace

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary<T>("add", a, b, [](double x, double y) { return x + y; },
                   [](double, double) { return std::pair{1.0, 1.0}; });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary<T>("sub", a, b, [](double x, double y) { return x - y; },
                   [](double, double) { return std::pair{1.0, -1.0}; });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary<T>("mul", a, b, [](double x, double y) { return x * y; },
                   [](double x, double y) { return std::pair{y, x}; });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  return binary<T>("div", a, b, [](double x, double y) { return x / y; },
                   [](double x, double y) { return std::pair{1.0 / y, -x / (y * y)}; });
}

template <class T>
Var<T> scale(Var<T> x, double factor) {
  return unary<T>("scale", x, [factor](double v) { return v * factor; },
                  [factor](double, double) { return factor; });
}

template <class T>
Var<T> add_scalar(Var<T> x, double offset) {
  return unary<T>("add_scalar", x, [offset](double v) { return v + offset; },
                  [](double, double) { return 1.0; });
}

template <class T>
Var<T> log(Var<T> x) {
  return unary<T>("log", x, [](double v) { return std::log(v); },
                  [](double v, double) { return 1.0 / v; });
}

template <class T>
Var<T> exp(Var<T> x) {
  return unary<T>("exp", x, [](double v) { return std::exp(v); },
                  [](double v, double) { return std::exp(v); });
}

template <class T>
Var<T> pow_scalar(Var<T> x, double exponent) {
  return unary<T>("pow_scalar", x, [exponent](double v) { return std::pow(v, exponent); },
                  [exponent](double v, double) {
                    return exponent == 0.0 ? 0.0 : exponent * std::pow(v, exponent - 1.0);
                  });
}

template <class T>
Var<T> clamp(Var<T> x, double lo, double hi) {
  require(lo <= hi, ErrorKind::configuration, "clamp: lo > hi");
  return unary<T>("clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                  [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// --- reductions ---------------------------------------------------------------------

template <class T>
Var<T> sum(Var<T> x) {
  double s = 0.0;
  for (auto v : x.value().data) s += v;
  const int32_t xi = x.id();
  return x.tape().record("sum", make<T>({1}, {static_cast<T>(s)}), {xi},
                         [xi](Tape<T>& t, int32_t self) {
                           const T g = t.grad(self)[0];
                           for (auto& v : t.grad(xi)) v += g;
                         });
}

template <class T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

template <class T>
Var<T> sum_per_channel(Var<T> x) {
  const auto& xs = x.shape();
  require(xs.size() >= 2, ErrorKind::dimension, "sum_per_channel: rank must be at least 2");
  const int64_t batch = xs[0], channels = xs[1], inner = x.numel() / (batch * channels);
  const auto& xv = x.value().data;
  std::vector<double> acc(static_cast<size_t>(channels), 0.0);
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t c = 0; c < channels; ++c)
      for (int64_t i = 0; i < inner; ++i) acc[c] += xv[(b * channels + c) * inner + i];
  std::vector<T> out(acc.begin(), acc.end());
  const int32_t xi = x.id();
  return x.tape().record("sum_per_channel", make<T>({channels}, std::move(out)), {xi},
                         [=](Tape<T>& t, int32_t self) {
                           const auto& g = t.grad(self);
                           auto& gx = t.grad(xi);
                           for (int64_t b = 0; b < batch; ++b)
                             for (int64_t c = 0; c < channels; ++c)
                               for (int64_t i = 0; i < inner; ++i)
                                 gx[(b * channels + c) * inner + i] += g[c];
                         });
}

template <class T>
Var<T> sum_rows(Var<T> x) {
  expect_rank(x.shape(), 2, "sum_rows", "input");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  const auto& xv = x.value().data;
  std::vector<T> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < cols; ++c) s += xv[r * cols + c];
    out[r] = static_cast<T>(s);
  }
  const int32_t xi = x.id();
  return x.tape().record("sum_rows", make<T>({rows}, std::move(out)), {xi},
                         [=](Tape<T>& t, int32_t self) {
                           const auto& g = t.grad(self);
                           auto& gx = t.grad(xi);
                           for (int64_t r = 0; r < rows; ++r)
                             for (int64_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r];
                         });
}

template <class T>
Var<T> pick(Var<T> x, std::vector<int64_t> flat_indices) {
  require(!flat_indices.empty(), ErrorKind::dimension, "pick: no indices");
  const auto& xv = x.value().data;
  std::vector<T> out;
  out.reserve(flat_indices.size());
  for (auto i : flat_indices) {
    require(i >= 0 && i < x.numel(), ErrorKind::dimension,
            "pick: index " + std::to_string(i) + " outside " + shape_string(x.shape()));
    out.push_back(xv[static_cast<size_t>(i)]);
  }
  const int32_t xi = x.id();
  const auto count = static_cast<int64_t>(flat_indices.size());
  return x.tape().record("pick", make<T>({count}, std::move(out)), {xi},
                         [xi, idx = std::move(flat_indices)](Tape<T>& t, int32_t self) {
                           const auto& g = t.grad(self);
                           auto& gx = t.grad(xi);
                           for (size_t k = 0; k < idx.size(); ++k) gx[idx[k]] += g[k];
                         });
}

template <class T>
Var<T> l2_normalize_rows(Var<T> x) {
  expect_rank(x.shape(), 2, "l2_normalize_rows", "input");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  const auto& xv = x.value().data;
  std::vector<double> norms(static_cast<size_t>(rows));
  std::vector<T> out(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (int64_t c = 0; c < cols; ++c) ss += double(xv[r * cols + c]) * double(xv[r * cols + c]);
    norms[r] = std::sqrt(ss);
    require(norms[r] > 1e-12, ErrorKind::degenerate_projection,
            "l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
    for (int64_t c = 0; c < cols; ++c) out[r * cols + c] = static_cast<T>(xv[r * cols + c] / norms[r]);
  }
  const int32_t xi = x.id();
  return x.tape().record("l2_normalize_rows", make<T>(x.shape(), std::move(out)), {xi},
                         [=, norms = std::move(norms)](Tape<T>& t, int32_t self) {
                           const auto& g = t.grad(self);
                           const auto& xd = t.value(xi).data;
                           auto& gx = t.grad(xi);
                           for (int64_t r = 0; r < rows; ++r) {
                             const double n = norms[r];
                             double dot = 0.0;
                             for (int64_t c = 0; c < cols; ++c)
                               dot += double(g[r * cols + c]) * (xd[r * cols + c] / n);
                             for (int64_t c = 0; c < cols; ++c) {
                               const double y = xd[r * cols + c] / n;
                               gx[r * cols + c] += static_cast<T>((g[r * cols + c] - y * dot) / n);
                             }
                           }
                         });
}

#define REFUSEG_INSTANTIATE(T)                                                                   \
  template Var<T> conv2d<T>(Var<T>, Var<T>, Var<T>, int, int);                                   \
  template Var<T> batchnorm<T>(Var<T>, Var<T>, Var<T>, BasicTensor<T>&, BasicTensor<T>&,         \
                               const BatchNormOptions&);                                         \
  template Var<T> linear<T>(Var<T>, Var<T>, Var<T>);                                             \
  template Var<T> matmul_nt<T>(Var<T>, Var<T>);                                                  \
  template Var<T> relu<T>(Var<T>);                                                               \
  template Var<T> maxpool2d<T>(Var<T>);                                                          \
  template Var<T> upsample_nearest2x<T>(Var<T>);                                                 \
  template Var<T> concat_channels<T>(std::span<const Var<T>>);                                   \
  template Var<T> concat_rows<T>(std::span<const Var<T>>);                                       \
  template Var<T> elemwise_max_n<T>(std::span<const Var<T>>);                                    \
  template Var<T> global_avgpool<T>(Var<T>);                                                     \
  template Var<T> softmax_channels<T>(Var<T>);                                                   \
  template Var<T> add<T>(Var<T>, Var<T>);                                                        \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                        \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                        \
  template Var<T> div<T>(Var<T>, Var<T>);                                                        \
  template Var<T> scale<T>(Var<T>, double);                                                      \
  template Var<T> add_scalar<T>(Var<T>, double);                                                 \
  template Var<T> log<T>(Var<T>);                                                                \
  template Var<T> exp<T>(Var<T>);                                                                \
  template Var<T> pow_scalar<T>(Var<T>, double);                                                 \
  template Var<T> clamp<T>(Var<T>, double, double);                                              \
  template Var<T> sum<T>(Var<T>);                                                                \
  template Var<T> mean<T>(Var<T>);                                                               \
  template Var<T> sum_per_channel<T>(Var<T>);                                                    \
  template Var<T> sum_rows<T>(Var<T>);                                                           \
  template Var<T> pick<T>(Var<T>, std::vector<int64_t>);                                         \
  template Var<T> l2_normalize_rows<T>(Var<T>);

REFUSEG_INSTANTIATE(float)
REFUSEG_INSTANTIATE(double)

#undef REFUSEG_INSTANTIATE

}  // namespace refuseg::grad
