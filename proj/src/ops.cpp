#include "azgan/ops.hpp"

#include "azgan/errors.hpp"

#include <algorithm>
#include <cmath>

namespace azgan {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMatrix>;
using ConstMapRow = Eigen::Map<const RowMatrix>;

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

struct ConvGeometry {
  Index batch, cin, h, w, cout, kh, kw, stride, pad, hout, wout;
  Index taps() const { return kh * kw; }
  Index rows() const { return cin * kh * kw; }
  Index positions() const { return hout * wout; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, Conv2dOptions opt,
                           const char* op) {
  require_rank(input, 4, op, "input");
  require_rank(kernel, 4, op, "kernel");
  if (input.dim(1) != kernel.dim(1)) {
    throw ShapeError(std::string(op) + ": input channels of " + shape_string(input.shape()) +
                     " do not match kernel " + shape_string(kernel.shape()));
  }
  if (opt.stride < 1 || opt.padding < 0) {
    throw ShapeError(std::string(op) + ": stride must be positive and padding nonnegative");
  }
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = opt.stride;
  g.pad = opt.padding;
  if (g.kh > g.h + 2 * g.pad || g.kw > g.w + 2 * g.pad) {
    throw ShapeError(std::string(op) + ": kernel " + shape_string(kernel.shape()) +
                     " larger than padded input " + shape_string(input.shape()));
  }
  g.hout = conv_out_extent(g.h, g.kh, g.stride, g.pad);
  g.wout = conv_out_extent(g.w, g.kw, g.stride, g.pad);
  return g;
}

// Valid output columns [lo, hi) for kernel column j: those reading inside
// the input row.
inline void valid_span(const ConvGeometry& g, Index j, Index& lo, Index& hi) {
  // ox*stride - pad + j in [0, w)
  lo = std::max<Index>(0, (g.pad - j + g.stride - 1) / g.stride);
  hi = std::min<Index>(g.wout, (g.w - 1 + g.pad - j) / g.stride + 1);
  if (g.w - 1 + g.pad - j < 0) hi = 0;
  if (hi < lo) hi = lo;
}

// Column matrix rows are (c, i, j) in row-major order, columns are output
// positions; consecutive rows are `ld` apart so a batch can share one matrix.
void im2col(const ConvGeometry& g, const double* x, double* cols, Index ld) {
  for (Index c = 0; c < g.cin; ++c) {
    const double* xc = x + c * g.h * g.w;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        Index lo, hi;
        valid_span(g, j, lo, hi);
        for (Index oy = 0; oy < g.hout; ++oy) {
          const Index y = oy * g.stride - g.pad + i;
          double* out = row + oy * g.wout;
          if (y < 0 || y >= g.h) {
            std::fill(out, out + g.wout, 0.0);
            continue;
          }
          const double* xrow = xc + y * g.w - g.pad + j;
          std::fill(out, out + lo, 0.0);
          if (g.stride == 1) {
            std::copy(xrow + lo, xrow + hi, out + lo);
          } else {
            for (Index ox = lo; ox < hi; ++ox) out[ox] = xrow[ox * g.stride];
          }
          std::fill(out + hi, out + g.wout, 0.0);
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* dx, Index ld) {
  for (Index c = 0; c < g.cin; ++c) {
    double* dxc = dx + c * g.h * g.w;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        Index lo, hi;
        valid_span(g, j, lo, hi);
        for (Index oy = 0; oy < g.hout; ++oy) {
          const Index y = oy * g.stride - g.pad + i;
          if (y < 0 || y >= g.h) continue;
          double* dxrow = dxc + y * g.w - g.pad + j;
          const double* in = row + oy * g.wout;
          if (g.stride == 1) {
            for (Index ox = lo; ox < hi; ++ox) dxrow[ox] += in[ox];
          } else {
            for (Index ox = lo; ox < hi; ++ox) dxrow[ox * g.stride] += in[ox];
          }
        }
      }
    }
  }
}

// Bilinear sample plan for one batch item: four corner indices (-1 when
// outside) and weights per (tap, position).
struct SamplePlan {
  std::vector<Index> corner;  // 4 per sample
  std::vector<double> ly, lx;
};

SamplePlan plan_samples(const ConvGeometry& g, const double* off) {
  const Index taps = g.taps();
  const Index p_count = g.positions();
  SamplePlan plan;
  plan.corner.resize(static_cast<std::size_t>(4 * taps * p_count));
  plan.ly.resize(static_cast<std::size_t>(taps * p_count));
  plan.lx.resize(static_cast<std::size_t>(taps * p_count));
  for (Index t = 0; t < taps; ++t) {
    const Index i = t / g.kw;
    const Index j = t % g.kw;
    const double* dy = off + (2 * t) * p_count;
    const double* dx = off + (2 * t + 1) * p_count;
    for (Index oy = 0; oy < g.hout; ++oy) {
      for (Index ox = 0; ox < g.wout; ++ox) {
        const Index p = oy * g.wout + ox;
        const double y = static_cast<double>(oy * g.stride - g.pad + i) + dy[p];
        const double x = static_cast<double>(ox * g.stride - g.pad + j) + dx[p];
        const double yf = std::floor(y);
        const double xf = std::floor(x);
        const Index s = t * p_count + p;
        plan.ly[static_cast<std::size_t>(s)] = y - yf;
        plan.lx[static_cast<std::size_t>(s)] = x - xf;
        const Index y0 = static_cast<Index>(yf);
        const Index x0 = static_cast<Index>(xf);
        auto at = [&](Index yy, Index xx) -> Index {
          return (yy >= 0 && yy < g.h && xx >= 0 && xx < g.w) ? yy * g.w + xx : -1;
        };
        Index* c = &plan.corner[static_cast<std::size_t>(4 * s)];
        c[0] = at(y0, x0);
        c[1] = at(y0, x0 + 1);
        c[2] = at(y0 + 1, x0);
        c[3] = at(y0 + 1, x0 + 1);
      }
    }
  }
  return plan;
}

void deform_cols(const ConvGeometry& g, const SamplePlan& plan, const double* x, double* cols, Index ld) {
  const Index taps = g.taps();
  const Index p_count = g.positions();
  for (Index c = 0; c < g.cin; ++c) {
    const double* xc = x + c * g.h * g.w;
    for (Index t = 0; t < taps; ++t) {
      double* row = cols + (c * taps + t) * ld;
      for (Index p = 0; p < p_count; ++p) {
        const Index s = t * p_count + p;
        const double ly = plan.ly[static_cast<std::size_t>(s)];
        const double lx = plan.lx[static_cast<std::size_t>(s)];
        const Index* cn = &plan.corner[static_cast<std::size_t>(4 * s)];
        const double v00 = cn[0] >= 0 ? xc[cn[0]] : 0.0;
        const double v01 = cn[1] >= 0 ? xc[cn[1]] : 0.0;
        const double v10 = cn[2] >= 0 ? xc[cn[2]] : 0.0;
        const double v11 = cn[3] >= 0 ? xc[cn[3]] : 0.0;
        double v = (1.0 - ly) * (1.0 - lx) * v00;
        if (lx != 0.0) v += (1.0 - ly) * lx * v01;
        if (ly != 0.0) v += ly * (1.0 - lx) * v10;
        if (ly != 0.0 && lx != 0.0) v += ly * lx * v11;
        row[p] = v;
      }
    }
  }
}

// Batch items per GEMM: enough columns to keep the product efficient while
// the column buffer stays cache-sized.
Index chunk_items(const ConvGeometry& g) {
  return std::clamp<Index>(2048 / std::max<Index>(1, g.positions()), 1, g.batch);
}

// out[n] = W * cols(n) (+ bias) in chunks; fill(n, dst, ld) writes the column
// block of item n with row stride ld.
template <typename Fill>
void gemm_forward(const ConvGeometry& g, const double* kernel, const Eigen::VectorXd* bias, double* out, Fill fill) {
  const Index k = g.rows();
  const Index p = g.positions();
  const Index chunk = chunk_items(g);
  Eigen::VectorXd buffer(k * chunk * p);
  ConstMapRow w(kernel, g.cout, k);
  for (Index n0 = 0; n0 < g.batch; n0 += chunk) {
    const Index cn = std::min(chunk, g.batch - n0);
    const Index ld = cn * p;
    for (Index n = n0; n < n0 + cn; ++n) fill(n, buffer.data() + (n - n0) * p, ld);
    RowMatrix y = w * MapRow(buffer.data(), k, ld);
    if (bias != nullptr) y.colwise() += *bias;
    for (Index n = n0; n < n0 + cn; ++n) MapRow(out + n * g.cout * p, g.cout, p) = y.middleCols((n - n0) * p, p);
  }
}

// Gradient counterpart: accumulates dW and db, and hands W^T dy column blocks
// to scatter(n, src, ld).
template <typename Fill, typename Scatter>
void gemm_backward(const ConvGeometry& g, const double* kernel, const double* dy_all, double* dw, double* db,
                   bool need_input_grad, Fill fill, Scatter scatter) {
  const Index k = g.rows();
  const Index p = g.positions();
  const Index chunk = chunk_items(g);
  Eigen::VectorXd buffer(k * chunk * p);
  RowMatrix dy(g.cout, chunk * p);
  ConstMapRow w(kernel, g.cout, k);
  for (Index n0 = 0; n0 < g.batch; n0 += chunk) {
    const Index cn = std::min(chunk, g.batch - n0);
    const Index ld = cn * p;
    auto d = dy.leftCols(ld);
    for (Index n = n0; n < n0 + cn; ++n) d.middleCols((n - n0) * p, p) = ConstMapRow(dy_all + n * g.cout * p, g.cout, p);
    if (db != nullptr) Eigen::Map<Eigen::VectorXd>(db, g.cout) += d.rowwise().sum();
    if (dw != nullptr) {
      for (Index n = n0; n < n0 + cn; ++n) fill(n, buffer.data() + (n - n0) * p, ld);
      MapRow(dw, g.cout, k).noalias() += d * MapRow(buffer.data(), k, ld).transpose();
    }
    if (need_input_grad) {
      MapRow dcols(buffer.data(), k, ld);
      dcols.noalias() = w.transpose() * d;
      for (Index n = n0; n < n0 + cn; ++n) scatter(n, buffer.data() + (n - n0) * p, ld);
    }
  }
}

}  // namespace

Index conv_out_extent(Index in, Index kernel, Index stride, Index padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              Conv2dOptions options) {
  const ConvGeometry g = conv_geometry(input, kernel, options, "conv2d");
  if (bias.numel() != g.cout) {
    throw ShapeError("conv2d: bias " + shape_string(bias.shape()) + " does not match kernel " +
                     shape_string(kernel.shape()));
  }
  Tensor out(Shape{g.batch, g.cout, g.hout, g.wout});
  const double* x = input.data();
  const Index in_stride = g.cin * g.h * g.w;
  gemm_forward(g, kernel.data(), &bias.values(), out.data(),
               [&](Index n, double* dst, Index ld) { im2col(g, x + n * in_stride, dst, ld); });

  if (tape.wants({&input, &kernel, &bias})) {
    auto xi = input.node();
    auto ki = kernel.node();
    auto bi = bias.node();
    auto yo = out.node();
    tape.record("conv2d", out, [g, xi, ki, bi, yo, in_stride] {
      double* dx = xi->tracked ? xi->ensure_grad().data() : nullptr;
      const double* x = xi->value.data();
      gemm_backward(
          g, ki->value.data(), yo->grad.data(), ki->tracked ? ki->ensure_grad().data() : nullptr,
          bi->tracked ? bi->ensure_grad().data() : nullptr, dx != nullptr,
          [&](Index n, double* dst, Index ld) { im2col(g, x + n * in_stride, dst, ld); },
          [&](Index n, const double* src, Index ld) { col2im_add(g, src, dx + n * in_stride, ld); });
    });
  }
  return out;
}

Tensor deformable_conv2d(Tape& tape, const Tensor& input, const Tensor& kernel,
                         const Tensor& offsets, Conv2dOptions options) {
  const ConvGeometry g = conv_geometry(input, kernel, options, "deformable_conv2d");
  require_rank(offsets, 4, "deformable_conv2d", "offsets");
  if (offsets.dim(1) != 2 * g.taps()) {
    throw ShapeError("deformable_conv2d: offsets " + shape_string(offsets.shape()) + " need " +
                     std::to_string(2 * g.taps()) + " channels for kernel " +
                     shape_string(kernel.shape()));
  }
  if (offsets.dim(0) != g.batch || offsets.dim(2) != g.hout || offsets.dim(3) != g.wout) {
    throw ShapeError("deformable_conv2d: offsets " + shape_string(offsets.shape()) +
                     " do not match output extent [" + std::to_string(g.batch) + ",*," +
                     std::to_string(g.hout) + "," + std::to_string(g.wout) + "]");
  }
  Tensor out(Shape{g.batch, g.cout, g.hout, g.wout});
  const Index p = g.positions();
  const Index off_stride = 2 * g.taps() * p;
  const Index in_stride = g.cin * g.h * g.w;
  std::vector<SamplePlan> plans;
  for (Index n = 0; n < g.batch; ++n) plans.push_back(plan_samples(g, offsets.data() + n * off_stride));
  gemm_forward(g, kernel.data(), nullptr, out.data(), [&](Index n, double* dst, Index ld) {
    deform_cols(g, plans[static_cast<std::size_t>(n)], input.data() + n * in_stride, dst, ld);
  });
  if (tape.wants({&input, &kernel, &offsets})) {
    auto xi = input.node();
    auto ki = kernel.node();
    auto oi = offsets.node();
    auto yo = out.node();
    tape.record("deformable_conv2d", out, [g, xi, ki, oi, yo, off_stride, in_stride] {
      const Index p = g.positions();
      const Index taps = g.taps();
      double* dx = xi->tracked ? xi->ensure_grad().data() : nullptr;
      double* doff = oi->tracked ? oi->ensure_grad().data() : nullptr;
      std::vector<SamplePlan> plans;
      for (Index n = 0; n < g.batch; ++n) plans.push_back(plan_samples(g, oi->value.data() + n * off_stride));
      gemm_backward(
          g, ki->value.data(), yo->grad.data(), ki->tracked ? ki->ensure_grad().data() : nullptr, nullptr,
          dx != nullptr || doff != nullptr,
          [&](Index n, double* dst, Index ld) {
            deform_cols(g, plans[static_cast<std::size_t>(n)], xi->value.data() + n * in_stride, dst, ld);
          },
          [&](Index n, const double* dcols, Index ld) {
        const SamplePlan& plan = plans[static_cast<std::size_t>(n)];
        const double* x = xi->value.data() + n * in_stride;
        for (Index c = 0; c < g.cin; ++c) {
          const double* xc = x + c * g.h * g.w;
          double* dxc = dx != nullptr ? dx + n * g.cin * g.h * g.w + c * g.h * g.w : nullptr;
          for (Index t = 0; t < taps; ++t) {
            const double* drow = dcols + (c * taps + t) * ld;
            double* ddy = doff != nullptr ? doff + n * off_stride + (2 * t) * p : nullptr;
            double* ddx = doff != nullptr ? doff + n * off_stride + (2 * t + 1) * p : nullptr;
            for (Index q = 0; q < p; ++q) {
              const double gval = drow[q];
              if (gval == 0.0) continue;
              const Index s = t * p + q;
              const double ly = plan.ly[static_cast<std::size_t>(s)];
              const double lx = plan.lx[static_cast<std::size_t>(s)];
              const Index* cn = &plan.corner[static_cast<std::size_t>(4 * s)];
              if (dxc != nullptr) {
                if (cn[0] >= 0) dxc[cn[0]] += gval * (1.0 - ly) * (1.0 - lx);
                if (cn[1] >= 0) dxc[cn[1]] += gval * (1.0 - ly) * lx;
                if (cn[2] >= 0) dxc[cn[2]] += gval * ly * (1.0 - lx);
                if (cn[3] >= 0) dxc[cn[3]] += gval * ly * lx;
              }
              if (ddy != nullptr) {
                const double v00 = cn[0] >= 0 ? xc[cn[0]] : 0.0;
                const double v01 = cn[1] >= 0 ? xc[cn[1]] : 0.0;
                const double v10 = cn[2] >= 0 ? xc[cn[2]] : 0.0;
                const double v11 = cn[3] >= 0 ? xc[cn[3]] : 0.0;
                ddy[q] += gval * ((1.0 - lx) * (v10 - v00) + lx * (v11 - v01));
                ddx[q] += gval * ((1.0 - ly) * (v01 - v00) + ly * (v11 - v10));
              }
            }
          }
        }
      });
    });
  }
  return out;
}

Tensor batch_norm(Tape& tape, const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  BatchNormStats& stats, Mode mode, BatchNormOptions options) {
  require_rank(input, 4, "batch_norm", "input");
  const Index batch = input.dim(0);
  const Index channels = input.dim(1);
  const Index plane = input.dim(2) * input.dim(3);
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw ShapeError("batch_norm: gamma/beta " + shape_string(gamma.shape()) + "/" +
                     shape_string(beta.shape()) + " do not match input " +
                     shape_string(input.shape()));
  }
  if (stats.mean.size() != channels) stats = BatchNormStats(channels);
  const Index count = batch * plane;
  if (mode == Mode::kTrain && count < 2) {
    throw DegenerateBatchError("batch_norm: train mode needs at least two values per channel, got " +
                               shape_string(input.shape()));
  }

  using Plane = Eigen::Map<const Eigen::ArrayXd>;
  using MutPlane = Eigen::Map<Eigen::ArrayXd>;
  Eigen::VectorXd mean(channels);
  Eigen::VectorXd inv_std(channels);
  const double* x = input.data();
  if (mode == Mode::kTrain) {
    Eigen::VectorXd var(channels);
    for (Index c = 0; c < channels; ++c) {
      double s = 0.0;
      for (Index n = 0; n < batch; ++n) s += Plane(x + (n * channels + c) * plane, plane).sum();
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (Index n = 0; n < batch; ++n) v += (Plane(x + (n * channels + c) * plane, plane) - m).square().sum();
      mean[c] = m;
      var[c] = v / static_cast<double>(count);
    }
    inv_std = (var.array() + options.epsilon).rsqrt();
    if (options.update_running) {
      stats.mean = options.momentum * stats.mean + (1.0 - options.momentum) * mean;
      stats.var = options.momentum * stats.var + (1.0 - options.momentum) * var;
    }
  } else {
    mean = stats.mean;
    inv_std = (stats.var.array() + options.epsilon).rsqrt();
  }

  Tensor out(input.shape());
  Eigen::VectorXd xhat(input.numel());
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < channels; ++c) {
      const Index base = (n * channels + c) * plane;
      MutPlane h(xhat.data() + base, plane);
      h = (Plane(x + base, plane) - mean[c]) * inv_std[c];
      MutPlane(out.data() + base, plane) = gamma[c] * h + beta[c];
    }
  }

  if (tape.wants({&input, &gamma, &beta})) {
    auto xi = input.node();
    auto gi = gamma.node();
    auto bi = beta.node();
    auto yo = out.node();
    const bool train = mode == Mode::kTrain;
    tape.record("batch_norm", out,
                [xi, gi, bi, yo, xhat = std::move(xhat), inv_std, batch, channels, plane, count,
                 train] {
                  const double* dy = yo->grad.data();
                  double* dg = gi->tracked ? gi->ensure_grad().data() : nullptr;
                  double* db = bi->tracked ? bi->ensure_grad().data() : nullptr;
                  double* dx = xi->tracked ? xi->ensure_grad().data() : nullptr;
                  for (Index c = 0; c < channels; ++c) {
                    double sum_dy = 0.0;
                    double sum_dy_xhat = 0.0;
                    for (Index n = 0; n < batch; ++n) {
                      const Index base = (n * channels + c) * plane;
                      sum_dy += Plane(dy + base, plane).sum();
                      sum_dy_xhat += (Plane(dy + base, plane) * Plane(xhat.data() + base, plane)).sum();
                    }
                    if (dg != nullptr) dg[c] += sum_dy_xhat;
                    if (db != nullptr) db[c] += sum_dy;
                    if (dx == nullptr) continue;
                    const double k = gi->value[c] * inv_std[c];
                    const double inv_n = 1.0 / static_cast<double>(count);
                    for (Index n = 0; n < batch; ++n) {
                      const Index base = (n * channels + c) * plane;
                      MutPlane d(dx + base, plane);
                      if (train) {
                        d += k * (Plane(dy + base, plane) - inv_n * sum_dy -
                                  Plane(xhat.data() + base, plane) * (inv_n * sum_dy_xhat));
                      } else {
                        d += k * Plane(dy + base, plane);
                      }
                    }
                  }
                });
  }
  return out;
}

Tensor lrelu(Tape& tape, const Tensor& x, double alpha) {
  Tensor out(x.shape());
  // branch-free so that it vectorizes
  out.values() = (x.values().array().max(0.0) + alpha * x.values().array().min(0.0)).matrix();
  if (tape.wants({&x})) {
    auto xi = x.node();
    auto yo = out.node();
    tape.record("lrelu", out, [xi, yo, alpha] {
      const auto pos = (xi->value.array() > 0.0).cast<double>();
      xi->accumulate_grad((yo->grad.array() * (alpha + (1.0 - alpha) * pos)).matrix());
    });
  }
  return out;
}

Tensor tanh(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  out.values() = x.values().array().tanh().matrix();
  if (tape.wants({&x})) {
    auto xi = x.node();
    auto yo = out.node();
    tape.record("tanh", out, [xi, yo] {
      xi->accumulate_grad((yo->grad.array() * (1.0 - yo->value.array().square())).matrix());
    });
  }
  return out;
}

Tensor maxpool2d(Tape& tape, const Tensor& input, Index window, Index stride) {
  require_rank(input, 4, "maxpool2d", "input");
  const Index batch = input.dim(0);
  const Index channels = input.dim(1);
  const Index h = input.dim(2);
  const Index w = input.dim(3);
  if (window < 1 || stride < 1 || window > h || window > w) {
    throw ShapeError("maxpool2d: window " + std::to_string(window) + " does not fit input " +
                     shape_string(input.shape()));
  }
  const Index hout = conv_out_extent(h, window, stride, 0);
  const Index wout = conv_out_extent(w, window, stride, 0);
  Tensor out(Shape{batch, channels, hout, wout});
  std::vector<Index> argmax(static_cast<std::size_t>(out.numel()));
  const double* x = input.data();
  Index o = 0;
  for (Index plane = 0; plane < batch * channels; ++plane) {
    const Index base = plane * h * w;
    for (Index oy = 0; oy < hout; ++oy) {
      for (Index ox = 0; ox < wout; ++ox, ++o) {
        Index best = base + (oy * stride) * w + ox * stride;
        for (Index i = 0; i < window; ++i) {
          for (Index j = 0; j < window; ++j) {
            const Index idx = base + (oy * stride + i) * w + ox * stride + j;
            if (x[idx] > x[best]) best = idx;
          }
        }
        argmax[static_cast<std::size_t>(o)] = best;
        out[o] = x[best];
      }
    }
  }
  if (tape.wants({&input})) {
    auto xi = input.node();
    auto yo = out.node();
    tape.record("maxpool2d", out, [xi, yo, argmax = std::move(argmax)] {
      Eigen::VectorXd& dx = xi->ensure_grad();
      for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += yo->grad[static_cast<Index>(o)];
    });
  }
  return out;
}

Tensor linear(Tape& tape, const Tensor& input, const Tensor& weight) {
  if (input.rank() < 2) {
    throw ShapeError("linear: input must be [B, N], got " + shape_string(input.shape()));
  }
  const Index batch = input.dim(0);
  const Index n = input.numel() / batch;
  if (weight.numel() != n) {
    throw ShapeError("linear: flattened input " + shape_string(input.shape()) +
                     " does not match weight " + shape_string(weight.shape()));
  }
  Tensor out(Shape{batch, 1});
  ConstMapRow xm(input.data(), batch, n);
  out.values().noalias() = xm * weight.values();
  if (tape.wants({&input, &weight})) {
    auto xi = input.node();
    auto wi = weight.node();
    auto yo = out.node();
    tape.record("linear", out, [xi, wi, yo, batch, n] {
      ConstMapRow xm(xi->value.data(), batch, n);
      if (wi->tracked) wi->ensure_grad().noalias() += xm.transpose() * yo->grad;
      if (xi->tracked) {
        MapRow dx(xi->ensure_grad().data(), batch, n);
        dx.noalias() += yo->grad * wi->value.transpose();
      }
    });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape(), a.values() + b.values());
  if (tape.wants({&a, &b})) {
    auto ai = a.node();
    auto bi = b.node();
    auto yo = out.node();
    tape.record("add", out, [ai, bi, yo] {
      if (ai->tracked) ai->accumulate_grad(yo->grad);
      if (bi->tracked) bi->accumulate_grad(yo->grad);
    });
  }
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape(), a.values() - b.values());
  if (tape.wants({&a, &b})) {
    auto ai = a.node();
    auto bi = b.node();
    auto yo = out.node();
    tape.record("sub", out, [ai, bi, yo] {
      if (ai->tracked) ai->accumulate_grad(yo->grad);
      if (bi->tracked) bi->accumulate_grad(-yo->grad);
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape(), a.values().cwiseProduct(b.values()));
  if (tape.wants({&a, &b})) {
    auto ai = a.node();
    auto bi = b.node();
    auto yo = out.node();
    tape.record("mul", out, [ai, bi, yo] {
      if (ai->tracked) ai->accumulate_grad(yo->grad.cwiseProduct(bi->value));
      if (bi->tracked) bi->accumulate_grad(yo->grad.cwiseProduct(ai->value));
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  Tensor out(x.shape(), x.values() * factor);
  if (tape.wants({&x})) {
    auto xi = x.node();
    auto yo = out.node();
    tape.record("scale", out, [xi, yo, factor] { xi->accumulate_grad(yo->grad * factor); });
  }
  return out;
}

Tensor abs(Tape& tape, const Tensor& x) {
  Tensor out(x.shape(), x.values().cwiseAbs());
  if (tape.wants({&x})) {
    auto xi = x.node();
    auto yo = out.node();
    tape.record("abs", out, [xi, yo] {
      xi->accumulate_grad(yo->grad.binaryExpr(xi->value, [](double g, double v) {
        return v > 0.0 ? g : (v < 0.0 ? -g : 0.0);
      }));
    });
  }
  return out;
}

Tensor log_sigmoid(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  out.values() = x.values().unaryExpr(
      [](double v) { return -(std::max(-v, 0.0) + std::log1p(std::exp(-std::abs(v)))); });
  if (tape.wants({&x})) {
    auto xi = x.node();
    auto yo = out.node();
    tape.record("log_sigmoid", out, [xi, yo] {
      // d/dx log sigma(x) = 1 - sigma(x) = sigma(-x)
      xi->accumulate_grad(yo->grad.binaryExpr(xi->value, [](double g, double v) {
        const double s = v >= 0.0 ? std::exp(-v) / (1.0 + std::exp(-v)) : 1.0 / (1.0 + std::exp(v));
        return g * s;
      }));
    });
  }
  return out;
}

Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi) {
  Tensor out(x.shape(), x.values().cwiseMax(lo).cwiseMin(hi));
  if (tape.wants({&x})) {
    auto xi = x.node();
    auto yo = out.node();
    tape.record("clamp", out, [xi, yo, lo, hi] {
      xi->accumulate_grad(yo->grad.binaryExpr(
          xi->value, [lo, hi](double g, double v) { return (v >= lo && v <= hi) ? g : 0.0; }));
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  Tensor out(Shape{1}, x.values().sum());
  if (tape.wants({&x})) {
    auto xi = x.node();
    auto yo = out.node();
    tape.record("sum", out, [xi, yo] {
      xi->ensure_grad().array() += yo->grad[0];
    });
  }
  return out;
}

Tensor mean(Tape& tape, const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  Tensor out(Shape{1}, x.values().sum() * inv);
  if (tape.wants({&x})) {
    auto xi = x.node();
    auto yo = out.node();
    tape.record("mean", out, [xi, yo, inv] { xi->ensure_grad().array() += yo->grad[0] * inv; });
  }
  return out;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                     shape_string(shape));
  }
  Tensor out(std::move(shape), x.values());
  if (tape.wants({&x})) {
    auto xi = x.node();
    auto yo = out.node();
    tape.record("reshape", out, [xi, yo] { xi->accumulate_grad(yo->grad); });
  }
  return out;
}

Tensor flatten(Tape& tape, const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("flatten: empty shape");
  return reshape(tape, x, Shape{x.dim(0), x.numel() / x.dim(0)});
}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat_channels", "first operand");
  require_rank(b, 4, "concat_channels", "second operand");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const Index batch = a.dim(0);
  const Index sa = a.numel() / batch;
  const Index sb = b.numel() / batch;
  Tensor out(Shape{batch, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)});
  for (Index n = 0; n < batch; ++n) {
    out.values().segment(n * (sa + sb), sa) = a.values().segment(n * sa, sa);
    out.values().segment(n * (sa + sb) + sa, sb) = b.values().segment(n * sb, sb);
  }
  if (tape.wants({&a, &b})) {
    auto ai = a.node();
    auto bi = b.node();
    auto yo = out.node();
    tape.record("concat_channels", out, [ai, bi, yo, batch, sa, sb] {
      for (Index n = 0; n < batch; ++n) {
        if (ai->tracked) ai->ensure_grad().segment(n * sa, sa) += yo->grad.segment(n * (sa + sb), sa);
        if (bi->tracked) {
          bi->ensure_grad().segment(n * sb, sb) += yo->grad.segment(n * (sa + sb) + sa, sb);
        }
      }
    });
  }
  return out;
}

Tensor concat_batch(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() < 1 ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw ShapeError("concat_batch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  Eigen::VectorXd v(a.numel() + b.numel());
  v << a.values(), b.values();
  Tensor out(std::move(shape), std::move(v));
  if (tape.wants({&a, &b})) {
    auto ai = a.node();
    auto bi = b.node();
    auto yo = out.node();
    const Index na = a.numel();
    const Index nb = b.numel();
    tape.record("concat_batch", out, [ai, bi, yo, na, nb] {
      if (ai->tracked) ai->accumulate_grad(yo->grad.head(na));
      if (bi->tracked) bi->accumulate_grad(yo->grad.tail(nb));
    });
  }
  return out;
}

Tensor slice_batch(Tape& tape, const Tensor& x, Index begin, Index count) {
  if (x.rank() < 1 || begin < 0 || count < 1 || begin + count > x.dim(0)) {
    throw ShapeError("slice_batch: rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + shape_string(x.shape()));
  }
  const Index row = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = count;
  Tensor out(std::move(shape), x.values().segment(begin * row, count * row));
  if (tape.wants({&x})) {
    auto xi = x.node();
    auto yo = out.node();
    tape.record("slice_batch", out, [xi, yo, begin, count, row] {
      xi->ensure_grad().segment(begin * row, count * row) += yo->grad;
    });
  }
  return out;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) {
    throw ShapeError("softmax_cross_entropy: logits must be [B, C], got " +
                     shape_string(logits.shape()));
  }
  const Index batch = logits.dim(0);
  const Index classes = logits.dim(1);
  if (static_cast<Index>(labels.size()) != batch) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + shape_string(logits.shape()));
  }
  ConstMapRow z(logits.data(), batch, classes);
  RowMatrix prob(batch, classes);
  double loss = 0.0;
  for (Index n = 0; n < batch; ++n) {
    const int label = labels[static_cast<std::size_t>(n)];
    if (label < 0 || label >= classes) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(label) + " out of range");
    }
    const double m = z.row(n).maxCoeff();
    const Eigen::RowVectorXd e = (z.row(n).array() - m).exp().matrix();
    const double s = e.sum();
    prob.row(n) = e / s;
    loss += -(z(n, label) - m - std::log(s));
  }
  Tensor out(Shape{1}, loss / static_cast<double>(batch));
  if (tape.wants({&logits})) {
    auto li = logits.node();
    auto yo = out.node();
    std::vector<int> owned(labels.begin(), labels.end());
    tape.record("softmax_cross_entropy", out, [li, yo, prob = std::move(prob), owned, batch, classes] {
      RowMatrix d = prob;
      for (Index n = 0; n < batch; ++n) d(n, owned[static_cast<std::size_t>(n)]) -= 1.0;
      d *= yo->grad[0] / static_cast<double>(batch);
      li->accumulate_grad(Eigen::Map<const Eigen::VectorXd>(d.data(), batch * classes));
    });
  }
  return out;
}

}  // namespace azgan
