#include "roadforge/diff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "roadforge/common/error.hpp"

namespace roadforge::diff {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

MatMap as_mat(Tensor& t, int rows, int cols) { return MatMap(t.data(), rows, cols); }
ConstMatMap as_mat(const Tensor& t, int rows, int cols) { return ConstMatMap(t.data(), rows, cols); }
MatMap as_mat(Tensor& t) { return as_mat(t, t.rows(), t.cols()); }
ConstMatMap as_mat(const Tensor& t) { return as_mat(t, t.rows(), t.cols()); }

void require_rank(const std::string& op, Var a, int rank) {
  if (a.value().rank() != rank) {
    fail(ErrorCode::ShapeMismatch, op + ": expected rank " + std::to_string(rank) + ", got " +
                                       shape_string(a.shape()));
  }
}

void require_same(const std::string& op, Var a, Var b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) fail(ErrorCode::InvalidArgument, "operands belong to different tapes");
  return *a.tape;
}

template <typename F>
Var unary(Var a, F&& fwd, Tape::Backward back) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = fwd(v);
  return a.tape->push(std::move(out), {a.id}, std::move(back));
}

}  // namespace

Var matmul(Var a, Var b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.value().cols() != b.value().rows()) shape_error("matmul", a.shape(), b.shape());
  Tape& t = tape_of(a, b);
  Tensor out({a.value().rows(), b.value().cols()});
  as_mat(out).noalias() = as_mat(a.value()) * as_mat(b.value());
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), {ia, ib}, [ia, ib](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.needs_grad(ia)) as_mat(tp.grad(ia)).noalias() += as_mat(g) * as_mat(tp.value(ib)).transpose();
    if (tp.needs_grad(ib)) as_mat(tp.grad(ib)).noalias() += as_mat(tp.value(ia)).transpose() * as_mat(g);
  });
}

namespace {

Var linear_impl(Var x, Var w, const Var* b) {
  require_rank("linear", x, 2);
  require_rank("linear", w, 2);
  if (x.value().cols() != w.value().cols()) shape_error("linear", x.shape(), w.shape());
  if (b && (b->value().rank() != 1 || b->value().dim(0) != w.value().rows())) {
    shape_error("linear bias", w.shape(), b->shape());
  }
  Tape& t = tape_of(x, w);
  const int n = x.value().rows();
  const int out_dim = w.value().rows();
  Tensor out({n, out_dim});
  auto y = as_mat(out);
  y.noalias() = as_mat(x.value()) * as_mat(w.value()).transpose();
  if (b) {
    const Eigen::Map<const Eigen::RowVectorXd> bias(b->value().data(), out_dim);
    y.rowwise() += bias;
  }
  const int ix = x.id, iw = w.id, ib = b ? b->id : -1;
  std::vector<int> inputs{ix, iw};
  if (b) inputs.push_back(ib);
  return t.push(std::move(out), std::move(inputs), [ix, iw, ib](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const auto gm = as_mat(g);
    if (tp.needs_grad(ix)) as_mat(tp.grad(ix)).noalias() += gm * as_mat(tp.value(iw));
    if (tp.needs_grad(iw)) as_mat(tp.grad(iw)).noalias() += gm.transpose() * as_mat(tp.value(ix));
    if (ib >= 0 && tp.needs_grad(ib)) {
      // Plain loop: Eigen's vectorized reductions pick a summation order
      // from the buffer alignment, which breaks run-to-run reproducibility.
      double* gb = tp.grad(ib).data();
      const double* gd = g.data();
      for (int r = 0, rows = g.rows(), cols = g.cols(); r < rows; ++r) {
        for (int c = 0; c < cols; ++c) gb[c] += gd[static_cast<std::size_t>(r) * cols + c];
      }
    }
  });
}

}  // namespace

Var linear(Var x, Var w, Var b) { return linear_impl(x, w, &b); }
Var linear(Var x, Var w) { return linear_impl(x, w, nullptr); }

Var add(Var a, Var b) {
  require_same("add", a, b);
  Tape& t = tape_of(a, b);
  Tensor out = a.value();
  out.accumulate(b.value());
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), {ia, ib}, [ia, ib](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad(ia).accumulate(g);
    if (tp.needs_grad(ib)) tp.grad(ib).accumulate(g);
  });
}

Var sub(Var a, Var b) {
  require_same("sub", a, b);
  Tape& t = tape_of(a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), {ia, ib}, [ia, ib](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad(ia).accumulate(g);
    if (tp.needs_grad(ib)) {
      Tensor& gb = tp.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same("mul", a, b);
  Tape& t = tape_of(a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), {ia, ib}, [ia, ib](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.needs_grad(ia)) {
      Tensor& ga = tp.grad(ia);
      const Tensor& bv = tp.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.needs_grad(ib)) {
      Tensor& gb = tp.grad(ib);
      const Tensor& av = tp.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  const int ia = a.id;
  return unary(a, [s](double v) { return s * v; }, [ia, s](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_scalar(Var a, double s) {
  const int ia = a.id;
  return unary(a, [s](double v) { return v + s; }, [ia](Tape& tp, int self) {
    tp.grad(ia).accumulate(tp.grad(self));
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  const int ia = a.id;
  return a.tape->push(Tensor::scalar(total), {ia}, [ia](Tape& tp, int self) {
    const double g = tp.grad(self)[0];
    for (auto& v : tp.grad(ia).values()) v += g;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) fail(ErrorCode::ShapeMismatch, "mean of an empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorCode::ShapeMismatch, "concat_cols of nothing");
  Tape& t = *parts[0].tape;
  const int rows = parts[0].value().rows();
  int total = 0;
  std::vector<int> ids, widths;
  for (const Var& p : parts) {
    require_rank("concat_cols", p, 2);
    if (p.tape != &t) fail(ErrorCode::InvalidArgument, "operands belong to different tapes");
    if (p.value().rows() != rows) shape_error("concat_cols", parts[0].shape(), p.shape());
    ids.push_back(p.id);
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor out({rows, total});
  int offset = 0;
  for (const Var& p : parts) {
    as_mat(out).middleCols(offset, p.value().cols()) = as_mat(p.value());
    offset += p.value().cols();
  }
  return t.push(std::move(out), ids, [ids, widths](Tape& tp, int self) {
    const auto g = as_mat(tp.grad(self));
    int off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (tp.needs_grad(ids[k])) as_mat(tp.grad(ids[k])) += g.middleCols(off, widths[k]);
      off += widths[k];
    }
  });
}

Var gather_rows(Var a, std::vector<int> rows) {
  require_rank("gather_rows", a, 2);
  const int n = a.value().rows();
  const int cols = a.value().cols();
  Tensor out({static_cast<int>(rows.size()), cols});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= n) fail(ErrorCode::ShapeMismatch, "gather_rows index out of range");
    std::copy_n(a.value().data() + static_cast<std::size_t>(rows[r]) * cols, cols,
                out.data() + r * static_cast<std::size_t>(cols));
  }
  const int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, rows = std::move(rows), cols](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double* src = g.data() + r * static_cast<std::size_t>(cols);
      double* dst = ga.data() + static_cast<std::size_t>(rows[r]) * cols;
      for (int c = 0; c < cols; ++c) dst[c] += src[c];
    }
  });
}

Var gather_cols(Var a, std::vector<int> cols) {
  require_rank("gather_cols", a, 2);
  const int n = a.value().rows();
  const int in_cols = a.value().cols();
  const int out_cols = static_cast<int>(cols.size());
  for (int c : cols) {
    if (c < 0 || c >= in_cols) fail(ErrorCode::ShapeMismatch, "gather_cols index out of range");
  }
  Tensor out({n, out_cols});
  for (int r = 0; r < n; ++r) {
    for (int k = 0; k < out_cols; ++k) out.at(r, k) = a.value().at(r, cols[k]);
  }
  const int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, cols = std::move(cols), n](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    for (int r = 0; r < n; ++r) {
      for (std::size_t k = 0; k < cols.size(); ++k) ga.at(r, cols[k]) += g.at(r, static_cast<int>(k));
    }
  });
}

Var slice_cols(Var a, int start, int count) {
  require_rank("slice_cols", a, 2);
  if (start < 0 || count < 0 || start + count > a.value().cols()) {
    fail(ErrorCode::ShapeMismatch, "slice_cols [" + std::to_string(start) + ", +" + std::to_string(count) +
                                       ") outside " + shape_string(a.shape()));
  }
  Tensor out({a.value().rows(), count});
  as_mat(out) = as_mat(a.value()).middleCols(start, count);
  const int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, start, count](Tape& tp, int self) {
    as_mat(tp.grad(ia)).middleCols(start, count) += as_mat(tp.grad(self));
  });
}

Var reshape(Var a, std::vector<int> shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var relu(Var a) {
  const int ia = a.id;
  return unary(a, [](double v) { return v > 0.0 ? v : 0.0; }, [ia](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& x = tp.value(ia);
    Tensor& ga = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) ga[i] += g[i];
    }
  });
}

Var leaky_relu(Var a, double slope) {
  const int ia = a.id;
  return unary(a, [slope](double v) { return v > 0.0 ? v : slope * v; }, [ia, slope](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& x = tp.value(ia);
    Tensor& ga = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > 0.0 ? g[i] : slope * g[i];
  });
}

Var tanh(Var a) {
  return unary(a, [](double v) { return std::tanh(v); }, [ia = a.id](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& y = tp.value(self);
    Tensor& ga = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var sigmoid(Var a) {
  auto f = [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  };
  return unary(a, f, [ia = a.id](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& y = tp.value(self);
    Tensor& ga = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var softmax_rows(Var a) {
  require_rank("softmax_rows", a, 2);
  Tensor out = a.value();
  const int rows = out.rows(), cols = out.cols();
  for (int r = 0; r < rows; ++r) {
    double* row = out.data() + static_cast<std::size_t>(r) * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      z += row[c];
    }
    for (int c = 0; c < cols; ++c) row[c] /= z;
  }
  const int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, rows, cols](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& y = tp.value(self);
    Tensor& ga = tp.grad(ia);
    for (int r = 0; r < rows; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * cols;
      double dotp = 0.0;
      for (int c = 0; c < cols; ++c) dotp += g[base + c] * y[base + c];
      for (int c = 0; c < cols; ++c) ga[base + c] += y[base + c] * (g[base + c] - dotp);
    }
  });
}

Var layernorm_rows(Var x, Var gamma, Var beta, double eps) {
  require_rank("layernorm", x, 2);
  const int rows = x.value().rows(), cols = x.value().cols();
  if (gamma.value().size() != static_cast<std::size_t>(cols) || beta.value().size() != static_cast<std::size_t>(cols)) {
    shape_error("layernorm affine", x.shape(), gamma.shape());
  }
  Tape& t = tape_of(x, gamma);
  Tensor out({rows, cols});
  Tensor xhat({rows, cols});
  std::vector<double> inv_std(rows);
  const Tensor& xv = x.value();
  for (int r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * cols;
    double mu = 0.0;
    for (int c = 0; c < cols; ++c) mu += xv[base + c];
    mu /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) var += (xv[base + c] - mu) * (xv[base + c] - mu);
    var /= cols;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < cols; ++c) {
      xhat[base + c] = (xv[base + c] - mu) * inv_std[r];
      out[base + c] = gamma.value()[c] * xhat[base + c] + beta.value()[c];
    }
  }
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return t.push(std::move(out), {ix, ig, ib},
                [ix, ig, ib, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  const Tensor& gam = tp.value(ig);
                  if (tp.needs_grad(ig) || tp.needs_grad(ib)) {
                    Tensor& gg = tp.grad(ig);
                    Tensor& gb = tp.grad(ib);
                    for (int r = 0; r < rows; ++r) {
                      const std::size_t base = static_cast<std::size_t>(r) * cols;
                      for (int c = 0; c < cols; ++c) {
                        gg[c] += g[base + c] * xhat[base + c];
                        gb[c] += g[base + c];
                      }
                    }
                  }
                  if (!tp.needs_grad(ix)) return;
                  Tensor& gx = tp.grad(ix);
                  for (int r = 0; r < rows; ++r) {
                    const std::size_t base = static_cast<std::size_t>(r) * cols;
                    double s1 = 0.0, s2 = 0.0;
                    for (int c = 0; c < cols; ++c) {
                      const double dxh = g[base + c] * gam[c];
                      s1 += dxh;
                      s2 += dxh * xhat[base + c];
                    }
                    for (int c = 0; c < cols; ++c) {
                      const double dxh = g[base + c] * gam[c];
                      gx[base + c] += inv_std[r] / cols * (cols * dxh - s1 - xhat[base + c] * s2);
                    }
                  }
                });
}

namespace {

struct ConvGeom {
  int n, c, h, w, o, k, pad, ho, wo;
};

// cols is [c * k * k, ho * wo] for image `img`.
void im2col(const double* img, const ConvGeom& g, double* cols) {
  const int plane = g.ho * g.wo;
  for (int ch = 0; ch < g.c; ++ch) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        double* dst = cols + static_cast<std::size_t>((ch * g.k + ky) * g.k + kx) * plane;
        for (int y = 0; y < g.ho; ++y) {
          const int sy = y + ky - g.pad;
          for (int x = 0; x < g.wo; ++x) {
            const int sx = x + kx - g.pad;
            dst[y * g.wo + x] = (sy >= 0 && sy < g.h && sx >= 0 && sx < g.w)
                                    ? img[(static_cast<std::size_t>(ch) * g.h + sy) * g.w + sx]
                                    : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeom& g, double* img) {
  const int plane = g.ho * g.wo;
  for (int ch = 0; ch < g.c; ++ch) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const double* src = cols + static_cast<std::size_t>((ch * g.k + ky) * g.k + kx) * plane;
        for (int y = 0; y < g.ho; ++y) {
          const int sy = y + ky - g.pad;
          if (sy < 0 || sy >= g.h) continue;
          for (int x = 0; x < g.wo; ++x) {
            const int sx = x + kx - g.pad;
            if (sx < 0 || sx >= g.w) continue;
            img[(static_cast<std::size_t>(ch) * g.h + sy) * g.w + sx] += src[y * g.wo + x];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var x, Var weight, Var bias, int pad) {
  require_rank("conv2d input", x, 4);
  require_rank("conv2d weight", weight, 4);
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (ws[1] != xs[1] || ws[2] != ws[3]) shape_error("conv2d", xs, ws);
  if (bias.value().size() != static_cast<std::size_t>(ws[0])) shape_error("conv2d bias", ws, bias.shape());
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], pad, xs[2] + 2 * pad - ws[2] + 1, xs[3] + 2 * pad - ws[2] + 1};
  if (g.ho <= 0 || g.wo <= 0) shape_error("conv2d output", xs, ws);
  Tape& t = tape_of(x, weight);
  const int ckk = g.c * g.k * g.k;
  const int plane = g.ho * g.wo;
  Tensor out({g.n, g.o, g.ho, g.wo});
  std::vector<double> cols(static_cast<std::size_t>(ckk) * plane);
  const ConstMatMap wm(weight.value().data(), g.o, ckk);
  const Eigen::Map<const Eigen::VectorXd> bv(bias.value().data(), g.o);
  for (int i = 0; i < g.n; ++i) {
    im2col(x.value().data() + static_cast<std::size_t>(i) * g.c * g.h * g.w, g, cols.data());
    MatMap y(out.data() + static_cast<std::size_t>(i) * g.o * plane, g.o, plane);
    y.noalias() = wm * ConstMatMap(cols.data(), ckk, plane);
    y.colwise() += bv;
  }
  const int ix = x.id, iw = weight.id, ib = bias.id;
  return t.push(std::move(out), {ix, iw, ib}, [ix, iw, ib, g](Tape& tp, int self) {
    const int ckk = g.c * g.k * g.k;
    const int plane = g.ho * g.wo;
    const Tensor& gy = tp.grad(self);
    std::vector<double> cols(static_cast<std::size_t>(ckk) * plane);
    std::vector<double> dcols(static_cast<std::size_t>(ckk) * plane);
    const ConstMatMap wm(tp.value(iw).data(), g.o, ckk);
    const bool gx_needed = tp.needs_grad(ix);
    const bool gw_needed = tp.needs_grad(iw);
    for (int i = 0; i < g.n; ++i) {
      const ConstMatMap dy(gy.data() + static_cast<std::size_t>(i) * g.o * plane, g.o, plane);
      if (tp.needs_grad(ib)) {
        double* gb = tp.grad(ib).data();
        for (int o = 0; o < g.o; ++o) {
          double acc = 0.0;
          for (int k = 0; k < plane; ++k) acc += dy(o, k);
          gb[o] += acc;
        }
      }
      if (gw_needed) {
        im2col(tp.value(ix).data() + static_cast<std::size_t>(i) * g.c * g.h * g.w, g, cols.data());
        MatMap(tp.grad(iw).data(), g.o, ckk).noalias() += dy * ConstMatMap(cols.data(), ckk, plane).transpose();
      }
      if (gx_needed) {
        MatMap(dcols.data(), ckk, plane).noalias() = wm.transpose() * dy;
        col2im_add(dcols.data(), g, tp.grad(ix).data() + static_cast<std::size_t>(i) * g.c * g.h * g.w);
      }
    }
  });
}

Var maxpool2d(Var x) {
  require_rank("maxpool2d", x, 4);
  const auto& s = x.shape();
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  const int ho = h / 2, wo = w / 2;
  if (ho == 0 || wo == 0) fail(ErrorCode::ShapeMismatch, "maxpool2d input too small: " + shape_string(s));
  Tensor out({n, c, ho, wo});
  std::vector<std::size_t> argmax(out.size());
  const Tensor& xv = x.value();
  std::size_t o = 0;
  for (int i = 0; i < n * c; ++i) {
    const std::size_t plane = static_cast<std::size_t>(i) * h * w;
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx, ++o) {
        std::size_t best = plane + static_cast<std::size_t>(2 * y) * w + 2 * xx;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = plane + static_cast<std::size_t>(2 * y + dy) * w + 2 * xx + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        argmax[o] = best;
        out[o] = xv[best];
      }
    }
  }
  const int ix = x.id;
  return x.tape->push(std::move(out), {ix}, [ix, argmax = std::move(argmax)](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
  });
}

Var batchnorm2d(Var x, Var gamma, Var beta, BatchNormState& state, bool training) {
  require_rank("batchnorm2d", x, 4);
  const auto& s = x.shape();
  const int n = s[0], c = s[1], hw = s[2] * s[3];
  if (gamma.value().size() != static_cast<std::size_t>(c) || beta.value().size() != static_cast<std::size_t>(c) ||
      state.running_mean.size() != static_cast<std::size_t>(c)) {
    shape_error("batchnorm2d affine", s, gamma.shape());
  }
  Tape& t = tape_of(x, gamma);
  const double count = static_cast<double>(n) * hw;
  std::vector<double> mu(c), inv_std(c);
  const Tensor& xv = x.value();
  for (int ch = 0; ch < c; ++ch) {
    if (training) {
      double m = 0.0;
      for (int i = 0; i < n; ++i) {
        const double* p = xv.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
        for (int k = 0; k < hw; ++k) m += p[k];
      }
      m /= count;
      double v = 0.0;
      for (int i = 0; i < n; ++i) {
        const double* p = xv.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
        for (int k = 0; k < hw; ++k) v += (p[k] - m) * (p[k] - m);
      }
      v /= count;
      mu[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(v + state.eps);
      state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * m;
      state.running_var[ch] = (1.0 - state.momentum) * state.running_var[ch] + state.momentum * v;
    } else {
      mu[ch] = state.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(state.running_var[ch] + state.eps);
    }
  }
  Tensor out(s);
  Tensor xhat(s);
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
      for (int k = 0; k < hw; ++k) {
        xhat[base + k] = (xv[base + k] - mu[ch]) * inv_std[ch];
        out[base + k] = gamma.value()[ch] * xhat[base + k] + beta.value()[ch];
      }
    }
  }
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return t.push(std::move(out), {ix, ig, ib},
                [ix, ig, ib, n, c, hw, training, count, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                    Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  const Tensor& gam = tp.value(ig);
                  std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
                  for (int i = 0; i < n; ++i) {
                    for (int ch = 0; ch < c; ++ch) {
                      const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                      for (int k = 0; k < hw; ++k) {
                        sum_dy[ch] += g[base + k];
                        sum_dy_xhat[ch] += g[base + k] * xhat[base + k];
                      }
                    }
                  }
                  if (tp.needs_grad(ig)) {
                    Tensor& gg = tp.grad(ig);
                    for (int ch = 0; ch < c; ++ch) gg[ch] += sum_dy_xhat[ch];
                  }
                  if (tp.needs_grad(ib)) {
                    Tensor& gb = tp.grad(ib);
                    for (int ch = 0; ch < c; ++ch) gb[ch] += sum_dy[ch];
                  }
                  if (!tp.needs_grad(ix)) return;
                  Tensor& gx = tp.grad(ix);
                  for (int i = 0; i < n; ++i) {
                    for (int ch = 0; ch < c; ++ch) {
                      const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                      const double k1 = gam[ch] * inv_std[ch];
                      for (int k = 0; k < hw; ++k) {
                        if (training) {
                          gx[base + k] +=
                              k1 / count * (count * g[base + k] - sum_dy[ch] - xhat[base + k] * sum_dy_xhat[ch]);
                        } else {
                          gx[base + k] += k1 * g[base + k];
                        }
                      }
                    }
                  }
                });
}

Var causal_attention(Var q, Var k, Var v, AttentionLayout layout) {
  require_rank("attention q", q, 2);
  require_same("attention q/k", q, k);
  require_same("attention q/v", q, v);
  const int B = layout.batch, T = layout.steps, H = layout.heads;
  const int D = q.value().cols();
  if (B * T != q.value().rows() || H <= 0 || D % H != 0) {
    fail(ErrorCode::ShapeMismatch, "attention layout batch=" + std::to_string(B) + " steps=" + std::to_string(T) +
                                       " heads=" + std::to_string(H) + " does not fit " + shape_string(q.shape()));
  }
  const int dh = D / H;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const int shift = layout.exclude_self ? 1 : 0;
  Tape& t = tape_of(q, k);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  Tensor out({B * T, D});
  // probs[((b * H + h) * T + i) * T + j]; masked entries stay zero.
  std::vector<double> probs(static_cast<std::size_t>(B) * H * T * T, 0.0);
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < H; ++h) {
      for (int i = 0; i < T; ++i) {
        const int keys = i + 1 - shift;
        if (keys <= 0) continue;
        double* p = probs.data() + ((static_cast<std::size_t>(b) * H + h) * T + i) * T;
        const double* qi = qv.data() + static_cast<std::size_t>(b * T + i) * D + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < keys; ++j) {
          const double* kj = kv.data() + static_cast<std::size_t>(b * T + j) * D + h * dh;
          double s = 0.0;
          for (int d = 0; d < dh; ++d) s += qi[d] * kj[d];
          p[j] = s * scl;
          mx = std::max(mx, p[j]);
        }
        double z = 0.0;
        for (int j = 0; j < keys; ++j) {
          p[j] = std::exp(p[j] - mx);
          z += p[j];
        }
        double* oi = out.data() + static_cast<std::size_t>(b * T + i) * D + h * dh;
        for (int j = 0; j < keys; ++j) {
          p[j] /= z;
          const double* vj = vv.data() + static_cast<std::size_t>(b * T + j) * D + h * dh;
          for (int d = 0; d < dh; ++d) oi[d] += p[j] * vj[d];
        }
      }
    }
  }
  const int iq = q.id, ik = k.id, iv = v.id;
  return t.push(std::move(out), {iq, ik, iv},
                [iq, ik, iv, B, T, H, D, dh, scl, shift, probs = std::move(probs)](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  const Tensor& qv = tp.value(iq);
                  const Tensor& kv = tp.value(ik);
                  const Tensor& vv = tp.value(iv);
                  Tensor& gq = tp.grad(iq);
                  Tensor& gk = tp.grad(ik);
                  Tensor& gv = tp.grad(iv);
                  std::vector<double> dp(T);
                  for (int b = 0; b < B; ++b) {
                    for (int h = 0; h < H; ++h) {
                      for (int i = 0; i < T; ++i) {
                        const int keys = i + 1 - shift;
                        if (keys <= 0) continue;
                        const double* p = probs.data() + ((static_cast<std::size_t>(b) * H + h) * T + i) * T;
                        const std::size_t ri = static_cast<std::size_t>(b * T + i) * D + h * dh;
                        const double* gi = g.data() + ri;
                        double weighted = 0.0;
                        for (int j = 0; j < keys; ++j) {
                          const std::size_t rj = static_cast<std::size_t>(b * T + j) * D + h * dh;
                          double s = 0.0;
                          for (int d = 0; d < dh; ++d) {
                            s += gi[d] * vv[rj + d];
                            gv[rj + d] += p[j] * gi[d];
                          }
                          dp[j] = s;
                          weighted += p[j] * s;
                        }
                        for (int j = 0; j < keys; ++j) {
                          const double ds = p[j] * (dp[j] - weighted) * scl;
                          const std::size_t rj = static_cast<std::size_t>(b * T + j) * D + h * dh;
                          for (int d = 0; d < dh; ++d) {
                            gq[ri + d] += ds * kv[rj + d];
                            gk[rj + d] += ds * qv[ri + d];
                          }
                        }
                      }
                    }
                  }
                });
}

namespace {

void require_loss_shapes(const std::string& op, Var pred, const Tensor& target, const Tensor& weights) {
  if (pred.shape() != target.shape()) shape_error(op + " target", pred.shape(), target.shape());
  if (pred.shape() != weights.shape()) shape_error(op + " weights", pred.shape(), weights.shape());
}

constexpr double kProbClamp = 1e-12;

}  // namespace

Var bce(Var prob, const Tensor& target, const Tensor& weights) {
  require_loss_shapes("bce", prob, target, weights);
  const Tensor& p = prob.value();
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (weights[i] == 0.0) continue;
    const double pc = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
    total -= weights[i] * (target[i] * std::log(pc) + (1.0 - target[i]) * std::log(1.0 - pc));
  }
  const int ip = prob.id;
  return prob.tape->push(Tensor::scalar(total), {ip}, [ip, target, weights](Tape& tp, int self) {
    const double g = tp.grad(self)[0];
    const Tensor& p = tp.value(ip);
    Tensor& gp = tp.grad(ip);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (weights[i] == 0.0) continue;
      const double pc = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
      gp[i] += g * weights[i] * (pc - target[i]) / (pc * (1.0 - pc));
    }
  });
}

Var bce_with_logits(Var logits, const Tensor& target, const Tensor& weights) {
  require_loss_shapes("bce_with_logits", logits, target, weights);
  const Tensor& z = logits.value();
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (weights[i] == 0.0) continue;
    total += weights[i] * (std::max(z[i], 0.0) - z[i] * target[i] + std::log1p(std::exp(-std::abs(z[i]))));
  }
  const int iz = logits.id;
  return logits.tape->push(Tensor::scalar(total), {iz}, [iz, target, weights](Tape& tp, int self) {
    const double g = tp.grad(self)[0];
    const Tensor& z = tp.value(iz);
    Tensor& gz = tp.grad(iz);
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (weights[i] == 0.0) continue;
      const double s = z[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-z[i])) : std::exp(z[i]) / (1.0 + std::exp(z[i]));
      gz[i] += g * weights[i] * (s - target[i]);
    }
  });
}

Var mse(Var a, Var b) {
  require_same("mse", a, b);
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const double n = static_cast<double>(av.size());
  double total = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) total += (av[i] - bv[i]) * (av[i] - bv[i]);
  const int ia = a.id, ib = b.id;
  return t.push(Tensor::scalar(total / n), {ia, ib}, [ia, ib, n](Tape& tp, int self) {
    const double g = tp.grad(self)[0];
    const Tensor& av = tp.value(ia);
    const Tensor& bv = tp.value(ib);
    if (tp.needs_grad(ia)) {
      Tensor& ga = tp.grad(ia);
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * 2.0 * (av[i] - bv[i]) / n;
    }
    if (tp.needs_grad(ib)) {
      Tensor& gb = tp.grad(ib);
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= g * 2.0 * (av[i] - bv[i]) / n;
    }
  });
}

Var weighted_sq_error(Var pred, const Tensor& target, const Tensor& row_weights) {
  require_rank("weighted_sq_error", pred, 2);
  if (pred.shape() != target.shape()) shape_error("weighted_sq_error target", pred.shape(), target.shape());
  const int rows = pred.value().rows(), cols = pred.value().cols();
  if (row_weights.size() != static_cast<std::size_t>(rows)) {
    shape_error("weighted_sq_error weights", pred.shape(), row_weights.shape());
  }
  const Tensor& p = pred.value();
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += (p.at(r, c) - target.at(r, c)) * (p.at(r, c) - target.at(r, c));
    total += row_weights[r] * s;
  }
  const int ip = pred.id;
  return pred.tape->push(Tensor::scalar(total), {ip}, [ip, target, row_weights, rows, cols](Tape& tp, int self) {
    const double g = tp.grad(self)[0];
    const Tensor& p = tp.value(ip);
    Tensor& gp = tp.grad(ip);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) gp.at(r, c) += g * row_weights[r] * 2.0 * (p.at(r, c) - target.at(r, c));
    }
  });
}

}  // namespace roadforge::diff
