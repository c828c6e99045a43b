#include "shharm/nn/ops.hpp"

#include <algorithm>
#include <memory>

#include "shharm/error.hpp"

namespace shharm::nn {

namespace {

template <typename T>
using MapR = Eigen::Map<RowMatrix<T>>;
template <typename T>
using CMapR = Eigen::Map<const RowMatrix<T>>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

struct ConvGeometry {
  int cin, batch, d, h, w;
  int cout, pad;
  int od, oh, ow;
  std::size_t out_positions() const { return static_cast<std::size_t>(batch) * od * oh * ow; }
  std::size_t col_rows() const { return static_cast<std::size_t>(cin) * 27; }
};

// col[(ci * 27 + tap), (oz, oy, ox, b)] = x[ci, oz + kz - pad, oy + ky - pad, ox + kx - pad, b]
// With the batch innermost every (row, output voxel) pair is a contiguous
// run of `batch` values: either a copy or zeros.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t npos = g.out_positions();
  const std::size_t nb = static_cast<std::size_t>(g.batch);
  const std::size_t in_spatial = static_cast<std::size_t>(g.d) * g.h * g.w;
  for (int ci = 0; ci < g.cin; ++ci) {
    const T* xc = x + static_cast<std::size_t>(ci) * in_spatial * nb;
    for (int kz = 0; kz < 3; ++kz) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          T* dst = col + (static_cast<std::size_t>(ci) * 27 + kz * 9 + ky * 3 + kx) * npos;
          for (int oz = 0; oz < g.od; ++oz) {
            const int iz = oz + kz - g.pad;
            for (int oy = 0; oy < g.oh; ++oy) {
              const int iy = oy + ky - g.pad;
              const bool zy_ok = iz >= 0 && iz < g.d && iy >= 0 && iy < g.h;
              for (int ox = 0; ox < g.ow; ++ox, dst += nb) {
                const int ix = ox + kx - g.pad;
                if (zy_ok && ix >= 0 && ix < g.w)
                  std::copy_n(xc + ((static_cast<std::size_t>(iz) * g.h + iy) * g.w + ix) * nb, nb, dst);
                else
                  std::fill_n(dst, nb, T(0));
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* dx) {
  const std::size_t npos = g.out_positions();
  const std::size_t nb = static_cast<std::size_t>(g.batch);
  const std::size_t in_spatial = static_cast<std::size_t>(g.d) * g.h * g.w;
  for (int ci = 0; ci < g.cin; ++ci) {
    T* xc = dx + static_cast<std::size_t>(ci) * in_spatial * nb;
    for (int kz = 0; kz < 3; ++kz) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const T* src = col + (static_cast<std::size_t>(ci) * 27 + kz * 9 + ky * 3 + kx) * npos;
          for (int oz = 0; oz < g.od; ++oz) {
            const int iz = oz + kz - g.pad;
            for (int oy = 0; oy < g.oh; ++oy) {
              const int iy = oy + ky - g.pad;
              const bool zy_ok = iz >= 0 && iz < g.d && iy >= 0 && iy < g.h;
              for (int ox = 0; ox < g.ow; ++ox, src += nb) {
                const int ix = ox + kx - g.pad;
                if (!(zy_ok && ix >= 0 && ix < g.w)) continue;
                T* out = xc + ((static_cast<std::size_t>(iz) * g.h + iy) * g.w + ix) * nb;
                for (std::size_t b = 0; b < nb; ++b) out[b] += src[b];
              }
            }
          }
        }
      }
    }
  }
}

// Row sums accumulated in double, added into `out`.
template <typename T>
void add_row_sums(const T* m, std::size_t rows, std::size_t cols, T* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    const T* row = m + r * cols;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c];
    out[r] += static_cast<T>(acc);
  }
}

}  // namespace

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int padding) {
  require(padding == 0 || padding == 1, "conv3d padding must be 0 or 1");
  require(x.shape().size() == 5, "conv3d input must be [C, D, H, W, B], got " + to_string(x.shape()));
  require(weight.shape().size() == 5 && weight.dim(2) == 3 && weight.dim(3) == 3 && weight.dim(4) == 3,
          "conv3d weight must be [C_out, C_in, 3, 3, 3], got " + to_string(weight.shape()));
  ConvGeometry g{x.dim(0), x.dim(4), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), padding, 0, 0, 0};
  require(weight.dim(1) == g.cin, "conv3d channel mismatch: input has " + std::to_string(g.cin) +
                                      " channels, weight expects " + std::to_string(weight.dim(1)));
  require(bias.shape() == Shape{g.cout}, "conv3d bias must be [C_out]");
  g.od = g.d + 2 * padding - 2;
  g.oh = g.h + 2 * padding - 2;
  g.ow = g.w + 2 * padding - 2;
  require(g.od >= 1 && g.oh >= 1 && g.ow >= 1, "conv3d spatial dims smaller than the kernel");

  const std::size_t npos = g.out_positions();
  auto col = std::make_shared<std::vector<T>>(g.col_rows() * npos);
  im2col(g, x.value().data(), col->data());

  std::vector<T> out(static_cast<std::size_t>(g.cout) * npos);
  {
    CMapR<T> w(weight.value().data(), g.cout, static_cast<Eigen::Index>(g.col_rows()));
    CMapR<T> c(col->data(), static_cast<Eigen::Index>(g.col_rows()), static_cast<Eigen::Index>(npos));
    MapR<T> o(out.data(), g.cout, static_cast<Eigen::Index>(npos));
    o.noalias() = w * c;
    const T* b = bias.value().data();
    for (int r = 0; r < g.cout; ++r) o.row(r).array() += b[r];
  }

  const bool keep_col = weight.requires_grad();
  if (!keep_col) col.reset();
  return Var<T>::from_op(
      {g.cout, g.od, g.oh, g.ow, g.batch}, std::move(out), {x, weight, bias}, [g, col](Node<T>& self) {
        auto& xin = *self.parents[0];
        auto& w = *self.parents[1];
        auto& b = *self.parents[2];
        const std::size_t npos = g.out_positions();
        const auto rows = static_cast<Eigen::Index>(g.col_rows());
        CMapR<T> dout(self.grad.data(), g.cout, static_cast<Eigen::Index>(npos));
        if (w.requires_grad) {
          w.ensure_grad();
          MapR<T> dw(w.grad.data(), g.cout, rows);
          CMapR<T> c(col->data(), rows, static_cast<Eigen::Index>(npos));
          dw.noalias() += dout * c.transpose();
        }
        if (b.requires_grad) {
          b.ensure_grad();
          add_row_sums(self.grad.data(), static_cast<std::size_t>(g.cout), npos, b.grad.data());
        }
        if (xin.requires_grad) {
          xin.ensure_grad();
          std::vector<T> dcol(g.col_rows() * npos);
          CMapR<T> wm(w.value.data(), g.cout, rows);
          MapR<T> dc(dcol.data(), rows, static_cast<Eigen::Index>(npos));
          dc.noalias() = wm.transpose() * dout;
          col2im_add(g, dcol.data(), xin.grad.data());
        }
      });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require(x.shape().size() == 2, "linear input must be [in, B], got " + to_string(x.shape()));
  require(weight.shape().size() == 2 && weight.dim(1) == x.dim(0),
          "linear weight " + to_string(weight.shape()) + " does not match input " + to_string(x.shape()));
  const int nout = weight.dim(0), nin = x.dim(0), batch = x.dim(1);
  require(bias.shape() == Shape{nout}, "linear bias must be [out]");
  std::vector<T> out(static_cast<std::size_t>(nout) * batch);
  {
    CMapR<T> w(weight.value().data(), nout, nin);
    CMapR<T> xm(x.value().data(), nin, batch);
    MapR<T> o(out.data(), nout, batch);
    o.noalias() = w * xm;
    for (int r = 0; r < nout; ++r) o.row(r).array() += bias.value()[r];
  }
  return Var<T>::from_op({nout, batch}, std::move(out), {x, weight, bias}, [nout, nin, batch](Node<T>& self) {
    auto& xin = *self.parents[0];
    auto& w = *self.parents[1];
    auto& b = *self.parents[2];
    CMapR<T> dout(self.grad.data(), nout, batch);
    if (w.requires_grad) {
      w.ensure_grad();
      MapR<T> dw(w.grad.data(), nout, nin);
      dw.noalias() += dout * CMapR<T>(xin.value.data(), nin, batch).transpose();
    }
    if (b.requires_grad) {
      b.ensure_grad();
      add_row_sums(self.grad.data(), static_cast<std::size_t>(nout), static_cast<std::size_t>(batch), b.grad.data());
    }
    if (xin.requires_grad) {
      xin.ensure_grad();
      MapR<T> dx(xin.grad.data(), nin, batch);
      dx.noalias() += CMapR<T>(w.value.data(), nout, nin).transpose() * dout;
    }
  });
}

template <typename T>
Var<T> matmul_const(const RowMatrix<T>& m, const Var<T>& x) {
  require(!x.shape().empty() && x.dim(0) == m.cols(),
          "matmul_const: matrix has " + std::to_string(m.cols()) + " columns, input is " + to_string(x.shape()));
  const auto nin = static_cast<Eigen::Index>(m.cols());
  const auto nout = static_cast<Eigen::Index>(m.rows());
  const auto rest = static_cast<Eigen::Index>(x.size() / static_cast<std::size_t>(nin));
  Shape shape = x.shape();
  shape[0] = static_cast<int>(nout);
  std::vector<T> out(static_cast<std::size_t>(nout * rest));
  MapR<T>(out.data(), nout, rest).noalias() = m * CMapR<T>(x.value().data(), nin, rest);
  return Var<T>::from_op(std::move(shape), std::move(out), {x}, [m, nin, nout, rest](Node<T>& self) {
    auto& xin = *self.parents[0];
    if (!xin.requires_grad) return;
    xin.ensure_grad();
    MapR<T>(xin.grad.data(), nin, rest).noalias() += m.transpose() * CMapR<T>(self.grad.data(), nout, rest);
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  std::vector<T> out(x.value().begin(), x.value().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return Var<T>::from_op(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& xin = *self.parents[0];
    if (!xin.requires_grad) return;
    xin.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (xin.value[i] > T(0)) xin.grad[i] += self.grad[i];
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return Var<T>::from_op(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  std::vector<T> out(x.value().begin(), x.value().end());
  for (auto& v : out) v *= factor;
  return Var<T>::from_op(x.shape(), std::move(out), {x}, [factor](Node<T>& self) {
    auto& xin = *self.parents[0];
    if (!xin.requires_grad) return;
    xin.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xin.grad[i] += factor * self.grad[i];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat needs at least one input");
  Shape shape = parts[0].shape();
  require(!shape.empty(), "concat inputs must have a leading axis");
  const Shape tail(shape.begin() + 1, shape.end());
  int channels = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    require(Shape(p.shape().begin() + 1, p.shape().end()) == tail,
            "concat: trailing shape mismatch " + to_string(p.shape()) + " vs " + to_string(shape));
    channels += p.dim(0);
    out.insert(out.end(), p.value().begin(), p.value().end());
  }
  shape[0] = channels;
  return Var<T>::from_op(std::move(shape), std::move(out), parts, [](Node<T>& self) {
    std::size_t offset = 0;
    for (auto& parent : self.parents) {
      const std::size_t n = parent->value.size();
      if (parent->requires_grad) {
        parent->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) parent->grad[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  std::vector<T> out(x.value().begin(), x.value().end());
  return Var<T>::from_op(std::move(shape), std::move(out), {x}, [](Node<T>& self) {
    auto& xin = *self.parents[0];
    if (!xin.requires_grad) return;
    xin.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xin.grad[i] += self.grad[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double acc = 0.0;
  for (T v : x.value()) acc += v;
  return Var<T>::from_op({1}, {static_cast<T>(acc)}, {x}, [](Node<T>& self) {
    auto& xin = *self.parents[0];
    if (!xin.requires_grad) return;
    xin.ensure_grad();
    for (auto& g : xin.grad) g += self.grad[0];
  });
}

template <typename T>
Var<T> mean_square(const Var<T>& x) {
  require(x.size() > 0, "mean_square of an empty tensor");
  double acc = 0.0;
  for (T v : x.value()) acc += static_cast<double>(v) * v;
  const double n = static_cast<double>(x.size());
  return Var<T>::from_op({1}, {static_cast<T>(acc / n)}, {x}, [n](Node<T>& self) {
    auto& xin = *self.parents[0];
    if (!xin.requires_grad) return;
    xin.ensure_grad();
    const T k = static_cast<T>(2.0 / n) * self.grad[0];
    for (std::size_t i = 0; i < xin.value.size(); ++i) xin.grad[i] += k * xin.value[i];
  });
}

#define SHHARM_INSTANTIATE(T)                                                  \
  template Var<T> conv3d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int); \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);      \
  template Var<T> matmul_const<T>(const RowMatrix<T>&, const Var<T>&);         \
  template Var<T> relu<T>(const Var<T>&);                                      \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                        \
  template Var<T> scale<T>(const Var<T>&, T);                                  \
  template Var<T> concat<T>(const std::vector<Var<T>>&);                       \
  template Var<T> reshape<T>(const Var<T>&, Shape);                            \
  template Var<T> sum<T>(const Var<T>&);                                       \
  template Var<T> mean_square<T>(const Var<T>&);

SHHARM_INSTANTIATE(float)
SHHARM_INSTANTIATE(double)

#undef SHHARM_INSTANTIATE

}  // namespace shharm::nn
