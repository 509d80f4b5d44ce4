#include "ensdown/autodiff.hpp"

#include "ensdown/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>

namespace ensdown::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXd>;

void require_rank(const char* op, const char* what, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got shape " +
                         shape_string(t.shape()));
    }
}

void require_same_tape(const Var& a, const Var& b) {
    if (&a.tape() != &b.tape()) {
        throw Error("operands recorded on different tapes");
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(const char* op, Tensor value, bool requires_grad, Backward backward) {
    if (consumed_) {
        throw Error("tape already consumed by backward(); call reset() before recording");
    }
    nodes_.push_back(Node{op, std::move(value), {}, requires_grad, std::move(backward)});
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
    if (!value.all_finite()) throw NonFiniteError("constant input holds a non-finite value");
    return push("constant", std::move(value), false, nullptr);
}

Var Tape::parameter(Tensor value) {
    if (!value.all_finite()) throw NonFiniteError("parameter holds a non-finite value");
    return push("parameter", std::move(value), true, nullptr);
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    if (!value.all_finite()) {
        throw NonFiniteError(std::string(op) + " produced a non-finite value");
    }
    bool needs = false;
    for (const Var& in : inputs) {
        if (&in.tape() != this) throw Error(std::string(op) + ": input recorded on a different tape");
        needs = needs || in.requires_grad();
    }
    return push(op, std::move(value), needs, needs ? std::move(backward) : nullptr);
}

Tensor Tape::grad(const Var& v) const {
    const Node& n = nodes_.at(v.id());
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return Tensor(n.value.shape(), n.grad);
}

Tensor Tape::take_value(const Var& v) {
    if (!consumed_) throw Error("take_value: tape has not run backward()");
    Node& n = nodes_.at(v.id());
    return std::move(n.value);
}

Tensor Tape::take_grad(const Var& v) {
    if (!consumed_) throw Error("take_grad: tape has not run backward()");
    Node& n = nodes_.at(v.id());
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return Tensor(n.value.shape(), std::move(n.grad));
}

void Tape::accumulate(const Var& v, std::span<const double> g) {
    Node& n = nodes_.at(v.id());
    if (!n.requires_grad) return;
    if (g.size() != n.value.size()) {
        throw ShapeError(std::string("gradient size mismatch for ") + n.op);
    }
    if (n.grad.empty()) {
        n.grad.assign(g.begin(), g.end());
    } else {
        for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }
}

std::vector<std::size_t> Tape::backward(const Var& loss) {
    if (&loss.tape() != this) throw Error("backward: loss belongs to another tape");
    if (consumed_) throw Error("backward: tape already consumed");
    const Node& root = nodes_.at(loss.id());
    if (root.value.size() != 1) {
        throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(root.value.shape()));
    }
    if (!root.requires_grad) {
        throw Error("backward: loss is not connected to any parameter");
    }
    for (Node& n : nodes_) n.grad.clear();
    nodes_[loss.id()].grad.assign(1, 1.0);

    std::vector<std::size_t> visited;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.backward || n.grad.empty()) continue;
        const Tensor out_grad(n.value.shape(), n.grad);
        n.backward(*this, out_grad);
        visited.push_back(i);
    }
    consumed_ = true;
    return visited;
}

void Tape::reset() {
    nodes_.clear();
    consumed_ = false;
}

// ---------------------------------------------------------------------------
// Ops

namespace {

struct ConvGeometry {
    std::size_t n, cin, h, w, cout, kh, kw;
    std::size_t hw() const { return h * w; }
    std::size_t ckk() const { return cin * kh * kw; }
    std::size_t cols() const { return n * h * w; }
};

// Valid destination range [lo, hi) along one axis for offset d.
inline void valid_range(long d, long len, long& lo, long& hi) {
    lo = std::max(0L, -d);
    hi = std::min(len, len - d);
}

/// Row (c,i,j) of the result holds, for every sample and output pixel, the
/// input value under kernel tap (i,j) of channel c (zero outside the grid).
RowMat im2col(const double* x, const ConvGeometry& g) {
    RowMat cols(static_cast<long>(g.ckk()), static_cast<long>(g.cols()));
    const long h = static_cast<long>(g.h), w = static_cast<long>(g.w);
    const long ph = static_cast<long>(g.kh / 2), pw = static_cast<long>(g.kw / 2);
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                double* row = cols.row(static_cast<long>((c * g.kh + i) * g.kw + j)).data();
                const long dy = static_cast<long>(i) - ph, dx = static_cast<long>(j) - pw;
                long y0, y1, x0, x1;
                valid_range(dy, h, y0, y1);
                valid_range(dx, w, x0, x1);
                for (std::size_t s = 0; s < g.n; ++s) {
                    const double* plane = x + (s * g.cin + c) * g.hw();
                    double* dst = row + s * g.hw();
                    std::fill(dst, dst + g.hw(), 0.0);
                    for (long yy = y0; yy < y1; ++yy) {
                        std::copy(plane + (yy + dy) * w + x0 + dx, plane + (yy + dy) * w + x1 + dx, dst + yy * w + x0);
                    }
                }
            }
        }
    }
    return cols;
}

/// Adjoint of im2col: scatter-adds column gradients back onto the input.
std::vector<double> col2im(const RowMat& dcols, const ConvGeometry& g) {
    std::vector<double> dx(g.n * g.cin * g.hw(), 0.0);
    const long h = static_cast<long>(g.h), w = static_cast<long>(g.w);
    const long ph = static_cast<long>(g.kh / 2), pw = static_cast<long>(g.kw / 2);
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                const double* row = dcols.row(static_cast<long>((c * g.kh + i) * g.kw + j)).data();
                const long dy = static_cast<long>(i) - ph, dxo = static_cast<long>(j) - pw;
                long y0, y1, x0, x1;
                valid_range(dy, h, y0, y1);
                valid_range(dxo, w, x0, x1);
                for (std::size_t s = 0; s < g.n; ++s) {
                    double* plane = dx.data() + (s * g.cin + c) * g.hw();
                    const double* src = row + s * g.hw();
                    for (long yy = y0; yy < y1; ++yy) {
                        double* d = plane + (yy + dy) * w + dxo;
                        const double* sp = src + yy * w;
                        for (long xx = x0; xx < x1; ++xx) d[xx] += sp[xx];
                    }
                }
            }
        }
    }
    return dx;
}

} // namespace

Var conv2d(const Var& input, const Var& kernels, const Var& bias) {
    require_same_tape(input, kernels);
    require_same_tape(input, bias);
    const Tensor& x = input.value();
    const Tensor& k = kernels.value();
    const Tensor& b = bias.value();
    require_rank("conv2d", "input", x, 4);
    require_rank("conv2d", "kernels", k, 4);
    require_rank("conv2d", "bias", b, 1);

    const ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(2), k.dim(3)};
    if (k.dim(1) != geo.cin) {
        throw ShapeError("conv2d: kernels expect " + std::to_string(k.dim(1)) + " input channels, input has " +
                         std::to_string(geo.cin));
    }
    if (b.dim(0) != geo.cout) {
        throw ShapeError("conv2d: bias has " + std::to_string(b.dim(0)) + " entries for " + std::to_string(geo.cout) +
                         " kernels");
    }
    if (geo.kh % 2 == 0 || geo.kw % 2 == 0) {
        throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(geo.kh) + "x" +
                         std::to_string(geo.kw));
    }
    if (geo.h == 0 || geo.w == 0) throw ShapeError("conv2d: empty spatial dimensions");

    const long cout = static_cast<long>(geo.cout), ckk = static_cast<long>(geo.ckk());
    const long ncols = static_cast<long>(geo.cols());
    const std::size_t hw = geo.hw();
    auto cols = std::make_shared<RowMat>(im2col(x.data().data(), geo));

    const ConstMapMat kmat(k.data().data(), cout, ckk);
    RowMat out2(cout, ncols);
    out2.noalias() = kmat * (*cols);

    Tensor out(Shape{geo.n, geo.cout, geo.h, geo.w});
    for (std::size_t s = 0; s < geo.n; ++s) {
        for (std::size_t o = 0; o < geo.cout; ++o) {
            const double* src = out2.row(static_cast<long>(o)).data() + s * hw;
            double* dst = out.data().data() + (s * geo.cout + o) * hw;
            const double bo = b[o];
            for (std::size_t p = 0; p < hw; ++p) dst[p] = src[p] + bo;
        }
    }

    Var xin = input, kin = kernels, bin = bias;
    return input.tape().record("conv2d", std::move(out), {input, kernels, bias},
                               [xin, kin, bin, cols, geo](Tape& tape, const Tensor& g) {
        const long cout = static_cast<long>(geo.cout), ckk = static_cast<long>(geo.ckk());
        const std::size_t hw = geo.hw();
        RowMat g2(cout, static_cast<long>(geo.cols()));
        for (std::size_t s = 0; s < geo.n; ++s) {
            for (std::size_t o = 0; o < geo.cout; ++o) {
                const double* src = g.data().data() + (s * geo.cout + o) * hw;
                std::copy(src, src + hw, g2.row(static_cast<long>(o)).data() + s * hw);
            }
        }
        if (bin.requires_grad()) {
            Eigen::VectorXd db = g2.rowwise().sum();
            tape.accumulate(bin, std::span<const double>(db.data(), geo.cout));
        }
        if (kin.requires_grad()) {
            RowMat dk(cout, ckk);
            dk.noalias() = g2 * cols->transpose();
            tape.accumulate(kin, std::span<const double>(dk.data(), geo.cout * geo.ckk()));
        }
        if (xin.requires_grad()) {
            const ConstMapMat kmat(kin.value().data().data(), cout, ckk);
            RowMat dcols(ckk, static_cast<long>(geo.cols()));
            dcols.noalias() = kmat.transpose() * g2;
            tape.accumulate(xin, col2im(dcols, geo));
        }
    });
}

Var relu(const Var& x) {
    const Tensor& v = x.value();
    Tensor out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
    Var xin = x;
    return x.tape().record("relu", std::move(out), {x}, [xin](Tape& tape, const Tensor& g) {
        const Tensor& v = xin.value();
        std::vector<double> dx(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) dx[i] = v[i] > 0.0 ? g[i] : 0.0;
        tape.accumulate(xin, dx);
    });
}

Var dense(const Var& x, const Var& weights, const Var& bias) {
    require_same_tape(x, weights);
    require_same_tape(x, bias);
    const Tensor& xv = x.value();
    const Tensor& wv = weights.value();
    const Tensor& bv = bias.value();
    require_rank("dense", "input", xv, 2);
    require_rank("dense", "weights", wv, 2);
    require_rank("dense", "bias", bv, 1);
    const std::size_t n = xv.dim(0), f = xv.dim(1), o = wv.dim(1);
    if (wv.dim(0) != f) {
        throw ShapeError("dense: input has " + std::to_string(f) + " features, weights expect " +
                         std::to_string(wv.dim(0)));
    }
    if (bv.dim(0) != o) {
        throw ShapeError("dense: bias has " + std::to_string(bv.dim(0)) + " entries for " + std::to_string(o) +
                         " outputs");
    }
    const long ln = static_cast<long>(n), lf = static_cast<long>(f), lo = static_cast<long>(o);
    Tensor out(Shape{n, o});
    MapMat om(out.data().data(), ln, lo);
    om.noalias() = ConstMapMat(xv.data().data(), ln, lf) * ConstMapMat(wv.data().data(), lf, lo);
    om.rowwise() += ConstMapVec(bv.data().data(), lo).transpose();

    Var xin = x, win = weights, bin = bias;
    return x.tape().record("dense", std::move(out), {x, weights, bias},
                           [xin, win, bin, ln, lf, lo](Tape& tape, const Tensor& g) {
                               const ConstMapMat gm(g.data().data(), ln, lo);
                               if (bin.requires_grad()) {
                                   Eigen::RowVectorXd db = gm.colwise().sum();
                                   tape.accumulate(bin, std::span<const double>(db.data(), static_cast<std::size_t>(lo)));
                               }
                               if (win.requires_grad()) {
                                   RowMat dw = ConstMapMat(xin.value().data().data(), ln, lf).transpose() * gm;
                                   tape.accumulate(win, std::span<const double>(dw.data(), static_cast<std::size_t>(lf * lo)));
                               }
                               if (xin.requires_grad()) {
                                   RowMat dx = gm * ConstMapMat(win.value().data().data(), lf, lo).transpose();
                                   tape.accumulate(xin, std::span<const double>(dx.data(), static_cast<std::size_t>(ln * lf)));
                               }
                           });
}

Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    Var xin = x;
    return x.tape().record("reshape", std::move(out), {x},
                           [xin](Tape& tape, const Tensor& g) { tape.accumulate(xin, g.data()); });
}

Var flatten(const Var& x) {
    const Shape& s = x.shape();
    if (s.empty()) throw ShapeError("flatten: scalar input");
    const std::size_t n = s[0];
    const std::size_t features = n == 0 ? 0 : x.value().size() / n;
    return reshape(x, Shape{n, features});
}

Var slice_columns(const Var& x, std::size_t start, std::size_t count) {
    const Tensor& v = x.value();
    require_rank("slice_columns", "input", v, 2);
    const std::size_t n = v.dim(0), f = v.dim(1);
    if (start + count > f) {
        throw ShapeError("slice_columns: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") exceed width " + std::to_string(f));
    }
    Tensor out(Shape{n, count});
    for (std::size_t r = 0; r < n; ++r) {
        std::copy_n(v.data().data() + r * f + start, count, out.data().data() + r * count);
    }
    Var xin = x;
    return x.tape().record("slice_columns", std::move(out), {x}, [xin, n, f, start, count](Tape& tape, const Tensor& g) {
        std::vector<double> dx(n * f, 0.0);
        for (std::size_t r = 0; r < n; ++r) {
            std::copy_n(g.data().data() + r * count, count, dx.data() + r * f + start);
        }
        tape.accumulate(xin, dx);
    });
}

Var softplus(const Var& x) {
    const Tensor& v = x.value();
    Tensor out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::max(v[i], 0.0) + std::log1p(std::exp(-std::abs(v[i])));
    }
    Var xin = x;
    return x.tape().record("softplus", std::move(out), {x}, [xin](Tape& tape, const Tensor& g) {
        const Tensor& v = xin.value();
        std::vector<double> dx(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            // logistic sigmoid, branch keeps exp() argument non-positive
            const double e = std::exp(-std::abs(v[i]));
            const double sig = v[i] >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
            dx[i] = g[i] * sig;
        }
        tape.accumulate(xin, dx);
    });
}

Var add_scalar(const Var& x, double c) {
    Tensor out = x.value();
    for (double& v : out.data()) v += c;
    Var xin = x;
    return x.tape().record("add_scalar", std::move(out), {x},
                           [xin](Tape& tape, const Tensor& g) { tape.accumulate(xin, g.data()); });
}

Var square(const Var& x) {
    Tensor out = x.value();
    for (double& v : out.data()) v *= v;
    Var xin = x;
    return x.tape().record("square", std::move(out), {x}, [xin](Tape& tape, const Tensor& g) {
        const Tensor& v = xin.value();
        std::vector<double> dx(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) dx[i] = 2.0 * v[i] * g[i];
        tape.accumulate(xin, dx);
    });
}

Var sum(const Var& x) {
    double total = 0.0;
    for (double v : x.value().data()) total += v;
    Var xin = x;
    return x.tape().record("sum", Tensor::scalar(total), {x}, [xin](Tape& tape, const Tensor& g) {
        std::vector<double> dx(xin.value().size(), g.item());
        tape.accumulate(xin, dx);
    });
}

Var weighted_sum(const Var& x, const Tensor& weights) {
    if (weights.shape() != x.shape()) {
        throw ShapeError("weighted_sum: weights " + shape_string(weights.shape()) + " vs input " +
                         shape_string(x.shape()));
    }
    double total = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) total += x.value()[i] * weights[i];
    Var xin = x;
    return x.tape().record("weighted_sum", Tensor::scalar(total), {x}, [xin, weights](Tape& tape, const Tensor& g) {
        std::vector<double> dx(weights.size());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = weights[i] * g.item();
        tape.accumulate(xin, dx);
    });
}

} // namespace ensdown::ad
