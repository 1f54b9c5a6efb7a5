#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "aianet/errors.hpp"
#include "aianet/tensor.hpp"

namespace aianet {

namespace eig {
template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatRM<T>>;
template <typename T>
using MapA = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CMapA = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
}  // namespace eig

// Reverse-mode autodiff tape over TensorT. Nodes are recorded in creation
// order, which is already a topological order for a dynamically built graph;
// backward() walks the tape once in reverse. One graph instance is
// single-threaded; independent graphs may run on independent threads as long
// as they do not share gradient sinks.
template <typename T>
class GraphT {
  public:
    using Id = std::int32_t;
    static constexpr Id kNone = -1;

    struct Node {
        TensorT<T> owned;                      // op results
        const TensorT<T>* external = nullptr;  // leaves alias caller storage
        AVec<T> grad;
        AVec<T>* sink = nullptr;  // leaf gradient accumulation target
        std::vector<Id> parents;
        std::function<void(GraphT&, Node&)> back;
        const char* op = "";
        bool needs_grad = false;
    };

    // When false, ops still compute values but record no backward closures.
    bool recording = true;
    // Scan every op result for NaN/Inf; on by default in debug builds.
    bool check_finite =
#ifdef NDEBUG
        false;
#else
        true;
#endif

    const TensorT<T>& value(Id id) const {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        return n.external ? *n.external : n.owned;
    }
    Node& node(Id id) { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }

    AVec<T>& grad(Id id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() != value(id).numel()) n.grad.assign(value(id).numel(), T(0));
        return n.grad;
    }

    // --- graph construction --------------------------------------------------

    // Leaf aliasing external storage; gradients accumulate into *sink.
    Id leaf(const TensorT<T>& t, AVec<T>* sink) {
        Node n;
        n.external = &t;
        n.sink = sink;
        n.needs_grad = recording && sink != nullptr;
        n.op = "leaf";
        nodes_.push_back(std::move(n));
        return last();
    }

    // Convenience: sink is the tensor's own grad buffer when it requires grad.
    Id leaf(TensorT<T>& t) {
        if (t.requires_grad) t.ensure_grad();
        return leaf(t, t.requires_grad ? &t.grad : nullptr);
    }

    // Constant input; never receives a gradient.
    Id input(TensorT<T> t) {
        Node n;
        n.owned = std::move(t);
        n.op = "input";
        nodes_.push_back(std::move(n));
        return last();
    }

    // --- elementwise ----------------------------------------------------------

    Id add(Id a, Id b) {
        require_same_shape(a, b, "add");
        TensorT<T> out(value(a).shape);
        eig::MapA<T>(out.data.data(), n_of(out)) =
            carr(a) + carr(b);
        return record("add", std::move(out), {a, b}, [a, b](GraphT& g, Node& self) {
            g.accumulate(a, self.grad, T(1));
            g.accumulate(b, self.grad, T(1));
        });
    }

    Id sub(Id a, Id b) {
        require_same_shape(a, b, "sub");
        TensorT<T> out(value(a).shape);
        eig::MapA<T>(out.data.data(), n_of(out)) = carr(a) - carr(b);
        return record("sub", std::move(out), {a, b}, [a, b](GraphT& g, Node& self) {
            g.accumulate(a, self.grad, T(1));
            g.accumulate(b, self.grad, T(-1));
        });
    }

    Id mul(Id a, Id b) {
        require_same_shape(a, b, "mul");
        TensorT<T> out(value(a).shape);
        eig::MapA<T>(out.data.data(), n_of(out)) = carr(a) * carr(b);
        return record("mul", std::move(out), {a, b}, [a, b](GraphT& g, Node& self) {
            if (g.needs(a)) {
                auto& ga = g.grad(a);
                eig::MapA<T>(ga.data(), ga.size()) +=
                    eig::CMapA<T>(self.grad.data(), self.grad.size()) * g.carr(b);
            }
            if (g.needs(b)) {
                auto& gb = g.grad(b);
                eig::MapA<T>(gb.data(), gb.size()) +=
                    eig::CMapA<T>(self.grad.data(), self.grad.size()) * g.carr(a);
            }
        });
    }

    Id scale(Id x, T k) {
        TensorT<T> out(value(x).shape);
        eig::MapA<T>(out.data.data(), n_of(out)) = carr(x) * k;
        return record("scale", std::move(out), {x}, [x, k](GraphT& g, Node& self) {
            g.accumulate(x, self.grad, k);
        });
    }

    Id add_const(Id x, T k) {
        TensorT<T> out(value(x).shape);
        eig::MapA<T>(out.data.data(), n_of(out)) = carr(x) + k;
        return record("add_const", std::move(out), {x}, [x](GraphT& g, Node& self) {
            g.accumulate(x, self.grad, T(1));
        });
    }

    // 1 - x, used for complementary attention masks.
    Id one_minus(Id x) {
        TensorT<T> out(value(x).shape);
        eig::MapA<T>(out.data.data(), n_of(out)) = T(1) - carr(x);
        return record("one_minus", std::move(out), {x}, [x](GraphT& g, Node& self) {
            g.accumulate(x, self.grad, T(-1));
        });
    }

    // x * s where s is a single-element node (learnable scalar gate).
    Id scalar_scale(Id x, Id s) {
        if (value(s).numel() != 1) throw DimensionError("scalar_scale: gate must have one element");
        const T sv = value(s).data[0];
        TensorT<T> out(value(x).shape);
        eig::MapA<T>(out.data.data(), n_of(out)) = carr(x) * sv;
        return record("scalar_scale", std::move(out), {x, s}, [x, s, sv](GraphT& g, Node& self) {
            if (g.needs(x)) g.accumulate(x, self.grad, sv);
            if (g.needs(s)) {
                const auto gs = eig::CMapA<T>(self.grad.data(), self.grad.size());
                g.grad(s)[0] += (gs * g.carr(x)).sum();
            }
        });
    }

    Id sigmoid(Id x) {
        TensorT<T> out(value(x).shape);
        eig::MapA<T>(out.data.data(), n_of(out)) = T(1) / (T(1) + (-carr(x)).exp());
        const Id y = record_value("sigmoid", std::move(out), {x});
        set_back(y, [x, y](GraphT& g, Node& self) {
            auto yv = eig::CMapA<T>(g.value(y).data.data(), g.value(y).numel());
            auto& gx = g.grad(x);
            eig::MapA<T>(gx.data(), gx.size()) +=
                eig::CMapA<T>(self.grad.data(), self.grad.size()) * yv * (T(1) - yv);
        });
        return y;
    }

    // tanh-approximation GELU, constant sqrt(2/pi) = 0.7978845608...
    Id gelu(Id x) {
        static constexpr double kC = 0.7978845608028654;
        static constexpr double kA = 0.044715;
        TensorT<T> out(value(x).shape);
        auto xv = carr(x);
        eig::MapA<T>(out.data.data(), n_of(out)) =
            T(0.5) * xv * (T(1) + (T(kC) * (xv + T(kA) * xv.cube())).tanh());
        return record("gelu", std::move(out), {x}, [x](GraphT& g, Node& self) {
            auto xv = g.carr(x);
            auto gs = eig::CMapA<T>(self.grad.data(), self.grad.size());
            auto t = (T(kC) * (xv + T(kA) * xv.cube())).tanh();
            auto dudx = T(kC) * (T(1) + T(3.0 * kA) * xv.square());
            auto& gx = g.grad(x);
            eig::MapA<T>(gx.data(), gx.size()) +=
                gs * (T(0.5) * (T(1) + t) + T(0.5) * xv * (T(1) - t.square()) * dudx);
        });
    }

    // PReLU with one learnable slope per channel (dim 0 of a CxHxW map).
    Id prelu(Id x, Id slope) {
        const auto& xv = value(x);
        const auto& sv = value(slope);
        if (xv.rank() != 3) throw DimensionError("prelu: expected CxHxW input");
        if (sv.numel() != xv.shape[0])
            throw DimensionError("prelu: slope length " + std::to_string(sv.numel()) +
                                 " != channels " + std::to_string(xv.shape[0]));
        const std::size_t c = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
        TensorT<T> out(xv.shape);
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T a = sv.data[ch];
            const T* src = xv.data.data() + ch * hw;
            T* dst = out.data.data() + ch * hw;
            for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] >= T(0) ? src[i] : a * src[i];
        }
        return record("prelu", std::move(out), {x, slope}, [x, slope, c, hw](GraphT& g, Node& self) {
            const auto& xv = g.value(x);
            const auto& sv = g.value(slope);
            const bool nx = g.needs(x), ns = g.needs(slope);
            T* gx = nx ? g.grad(x).data() : nullptr;
            T* ga = ns ? g.grad(slope).data() : nullptr;
            for (std::size_t ch = 0; ch < c; ++ch) {
                const T a = sv.data[ch];
                const T* src = xv.data.data() + ch * hw;
                const T* gs = self.grad.data() + ch * hw;
                T acc = T(0);
                for (std::size_t i = 0; i < hw; ++i) {
                    if (src[i] >= T(0)) {
                        if (nx) gx[ch * hw + i] += gs[i];
                    } else {
                        if (nx) gx[ch * hw + i] += a * gs[i];
                        acc += gs[i] * src[i];
                    }
                }
                if (ns) ga[ch] += acc;
            }
        });
    }

    // --- reductions / shape --------------------------------------------------

    Id sum(Id x) {
        TensorT<T> out({1});
        out.data[0] = carr(x).sum();
        return record("sum", std::move(out), {x}, [x](GraphT& g, Node& self) {
            g.accumulate_broadcast(x, self.grad[0]);
        });
    }

    // sum((a-b)^2): fused squared-error building block.
    Id sum_sq_diff(Id a, Id b) {
        require_same_shape(a, b, "sum_sq_diff");
        TensorT<T> out({1});
        out.data[0] = (carr(a) - carr(b)).square().sum();
        return record("sum_sq_diff", std::move(out), {a, b}, [a, b](GraphT& g, Node& self) {
            const T s = T(2) * self.grad[0];
            if (g.needs(a)) {
                auto& ga = g.grad(a);
                eig::MapA<T>(ga.data(), ga.size()) += s * (g.carr(a) - g.carr(b));
            }
            if (g.needs(b)) {
                auto& gb = g.grad(b);
                eig::MapA<T>(gb.data(), gb.size()) -= s * (g.carr(a) - g.carr(b));
            }
        });
    }

    Id reshape(Id x, std::vector<std::size_t> shape) {
        if (TensorT<T>::numel_of(shape) != value(x).numel())
            throw DimensionError("reshape: element count mismatch");
        TensorT<T> out(std::move(shape), value(x).data);
        return record("reshape", std::move(out), {x}, [x](GraphT& g, Node& self) {
            g.accumulate(x, self.grad, T(1));
        });
    }

    Id transpose2d(Id x) {
        const auto& xv = value(x);
        if (xv.rank() != 2) throw DimensionError("transpose2d: expected rank-2 tensor");
        const std::size_t m = xv.shape[0], n = xv.shape[1];
        TensorT<T> out({n, m});
        eig::MapM<T>(out.data.data(), n, m) = cmat(x, m, n).transpose();
        return record("transpose2d", std::move(out), {x}, [x, m, n](GraphT& g, Node& self) {
            auto& gx = g.grad(x);
            eig::MapM<T>(gx.data(), m, n) += eig::CMapM<T>(self.grad.data(), n, m).transpose();
        });
    }

    Id concat_channels(Id a, Id b) {
        const auto& av = value(a);
        const auto& bv = value(b);
        if (av.rank() != 3 || bv.rank() != 3 || av.shape[1] != bv.shape[1] || av.shape[2] != bv.shape[2])
            throw DimensionError("concat_channels: spatial shapes differ");
        TensorT<T> out({av.shape[0] + bv.shape[0], av.shape[1], av.shape[2]});
        std::copy(av.data.begin(), av.data.end(), out.data.begin());
        std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(av.numel()));
        const std::size_t na = av.numel();
        return record("concat_channels", std::move(out), {a, b}, [a, b, na](GraphT& g, Node& self) {
            if (g.needs(a)) {
                auto& ga = g.grad(a);
                for (std::size_t i = 0; i < na; ++i) ga[i] += self.grad[i];
            }
            if (g.needs(b)) {
                auto& gb = g.grad(b);
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[na + i];
            }
        });
    }

    // --- softmax ---------------------------------------------------------------

    // Max-subtracted softmax along `axis`.
    Id softmax(Id x, std::size_t axis) {
        const auto& xv = value(x);
        if (axis >= xv.rank()) throw DimensionError("softmax: axis out of range");
        const auto [outer, len, inner] = slice_dims(xv.shape, axis);
        TensorT<T> out(xv.shape);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < inner; ++i) {
                const T* src = xv.data.data() + o * len * inner + i;
                T* dst = out.data.data() + o * len * inner + i;
                T mx = src[0];
                for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, src[k * inner]);
                T denom = T(0);
                for (std::size_t k = 0; k < len; ++k) {
                    const T e = std::exp(src[k * inner] - mx);
                    dst[k * inner] = e;
                    denom += e;
                }
                const T inv = T(1) / denom;
                for (std::size_t k = 0; k < len; ++k) dst[k * inner] *= inv;
            }
        }
        const Id y = record_value("softmax", std::move(out), {x});
        set_back(y, [x, y, axis](GraphT& g, Node& self) {
            const auto& yv = g.value(y);
            const auto [outer, len, inner] = slice_dims(yv.shape, axis);
            auto& gx = g.grad(x);
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t base = o * len * inner + i;
                    T dot = T(0);
                    for (std::size_t k = 0; k < len; ++k)
                        dot += self.grad[base + k * inner] * yv.data[base + k * inner];
                    for (std::size_t k = 0; k < len; ++k) {
                        const std::size_t idx = base + k * inner;
                        gx[idx] += yv.data[idx] * (self.grad[idx] - dot);
                    }
                }
            }
        });
        return y;
    }

    // Contiguous fast path for the attention matrix (softmax over last axis of
    // a 2-D tensor) using vectorized exp.
    Id softmax_rows(Id x) {
        const auto& xv = value(x);
        if (xv.rank() != 2) throw DimensionError("softmax_rows: expected rank-2 tensor");
        const std::size_t m = xv.shape[0], n = xv.shape[1];
        TensorT<T> out(xv.shape);
        auto src = cmat(x, m, n);
        eig::MapM<T> dst(out.data.data(), m, n);
        for (std::size_t r = 0; r < m; ++r) {
            auto row = src.row(static_cast<Eigen::Index>(r)).array();
            const T mx = row.maxCoeff();
            dst.row(static_cast<Eigen::Index>(r)).array() = (row - mx).exp();
            dst.row(static_cast<Eigen::Index>(r)).array() /= dst.row(static_cast<Eigen::Index>(r)).sum();
        }
        const Id y = record_value("softmax_rows", std::move(out), {x});
        set_back(y, [x, y, m, n](GraphT& g, Node& self) {
            auto yv = g.cmat(y, m, n);
            eig::CMapM<T> gs(self.grad.data(), m, n);
            auto& gx = g.grad(x);
            eig::MapM<T> gxm(gx.data(), m, n);
            for (std::size_t r = 0; r < m; ++r) {
                const auto ri = static_cast<Eigen::Index>(r);
                const T dot = (gs.row(ri).array() * yv.row(ri).array()).sum();
                gxm.row(ri).array() += yv.row(ri).array() * (gs.row(ri).array() - dot);
            }
        });
        return y;
    }

    // --- linear algebra --------------------------------------------------------

    Id matmul(Id a, Id b) {
        const auto& av = value(a);
        const auto& bv = value(b);
        if (av.rank() != 2 || bv.rank() != 2)
            throw DimensionError("matmul: expected rank-2 operands");
        if (av.shape[1] != bv.shape[0])
            throw DimensionError("matmul: inner dimensions " + std::to_string(av.shape[1]) + " vs " +
                                 std::to_string(bv.shape[0]));
        const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
        TensorT<T> out({m, n});
        eig::MapM<T>(out.data.data(), m, n).noalias() = cmat(a, m, k) * cmat(b, k, n);
        return record("matmul", std::move(out), {a, b}, [a, b, m, k, n](GraphT& g, Node& self) {
            eig::CMapM<T> gs(self.grad.data(), m, n);
            if (g.needs(a)) {
                auto& ga = g.grad(a);
                eig::MapM<T>(ga.data(), m, k).noalias() += gs * g.cmat(b, k, n).transpose();
            }
            if (g.needs(b)) {
                auto& gb = g.grad(b);
                eig::MapM<T>(gb.data(), k, n).noalias() += g.cmat(a, m, k).transpose() * gs;
            }
        });
    }

    // y = W x + b for a flat vector x; W is [out x in].
    Id fully_connected(Id x, Id w, Id b) {
        const auto& xv = value(x);
        const auto& wv = value(w);
        if (wv.rank() != 2) throw DimensionError("fully_connected: W must be rank-2");
        const std::size_t in = wv.shape[1], out_n = wv.shape[0];
        if (xv.numel() != in)
            throw DimensionError("fully_connected: input length " + std::to_string(xv.numel()) +
                                 " != " + std::to_string(in));
        if (b != kNone && value(b).numel() != out_n)
            throw DimensionError("fully_connected: bias length mismatch");
        TensorT<T> out({out_n});
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> y(out.data.data(), static_cast<Eigen::Index>(out_n));
        y.noalias() = cmat(w, out_n, in) * Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(
                                               xv.data.data(), static_cast<Eigen::Index>(in));
        if (b != kNone)
            y += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(value(b).data.data(),
                                                                       static_cast<Eigen::Index>(out_n));
        std::vector<Id> parents = {x, w};
        if (b != kNone) parents.push_back(b);
        return record("fully_connected", std::move(out), std::move(parents),
                      [x, w, b, in, out_n](GraphT& g, Node& self) {
                          Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> gs(
                              self.grad.data(), static_cast<Eigen::Index>(out_n));
                          if (g.needs(x)) {
                              auto& gx = g.grad(x);
                              Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(
                                  gx.data(), static_cast<Eigen::Index>(in))
                                  .noalias() += g.cmat(w, out_n, in).transpose() * gs;
                          }
                          if (g.needs(w)) {
                              auto& gw = g.grad(w);
                              eig::MapM<T>(gw.data(), out_n, in).noalias() +=
                                  gs * Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(
                                           g.value(x).data.data(), static_cast<Eigen::Index>(in))
                                           .transpose();
                          }
                          if (b != kNone && g.needs(b)) {
                              auto& gb = g.grad(b);
                              for (std::size_t i = 0; i < out_n; ++i) gb[i] += self.grad[i];
                          }
                      });
    }

    // --- convolution -----------------------------------------------------------

    // Cross-correlation (no kernel flip), stride 1, zero padding (p1, p2).
    // x: Cin x H x W, w: Cout x Cin x k1 x k2, optional bias: Cout.
    Id conv2d(Id x, Id w, Id b, std::size_t p1, std::size_t p2) {
        const auto& xv = value(x);
        const auto& wv = value(w);
        if (xv.rank() != 3 || wv.rank() != 4) throw DimensionError("conv2d: expected CxHxW and OxCxK1xK2");
        if (xv.shape[0] != wv.shape[1])
            throw DimensionError("conv2d: input channels " + std::to_string(xv.shape[0]) +
                                 " != kernel channels " + std::to_string(wv.shape[1]));
        const std::size_t cin = xv.shape[0], h = xv.shape[1], wdt = xv.shape[2];
        const std::size_t cout = wv.shape[0], k1 = wv.shape[2], k2 = wv.shape[3];
        if (h + 2 * p1 < k1 || wdt + 2 * p2 < k2) throw DimensionError("conv2d: kernel larger than padded input");
        const std::size_t ho = h + 2 * p1 - k1 + 1, wo = wdt + 2 * p2 - k2 + 1;
        if (b != kNone && value(b).numel() != cout) throw DimensionError("conv2d: bias length mismatch");

        const std::size_t kk = cin * k1 * k2, s = ho * wo;
        AVec<T> col(kk * s);
        im2col(xv, k1, k2, p1, p2, ho, wo, col.data());

        TensorT<T> out({cout, ho, wo});
        eig::MapM<T>(out.data.data(), cout, s).noalias() =
            cmat(w, cout, kk) * eig::CMapM<T>(col.data(), kk, s);
        if (b != kNone) {
            const auto& bv = value(b);
            for (std::size_t c = 0; c < cout; ++c) {
                T* dst = out.data.data() + c * s;
                const T add = bv.data[c];
                for (std::size_t i = 0; i < s; ++i) dst[i] += add;
            }
        }
        std::vector<Id> parents = {x, w};
        if (b != kNone) parents.push_back(b);
        return record("conv2d", std::move(out), std::move(parents),
                      [x, w, b, k1, k2, p1, p2, cin, cout, ho, wo](GraphT& g, Node& self) {
                          const std::size_t kk = cin * k1 * k2, s = ho * wo;
                          eig::CMapM<T> gs(self.grad.data(), cout, s);
                          if (g.needs(w)) {
                              // dW = gY . col^T (col recomputed; forward does not retain it)
                              AVec<T> col(kk * s);
                              g.im2col(g.value(x), k1, k2, p1, p2, ho, wo, col.data());
                              auto& gw = g.grad(w);
                              eig::MapM<T>(gw.data(), cout, kk).noalias() +=
                                  gs * eig::CMapM<T>(col.data(), kk, s).transpose();
                          }
                          if (g.needs(x)) {
                              AVec<T> dcol(kk * s);
                              eig::MapM<T>(dcol.data(), kk, s).noalias() =
                                  g.cmat(w, cout, kk).transpose() * gs;
                              g.col2im(dcol.data(), k1, k2, p1, p2, ho, wo, g.value(x).shape, g.grad(x));
                          }
                          if (b != kNone && g.needs(b)) {
                              auto& gb = g.grad(b);
                              for (std::size_t c = 0; c < cout; ++c) {
                                  T acc = T(0);
                                  const T* src = self.grad.data() + c * s;
                                  for (std::size_t i = 0; i < s; ++i) acc += src[i];
                                  gb[c] += acc;
                              }
                          }
                      });
    }

    // "Same" spatial resolution; odd kernels only.
    Id conv2d_same(Id x, Id w, Id b) {
        const auto& wv = value(w);
        if (wv.rank() != 4) throw DimensionError("conv2d_same: kernel must be OxCxK1xK2");
        const std::size_t k1 = wv.shape[2], k2 = wv.shape[3];
        if (k1 % 2 == 0 || k2 % 2 == 0)
            throw ConfigError("conv2d_same: even kernel " + std::to_string(k1) + "x" + std::to_string(k2) +
                              " cannot preserve resolution");
        return conv2d(x, w, b, (k1 - 1) / 2, (k2 - 1) / 2);
    }

    // Depthwise convolution: one kxk kernel per channel. w: C x k x k.
    Id depthwise_conv2d_same(Id x, Id w, Id b) {
        const auto& xv = value(x);
        const auto& wv = value(w);
        if (xv.rank() != 3 || wv.rank() != 3) throw DimensionError("depthwise: expected CxHxW and CxKxK");
        if (xv.shape[0] != wv.shape[0]) throw DimensionError("depthwise: channel mismatch");
        const std::size_t c = xv.shape[0], h = xv.shape[1], wdt = xv.shape[2];
        const std::size_t k1 = wv.shape[1], k2 = wv.shape[2];
        if (k1 % 2 == 0 || k2 % 2 == 0) throw ConfigError("depthwise: even kernel in same mode");
        const std::size_t p1 = (k1 - 1) / 2, p2 = (k2 - 1) / 2;
        if (b != kNone && value(b).numel() != c) throw DimensionError("depthwise: bias length mismatch");
        TensorT<T> out({c, h, wdt});
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T* src = xv.data.data() + ch * h * wdt;
            const T* ker = wv.data.data() + ch * k1 * k2;
            T* dst = out.data.data() + ch * h * wdt;
            const T add = b != kNone ? value(b).data[ch] : T(0);
            for (std::size_t i = 0; i < h; ++i) {
                for (std::size_t j = 0; j < wdt; ++j) {
                    T acc = add;
                    for (std::size_t ki = 0; ki < k1; ++ki) {
                        const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + ki) - static_cast<std::ptrdiff_t>(p1);
                        if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t kj = 0; kj < k2; ++kj) {
                            const std::ptrdiff_t jj =
                                static_cast<std::ptrdiff_t>(j + kj) - static_cast<std::ptrdiff_t>(p2);
                            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(wdt)) continue;
                            acc += ker[ki * k2 + kj] * src[ii * static_cast<std::ptrdiff_t>(wdt) + jj];
                        }
                    }
                    dst[i * wdt + j] = acc;
                }
            }
        }
        std::vector<Id> parents = {x, w};
        if (b != kNone) parents.push_back(b);
        return record("depthwise_conv2d", std::move(out), std::move(parents),
                      [x, w, b, c, h, wdt, k1, k2, p1, p2](GraphT& g, Node& self) {
                          const auto& xv = g.value(x);
                          const auto& wv = g.value(w);
                          const bool nx = g.needs(x), nw = g.needs(w);
                          T* gx = nx ? g.grad(x).data() : nullptr;
                          T* gw = nw ? g.grad(w).data() : nullptr;
                          for (std::size_t ch = 0; ch < c; ++ch) {
                              const T* src = xv.data.data() + ch * h * wdt;
                              const T* ker = wv.data.data() + ch * k1 * k2;
                              const T* gs = self.grad.data() + ch * h * wdt;
                              T bacc = T(0);
                              for (std::size_t i = 0; i < h; ++i) {
                                  for (std::size_t j = 0; j < wdt; ++j) {
                                      const T go = gs[i * wdt + j];
                                      bacc += go;
                                      for (std::size_t ki = 0; ki < k1; ++ki) {
                                          const std::ptrdiff_t ii =
                                              static_cast<std::ptrdiff_t>(i + ki) - static_cast<std::ptrdiff_t>(p1);
                                          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                                          for (std::size_t kj = 0; kj < k2; ++kj) {
                                              const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j + kj) -
                                                                        static_cast<std::ptrdiff_t>(p2);
                                              if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(wdt)) continue;
                                              const std::size_t si =
                                                  static_cast<std::size_t>(ii) * wdt + static_cast<std::size_t>(jj);
                                              if (nx) gx[ch * h * wdt + si] += ker[ki * k2 + kj] * go;
                                              if (nw) gw[ch * k1 * k2 + ki * k2 + kj] += src[si] * go;
                                          }
                                      }
                                  }
                              }
                              if (b != kNone && g.needs(b)) g.grad(b)[ch] += bacc;
                          }
                      });
    }

    // --- pooling / broadcasting -------------------------------------------------

    // CxHxW -> Cx1x1 per-channel mean.
    Id global_avg_pool(Id x) {
        const auto& xv = value(x);
        if (xv.rank() != 3) throw DimensionError("global_avg_pool: expected CxHxW");
        const std::size_t c = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
        TensorT<T> out({c, 1, 1});
        for (std::size_t ch = 0; ch < c; ++ch) {
            out.data[ch] =
                eig::CMapA<T>(xv.data.data() + ch * hw, static_cast<Eigen::Index>(hw)).sum() / T(hw);
        }
        return record("global_avg_pool", std::move(out), {x}, [x, c, hw](GraphT& g, Node& self) {
            auto& gx = g.grad(x);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const T v = self.grad[ch] / T(hw);
                T* dst = gx.data() + ch * hw;
                for (std::size_t i = 0; i < hw; ++i) dst[i] += v;
            }
        });
    }

    // x[C,H,W] * m[C] (or Cx1x1), broadcast over space.
    Id scale_channels(Id x, Id m) {
        const auto& xv = value(x);
        const auto& mv = value(m);
        if (xv.rank() != 3 || mv.numel() != xv.shape[0])
            throw DimensionError("scale_channels: mask must have one value per channel");
        const std::size_t c = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
        TensorT<T> out(xv.shape);
        for (std::size_t ch = 0; ch < c; ++ch) {
            eig::MapA<T>(out.data.data() + ch * hw, static_cast<Eigen::Index>(hw)) =
                eig::CMapA<T>(xv.data.data() + ch * hw, static_cast<Eigen::Index>(hw)) * mv.data[ch];
        }
        return record("scale_channels", std::move(out), {x, m}, [x, m, c, hw](GraphT& g, Node& self) {
            const auto& xv = g.value(x);
            const auto& mv = g.value(m);
            if (g.needs(x)) {
                auto& gx = g.grad(x);
                for (std::size_t ch = 0; ch < c; ++ch)
                    eig::MapA<T>(gx.data() + ch * hw, static_cast<Eigen::Index>(hw)) +=
                        eig::CMapA<T>(self.grad.data() + ch * hw, static_cast<Eigen::Index>(hw)) * mv.data[ch];
            }
            if (g.needs(m)) {
                auto& gm = g.grad(m);
                for (std::size_t ch = 0; ch < c; ++ch)
                    gm[ch] += (eig::CMapA<T>(self.grad.data() + ch * hw, static_cast<Eigen::Index>(hw)) *
                               eig::CMapA<T>(xv.data.data() + ch * hw, static_cast<Eigen::Index>(hw)))
                                  .sum();
            }
        });
    }

    // x[C,H,W] * m[1,H,W] (or HxW), broadcast over channels.
    Id scale_spatial(Id x, Id m) {
        const auto& xv = value(x);
        const auto& mv = value(m);
        if (xv.rank() != 3 || mv.numel() != xv.shape[1] * xv.shape[2])
            throw DimensionError("scale_spatial: mask must have one value per pixel");
        const std::size_t c = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
        TensorT<T> out(xv.shape);
        for (std::size_t ch = 0; ch < c; ++ch) {
            eig::MapA<T>(out.data.data() + ch * hw, static_cast<Eigen::Index>(hw)) =
                eig::CMapA<T>(xv.data.data() + ch * hw, static_cast<Eigen::Index>(hw)) *
                eig::CMapA<T>(mv.data.data(), static_cast<Eigen::Index>(hw));
        }
        return record("scale_spatial", std::move(out), {x, m}, [x, m, c, hw](GraphT& g, Node& self) {
            const auto& xv = g.value(x);
            const auto& mv = g.value(m);
            if (g.needs(x)) {
                auto& gx = g.grad(x);
                for (std::size_t ch = 0; ch < c; ++ch)
                    eig::MapA<T>(gx.data() + ch * hw, static_cast<Eigen::Index>(hw)) +=
                        eig::CMapA<T>(self.grad.data() + ch * hw, static_cast<Eigen::Index>(hw)) *
                        eig::CMapA<T>(mv.data.data(), static_cast<Eigen::Index>(hw));
            }
            if (g.needs(m)) {
                auto& gm = g.grad(m);
                for (std::size_t ch = 0; ch < c; ++ch)
                    eig::MapA<T>(gm.data(), static_cast<Eigen::Index>(hw)) +=
                        eig::CMapA<T>(self.grad.data() + ch * hw, static_cast<Eigen::Index>(hw)) *
                        eig::CMapA<T>(xv.data.data() + ch * hw, static_cast<Eigen::Index>(hw));
            }
        });
    }

    // --- batch normalization ------------------------------------------------------

    // Train mode: statistics over (H,W) of this sample (batch=1 semantics;
    // the training loop aggregates per-sample stats into the running buffers).
    // The computed (mean, var) pair is written to *stats_out when given.
    Id batchnorm_train(Id x, Id gamma, Id beta, T eps,
                       std::vector<T>* mean_out = nullptr, std::vector<T>* var_out = nullptr) {
        const auto& xv = value(x);
        if (xv.rank() != 3) throw DimensionError("batchnorm: expected CxHxW");
        const std::size_t c = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
        if (value(gamma).numel() != c || value(beta).numel() != c)
            throw DimensionError("batchnorm: gamma/beta must have one value per channel");
        std::vector<T> mean(c), inv_std(c), var(c);
        TensorT<T> out(xv.shape);
        for (std::size_t ch = 0; ch < c; ++ch) {
            auto src = eig::CMapA<T>(xv.data.data() + ch * hw, static_cast<Eigen::Index>(hw));
            const T mu = src.sum() / T(hw);
            const T v = (src - mu).square().sum() / T(hw);
            mean[ch] = mu;
            var[ch] = v;
            inv_std[ch] = T(1) / std::sqrt(v + eps);
            eig::MapA<T>(out.data.data() + ch * hw, static_cast<Eigen::Index>(hw)) =
                (src - mu) * inv_std[ch] * value(gamma).data[ch] + value(beta).data[ch];
        }
        if (mean_out) *mean_out = mean;
        if (var_out) *var_out = var;
        return record("batchnorm_train", std::move(out), {x, gamma, beta},
                      [x, gamma, beta, c, hw, mean, inv_std](GraphT& g, Node& self) {
                          const auto& xv = g.value(x);
                          for (std::size_t ch = 0; ch < c; ++ch) {
                              auto src = eig::CMapA<T>(xv.data.data() + ch * hw, static_cast<Eigen::Index>(hw));
                              auto gs = eig::CMapA<T>(self.grad.data() + ch * hw, static_cast<Eigen::Index>(hw));
                              // xhat is recomputed from the saved statistics
                              auto xhat = (src - mean[ch]) * inv_std[ch];
                              const T sum_g = gs.sum();
                              const T sum_gx = (gs * xhat).sum();
                              if (g.needs(beta)) g.grad(beta)[ch] += sum_g;
                              if (g.needs(gamma)) g.grad(gamma)[ch] += sum_gx;
                              if (g.needs(x)) {
                                  const T k = g.value(gamma).data[ch] * inv_std[ch];
                                  eig::MapA<T>(g.grad(x).data() + ch * hw, static_cast<Eigen::Index>(hw)) +=
                                      k * (gs - sum_g / T(hw) - xhat * (sum_gx / T(hw)));
                              }
                          }
                      });
    }

    // Eval mode: running statistics only; an affine map per channel.
    Id batchnorm_eval(Id x, Id gamma, Id beta, const AVec<T>& running_mean,
                      const AVec<T>& running_var, T eps) {
        const auto& xv = value(x);
        if (xv.rank() != 3) throw DimensionError("batchnorm: expected CxHxW");
        const std::size_t c = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
        if (running_mean.size() != c || running_var.size() != c)
            throw DimensionError("batchnorm: running stats length mismatch");
        std::vector<T> inv_std(c);
        for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = T(1) / std::sqrt(running_var[ch] + eps);
        TensorT<T> out(xv.shape);
        for (std::size_t ch = 0; ch < c; ++ch) {
            auto src = eig::CMapA<T>(xv.data.data() + ch * hw, static_cast<Eigen::Index>(hw));
            eig::MapA<T>(out.data.data() + ch * hw, static_cast<Eigen::Index>(hw)) =
                (src - running_mean[ch]) * inv_std[ch] * value(gamma).data[ch] + value(beta).data[ch];
        }
        AVec<T> rm = running_mean;
        return record("batchnorm_eval", std::move(out), {x, gamma, beta},
                      [x, gamma, beta, c, hw, inv_std, rm](GraphT& g, Node& self) {
                          const auto& xv = g.value(x);
                          for (std::size_t ch = 0; ch < c; ++ch) {
                              auto src = eig::CMapA<T>(xv.data.data() + ch * hw, static_cast<Eigen::Index>(hw));
                              auto gs = eig::CMapA<T>(self.grad.data() + ch * hw, static_cast<Eigen::Index>(hw));
                              if (g.needs(beta)) g.grad(beta)[ch] += gs.sum();
                              if (g.needs(gamma))
                                  g.grad(gamma)[ch] += (gs * (src - rm[ch]) * inv_std[ch]).sum();
                              if (g.needs(x)) {
                                  const T k = g.value(gamma).data[ch] * inv_std[ch];
                                  eig::MapA<T>(g.grad(x).data() + ch * hw, static_cast<Eigen::Index>(hw)) +=
                                      k * gs;
                              }
                          }
                      });
    }

    // --- backward ----------------------------------------------------------------

    // Reverse accumulation from a scalar loss. Each node is visited exactly
    // once; leaves flush into their sinks. Gradients of leaves the loss does
    // not depend on are left as zeros in their sinks.
    void backward(Id loss, T seed = T(1)) {
        if (value(loss).numel() != 1)
            throw UsageError("backward: loss must be scalar, got shape " + value(loss).shape_str());
        grad(loss)[0] += seed;
        for (Id i = loss; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.grad.empty()) continue;
            if (n.back) n.back(*this, n);
            if (n.sink) {
                if (n.sink->size() != n.grad.size()) n.sink->assign(n.grad.size(), T(0));
                for (std::size_t j = 0; j < n.grad.size(); ++j) (*n.sink)[j] += n.grad[j];
            }
        }
    }

    bool needs(Id id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    // Helpers shared with backward closures.
    void accumulate(Id id, const AVec<T>& g, T k) {
        if (!needs(id)) return;
        auto& dst = grad(id);
        if (k == T(1)) {
            eig::MapA<T>(dst.data(), dst.size()) += eig::CMapA<T>(g.data(), g.size());
        } else {
            eig::MapA<T>(dst.data(), dst.size()) += k * eig::CMapA<T>(g.data(), g.size());
        }
    }
    void accumulate_broadcast(Id id, T v) {
        if (!needs(id)) return;
        auto& dst = grad(id);
        eig::MapA<T>(dst.data(), dst.size()) += v;
    }

    eig::CMapA<T> carr(Id id) const {
        const auto& t = value(id);
        return eig::CMapA<T>(t.data.data(), static_cast<Eigen::Index>(t.numel()));
    }
    eig::CMapM<T> cmat(Id id, std::size_t r, std::size_t c) const {
        return eig::CMapM<T>(value(id).data.data(), static_cast<Eigen::Index>(r),
                             static_cast<Eigen::Index>(c));
    }

  private:
    std::vector<Node> nodes_;

    Id last() const { return static_cast<Id>(nodes_.size() - 1); }
    static Eigen::Index n_of(const TensorT<T>& t) { return static_cast<Eigen::Index>(t.numel()); }

    void require_same_shape(Id a, Id b, const char* op) const {
        if (!value(a).same_shape(value(b)))
            throw DimensionError(std::string(op) + ": shapes " + value(a).shape_str() + " vs " +
                                 value(b).shape_str());
    }

    static std::array<std::size_t, 3> slice_dims(const std::vector<std::size_t>& shape, std::size_t axis) {
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
        for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
        return {outer, shape[axis], inner};
    }

    void im2col(const TensorT<T>& x, std::size_t k1, std::size_t k2, std::size_t p1, std::size_t p2,
                std::size_t ho, std::size_t wo, T* col) const {
        const std::size_t cin = x.shape[0], h = x.shape[1], w = x.shape[2];
        std::size_t r = 0;
        for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t ki = 0; ki < k1; ++ki) {
                for (std::size_t kj = 0; kj < k2; ++kj, ++r) {
                    T* dst = col + r * ho * wo;
                    for (std::size_t i = 0; i < ho; ++i) {
                        const std::ptrdiff_t ii =
                            static_cast<std::ptrdiff_t>(i + ki) - static_cast<std::ptrdiff_t>(p1);
                        if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) {
                            std::fill(dst + i * wo, dst + (i + 1) * wo, T(0));
                            continue;
                        }
                        const T* src = x.data.data() + (c * h + static_cast<std::size_t>(ii)) * w;
                        for (std::size_t j = 0; j < wo; ++j) {
                            const std::ptrdiff_t jj =
                                static_cast<std::ptrdiff_t>(j + kj) - static_cast<std::ptrdiff_t>(p2);
                            dst[i * wo + j] =
                                (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) ? T(0) : src[jj];
                        }
                    }
                }
            }
        }
    }

    void col2im(const T* dcol, std::size_t k1, std::size_t k2, std::size_t p1, std::size_t p2,
                std::size_t ho, std::size_t wo, const std::vector<std::size_t>& xshape,
                AVec<T>& gx) const {
        const std::size_t h = xshape[1], w = xshape[2];
        std::size_t r = 0;
        for (std::size_t c = 0; c < xshape[0]; ++c) {
            for (std::size_t ki = 0; ki < k1; ++ki) {
                for (std::size_t kj = 0; kj < k2; ++kj, ++r) {
                    const T* src = dcol + r * ho * wo;
                    for (std::size_t i = 0; i < ho; ++i) {
                        const std::ptrdiff_t ii =
                            static_cast<std::ptrdiff_t>(i + ki) - static_cast<std::ptrdiff_t>(p1);
                        if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                        T* dst = gx.data() + (c * h + static_cast<std::size_t>(ii)) * w;
                        for (std::size_t j = 0; j < wo; ++j) {
                            const std::ptrdiff_t jj =
                                static_cast<std::ptrdiff_t>(j + kj) - static_cast<std::ptrdiff_t>(p2);
                            if (jj >= 0 && jj < static_cast<std::ptrdiff_t>(w)) dst[jj] += src[i * wo + j];
                        }
                    }
                }
            }
        }
    }

    Id record_value(const char* op, TensorT<T> out, std::initializer_list<Id> parents) {
        Node n;
        n.owned = std::move(out);
        n.op = op;
        n.parents.assign(parents.begin(), parents.end());
        for (Id p : parents)
            if (p != kNone && needs(p)) n.needs_grad = true;
        n.needs_grad = n.needs_grad && recording;
        nodes_.push_back(std::move(n));
        if (check_finite && !value(last()).all_finite())
            throw NumericError(std::string("non-finite value produced by op '") + op + "' (node " +
                               std::to_string(last()) + ")");
        return last();
    }

    void set_back(Id id, std::function<void(GraphT&, Node&)> fn) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.needs_grad) n.back = std::move(fn);
    }

    template <typename Fn>
    Id record(const char* op, TensorT<T> out, std::vector<Id> parents, Fn&& back) {
        Node n;
        n.owned = std::move(out);
        n.op = op;
        n.parents = parents;
        for (Id p : parents)
            if (p != kNone && needs(p)) n.needs_grad = true;
        n.needs_grad = n.needs_grad && recording;
        if (n.needs_grad) n.back = std::forward<Fn>(back);
        nodes_.push_back(std::move(n));
        if (check_finite && !value(last()).all_finite())
            throw NumericError(std::string("non-finite value produced by op '") + op + "' (node " +
                               std::to_string(last()) + ")");
        return last();
    }

    template <typename Fn>
    Id record(const char* op, TensorT<T> out, std::initializer_list<Id> parents, Fn&& back) {
        return record(op, std::move(out), std::vector<Id>(parents), std::forward<Fn>(back));
    }
};

using Graph = GraphT<real_t>;

}  // namespace aianet
