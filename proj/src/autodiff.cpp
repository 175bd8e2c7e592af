#include "mapseg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include <Eigen/Dense>

namespace mapseg::ad {
namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using StridedMap = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

template <typename T>
Var<T> make_op(Tensor<T> value, const std::vector<Var<T>>& inputs,
               std::function<void(Node<T>&)> fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const auto& in : inputs) node->parents.push_back(in.node());
        node->backward_fn = std::move(fn);
    }
    return Var<T>(std::move(node));
}

/// Parent gradient buffer or nullptr when that input does not need one.
template <typename T>
Tensor<T>* parent_grad(Node<T>& self, std::size_t i) {
    auto& p = self.parents[i];
    if (!p || !p->requires_grad) return nullptr;
    return &p->grad_buffer();
}

template <typename T>
const Tensor<T>& parent_value(Node<T>& self, std::size_t i) {
    return self.parents[i]->value;
}

void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) {
        const T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

template <typename T>
Var<T> constant(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return Var<T>(std::move(node));
}

template <typename T>
Var<T> parameter(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var<T>(std::move(node));
}

template <typename T>
void backward(const Var<T>& root) {
    if (!root.requires_grad()) return;
    require(root.value().size() == 1, "backward root must be a scalar, got " +
                                          shape_str(root.shape()));
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent && parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (!node->backward_fn || node->grad.empty()) continue;
        node->backward_fn(*node);
        node->grad = Tensor<T>();  // interior gradients are not kept
    }
}

// ---- elementwise ----------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require(a.shape() == b.shape(),
            "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (auto* g = parent_grad(self, p)) {
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require(a.shape() == b.shape(),
            "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        }
        if (auto* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require(a.shape() == b.shape(),
            "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
        const auto& av = parent_value(self, 0);
        const auto& bv = parent_value(self, 1);
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
        }
        if (auto* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v *= s;
    return make_op<T>(std::move(out), {a}, [s](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
        }
    });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v = v * sigmoid_scalar(v);
    return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
        const auto& x = parent_value(self, 0);
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                const T s = sigmoid_scalar(x[i]);
                (*g)[i] += self.grad[i] * s * (T(1) + x[i] * (T(1) - s));
            }
        }
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v = sigmoid_scalar(v);
    return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                const T s = self.value[i];
                (*g)[i] += self.grad[i] * s * (T(1) - s);
            }
        }
    });
}

// ---- shape ----------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    require(shape_numel(shape) == a.value().size(),
            "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    Tensor<T> out(std::move(shape), a.value().storage());
    return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    require(a.value().ndim() == 2, "transpose expects a 2-d input, got " + shape_str(a.shape()));
    const int m = a.dim(0);
    const int n = a.dim(1);
    Tensor<T> out({n, m});
    MapR<T>(out.data(), n, m) = CMapR<T>(a.value().data(), m, n).transpose();
    return make_op<T>(std::move(out), {a}, [m, n](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            MapR<T>(g->data(), m, n) += CMapR<T>(self.grad.data(), n, m).transpose();
        }
    });
}

template <typename T>
Var<T> concat0(const std::vector<Var<T>>& parts) {
    require(!parts.empty(), "concat0 needs at least one input");
    Shape shape = parts.front().shape();
    require(!shape.empty(), "concat0 needs inputs with at least one axis");
    int total = 0;
    for (const auto& p : parts) {
        Shape tail_a(p.shape().begin() + 1, p.shape().end());
        Shape tail_b(shape.begin() + 1, shape.end());
        require(p.value().ndim() == static_cast<int>(shape.size()) && tail_a == tail_b,
                "concat0: incompatible shapes " + shape_str(p.shape()) + " and " +
                    shape_str(shape));
        total += p.dim(0);
    }
    shape[0] = total;
    Tensor<T> out(shape);
    std::size_t offset = 0;
    std::vector<std::size_t> sizes;
    for (const auto& p : parts) {
        std::copy(p.value().values().begin(), p.value().values().end(), out.data() + offset);
        offset += p.value().size();
        sizes.push_back(p.value().size());
    }
    return make_op<T>(std::move(out), parts, [sizes](Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < sizes.size(); ++p) {
            if (auto* g = parent_grad(self, p)) {
                for (std::size_t i = 0; i < sizes[p]; ++i) (*g)[i] += self.grad[off + i];
            }
            off += sizes[p];
        }
    });
}

template <typename T>
Var<T> slice0(const Var<T>& a, int begin, int count) {
    require(a.value().ndim() >= 1 && begin >= 0 && count > 0 && begin + count <= a.dim(0),
            "slice0: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                ") outside " + shape_str(a.shape()));
    Shape shape = a.shape();
    const std::size_t inner = a.value().size() / static_cast<std::size_t>(shape[0]);
    shape[0] = count;
    const std::size_t off = inner * static_cast<std::size_t>(begin);
    std::vector<T> data(a.value().data() + off, a.value().data() + off + inner * count);
    Tensor<T> out(std::move(shape), std::move(data));
    return make_op<T>(std::move(out), {a}, [off](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[off + i] += self.grad[i];
        }
    });
}

// ---- reductions -----------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a) {
    T s = T(0);
    for (T v : a.value().values()) s += v;
    return make_op<T>(Tensor<T>({1}, {s}), {a}, [](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (auto& v : g->values()) v += self.grad[0];
        }
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> weighted_sum(const Var<T>& a, const Tensor<T>& weights) {
    require(weights.size() == a.value().size(), "weighted_sum: weight count mismatch");
    T s = T(0);
    for (std::size_t i = 0; i < weights.size(); ++i) s += a.value()[i] * weights[i];
    return make_op<T>(Tensor<T>({1}, {s}), {a}, [weights](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[0] * weights[i];
        }
    });
}

// ---- linear algebra -------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    require(a.value().ndim() == 2 && b.value().ndim() == 2 && a.dim(1) == b.dim(0),
            "matmul: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.dim(0);
    const int k = a.dim(1);
    const int n = b.dim(1);
    Tensor<T> out({m, n});
    MapR<T>(out.data(), m, n).noalias() =
        CMapR<T>(a.value().data(), m, k) * CMapR<T>(b.value().data(), k, n);
    return make_op<T>(std::move(out), {a, b}, [m, k, n](Node<T>& self) {
        CMapR<T> dc(self.grad.data(), m, n);
        if (auto* g = parent_grad(self, 0)) {
            MapR<T>(g->data(), m, k).noalias() +=
                dc * CMapR<T>(parent_value(self, 1).data(), k, n).transpose();
        }
        if (auto* g = parent_grad(self, 1)) {
            MapR<T>(g->data(), k, n).noalias() +=
                CMapR<T>(parent_value(self, 0).data(), m, k).transpose() * dc;
        }
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    require(x.value().ndim() == 2 && weight.value().ndim() == 2 && x.dim(1) == weight.dim(1),
            "linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                shape_str(weight.shape()));
    const int rows = x.dim(0);
    const int in = x.dim(1);
    const int outc = weight.dim(0);
    if (bias.defined()) {
        require(bias.value().size() == static_cast<std::size_t>(outc), "linear: bias size mismatch");
    }
    Tensor<T> out({rows, outc});
    MapR<T> y(out.data(), rows, outc);
    y.noalias() = CMapR<T>(x.value().data(), rows, in) *
                  CMapR<T>(weight.value().data(), outc, in).transpose();
    if (bias.defined()) {
        y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
            bias.value().data(), outc);
    }
    return make_op<T>(std::move(out), {x, weight, bias}, [rows, in, outc](Node<T>& self) {
        CMapR<T> dy(self.grad.data(), rows, outc);
        if (auto* g = parent_grad(self, 0)) {
            MapR<T>(g->data(), rows, in).noalias() +=
                dy * CMapR<T>(parent_value(self, 1).data(), outc, in);
        }
        if (auto* g = parent_grad(self, 1)) {
            MapR<T>(g->data(), outc, in).noalias() +=
                dy.transpose() * CMapR<T>(parent_value(self, 0).data(), rows, in);
        }
        if (self.parents[2]) {
            if (auto* g = parent_grad(self, 2)) {
                Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(g->data(), outc) +=
                    dy.colwise().sum();
            }
        }
    });
}

// ---- image ops ------------------------------------------------------------

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, Conv2dParams p) {
    require(x.value().ndim() == 3, "conv2d expects [C, H, W], got " + shape_str(x.shape()));
    require(weight.value().ndim() == 4 && weight.dim(1) == x.dim(0) &&
                weight.dim(2) == weight.dim(3),
            "conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                shape_str(x.shape()));
    const int c_in = x.dim(0);
    const int h = x.dim(1);
    const int w = x.dim(2);
    const int c_out = weight.dim(0);
    const int k = weight.dim(2);
    const int ho = (h + 2 * p.padding - p.dilation * (k - 1) - 1) / p.stride + 1;
    const int wo = (w + 2 * p.padding - p.dilation * (k - 1) - 1) / p.stride + 1;
    require(ho > 0 && wo > 0, "conv2d: empty output for input " + shape_str(x.shape()));
    const int patch = c_in * k * k;
    const int npos = ho * wo;
    const bool pointwise = k == 1 && p.stride == 1 && p.padding == 0;

    AlignedVector<T> col;
    if (!pointwise) {
        col.assign(static_cast<std::size_t>(patch) * npos, T(0));
        const T* xs = x.value().data();
        for (int c = 0; c < c_in; ++c) {
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    T* row = col.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * npos;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * p.stride - p.padding + ky * p.dilation;
                        if (iy < 0 || iy >= h) continue;
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * p.stride - p.padding + kx * p.dilation;
                            if (ix < 0 || ix >= w) continue;
                            row[oy * wo + ox] = xs[(static_cast<std::size_t>(c) * h + iy) * w + ix];
                        }
                    }
                }
            }
        }
    }
    const T* col_ptr = pointwise ? x.value().data() : col.data();
    Tensor<T> out({c_out, ho, wo});
    MapR<T> y(out.data(), c_out, npos);
    y.noalias() = CMapR<T>(weight.value().data(), c_out, patch) * CMapR<T>(col_ptr, patch, npos);
    if (bias.defined()) {
        y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(
            bias.value().data(), c_out);
    }
    return make_op<T>(
        std::move(out), {x, weight, bias},
        [col = std::move(col), pointwise, c_in, h, w, c_out, k, ho, wo, patch, npos,
         p](Node<T>& self) {
            CMapR<T> dy(self.grad.data(), c_out, npos);
            const T* cp = pointwise ? parent_value(self, 0).data() : col.data();
            if (auto* g = parent_grad(self, 1)) {
                MapR<T>(g->data(), c_out, patch).noalias() +=
                    dy * CMapR<T>(cp, patch, npos).transpose();
            }
            if (self.parents[2]) {
                if (auto* g = parent_grad(self, 2)) {
                    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(g->data(), c_out) +=
                        dy.rowwise().sum();
                }
            }
            if (auto* g = parent_grad(self, 0)) {
                const auto& wv = parent_value(self, 1);
                if (pointwise) {
                    MapR<T>(g->data(), patch, npos).noalias() +=
                        CMapR<T>(wv.data(), c_out, patch).transpose() * dy;
                    return;
                }
                MatR<T> dcol = CMapR<T>(wv.data(), c_out, patch).transpose() * dy;
                T* gx = g->data();
                for (int c = 0; c < c_in; ++c) {
                    for (int ky = 0; ky < k; ++ky) {
                        for (int kx = 0; kx < k; ++kx) {
                            const T* row = dcol.data() +
                                           static_cast<std::size_t>((c * k + ky) * k + kx) * npos;
                            for (int oy = 0; oy < ho; ++oy) {
                                const int iy = oy * p.stride - p.padding + ky * p.dilation;
                                if (iy < 0 || iy >= h) continue;
                                for (int ox = 0; ox < wo; ++ox) {
                                    const int ix = ox * p.stride - p.padding + kx * p.dilation;
                                    if (ix < 0 || ix >= w) continue;
                                    gx[(static_cast<std::size_t>(c) * h + iy) * w + ix] +=
                                        row[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        });
}

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps) {
    require(x.value().ndim() == 3, "group_norm expects [C, H, W], got " + shape_str(x.shape()));
    const int channels = x.dim(0);
    require(groups > 0 && channels % groups == 0,
            "group_norm: " + std::to_string(channels) + " channels not divisible into " +
                std::to_string(groups) + " groups");
    const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    const int per_group = channels / groups;
    const std::size_t n = hw * per_group;
    Tensor<T> xhat(x.shape());
    std::vector<T> rstd(groups);
    for (int g = 0; g < groups; ++g) {
        const T* src = x.value().data() + g * n;
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += src[i];
        m /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (src[i] - m) * (src[i] - m);
        var /= static_cast<double>(n);
        const T r = static_cast<T>(1.0 / std::sqrt(var + eps));
        rstd[g] = r;
        T* dst = xhat.data() + g * n;
        for (std::size_t i = 0; i < n; ++i) dst[i] = (src[i] - static_cast<T>(m)) * r;
    }
    Tensor<T> out = xhat;
    for (int c = 0; c < channels; ++c) {
        const T gm = gamma.defined() ? gamma.value()[c] : T(1);
        const T bt = beta.defined() ? beta.value()[c] : T(0);
        T* row = out.data() + c * hw;
        for (std::size_t i = 0; i < hw; ++i) row[i] = row[i] * gm + bt;
    }
    return make_op<T>(
        std::move(out), {x, gamma, beta},
        [xhat = std::move(xhat), rstd = std::move(rstd), channels, per_group, hw,
         n](Node<T>& self) {
            const bool has_gamma = static_cast<bool>(self.parents[1]);
            if (has_gamma) {
                if (auto* g = parent_grad(self, 1)) {
                    for (int c = 0; c < channels; ++c) {
                        T acc = T(0);
                        for (std::size_t i = 0; i < hw; ++i) {
                            acc += self.grad[c * hw + i] * xhat[c * hw + i];
                        }
                        (*g)[c] += acc;
                    }
                }
            }
            if (self.parents[2]) {
                if (auto* g = parent_grad(self, 2)) {
                    for (int c = 0; c < channels; ++c) {
                        T acc = T(0);
                        for (std::size_t i = 0; i < hw; ++i) acc += self.grad[c * hw + i];
                        (*g)[c] += acc;
                    }
                }
            }
            if (auto* g = parent_grad(self, 0)) {
                const int groups = static_cast<int>(rstd.size());
                std::vector<T> dxhat(n);
                for (int grp = 0; grp < groups; ++grp) {
                    T mean_d = T(0);
                    T mean_dx = T(0);
                    for (int cc = 0; cc < per_group; ++cc) {
                        const int c = grp * per_group + cc;
                        const T gm = has_gamma ? parent_value(self, 1)[c] : T(1);
                        for (std::size_t i = 0; i < hw; ++i) {
                            const std::size_t idx = c * hw + i;
                            const T d = self.grad[idx] * gm;
                            dxhat[cc * hw + i] = d;
                            mean_d += d;
                            mean_dx += d * xhat[idx];
                        }
                    }
                    mean_d /= static_cast<T>(n);
                    mean_dx /= static_cast<T>(n);
                    const std::size_t base = grp * n;
                    for (std::size_t i = 0; i < n; ++i) {
                        (*g)[base + i] +=
                            rstd[grp] * (dxhat[i] - mean_d - xhat[base + i] * mean_dx);
                    }
                }
            }
        });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    require(x.value().ndim() == 2, "layer_norm expects [L, d], got " + shape_str(x.shape()));
    const int rows = x.dim(0);
    const int d = x.dim(1);
    Tensor<T> xhat(x.shape());
    std::vector<T> rstd(rows);
    for (int r = 0; r < rows; ++r) {
        const T* src = x.value().data() + static_cast<std::size_t>(r) * d;
        T m = T(0);
        for (int i = 0; i < d; ++i) m += src[i];
        m /= static_cast<T>(d);
        T var = T(0);
        for (int i = 0; i < d; ++i) var += (src[i] - m) * (src[i] - m);
        var /= static_cast<T>(d);
        rstd[r] = T(1) / std::sqrt(var + eps);
        T* dst = xhat.data() + static_cast<std::size_t>(r) * d;
        for (int i = 0; i < d; ++i) dst[i] = (src[i] - m) * rstd[r];
    }
    Tensor<T> out = xhat;
    for (int r = 0; r < rows; ++r) {
        for (int i = 0; i < d; ++i) {
            T& v = out[static_cast<std::size_t>(r) * d + i];
            v = v * (gamma.defined() ? gamma.value()[i] : T(1)) +
                (beta.defined() ? beta.value()[i] : T(0));
        }
    }
    return make_op<T>(
        std::move(out), {x, gamma, beta},
        [xhat = std::move(xhat), rstd = std::move(rstd), rows, d](Node<T>& self) {
            const bool has_gamma = static_cast<bool>(self.parents[1]);
            if (has_gamma) {
                if (auto* g = parent_grad(self, 1)) {
                    for (std::size_t i = 0; i < self.grad.size(); ++i) {
                        (*g)[i % d] += self.grad[i] * xhat[i];
                    }
                }
            }
            if (self.parents[2]) {
                if (auto* g = parent_grad(self, 2)) {
                    for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % d] += self.grad[i];
                }
            }
            if (auto* g = parent_grad(self, 0)) {
                std::vector<T> dxh(d);
                for (int r = 0; r < rows; ++r) {
                    const std::size_t base = static_cast<std::size_t>(r) * d;
                    T mean_d = T(0);
                    T mean_dx = T(0);
                    for (int i = 0; i < d; ++i) {
                        const T gm = has_gamma ? parent_value(self, 1)[i] : T(1);
                        dxh[i] = self.grad[base + i] * gm;
                        mean_d += dxh[i];
                        mean_dx += dxh[i] * xhat[base + i];
                    }
                    mean_d /= static_cast<T>(d);
                    mean_dx /= static_cast<T>(d);
                    for (int i = 0; i < d; ++i) {
                        (*g)[base + i] += rstd[r] * (dxh[i] - mean_d - xhat[base + i] * mean_dx);
                    }
                }
            }
        });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
    require(x.value().ndim() == 3 && x.dim(1) % 2 == 0 && x.dim(2) % 2 == 0,
            "avg_pool2 needs [C, H, W] with even H and W, got " + shape_str(x.shape()));
    const int c = x.dim(0);
    const int h = x.dim(1);
    const int w = x.dim(2);
    Tensor<T> out({c, h / 2, w / 2});
    for (int ch = 0; ch < c; ++ch) {
        for (int i = 0; i < h / 2; ++i) {
            for (int j = 0; j < w / 2; ++j) {
                const auto& v = x.value();
                out.at(ch, i, j) = T(0.25) * (v.at(ch, 2 * i, 2 * j) + v.at(ch, 2 * i, 2 * j + 1) +
                                              v.at(ch, 2 * i + 1, 2 * j) +
                                              v.at(ch, 2 * i + 1, 2 * j + 1));
            }
        }
    }
    return make_op<T>(std::move(out), {x}, [c, h, w](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (int ch = 0; ch < c; ++ch) {
                for (int i = 0; i < h; ++i) {
                    for (int j = 0; j < w; ++j) {
                        g->at(ch, i, j) += T(0.25) * self.grad.at(ch, i / 2, j / 2);
                    }
                }
            }
        }
    });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    require(x.value().ndim() == 3, "global_avg_pool expects [C, H, W]");
    const int c = x.dim(0);
    const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    Tensor<T> out({c, 1, 1});
    for (int ch = 0; ch < c; ++ch) {
        T s = T(0);
        for (std::size_t i = 0; i < hw; ++i) s += x.value()[ch * hw + i];
        out[ch] = s / static_cast<T>(hw);
    }
    return make_op<T>(std::move(out), {x}, [c, hw](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (int ch = 0; ch < c; ++ch) {
                const T d = self.grad[ch] / static_cast<T>(hw);
                for (std::size_t i = 0; i < hw; ++i) (*g)[ch * hw + i] += d;
            }
        }
    });
}

template <typename T>
Var<T> broadcast_spatial(const Var<T>& x, int height, int width) {
    require(x.value().ndim() == 3 && x.dim(1) == 1 && x.dim(2) == 1,
            "broadcast_spatial expects [C, 1, 1], got " + shape_str(x.shape()));
    const int c = x.dim(0);
    const std::size_t hw = static_cast<std::size_t>(height) * width;
    Tensor<T> out({c, height, width});
    for (int ch = 0; ch < c; ++ch) {
        std::fill(out.data() + ch * hw, out.data() + (ch + 1) * hw, x.value()[ch]);
    }
    return make_op<T>(std::move(out), {x}, [c, hw](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (int ch = 0; ch < c; ++ch) {
                T s = T(0);
                for (std::size_t i = 0; i < hw; ++i) s += self.grad[ch * hw + i];
                (*g)[ch] += s;
            }
        }
    });
}

namespace {

struct LinearTaps {
    std::vector<int> i0, i1;
    std::vector<double> w1;
};

LinearTaps resize_taps(int in, int out) {
    LinearTaps t;
    t.i0.resize(out);
    t.i1.resize(out);
    t.w1.resize(out);
    const double ratio = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * ratio - 0.5;
        if (src < 0.0) src = 0.0;
        int lo = static_cast<int>(std::floor(src));
        if (lo > in - 1) lo = in - 1;
        t.i0[o] = lo;
        t.i1[o] = std::min(lo + 1, in - 1);
        t.w1[o] = src - lo;
    }
    return t;
}

}  // namespace

template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int height, int width) {
    require(x.value().ndim() == 3 && height > 0 && width > 0,
            "upsample_bilinear expects [C, H, W] and a positive target size");
    const int c = x.dim(0);
    const int h = x.dim(1);
    const int w = x.dim(2);
    LinearTaps ty = resize_taps(h, height);
    LinearTaps tx = resize_taps(w, width);
    Tensor<T> out({c, height, width});
    for (int ch = 0; ch < c; ++ch) {
        for (int i = 0; i < height; ++i) {
            const T wy = static_cast<T>(ty.w1[i]);
            for (int j = 0; j < width; ++j) {
                const T wx = static_cast<T>(tx.w1[j]);
                const auto& v = x.value();
                out.at(ch, i, j) =
                    (T(1) - wy) * ((T(1) - wx) * v.at(ch, ty.i0[i], tx.i0[j]) +
                                   wx * v.at(ch, ty.i0[i], tx.i1[j])) +
                    wy * ((T(1) - wx) * v.at(ch, ty.i1[i], tx.i0[j]) +
                          wx * v.at(ch, ty.i1[i], tx.i1[j]));
            }
        }
    }
    return make_op<T>(std::move(out), {x},
                      [ty = std::move(ty), tx = std::move(tx), c, height, width](Node<T>& self) {
                          auto* g = parent_grad(self, 0);
                          if (!g) return;
                          for (int ch = 0; ch < c; ++ch) {
                              for (int i = 0; i < height; ++i) {
                                  const T wy = static_cast<T>(ty.w1[i]);
                                  for (int j = 0; j < width; ++j) {
                                      const T wx = static_cast<T>(tx.w1[j]);
                                      const T d = self.grad.at(ch, i, j);
                                      g->at(ch, ty.i0[i], tx.i0[j]) += (T(1) - wy) * (T(1) - wx) * d;
                                      g->at(ch, ty.i0[i], tx.i1[j]) += (T(1) - wy) * wx * d;
                                      g->at(ch, ty.i1[i], tx.i0[j]) += wy * (T(1) - wx) * d;
                                      g->at(ch, ty.i1[i], tx.i1[j]) += wy * wx * d;
                                  }
                              }
                          }
                      });
}

// ---- attention ------------------------------------------------------------

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, T score_scale,
                 std::vector<Tensor<T>>* weights_out) {
    require(q.value().ndim() == 2 && k.value().ndim() == 2 && v.value().ndim() == 2,
            "attention expects 2-d q, k, v");
    const int lq = q.dim(0);
    const int d = q.dim(1);
    const int lk = k.dim(0);
    const int dv = v.dim(1);
    require(k.dim(1) == d && v.dim(0) == lk,
            "attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                shape_str(v.shape()) + " are inconsistent");
    require(heads > 0 && d % heads == 0 && dv % heads == 0,
            "attention: widths not divisible by head count");
    const int dh = d / heads;
    const int dvh = dv / heads;
    auto weights = std::make_shared<std::vector<MatR<T>>>(heads);
    Tensor<T> out({lq, dv});
    for (int h = 0; h < heads; ++h) {
        CStridedMap<T> qh(q.value().data() + h * dh, lq, dh, Eigen::OuterStride<>(d));
        CStridedMap<T> kh(k.value().data() + h * dh, lk, dh, Eigen::OuterStride<>(d));
        CStridedMap<T> vh(v.value().data() + h * dvh, lk, dvh, Eigen::OuterStride<>(dv));
        MatR<T>& a = (*weights)[h];
        a.noalias() = qh * kh.transpose();
        a *= score_scale;
        for (int r = 0; r < lq; ++r) {
            auto row = a.row(r);
            const T mx = row.maxCoeff();
            row = (row.array() - mx).exp();
            row /= row.sum();
        }
        StridedMap<T>(out.data() + h * dvh, lq, dvh, Eigen::OuterStride<>(dv)).noalias() = a * vh;
        if (weights_out) {
            Tensor<T> wt({lq, lk});
            MapR<T>(wt.data(), lq, lk) = a;
            weights_out->push_back(std::move(wt));
        }
    }
    return make_op<T>(
        std::move(out), {q, k, v},
        [weights, heads, lq, lk, d, dv, dh, dvh, score_scale](Node<T>& self) {
            auto* gq = parent_grad(self, 0);
            auto* gk = parent_grad(self, 1);
            auto* gv = parent_grad(self, 2);
            const auto& qv = parent_value(self, 0);
            const auto& kv = parent_value(self, 1);
            const auto& vv = parent_value(self, 2);
            for (int h = 0; h < heads; ++h) {
                const MatR<T>& a = (*weights)[h];
                CStridedMap<T> dout(self.grad.data() + h * dvh, lq, dvh, Eigen::OuterStride<>(dv));
                CStridedMap<T> vh(vv.data() + h * dvh, lk, dvh, Eigen::OuterStride<>(dv));
                if (gv) {
                    StridedMap<T>(gv->data() + h * dvh, lk, dvh, Eigen::OuterStride<>(dv))
                        .noalias() += a.transpose() * dout;
                }
                if (!gq && !gk) continue;
                MatR<T> ds = dout * vh.transpose();
                for (int r = 0; r < lq; ++r) {
                    const T dot = ds.row(r).dot(a.row(r));
                    ds.row(r) = (a.row(r).array() * (ds.row(r).array() - dot)).matrix();
                }
                ds *= score_scale;
                if (gq) {
                    CStridedMap<T> kh(kv.data() + h * dh, lk, dh, Eigen::OuterStride<>(d));
                    StridedMap<T>(gq->data() + h * dh, lq, dh, Eigen::OuterStride<>(d))
                        .noalias() += ds * kh;
                }
                if (gk) {
                    CStridedMap<T> qh(qv.data() + h * dh, lq, dh, Eigen::OuterStride<>(d));
                    StridedMap<T>(gk->data() + h * dh, lk, dh, Eigen::OuterStride<>(d))
                        .noalias() += ds.transpose() * qh;
                }
            }
        });
}

// ---- sparse sampling ------------------------------------------------------

template <typename T>
Var<T> gather(const std::vector<Var<T>>& sources, std::shared_ptr<const GatherTable> table_ptr) {
    require(!sources.empty(), "gather needs at least one source");
    require(table_ptr != nullptr, "gather needs a table");
    const GatherTable& table = *table_ptr;
    const int channels = sources.front().dim(0);
    for (const auto& s : sources) {
        require(s.value().ndim() == 3 && s.dim(0) == channels,
                "gather: sources must be [C, h, w] with equal C");
    }
    const std::size_t cells = static_cast<std::size_t>(table.out_height) * table.out_width;
    require(table.offsets.size() == cells + 1, "gather: table does not match its output size");
    std::vector<std::size_t> plane(sources.size());
    for (std::size_t s = 0; s < sources.size(); ++s) {
        plane[s] = static_cast<std::size_t>(sources[s].dim(1)) * sources[s].dim(2);
    }
    Tensor<T> out({channels, table.out_height, table.out_width});
    for (std::size_t cell = 0; cell < cells; ++cell) {
        for (int e = table.offsets[cell]; e < table.offsets[cell + 1]; ++e) {
            const auto src = static_cast<std::size_t>(table.source[e]);
            const T wgt = static_cast<T>(table.weight[e]);
            const T* base = sources[src].value().data() + table.index[e];
            for (int c = 0; c < channels; ++c) out[c * cells + cell] += wgt * base[c * plane[src]];
        }
    }
    return make_op<T>(std::move(out), sources,
                      [table_ptr, plane, channels, cells](Node<T>& self) {
                          const GatherTable& table = *table_ptr;
                          for (std::size_t cell = 0; cell < cells; ++cell) {
                              for (int e = table.offsets[cell]; e < table.offsets[cell + 1]; ++e) {
                                  auto* g = parent_grad(self, static_cast<std::size_t>(table.source[e]));
                                  if (!g) continue;
                                  const T wgt = static_cast<T>(table.weight[e]);
                                  T* base = g->data() + table.index[e];
                                  const auto pl = plane[table.source[e]];
                                  for (int c = 0; c < channels; ++c) {
                                      base[c * pl] += wgt * self.grad[c * cells + cell];
                                  }
                              }
                          }
                      });
}

// ---- losses and heads -----------------------------------------------------

template <typename T>
Var<T> binary_seg_cross_entropy(const Var<T>& logits, std::span<const std::uint8_t> mask) {
    require(logits.value().ndim() == 3 && logits.dim(0) == 2,
            "segmentation logits must be [2, H, W], got " + shape_str(logits.shape()));
    const std::size_t n = static_cast<std::size_t>(logits.dim(1)) * logits.dim(2);
    require(mask.size() == n, "segmentation mask has " + std::to_string(mask.size()) +
                                  " pixels, logits have " + std::to_string(n));
    const T* bg = logits.value().data();
    const T* fg = bg + n;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const T m = std::max(bg[i], fg[i]);
        const T lse = m + std::log(std::exp(bg[i] - m) + std::exp(fg[i] - m));
        total += static_cast<double>(lse - (mask[i] ? fg[i] : bg[i]));
    }
    std::vector<std::uint8_t> labels(mask.begin(), mask.end());
    return make_op<T>(Tensor<T>({1}, {static_cast<T>(total / n)}), {logits},
                      [labels = std::move(labels), n](Node<T>& self) {
                          auto* g = parent_grad(self, 0);
                          if (!g) return;
                          const T* bg = parent_value(self, 0).data();
                          const T* fg = bg + n;
                          const T s = self.grad[0] / static_cast<T>(n);
                          for (std::size_t i = 0; i < n; ++i) {
                              const T p_fg = sigmoid_scalar(fg[i] - bg[i]);
                              const T y = labels[i] ? T(1) : T(0);
                              (*g)[n + i] += s * (p_fg - y);
                              (*g)[i] += s * ((T(1) - p_fg) - (T(1) - y));
                          }
                      });
}

template <typename T>
Var<T> foreground_probability(const Var<T>& logits) {
    require(logits.value().ndim() == 3 && logits.dim(0) == 2,
            "segmentation logits must be [2, H, W], got " + shape_str(logits.shape()));
    const int h = logits.dim(1);
    const int w = logits.dim(2);
    const std::size_t n = static_cast<std::size_t>(h) * w;
    Tensor<T> out({h, w});
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = sigmoid_scalar(logits.value()[n + i] - logits.value()[i]);
    }
    return make_op<T>(std::move(out), {logits}, [n](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < n; ++i) {
                const T p = self.value[i];
                const T d = self.grad[i] * p * (T(1) - p);
                (*g)[n + i] += d;
                (*g)[i] -= d;
            }
        }
    });
}

template <typename T>
Var<T> dice(const Var<T>& probs, std::span<const std::uint8_t> mask, T eps, DiceMode mode) {
    const std::size_t n = probs.value().size();
    require(mask.size() == n, "dice: prediction has " + std::to_string(n) +
                                  " pixels, mask has " + std::to_string(mask.size()));
    double inter = 0.0;
    double psum = 0.0;
    double gsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const T p = probs.value()[i];
        if (!(p >= T(0) && p <= T(1))) {
            throw DomainError("dice: probability " + std::to_string(static_cast<double>(p)) +
                              " at index " + std::to_string(i) + " outside [0, 1]");
        }
        const double g = mask[i] ? 1.0 : 0.0;
        inter += p * g;
        psum += p;
        gsum += g;
    }
    const double e = eps;
    double loss = 0.0;
    if (mode == DiceMode::dice) {
        loss = 1.0 - (2.0 * inter + e) / (psum + gsum + e);
    } else {
        loss = 1.0 - 2.0 * (inter + e) / (psum + gsum - inter + e);
    }
    std::vector<std::uint8_t> labels(mask.begin(), mask.end());
    return make_op<T>(
        Tensor<T>({1}, {static_cast<T>(loss)}), {probs},
        [labels = std::move(labels), inter, psum, gsum, e, mode](Node<T>& self) {
            auto* g = parent_grad(self, 0);
            if (!g) return;
            const double up = self.grad[0];
            if (mode == DiceMode::dice) {
                const double den = psum + gsum + e;
                const double num = 2.0 * inter + e;
                for (std::size_t i = 0; i < g->size(); ++i) {
                    const double gi = labels[i] ? 1.0 : 0.0;
                    (*g)[i] += static_cast<T>(up * -(2.0 * gi * den - num) / (den * den));
                }
            } else {
                const double den = psum + gsum - inter + e;
                const double num = inter + e;
                for (std::size_t i = 0; i < g->size(); ++i) {
                    const double gi = labels[i] ? 1.0 : 0.0;
                    (*g)[i] += static_cast<T>(up * -2.0 * (gi * den - num * (1.0 - gi)) /
                                              (den * den));
                }
            }
        });
}

template <typename T>
Var<T> class_cross_entropy(const Var<T>& logits, std::span<const int> labels,
                           std::span<const double> class_weight, double focal_gamma) {
    require(logits.value().ndim() == 2, "class logits must be [N, K]");
    const int rows = logits.dim(0);
    const int classes = logits.dim(1);
    require(static_cast<int>(labels.size()) == rows, "class_cross_entropy: label count mismatch");
    require(static_cast<int>(class_weight.size()) == classes,
            "class_cross_entropy: class weight count mismatch");
    std::vector<double> probs(static_cast<std::size_t>(rows) * classes);
    double wsum = 0.0;
    double total = 0.0;
    for (int r = 0; r < rows; ++r) {
        const int y = labels[r];
        require(y >= 0 && y < classes, "class_cross_entropy: label out of range");
        const T* z = logits.value().data() + static_cast<std::size_t>(r) * classes;
        double mx = z[0];
        for (int c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(z[c]));
        double s = 0.0;
        for (int c = 0; c < classes; ++c) s += std::exp(z[c] - mx);
        const double log_s = std::log(s) + mx;
        for (int c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(z[c] - log_s);
        const double log_pt = z[y] - log_s;
        const double pt = std::exp(log_pt);
        const double focal = focal_gamma > 0.0 ? std::pow(1.0 - pt, focal_gamma) : 1.0;
        total += class_weight[y] * -focal * log_pt;
        wsum += class_weight[y];
    }
    const double value = wsum > 0.0 ? total / wsum : 0.0;
    std::vector<int> lab(labels.begin(), labels.end());
    std::vector<double> cw(class_weight.begin(), class_weight.end());
    return make_op<T>(
        Tensor<T>({1}, {static_cast<T>(value)}), {logits},
        [probs = std::move(probs), lab = std::move(lab), cw = std::move(cw), rows, classes, wsum,
         focal_gamma](Node<T>& self) {
            auto* g = parent_grad(self, 0);
            if (!g || wsum <= 0.0) return;
            const double up = self.grad[0] / wsum;
            for (int r = 0; r < rows; ++r) {
                const int y = lab[r];
                const double pt = probs[r * classes + y];
                double factor = -1.0;
                if (focal_gamma > 0.0) {
                    factor = focal_gamma * std::pow(1.0 - pt, focal_gamma - 1.0) * pt *
                                 std::log(std::max(pt, 1e-300)) -
                             std::pow(1.0 - pt, focal_gamma);
                }
                for (int c = 0; c < classes; ++c) {
                    const double delta = (c == y ? 1.0 : 0.0) - probs[r * classes + c];
                    (*g)[static_cast<std::size_t>(r) * classes + c] +=
                        static_cast<T>(up * cw[y] * delta * factor);
                }
            }
        });
}

template <typename T>
Var<T> matched_point_l1(const Var<T>& points, const PointTargets& targets) {
    require(points.value().ndim() == 3 && points.dim(2) == 2, "points must be [N, P, 2]");
    const int n_points = points.dim(1);
    const std::size_t per = static_cast<std::size_t>(n_points) * 2;
    const std::size_t matched = targets.pred_index.size();
    require(targets.candidates.size() == matched, "matched_point_l1: candidate count mismatch");
    std::vector<int> chosen(matched, 0);
    double total = 0.0;
    for (std::size_t m = 0; m < matched; ++m) {
        const int pi = targets.pred_index[m];
        require(pi >= 0 && pi < points.dim(0), "matched_point_l1: prediction index out of range");
        const T* p = points.value().data() + pi * per;
        double best = 0.0;
        for (std::size_t o = 0; o < targets.candidates[m].size(); ++o) {
            const auto& cand = targets.candidates[m][o];
            require(cand.size() == per, "matched_point_l1: ordering has the wrong point count");
            double c = 0.0;
            for (int j = 0; j < n_points; ++j) {
                c += std::abs(static_cast<double>(p[2 * j]) - cand[2 * j]) / targets.scale_x +
                     std::abs(static_cast<double>(p[2 * j + 1]) - cand[2 * j + 1]) /
                         targets.scale_y;
            }
            c /= n_points;
            if (o == 0 || c < best) {
                best = c;
                chosen[m] = static_cast<int>(o);
            }
        }
        total += best;
    }
    const double value = matched ? total / static_cast<double>(matched) : 0.0;
    std::vector<std::vector<double>> picked(matched);
    for (std::size_t m = 0; m < matched; ++m) picked[m] = targets.candidates[m][chosen[m]];
    return make_op<T>(Tensor<T>({1}, {static_cast<T>(value)}), {points},
                      [pred_index = targets.pred_index, picked = std::move(picked),
                       sx = targets.scale_x, sy = targets.scale_y, matched, per,
                       n_points](Node<T>& self) {
                          auto* g = parent_grad(self, 0);
                          if (!g || matched == 0) return;
                          const double up = self.grad[0] / (static_cast<double>(matched) * n_points);
                          const auto& pv = parent_value(self, 0);
                          for (std::size_t m = 0; m < matched; ++m) {
                              const std::size_t base = pred_index[m] * per;
                              const auto& cand = picked[m];
                              for (std::size_t i = 0; i < per; ++i) {
                                  const double diff = static_cast<double>(pv[base + i]) - cand[i];
                                  const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                                  const double s = (i % 2 == 0) ? sx : sy;
                                  (*g)[base + i] += static_cast<T>(up * sgn / s);
                              }
                          }
                      });
}

template <typename T>
Var<T> bounded_points(const Var<T>& raw, double x_lo, double x_hi, double y_lo, double y_hi) {
    require(raw.value().ndim() == 2 && raw.dim(1) == 2, "bounded_points expects [M, 2]");
    Tensor<T> out(raw.shape());
    const T span[2] = {static_cast<T>(x_hi - x_lo), static_cast<T>(y_hi - y_lo)};
    const T lo[2] = {static_cast<T>(x_lo), static_cast<T>(y_lo)};
    Tensor<T> sig(raw.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        sig[i] = sigmoid_scalar(raw.value()[i]);
        out[i] = lo[i % 2] + sig[i] * span[i % 2];
    }
    return make_op<T>(std::move(out), {raw},
                      [sig = std::move(sig), sx = span[0], sy = span[1]](Node<T>& self) {
                          if (auto* g = parent_grad(self, 0)) {
                              for (std::size_t i = 0; i < g->size(); ++i) {
                                  const T s = sig[i];
                                  (*g)[i] += self.grad[i] * s * (T(1) - s) * (i % 2 == 0 ? sx : sy);
                              }
                          }
                      });
}

#define MAPSEG_INSTANTIATE_AD(T)                                                                \
    template Var<T> constant(Tensor<T>);                                                        \
    template Var<T> parameter(Tensor<T>);                                                       \
    template void backward(const Var<T>&);                                                      \
    template Var<T> add(const Var<T>&, const Var<T>&);                                          \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                          \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                          \
    template Var<T> scale(const Var<T>&, T);                                                    \
    template Var<T> silu(const Var<T>&);                                                        \
    template Var<T> sigmoid(const Var<T>&);                                                     \
    template Var<T> reshape(const Var<T>&, Shape);                                              \
    template Var<T> transpose(const Var<T>&);                                                   \
    template Var<T> concat0(const std::vector<Var<T>>&);                                        \
    template Var<T> slice0(const Var<T>&, int, int);                                            \
    template Var<T> sum(const Var<T>&);                                                         \
    template Var<T> mean(const Var<T>&);                                                        \
    template Var<T> weighted_sum(const Var<T>&, const Tensor<T>&);                              \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                       \
    template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                        \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, Conv2dParams);          \
    template Var<T> group_norm(const Var<T>&, const Var<T>&, const Var<T>&, int, T);            \
    template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                 \
    template Var<T> avg_pool2(const Var<T>&);                                                   \
    template Var<T> global_avg_pool(const Var<T>&);                                             \
    template Var<T> broadcast_spatial(const Var<T>&, int, int);                                 \
    template Var<T> upsample_bilinear(const Var<T>&, int, int);                                 \
    template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, int, T,              \
                              std::vector<Tensor<T>>*);                                         \
    template Var<T> gather(const std::vector<Var<T>>&, std::shared_ptr<const GatherTable>);                     \
    template Var<T> binary_seg_cross_entropy(const Var<T>&, std::span<const std::uint8_t>);     \
    template Var<T> foreground_probability(const Var<T>&);                                      \
    template Var<T> dice(const Var<T>&, std::span<const std::uint8_t>, T, DiceMode);            \
    template Var<T> class_cross_entropy(const Var<T>&, std::span<const int>,                    \
                                        std::span<const double>, double);                       \
    template Var<T> matched_point_l1(const Var<T>&, const PointTargets&);                       \
    template Var<T> bounded_points(const Var<T>&, double, double, double, double);

MAPSEG_INSTANTIATE_AD(float)
MAPSEG_INSTANTIATE_AD(double)

}  // namespace mapseg::ad
