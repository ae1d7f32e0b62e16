#include "hgen/ad.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace hgen::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Arr::Arr(std::vector<int64_t> s, double fill) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(numel()), fill);
}

Arr::Arr(std::vector<int64_t> s, std::vector<double> d)
    : shape(std::move(s)), v(std::move(d)) {
    if (static_cast<int64_t>(v.size()) != numel())
        throw DimensionError("Arr: data length does not match shape product");
}

int64_t Arr::numel() const {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

Arr Arr::from_tensor(const Tensor& t) {
    Arr a(t.shape);
    for (size_t i = 0; i < t.data.size(); ++i) a.v[i] = t.data[i];
    return a;
}

Tensor Arr::to_tensor() const {
    Tensor t(shape);
    for (size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v[i]);
    return t;
}

void Node::ensure_grad() {
    if (grad.v.empty()) grad = Arr(val.shape);
}

void Node::accumulate(const Arr& g) {
    ensure_grad();
    for (size_t i = 0; i < grad.v.size(); ++i) grad.v[i] += g.v[i];
}

namespace {
thread_local int g_no_grad_depth = 0;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Var leaf(Arr value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->val = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

Var constant(Arr value) { return leaf(std::move(value), false); }
Var scalar(double value) { return constant(Arr({1}, {value})); }

namespace {

bool track(std::initializer_list<Var> parents) {
    if (!grad_enabled()) return false;
    for (const auto& p : parents)
        if (p->requires_grad || p->backprop) return true;
    return false;
}

Var make_node(Arr value, std::vector<Var> parents, std::function<void()> backprop) {
    auto n = std::make_shared<Node>();
    n->val = std::move(value);
    bool need = grad_enabled();
    if (need) {
        bool any = false;
        for (const auto& p : parents) any = any || p->requires_grad || p->backprop;
        need = any;
    }
    if (need) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
        n->requires_grad = true;
    }
    return n;
}

// Maps every flat index of `out_shape` to the flat index of the broadcast
// operand `b_shape` (trailing-aligned, dims equal or 1).
std::vector<int64_t> broadcast_map(const std::vector<int64_t>& out_shape,
                                   const std::vector<int64_t>& b_shape) {
    size_t ra = out_shape.size(), rb = b_shape.size();
    if (rb > ra) throw DimensionError("broadcast: operand rank exceeds output rank");
    std::vector<int64_t> b_full(ra, 1);
    for (size_t i = 0; i < rb; ++i) b_full[ra - rb + i] = b_shape[i];
    for (size_t i = 0; i < ra; ++i)
        if (b_full[i] != out_shape[i] && b_full[i] != 1)
            throw DimensionError("broadcast: incompatible extents");

    std::vector<int64_t> b_stride(ra);
    int64_t s = 1;
    for (size_t i = ra; i-- > 0;) {
        b_stride[i] = (b_full[i] == 1) ? 0 : s;
        s *= b_full[i];
    }
    int64_t n = 1;
    for (int64_t e : out_shape) n *= e;
    std::vector<int64_t> map(static_cast<size_t>(n));
    std::vector<int64_t> idx(ra, 0);
    for (int64_t f = 0; f < n; ++f) {
        int64_t bi = 0;
        for (size_t i = 0; i < ra; ++i) bi += idx[i] * b_stride[i];
        map[static_cast<size_t>(f)] = bi;
        for (size_t i = ra; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    return map;
}

Var broadcast_binary(const Var& a, const Var& b, double bsign, bool product) {
    if (a->val.shape == b->val.shape) {
        Arr out(a->val.shape);
        for (size_t i = 0; i < out.v.size(); ++i)
            out.v[i] = product ? a->val.v[i] * b->val.v[i]
                               : a->val.v[i] + bsign * b->val.v[i];
        Var av = a, bv = b;
        auto n = make_node(std::move(out), {a, b}, nullptr);
        if (n->backprop == nullptr && n->requires_grad) {
            std::weak_ptr<Node> wn = n;
            n->backprop = [wn, av, bv, bsign, product] {
                auto self = wn.lock();
                av->ensure_grad();
                bv->ensure_grad();
                for (size_t i = 0; i < self->grad.v.size(); ++i) {
                    double g = self->grad.v[i];
                    if (product) {
                        av->grad.v[i] += g * bv->val.v[i];
                        bv->grad.v[i] += g * av->val.v[i];
                    } else {
                        av->grad.v[i] += g;
                        bv->grad.v[i] += bsign * g;
                    }
                }
            };
        }
        return n;
    }
    auto map = broadcast_map(a->val.shape, b->val.shape);
    Arr out(a->val.shape);
    for (size_t i = 0; i < out.v.size(); ++i) {
        double bvv = b->val.v[static_cast<size_t>(map[i])];
        out.v[i] = product ? a->val.v[i] * bvv : a->val.v[i] + bsign * bvv;
    }
    Var av = a, bv = b;
    auto n = make_node(std::move(out), {a, b}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        auto shared_map = std::make_shared<std::vector<int64_t>>(std::move(map));
        n->backprop = [wn, av, bv, bsign, product, shared_map] {
            auto self = wn.lock();
            av->ensure_grad();
            bv->ensure_grad();
            const auto& m = *shared_map;
            for (size_t i = 0; i < self->grad.v.size(); ++i) {
                double g = self->grad.v[i];
                size_t bi = static_cast<size_t>(m[i]);
                if (product) {
                    av->grad.v[i] += g * bv->val.v[bi];
                    bv->grad.v[bi] += g * av->val.v[i];
                } else {
                    av->grad.v[i] += g;
                    bv->grad.v[bi] += bsign * g;
                }
            }
        };
    }
    return n;
}

}  // namespace

Var add(const Var& a, const Var& b) { return broadcast_binary(a, b, 1.0, false); }
Var sub(const Var& a, const Var& b) { return broadcast_binary(a, b, -1.0, false); }
Var mul(const Var& a, const Var& b) { return broadcast_binary(a, b, 1.0, true); }

Var scale(const Var& a, double s) {
    Arr out(a->val.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = a->val.v[i] * s;
    Var av = a;
    auto n = make_node(std::move(out), {a}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        n->backprop = [wn, av, s] {
            auto self = wn.lock();
            av->ensure_grad();
            for (size_t i = 0; i < self->grad.v.size(); ++i)
                av->grad.v[i] += s * self->grad.v[i];
        };
    }
    return n;
}

Var add_scaled(const Var& a, const Var& b, double s) { return add(a, scale(b, s)); }

Var relu(const Var& a) {
    Arr out(a->val.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = std::max(0.0, a->val.v[i]);
    Var av = a;
    auto n = make_node(std::move(out), {a}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        n->backprop = [wn, av] {
            auto self = wn.lock();
            av->ensure_grad();
            for (size_t i = 0; i < self->grad.v.size(); ++i)
                if (av->val.v[i] > 0.0) av->grad.v[i] += self->grad.v[i];
        };
    }
    return n;
}

Var unary(const Var& a, const std::function<double(double)>& f,
          const std::function<double(double)>& dfdx) {
    Arr out(a->val.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = f(a->val.v[i]);
    Var av = a;
    auto n = make_node(std::move(out), {a}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        n->backprop = [wn, av, dfdx] {
            auto self = wn.lock();
            av->ensure_grad();
            for (size_t i = 0; i < self->grad.v.size(); ++i)
                av->grad.v[i] += dfdx(av->val.v[i]) * self->grad.v[i];
        };
    }
    return n;
}

Var matmul(const Var& a, const Var& b) {
    if (a->val.shape.size() != 2 || b->val.shape.size() != 2 ||
        a->val.shape[1] != b->val.shape[0])
        throw DimensionError("matmul: incompatible shapes");
    int64_t N = a->val.shape[0], K = a->val.shape[1], M = b->val.shape[1];
    Arr out({N, M});
    {
        CMapMat A(a->val.v.data(), N, K), B(b->val.v.data(), K, M);
        MapMat O(out.v.data(), N, M);
        O.noalias() = A * B;
    }
    Var av = a, bv = b;
    auto n = make_node(std::move(out), {a, b}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        n->backprop = [wn, av, bv, N, K, M] {
            auto self = wn.lock();
            av->ensure_grad();
            bv->ensure_grad();
            CMapMat G(self->grad.v.data(), N, M);
            CMapMat A(av->val.v.data(), N, K), B(bv->val.v.data(), K, M);
            MapMat dA(av->grad.v.data(), N, K), dB(bv->grad.v.data(), K, M);
            dA.noalias() += G * B.transpose();
            dB.noalias() += A.transpose() * G;
        };
    }
    return n;
}

Var bmm(const Var& a, const Var& b) {
    if (a->val.shape.size() != 3 || b->val.shape.size() != 3 ||
        a->val.shape[0] != b->val.shape[0] || a->val.shape[2] != b->val.shape[1])
        throw DimensionError("bmm: incompatible shapes");
    int64_t B = a->val.shape[0], N = a->val.shape[1], K = a->val.shape[2],
            M = b->val.shape[2];
    Arr out({B, N, M});
    for (int64_t i = 0; i < B; ++i) {
        CMapMat A(a->val.v.data() + i * N * K, N, K);
        CMapMat Bm(b->val.v.data() + i * K * M, K, M);
        MapMat O(out.v.data() + i * N * M, N, M);
        O.noalias() = A * Bm;
    }
    Var av = a, bv = b;
    auto n = make_node(std::move(out), {a, b}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        n->backprop = [wn, av, bv, B, N, K, M] {
            auto self = wn.lock();
            av->ensure_grad();
            bv->ensure_grad();
            for (int64_t i = 0; i < B; ++i) {
                CMapMat G(self->grad.v.data() + i * N * M, N, M);
                CMapMat A(av->val.v.data() + i * N * K, N, K);
                CMapMat Bm(bv->val.v.data() + i * K * M, K, M);
                MapMat dA(av->grad.v.data() + i * N * K, N, K);
                MapMat dB(bv->grad.v.data() + i * K * M, K, M);
                dA.noalias() += G * Bm.transpose();
                dB.noalias() += A.transpose() * G;
            }
        };
    }
    return n;
}

Var transpose_last2(const Var& a) {
    const auto& s = a->val.shape;
    if (s.size() < 2) throw DimensionError("transpose_last2: rank < 2");
    int64_t N = s[s.size() - 2], M = s[s.size() - 1];
    int64_t batch = a->val.numel() / (N * M);
    std::vector<int64_t> out_shape = s;
    std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
    Arr out(out_shape);
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t i = 0; i < N; ++i)
            for (int64_t j = 0; j < M; ++j)
                out.v[static_cast<size_t>(b * N * M + j * N + i)] =
                    a->val.v[static_cast<size_t>(b * N * M + i * M + j)];
    Var av = a;
    auto n = make_node(std::move(out), {a}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        n->backprop = [wn, av, batch, N, M] {
            auto self = wn.lock();
            av->ensure_grad();
            for (int64_t b = 0; b < batch; ++b)
                for (int64_t i = 0; i < N; ++i)
                    for (int64_t j = 0; j < M; ++j)
                        av->grad.v[static_cast<size_t>(b * N * M + i * M + j)] +=
                            self->grad.v[static_cast<size_t>(b * N * M + j * N + i)];
        };
    }
    return n;
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const auto& xs = x->val.shape;
    int64_t in = xs.back();
    if (w->val.shape.size() != 2 || w->val.shape[0] != in)
        throw DimensionError("linear: weight shape mismatch");
    int64_t rows = x->val.numel() / in;
    Var flat = reshape(x, {rows, in});
    Var y = matmul(flat, w);
    y = add(y, b);
    std::vector<int64_t> out_shape(xs.begin(), xs.end() - 1);
    out_shape.push_back(w->val.shape[1]);
    return reshape(y, out_shape);
}

Var reshape(const Var& a, std::vector<int64_t> shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    if (n != a->val.numel()) throw DimensionError("reshape: element count mismatch");
    Arr out(shape, a->val.v);
    Var av = a;
    auto node = make_node(std::move(out), {a}, nullptr);
    if (node->requires_grad) {
        std::weak_ptr<Node> wn = node;
        node->backprop = [wn, av] {
            auto self = wn.lock();
            av->ensure_grad();
            for (size_t i = 0; i < self->grad.v.size(); ++i)
                av->grad.v[i] += self->grad.v[i];
        };
    }
    return node;
}

namespace {
// For concat/slice: treat tensor as {outer, axis_extent, inner}.
void axis_split(const std::vector<int64_t>& shape, int axis, int64_t& outer,
                int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
        inner *= shape[i];
}
}  // namespace

Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no parts");
    auto shape = parts[0]->val.shape;
    int64_t total_axis = 0;
    for (const auto& p : parts) {
        auto s = p->val.shape;
        if (static_cast<int>(s.size()) <= axis)
            throw DimensionError("concat: axis out of range");
        total_axis += s[static_cast<size_t>(axis)];
        s[static_cast<size_t>(axis)] = shape[static_cast<size_t>(axis)];
        if (s != shape) throw DimensionError("concat: shape mismatch off-axis");
    }
    std::vector<int64_t> out_shape = shape;
    out_shape[static_cast<size_t>(axis)] = total_axis;
    int64_t outer, inner;
    axis_split(out_shape, axis, outer, inner);
    Arr out(out_shape);
    int64_t offset = 0;
    for (const auto& p : parts) {
        int64_t ext = p->val.shape[static_cast<size_t>(axis)];
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(p->val.v.data() + o * ext * inner, ext * inner,
                        out.v.data() + (o * total_axis + offset) * inner);
        offset += ext;
    }
    std::vector<Var> parents = parts;
    auto node = make_node(std::move(out), parents, nullptr);
    if (node->requires_grad) {
        std::weak_ptr<Node> wn = node;
        node->backprop = [wn, parents, axis, outer, inner, total_axis] {
            auto self = wn.lock();
            int64_t offset2 = 0;
            for (const auto& p : parents) {
                p->ensure_grad();
                int64_t ext = p->val.shape[static_cast<size_t>(axis)];
                for (int64_t o = 0; o < outer; ++o) {
                    const double* src =
                        self->grad.v.data() + (o * total_axis + offset2) * inner;
                    double* dst = p->grad.v.data() + o * ext * inner;
                    for (int64_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
                }
                offset2 += ext;
            }
        };
    }
    return node;
}

Var slice(const Var& a, int axis, int64_t start, int64_t len) {
    const auto& s = a->val.shape;
    if (static_cast<int>(s.size()) <= axis || start < 0 ||
        start + len > s[static_cast<size_t>(axis)])
        throw DimensionError("slice: out of range");
    int64_t outer, inner;
    axis_split(s, axis, outer, inner);
    int64_t ext = s[static_cast<size_t>(axis)];
    std::vector<int64_t> out_shape = s;
    out_shape[static_cast<size_t>(axis)] = len;
    Arr out(out_shape);
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(a->val.v.data() + (o * ext + start) * inner, len * inner,
                    out.v.data() + o * len * inner);
    Var av = a;
    auto node = make_node(std::move(out), {a}, nullptr);
    if (node->requires_grad) {
        std::weak_ptr<Node> wn = node;
        node->backprop = [wn, av, outer, inner, ext, start, len] {
            auto self = wn.lock();
            av->ensure_grad();
            for (int64_t o = 0; o < outer; ++o) {
                const double* src = self->grad.v.data() + o * len * inner;
                double* dst = av->grad.v.data() + (o * ext + start) * inner;
                for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        };
    }
    return node;
}

Var sum_all(const Var& a) {
    double s = 0.0;
    for (double x : a->val.v) s += x;
    Var av = a;
    auto n = make_node(Arr({1}, {s}), {a}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        n->backprop = [wn, av] {
            auto self = wn.lock();
            av->ensure_grad();
            double g = self->grad.v[0];
            for (auto& x : av->grad.v) x += g;
        };
    }
    return n;
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / a->val.numel()); }

Var mse(const Var& a, const Var& b) {
    Var d = sub(a, b);
    return mean_all(mul(d, d));
}

Var softmax_last(const Var& a) {
    int64_t M = a->val.shape.back();
    int64_t rows = a->val.numel() / M;
    Arr out(a->val.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = a->val.v.data() + r * M;
        double* y = out.v.data() + r * M;
        double mx = x[0];
        for (int64_t j = 1; j < M; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (int64_t j = 0; j < M; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (int64_t j = 0; j < M; ++j) y[j] /= z;
    }
    Var av = a;
    auto n = make_node(std::move(out), {a}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        n->backprop = [wn, av, rows, M] {
            auto self = wn.lock();
            av->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* y = self->val.v.data() + r * M;
                const double* g = self->grad.v.data() + r * M;
                double dot = 0.0;
                for (int64_t j = 0; j < M; ++j) dot += y[j] * g[j];
                double* dx = av->grad.v.data() + r * M;
                for (int64_t j = 0; j < M; ++j) dx[j] += y[j] * (g[j] - dot);
            }
        };
    }
    return n;
}

Var layer_norm_last(const Var& a, const Var& gain, const Var& bias, double eps) {
    int64_t M = a->val.shape.back();
    if (gain->val.numel() != M || bias->val.numel() != M)
        throw DimensionError("layer_norm_last: gain/bias size mismatch");
    int64_t rows = a->val.numel() / M;
    Arr out(a->val.shape);
    auto xhat = std::make_shared<Arr>(a->val.shape);
    auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = a->val.v.data() + r * M;
        double mu = 0.0;
        for (int64_t j = 0; j < M; ++j) mu += x[j];
        mu /= M;
        double var = 0.0;
        for (int64_t j = 0; j < M; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= M;
        double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[static_cast<size_t>(r)] = rs;
        for (int64_t j = 0; j < M; ++j) {
            double xh = (x[j] - mu) * rs;
            xhat->v[static_cast<size_t>(r * M + j)] = xh;
            out.v[static_cast<size_t>(r * M + j)] =
                xh * gain->val.v[static_cast<size_t>(j)] +
                bias->val.v[static_cast<size_t>(j)];
        }
    }
    Var av = a, gv = gain, bv = bias;
    auto n = make_node(std::move(out), {a, gain, bias}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        n->backprop = [wn, av, gv, bv, xhat, rstd, rows, M] {
            auto self = wn.lock();
            av->ensure_grad();
            gv->ensure_grad();
            bv->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* g = self->grad.v.data() + r * M;
                const double* xh = xhat->v.data() + r * M;
                double rs = (*rstd)[static_cast<size_t>(r)];
                double sum_g = 0.0, sum_gx = 0.0;
                for (int64_t j = 0; j < M; ++j) {
                    double gj = g[j] * gv->val.v[static_cast<size_t>(j)];
                    sum_g += gj;
                    sum_gx += gj * xh[j];
                    gv->grad.v[static_cast<size_t>(j)] += g[j] * xh[j];
                    bv->grad.v[static_cast<size_t>(j)] += g[j];
                }
                double* dx = av->grad.v.data() + r * M;
                for (int64_t j = 0; j < M; ++j) {
                    double gj = g[j] * gv->val.v[static_cast<size_t>(j)];
                    dx[j] += rs * (gj - sum_g / M - xh[j] * sum_gx / M);
                }
            }
        };
    }
    return n;
}

Var embedding(const Var& table, const std::vector<int64_t>& indices) {
    if (table->val.shape.size() != 2) throw DimensionError("embedding: table not 2D");
    int64_t V = table->val.shape[0], D = table->val.shape[1];
    for (int64_t ix : indices)
        if (ix < 0 || ix >= V)
            throw std::out_of_range("embedding: index " + std::to_string(ix) +
                                    " out of range [0," + std::to_string(V) + ")");
    int64_t N = static_cast<int64_t>(indices.size());
    Arr out({N, D});
    for (int64_t i = 0; i < N; ++i)
        std::copy_n(table->val.v.data() + indices[static_cast<size_t>(i)] * D, D,
                    out.v.data() + i * D);
    Var tv = table;
    auto ix = std::make_shared<std::vector<int64_t>>(indices);
    auto n = make_node(std::move(out), {table}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        n->backprop = [wn, tv, ix, D] {
            auto self = wn.lock();
            tv->ensure_grad();
            for (size_t i = 0; i < ix->size(); ++i) {
                const double* src = self->grad.v.data() + static_cast<int64_t>(i) * D;
                double* dst = tv->grad.v.data() + (*ix)[i] * D;
                for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
            }
        };
    }
    return n;
}

namespace {

struct ConvDims {
    int64_t B, Cin, H, W, Cout, kh, kw, Ho, Wo;
    int stride, pad;
};

void im2col(const double* x, const ConvDims& d, double* cols) {
    // cols: {Cin*kh*kw, Ho*Wo}
    int64_t col_w = d.Ho * d.Wo;
    for (int64_t c = 0; c < d.Cin; ++c)
        for (int64_t ki = 0; ki < d.kh; ++ki)
            for (int64_t kj = 0; kj < d.kw; ++kj) {
                double* row = cols + ((c * d.kh + ki) * d.kw + kj) * col_w;
                for (int64_t oi = 0; oi < d.Ho; ++oi) {
                    int64_t ii = oi * d.stride + ki - d.pad;
                    for (int64_t oj = 0; oj < d.Wo; ++oj) {
                        int64_t jj = oj * d.stride + kj - d.pad;
                        row[oi * d.Wo + oj] =
                            (ii >= 0 && ii < d.H && jj >= 0 && jj < d.W)
                                ? x[(c * d.H + ii) * d.W + jj]
                                : 0.0;
                    }
                }
            }
}

void col2im_add(const double* cols, const ConvDims& d, double* dx) {
    int64_t col_w = d.Ho * d.Wo;
    for (int64_t c = 0; c < d.Cin; ++c)
        for (int64_t ki = 0; ki < d.kh; ++ki)
            for (int64_t kj = 0; kj < d.kw; ++kj) {
                const double* row = cols + ((c * d.kh + ki) * d.kw + kj) * col_w;
                for (int64_t oi = 0; oi < d.Ho; ++oi) {
                    int64_t ii = oi * d.stride + ki - d.pad;
                    if (ii < 0 || ii >= d.H) continue;
                    for (int64_t oj = 0; oj < d.Wo; ++oj) {
                        int64_t jj = oj * d.stride + kj - d.pad;
                        if (jj < 0 || jj >= d.W) continue;
                        dx[(c * d.H + ii) * d.W + jj] += row[oi * d.Wo + oj];
                    }
                }
            }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const auto& xs = x->val.shape;
    const auto& ws = w->val.shape;
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
        throw DimensionError("conv2d: expected x{B,Cin,H,W}, w{Cout,Cin,kh,kw}");
    ConvDims d;
    d.B = xs[0];
    d.Cin = xs[1];
    d.H = xs[2];
    d.W = xs[3];
    d.Cout = ws[0];
    d.kh = ws[2];
    d.kw = ws[3];
    d.stride = stride;
    d.pad = pad;
    d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
    if (b->val.numel() != d.Cout) throw DimensionError("conv2d: bias size mismatch");

    int64_t K = d.Cin * d.kh * d.kw, P = d.Ho * d.Wo;
    Arr out({d.B, d.Cout, d.Ho, d.Wo});
    std::vector<double> cols(static_cast<size_t>(K * P));
    CMapMat Wm(w->val.v.data(), d.Cout, K);
    for (int64_t i = 0; i < d.B; ++i) {
        im2col(x->val.v.data() + i * d.Cin * d.H * d.W, d, cols.data());
        CMapMat C(cols.data(), K, P);
        MapMat O(out.v.data() + i * d.Cout * P, d.Cout, P);
        O.noalias() = Wm * C;
        for (int64_t c = 0; c < d.Cout; ++c)
            O.row(c).array() += b->val.v[static_cast<size_t>(c)];
    }
    Var xv = x, wv = w, bv = b;
    auto n = make_node(std::move(out), {x, w, b}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        n->backprop = [wn, xv, wv, bv, d, K, P] {
            auto self = wn.lock();
            xv->ensure_grad();
            wv->ensure_grad();
            bv->ensure_grad();
            std::vector<double> cols(static_cast<size_t>(K * P));
            std::vector<double> dcols(static_cast<size_t>(K * P));
            CMapMat Wm(wv->val.v.data(), d.Cout, K);
            MapMat dW(wv->grad.v.data(), d.Cout, K);
            for (int64_t i = 0; i < d.B; ++i) {
                im2col(xv->val.v.data() + i * d.Cin * d.H * d.W, d, cols.data());
                CMapMat C(cols.data(), K, P);
                CMapMat G(self->grad.v.data() + i * d.Cout * P, d.Cout, P);
                dW.noalias() += G * C.transpose();
                MapMat dC(dcols.data(), K, P);
                dC.noalias() = Wm.transpose() * G;
                col2im_add(dcols.data(), d, xv->grad.v.data() + i * d.Cin * d.H * d.W);
                for (int64_t c = 0; c < d.Cout; ++c)
                    bv->grad.v[static_cast<size_t>(c)] += G.row(c).sum();
            }
        };
    }
    return n;
}

Var upsample2x(const Var& x) {
    const auto& s = x->val.shape;
    if (s.size() != 4) throw DimensionError("upsample2x: expected {B,C,H,W}");
    int64_t B = s[0], C = s[1], H = s[2], W = s[3];
    Arr out({B, C, 2 * H, 2 * W});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* src = x->val.v.data() + bc * H * W;
        double* dst = out.v.data() + bc * 4 * H * W;
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j) {
                double v = src[i * W + j];
                dst[(2 * i) * 2 * W + 2 * j] = v;
                dst[(2 * i) * 2 * W + 2 * j + 1] = v;
                dst[(2 * i + 1) * 2 * W + 2 * j] = v;
                dst[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
            }
    }
    Var xv = x;
    auto n = make_node(std::move(out), {x}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        n->backprop = [wn, xv, B, C, H, W] {
            auto self = wn.lock();
            xv->ensure_grad();
            for (int64_t bc = 0; bc < B * C; ++bc) {
                const double* g = self->grad.v.data() + bc * 4 * H * W;
                double* dst = xv->grad.v.data() + bc * H * W;
                for (int64_t i = 0; i < H; ++i)
                    for (int64_t j = 0; j < W; ++j)
                        dst[i * W + j] += g[(2 * i) * 2 * W + 2 * j] +
                                          g[(2 * i) * 2 * W + 2 * j + 1] +
                                          g[(2 * i + 1) * 2 * W + 2 * j] +
                                          g[(2 * i + 1) * 2 * W + 2 * j + 1];
            }
        };
    }
    return n;
}

Var mean_hw(const Var& x) {
    const auto& s = x->val.shape;
    if (s.size() != 4) throw DimensionError("mean_hw: expected {B,C,H,W}");
    int64_t B = s[0], C = s[1], HW = s[2] * s[3];
    Arr out({B, C});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* src = x->val.v.data() + bc * HW;
        double acc = 0.0;
        for (int64_t i = 0; i < HW; ++i) acc += src[i];
        out.v[static_cast<size_t>(bc)] = acc / HW;
    }
    Var xv = x;
    auto n = make_node(std::move(out), {x}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        n->backprop = [wn, xv, B, C, HW] {
            auto self = wn.lock();
            xv->ensure_grad();
            for (int64_t bc = 0; bc < B * C; ++bc) {
                double g = self->grad.v[static_cast<size_t>(bc)] / HW;
                double* dst = xv->grad.v.data() + bc * HW;
                for (int64_t i = 0; i < HW; ++i) dst[i] += g;
            }
        };
    }
    return n;
}

namespace {

// Smooth Rodrigues coefficients as functions of s = theta^2.
// g1(s) = sin(theta)/theta, g2(s) = (1-cos(theta))/theta^2.
double rod_g1(double s) {
    if (s < 1e-8) return 1.0 - s / 6.0 + s * s / 120.0;
    double t = std::sqrt(s);
    return std::sin(t) / t;
}
double rod_g2(double s) {
    if (s < 1e-8) return 0.5 - s / 24.0 + s * s / 720.0;
    double t = std::sqrt(s);
    return (1.0 - std::cos(t)) / s;
}
double rod_dg1(double s) {
    if (s < 1e-6) return -1.0 / 6.0 + s / 60.0 - s * s / 2520.0;
    double t = std::sqrt(s);
    return (t * std::cos(t) - std::sin(t)) / (2.0 * t * t * t);
}
double rod_dg2(double s) {
    if (s < 1e-6) return -1.0 / 24.0 + s / 360.0 - s * s / 13440.0;
    double t = std::sqrt(s);
    return (t * std::sin(t) / 2.0 - (1.0 - std::cos(t))) / (s * s);
}

void skew3(const double* a, double* K) {
    K[0] = 0;
    K[1] = -a[2];
    K[2] = a[1];
    K[3] = a[2];
    K[4] = 0;
    K[5] = -a[0];
    K[6] = -a[1];
    K[7] = a[0];
    K[8] = 0;
}

// dK/da_i as constant matrices.
const double kSkewBasis[3][9] = {
    {0, 0, 0, 0, 0, -1, 0, 1, 0},
    {0, 0, 1, 0, 0, 0, -1, 0, 0},
    {0, -1, 0, 1, 0, 0, 0, 0, 0},
};

}  // namespace

Var rodrigues(const Var& aa) {
    const auto& s = aa->val.shape;
    if (s.empty() || s.back() != 3) throw DimensionError("rodrigues: last extent must be 3");
    int64_t J = aa->val.numel() / 3;
    std::vector<int64_t> out_shape(s.begin(), s.end() - 1);
    out_shape.push_back(3);
    out_shape.push_back(3);
    Arr out(out_shape);
    for (int64_t j = 0; j < J; ++j) {
        const double* a = aa->val.v.data() + j * 3;
        double* R = out.v.data() + j * 9;
        double sq = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
        double g1 = rod_g1(sq), g2 = rod_g2(sq);
        double K[9], K2[9];
        skew3(a, K);
        Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> Km(K);
        Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> K2m(K2);
        K2m.noalias() = Km * Km;
        for (int i = 0; i < 9; ++i)
            R[i] = (i % 4 == 0 ? 1.0 : 0.0) + g1 * K[i] + g2 * K2[i];
    }
    Var av = aa;
    auto n = make_node(std::move(out), {aa}, nullptr);
    if (n->requires_grad) {
        std::weak_ptr<Node> wn = n;
        n->backprop = [wn, av, J] {
            auto self = wn.lock();
            av->ensure_grad();
            for (int64_t j = 0; j < J; ++j) {
                const double* a = av->val.v.data() + j * 3;
                const double* G = self->grad.v.data() + j * 9;
                double sq = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
                double g1 = rod_g1(sq), g2 = rod_g2(sq);
                double dg1 = rod_dg1(sq), dg2 = rod_dg2(sq);
                double K[9], K2[9];
                skew3(a, K);
                Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> Km(K);
                Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> K2m(K2);
                K2m.noalias() = Km * Km;
                double GdotK = 0.0, GdotK2 = 0.0;
                for (int i = 0; i < 9; ++i) {
                    GdotK += G[i] * K[i];
                    GdotK2 += G[i] * K2[i];
                }
                for (int c = 0; c < 3; ++c) {
                    const double* E = kSkewBasis[c];
                    // d(K^2)/da_c = E*K + K*E
                    double EK[9];
                    Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> Em(E);
                    Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> EKm(EK);
                    EKm.noalias() = Em * Km + Km * Em;
                    double term = 0.0;
                    for (int i = 0; i < 9; ++i) term += G[i] * (g1 * E[i] + g2 * EK[i]);
                    double ds = 2.0 * a[c];
                    av->grad.v[static_cast<size_t>(j * 3 + c)] +=
                        term + ds * (dg1 * GdotK + dg2 * GdotK2);
                }
            }
        };
    }
    return n;
}

void backward(const Var& root) {
    if (root->val.numel() != 1) throw DimensionError("backward: root must be scalar");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Var, size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, child_idx] = stack.back();
        if (child_idx < node->parents.size()) {
            Var next = node->parents[child_idx++];
            if (!seen.count(next.get())) {
                seen.insert(next.get());
                stack.emplace_back(next, 0);
            }
        } else {
            order.push_back(node.get());
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad.v[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && !n->grad.v.empty()) n->backprop();
    }
}

Var ParamBundle::add(const std::string& name, Arr init) {
    auto v = leaf(std::move(init), true);
    params[name] = v;
    return v;
}

Var ParamBundle::get(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw SchemaError("missing parameter: " + name);
    return it->second;
}

void ParamBundle::zero_grad() {
    for (auto& [_, p] : params) {
        p->grad = Arr();
        p->ensure_grad();
    }
}

int64_t ParamBundle::total_size() const {
    int64_t n = 0;
    for (const auto& [_, p] : params) n += p->val.numel();
    return n;
}

void ParamBundle::append_to(TensorStore& store, const std::string& prefix) const {
    for (const auto& [name, p] : params) store.put(prefix + name, p->val.to_tensor());
}

void ParamBundle::load_from(const TensorStore& store, const std::string& prefix) {
    for (auto& [name, p] : params) {
        const Tensor& t = store.get(prefix + name);
        if (t.shape != p->val.shape)
            throw SchemaError("parameter shape mismatch: " + prefix + name);
        p->val = Arr::from_tensor(t);
    }
}

void AdamState::step(ParamBundle& params, const AdamHyper& hyper) {
    ++t_;
    double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params.params) {
        p->ensure_grad();
        auto it = moments_.find(name);
        if (it == moments_.end())
            it = moments_.emplace(name, std::make_pair(Arr(p->val.shape), Arr(p->val.shape)))
                     .first;
        Arr& m = it->second.first;
        Arr& v = it->second.second;
        if (m.shape != p->val.shape)
            throw DimensionError("adam_step: moment shape mismatch for " + name);
        for (size_t i = 0; i < p->val.v.size(); ++i) {
            double g = p->grad.v[i];
            m.v[i] = hyper.beta1 * m.v[i] + (1.0 - hyper.beta1) * g;
            v.v[i] = hyper.beta2 * v.v[i] + (1.0 - hyper.beta2) * g * g;
            double mhat = m.v[i] / bc1;
            double vhat = v.v[i] / bc2;
            p->val.v[i] -= hyper.lr * (mhat / (std::sqrt(vhat) + hyper.eps) +
                                       hyper.weight_decay * p->val.v[i]);
        }
    }
}

Arr init_uniform_fanin(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    Arr a(std::move(shape));
    double bound = 1.0 / std::sqrt(static_cast<double>(std::max<int64_t>(fan_in, 1)));
    for (auto& x : a.v) x = rng.uniform(-bound, bound);
    return a;
}

Arr init_gaussian(std::vector<int64_t> shape, double std_dev, Rng& rng) {
    Arr a(std::move(shape));
    for (auto& x : a.v) x = rng.gaussian() * std_dev;
    return a;
}

GradCheckReport grad_check(const LossFn& loss_fn, ParamBundle& params, double epsilon,
                           double rel_tol, int64_t max_checks_per_param,
                           uint64_t subsample_seed) {
    if (epsilon < 1e-6 || epsilon > 1e-2)
        throw std::invalid_argument("grad_check: epsilon outside [1e-6, 1e-2]");

    params.zero_grad();
    double base = loss_fn(params, true);
    if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss");

    GradCheckReport report;
    Rng rng(subsample_seed ^ 0x6772616463686bULL);
    for (auto& [name, p] : params.params) {
        int64_t n = p->val.numel();
        std::vector<int64_t> idx;
        if (n <= max_checks_per_param) {
            for (int64_t i = 0; i < n; ++i) idx.push_back(i);
        } else {
            for (int64_t k = 0; k < max_checks_per_param; ++k)
                idx.push_back(rng.uniform_int(0, n - 1));
        }
        for (int64_t i : idx) {
            double saved = p->val.v[static_cast<size_t>(i)];
            p->val.v[static_cast<size_t>(i)] = saved + epsilon;
            double lp = loss_fn(params, false);
            p->val.v[static_cast<size_t>(i)] = saved - epsilon;
            double lm = loss_fn(params, false);
            p->val.v[static_cast<size_t>(i)] = saved;
            if (!std::isfinite(lp) || !std::isfinite(lm))
                throw NumericError("grad_check: non-finite perturbed loss");
            GradCheckEntry e;
            e.param = name;
            e.index = i;
            e.analytic = p->grad.v[static_cast<size_t>(i)];
            e.numeric = (lp - lm) / (2.0 * epsilon);
            e.rel_err = std::abs(e.analytic - e.numeric) /
                        std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-4});
            report.max_rel_err = std::max(report.max_rel_err, e.rel_err);
            report.entries.push_back(std::move(e));
        }
    }
    report.pass = report.max_rel_err <= rel_tol;
    return report;
}

}  // namespace hgen::ad
