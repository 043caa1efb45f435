#include "fpt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Core>
#include <fmt/format.h>

#include "fpt/errors.hpp"

namespace fpt {

using Buf = detail::FloatBuffer;

namespace {

using detail::TensorImpl;
using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

MatMap as_mat(Buf& v, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
    return MatMap(v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

ConstMatMap as_cmat(const Buf& v, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
    return ConstMatMap(v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

bool wants_grad(const TensorImpl* t) { return t != nullptr && t->requires_grad; }

/// Wraps freshly computed values as an op output, recording a graph node when
/// gradients are enabled and some input requires them.
Tensor record(Shape shape, Buf values, std::initializer_list<const Tensor*> inputs, const char* op,
              detail::BackwardFn backward) {
    auto out = Tensor::adopt(std::move(shape), std::move(values));
    if (!grad_enabled()) {
        return out;
    }
    bool any = false;
    for (const auto* in : inputs) {
        any = any || (in->defined() && in->requires_grad());
    }
    if (!any) {
        return out;
    }
    auto node = std::make_shared<detail::Node>();
    node->op = op;
    for (const auto* in : inputs) {
        if (in->defined()) {
            node->parents.push_back(in->impl_ptr());
        }
    }
    node->backward = std::move(backward);
    out.impl().requires_grad = true;
    out.impl().node = std::move(node);
    return out;
}

Tensor record_multi(Shape shape, Buf values, const std::vector<Tensor>& inputs, const char* op,
                    detail::BackwardFn backward) {
    auto out = Tensor::adopt(std::move(shape), std::move(values));
    if (!grad_enabled()) {
        return out;
    }
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (!any) {
        return out;
    }
    auto node = std::make_shared<detail::Node>();
    node->op = op;
    for (const auto& in : inputs) {
        node->parents.push_back(in.impl_ptr());
    }
    node->backward = std::move(backward);
    out.impl().requires_grad = true;
    out.impl().node = std::move(node);
    return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, shape_str(a.shape()), shape_str(b.shape())));
    }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.dim() != rank) {
        throw ShapeError(fmt::format("{}: expected rank {}, got shape {}", op, rank, shape_str(t.shape())));
    }
}

template <typename F, typename D>
Tensor unary(const Tensor& x, const char* op, F value, D derivative) {
    const auto& xs = x.impl().data;
    Buf out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out[i] = value(xs[i]);
    }
    TensorImpl* px = &x.impl();
    return record(x.shape(), std::move(out), {&x}, op, [px, derivative](TensorImpl& o) {
        auto g = detail::grad_buffer(*px);
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += o.grad[i] * derivative(px->data[i], o.data[i]);
        }
    });
}

}  // namespace

Mask Mask::causal(std::size_t length) {
    Mask m{length, length, std::vector<std::uint8_t>(length * length, 0)};
    for (std::size_t r = 0; r < length; ++r) {
        for (std::size_t c = 0; c <= r; ++c) {
            m.allowed[r * length + c] = 1;
        }
    }
    return m;
}

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
    if (b.size(0) != k) {
        throw ShapeError(fmt::format("matmul: inner dimensions disagree, {} x {}", shape_str(a.shape()),
                                     shape_str(b.shape())));
    }
    Buf out(m * n);
    as_mat(out, m, n).noalias() = as_cmat(a.impl().data, m, k) * as_cmat(b.impl().data, k, n);
    TensorImpl* pa = &a.impl();
    TensorImpl* pb = &b.impl();
    return record({m, n}, std::move(out), {&a, &b}, "matmul", [pa, pb, m, k, n](TensorImpl& o) {
        auto dy = as_cmat(o.grad, m, n);
        if (wants_grad(pa)) {
            detail::grad_buffer(*pa);
            as_mat(pa->grad, m, k).noalias() += dy * as_cmat(pb->data, k, n).transpose();
        }
        if (wants_grad(pb)) {
            detail::grad_buffer(*pb);
            as_mat(pb->grad, k, n).noalias() += as_cmat(pa->data, m, k).transpose() * dy;
        }
    });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    require_rank(a, 3, "bmm");
    require_rank(b, 3, "bmm");
    const std::size_t batch = a.size(0);
    if (b.size(0) != batch) {
        throw ShapeError(fmt::format("bmm: batch mismatch {} vs {}", shape_str(a.shape()), shape_str(b.shape())));
    }
    const std::size_t ar = a.size(1), ac = a.size(2), br = b.size(1), bc = b.size(2);
    const std::size_t m = ta ? ac : ar, k = ta ? ar : ac;
    const std::size_t k2 = tb ? bc : br, n = tb ? br : bc;
    if (k != k2) {
        throw ShapeError(fmt::format("bmm: inner dimensions disagree, {} x {}", shape_str(a.shape()),
                                     shape_str(b.shape())));
    }
    Buf out(batch * m * n);
    const auto& ad = a.impl().data;
    const auto& bd = b.impl().data;
    for (std::size_t i = 0; i < batch; ++i) {
        auto am = as_cmat(ad, ar, ac, i * ar * ac);
        auto bm = as_cmat(bd, br, bc, i * br * bc);
        auto om = as_mat(out, m, n, i * m * n);
        if (!ta && !tb) {
            om.noalias() = am * bm;
        } else if (!ta && tb) {
            om.noalias() = am * bm.transpose();
        } else if (ta && !tb) {
            om.noalias() = am.transpose() * bm;
        } else {
            om.noalias() = am.transpose() * bm.transpose();
        }
    }
    TensorImpl* pa = &a.impl();
    TensorImpl* pb = &b.impl();
    return record({batch, m, n}, std::move(out), {&a, &b}, "bmm",
                  [pa, pb, batch, ar, ac, br, bc, m, n, ta, tb](TensorImpl& o) {
                      const bool ga = wants_grad(pa), gb = wants_grad(pb);
                      if (ga) {
                          detail::grad_buffer(*pa);
                      }
                      if (gb) {
                          detail::grad_buffer(*pb);
                      }
                      for (std::size_t i = 0; i < batch; ++i) {
                          auto dy = as_cmat(o.grad, m, n, i * m * n);
                          auto am = as_cmat(pa->data, ar, ac, i * ar * ac);
                          auto bm = as_cmat(pb->data, br, bc, i * br * bc);
                          // Y = opA(A) opB(B); dopA = dY opB(B)^T, dopB = opA(A)^T dY.
                          if (ga) {
                              auto da = as_mat(pa->grad, ar, ac, i * ar * ac);
                              if (!ta && !tb) {
                                  da.noalias() += dy * bm.transpose();
                              } else if (!ta && tb) {
                                  da.noalias() += dy * bm;
                              } else if (ta && !tb) {
                                  da.noalias() += bm * dy.transpose();
                              } else {
                                  da.noalias() += bm.transpose() * dy.transpose();
                              }
                          }
                          if (gb) {
                              auto db = as_mat(pb->grad, br, bc, i * br * bc);
                              if (!ta && !tb) {
                                  db.noalias() += am.transpose() * dy;
                              } else if (!ta && tb) {
                                  db.noalias() += dy.transpose() * am;
                              } else if (ta && !tb) {
                                  db.noalias() += am * dy;
                              } else {
                                  db.noalias() += dy.transpose() * am.transpose();
                              }
                          }
                      }
                  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    require_rank(w, 2, "linear");
    if (x.dim() < 1 || x.shape().back() != w.size(0)) {
        throw ShapeError(fmt::format("linear: input {} does not match weight {}", shape_str(x.shape()),
                                     shape_str(w.shape())));
    }
    const std::size_t in = w.size(0), outd = w.size(1);
    if (bias.defined() && (bias.dim() != 1 || bias.size(0) != outd)) {
        throw ShapeError(fmt::format("linear: bias {} does not match weight {}", shape_str(bias.shape()),
                                     shape_str(w.shape())));
    }
    const std::size_t rows = x.numel() / in;
    Buf out(rows * outd);
    auto om = as_mat(out, rows, outd);
    om.noalias() = as_cmat(x.impl().data, rows, in) * as_cmat(w.impl().data, in, outd);
    if (bias.defined()) {
        om.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias.impl().data.data(), static_cast<Eigen::Index>(outd));
    }
    Shape shape = x.shape();
    shape.back() = outd;
    TensorImpl* px = &x.impl();
    TensorImpl* pw = &w.impl();
    TensorImpl* pb = bias.defined() ? &bias.impl() : nullptr;
    return record(std::move(shape), std::move(out), {&x, &w, &bias}, "linear",
                  [px, pw, pb, rows, in, outd](TensorImpl& o) {
                      auto dy = as_cmat(o.grad, rows, outd);
                      if (wants_grad(px)) {
                          detail::grad_buffer(*px);
                          as_mat(px->grad, rows, in).noalias() += dy * as_cmat(pw->data, in, outd).transpose();
                      }
                      if (wants_grad(pw)) {
                          detail::grad_buffer(*pw);
                          as_mat(pw->grad, in, outd).noalias() += as_cmat(px->data, rows, in).transpose() * dy;
                      }
                      if (wants_grad(pb)) {
                          detail::grad_buffer(*pb);
                          Eigen::Map<Eigen::RowVectorXf>(pb->grad.data(), static_cast<Eigen::Index>(outd)) +=
                              dy.colwise().sum();
                      }
                  });
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Buf out(a.numel());
    const auto& ad = a.impl().data;
    const auto& bd = b.impl().data;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ad[i] + bd[i];
    }
    TensorImpl* pa = &a.impl();
    TensorImpl* pb = &b.impl();
    return record(a.shape(), std::move(out), {&a, &b}, "add", [pa, pb](TensorImpl& o) {
        for (auto* p : {pa, pb}) {
            if (wants_grad(p)) {
                auto g = detail::grad_buffer(*p);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += o.grad[i];
                }
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Buf out(a.numel());
    const auto& ad = a.impl().data;
    const auto& bd = b.impl().data;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ad[i] - bd[i];
    }
    TensorImpl* pa = &a.impl();
    TensorImpl* pb = &b.impl();
    return record(a.shape(), std::move(out), {&a, &b}, "sub", [pa, pb](TensorImpl& o) {
        if (wants_grad(pa)) {
            auto g = detail::grad_buffer(*pa);
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += o.grad[i];
            }
        }
        if (wants_grad(pb)) {
            auto g = detail::grad_buffer(*pb);
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] -= o.grad[i];
            }
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Buf out(a.numel());
    const auto& ad = a.impl().data;
    const auto& bd = b.impl().data;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ad[i] * bd[i];
    }
    TensorImpl* pa = &a.impl();
    TensorImpl* pb = &b.impl();
    return record(a.shape(), std::move(out), {&a, &b}, "mul", [pa, pb](TensorImpl& o) {
        if (wants_grad(pa)) {
            auto g = detail::grad_buffer(*pa);
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += o.grad[i] * pb->data[i];
            }
        }
        if (wants_grad(pb)) {
            auto g = detail::grad_buffer(*pb);
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += o.grad[i] * pa->data[i];
            }
        }
    });
}

Tensor add_bias(const Tensor& x, const Tensor& v) {
    if (v.dim() != 1 || x.dim() < 1 || x.shape().back() != v.size(0)) {
        throw ShapeError(fmt::format("add_bias: {} + {}", shape_str(x.shape()), shape_str(v.shape())));
    }
    const std::size_t n = v.size(0), rows = x.numel() / n;
    Buf out(x.impl().data);
    const auto& vd = v.impl().data;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) {
            out[r * n + j] += vd[j];
        }
    }
    TensorImpl* px = &x.impl();
    TensorImpl* pv = &v.impl();
    return record(x.shape(), std::move(out), {&x, &v}, "add_bias", [px, pv, rows, n](TensorImpl& o) {
        if (wants_grad(px)) {
            auto g = detail::grad_buffer(*px);
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += o.grad[i];
            }
        }
        if (wants_grad(pv)) {
            auto g = detail::grad_buffer(*pv);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < n; ++j) {
                    g[j] += o.grad[r * n + j];
                }
            }
        }
    });
}

Tensor scale(const Tensor& x, float s) {
    return unary(x, "scale", [s](float v) { return v * s; }, [s](float, float) { return s; });
}

Tensor add_scalar(const Tensor& x, float s) {
    return unary(x, "add_scalar", [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0f); }

Tensor tanh(const Tensor& x) {
    return unary(x, "tanh", [](float v) { return std::tanh(v); }, [](float, float y) { return 1.0f - y * y; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        x, "sigmoid", [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
        [](float, float y) { return y * (1.0f - y); });
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

float gelu_value(float x) { return 0.5f * x * (1.0f + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

Tensor gelu(const Tensor& x) {
    return unary(x, "gelu", gelu_value, [](float v, float) {
        const float t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        return 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * kGeluC * (1.0f + 3.0f * kGeluA * v * v);
    });
}

Tensor lstm_cell(const Tensor& gates, const Tensor& c_prev) {
    require_rank(gates, 2, "lstm_cell");
    require_rank(c_prev, 2, "lstm_cell");
    const std::size_t b = gates.size(0), n = c_prev.size(1);
    if (gates.size(1) != 4 * n || c_prev.size(0) != b) {
        throw ShapeError(fmt::format("lstm_cell: gates {} with cell state {}", shape_str(gates.shape()),
                                     shape_str(c_prev.shape())));
    }
    const auto& gd = gates.impl().data;
    const auto& cd = c_prev.impl().data;
    // act holds sigmoid(i), sigmoid(f), tanh(g), sigmoid(o), tanh(c) per row.
    auto act = std::make_shared<Buf>(b * 5 * n);
    Buf out(b * 2 * n);
    auto sig = [](float v) { return 1.0f / (1.0f + std::exp(-v)); };
    for (std::size_t r = 0; r < b; ++r) {
        const float* g = gd.data() + r * 4 * n;
        float* a = act->data() + r * 5 * n;
        for (std::size_t j = 0; j < n; ++j) {
            const float i = sig(g[j]), f = sig(g[n + j]), gg = std::tanh(g[2 * n + j]), o = sig(g[3 * n + j]);
            const float c = f * cd[r * n + j] + i * gg;
            const float tc = std::tanh(c);
            a[j] = i;
            a[n + j] = f;
            a[2 * n + j] = gg;
            a[3 * n + j] = o;
            a[4 * n + j] = tc;
            out[r * 2 * n + j] = o * tc;
            out[r * 2 * n + n + j] = c;
        }
    }
    TensorImpl* pg = &gates.impl();
    TensorImpl* pc = &c_prev.impl();
    return record({b, 2 * n}, std::move(out), {&gates, &c_prev}, "lstm_cell", [pg, pc, act, b, n](TensorImpl& o) {
        const bool gg_on = wants_grad(pg), gc_on = wants_grad(pc);
        std::span<float> dg, dc;
        if (gg_on) {
            dg = detail::grad_buffer(*pg);
        }
        if (gc_on) {
            dc = detail::grad_buffer(*pc);
        }
        for (std::size_t r = 0; r < b; ++r) {
            const float* a = act->data() + r * 5 * n;
            const float* dy = o.grad.data() + r * 2 * n;
            for (std::size_t j = 0; j < n; ++j) {
                const float i = a[j], f = a[n + j], g = a[2 * n + j], og = a[3 * n + j], tc = a[4 * n + j];
                const float dh = dy[j];
                const float dcell = dy[n + j] + dh * og * (1.0f - tc * tc);
                if (gg_on) {
                    float* d = dg.data() + r * 4 * n;
                    d[j] += dcell * g * i * (1.0f - i);
                    d[n + j] += dcell * pc->data[r * n + j] * f * (1.0f - f);
                    d[2 * n + j] += dcell * i * (1.0f - g * g);
                    d[3 * n + j] += dh * tc * og * (1.0f - og);
                }
                if (gc_on) {
                    dc[r * n + j] += dcell * f;
                }
            }
        }
    });
}

// ---------------------------------------------------------------- softmax / layer norm

Tensor softmax_rows(const Tensor& x, const Mask* mask) {
    if (x.dim() < 1) {
        throw ShapeError("softmax_rows: scalar input");
    }
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    std::size_t mask_rows = 1;
    if (mask != nullptr) {
        if (x.dim() < 2 || mask->cols != n || mask->rows != x.shape()[x.dim() - 2]) {
            throw ShapeError(fmt::format("softmax_rows: mask {}x{} does not fit input {}", mask->rows, mask->cols,
                                         shape_str(x.shape())));
        }
        mask_rows = mask->rows;
    }
    const auto& xd = x.impl().data;
    Buf out(xd.size(), 0.0f);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* in = xd.data() + r * n;
        float* y = out.data() + r * n;
        const std::uint8_t* allow = mask ? mask->allowed.data() + (r % mask_rows) * n : nullptr;
        float mx = -std::numeric_limits<float>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (!allow || allow[j]) {
                mx = std::max(mx, in[j]);
                any = true;
            }
        }
        if (!any) {
            throw MaskError(fmt::format("softmax_rows: row {} has every position masked", r));
        }
        float total = 0.0f;
        for (std::size_t j = 0; j < n; ++j) {
            if (!allow || allow[j]) {
                y[j] = std::exp(in[j] - mx);
                total += y[j];
            }
        }
        const float inv = 1.0f / total;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] *= inv;
        }
    }
    TensorImpl* px = &x.impl();
    return record(x.shape(), std::move(out), {&x}, "softmax_rows", [px, rows, n](TensorImpl& o) {
        auto g = detail::grad_buffer(*px);
        for (std::size_t r = 0; r < rows; ++r) {
            const float* y = o.data.data() + r * n;
            const float* dy = o.grad.data() + r * n;
            float dot = 0.0f;
            for (std::size_t j = 0; j < n; ++j) {
                dot += y[j] * dy[j];
            }
            float* dx = g.data() + r * n;
            for (std::size_t j = 0; j < n; ++j) {
                dx[j] += y[j] * (dy[j] - dot);
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    if (gamma.dim() != 1 || beta.shape() != gamma.shape() || x.dim() < 1 || x.shape().back() != gamma.size(0)) {
        throw ShapeError(fmt::format("layer_norm: input {} with gamma {} and beta {}", shape_str(x.shape()),
                                     shape_str(gamma.shape()), shape_str(beta.shape())));
    }
    const std::size_t n = gamma.size(0), rows = x.numel() / n;
    const auto& xd = x.impl().data;
    const auto& gd = gamma.impl().data;
    const auto& bd = beta.impl().data;
    Buf out(xd.size());
    auto xhat = std::make_shared<Buf>(xd.size());
    auto rstd = std::make_shared<Buf>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* in = xd.data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            mu += in[j];
        }
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = in[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = static_cast<float>(rs);
        for (std::size_t j = 0; j < n; ++j) {
            const auto h = static_cast<float>((in[j] - mu) * rs);
            (*xhat)[r * n + j] = h;
            out[r * n + j] = gd[j] * h + bd[j];
        }
    }
    TensorImpl* px = &x.impl();
    TensorImpl* pg = &gamma.impl();
    TensorImpl* pb = &beta.impl();
    return record(x.shape(), std::move(out), {&x, &gamma, &beta}, "layer_norm",
                  [px, pg, pb, xhat, rstd, rows, n](TensorImpl& o) {
                      const bool gx = wants_grad(px), gg = wants_grad(pg), gb = wants_grad(pb);
                      std::span<float> dx, dg, db;
                      if (gx) {
                          dx = detail::grad_buffer(*px);
                      }
                      if (gg) {
                          dg = detail::grad_buffer(*pg);
                      }
                      if (gb) {
                          db = detail::grad_buffer(*pb);
                      }
                      const double inv_n = 1.0 / static_cast<double>(n);
                      for (std::size_t r = 0; r < rows; ++r) {
                          const float* dy = o.grad.data() + r * n;
                          const float* h = xhat->data() + r * n;
                          if (gg || gb) {
                              for (std::size_t j = 0; j < n; ++j) {
                                  if (gg) {
                                      dg[j] += dy[j] * h[j];
                                  }
                                  if (gb) {
                                      db[j] += dy[j];
                                  }
                              }
                          }
                          if (gx) {
                              double mean_dh = 0.0, mean_dh_h = 0.0;
                              for (std::size_t j = 0; j < n; ++j) {
                                  const double dh = static_cast<double>(dy[j]) * pg->data[j];
                                  mean_dh += dh;
                                  mean_dh_h += dh * h[j];
                              }
                              mean_dh *= inv_n;
                              mean_dh_h *= inv_n;
                              const double rs = (*rstd)[r];
                              for (std::size_t j = 0; j < n; ++j) {
                                  const double dh = static_cast<double>(dy[j]) * pg->data[j];
                                  dx[r * n + j] += static_cast<float>(rs * (dh - mean_dh - h[j] * mean_dh_h));
                              }
                          }
                      }
                  });
}

// ---------------------------------------------------------------- shape manipulation

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError(fmt::format("reshape: {} to {}", shape_str(x.shape()), shape_str(shape)));
    }
    TensorImpl* px = &x.impl();
    return record(std::move(shape), x.impl().data, {&x}, "reshape", [px](TensorImpl& o) {
        auto g = detail::grad_buffer(*px);
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += o.grad[i];
        }
    });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
    const auto& in_shape = x.shape();
    const std::size_t rank = in_shape.size();
    if (order.size() != rank) {
        throw ShapeError(fmt::format("permute: order of length {} for shape {}", order.size(), shape_str(in_shape)));
    }
    std::vector<bool> seen(rank, false);
    for (auto a : order) {
        if (a >= rank || seen[a]) {
            throw ShapeError("permute: order is not a permutation");
        }
        seen[a] = true;
    }
    std::vector<std::size_t> in_stride(rank, 1);
    for (std::size_t i = rank; i-- > 1;) {
        in_stride[i - 1] = in_stride[i] * in_shape[i];
    }
    Shape out_shape(rank);
    std::vector<std::size_t> src_stride(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = in_shape[order[i]];
        src_stride[i] = in_stride[order[i]];
    }
    const std::size_t total = x.numel();
    // map[i] = source offset of output element i
    auto map = std::make_shared<std::vector<std::size_t>>(total);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t i = 0; i < total; ++i) {
        (*map)[i] = src;
        for (std::size_t ax = rank; ax-- > 0;) {
            ++idx[ax];
            src += src_stride[ax];
            if (idx[ax] < out_shape[ax]) {
                break;
            }
            src -= src_stride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    const auto& xd = x.impl().data;
    Buf out(total);
    for (std::size_t i = 0; i < total; ++i) {
        out[i] = xd[(*map)[i]];
    }
    TensorImpl* px = &x.impl();
    return record(std::move(out_shape), std::move(out), {&x}, "permute", [px, map](TensorImpl& o) {
        auto g = detail::grad_buffer(*px);
        for (std::size_t i = 0; i < map->size(); ++i) {
            g[(*map)[i]] += o.grad[i];
        }
    });
}

Tensor transpose(const Tensor& x) {
    require_rank(x, 2, "transpose");
    return permute(x, {1, 0});
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) {
        throw ShapeError("concat: no inputs");
    }
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) {
        throw ShapeError(fmt::format("concat: axis {} out of range for {}", axis, shape_str(first)));
    }
    std::size_t outer = 1, inner = 1, total_axis = 0;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= first[i];
    }
    for (std::size_t i = axis + 1; i < first.size(); ++i) {
        inner *= first[i];
    }
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) {
            ok = i == axis || s[i] == first[i];
        }
        if (!ok) {
            throw ShapeError(fmt::format("concat: {} incompatible with {} on axis {}", shape_str(s), shape_str(first),
                                         axis));
        }
        widths.push_back(s[axis] * inner);
        total_axis += s[axis];
    }
    const std::size_t row = total_axis * inner;
    Buf out(outer * row);
    std::size_t col = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& d = parts[p].impl().data;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(d.data() + o * widths[p], widths[p], out.data() + o * row + col);
        }
        col += widths[p];
    }
    Shape shape = first;
    shape[axis] = total_axis;
    std::vector<TensorImpl*> ps;
    for (const auto& p : parts) {
        ps.push_back(&p.impl());
    }
    return record_multi(std::move(shape), std::move(out), parts, "concat", [ps, widths, outer, row](TensorImpl& o) {
        std::size_t c = 0;
        for (std::size_t p = 0; p < ps.size(); ++p) {
            if (wants_grad(ps[p])) {
                auto g = detail::grad_buffer(*ps[p]);
                for (std::size_t r = 0; r < outer; ++r) {
                    for (std::size_t j = 0; j < widths[p]; ++j) {
                        g[r * widths[p] + j] += o.grad[r * row + c + j];
                    }
                }
            }
            c += widths[p];
        }
    });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    const Shape& s = x.shape();
    if (axis >= s.size() || start + length > s[axis]) {
        throw ShapeError(fmt::format("slice: [{}, {}) on axis {} of {}", start, start + length, axis, shape_str(s)));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= s[i];
    }
    for (std::size_t i = axis + 1; i < s.size(); ++i) {
        inner *= s[i];
    }
    const std::size_t src_row = s[axis] * inner, dst_row = length * inner, off = start * inner;
    const auto& xd = x.impl().data;
    Buf out(outer * dst_row);
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(xd.data() + o * src_row + off, dst_row, out.data() + o * dst_row);
    }
    Shape shape = s;
    shape[axis] = length;
    TensorImpl* px = &x.impl();
    return record(std::move(shape), std::move(out), {&x}, "slice",
                  [px, outer, src_row, dst_row, off](TensorImpl& o) {
                      auto g = detail::grad_buffer(*px);
                      for (std::size_t r = 0; r < outer; ++r) {
                          for (std::size_t j = 0; j < dst_row; ++j) {
                              g[r * src_row + off + j] += o.grad[r * dst_row + j];
                          }
                      }
                  });
}

Tensor index_rows(const Tensor& x, std::span<const std::size_t> rows) {
    if (x.dim() < 1) {
        throw ShapeError("index_rows: scalar input");
    }
    const std::size_t d = x.shape().back(), n = x.numel() / d;
    const auto& xd = x.impl().data;
    Buf out(rows.size() * d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= n) {
            throw ShapeError(fmt::format("index_rows: row {} out of range for {} rows", rows[i], n));
        }
        std::copy_n(xd.data() + rows[i] * d, d, out.data() + i * d);
    }
    TensorImpl* px = &x.impl();
    auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
    return record({rows.size(), d}, std::move(out), {&x}, "index_rows", [px, idx, d](TensorImpl& o) {
        auto g = detail::grad_buffer(*px);
        for (std::size_t i = 0; i < idx->size(); ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                g[(*idx)[i] * d + j] += o.grad[i * d + j];
            }
        }
    });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
    require_rank(table, 2, "embedding");
    return index_rows(table, ids);
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (float v : x.impl().data) {
        total += v;
    }
    TensorImpl* px = &x.impl();
    return record({1}, {static_cast<float>(total)}, {&x}, "sum", [px](TensorImpl& o) {
        auto g = detail::grad_buffer(*px);
        for (auto& v : g) {
            v += o.grad[0];
        }
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0f / static_cast<float>(x.numel())); }

Tensor sum_last(const Tensor& x) {
    if (x.dim() < 1) {
        throw ShapeError("sum_last: scalar input");
    }
    const std::size_t n = x.shape().back(), rows = x.numel() / n;
    const auto& xd = x.impl().data;
    Buf out(rows, 0.0f);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) {
            out[r] += xd[r * n + j];
        }
    }
    Shape shape(x.shape().begin(), x.shape().end() - 1);
    if (shape.empty()) {
        shape = {1};
    }
    TensorImpl* px = &x.impl();
    return record(std::move(shape), std::move(out), {&x}, "sum_last", [px, rows, n](TensorImpl& o) {
        auto g = detail::grad_buffer(*px);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
                g[r * n + j] += o.grad[r];
            }
        }
    });
}

// ---------------------------------------------------------------- losses

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    require_rank(logits, 2, "cross_entropy");
    const std::size_t n = logits.size(0), c = logits.size(1);
    if (labels.size() != n) {
        throw ShapeError(fmt::format("cross_entropy: {} labels for logits {}", labels.size(), shape_str(logits.shape())));
    }
    const auto& z = logits.impl().data;
    auto probs = std::make_shared<Buf>(n * c);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
            throw ShapeError(fmt::format("cross_entropy: label {} outside [0, {})", labels[i], c));
        }
        const float* row = z.data() + i * c;
        const float mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const float e = std::exp(row[j] - mx);
            (*probs)[i * c + j] = e;
            s += e;
        }
        for (std::size_t j = 0; j < c; ++j) {
            (*probs)[i * c + j] = static_cast<float>((*probs)[i * c + j] / s);
        }
        total += -(static_cast<double>(row[labels[i]]) - mx - std::log(s));
    }
    TensorImpl* pz = &logits.impl();
    auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
    return record({1}, {static_cast<float>(total / static_cast<double>(n))}, {&logits}, "cross_entropy",
                  [pz, probs, lab, n, c](TensorImpl& o) {
                      auto g = detail::grad_buffer(*pz);
                      const float s = o.grad[0] / static_cast<float>(n);
                      for (std::size_t i = 0; i < n; ++i) {
                          for (std::size_t j = 0; j < c; ++j) {
                              const float target = static_cast<int>(j) == (*lab)[i] ? 1.0f : 0.0f;
                              g[i * c + j] += s * ((*probs)[i * c + j] - target);
                          }
                      }
                  });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const float> targets) {
    const std::size_t n = logits.numel();
    if (targets.size() != n) {
        throw ShapeError(fmt::format("bce_with_logits: {} targets for logits {}", targets.size(),
                                     shape_str(logits.shape())));
    }
    const auto& z = logits.impl().data;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = z[i];
        total += std::max(v, 0.0) - v * targets[i] + std::log1p(std::exp(-std::abs(v)));
    }
    TensorImpl* pz = &logits.impl();
    auto t = std::make_shared<Buf>(targets.begin(), targets.end());
    return record({1}, {static_cast<float>(total / static_cast<double>(n))}, {&logits}, "bce_with_logits",
                  [pz, t, n](TensorImpl& o) {
                      auto g = detail::grad_buffer(*pz);
                      const float s = o.grad[0] / static_cast<float>(n);
                      for (std::size_t i = 0; i < n; ++i) {
                          const float p = 1.0f / (1.0f + std::exp(-pz->data[i]));
                          g[i] += s * (p - (*t)[i]);
                      }
                  });
}

// ---------------------------------------------------------------- dropout

Tensor dropout(const Tensor& x, float p, bool train, Rng& rng) {
    if (!train || p <= 0.0f) {
        return x;
    }
    const std::size_t n = x.numel();
    auto keep = std::make_shared<Buf>(n, 0.0f);
    const float s = p >= 1.0f ? 0.0f : 1.0f / (1.0f - p);
    const auto& xd = x.impl().data;
    Buf out(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!rng.bernoulli(p)) {
            (*keep)[i] = s;
        }
        out[i] = xd[i] * (*keep)[i];
    }
    TensorImpl* px = &x.impl();
    return record(x.shape(), std::move(out), {&x}, "dropout", [px, keep](TensorImpl& o) {
        auto g = detail::grad_buffer(*px);
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += o.grad[i] * (*keep)[i];
        }
    });
}

}  // namespace fpt
