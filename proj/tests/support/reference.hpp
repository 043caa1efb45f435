#pragma once

// Double-precision reference implementations, written from the definitions
// without the autodiff machinery. Used as the function side of finite
// difference checks, where float rounding would swamp an h = 1e-3 quotient.

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fd_check.hpp"
#include "fpt/model.hpp"

namespace fpt::testing::ref {

using Vec = std::vector<double>;

inline Vec from(const Tensor& t) {
    const auto d = t.data();
    return Vec(d.begin(), d.end());
}

inline Vec from(const std::vector<float>& v) { return Vec(v.begin(), v.end()); }

/// [m,k] x [k,n]
inline Vec matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t n) {
    Vec c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            for (std::size_t j = 0; j < n; ++j) {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    return c;
}

/// Batched product of op(a) [m,k] and op(b) [k,n]; a is stored [k,m] when
/// ta, b is stored [n,k] when tb.
inline Vec bmm(const Vec& a, const Vec& b, std::size_t batch, std::size_t m, std::size_t k, std::size_t n, bool ta,
               bool tb) {
    Vec c(batch * m * n, 0.0);
    for (std::size_t s = 0; s < batch; ++s) {
        const double* pa = a.data() + s * m * k;
        const double* pb = b.data() + s * k * n;
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) {
                    const double x = ta ? pa[p * m + i] : pa[i * k + p];
                    const double y = tb ? pb[j * k + p] : pb[p * n + j];
                    acc += x * y;
                }
                c[s * m * n + i * n + j] = acc;
            }
        }
    }
    return c;
}

inline Vec linear(const Vec& x, std::size_t rows, std::size_t k, const Vec& w, std::size_t n, const Vec& bias = {}) {
    Vec y = matmul(x, w, rows, k, n);
    if (!bias.empty()) {
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
                y[r * n + j] += bias[j];
            }
        }
    }
    return y;
}

inline Vec layer_norm(const Vec& x, std::size_t rows, std::size_t n, const Vec& g, const Vec& b, double eps = 1e-5) {
    Vec y(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += x[r * n + j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (x[r * n + j] - mu) * (x[r * n + j] - mu);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            y[r * n + j] = (x[r * n + j] - mu) * inv * g[j] + b[j];
        }
    }
    return y;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

inline double gelu(double v) {
    const double c = std::sqrt(2.0 / M_PI);
    return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
}

inline Vec map(const Vec& x, const std::function<double(double)>& f) {
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    return y;
}

/// Gate order i, f, g, o; returns [h | c] per row.
inline Vec lstm_cell(const Vec& gates, const Vec& c_prev, std::size_t b, std::size_t n) {
    Vec out(b * 2 * n);
    for (std::size_t r = 0; r < b; ++r) {
        const double* g = gates.data() + r * 4 * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double c = sigmoid(g[n + j]) * c_prev[r * n + j] + sigmoid(g[j]) * std::tanh(g[2 * n + j]);
            out[r * 2 * n + j] = sigmoid(g[3 * n + j]) * std::tanh(c);
            out[r * 2 * n + n + j] = c;
        }
    }
    return out;
}

/// Row softmax over [mats, l, cols]; with `causal`, row i of each matrix only
/// sees columns <= i and the rest are 0.
inline Vec softmax_rows(const Vec& x, std::size_t rows, std::size_t cols, bool causal = false) {
    Vec y(x.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t visible = causal ? (r % cols) + 1 : cols;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < visible; ++j) mx = std::max(mx, x[r * cols + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < visible; ++j) s += std::exp(x[r * cols + j] - mx);
        for (std::size_t j = 0; j < visible; ++j) y[r * cols + j] = std::exp(x[r * cols + j] - mx) / s;
    }
    return y;
}

inline double cross_entropy(const Vec& z, std::size_t n, std::size_t c, const std::vector<int>& labels) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(z[i * c + j]);
        total += std::log(s) - z[i * c + static_cast<std::size_t>(labels[i])];
    }
    return total / static_cast<double>(n);
}

inline double bce_with_logits(const Vec& z, const std::vector<float>& t) {
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double p = sigmoid(z[i]);
        total += -(t[i] * std::log(p) + (1.0 - t[i]) * std::log(1.0 - p));
    }
    return total / static_cast<double>(z.size());
}

using Params = std::map<std::string, Vec>;

/// Logits of a dropout-free model, same layout as Model::forward.
inline Vec model_forward(const Params& p, const ModelSpec& spec, const Batch& batch) {
    const std::size_t B = batch.size, l = batch.length, n = spec.n_dim, rows = B * l;
    Vec x = linear(from(batch.tokens), rows, batch.d_in, p.at("input.weight"), n, p.at("input.bias"));
    if (spec.has_positions()) {
        const auto& pos = p.at("positions");
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) x[r * n + j] += pos[(r % l) * n + j];
        }
    }
    if (spec.family == Family::transformer) {
        const std::size_t H = spec.n_heads, dk = n / H;
        for (std::size_t layer = 0; layer < spec.n_layers; ++layer) {
            const std::string pre = "blocks." + std::to_string(layer) + ".";
            Vec h = layer_norm(x, rows, n, p.at(pre + "ln1.gamma"), p.at(pre + "ln1.beta"));
            Vec qkv = linear(h, rows, n, p.at(pre + "attn.qkv.weight"), 3 * n, p.at(pre + "attn.qkv.bias"));
            Vec merged(rows * n, 0.0);
            for (std::size_t e = 0; e < B; ++e) {
                for (std::size_t hd = 0; hd < H; ++hd) {
                    Vec scores(l * l);
                    for (std::size_t i = 0; i < l; ++i) {
                        for (std::size_t j = 0; j < l; ++j) {
                            double s = 0.0;
                            for (std::size_t d = 0; d < dk; ++d) {
                                s += qkv[(e * l + i) * 3 * n + hd * dk + d] * qkv[(e * l + j) * 3 * n + n + hd * dk + d];
                            }
                            scores[i * l + j] = s / std::sqrt(static_cast<double>(dk));
                        }
                    }
                    const Vec a = softmax_rows(scores, l, l, true);
                    for (std::size_t i = 0; i < l; ++i) {
                        for (std::size_t d = 0; d < dk; ++d) {
                            double s = 0.0;
                            for (std::size_t j = 0; j < l; ++j) {
                                s += a[i * l + j] * qkv[(e * l + j) * 3 * n + 2 * n + hd * dk + d];
                            }
                            merged[(e * l + i) * n + hd * dk + d] = s;
                        }
                    }
                }
            }
            const Vec attn = linear(merged, rows, n, p.at(pre + "attn.proj.weight"), n, p.at(pre + "attn.proj.bias"));
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += attn[i];
            h = layer_norm(x, rows, n, p.at(pre + "ln2.gamma"), p.at(pre + "ln2.beta"));
            Vec f = map(linear(h, rows, n, p.at(pre + "mlp.fc.weight"), 4 * n, p.at(pre + "mlp.fc.bias")), gelu);
            const Vec mlp = linear(f, rows, 4 * n, p.at(pre + "mlp.proj.weight"), n, p.at(pre + "mlp.proj.bias"));
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += mlp[i];
        }
    } else {
        for (std::size_t layer = 0; layer < spec.n_layers; ++layer) {
            const std::string pre = "lstm." + std::to_string(layer) + ".";
            const Vec in = linear(layer_norm(x, rows, n, p.at(pre + "ln.gamma"), p.at(pre + "ln.beta")), rows, n,
                                  p.at(pre + "w_ih"), 4 * n, p.at(pre + "bias"));
            const auto& whh = p.at(pre + "w_hh");
            Vec seq(rows * n);
            for (std::size_t e = 0; e < B; ++e) {
                Vec h(n, 0.0), c(n, 0.0);
                for (std::size_t t = 0; t < l; ++t) {
                    Vec gates(in.begin() + (e * l + t) * 4 * n, in.begin() + (e * l + t + 1) * 4 * n);
                    const Vec rec = matmul(h, whh, 1, n, 4 * n);
                    for (std::size_t j = 0; j < 4 * n; ++j) gates[j] += rec[j];
                    const Vec hc = lstm_cell(gates, c, 1, n);
                    for (std::size_t j = 0; j < n; ++j) {
                        h[j] = hc[j];
                        c[j] = hc[n + j];
                        seq[(e * l + t) * n + j] = h[j];
                    }
                }
            }
            if (spec.lstm_residual) {
                for (std::size_t i = 0; i < x.size(); ++i) x[i] += seq[i];
            } else {
                x = seq;
            }
        }
    }
    x = layer_norm(x, rows, n, p.at("final_ln.gamma"), p.at("final_ln.beta"));
    if (spec.readout == Readout::last_token) {
        Vec last(B * n);
        for (std::size_t e = 0; e < B; ++e) {
            const std::size_t r = e * l + batch.lengths[e] - 1;
            std::copy(x.begin() + r * n, x.begin() + (r + 1) * n, last.begin() + e * n);
        }
        return matmul(last, p.at("head.weight"), B, n, spec.d_out);
    }
    return matmul(x, p.at("head.weight"), rows, n, spec.d_out);
}

/// Finite differences of `reference` (double, perturbed by exactly h, fourth
/// order central stencil at +-h and +-2h) against the autodiff gradients of
/// `forward`, both projected onto the same fixed random weights. Coordinates
/// whose reference gradient is numerically zero (below 1e-9) are checked
/// absolutely: |autodiff| must stay under 1e-6.
struct RefReport {
    std::size_t checked = 0;
    std::size_t structural_zeros = 0;
    double max_rel_error = 0.0;
    double max_zero_abs = 0.0;
    std::string worst;
};

inline RefReport fd_check_ref(const std::function<Tensor()>& forward, const std::function<Vec(const std::vector<Vec>&)>& reference,
                              std::vector<Tensor> inputs, const std::vector<std::string>& names, std::size_t coords,
                              double h, std::uint64_t seed) {
    Projection proj(seed);
    for (auto& t : inputs) {
        t.zero_grad();
    }
    const Tensor out = forward();
    proj.loss(out).backward();
    const auto& r = proj.weights(out.numel());

    std::vector<Vec> x;
    for (auto& t : inputs) {
        x.push_back(from(t));
    }
    auto value = [&] {
        const Vec y = reference(x);
        double acc = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * r[i];
        return acc;
    };

    RefReport report;
    Rng pick = Rng(seed).split("coords");
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto g = inputs[k].grad();
        const std::size_t size = x[k].size();
        const std::size_t n = std::min(coords, size);
        std::vector<std::size_t> idx(size);
        for (std::size_t i = 0; i < size; ++i) idx[i] = i;
        for (std::size_t i = 0; i < n; ++i) {
            std::swap(idx[i], idx[i + pick.below(size - i)]);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = idx[i];
            const double orig = x[k][c];
            auto at = [&](double offset) {
                x[k][c] = orig + offset;
                const double v = value();
                x[k][c] = orig;
                return v;
            };
            const double fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            const double ad = g[c];
            ++report.checked;
            if (std::abs(fd) < 1e-9) {
                ++report.structural_zeros;
                report.max_zero_abs = std::max(report.max_zero_abs, std::abs(ad));
                if (std::abs(ad) > 1e-6 && report.max_rel_error < 1.0) {
                    report.max_rel_error = 1.0;
                    report.worst = names[k] + "[" + std::to_string(c) + "] autodiff " + std::to_string(ad) +
                                   " where the gradient is zero";
                }
                continue;
            }
            const double err = relative_error(ad, fd);
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst =
                    names[k] + "[" + std::to_string(c) + "] autodiff " + std::to_string(ad) + " fd " + std::to_string(fd);
            }
        }
    }
    return report;
}

/// Every registry parameter as a grad-requiring input, with a reference
/// forward that rebuilds the name -> values map from the perturbed copies.
struct ModelCheck {
    std::vector<Tensor> inputs;
    std::vector<std::string> names;
    std::function<Vec(const std::vector<Vec>&)> reference;
};

inline ModelCheck model_check(Model& m, const Batch& batch) {
    ModelCheck mc;
    for (auto& p : m.registry().params()) {
        p.tensor.set_requires_grad(true);
        mc.inputs.push_back(p.tensor);
        mc.names.push_back(p.name);
    }
    const ModelSpec spec = m.spec();
    const auto names = mc.names;
    mc.reference = [spec, names, batch](const std::vector<Vec>& x) {
        Params p;
        for (std::size_t i = 0; i < names.size(); ++i) p[names[i]] = x[i];
        return model_forward(p, spec, batch);
    };
    return mc;
}

}  // namespace fpt::testing::ref
