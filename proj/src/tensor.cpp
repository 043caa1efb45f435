#include "fpt/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include <fmt/format.h>

#include "fpt/errors.hpp"

namespace fpt {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, "x")); }

namespace detail {

std::span<float> grad_buffer(TensorImpl& t) {
    if (t.grad.empty()) {
        t.grad.assign(t.data.size(), 0.0f);
    }
    return t.grad;
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    auto n = shape_numel(shape);
    return adopt(std::move(shape), detail::FloatBuffer(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
    return adopt(std::move(shape), detail::FloatBuffer(values.begin(), values.end()), requires_grad);
}

Tensor Tensor::adopt(Shape shape, detail::FloatBuffer values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError(fmt::format("shape {} needs {} values, got {}", shape_str(shape), shape_numel(shape),
                                     values.size()));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from({1}, std::vector<float>{value}, requires_grad); }

detail::TensorImpl& Tensor::impl() const {
    if (!impl_) {
        throw Error("use of undefined tensor");
    }
    return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::size(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) {
        throw ShapeError(fmt::format("axis {} out of range for shape {}", axis, shape_str(s)));
    }
    return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

std::span<float> Tensor::data() { return impl().data; }
std::span<const float> Tensor::data() const { return impl().data; }

float Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError(fmt::format("item() on tensor of shape {}", shape_str(shape())));
    }
    return impl().data[0];
}

float Tensor::at(std::initializer_list<std::size_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) {
        throw ShapeError(fmt::format("index rank {} for shape {}", index.size(), shape_str(s)));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= s[axis]) {
            throw ShapeError(fmt::format("index {} out of range on axis {} of {}", i, axis, shape_str(s)));
        }
        flat = flat * s[axis] + i;
        ++axis;
    }
    return impl().data[flat];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool on) { impl().requires_grad = on; }

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<float> Tensor::grad() { return detail::grad_buffer(impl()); }

std::span<const float> Tensor::grad() const { return detail::grad_buffer(impl()); }

void Tensor::zero_grad() {
    auto& g = impl().grad;
    std::fill(g.begin(), g.end(), 0.0f);
}

bool Tensor::has_node() const { return impl().node != nullptr; }

Tensor Tensor::clone() const {
    const auto& src = impl();
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = src.shape;
    impl->data = src.data;
    return Tensor(std::move(impl));
}

void Tensor::backward() const {
    auto& root = impl();
    if (root.data.size() != 1) {
        throw ShapeError(fmt::format("backward() needs a scalar loss, got shape {}", shape_str(root.shape)));
    }

    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> visited;
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [t, next] = stack.back();
        if (t->node && next < t->node->parents.size()) {
            auto* p = t->node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) {
                stack.emplace_back(p, 0);
            }
            continue;
        }
        order.push_back(t);
        stack.pop_back();
    }

    for (auto* t : order) {
        if (t->node) {
            t->grad.clear();
        }
    }
    detail::grad_buffer(root)[0] += 1.0f;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* t = *it;
        if (!t->node) {
            continue;
        }
        if (!t->grad.empty()) {
            t->node->backward(*t);
        }
        // Interior gradients are consumed; release them.
        detail::FloatBuffer().swap(t->grad);
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace fpt
