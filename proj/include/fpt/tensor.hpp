#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace fpt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/// 64-byte aligned storage. Eigen picks its vectorized code path from the
/// buffer alignment, so unaligned heap blocks would make results depend on
/// allocation history.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

struct Node;

struct TensorImpl {
    Shape shape;
    FloatBuffer data;
    FloatBuffer grad;  // empty until something accumulates into it
    bool requires_grad = false;
    std::shared_ptr<Node> node;  // null for leaves
};

using BackwardFn = std::function<void(TensorImpl& out)>;

/// One recorded operation: the tensors it read and how to push the output
/// gradient back into them.
struct Node {
    const char* op = "";
    std::vector<std::shared_ptr<TensorImpl>> parents;
    BackwardFn backward;
};

/// Returns the gradient buffer of `t`, allocating it zero-filled on first use.
std::span<float> grad_buffer(TensorImpl& t);

}  // namespace detail

/// Dense row-major float32 tensor with optional reverse-mode autodiff.
///
/// Tensor is a handle: copies share storage. Use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
    /// Takes ownership of an aligned buffer without copying.
    static Tensor adopt(Shape shape, detail::FloatBuffer values, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const noexcept { return impl_ != nullptr; }

    const Shape& shape() const;
    std::size_t dim() const { return shape().size(); }
    std::size_t size(std::size_t axis) const;
    std::size_t numel() const;

    std::span<float> data();
    std::span<const float> data() const;
    float item() const;
    float at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool on);

    bool has_grad() const;
    std::span<float> grad();
    std::span<const float> grad() const;
    void zero_grad();

    /// True when this tensor was produced by a recorded operation.
    bool has_node() const;

    /// Deep copy of the values; the copy is a leaf without gradient.
    Tensor clone() const;
    /// Leaf sharing no graph with this tensor (values copied).
    Tensor detach() const { return clone(); }

    /// Reverse-mode sweep from this scalar. Leaf gradients accumulate.
    void backward() const;

    detail::TensorImpl& impl() const;
    const std::shared_ptr<detail::TensorImpl>& impl_ptr() const noexcept { return impl_; }
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Whether new operations record autodiff nodes (thread-local).
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

}  // namespace fpt
