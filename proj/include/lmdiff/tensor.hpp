// Dense row-major tensors with reverse-mode autodiff, templated on the
// scalar type (float for training, double for gradient checks and oracle
// math). Every kernel is deterministic: same inputs, bit-identical outputs.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "lmdiff/random.hpp"

namespace lmdiff::nn {

using Shape = std::vector<int>;

inline std::size_t numel_of(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d < 0) throw std::runtime_error("negative extent in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// ---------------------------------------------------------------- grad mode

namespace detail {
inline thread_local int g_no_grad_depth = 0;
}

inline bool grad_enabled() { return detail::g_no_grad_depth == 0; }

struct NoGradGuard {
    NoGradGuard() { ++detail::g_no_grad_depth; }
    ~NoGradGuard() { --detail::g_no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ------------------------------------------------------------------ tensor

template <class T>
struct Tensor;

template <class T>
struct GraphNode {
    std::vector<Tensor<T>> parents;
    std::function<void(const Tensor<T>&)> backprop;
};

template <class T>
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<T>> data;
    std::shared_ptr<std::vector<T>> grad;  // allocated iff requires_grad
    std::shared_ptr<GraphNode<T>> node;
    bool requires_grad = false;

    Tensor() = default;

    std::size_t numel() const { return data ? data->size() : 0; }
    bool defined() const { return static_cast<bool>(data); }

    T* ptr() { return data->data(); }
    const T* ptr() const { return data->data(); }
    T* gptr() { return grad->data(); }
    const T* gptr() const { return grad->data(); }

    static Tensor zeros(const Shape& s, bool req = false) {
        Tensor t;
        t.shape = s;
        t.data = std::make_shared<std::vector<T>>(numel_of(s), T(0));
        if (req) {
            t.requires_grad = true;
            t.grad = std::make_shared<std::vector<T>>(t.data->size(), T(0));
        }
        return t;
    }

    static Tensor full(const Shape& s, T v, bool req = false) {
        Tensor t = zeros(s, req);
        for (T& x : *t.data) x = v;
        return t;
    }

    static Tensor from_data(const Shape& s, std::vector<T> values, bool req = false) {
        if (values.size() != numel_of(s)) throw std::runtime_error("from_data: size mismatch for " + shape_str(s));
        Tensor t;
        t.shape = s;
        t.data = std::make_shared<std::vector<T>>(std::move(values));
        if (req) {
            t.requires_grad = true;
            t.grad = std::make_shared<std::vector<T>>(t.data->size(), T(0));
        }
        return t;
    }

    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), T(0));
    }

    Tensor detached() const {
        Tensor t;
        t.shape = shape;
        t.data = data;
        return t;
    }
};

// Standard-normal draws; advances the stream by two ticks per element.
template <class T>
Tensor<T> gaussian_sample(RandomStream& stream, const Shape& s) {
    Tensor<T> t = Tensor<T>::zeros(s);
    for (T& x : *t.data) x = static_cast<T>(stream.next_normal());
    return t;
}

namespace detail {

template <class T>
Tensor<T> make_result(const Shape& s, bool req) {
    return Tensor<T>::zeros(s, req && grad_enabled());
}

template <class T, class F>
void attach(Tensor<T>& out, std::vector<Tensor<T>> parents, F fn) {
    if (!out.requires_grad) return;
    out.node = std::make_shared<GraphNode<T>>();
    out.node->parents = std::move(parents);
    out.node->backprop = std::move(fn);
}

template <class T>
bool any_grad(const Tensor<T>& a) {
    return a.requires_grad;
}

template <class T, class... Rest>
bool any_grad(const Tensor<T>& a, const Rest&... rest) {
    return a.requires_grad || any_grad(rest...);
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

}  // namespace detail

// Reverse pass from a scalar result. Accumulates into the grad buffers of
// every reachable tensor that requires grad.
template <class T>
void backward(const Tensor<T>& root) {
    detail::check(root.numel() == 1, "backward: root must be a scalar");
    detail::check(root.requires_grad, "backward: root does not require grad");
    (*root.grad)[0] = T(1);

    // iterative DFS, completion order = topological order of the DAG
    std::vector<Tensor<T>> order;
    std::unordered_set<const GraphNode<T>*> seen;
    struct Frame {
        Tensor<T> t;
        std::size_t next_child;
    };
    std::vector<Frame> stack;
    if (root.node) {
        stack.push_back({root, 0});
        seen.insert(root.node.get());
    }
    while (!stack.empty()) {
        Frame& f = stack.back();
        auto& parents = f.t.node->parents;
        bool descended = false;
        while (f.next_child < parents.size()) {
            const Tensor<T>& p = parents[f.next_child++];
            if (p.node && !seen.count(p.node.get())) {
                seen.insert(p.node.get());
                stack.push_back({p, 0});
                descended = true;
                break;
            }
        }
        if (!descended && stack.back().next_child >= stack.back().t.node->parents.size()) {
            order.push_back(stack.back().t);
            stack.pop_back();
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (it->node && it->node->backprop) it->node->backprop(*it);
    }
}

// ------------------------------------------------------------ elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape == b.shape, "add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> out = detail::make_result<T>(a.shape, detail::any_grad(a, b));
    const std::size_t n = out.numel();
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    detail::attach(out, {a, b}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        const Tensor<T>& b = o.node->parents[1];
        const std::size_t n = o.numel();
        if (a.grad) for (std::size_t i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i];
        if (b.grad) for (std::size_t i = 0; i < n; ++i) (*b.grad)[i] += (*o.grad)[i];
    });
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape == b.shape, "sub: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> out = detail::make_result<T>(a.shape, detail::any_grad(a, b));
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
    detail::attach(out, {a, b}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        const Tensor<T>& b = o.node->parents[1];
        const std::size_t n = o.numel();
        if (a.grad) for (std::size_t i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i];
        if (b.grad) for (std::size_t i = 0; i < n; ++i) (*b.grad)[i] -= (*o.grad)[i];
    });
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape == b.shape, "mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> out = detail::make_result<T>(a.shape, detail::any_grad(a, b));
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
    detail::attach(out, {a, b}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        const Tensor<T>& b = o.node->parents[1];
        const std::size_t n = o.numel();
        if (a.grad) for (std::size_t i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i] * (*b.data)[i];
        if (b.grad) for (std::size_t i = 0; i < n; ++i) (*b.grad)[i] += (*o.grad)[i] * (*a.data)[i];
    });
    return out;
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape == b.shape, "div: shape mismatch");
    Tensor<T> out = detail::make_result<T>(a.shape, detail::any_grad(a, b));
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] / (*b.data)[i];
    detail::attach(out, {a, b}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        const Tensor<T>& b = o.node->parents[1];
        const std::size_t n = o.numel();
        for (std::size_t i = 0; i < n; ++i) {
            const T bi = (*b.data)[i];
            if (a.grad) (*a.grad)[i] += (*o.grad)[i] / bi;
            if (b.grad) (*b.grad)[i] -= (*o.grad)[i] * (*a.data)[i] / (bi * bi);
        }
    });
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, double s) {
    Tensor<T> out = detail::make_result<T>(a.shape, a.requires_grad);
    const std::size_t n = out.numel();
    const T sv = static_cast<T>(s);
    for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * sv;
    detail::attach(out, {a}, [sv](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        if (!a.grad) return;
        const std::size_t n = o.numel();
        for (std::size_t i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i] * sv;
    });
    return out;
}

template <class T>
Tensor<T> add_const(const Tensor<T>& a, double c) {
    Tensor<T> out = detail::make_result<T>(a.shape, a.requires_grad);
    const std::size_t n = out.numel();
    const T cv = static_cast<T>(c);
    for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + cv;
    detail::attach(out, {a}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        if (!a.grad) return;
        const std::size_t n = o.numel();
        for (std::size_t i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i];
    });
    return out;
}

// Multiply every element of x by params[index]; gradient reaches both x and
// the selected parameter element.
template <class T>
Tensor<T> scale_by_element(const Tensor<T>& x, const Tensor<T>& params, std::size_t index) {
    detail::check(index < params.numel(), "scale_by_element: index out of range");
    Tensor<T> out = detail::make_result<T>(x.shape, detail::any_grad(x, params));
    const T s = (*params.data)[index];
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*x.data)[i] * s;
    detail::attach(out, {x, params}, [index, s](const Tensor<T>& o) {
        const Tensor<T>& x = o.node->parents[0];
        const Tensor<T>& p = o.node->parents[1];
        const std::size_t n = o.numel();
        if (x.grad) for (std::size_t i = 0; i < n; ++i) (*x.grad)[i] += (*o.grad)[i] * s;
        if (p.grad) {
            T acc = T(0);
            for (std::size_t i = 0; i < n; ++i) acc += (*o.grad)[i] * (*x.data)[i];
            (*p.grad)[index] += acc;
        }
    });
    return out;
}

template <class T>
Tensor<T> exp_t(const Tensor<T>& a) {
    Tensor<T> out = detail::make_result<T>(a.shape, a.requires_grad);
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = std::exp((*a.data)[i]);
    detail::attach(out, {a}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        if (!a.grad) return;
        const std::size_t n = o.numel();
        for (std::size_t i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i] * (*o.data)[i];
    });
    return out;
}

template <class T>
Tensor<T> sqrt_t(const Tensor<T>& a) {
    Tensor<T> out = detail::make_result<T>(a.shape, a.requires_grad);
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = std::sqrt((*a.data)[i]);
    detail::attach(out, {a}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        if (!a.grad) return;
        const std::size_t n = o.numel();
        for (std::size_t i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i] * T(0.5) / (*o.data)[i];
    });
    return out;
}

template <class T>
Tensor<T> sigmoid_t(const Tensor<T>& a) {
    Tensor<T> out = detail::make_result<T>(a.shape, a.requires_grad);
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const T x = (*a.data)[i];
        (*out.data)[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                   : std::exp(x) / (T(1) + std::exp(x));
    }
    detail::attach(out, {a}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        if (!a.grad) return;
        const std::size_t n = o.numel();
        for (std::size_t i = 0; i < n; ++i) {
            const T s = (*o.data)[i];
            (*a.grad)[i] += (*o.grad)[i] * s * (T(1) - s);
        }
    });
    return out;
}

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
    Tensor<T> out = detail::make_result<T>(a.shape, a.requires_grad);
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const T x = (*a.data)[i];
        const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
        (*out.data)[i] = x * s;
    }
    detail::attach(out, {a}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        if (!a.grad) return;
        const std::size_t n = o.numel();
        for (std::size_t i = 0; i < n; ++i) {
            const T x = (*a.data)[i];
            const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
            (*a.grad)[i] += (*o.grad)[i] * (s + x * s * (T(1) - s));
        }
    });
    return out;
}

// log(1 + e^x), computed on the stable branch; derivative is sigmoid(x)
template <class T>
Tensor<T> softplus(const Tensor<T>& a) {
    Tensor<T> out = detail::make_result<T>(a.shape, a.requires_grad);
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const T x = (*a.data)[i];
        (*out.data)[i] = x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    }
    detail::attach(out, {a}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        if (!a.grad) return;
        const std::size_t n = o.numel();
        for (std::size_t i = 0; i < n; ++i) {
            const T x = (*a.data)[i];
            const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
            (*a.grad)[i] += (*o.grad)[i] * s;
        }
    });
    return out;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    // tanh approximation, smooth everywhere
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    Tensor<T> out = detail::make_result<T>(a.shape, a.requires_grad);
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const T x = (*a.data)[i];
        const T u = static_cast<T>(kC) * (x + static_cast<T>(kA) * x * x * x);
        (*out.data)[i] = T(0.5) * x * (T(1) + std::tanh(u));
    }
    detail::attach(out, {a}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        if (!a.grad) return;
        const std::size_t n = o.numel();
        for (std::size_t i = 0; i < n; ++i) {
            const T x = (*a.data)[i];
            const T u = static_cast<T>(kC) * (x + static_cast<T>(kA) * x * x * x);
            const T th = std::tanh(u);
            const T du = static_cast<T>(kC) * (T(1) + T(3) * static_cast<T>(kA) * x * x);
            (*a.grad)[i] += (*o.grad)[i] * (T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du);
        }
    });
    return out;
}

// ------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    Tensor<T> out = detail::make_result<T>({1}, a.requires_grad);
    T acc = T(0);
    for (T v : *a.data) acc += v;
    (*out.data)[0] = acc;
    detail::attach(out, {a}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        if (!a.grad) return;
        const T g = (*o.grad)[0];
        for (T& v : *a.grad) v += g;
    });
    return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
    detail::check(a.numel() > 0, "mean_all: empty tensor");
    return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

template <class T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape == b.shape, "dot: shape mismatch");
    Tensor<T> out = detail::make_result<T>({1}, detail::any_grad(a, b));
    T acc = T(0);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) acc += (*a.data)[i] * (*b.data)[i];
    (*out.data)[0] = acc;
    detail::attach(out, {a, b}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        const Tensor<T>& b = o.node->parents[1];
        const T g = (*o.grad)[0];
        const std::size_t n = a.numel();
        if (a.grad) for (std::size_t i = 0; i < n; ++i) (*a.grad)[i] += g * (*b.data)[i];
        if (b.grad) for (std::size_t i = 0; i < n; ++i) (*b.grad)[i] += g * (*a.data)[i];
    });
    return out;
}

// mean over rows of [m x n] -> [1 x n]
template <class T>
Tensor<T> mean_rows(const Tensor<T>& a) {
    detail::check(a.shape.size() == 2, "mean_rows: expects 2-d tensor");
    const int m = a.shape[0], n = a.shape[1];
    detail::check(m > 0, "mean_rows: empty");
    Tensor<T> out = detail::make_result<T>({1, n}, a.requires_grad);
    for (int j = 0; j < n; ++j) {
        T acc = T(0);
        for (int i = 0; i < m; ++i) acc += (*a.data)[static_cast<std::size_t>(i) * n + j];
        (*out.data)[j] = acc / static_cast<T>(m);
    }
    detail::attach(out, {a}, [m, n](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        if (!a.grad) return;
        for (int j = 0; j < n; ++j) {
            const T g = (*o.grad)[j] / static_cast<T>(m);
            for (int i = 0; i < m; ++i) (*a.grad)[static_cast<std::size_t>(i) * n + j] += g;
        }
    });
    return out;
}

// ---------------------------------------------------------- linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape.size() == 2 && b.shape.size() == 2, "matmul: expects 2-d tensors");
    const int m = a.shape[0], k = a.shape[1], k2 = b.shape[0], n = b.shape[1];
    detail::check(k == k2, "matmul: inner extent mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> out = detail::make_result<T>({m, n}, detail::any_grad(a, b));
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T acc = T(0);
            for (int kk = 0; kk < k; ++kk) acc += pa[i * k + kk] * pb[kk * n + j];
            po[i * n + j] = acc;
        }
    }
    detail::attach(out, {a, b}, [m, k, n](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        const Tensor<T>& b = o.node->parents[1];
        const T* pa = a.ptr();
        const T* pb = b.ptr();
        const T* pg = o.gptr();
        if (a.grad) {
            T* ga = a.grad->data();
            for (int i = 0; i < m; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    T acc = T(0);
                    for (int j = 0; j < n; ++j) acc += pg[i * n + j] * pb[kk * n + j];
                    ga[i * k + kk] += acc;
                }
        }
        if (b.grad) {
            T* gb = b.grad->data();
            for (int kk = 0; kk < k; ++kk)
                for (int j = 0; j < n; ++j) {
                    T acc = T(0);
                    for (int i = 0; i < m; ++i) acc += pa[i * k + kk] * pg[i * n + j];
                    gb[kk * n + j] += acc;
                }
        }
    });
    return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::check(a.shape.size() == 2, "transpose: expects 2-d tensor");
    const int m = a.shape[0], n = a.shape[1];
    Tensor<T> out = detail::make_result<T>({n, m}, a.requires_grad);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) (*out.data)[static_cast<std::size_t>(j) * m + i] = (*a.data)[static_cast<std::size_t>(i) * n + j];
    detail::attach(out, {a}, [m, n](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        if (!a.grad) return;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) (*a.grad)[static_cast<std::size_t>(i) * n + j] += (*o.grad)[static_cast<std::size_t>(j) * m + i];
    });
    return out;
}

// x: [m x n], b: [n]; adds b to every row
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
    detail::check(x.shape.size() == 2 && b.shape.size() == 1 && x.shape[1] == b.shape[0],
                  "add_rowvec: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(b.shape));
    const int m = x.shape[0], n = x.shape[1];
    Tensor<T> out = detail::make_result<T>(x.shape, detail::any_grad(x, b));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) (*out.data)[static_cast<std::size_t>(i) * n + j] = (*x.data)[static_cast<std::size_t>(i) * n + j] + (*b.data)[j];
    detail::attach(out, {x, b}, [m, n](const Tensor<T>& o) {
        const Tensor<T>& x = o.node->parents[0];
        const Tensor<T>& b = o.node->parents[1];
        if (x.grad) {
            const std::size_t total = static_cast<std::size_t>(m) * n;
            for (std::size_t i = 0; i < total; ++i) (*x.grad)[i] += (*o.grad)[i];
        }
        if (b.grad)
            for (int j = 0; j < n; ++j) {
                T acc = T(0);
                for (int i = 0; i < m; ++i) acc += (*o.grad)[static_cast<std::size_t>(i) * n + j];
                (*b.grad)[j] += acc;
            }
    });
    return out;
}

// x @ w + b with w: [in x out], b: [out] (b may be undefined for no bias)
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    Tensor<T> y = matmul(x, w);
    if (!b.defined()) return y;
    return add_rowvec(y, b);
}

// ------------------------------------------------------- shape manipulation

template <class T>
Tensor<T> reshape_copy(const Tensor<T>& a, const Shape& s) {
    detail::check(numel_of(s) == a.numel(), "reshape: numel mismatch");
    Tensor<T> out = detail::make_result<T>(s, a.requires_grad);
    std::copy(a.data->begin(), a.data->end(), out.data->begin());
    detail::attach(out, {a}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        if (!a.grad) return;
        const std::size_t n = o.numel();
        for (std::size_t i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i];
    });
    return out;
}

// rows [r0, r1) of a 2-d tensor
template <class T>
Tensor<T> take_rows(const Tensor<T>& a, int r0, int r1) {
    detail::check(a.shape.size() == 2, "take_rows: expects 2-d tensor");
    detail::check(0 <= r0 && r0 < r1 && r1 <= a.shape[0], "take_rows: bad range");
    const int n = a.shape[1];
    Tensor<T> out = detail::make_result<T>({r1 - r0, n}, a.requires_grad);
    std::copy(a.data->begin() + static_cast<std::size_t>(r0) * n,
              a.data->begin() + static_cast<std::size_t>(r1) * n, out.data->begin());
    detail::attach(out, {a}, [r0, n](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        if (!a.grad) return;
        const std::size_t cnt = o.numel();
        for (std::size_t i = 0; i < cnt; ++i) (*a.grad)[static_cast<std::size_t>(r0) * n + i] += (*o.grad)[i];
    });
    return out;
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, int c0, int c1) {
    detail::check(a.shape.size() == 2, "slice_cols: expects 2-d tensor");
    detail::check(0 <= c0 && c0 < c1 && c1 <= a.shape[1], "slice_cols: bad range");
    const int m = a.shape[0], n = a.shape[1], w = c1 - c0;
    Tensor<T> out = detail::make_result<T>({m, w}, a.requires_grad);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) (*out.data)[static_cast<std::size_t>(i) * w + j] = (*a.data)[static_cast<std::size_t>(i) * n + c0 + j];
    detail::attach(out, {a}, [m, n, c0, w](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        if (!a.grad) return;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) (*a.grad)[static_cast<std::size_t>(i) * n + c0 + j] += (*o.grad)[static_cast<std::size_t>(i) * w + j];
    });
    return out;
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    detail::check(!parts.empty(), "concat_cols: empty input");
    const int m = parts[0].shape[0];
    int total = 0;
    bool req = false;
    for (const auto& p : parts) {
        detail::check(p.shape.size() == 2 && p.shape[0] == m, "concat_cols: row mismatch");
        total += p.shape[1];
        req = req || p.requires_grad;
    }
    Tensor<T> out = detail::make_result<T>({m, total}, req);
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.shape[1];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) (*out.data)[static_cast<std::size_t>(i) * total + off + j] = (*p.data)[static_cast<std::size_t>(i) * w + j];
        off += w;
    }
    detail::attach(out, parts, [m, total](const Tensor<T>& o) {
        int off = 0;
        for (const auto& p : o.node->parents) {
            const int w = p.shape[1];
            if (p.grad)
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j) (*p.grad)[static_cast<std::size_t>(i) * w + j] += (*o.grad)[static_cast<std::size_t>(i) * total + off + j];
            off += w;
        }
    });
    return out;
}

// ------------------------------------------------------------- embeddings

template <class T>
Tensor<T> embed_rows(const Tensor<T>& table, const std::vector<int>& ids) {
    detail::check(table.shape.size() == 2, "embed_rows: table must be 2-d");
    const int v = table.shape[0], h = table.shape[1];
    for (int id : ids) detail::check(0 <= id && id < v, "unknown token id " + std::to_string(id));
    Tensor<T> out = detail::make_result<T>({static_cast<int>(ids.size()), h}, table.requires_grad);
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy(table.data->begin() + static_cast<std::size_t>(ids[i]) * h,
                  table.data->begin() + static_cast<std::size_t>(ids[i] + 1) * h,
                  out.data->begin() + i * h);
    detail::attach(out, {table}, [ids, h](const Tensor<T>& o) {
        const Tensor<T>& t = o.node->parents[0];
        if (!t.grad) return;
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < h; ++j) (*t.grad)[static_cast<std::size_t>(ids[i]) * h + j] += (*o.grad)[i * h + j];
    });
    return out;
}

// ------------------------------------------------------------ normalization

// Row-wise layer norm for [m x n] with per-column gain/bias.
template <class T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps = 1e-5) {
    detail::check(x.shape.size() == 2, "layer_norm_rows: expects 2-d tensor");
    const int m = x.shape[0], n = x.shape[1];
    detail::check(gain.shape == Shape{n} && bias.shape == Shape{n}, "layer_norm_rows: gain/bias shape mismatch");
    Tensor<T> out = detail::make_result<T>(x.shape, detail::any_grad(x, gain, bias));
    std::vector<T> mean(m), inv_std(m);
    for (int i = 0; i < m; ++i) {
        T mu = T(0);
        for (int j = 0; j < n; ++j) mu += (*x.data)[static_cast<std::size_t>(i) * n + j];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (int j = 0; j < n; ++j) {
            const T d = (*x.data)[static_cast<std::size_t>(i) * n + j] - mu;
            var += d * d;
        }
        var /= static_cast<T>(n);
        mean[i] = mu;
        inv_std[i] = T(1) / std::sqrt(var + static_cast<T>(eps));
        for (int j = 0; j < n; ++j) {
            const T xh = ((*x.data)[static_cast<std::size_t>(i) * n + j] - mu) * inv_std[i];
            (*out.data)[static_cast<std::size_t>(i) * n + j] = xh * (*gain.data)[j] + (*bias.data)[j];
        }
    }
    detail::attach(out, {x, gain, bias}, [m, n, mean, inv_std](const Tensor<T>& o) {
        const Tensor<T>& x = o.node->parents[0];
        const Tensor<T>& gain = o.node->parents[1];
        const Tensor<T>& bias = o.node->parents[2];
        for (int i = 0; i < m; ++i) {
            const T mu = mean[i], is = inv_std[i];
            // accumulate the two row sums needed for dx
            T sum_dy_g = T(0), sum_dy_g_xh = T(0);
            for (int j = 0; j < n; ++j) {
                const std::size_t idx = static_cast<std::size_t>(i) * n + j;
                const T xh = ((*x.data)[idx] - mu) * is;
                const T dyg = (*o.grad)[idx] * (*gain.data)[j];
                sum_dy_g += dyg;
                sum_dy_g_xh += dyg * xh;
                if (gain.grad) (*gain.grad)[j] += (*o.grad)[idx] * xh;
                if (bias.grad) (*bias.grad)[j] += (*o.grad)[idx];
            }
            if (x.grad)
                for (int j = 0; j < n; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(i) * n + j;
                    const T xh = ((*x.data)[idx] - mu) * is;
                    const T dyg = (*o.grad)[idx] * (*gain.data)[j];
                    (*x.grad)[idx] += is * (dyg - (sum_dy_g + xh * sum_dy_g_xh) / static_cast<T>(n));
                }
        }
    });
    return out;
}

// ----------------------------------------------------------------- softmax

// Boolean attention mask; allow[i*cols+j] != 0 means query i may see key j.
struct BoolMask {
    int rows = 0;
    int cols = 0;
    std::vector<uint8_t> allow;

    static BoolMask full(int r, int c) { return {r, c, std::vector<uint8_t>(static_cast<std::size_t>(r) * c, 1)}; }

    static BoolMask causal(int n) {
        BoolMask m{n, n, std::vector<uint8_t>(static_cast<std::size_t>(n) * n, 0)};
        for (int i = 0; i < n; ++i)
            for (int j = 0; j <= i; ++j) m.allow[static_cast<std::size_t>(i) * n + j] = 1;
        return m;
    }

    static BoolMask self_only(int n) {
        BoolMask m{n, n, std::vector<uint8_t>(static_cast<std::size_t>(n) * n, 0)};
        for (int i = 0; i < n; ++i) m.allow[static_cast<std::size_t>(i) * n + i] = 1;
        return m;
    }
};

// Softmax per row restricted to allowed entries; disallowed entries are
// never read, so outputs at position i cannot depend on masked keys.
template <class T>
Tensor<T> masked_softmax_rows(const Tensor<T>& x, const BoolMask& mask) {
    detail::check(x.shape.size() == 2, "masked_softmax_rows: expects 2-d tensor");
    const int m = x.shape[0], n = x.shape[1];
    detail::check(mask.rows == m && mask.cols == n, "masked_softmax_rows: mask shape mismatch");
    Tensor<T> out = detail::make_result<T>(x.shape, x.requires_grad);
    for (int i = 0; i < m; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < n; ++j)
            if (mask.allow[static_cast<std::size_t>(i) * n + j]) mx = std::max(mx, (*x.data)[static_cast<std::size_t>(i) * n + j]);
        if (mx == -std::numeric_limits<T>::infinity()) throw std::runtime_error("degenerate attention row");
        T denom = T(0);
        for (int j = 0; j < n; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * n + j;
            if (mask.allow[idx]) {
                const T e = std::exp((*x.data)[idx] - mx);
                (*out.data)[idx] = e;
                denom += e;
            }
        }
        for (int j = 0; j < n; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * n + j;
            if (mask.allow[idx]) (*out.data)[idx] /= denom;
        }
    }
    auto allow = mask.allow;
    detail::attach(out, {x}, [m, n, allow](const Tensor<T>& o) {
        const Tensor<T>& x = o.node->parents[0];
        if (!x.grad) return;
        for (int i = 0; i < m; ++i) {
            T dot = T(0);
            for (int j = 0; j < n; ++j) {
                const std::size_t idx = static_cast<std::size_t>(i) * n + j;
                if (allow[idx]) dot += (*o.grad)[idx] * (*o.data)[idx];
            }
            for (int j = 0; j < n; ++j) {
                const std::size_t idx = static_cast<std::size_t>(i) * n + j;
                if (allow[idx]) (*x.grad)[idx] += (*o.data)[idx] * ((*o.grad)[idx] - dot);
            }
        }
    });
    return out;
}

// softmax(q k^T / sqrt(H)) v with a boolean mask over key positions
template <class T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const BoolMask& mask) {
    detail::check(q.shape.size() == 2 && k.shape.size() == 2 && v.shape.size() == 2, "attention: expects 2-d tensors");
    const int h = q.shape[1];
    detail::check(h > 0 && k.shape[1] == h, "attention: query/key width mismatch");
    detail::check(k.shape[0] == v.shape[0], "attention: key/value length mismatch");
    Tensor<T> logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(h)));
    Tensor<T> weights = masked_softmax_rows(logits, mask);
    return matmul(weights, v);
}

// ------------------------------------------------------- cross entropy

// Mean cross entropy of rows of logits [m x V] against target ids [m].
template <class T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, const std::vector<int>& targets) {
    detail::check(logits.shape.size() == 2, "cross_entropy_rows: expects 2-d logits");
    const int m = logits.shape[0], v = logits.shape[1];
    detail::check(static_cast<int>(targets.size()) == m, "cross_entropy_rows: target count mismatch");
    for (int t : targets) detail::check(0 <= t && t < v, "cross_entropy_rows: target out of range");
    Tensor<T> out = detail::make_result<T>({1}, logits.requires_grad);
    // cache row log-sum-exp and max for the backward pass
    std::vector<T> lse(m), mx(m);
    T total = T(0);
    for (int i = 0; i < m; ++i) {
        T rmax = (*logits.data)[static_cast<std::size_t>(i) * v];
        for (int j = 1; j < v; ++j) rmax = std::max(rmax, (*logits.data)[static_cast<std::size_t>(i) * v + j]);
        T denom = T(0);
        for (int j = 0; j < v; ++j) denom += std::exp((*logits.data)[static_cast<std::size_t>(i) * v + j] - rmax);
        mx[i] = rmax;
        lse[i] = rmax + std::log(denom);
        total += lse[i] - (*logits.data)[static_cast<std::size_t>(i) * v + targets[i]];
    }
    (*out.data)[0] = total / static_cast<T>(m);
    detail::attach(out, {logits}, [m, v, targets, lse](const Tensor<T>& o) {
        const Tensor<T>& logits = o.node->parents[0];
        if (!logits.grad) return;
        const T g = (*o.grad)[0] / static_cast<T>(m);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < v; ++j) {
                const std::size_t idx = static_cast<std::size_t>(i) * v + j;
                T p = std::exp((*logits.data)[idx] - lse[i]);
                if (j == targets[i]) p -= T(1);
                (*logits.grad)[idx] += g * p;
            }
    });
    return out;
}

// ------------------------------------------------------------ image kernels

// x: [Cin x H x W], w: [Cout x Cin x KH x KW], b: [Cout] (optional), zero padding
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
    detail::check(x.shape.size() == 3 && w.shape.size() == 4, "conv2d: expects [C,H,W] input and [O,I,KH,KW] weight");
    const int ci = x.shape[0], ih = x.shape[1], iw = x.shape[2];
    const int co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    detail::check(w.shape[1] == ci, "conv2d: channel mismatch");
    detail::check(stride >= 1, "conv2d: bad stride");
    const int oh = (ih + 2 * pad - kh) / stride + 1;
    const int ow = (iw + 2 * pad - kw) / stride + 1;
    detail::check(oh > 0 && ow > 0, "conv2d: empty output");
    const bool has_bias = b.defined();
    if (has_bias) detail::check(b.shape == Shape{co}, "conv2d: bias shape mismatch");

    Tensor<T> out = detail::make_result<T>({co, oh, ow}, has_bias ? detail::any_grad(x, w, b) : detail::any_grad(x, w));
    const T* px = x.ptr();
    const T* pw = w.ptr();
    T* po = out.ptr();
    for (int oc = 0; oc < co; ++oc) {
        const T bias_v = has_bias ? (*b.data)[oc] : T(0);
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                T acc = bias_v;
                for (int ic = 0; ic < ci; ++ic)
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= ih) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= iw) continue;
                            acc += px[(static_cast<std::size_t>(ic) * ih + iy) * iw + ix] *
                                   pw[((static_cast<std::size_t>(oc) * ci + ic) * kh + ky) * kw + kx];
                        }
                    }
                po[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox] = acc;
            }
    }
    std::vector<Tensor<T>> parents = has_bias ? std::vector<Tensor<T>>{x, w, b} : std::vector<Tensor<T>>{x, w};
    detail::attach(out, std::move(parents), [ci, ih, iw, co, kh, kw, oh, ow, stride, pad, has_bias](const Tensor<T>& o) {
        const Tensor<T>& x = o.node->parents[0];
        const Tensor<T>& w = o.node->parents[1];
        const T* px = x.ptr();
        const T* pw = w.ptr();
        const T* pg = o.gptr();
        if (x.grad) {
            T* gx = x.grad->data();
            for (int ic = 0; ic < ci; ++ic)
                for (int iy = 0; iy < ih; ++iy)
                    for (int ix = 0; ix < iw; ++ix) {
                        T acc = T(0);
                        for (int oc = 0; oc < co; ++oc)
                            for (int ky = 0; ky < kh; ++ky) {
                                const int num_y = iy + pad - ky;
                                if (num_y < 0 || num_y % stride) continue;
                                const int oy = num_y / stride;
                                if (oy >= oh) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int num_x = ix + pad - kx;
                                    if (num_x < 0 || num_x % stride) continue;
                                    const int ox = num_x / stride;
                                    if (ox >= ow) continue;
                                    acc += pg[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox] *
                                           pw[((static_cast<std::size_t>(oc) * ci + ic) * kh + ky) * kw + kx];
                                }
                            }
                        gx[(static_cast<std::size_t>(ic) * ih + iy) * iw + ix] += acc;
                    }
        }
        if (w.grad) {
            T* gw = w.grad->data();
            for (int oc = 0; oc < co; ++oc)
                for (int ic = 0; ic < ci; ++ic)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            T acc = T(0);
                            for (int oy = 0; oy < oh; ++oy) {
                                const int iy = oy * stride - pad + ky;
                                if (iy < 0 || iy >= ih) continue;
                                for (int ox = 0; ox < ow; ++ox) {
                                    const int ix = ox * stride - pad + kx;
                                    if (ix < 0 || ix >= iw) continue;
                                    acc += pg[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox] *
                                           px[(static_cast<std::size_t>(ic) * ih + iy) * iw + ix];
                                }
                            }
                            gw[((static_cast<std::size_t>(oc) * ci + ic) * kh + ky) * kw + kx] += acc;
                        }
        }
        if (has_bias) {
            const Tensor<T>& b = o.node->parents[2];
            if (b.grad)
                for (int oc = 0; oc < co; ++oc) {
                    T acc = T(0);
                    for (int i = 0; i < oh * ow; ++i) acc += pg[static_cast<std::size_t>(oc) * oh * ow + i];
                    (*b.grad)[oc] += acc;
                }
        }
    });
    return out;
}

template <class T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
    detail::check(x.shape.size() == 3, "upsample_nearest2: expects [C,H,W]");
    const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
    Tensor<T> out = detail::make_result<T>({c, 2 * h, 2 * w}, x.requires_grad);
    for (int ic = 0; ic < c; ++ic)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                (*out.data)[(static_cast<std::size_t>(ic) * 2 * h + y) * 2 * w + xx] =
                    (*x.data)[(static_cast<std::size_t>(ic) * h + y / 2) * w + xx / 2];
    detail::attach(out, {x}, [c, h, w](const Tensor<T>& o) {
        const Tensor<T>& x = o.node->parents[0];
        if (!x.grad) return;
        for (int ic = 0; ic < c; ++ic)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    (*x.grad)[(static_cast<std::size_t>(ic) * h + y / 2) * w + xx / 2] +=
                        (*o.grad)[(static_cast<std::size_t>(ic) * 2 * h + y) * 2 * w + xx];
    });
    return out;
}

template <class T>
Tensor<T> concat_chan(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape.size() == 3 && b.shape.size() == 3 && a.shape[1] == b.shape[1] && a.shape[2] == b.shape[2],
                  "concat_chan: spatial mismatch");
    const int ca = a.shape[0], cb = b.shape[0], h = a.shape[1], w = a.shape[2];
    Tensor<T> out = detail::make_result<T>({ca + cb, h, w}, detail::any_grad(a, b));
    std::copy(a.data->begin(), a.data->end(), out.data->begin());
    std::copy(b.data->begin(), b.data->end(), out.data->begin() + a.numel());
    detail::attach(out, {a, b}, [](const Tensor<T>& o) {
        const Tensor<T>& a = o.node->parents[0];
        const Tensor<T>& b = o.node->parents[1];
        const std::size_t na = a.numel();
        if (a.grad) for (std::size_t i = 0; i < na; ++i) (*a.grad)[i] += (*o.grad)[i];
        if (b.grad) for (std::size_t i = 0; i < b.numel(); ++i) (*b.grad)[i] += (*o.grad)[na + i];
    });
    return out;
}

// adds b[c] to every spatial position of channel c
template <class T>
Tensor<T> add_chan_bias(const Tensor<T>& x, const Tensor<T>& b) {
    detail::check(x.shape.size() == 3 && b.shape.size() == 1 && b.shape[0] == x.shape[0], "add_chan_bias: shape mismatch");
    const int c = x.shape[0];
    const std::size_t hw = static_cast<std::size_t>(x.shape[1]) * x.shape[2];
    Tensor<T> out = detail::make_result<T>(x.shape, detail::any_grad(x, b));
    for (int ic = 0; ic < c; ++ic)
        for (std::size_t i = 0; i < hw; ++i) (*out.data)[ic * hw + i] = (*x.data)[ic * hw + i] + (*b.data)[ic];
    detail::attach(out, {x, b}, [c, hw](const Tensor<T>& o) {
        const Tensor<T>& x = o.node->parents[0];
        const Tensor<T>& b = o.node->parents[1];
        if (x.grad)
            for (std::size_t i = 0; i < c * hw; ++i) (*x.grad)[i] += (*o.grad)[i];
        if (b.grad)
            for (int ic = 0; ic < c; ++ic) {
                T acc = T(0);
                for (std::size_t i = 0; i < hw; ++i) acc += (*o.grad)[ic * hw + i];
                (*b.grad)[ic] += acc;
            }
    });
    return out;
}

// Normalize across channels at each spatial position, per-channel affine.
template <class T>
Tensor<T> channel_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps = 1e-5) {
    detail::check(x.shape.size() == 3, "channel_norm: expects [C,H,W]");
    const int c = x.shape[0];
    const std::size_t hw = static_cast<std::size_t>(x.shape[1]) * x.shape[2];
    detail::check(gain.shape == Shape{c} && bias.shape == Shape{c}, "channel_norm: gain/bias shape mismatch");
    Tensor<T> out = detail::make_result<T>(x.shape, detail::any_grad(x, gain, bias));
    std::vector<T> mean(hw), inv_std(hw);
    for (std::size_t p = 0; p < hw; ++p) {
        T mu = T(0);
        for (int ic = 0; ic < c; ++ic) mu += (*x.data)[ic * hw + p];
        mu /= static_cast<T>(c);
        T var = T(0);
        for (int ic = 0; ic < c; ++ic) {
            const T d = (*x.data)[ic * hw + p] - mu;
            var += d * d;
        }
        var /= static_cast<T>(c);
        mean[p] = mu;
        inv_std[p] = T(1) / std::sqrt(var + static_cast<T>(eps));
        for (int ic = 0; ic < c; ++ic)
            (*out.data)[ic * hw + p] = ((*x.data)[ic * hw + p] - mu) * inv_std[p] * (*gain.data)[ic] + (*bias.data)[ic];
    }
    detail::attach(out, {x, gain, bias}, [c, hw, mean, inv_std](const Tensor<T>& o) {
        const Tensor<T>& x = o.node->parents[0];
        const Tensor<T>& gain = o.node->parents[1];
        const Tensor<T>& bias = o.node->parents[2];
        for (std::size_t p = 0; p < hw; ++p) {
            const T mu = mean[p], is = inv_std[p];
            T sum_dy_g = T(0), sum_dy_g_xh = T(0);
            for (int ic = 0; ic < c; ++ic) {
                const T xh = ((*x.data)[ic * hw + p] - mu) * is;
                const T dyg = (*o.grad)[ic * hw + p] * (*gain.data)[ic];
                sum_dy_g += dyg;
                sum_dy_g_xh += dyg * xh;
                if (gain.grad) (*gain.grad)[ic] += (*o.grad)[ic * hw + p] * xh;
                if (bias.grad) (*bias.grad)[ic] += (*o.grad)[ic * hw + p];
            }
            if (x.grad)
                for (int ic = 0; ic < c; ++ic) {
                    const T xh = ((*x.data)[ic * hw + p] - mu) * is;
                    const T dyg = (*o.grad)[ic * hw + p] * (*gain.data)[ic];
                    (*x.grad)[ic * hw + p] += is * (dyg - (sum_dy_g + xh * sum_dy_g_xh) / static_cast<T>(c));
                }
        }
    });
    return out;
}

// [C x H x W] -> [HW x C] token layout for attention over spatial positions
template <class T>
Tensor<T> chw_to_lc(const Tensor<T>& x) {
    detail::check(x.shape.size() == 3, "chw_to_lc: expects [C,H,W]");
    const int c = x.shape[0];
    const std::size_t hw = static_cast<std::size_t>(x.shape[1]) * x.shape[2];
    Tensor<T> out = detail::make_result<T>({static_cast<int>(hw), c}, x.requires_grad);
    for (std::size_t p = 0; p < hw; ++p)
        for (int ic = 0; ic < c; ++ic) (*out.data)[p * c + ic] = (*x.data)[ic * hw + p];
    detail::attach(out, {x}, [c, hw](const Tensor<T>& o) {
        const Tensor<T>& x = o.node->parents[0];
        if (!x.grad) return;
        for (std::size_t p = 0; p < hw; ++p)
            for (int ic = 0; ic < c; ++ic) (*x.grad)[ic * hw + p] += (*o.grad)[p * c + ic];
    });
    return out;
}

template <class T>
Tensor<T> lc_to_chw(const Tensor<T>& x, int h, int w) {
    detail::check(x.shape.size() == 2 && x.shape[0] == h * w, "lc_to_chw: token count mismatch");
    const int c = x.shape[1];
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    Tensor<T> out = detail::make_result<T>({c, h, w}, x.requires_grad);
    for (std::size_t p = 0; p < hw; ++p)
        for (int ic = 0; ic < c; ++ic) (*out.data)[ic * hw + p] = (*x.data)[p * c + ic];
    detail::attach(out, {x}, [c, hw](const Tensor<T>& o) {
        const Tensor<T>& x = o.node->parents[0];
        if (!x.grad) return;
        for (std::size_t p = 0; p < hw; ++p)
            for (int ic = 0; ic < c; ++ic) (*x.grad)[p * c + ic] += (*o.grad)[ic * hw + p];
    });
    return out;
}

// --------------------------------------------------------------- utilities

template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> d = sub(a, b);
    return mean_all(mul(d, d));
}

template <class T>
bool all_finite(const Tensor<T>& t) {
    for (T v : *t.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

template <class T>
Tensor<T> randn_scaled(RandomStream& stream, const Shape& s, double std_dev, bool req = true) {
    Tensor<T> t = Tensor<T>::zeros(s, req);
    for (T& x : *t.data) x = static_cast<T>(stream.next_normal() * std_dev);
    return t;
}

}  // namespace lmdiff::nn
