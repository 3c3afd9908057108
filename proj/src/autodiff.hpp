#pragma once

// Reverse-mode autodiff on dense row-major tensors. Small and deterministic:
// dynamic shapes, a one-shot tape per forward/backward pass, and exactly the
// op set the occupancy network needs. Templated so tests can run the same
// graph in double while training runs float.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "common.hpp"

namespace ocf::ad {

template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(size_t(numel_of(shape)), fill);
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            require(d >= 0, Errc::invalid_argument, "negative tensor dimension");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return int64_t(data.size()); }
    int ndim() const { return int(shape.size()); }
    // trailing-axis view: rows * cols with cols = last dimension
    int last_dim() const { return shape.empty() ? 1 : shape.back(); }
    int64_t rows_for_last() const { return last_dim() ? numel() / last_dim() : 0; }

    T& at2(int r, int c) { return data[size_t(r) * shape[1] + c]; }
    T at2(int r, int c) const { return data[size_t(r) * shape[1] + c]; }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape;
}

// Additive attention mask value; exp(x - max) underflows to an exact zero for
// masked entries, which is what makes causality bit-strict.
inline constexpr double kMaskedOut = -1e30;

// ---- tape -------------------------------------------------------------------

template <typename T>
class Tape {
  public:
    // Differentiable leaf. Inputs and parameters enter the same way; the
    // caller decides whose gradients it reads back.
    int leaf(Tensor<T> v) {
        nodes_.push_back(Node{std::move(v), Tensor<T>{}, nullptr});
        return int(nodes_.size()) - 1;
    }

    const Tensor<T>& value(int id) const { return node(id).value; }

    const Tensor<T>& grad(int id) const {
        require(ran_, Errc::invalid_argument, "gradients are only available after backward()");
        return node(id).grad;
    }

    void backward(int loss) {
        require(!ran_, Errc::invalid_argument, "backward() was already run on this tape");
        require(node(loss).value.numel() == 1, Errc::invalid_argument,
                "backward() expects a scalar loss, got " + shape_str(node(loss).value.shape));
        ran_ = true;
        for (Node& n : nodes_) n.grad = Tensor<T>(n.value.shape);
        nodes_[size_t(loss)].grad.data[0] = T(1);
        for (size_t i = nodes_.size(); i-- > 0;)
            if (nodes_[i].back) nodes_[i].back();
    }

    // y = a + b, elementwise; b may also be a trailing-shape tensor broadcast
    // over the leading axes of a (e.g. [N, D] + [D]).
    int add(int a, int b) {
        const Tensor<T>&va = val(a), &vb = val(b);
        bool plain = same_shape(va, vb);
        if (!plain) {
            bool suffix = vb.ndim() <= va.ndim() && vb.numel() > 0;
            for (int i = 0; suffix && i < vb.ndim(); ++i)
                suffix = vb.shape[size_t(vb.ndim() - 1 - i)] ==
                         va.shape[size_t(va.ndim() - 1 - i)];
            require(suffix, Errc::invalid_argument,
                    "add shape mismatch: " + shape_str(va.shape) + " + " + shape_str(vb.shape));
        }
        Tensor<T> out(va.shape);
        int64_t m = vb.numel();
        for (int64_t i = 0; i < va.numel(); ++i)
            out.data[size_t(i)] = va.data[size_t(i)] + vb.data[size_t(i % m)];
        return push(std::move(out), [this, a, b, m](const Tensor<T>& g) {
            Tensor<T>&ga = mut_grad(a), &gb = mut_grad(b);
            for (int64_t i = 0; i < g.numel(); ++i) {
                ga.data[size_t(i)] += g.data[size_t(i)];
                gb.data[size_t(i % m)] += g.data[size_t(i)];
            }
        });
    }

    // y = a * b elementwise
    int mul(int a, int b) {
        const Tensor<T>&va = val(a), &vb = val(b);
        require(same_shape(va, vb), Errc::invalid_argument,
                "mul shape mismatch: " + shape_str(va.shape) + " * " + shape_str(vb.shape));
        Tensor<T> out(va.shape);
        for (int64_t i = 0; i < va.numel(); ++i)
            out.data[size_t(i)] = va.data[size_t(i)] * vb.data[size_t(i)];
        return push(std::move(out), [this, a, b](const Tensor<T>& g) {
            const Tensor<T>&va = val(a), &vb = val(b);
            Tensor<T>&ga = mut_grad(a), &gb = mut_grad(b);
            for (int64_t i = 0; i < g.numel(); ++i) {
                ga.data[size_t(i)] += g.data[size_t(i)] * vb.data[size_t(i)];
                gb.data[size_t(i)] += g.data[size_t(i)] * va.data[size_t(i)];
            }
        });
    }

    int scale(int a, double s) {
        const Tensor<T>& va = val(a);
        Tensor<T> out(va.shape);
        for (int64_t i = 0; i < va.numel(); ++i) out.data[size_t(i)] = T(s) * va.data[size_t(i)];
        return push(std::move(out), [this, a, s](const Tensor<T>& g) {
            Tensor<T>& ga = mut_grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[size_t(i)] += T(s) * g.data[size_t(i)];
        });
    }

    // y = a . b (or a . b^T), 2-D only
    int matmul(int a, int b) { return matmul_impl(a, b, false); }
    int matmul_nt(int a, int b) { return matmul_impl(a, b, true); }

    int relu(int a) {
        const Tensor<T>& va = val(a);
        Tensor<T> out(va.shape);
        for (int64_t i = 0; i < va.numel(); ++i)
            out.data[size_t(i)] = va.data[size_t(i)] > T(0) ? va.data[size_t(i)] : T(0);
        return push(std::move(out), [this, a](const Tensor<T>& g) {
            const Tensor<T>& va = val(a);
            Tensor<T>& ga = mut_grad(a);
            // the subgradient at exactly zero is taken as zero
            for (int64_t i = 0; i < g.numel(); ++i)
                if (va.data[size_t(i)] > T(0)) ga.data[size_t(i)] += g.data[size_t(i)];
        });
    }

    int sigmoid(int a) {
        const Tensor<T>& va = val(a);
        Tensor<T> out(va.shape);
        for (int64_t i = 0; i < va.numel(); ++i) {
            T x = va.data[size_t(i)];
            out.data[size_t(i)] =
                x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
        }
        int id = push(std::move(out), nullptr);
        node(id).back = [this, a, id] {
            const Tensor<T>& y = val(id);
            const Tensor<T>& g = node(id).grad;
            Tensor<T>& ga = mut_grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) {
                T s = y.data[size_t(i)];
                ga.data[size_t(i)] += g.data[size_t(i)] * s * (T(1) - s);
            }
        };
        return id;
    }

    // softmax over the last axis after adding a constant mask tensor of the
    // same shape. Entries masked with kMaskedOut get an exactly-zero weight.
    // Every row must keep at least one unmasked entry.
    int softmax_masked(int a, const Tensor<T>& mask) {
        const Tensor<T>& va = val(a);
        require(va.shape == mask.shape, Errc::invalid_argument,
                "softmax mask shape mismatch: " + shape_str(va.shape) + " vs " +
                    shape_str(mask.shape));
        int cols = va.last_dim();
        require(cols > 0, Errc::invalid_argument, "softmax needs a non-empty last axis");
        int64_t rows = va.rows_for_last();
        Tensor<T> out(va.shape);
        for (int64_t r = 0; r < rows; ++r) {
            const T* x = va.data.data() + r * cols;
            const T* m = mask.data.data() + r * cols;
            T* y = out.data.data() + r * cols;
            bool any_open = false;
            for (int c = 0; c < cols; ++c) any_open = any_open || m[c] > T(kMaskedOut) * T(0.5);
            require(any_open, Errc::invalid_argument, "softmax row is fully masked");
            T best = x[0] + m[0];
            for (int c = 1; c < cols; ++c) best = std::max(best, x[c] + m[c]);
            T sum = T(0);
            for (int c = 0; c < cols; ++c) {
                y[c] = std::exp(x[c] + m[c] - best);
                sum += y[c];
            }
            for (int c = 0; c < cols; ++c) y[c] /= sum;
        }
        int id = push(std::move(out), nullptr);
        node(id).back = [this, a, id, cols] {
            const Tensor<T>& y = val(id);
            const Tensor<T>& g = node(id).grad;
            Tensor<T>& ga = mut_grad(a);
            int64_t rows = y.rows_for_last();
            for (int64_t r = 0; r < rows; ++r) {
                const T* w = y.data.data() + r * cols;
                const T* gy = g.data.data() + r * cols;
                T dot = T(0);
                for (int c = 0; c < cols; ++c) dot += w[c] * gy[c];
                for (int c = 0; c < cols; ++c) ga.data[size_t(r * cols + c)] += w[c] * (gy[c] - dot);
            }
        };
        return id;
    }

    // layer norm over the last axis with learnable gain and bias
    int layernorm(int a, int gamma, int beta) {
        const Tensor<T>& va = val(a);
        int cols = va.last_dim();
        require(cols > 0, Errc::invalid_argument, "layernorm needs a non-empty last axis");
        require(val(gamma).shape == std::vector<int>{cols} &&
                    val(beta).shape == std::vector<int>{cols},
                Errc::invalid_argument,
                "layernorm gain/bias must be " + shape_str({cols}) + ", got " +
                    shape_str(val(gamma).shape) + " and " + shape_str(val(beta).shape));
        int64_t rows = va.rows_for_last();
        Tensor<T> out(va.shape);
        Tensor<T> xhat(va.shape);
        std::vector<T> inv_sd(static_cast<size_t>(rows), T(0));
        const T eps = T(1e-5);
        for (int64_t r = 0; r < rows; ++r) {
            const T* x = va.data.data() + r * cols;
            T mean = T(0);
            for (int c = 0; c < cols; ++c) mean += x[c];
            mean /= T(cols);
            T var = T(0);
            for (int c = 0; c < cols; ++c) var += (x[c] - mean) * (x[c] - mean);
            var /= T(cols);
            T inv = T(1) / std::sqrt(var + eps);
            inv_sd[size_t(r)] = inv;
            for (int c = 0; c < cols; ++c) {
                T xh = (x[c] - mean) * inv;
                xhat.data[size_t(r * cols + c)] = xh;
                out.data[size_t(r * cols + c)] =
                    xh * val(gamma).data[size_t(c)] + val(beta).data[size_t(c)];
            }
        }
        return push(std::move(out),
                    [this, a, gamma, beta, cols, xhat = std::move(xhat),
                     inv_sd = std::move(inv_sd)](const Tensor<T>& g) {
                        const Tensor<T>& vgamma = val(gamma);
                        Tensor<T>&ga = mut_grad(a), &gg = mut_grad(gamma), &gb = mut_grad(beta);
                        int64_t rows = g.rows_for_last();
                        for (int64_t r = 0; r < rows; ++r) {
                            const T* gy = g.data.data() + r * cols;
                            const T* xh = xhat.data.data() + r * cols;
                            T sum_gyg = T(0), sum_gyg_xh = T(0);
                            for (int c = 0; c < cols; ++c) {
                                T gyg = gy[c] * vgamma.data[size_t(c)];
                                sum_gyg += gyg;
                                sum_gyg_xh += gyg * xh[c];
                                gg.data[size_t(c)] += gy[c] * xh[c];
                                gb.data[size_t(c)] += gy[c];
                            }
                            T inv = inv_sd[size_t(r)];
                            for (int c = 0; c < cols; ++c) {
                                T gyg = gy[c] * vgamma.data[size_t(c)];
                                ga.data[size_t(r * cols + c)] +=
                                    inv * (gyg - sum_gyg / T(cols) - xh[c] * sum_gyg_xh / T(cols));
                            }
                        }
                    });
    }

    // concatenation along the last axis of two 2-D tensors
    int concat(int a, int b) {
        const Tensor<T>&va = val(a), &vb = val(b);
        require(va.ndim() == 2 && vb.ndim() == 2 && va.shape[0] == vb.shape[0],
                Errc::invalid_argument,
                "concat shape mismatch: " + shape_str(va.shape) + " | " + shape_str(vb.shape));
        int rows = va.shape[0], ca = va.shape[1], cb = vb.shape[1];
        Tensor<T> out({rows, ca + cb});
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < ca; ++c) out.at2(r, c) = va.at2(r, c);
            for (int c = 0; c < cb; ++c) out.at2(r, ca + c) = vb.at2(r, c);
        }
        return push(std::move(out), [this, a, b, rows, ca, cb](const Tensor<T>& g) {
            Tensor<T>&ga = mut_grad(a), &gb = mut_grad(b);
            for (int r = 0; r < rows; ++r) {
                for (int c = 0; c < ca; ++c) ga.at2(r, c) += g.at2(r, c);
                for (int c = 0; c < cb; ++c) gb.at2(r, c) += g.at2(r, ca + c);
            }
        });
    }

    // columns [c0, c1) of a 2-D tensor
    int slice_cols(int a, int c0, int c1) {
        const Tensor<T>& va = val(a);
        require(va.ndim() == 2 && 0 <= c0 && c0 < c1 && c1 <= va.shape[1],
                Errc::invalid_argument,
                "slice [" + std::to_string(c0) + ", " + std::to_string(c1) + ") out of " +
                    shape_str(va.shape));
        int rows = va.shape[0];
        Tensor<T> out({rows, c1 - c0});
        for (int r = 0; r < rows; ++r)
            for (int c = c0; c < c1; ++c) out.at2(r, c - c0) = va.at2(r, c);
        return push(std::move(out), [this, a, c0, c1, rows](const Tensor<T>& g) {
            Tensor<T>& ga = mut_grad(a);
            for (int r = 0; r < rows; ++r)
                for (int c = c0; c < c1; ++c) ga.at2(r, c) += g.at2(r, c - c0);
        });
    }

    // one row of a 2-D tensor, as shape [D]
    int row(int a, int r) {
        const Tensor<T>& va = val(a);
        require(va.ndim() == 2 && 0 <= r && r < va.shape[0], Errc::invalid_argument,
                "row " + std::to_string(r) + " out of " + shape_str(va.shape));
        int cols = va.shape[1];
        Tensor<T> out({cols});
        for (int c = 0; c < cols; ++c) out.data[size_t(c)] = va.at2(r, c);
        return push(std::move(out), [this, a, r, cols](const Tensor<T>& g) {
            Tensor<T>& ga = mut_grad(a);
            for (int c = 0; c < cols; ++c) ga.at2(r, c) += g.data[size_t(c)];
        });
    }

    // tile a vector [D] into [n, D]
    int broadcast_rows(int a, int n) {
        const Tensor<T>& va = val(a);
        require(va.ndim() == 1 && n > 0, Errc::invalid_argument,
                "broadcast_rows needs a vector, got " + shape_str(va.shape));
        int cols = va.shape[0];
        Tensor<T> out({n, cols});
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < cols; ++c) out.at2(r, c) = va.data[size_t(c)];
        return push(std::move(out), [this, a, n, cols](const Tensor<T>& g) {
            Tensor<T>& ga = mut_grad(a);
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < cols; ++c) ga.data[size_t(c)] += g.at2(r, c);
        });
    }

    // vertical stack of equal-width inputs; a [D] input contributes one row,
    // an [n, D] input contributes n rows
    int stack_rows(const std::vector<int>& ids) {
        require(!ids.empty(), Errc::invalid_argument, "stack_rows needs at least one input");
        int cols = -1, rows = 0;
        for (int id : ids) {
            const Tensor<T>& v = val(id);
            require(v.ndim() == 1 || v.ndim() == 2, Errc::invalid_argument,
                    "stack_rows inputs must be 1-D or 2-D, got " + shape_str(v.shape));
            int c = v.ndim() == 1 ? v.shape[0] : v.shape[1];
            require(cols < 0 || c == cols, Errc::invalid_argument,
                    "stack_rows width mismatch: " + std::to_string(cols) + " vs " +
                        shape_str(v.shape));
            cols = c;
            rows += v.ndim() == 1 ? 1 : v.shape[0];
        }
        Tensor<T> out({rows, cols});
        size_t off = 0;
        for (int id : ids) {
            const Tensor<T>& v = val(id);
            std::copy(v.data.begin(), v.data.end(), out.data.begin() + ptrdiff_t(off));
            off += v.data.size();
        }
        return push(std::move(out), [this, ids](const Tensor<T>& g) {
            size_t off = 0;
            for (int id : ids) {
                Tensor<T>& ga = mut_grad(id);
                for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += g.data[off + i];
                off += ga.data.size();
            }
        });
    }

    // column-wise max over the rows of [N, D] -> [D]; ties keep the lowest row
    int max_rows(int a) {
        const Tensor<T>& va = val(a);
        require(va.ndim() == 2 && va.shape[0] > 0, Errc::invalid_argument,
                "max_rows needs a non-empty 2-D tensor, got " + shape_str(va.shape));
        int n = va.shape[0], cols = va.shape[1];
        Tensor<T> out({cols});
        std::vector<int> arg(size_t(cols), 0);
        for (int c = 0; c < cols; ++c) {
            T best = va.at2(0, c);
            for (int r = 1; r < n; ++r)
                if (va.at2(r, c) > best) {
                    best = va.at2(r, c);
                    arg[size_t(c)] = r;
                }
            out.data[size_t(c)] = best;
        }
        return push(std::move(out), [this, a, cols, arg = std::move(arg)](const Tensor<T>& g) {
            Tensor<T>& ga = mut_grad(a);
            for (int c = 0; c < cols; ++c) ga.at2(arg[size_t(c)], c) += g.data[size_t(c)];
        });
    }

    int sum_all(int a) {
        const Tensor<T>& va = val(a);
        Tensor<T> out({1});
        for (T x : va.data) out.data[0] += x;
        return push(std::move(out), [this, a](const Tensor<T>& g) {
            Tensor<T>& ga = mut_grad(a);
            for (T& x : ga.data) x += g.data[0];
        });
    }

    // mean binary cross-entropy of probabilities against constant targets,
    // probabilities clamped to [eps, 1-eps]
    int bce(int a, const Tensor<T>& target) {
        const Tensor<T>& va = val(a);
        require(same_shape(va, target), Errc::invalid_argument,
                "bce shape mismatch: " + shape_str(va.shape) + " vs " + shape_str(target.shape));
        require(va.numel() > 0, Errc::invalid_argument, "bce over an empty tensor");
        const T eps = T(1e-7);
        int64_t n = va.numel();
        Tensor<T> out({1});
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) {
            T p = std::min(std::max(va.data[size_t(i)], eps), T(1) - eps);
            T y = target.data[size_t(i)];
            acc -= y * std::log(p) + (T(1) - y) * std::log(T(1) - p);
        }
        out.data[0] = acc / T(n);
        return push(std::move(out), [this, a, target, eps, n](const Tensor<T>& g) {
            const Tensor<T>& va = val(a);
            Tensor<T>& ga = mut_grad(a);
            for (int64_t i = 0; i < n; ++i) {
                T p = va.data[size_t(i)];
                if (p <= eps || p >= T(1) - eps) continue;  // clamped flat region
                T y = target.data[size_t(i)];
                ga.data[size_t(i)] += g.data[0] * (p - y) / (p * (T(1) - p)) / T(n);
            }
        });
    }

    // mean absolute error against constant targets
    int l1(int a, const Tensor<T>& target) {
        const Tensor<T>& va = val(a);
        require(same_shape(va, target), Errc::invalid_argument,
                "l1 shape mismatch: " + shape_str(va.shape) + " vs " + shape_str(target.shape));
        require(va.numel() > 0, Errc::invalid_argument, "l1 over an empty tensor");
        int64_t n = va.numel();
        Tensor<T> out({1});
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) acc += std::abs(va.data[size_t(i)] - target.data[size_t(i)]);
        out.data[0] = acc / T(n);
        return push(std::move(out), [this, a, target, n](const Tensor<T>& g) {
            const Tensor<T>& va = val(a);
            Tensor<T>& ga = mut_grad(a);
            for (int64_t i = 0; i < n; ++i) {
                T d = va.data[size_t(i)] - target.data[size_t(i)];
                if (d == T(0)) continue;
                ga.data[size_t(i)] += g.data[0] * (d > T(0) ? T(1) : T(-1)) / T(n);
            }
        });
    }

    size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::function<void()> back;
    };

    Node& node(int id) {
        require(id >= 0 && size_t(id) < nodes_.size(), Errc::invalid_argument, "bad tape id");
        return nodes_[size_t(id)];
    }
    const Node& node(int id) const {
        require(id >= 0 && size_t(id) < nodes_.size(), Errc::invalid_argument, "bad tape id");
        return nodes_[size_t(id)];
    }
    const Tensor<T>& val(int id) { return node(id).value; }
    Tensor<T>& mut_grad(int id) { return node(id).grad; }

    int push(Tensor<T> value, std::function<void(const Tensor<T>&)> back_fn) {
        int id = int(nodes_.size());
        nodes_.push_back(Node{std::move(value), Tensor<T>{}, nullptr});
        if (back_fn)
            nodes_.back().back = [this, id, fn = std::move(back_fn)] { fn(nodes_[size_t(id)].grad); };
        return id;
    }

    int matmul_impl(int a, int b, bool transpose_b) {
        const Tensor<T>&va = val(a), &vb = val(b);
        require(va.ndim() == 2 && vb.ndim() == 2, Errc::invalid_argument,
                "matmul needs 2-D tensors: " + shape_str(va.shape) + " x " + shape_str(vb.shape));
        int m = va.shape[0], k = va.shape[1];
        int bk = transpose_b ? vb.shape[1] : vb.shape[0];
        int n = transpose_b ? vb.shape[0] : vb.shape[1];
        require(k == bk, Errc::invalid_argument,
                std::string("matmul shape mismatch: ") + shape_str(va.shape) +
                    (transpose_b ? " x T" : " x ") + shape_str(vb.shape));
        // All loops below are arranged so the innermost index walks rows of
        // row-major storage with unit stride; this is the training hot path.
        Tensor<T> out({m, n});
        {
            const T* A = va.data.data();
            const T* B = vb.data.data();
            T* C = out.data.data();
            if (transpose_b) {
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const T* ai = A + size_t(i) * size_t(k);
                        const T* bj = B + size_t(j) * size_t(k);
                        T acc = T(0);
                        for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
                        C[size_t(i) * size_t(n) + size_t(j)] = acc;
                    }
            } else {
                for (int i = 0; i < m; ++i) {
                    const T* ai = A + size_t(i) * size_t(k);
                    T* ci = C + size_t(i) * size_t(n);
                    for (int p = 0; p < k; ++p) {
                        T aip = ai[p];
                        const T* bp = B + size_t(p) * size_t(n);
                        for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
                    }
                }
            }
        }
        return push(std::move(out), [this, a, b, m, n, k, transpose_b](const Tensor<T>& g) {
            const Tensor<T>&va = val(a), &vb = val(b);
            Tensor<T>&ga = mut_grad(a), &gb = mut_grad(b);
            const T* A = va.data.data();
            const T* B = vb.data.data();
            const T* G = g.data.data();
            T* GA = ga.data.data();
            T* GB = gb.data.data();
            if (transpose_b) {
                // ga(i,p) += sum_j g(i,j) * vb(j,p); gb(j,p) += sum_i g(i,j) * va(i,p)
                for (int i = 0; i < m; ++i) {
                    const T* gi = G + size_t(i) * size_t(n);
                    const T* ai = A + size_t(i) * size_t(k);
                    T* gai = GA + size_t(i) * size_t(k);
                    for (int j = 0; j < n; ++j) {
                        T gij = gi[j];
                        const T* bj = B + size_t(j) * size_t(k);
                        T* gbj = GB + size_t(j) * size_t(k);
                        for (int p = 0; p < k; ++p) {
                            gai[p] += gij * bj[p];
                            gbj[p] += gij * ai[p];
                        }
                    }
                }
            } else {
                // ga(i,p) += sum_j g(i,j) * vb(p,j); gb(p,j) += sum_i va(i,p) * g(i,j)
                for (int i = 0; i < m; ++i) {
                    const T* gi = G + size_t(i) * size_t(n);
                    const T* ai = A + size_t(i) * size_t(k);
                    T* gai = GA + size_t(i) * size_t(k);
                    for (int p = 0; p < k; ++p) {
                        const T* bp = B + size_t(p) * size_t(n);
                        T* gbp = GB + size_t(p) * size_t(n);
                        T aip = ai[p];
                        T acc = T(0);
                        for (int j = 0; j < n; ++j) {
                            acc += gi[j] * bp[j];
                            gbp[j] += aip * gi[j];
                        }
                        gai[p] += acc;
                    }
                }
            }
        });
    }

    std::vector<Node> nodes_;
    bool ran_ = false;
};

// ---- parameters and the optimizer ---------------------------------------------

template <typename T>
struct Params {
    std::map<std::string, Tensor<T>> tensors;  // ordered names = stable manifest

    Tensor<T>& add(const std::string& name, std::vector<int> shape) {
        require(!tensors.count(name), Errc::invalid_argument, "duplicate parameter " + name);
        return tensors.emplace(name, Tensor<T>(std::move(shape))).first->second;
    }
    Tensor<T>& at(const std::string& name) {
        auto it = tensors.find(name);
        require(it != tensors.end(), Errc::invalid_argument, "unknown parameter " + name);
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = tensors.find(name);
        require(it != tensors.end(), Errc::invalid_argument, "unknown parameter " + name);
        return it->second;
    }
    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& [k, v] : tensors) n += v.numel();
        return n;
    }
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    std::map<std::string, Tensor<T>> m, v;
    int64_t step = 0;
};

// Half-cosine decay from base_lr to zero across total_steps.
inline double cosine_lr(double base_lr, int64_t step, int64_t total_steps) {
    require(total_steps > 0, Errc::invalid_argument, "cosine schedule needs total_steps > 0");
    if (step >= total_steps) return 0.0;
    double t = double(step) / double(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// One Adam update with bias correction. Parameters without a gradient entry
// are left untouched; non-finite gradients abort with the tensor named.
template <typename T>
void adam_step(Params<T>& params, const std::map<std::string, Tensor<T>>& grads,
               AdamState<T>& state, const AdamConfig& cfg, double lr_scale = 1.0) {
    state.step += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
    for (auto& [name, p] : params.tensors) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor<T>& g = git->second;
        require(same_shape(p, g), Errc::invalid_argument,
                "gradient shape mismatch for " + name + ": " + shape_str(p.shape) + " vs " +
                    shape_str(g.shape));
        for (int64_t i = 0; i < g.numel(); ++i)
            require(std::isfinite(double(g.data[size_t(i)])), Errc::internal,
                    "non-finite gradient in " + name + " at step " + std::to_string(state.step));
        Tensor<T>& m = state.m.try_emplace(name, Tensor<T>(p.shape)).first->second;
        Tensor<T>& v = state.v.try_emplace(name, Tensor<T>(p.shape)).first->second;
        for (int64_t i = 0; i < p.numel(); ++i) {
            size_t s = size_t(i);
            m.data[s] = T(cfg.beta1) * m.data[s] + T(1.0 - cfg.beta1) * g.data[s];
            v.data[s] = T(cfg.beta2) * v.data[s] + T(1.0 - cfg.beta2) * g.data[s] * g.data[s];
            double mh = double(m.data[s]) / bc1;
            double vh = double(v.data[s]) / bc2;
            p.data[s] -= T(cfg.lr * lr_scale * mh / (std::sqrt(vh) + cfg.eps));
        }
    }
}

// ---- non-learnable helpers ------------------------------------------------------

// Classic sinusoidal position code: even columns sine, odd columns cosine,
// wavelengths geometric from 2*pi to 10000*2*pi.
template <typename T>
Tensor<T> sinusoidal_pe(const std::vector<double>& positions, int dim) {
    require(dim > 0 && dim % 2 == 0, Errc::invalid_argument,
            "position code width must be positive and even");
    Tensor<T> out({int(positions.size()), dim});
    for (size_t i = 0; i < positions.size(); ++i)
        for (int k = 0; k < dim / 2; ++k) {
            double freq = std::pow(10000.0, -2.0 * double(k) / double(dim));
            out.at2(int(i), 2 * k) = T(std::sin(positions[i] * freq));
            out.at2(int(i), 2 * k + 1) = T(std::cos(positions[i] * freq));
        }
    return out;
}

// Deterministic init helpers.
template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
    for (T& x : t.data) x = T(rng.uniform(lo, hi));
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double sigma) {
    for (T& x : t.data) x = T(rng.normal(0.0, sigma));
}

}  // namespace ocf::ad
