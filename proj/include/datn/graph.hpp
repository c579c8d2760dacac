#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "datn/sparsemax.hpp"
#include "datn/tensor.hpp"

namespace datn {

// Reverse-mode computation graph. Nodes are appended in creation order, which
// is already a topological order, so backward() is a single reverse sweep.
// Calling backward() twice without zeroing parameter accumulators adds into
// them; node-local gradients are reset at the start of every sweep.

struct ParamTensor {
    std::string name;
    Tensor value;
    Tensor grad;

    ParamTensor(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        grad = Tensor(value.shape);
    }
    void zero_grad() { grad.fill(0.0); }
};

class Graph;

struct Node {
    Graph* graph = nullptr;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Node&)> backward_fn;
};

class Value {
public:
    Value() = default;
    explicit Value(Node* n) : node_(n) {}

    bool valid() const { return node_ != nullptr; }
    Node* node() const { return node_; }
    Graph& graph() const { return *node_->graph; }
    const Tensor& val() const { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    std::size_t rows() const { return node_->value.rows(); }
    std::size_t cols() const { return node_->value.cols(); }

private:
    Node* node_ = nullptr;
};

namespace detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

inline ECMap cmap(const Tensor& t) { return ECMap(t.data.data(), long(t.rows()), long(t.cols())); }
inline EMap map(Tensor& t) { return EMap(t.data.data(), long(t.rows()), long(t.cols())); }

inline void softmax_row_inplace(double* p, std::size_t n) {
    double mx = p[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, p[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        p[j] = std::exp(p[j] - mx);
        sum += p[j];
    }
    for (std::size_t j = 0; j < n; ++j) p[j] /= sum;
}

}  // namespace detail

class Graph {
public:
    Graph() = default;
    // grad_enabled=false builds a forward-only graph (no backward closures).
    explicit Graph(bool grad_enabled) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    Value constant(Tensor t) {
        Node& n = alloc();
        n.value = std::move(t);
        return Value(&n);
    }

    Value scalar(double v) { return constant(Tensor::scalar(v)); }

    // Leaf whose gradient flows into the persistent parameter accumulator.
    Value param(ParamTensor& p) {
        Node& n = alloc();
        n.value = p.value;
        if (grad_enabled_) {
            n.requires_grad = true;
            ParamTensor* pp = &p;
            n.backward_fn = [pp](Node& self) {
                for (std::size_t i = 0; i < self.grad.numel(); ++i) pp->grad[i] += self.grad[i];
            };
        }
        return Value(&n);
    }

    void backward(Value root) {
        if (!root.valid() || !root.val().is_scalar())
            throw std::invalid_argument("backward: root must be a scalar");
        for (Node& n : nodes_) {
            if (n.requires_grad) {
                if (!n.grad.same_shape(n.value)) n.grad = Tensor(n.value.shape);
                else n.grad.fill(0.0);
            }
        }
        root.node()->grad = Tensor::scalar(1.0);
        bool seen_root = false;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (&*it == root.node()) seen_root = true;
            if (!seen_root) continue;  // nodes created after the root cannot feed it
            if (it->requires_grad && it->backward_fn) it->backward_fn(*it);
        }
    }

    std::size_t size() const { return nodes_.size(); }

    Node& alloc() {
        nodes_.emplace_back();
        nodes_.back().graph = this;
        return nodes_.back();
    }

private:
    std::deque<Node> nodes_;  // stable addresses, creation order = topo order
    bool grad_enabled_ = true;
};

namespace detail {

inline Node& make_node(Graph& g, Tensor value, std::initializer_list<Value> parents) {
    Node& n = g.alloc();
    n.value = std::move(value);
    for (const Value& p : parents)
        if (p.node()->requires_grad) n.requires_grad = true;
    return n;
}

inline void accum(Node* parent, const Tensor& delta) {
    if (!parent->requires_grad) return;
    for (std::size_t i = 0; i < delta.numel(); ++i) parent->grad[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

inline Value matmul(Value a, Value b) {
    const Tensor& A = a.val();
    const Tensor& B = b.val();
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
        throw std::invalid_argument("matmul: incompatible shapes " + A.shape_str() + " " +
                                    B.shape_str());
    Tensor out({A.rows(), B.cols()});
    detail::map(out).noalias() = detail::cmap(A) * detail::cmap(B);
    Node& n = detail::make_node(a.graph(), std::move(out), {a, b});
    if (n.requires_grad) {
        Node* pa = a.node();
        Node* pb = b.node();
        n.backward_fn = [pa, pb](Node& self) {
            if (pa->requires_grad)
                detail::map(pa->grad).noalias() += detail::cmap(self.grad) * detail::cmap(pb->value).transpose();
            if (pb->requires_grad)
                detail::map(pb->grad).noalias() += detail::cmap(pa->value).transpose() * detail::cmap(self.grad);
        };
    }
    return Value(&n);
}

// Forward pass with a fixed i-k-j accumulation order: each output element is
// a strictly sequential sum over k. Attention value reads use this so that
// exact-zero weights are bit-level no-ops no matter how the surrounding
// matrix is sized or laid out.
inline Value matmul_rowseq(Value a, Value b) {
    const Tensor& A = a.val();
    const Tensor& B = b.val();
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
        throw std::invalid_argument("matmul_rowseq: incompatible shapes " + A.shape_str() + " " +
                                    B.shape_str());
    const std::size_t m = A.rows(), kk = A.cols(), nn = B.cols();
    Tensor out({m, nn});
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data.data() + i * nn;
        const double* arow = A.data.data() + i * kk;
        for (std::size_t k = 0; k < kk; ++k) {
            const double av = arow[k];
            const double* brow = B.data.data() + k * nn;
            for (std::size_t j = 0; j < nn; ++j) orow[j] += av * brow[j];
        }
    }
    Node& n = detail::make_node(a.graph(), std::move(out), {a, b});
    if (n.requires_grad) {
        Node* pa = a.node();
        Node* pb = b.node();
        n.backward_fn = [pa, pb](Node& self) {
            if (pa->requires_grad)
                detail::map(pa->grad).noalias() += detail::cmap(self.grad) * detail::cmap(pb->value).transpose();
            if (pb->requires_grad)
                detail::map(pb->grad).noalias() += detail::cmap(pa->value).transpose() * detail::cmap(self.grad);
        };
    }
    return Value(&n);
}

// a * b^T without materializing the transpose.
inline Value matmul_nt(Value a, Value b) {
    const Tensor& A = a.val();
    const Tensor& B = b.val();
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.cols())
        throw std::invalid_argument("matmul_nt: incompatible shapes " + A.shape_str() + " " +
                                    B.shape_str());
    Tensor out({A.rows(), B.rows()});
    detail::map(out).noalias() = detail::cmap(A) * detail::cmap(B).transpose();
    Node& n = detail::make_node(a.graph(), std::move(out), {a, b});
    if (n.requires_grad) {
        Node* pa = a.node();
        Node* pb = b.node();
        n.backward_fn = [pa, pb](Node& self) {
            if (pa->requires_grad)
                detail::map(pa->grad).noalias() += detail::cmap(self.grad) * detail::cmap(pb->value);
            if (pb->requires_grad)
                detail::map(pb->grad).noalias() += detail::cmap(self.grad).transpose() * detail::cmap(pa->value);
        };
    }
    return Value(&n);
}

inline Value add(Value a, Value b) {
    if (!a.val().same_shape(b.val()))
        throw std::invalid_argument("add: shape mismatch " + a.val().shape_str() + " " +
                                    b.val().shape_str());
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.val()[i];
    Node& n = detail::make_node(a.graph(), std::move(out), {a, b});
    if (n.requires_grad) {
        Node* pa = a.node();
        Node* pb = b.node();
        n.backward_fn = [pa, pb](Node& self) {
            detail::accum(pa, self.grad);
            detail::accum(pb, self.grad);
        };
    }
    return Value(&n);
}

// Matrix plus a row vector broadcast over rows (bias add, additive masks).
inline Value add_rowvec(Value a, Value v) {
    const Tensor& A = a.val();
    const Tensor& V = v.val();
    if (V.rows() != 1 || V.cols() != A.cols())
        throw std::invalid_argument("add_rowvec: vector shape " + V.shape_str() +
                                    " does not match " + A.shape_str());
    Tensor out = A;
    const std::size_t r = A.rows(), c = A.cols();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] += V[j];
    Node& n = detail::make_node(a.graph(), std::move(out), {a, v});
    if (n.requires_grad) {
        Node* pa = a.node();
        Node* pv = v.node();
        n.backward_fn = [pa, pv, r, c](Node& self) {
            detail::accum(pa, self.grad);
            if (pv->requires_grad)
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) pv->grad[j] += self.grad[i * c + j];
        };
    }
    return Value(&n);
}

inline Value scale(Value a, double c) {
    Tensor out = a.val();
    for (double& x : out.data) x *= c;
    Node& n = detail::make_node(a.graph(), std::move(out), {a});
    if (n.requires_grad) {
        Node* pa = a.node();
        n.backward_fn = [pa, c](Node& self) {
            for (std::size_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += c * self.grad[i];
        };
    }
    return Value(&n);
}

inline Value mul(Value a, Value b) {
    if (!a.val().same_shape(b.val()))
        throw std::invalid_argument("mul: shape mismatch");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.val()[i];
    Node& n = detail::make_node(a.graph(), std::move(out), {a, b});
    if (n.requires_grad) {
        Node* pa = a.node();
        Node* pb = b.node();
        n.backward_fn = [pa, pb](Node& self) {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < self.grad.numel(); ++i)
                    pa->grad[i] += self.grad[i] * pb->value[i];
            if (pb->requires_grad)
                for (std::size_t i = 0; i < self.grad.numel(); ++i)
                    pb->grad[i] += self.grad[i] * pa->value[i];
        };
    }
    return Value(&n);
}

inline Value relu(Value a) {
    Tensor out = a.val();
    for (double& x : out.data) x = x > 0.0 ? x : 0.0;
    Node& n = detail::make_node(a.graph(), std::move(out), {a});
    if (n.requires_grad) {
        Node* pa = a.node();
        n.backward_fn = [pa](Node& self) {
            for (std::size_t i = 0; i < self.grad.numel(); ++i)
                if (pa->value[i] > 0.0) pa->grad[i] += self.grad[i];
        };
    }
    return Value(&n);
}

inline Value sigmoid(Value a) {
    Tensor out = a.val();
    for (double& x : out.data) x = 1.0 / (1.0 + std::exp(-x));
    Node& n = detail::make_node(a.graph(), std::move(out), {a});
    if (n.requires_grad) {
        Node* pa = a.node();
        n.backward_fn = [pa](Node& self) {
            for (std::size_t i = 0; i < self.grad.numel(); ++i) {
                const double s = self.value[i];
                pa->grad[i] += self.grad[i] * s * (1.0 - s);
            }
        };
    }
    return Value(&n);
}

// Numerically stable row-wise softmax (max subtraction).
inline Value softmax_rows(Value a) {
    check_finite(a.val(), "softmax");
    Tensor out = a.val();
    const std::size_t r = out.rows(), c = out.cols();
    if (c == 0) throw std::invalid_argument("softmax: empty rows");
    for (std::size_t i = 0; i < r; ++i) detail::softmax_row_inplace(out.data.data() + i * c, c);
    Node& n = detail::make_node(a.graph(), std::move(out), {a});
    if (n.requires_grad) {
        Node* pa = a.node();
        n.backward_fn = [pa, r, c](Node& self) {
            for (std::size_t i = 0; i < r; ++i) {
                const double* p = self.value.data.data() + i * c;
                const double* u = self.grad.data.data() + i * c;
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += p[j] * u[j];
                double* g = pa->grad.data.data() + i * c;
                for (std::size_t j = 0; j < c; ++j) g[j] += p[j] * (u[j] - dot);
            }
        };
    }
    return Value(&n);
}

inline Value sparsemax_rows(Value a) {
    auto res = std::make_shared<SparsemaxResult>(sparsemax(a.val()));
    Node& n = detail::make_node(a.graph(), res->probs, {a});
    if (n.requires_grad) {
        Node* pa = a.node();
        n.backward_fn = [pa, res](Node& self) {
            detail::accum(pa, sparsemax_backward(self.grad, *res));
        };
    }
    return Value(&n);
}

// Row-wise layer normalization with affine gain/bias over the feature axis.
inline Value layer_norm_rows(Value x, Value gain, Value bias, double eps = 1e-6) {
    const Tensor& X = x.val();
    const std::size_t r = X.rows(), c = X.cols();
    if (c == 0) throw std::invalid_argument("layer_norm: empty feature vector");
    if (gain.val().numel() != c || bias.val().numel() != c)
        throw std::invalid_argument("layer_norm: gain/bias do not match feature dim");
    auto xhat = std::make_shared<Tensor>(Tensor({r, c}));
    auto inv_std = std::make_shared<std::vector<double>>(r);
    Tensor out({r, c});
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = X.data.data() + i * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += row[j];
        mean /= double(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= double(c);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = inv;
        for (std::size_t j = 0; j < c; ++j) {
            const double xh = (row[j] - mean) * inv;
            xhat->data[i * c + j] = xh;
            out.data[i * c + j] = gain.val()[j] * xh + bias.val()[j];
        }
    }
    Node& n = detail::make_node(x.graph(), std::move(out), {x, gain, bias});
    if (n.requires_grad) {
        Node* px = x.node();
        Node* pg = gain.node();
        Node* pb = bias.node();
        n.backward_fn = [px, pg, pb, xhat, inv_std, r, c](Node& self) {
            for (std::size_t i = 0; i < r; ++i) {
                const double* dy = self.grad.data.data() + i * c;
                const double* xh = xhat->data.data() + i * c;
                if (pg->requires_grad)
                    for (std::size_t j = 0; j < c; ++j) pg->grad[j] += dy[j] * xh[j];
                if (pb->requires_grad)
                    for (std::size_t j = 0; j < c; ++j) pb->grad[j] += dy[j];
                if (px->requires_grad) {
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = dy[j] * pg->value[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                    }
                    const double inv = (*inv_std)[i];
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = dy[j] * pg->value[j];
                        px->grad[i * c + j] +=
                            inv * (dxh - sum_dxh / double(c) - xh[j] * sum_dxh_xh / double(c));
                    }
                }
            }
        };
    }
    return Value(&n);
}

// Inverted dropout; at rate 0 or when disabled this is the identity.
inline Value dropout(Value a, double rate, Rng& rng, bool enabled) {
    if (!enabled || rate == 0.0) return a;
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
    auto mask = std::make_shared<Tensor>(a.val().shape);
    std::bernoulli_distribution keep(1.0 - rate);
    const double inv_keep = 1.0 / (1.0 - rate);
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double m = keep(rng) ? inv_keep : 0.0;
        mask->data[i] = m;
        out[i] *= m;
    }
    Node& n = detail::make_node(a.graph(), std::move(out), {a});
    if (n.requires_grad) {
        Node* pa = a.node();
        n.backward_fn = [pa, mask](Node& self) {
            for (std::size_t i = 0; i < self.grad.numel(); ++i)
                pa->grad[i] += self.grad[i] * mask->data[i];
        };
    }
    return Value(&n);
}

// Row gather from an embedding table; gradients scatter back into the table.
inline Value embedding(Value table, const std::vector<int>& ids) {
    const Tensor& T = table.val();
    if (T.rank() != 2) throw std::invalid_argument("embedding: table must be rank 2");
    const std::size_t v = T.rows(), d = T.cols();
    for (int id : ids)
        if (id < 0 || std::size_t(id) >= v)
            throw std::out_of_range("embedding: token id " + std::to_string(id) +
                                    " outside vocab of size " + std::to_string(v));
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(T.data.data() + std::size_t(ids[i]) * d, d, out.data.data() + i * d);
    Node& n = detail::make_node(table.graph(), std::move(out), {table});
    if (n.requires_grad) {
        Node* pt = table.node();
        auto idc = std::make_shared<std::vector<int>>(ids);
        n.backward_fn = [pt, idc, d](Node& self) {
            for (std::size_t i = 0; i < idc->size(); ++i) {
                const double* g = self.grad.data.data() + i * d;
                double* dst = pt->grad.data.data() + std::size_t((*idc)[i]) * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        };
    }
    return Value(&n);
}

inline Value concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const std::size_t c = parts[0].cols();
    std::size_t r = 0;
    bool rg = false;
    for (const Value& p : parts) {
        if (p.cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
        r += p.rows();
        rg = rg || p.node()->requires_grad;
    }
    Tensor out({r, c});
    std::size_t off = 0;
    for (const Value& p : parts) {
        std::copy(p.val().data.begin(), p.val().data.end(), out.data.begin() + off);
        off += p.val().numel();
    }
    Node& n = parts[0].graph().alloc();
    n.value = std::move(out);
    n.requires_grad = rg;
    if (rg) {
        auto srcs = std::make_shared<std::vector<Node*>>();
        for (const Value& p : parts) srcs->push_back(p.node());
        n.backward_fn = [srcs](Node& self) {
            std::size_t off2 = 0;
            for (Node* s : *srcs) {
                if (s->requires_grad)
                    for (std::size_t i = 0; i < s->value.numel(); ++i)
                        s->grad[i] += self.grad[off2 + i];
                off2 += s->value.numel();
            }
        };
    }
    return Value(&n);
}

inline Value slice_rows(Value a, std::size_t r0, std::size_t r1) {
    const Tensor& A = a.val();
    if (r0 >= r1 || r1 > A.rows()) throw std::invalid_argument("slice_rows: bad range");
    const std::size_t c = A.cols();
    Tensor out({r1 - r0, c});
    std::copy_n(A.data.data() + r0 * c, (r1 - r0) * c, out.data.data());
    Node& n = detail::make_node(a.graph(), std::move(out), {a});
    if (n.requires_grad) {
        Node* pa = a.node();
        n.backward_fn = [pa, r0, c](Node& self) {
            for (std::size_t i = 0; i < self.grad.numel(); ++i) pa->grad[r0 * c + i] += self.grad[i];
        };
    }
    return Value(&n);
}

inline Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::size_t r = parts[0].rows();
    std::size_t c = 0;
    bool rg = false;
    for (const Value& p : parts) {
        if (p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
        c += p.cols();
        rg = rg || p.node()->requires_grad;
    }
    Tensor out({r, c});
    std::size_t coff = 0;
    for (const Value& p : parts) {
        const std::size_t pc = p.cols();
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(p.val().data.data() + i * pc, pc, out.data.data() + i * c + coff);
        coff += pc;
    }
    Node& n = parts[0].graph().alloc();
    n.value = std::move(out);
    n.requires_grad = rg;
    if (rg) {
        auto srcs = std::make_shared<std::vector<Node*>>();
        for (const Value& p : parts) srcs->push_back(p.node());
        n.backward_fn = [srcs, r, c](Node& self) {
            std::size_t coff2 = 0;
            for (Node* s : *srcs) {
                const std::size_t pc = s->value.cols();
                if (s->requires_grad)
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < pc; ++j)
                            s->grad[i * pc + j] += self.grad[i * c + coff2 + j];
                coff2 += pc;
            }
        };
    }
    return Value(&n);
}

inline Value slice_cols(Value a, std::size_t c0, std::size_t c1) {
    const Tensor& A = a.val();
    if (c0 >= c1 || c1 > A.cols()) throw std::invalid_argument("slice_cols: bad range");
    const std::size_t r = A.rows(), c = A.cols(), w = c1 - c0;
    Tensor out({r, w});
    for (std::size_t i = 0; i < r; ++i)
        std::copy_n(A.data.data() + i * c + c0, w, out.data.data() + i * w);
    Node& n = detail::make_node(a.graph(), std::move(out), {a});
    if (n.requires_grad) {
        Node* pa = a.node();
        n.backward_fn = [pa, c0, c, w, r](Node& self) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    pa->grad[i * c + c0 + j] += self.grad[i * w + j];
        };
    }
    return Value(&n);
}

// Mean of each contiguous row range; used for sentence representations.
inline Value segment_mean_rows(Value a, const std::vector<std::pair<std::size_t, std::size_t>>& bounds) {
    const Tensor& A = a.val();
    const std::size_t c = A.cols();
    Tensor out({bounds.size(), c});
    for (std::size_t s = 0; s < bounds.size(); ++s) {
        const auto [b0, b1] = bounds[s];
        if (b0 >= b1 || b1 > A.rows()) throw std::invalid_argument("segment_mean_rows: bad bounds");
        for (std::size_t i = b0; i < b1; ++i)
            for (std::size_t j = 0; j < c; ++j) out.data[s * c + j] += A.data[i * c + j];
        const double inv = 1.0 / double(b1 - b0);
        for (std::size_t j = 0; j < c; ++j) out.data[s * c + j] *= inv;
    }
    Node& n = detail::make_node(a.graph(), std::move(out), {a});
    if (n.requires_grad) {
        Node* pa = a.node();
        auto bds = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>(bounds);
        n.backward_fn = [pa, bds, c](Node& self) {
            for (std::size_t s = 0; s < bds->size(); ++s) {
                const auto [b0, b1] = (*bds)[s];
                const double inv = 1.0 / double(b1 - b0);
                for (std::size_t i = b0; i < b1; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        pa->grad[i * c + j] += self.grad[s * c + j] * inv;
            }
        };
    }
    return Value(&n);
}

// out[i][j] = m[i][j] * weights[i]; weights is a column (rows x 1 or rank 1).
inline Value colwise_scale(Value m, Value weights) {
    const Tensor& M = m.val();
    const Tensor& W = weights.val();
    const std::size_t r = M.rows(), c = M.cols();
    if (W.numel() != r) throw std::invalid_argument("colwise_scale: weight length mismatch");
    Tensor out = M;
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] *= W[i];
    Node& n = detail::make_node(m.graph(), std::move(out), {m, weights});
    if (n.requires_grad) {
        Node* pm = m.node();
        Node* pw = weights.node();
        n.backward_fn = [pm, pw, r, c](Node& self) {
            for (std::size_t i = 0; i < r; ++i) {
                if (pm->requires_grad)
                    for (std::size_t j = 0; j < c; ++j)
                        pm->grad[i * c + j] += self.grad[i * c + j] * pw->value[i];
                if (pw->requires_grad) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j)
                        dot += self.grad[i * c + j] * pm->value[i * c + j];
                    pw->grad[i] += dot;
                }
            }
        };
    }
    return Value(&n);
}

// out[i] = mask[i] ? fill : a[i]; gradient is blocked where filled.
inline Value masked_fill(Value a, const std::vector<char>& mask, double fill) {
    if (mask.size() != a.val().numel()) throw std::invalid_argument("masked_fill: mask size mismatch");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i)
        if (mask[i]) out[i] = fill;
    Node& n = detail::make_node(a.graph(), std::move(out), {a});
    if (n.requires_grad) {
        Node* pa = a.node();
        auto m = std::make_shared<std::vector<char>>(mask);
        n.backward_fn = [pa, m](Node& self) {
            for (std::size_t i = 0; i < self.grad.numel(); ++i)
                if (!(*m)[i]) pa->grad[i] += self.grad[i];
        };
    }
    return Value(&n);
}

inline Value sum_all(Value a) {
    double s = 0.0;
    for (double v : a.val().data) s += v;
    Node& n = detail::make_node(a.graph(), Tensor::scalar(s), {a});
    if (n.requires_grad) {
        Node* pa = a.node();
        n.backward_fn = [pa](Node& self) {
            const double g = self.grad[0];
            for (std::size_t i = 0; i < pa->grad.numel(); ++i) pa->grad[i] += g;
        };
    }
    return Value(&n);
}

// Sum over rows of -sum_v q_v log p_v with p = softmax(logits) and
// q = (1-eps) * onehot(target) + eps/V.
inline Value cross_entropy_label_smoothed(Value logits, const std::vector<int>& targets,
                                          double smoothing) {
    const Tensor& L = logits.val();
    const std::size_t r = L.rows(), v = L.cols();
    if (targets.size() != r) throw std::invalid_argument("cross_entropy: target count mismatch");
    for (int t : targets)
        if (t < 0 || std::size_t(t) >= v)
            throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                                    " outside vocab of size " + std::to_string(v));
    check_finite(L, "cross_entropy");
    auto probs = std::make_shared<Tensor>(L);
    double total = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        double* row = probs->data.data() + i * v;
        const double* l = L.data.data() + i * v;
        double mx = l[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, l[j]);
        double sum = 0.0, lsum = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            sum += std::exp(l[j] - mx);
            lsum += l[j];
        }
        const double lse = mx + std::log(sum);
        total += lse - (1.0 - smoothing) * l[targets[i]] - (smoothing / double(v)) * lsum;
        for (std::size_t j = 0; j < v; ++j) row[j] = std::exp(l[j] - lse);
    }
    Node& n = detail::make_node(logits.graph(), Tensor::scalar(total), {logits});
    if (n.requires_grad) {
        Node* pl = logits.node();
        auto tg = std::make_shared<std::vector<int>>(targets);
        n.backward_fn = [pl, tg, probs, smoothing, r, v](Node& self) {
            const double g = self.grad[0];
            const double unif = smoothing / double(v);
            for (std::size_t i = 0; i < r; ++i) {
                const double* p = probs->data.data() + i * v;
                double* d = pl->grad.data.data() + i * v;
                for (std::size_t j = 0; j < v; ++j) d[j] += g * (p[j] - unif);
                d[(*tg)[i]] -= g * (1.0 - smoothing);
            }
        };
    }
    return Value(&n);
}

// Sum over rows of log softmax(logits)[target]; the document likelihood term.
inline Value log_prob_sum(Value logits, const std::vector<int>& targets) {
    const Tensor& L = logits.val();
    const std::size_t r = L.rows(), v = L.cols();
    if (targets.size() != r) throw std::invalid_argument("log_prob_sum: target count mismatch");
    auto probs = std::make_shared<Tensor>(L);
    double total = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        const double* l = L.data.data() + i * v;
        double* row = probs->data.data() + i * v;
        double mx = l[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, l[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < v; ++j) sum += std::exp(l[j] - mx);
        const double lse = mx + std::log(sum);
        const int t = targets[i];
        if (t < 0 || std::size_t(t) >= v) throw std::out_of_range("log_prob_sum: bad target");
        total += l[t] - lse;
        for (std::size_t j = 0; j < v; ++j) row[j] = std::exp(l[j] - lse);
    }
    Node& n = detail::make_node(logits.graph(), Tensor::scalar(total), {logits});
    if (n.requires_grad) {
        Node* pl = logits.node();
        auto tg = std::make_shared<std::vector<int>>(targets);
        n.backward_fn = [pl, tg, probs, r, v](Node& self) {
            const double g = self.grad[0];
            for (std::size_t i = 0; i < r; ++i) {
                const double* p = probs->data.data() + i * v;
                double* d = pl->grad.data.data() + i * v;
                for (std::size_t j = 0; j < v; ++j) d[j] -= g * p[j];
                d[(*tg)[i]] += g;
            }
        };
    }
    return Value(&n);
}

}  // namespace datn
