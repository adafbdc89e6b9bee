#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <zlib.h>

#include "amr/error.hpp"

namespace amr {

/// Dense row-major array of doubles.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)), data(count(shape), 0.0) {}
    Tensor(std::vector<std::size_t> s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != count(shape)) throw Error("Tensor: value count does not match shape");
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
    }

    static Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
    static Tensor vector(std::size_t n) { return Tensor({n}); }

    std::size_t rank() const { return shape.size(); }
    std::size_t size() const { return data.size(); }
    std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return rank() == 0 ? 1 : shape.back(); }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool operator==(const Tensor&) const = default;
};

struct Parameter {
    Tensor value;
    Tensor grad;
};

/// Named trainable tensors, iterated in name order.
class ParameterSet {
public:
    Parameter& add(const std::string& name, Tensor value) {
        if (params_.count(name)) throw Error("ParameterSet: duplicate parameter \"" + name + "\"");
        Tensor g(value.shape);
        return params_[name] = Parameter{std::move(value), std::move(g)};
    }

    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    Parameter& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("ParameterSet: missing parameter \"" + name + "\"");
        return it->second;
    }
    const Parameter& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("ParameterSet: missing parameter \"" + name + "\"");
        return it->second;
    }

    void zero_grad() {
        for (auto& [name, p] : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t size() const { return params_.size(); }

    bool operator==(const ParameterSet& o) const {
        if (params_.size() != o.params_.size()) return false;
        for (auto a = params_.begin(), b = o.params_.begin(); a != params_.end(); ++a, ++b)
            if (a->first != b->first || !(a->second.value == b->second.value)) return false;
        return true;
    }

private:
    std::map<std::string, Parameter> params_;
};

class Graph;

/// Handle to a node of a Graph.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
};

/// Reverse-mode tape. Nodes are appended in evaluation order and replayed backwards.
class Graph {
public:
    using Backward = std::function<void(Graph&, std::size_t)>;

    Graph() { nodes_.reserve(256); }
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Constant input; receives no gradient.
    Var input(Tensor t) { return push(std::move(t), {}, nullptr, false); }

    /// Differentiable leaf whose gradient can be read back with grad().
    Var leaf(Tensor t) { return push(std::move(t), {}, nullptr, true); }

    /// Leaf bound to a parameter; backward() adds its gradient into the set.
    Var param(ParameterSet& set, const std::string& name) {
        Parameter& p = set.at(name);
        Var v = push(p.value, {}, nullptr, true);
        nodes_[v.id].param = &p;
        return v;
    }

    const Tensor& value(Var v) const { return nodes_[v.id].value; }

    const Tensor& grad(Var v) {
        ensure_grad(v.id);
        return nodes_[v.id].grad;
    }

    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    /// Appends a node computed from `parents`. Rejects non-finite values.
    Var push(Tensor value, std::vector<std::size_t> parents, Backward backward, bool needs_grad = false) {
        for (double x : value.data)
            if (!std::isfinite(x)) throw NonFiniteError("non-finite value produced in differentiable graph");
        for (auto p : parents) needs_grad = needs_grad || nodes_[p].requires_grad;
        Node n;
        n.value = std::move(value);
        n.requires_grad = needs_grad;
        if (needs_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    /// Gradient accumulator of node `id`, zero-initialized on first use.
    Tensor& grad_ref(std::size_t id) {
        ensure_grad(id);
        return nodes_[id].grad;
    }

    const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }
    bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Seeds d(out)/d(out) = 1 for a scalar node and propagates.
    void backward(Var out) {
        if (nodes_[out.id].value.size() != 1) throw Error("backward: output must be a scalar");
        grad_ref(out.id).data[0] = 1.0;
        for (std::size_t i = out.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.data.empty()) continue;
            if (n.backward) n.backward(*this, i);
            if (n.param) {
                auto& acc = n.param->grad.data;
                for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += n.grad.data[k];
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        Backward backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
    };

    void ensure_grad(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.data.size() != n.value.data.size()) n.grad = Tensor(n.value.shape);
    }

    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(*this); }

namespace ops {

inline void require(bool ok, const char* what) {
    if (!ok) throw Error(std::string("shape mismatch: ") + what);
}

inline void check_matrix(const Tensor& t, const char* what) { require(t.rank() == 2, what); }

/// a[N,K] * b[K,M]
inline Var matmul(Var a, Var b) {
    Graph& g = *a.graph;
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    check_matrix(A, "matmul lhs");
    check_matrix(B, "matmul rhs");
    require(A.shape[1] == B.shape[0], "matmul inner dims");
    const std::size_t n = A.shape[0], k = A.shape[1], m = B.shape[1];
    Tensor out = Tensor::matrix(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A.data[i * k + p];
            if (av == 0.0) continue;
            const double* brow = &B.data[p * m];
            double* orow = &out.data[i * m];
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    const std::size_t ia = a.id, ib = b.id;
    return g.push(std::move(out), {ia, ib}, [ia, ib, n, k, m](Graph& gr, std::size_t self) {
        const Tensor& G = gr.grad_ref(self);
        const Tensor& A = gr.value_of(ia);
        const Tensor& B = gr.value_of(ib);
        if (gr.wants_grad(ia)) {
            Tensor& GA = gr.grad_ref(ia);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < m; ++j) s += G.data[i * m + j] * B.data[p * m + j];
                    GA.data[i * k + p] += s;
                }
        }
        if (gr.wants_grad(ib)) {
            Tensor& GB = gr.grad_ref(ib);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = A.data[i * k + p];
                    if (av == 0.0) continue;
                    for (std::size_t j = 0; j < m; ++j) GB.data[p * m + j] += av * G.data[i * m + j];
                }
        }
    });
}

/// a[N,K] * b[M,K]^T
inline Var matmul_nt(Var a, Var b) {
    Graph& g = *a.graph;
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    check_matrix(A, "matmul_nt lhs");
    check_matrix(B, "matmul_nt rhs");
    require(A.shape[1] == B.shape[1], "matmul_nt inner dims");
    const std::size_t n = A.shape[0], k = A.shape[1], m = B.shape[0];
    Tensor out = Tensor::matrix(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += A.data[i * k + p] * B.data[j * k + p];
            out.data[i * m + j] = s;
        }
    const std::size_t ia = a.id, ib = b.id;
    return g.push(std::move(out), {ia, ib}, [ia, ib, n, k, m](Graph& gr, std::size_t self) {
        const Tensor& G = gr.grad_ref(self);
        const Tensor& A = gr.value_of(ia);
        const Tensor& B = gr.value_of(ib);
        if (gr.wants_grad(ia)) {
            Tensor& GA = gr.grad_ref(ia);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) {
                    const double gv = G.data[i * m + j];
                    if (gv == 0.0) continue;
                    for (std::size_t p = 0; p < k; ++p) GA.data[i * k + p] += gv * B.data[j * k + p];
                }
        }
        if (gr.wants_grad(ib)) {
            Tensor& GB = gr.grad_ref(ib);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) {
                    const double gv = G.data[i * m + j];
                    if (gv == 0.0) continue;
                    for (std::size_t p = 0; p < k; ++p) GB.data[j * k + p] += gv * A.data[i * k + p];
                }
        }
    });
}

inline Var add(Var a, Var b) {
    Graph& g = *a.graph;
    require(a.value().shape == b.value().shape, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
    const std::size_t ia = a.id, ib = b.id;
    return g.push(std::move(out), {ia, ib}, [ia, ib](Graph& gr, std::size_t self) {
        const Tensor& G = gr.grad_ref(self);
        for (auto id : {ia, ib}) {
            if (!gr.wants_grad(id)) continue;
            Tensor& GI = gr.grad_ref(id);
            for (std::size_t i = 0; i < G.size(); ++i) GI.data[i] += G.data[i];
        }
    });
}

/// x[N,D] + b[D] broadcast over rows.
inline Var add_bias(Var x, Var b) {
    Graph& g = *x.graph;
    const Tensor& X = x.value();
    check_matrix(X, "add_bias input");
    require(b.value().rank() == 1 && b.value().size() == X.shape[1], "add_bias bias");
    Tensor out = X;
    const std::size_t n = X.shape[0], d = X.shape[1];
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.data[i * d + j] += b.value().data[j];
    const std::size_t ix = x.id, ib = b.id;
    return g.push(std::move(out), {ix, ib}, [ix, ib, n, d](Graph& gr, std::size_t self) {
        const Tensor& G = gr.grad_ref(self);
        if (gr.wants_grad(ix)) {
            Tensor& GX = gr.grad_ref(ix);
            for (std::size_t i = 0; i < G.size(); ++i) GX.data[i] += G.data[i];
        }
        if (gr.wants_grad(ib)) {
            Tensor& GB = gr.grad_ref(ib);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) GB.data[j] += G.data[i * d + j];
        }
    });
}

/// y = x W + b.
inline Var linear(Var x, Var w, Var b) {
    const Tensor& X = x.value();
    const Tensor& W = w.value();
    check_matrix(X, "linear input");
    check_matrix(W, "linear weight");
    require(X.shape[1] == W.shape[0], "linear input width");
    require(b.value().rank() == 1 && b.value().size() == W.shape[1], "linear bias");
    return add_bias(matmul(x, w), b);
}

inline Var scale(Var x, double s) {
    Graph& g = *x.graph;
    Tensor out = x.value();
    for (auto& v : out.data) v *= s;
    const std::size_t ix = x.id;
    return g.push(std::move(out), {ix}, [ix, s](Graph& gr, std::size_t self) {
        const Tensor& G = gr.grad_ref(self);
        Tensor& GX = gr.grad_ref(ix);
        for (std::size_t i = 0; i < G.size(); ++i) GX.data[i] += s * G.data[i];
    });
}

inline Var relu(Var x) {
    Graph& g = *x.graph;
    Tensor out = x.value();
    for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
    const std::size_t ix = x.id;
    return g.push(std::move(out), {ix}, [ix](Graph& gr, std::size_t self) {
        const Tensor& G = gr.grad_ref(self);
        const Tensor& X = gr.value_of(ix);
        Tensor& GX = gr.grad_ref(ix);
        for (std::size_t i = 0; i < G.size(); ++i)
            if (X.data[i] > 0.0) GX.data[i] += G.data[i];
    });
}

/// Row-wise softmax, stabilized by subtracting the row maximum.
inline Var softmax_rows(Var x) {
    Graph& g = *x.graph;
    const Tensor& X = x.value();
    check_matrix(X, "softmax_rows");
    const std::size_t n = X.shape[0], m = X.shape[1];
    require(m >= 1 || n == 0, "softmax_rows needs at least one column");
    Tensor out = X;
    for (std::size_t i = 0; i < n; ++i) {
        double* row = &out.data[i * m];
        const double mx = *std::max_element(row, row + m);
        double sum = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (std::size_t j = 0; j < m; ++j) row[j] /= sum;
    }
    const std::size_t ix = x.id;
    return g.push(std::move(out), {ix}, [ix, n, m](Graph& gr, std::size_t self) {
        const Tensor& G = gr.grad_ref(self);
        const Tensor& Y = gr.value_of(self);
        Tensor& GX = gr.grad_ref(ix);
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) dot += G.data[i * m + j] * Y.data[i * m + j];
            for (std::size_t j = 0; j < m; ++j) GX.data[i * m + j] += Y.data[i * m + j] * (G.data[i * m + j] - dot);
        }
    });
}

/// Zero-mean, unit-variance rows (no affine terms).
inline Var layer_norm_rows(Var x, double eps = 1e-5) {
    Graph& g = *x.graph;
    const Tensor& X = x.value();
    check_matrix(X, "layer_norm_rows");
    const std::size_t n = X.shape[0], d = X.shape[1];
    Tensor out = X;
    std::vector<double> inv_std(n);
    for (std::size_t i = 0; i < n; ++i) {
        double* row = &out.data[i * d];
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) row[j] = (row[j] - mean) * inv_std[i];
    }
    const std::size_t ix = x.id;
    return g.push(std::move(out), {ix}, [ix, n, d, inv_std = std::move(inv_std)](Graph& gr, std::size_t self) {
        const Tensor& G = gr.grad_ref(self);
        const Tensor& Y = gr.value_of(self);
        Tensor& GX = gr.grad_ref(ix);
        const double dd = static_cast<double>(d);
        for (std::size_t i = 0; i < n; ++i) {
            double gsum = 0.0, gy = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                gsum += G.data[i * d + j];
                gy += G.data[i * d + j] * Y.data[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
                GX.data[i * d + j] += inv_std[i] * (G.data[i * d + j] - gsum / dd - Y.data[i * d + j] * gy / dd);
            }
        }
    });
}

/// Rows scaled to unit L2 norm; eps guards the all-zero row.
inline Var l2_normalize_rows(Var x, double eps = 1e-12) {
    Graph& g = *x.graph;
    const Tensor& X = x.value();
    check_matrix(X, "l2_normalize_rows");
    const std::size_t n = X.shape[0], d = X.shape[1];
    Tensor out = X;
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += X.data[i * d + j] * X.data[i * d + j];
        norms[i] = std::max(std::sqrt(s), eps);
        for (std::size_t j = 0; j < d; ++j) out.data[i * d + j] /= norms[i];
    }
    const std::size_t ix = x.id;
    return g.push(std::move(out), {ix}, [ix, n, d, eps, norms = std::move(norms)](Graph& gr, std::size_t self) {
        const Tensor& G = gr.grad_ref(self);
        const Tensor& Y = gr.value_of(self);
        Tensor& GX = gr.grad_ref(ix);
        for (std::size_t i = 0; i < n; ++i) {
            if (norms[i] <= eps) {
                for (std::size_t j = 0; j < d; ++j) GX.data[i * d + j] += G.data[i * d + j] / eps;
                continue;
            }
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += G.data[i * d + j] * Y.data[i * d + j];
            for (std::size_t j = 0; j < d; ++j)
                GX.data[i * d + j] += (G.data[i * d + j] - Y.data[i * d + j] * dot) / norms[i];
        }
    });
}

inline Var gather_rows(Var x, std::vector<std::size_t> idx) {
    Graph& g = *x.graph;
    const Tensor& X = x.value();
    check_matrix(X, "gather_rows");
    const std::size_t d = X.shape[1];
    Tensor out = Tensor::matrix(idx.size(), d);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        require(idx[r] < X.shape[0], "gather_rows index");
        std::copy_n(&X.data[idx[r] * d], d, &out.data[r * d]);
    }
    const std::size_t ix = x.id;
    return g.push(std::move(out), {ix}, [ix, d, idx = std::move(idx)](Graph& gr, std::size_t self) {
        const Tensor& G = gr.grad_ref(self);
        Tensor& GX = gr.grad_ref(ix);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < d; ++j) GX.data[idx[r] * d + j] += G.data[r * d + j];
    });
}

/// Copy of `base` with rows idx[r] replaced by rows(r).
inline Var scatter_rows(Var base, Var rows, std::vector<std::size_t> idx) {
    Graph& g = *base.graph;
    const Tensor& B = base.value();
    const Tensor& R = rows.value();
    check_matrix(B, "scatter_rows base");
    check_matrix(R, "scatter_rows rows");
    require(R.shape[0] == idx.size() && R.shape[1] == B.shape[1], "scatter_rows rows");
    const std::size_t d = B.shape[1];
    Tensor out = B;
    std::vector<char> replaced(B.shape[0], 0);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        require(idx[r] < B.shape[0] && !replaced[idx[r]], "scatter_rows index");
        replaced[idx[r]] = 1;
        std::copy_n(&R.data[r * d], d, &out.data[idx[r] * d]);
    }
    const std::size_t ib = base.id, ir = rows.id;
    return g.push(std::move(out), {ib, ir},
                  [ib, ir, d, idx = std::move(idx), replaced = std::move(replaced)](Graph& gr, std::size_t self) {
                      const Tensor& G = gr.grad_ref(self);
                      if (gr.wants_grad(ib)) {
                          Tensor& GB = gr.grad_ref(ib);
                          for (std::size_t i = 0; i < replaced.size(); ++i)
                              if (!replaced[i])
                                  for (std::size_t j = 0; j < d; ++j) GB.data[i * d + j] += G.data[i * d + j];
                      }
                      if (gr.wants_grad(ir)) {
                          Tensor& GR = gr.grad_ref(ir);
                          for (std::size_t r = 0; r < idx.size(); ++r)
                              for (std::size_t j = 0; j < d; ++j) GR.data[r * d + j] += G.data[idx[r] * d + j];
                      }
                  });
}

inline Var slice_cols(Var x, std::size_t start, std::size_t count) {
    Graph& g = *x.graph;
    const Tensor& X = x.value();
    check_matrix(X, "slice_cols");
    require(start + count <= X.shape[1], "slice_cols range");
    const std::size_t n = X.shape[0], d = X.shape[1];
    Tensor out = Tensor::matrix(n, count);
    for (std::size_t i = 0; i < n; ++i) std::copy_n(&X.data[i * d + start], count, &out.data[i * count]);
    const std::size_t ix = x.id;
    return g.push(std::move(out), {ix}, [ix, n, d, start, count](Graph& gr, std::size_t self) {
        const Tensor& G = gr.grad_ref(self);
        Tensor& GX = gr.grad_ref(ix);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < count; ++j) GX.data[i * d + start + j] += G.data[i * count + j];
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols needs inputs");
    Graph& g = *parts.front().graph;
    const std::size_t n = parts.front().value().shape[0];
    std::size_t total = 0;
    std::vector<std::size_t> widths, ids;
    for (const auto& p : parts) {
        check_matrix(p.value(), "concat_cols");
        require(p.value().shape[0] == n, "concat_cols rows");
        widths.push_back(p.value().shape[1]);
        ids.push_back(p.id);
        total += p.value().shape[1];
    }
    Tensor out = Tensor::matrix(n, total);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& P = parts[k].value();
        for (std::size_t i = 0; i < n; ++i) std::copy_n(&P.data[i * widths[k]], widths[k], &out.data[i * total + off]);
        off += widths[k];
    }
    return g.push(std::move(out), ids, [ids, widths, n, total](Graph& gr, std::size_t self) {
        const Tensor& G = gr.grad_ref(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (gr.wants_grad(ids[k])) {
                Tensor& GP = gr.grad_ref(ids[k]);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j) GP.data[i * widths[k] + j] += G.data[i * total + off + j];
            }
            off += widths[k];
        }
    });
}

/// Scalar sum of x * w over all entries.
inline Var weighted_sum(Var x, const Tensor& w) {
    Graph& g = *x.graph;
    require(x.value().size() == w.size(), "weighted_sum");
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += x.value().data[i] * w.data[i];
    Tensor out({1}, {s});
    const std::size_t ix = x.id;
    return g.push(std::move(out), {ix}, [ix, w](Graph& gr, std::size_t self) {
        const double G = gr.grad_ref(self).data[0];
        Tensor& GX = gr.grad_ref(ix);
        for (std::size_t i = 0; i < w.size(); ++i) GX.data[i] += G * w.data[i];
    });
}

inline Var sum(Var x) {
    Tensor ones(x.value().shape);
    std::fill(ones.data.begin(), ones.data.end(), 1.0);
    return weighted_sum(x, ones);
}

}  // namespace ops

/// Xavier-uniform weight [in,out] and zero bias [out] under `prefix`/w and `prefix`/b.
inline void init_linear(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t out, std::mt19937_64& rng,
                        double gain = 1.0) {
    const double limit = gain * std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor w = Tensor::matrix(in, out);
    for (auto& v : w.data) v = dist(rng);
    ps.add(prefix + "/w", std::move(w));
    ps.add(prefix + "/b", Tensor::vector(out));
}

inline Var linear(Graph& g, ParameterSet& ps, const std::string& prefix, Var x) {
    return ops::linear(x, g.param(ps, prefix + "/w"), g.param(ps, prefix + "/b"));
}

/// Two-layer perceptron: linear -> ReLU -> linear, parameters under prefix/fc1 and prefix/fc2.
inline void init_mlp2(ParameterSet& ps, const std::string& prefix, std::size_t width, std::size_t hidden,
                      std::mt19937_64& rng, double out_gain = 1.0) {
    init_linear(ps, prefix + "/fc1", width, hidden, rng);
    init_linear(ps, prefix + "/fc2", hidden, width, rng, out_gain);
}

inline Var mlp2(Graph& g, ParameterSet& ps, const std::string& prefix, Var x) {
    const std::size_t width = ps.at(prefix + "/fc1/w").value.shape[0];
    ops::require(x.value().rank() == 2 && x.value().shape[1] == width, "mlp2 input width");
    return linear(g, ps, prefix + "/fc2", ops::relu(linear(g, ps, prefix + "/fc1", x)));
}

/// Projections wq, wk, wv, wo (each [D,D]) under prefix.
inline void init_attention(ParameterSet& ps, const std::string& prefix, std::size_t width, std::mt19937_64& rng) {
    for (const char* name : {"/wq", "/wk", "/wv", "/wo"}) init_linear(ps, prefix + name, width, width, rng);
}

/// Per-head scaled dot-product attention of q_in over (k_in, v_in), heads concatenated
/// and passed through the output projection.
inline Var multi_head_attention(Graph& g, ParameterSet& ps, const std::string& prefix, Var q_in, Var k_in, Var v_in,
                                std::size_t heads) {
    const std::size_t width = q_in.value().cols();
    if (heads == 0 || width % heads != 0) throw Error("multi_head_attention: width not divisible by heads");
    ops::require(k_in.value().rows() == v_in.value().rows(), "multi_head_attention key/value rows");
    const Var q = linear(g, ps, prefix + "/wq", q_in);
    const Var k = linear(g, ps, prefix + "/wk", k_in);
    const Var v = linear(g, ps, prefix + "/wv", v_in);
    const std::size_t dh = width / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> outs;
    for (std::size_t h = 0; h < heads; ++h) {
        const Var qh = heads == 1 ? q : ops::slice_cols(q, h * dh, dh);
        const Var kh = heads == 1 ? k : ops::slice_cols(k, h * dh, dh);
        const Var vh = heads == 1 ? v : ops::slice_cols(v, h * dh, dh);
        const Var w = ops::softmax_rows(ops::scale(ops::matmul_nt(qh, kh), inv));
        outs.push_back(ops::matmul(w, vh));
    }
    const Var cat = heads == 1 ? outs.front() : ops::concat_cols(outs);
    return linear(g, ps, prefix + "/wo", cat);
}

/// Builds the value to differentiate from leaves bound to `inputs`.
using GradFn = std::function<Var(Graph&, std::span<const Var>)>;

/// Max over input (and parameter) entries of |analytic - numeric| / max(|analytic|, |numeric|, floor),
/// where the numeric gradient is a central difference of sum(f(...) * W) for fixed random W.
inline double grad_check(const GradFn& f, const std::vector<Tensor>& inputs, double step = 1e-5,
                         ParameterSet* params = nullptr, double floor = 1e-3, std::uint64_t seed = 7) {
    Tensor weights;
    auto evaluate = [&](std::vector<Tensor>& xs, bool with_backward, std::vector<Tensor>* grads) -> double {
        Graph g;
        std::vector<Var> leaves;
        for (auto& x : xs) leaves.push_back(g.leaf(x));
        const Var out = f(g, leaves);
        if (weights.data.empty()) {
            weights = Tensor(out.value().shape);
            std::mt19937_64 rng(seed);
            std::uniform_real_distribution<double> dist(-1.0, 1.0);
            for (auto& w : weights.data) w = dist(rng);
        }
        const Var r = ops::weighted_sum(out, weights);
        if (with_backward) {
            if (params) params->zero_grad();
            g.backward(r);
            for (auto& l : leaves) grads->push_back(g.grad(l));
        }
        return r.value().data[0];
    };

    std::vector<Tensor> xs = inputs;
    std::vector<Tensor> analytic;
    evaluate(xs, true, &analytic);
    std::vector<Tensor> param_grads;
    if (params)
        for (auto& [name, p] : *params) param_grads.push_back(p.grad);

    double worst = 0.0;
    auto compare = [&](double a, double n) {
        const double denom = std::max({std::abs(a), std::abs(n), floor});
        worst = std::max(worst, std::abs(a - n) / denom);
    };
    for (std::size_t t = 0; t < xs.size(); ++t) {
        for (std::size_t i = 0; i < xs[t].size(); ++i) {
            const double orig = xs[t].data[i];
            xs[t].data[i] = orig + step;
            const double fp = evaluate(xs, false, nullptr);
            xs[t].data[i] = orig - step;
            const double fm = evaluate(xs, false, nullptr);
            xs[t].data[i] = orig;
            compare(analytic[t].data[i], (fp - fm) / (2.0 * step));
        }
    }
    if (params) {
        std::size_t k = 0;
        for (auto& [name, p] : *params) {
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double orig = p.value.data[i];
                p.value.data[i] = orig + step;
                const double fp = evaluate(xs, false, nullptr);
                p.value.data[i] = orig - step;
                const double fm = evaluate(xs, false, nullptr);
                p.value.data[i] = orig;
                compare(param_grads[k].data[i], (fp - fm) / (2.0 * step));
            }
            ++k;
        }
        params->zero_grad();
    }
    return worst;
}

// Binary parameter files: "AMRW", u32 version, then per tensor
// (u32 name length, name bytes, u32 rank, u32 dims..., f32 values...), then u32 CRC32 of everything before it.
namespace weights_io {

inline constexpr char kMagic[4] = {'A', 'M', 'R', 'W'};
inline constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const std::string& buf, std::size_t& pos) {
    if (pos + 4 > buf.size()) throw IoError("weights file truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
}

inline std::uint32_t crc32_of(const std::string& bytes) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::string serialize(const ParameterSet& ps) {
    std::string buf(kMagic, 4);
    put_u32(buf, kVersion);
    for (const auto& [name, p] : ps) {
        put_u32(buf, static_cast<std::uint32_t>(name.size()));
        buf += name;
        put_u32(buf, static_cast<std::uint32_t>(p.value.rank()));
        for (auto d : p.value.shape) put_u32(buf, static_cast<std::uint32_t>(d));
        for (double v : p.value.data) {
            const float f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32(buf, bits);
        }
    }
    put_u32(buf, crc32_of(buf));
    return buf;
}

inline ParameterSet deserialize(const std::string& buf) {
    if (buf.size() < 12 || buf.compare(0, 4, std::string(kMagic, 4)) != 0) throw IoError("not an AMRW weights file");
    std::size_t crc_pos = buf.size() - 4;
    const std::uint32_t stored = get_u32(buf, crc_pos);
    if (stored != crc32_of(buf.substr(0, buf.size() - 4))) throw IoError("weights file CRC mismatch");
    std::size_t pos = 4;
    const std::uint32_t version = get_u32(buf, pos);
    if (version != kVersion) throw IoError("unsupported weights file version " + std::to_string(version));
    ParameterSet ps;
    const std::size_t end = buf.size() - 4;
    while (pos < end) {
        const std::uint32_t len = get_u32(buf, pos);
        if (pos + len > end) throw IoError("weights file truncated");
        std::string name = buf.substr(pos, len);
        pos += len;
        const std::uint32_t rank = get_u32(buf, pos);
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = get_u32(buf, pos);
        Tensor t(shape);
        for (auto& v : t.data) {
            const std::uint32_t bits = get_u32(buf, pos);
            float f;
            std::memcpy(&f, &bits, 4);
            v = static_cast<double>(f);
        }
        if (pos > end) throw IoError("weights file truncated");
        ps.add(name, std::move(t));
    }
    return ps;
}

inline void save(const ParameterSet& ps, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    const std::string buf = serialize(ps);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("cannot write " + path);
}

inline ParameterSet load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(buf);
}

/// Rounds every value to 32-bit precision, matching what a save/load round trip yields.
inline void round_to_f32(ParameterSet& ps) {
    for (auto& [name, p] : ps)
        for (auto& v : p.value.data) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace weights_io

}  // namespace amr
