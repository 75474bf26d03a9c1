#pragma once
// Tape-based reverse-mode autodiff over the sparse kernels. Nodes are created
// in topological order during a forward pass; backward() walks the tape in
// reverse. Templated on the scalar so the same graph code runs in float64 for
// finite-difference checks.

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "gsdn/common.hpp"
#include "gsdn/kernel_map.hpp"
#include "gsdn/ops.hpp"
#include "gsdn/rng.hpp"

namespace gsdn {

template <typename T>
struct Param {
    std::vector<int> dims;  // logical shape; storage is row-major flat
    FeatMat<T> w, g, m;     // value, gradient, momentum (rows = size/cols, cols = last dim)
};

template <typename T>
struct ParameterStore {
    std::map<std::string, Param<T>> params;             // ordered for deterministic updates
    std::map<std::string, std::vector<T>> buffers;      // running stats etc., not optimized

    Param<T>& add(const std::string& name, std::vector<int> dims) {
        if (params.count(name)) throw ContractError("duplicate parameter " + name);
        std::int64_t total = 1;
        for (int d : dims) total *= d;
        const std::int64_t cols = dims.empty() ? 1 : dims.back();
        Param<T> p;
        p.dims = std::move(dims);
        p.w = FeatMat<T>(total / cols, cols);
        p.g = FeatMat<T>(total / cols, cols);
        p.m = FeatMat<T>(total / cols, cols);
        return params.emplace(name, std::move(p)).first->second;
    }
    Param<T>& at(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw ContractError("unknown parameter " + name);
        return it->second;
    }
    std::vector<T>& buffer(const std::string& name) {
        auto it = buffers.find(name);
        if (it == buffers.end()) throw ContractError("unknown buffer " + name);
        return it->second;
    }
    std::vector<T>& add_buffer(const std::string& name, std::int64_t n, T fill) {
        if (buffers.count(name)) throw ContractError("duplicate buffer " + name);
        return buffers.emplace(name, std::vector<T>(n, fill)).first->second;
    }
    void zero_grad() {
        for (auto& [k, p] : params) std::fill(p.g.data.begin(), p.g.data.end(), T(0));
    }
    std::int64_t count() const {
        std::int64_t n = 0;
        for (const auto& [k, p] : params) n += p.w.rows * p.w.cols;
        return n;
    }
};

template <typename T>
struct Tape {
    struct Node {
        FeatMat<T> value;
        FeatMat<T> grad;  // allocated lazily by backward()
        std::function<void(Tape&, int)> back;  // empty for leaves
    };
    std::vector<Node> nodes;
    std::vector<KernelMap> maps;
    std::int64_t map_bytes = 0;

    ~Tape() { MemGauge::sub(map_bytes); }
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    int emplace(FeatMat<T> value, std::function<void(Tape&, int)> back) {
        nodes.push_back(Node{std::move(value), FeatMat<T>(), std::move(back)});
        return int(nodes.size()) - 1;
    }
    int store_map(KernelMap m) {
        const std::int64_t b = m.bytes();
        MemGauge::add(b);
        map_bytes += b;
        maps.push_back(std::move(m));
        return int(maps.size()) - 1;
    }
    const FeatMat<T>& val(int id) const { return nodes[id].value; }
    FeatMat<T>& grad(int id) { return nodes[id].grad; }

    void backward(int loss_id) {
        const auto& lv = nodes[loss_id].value;
        if (lv.rows != 1 || lv.cols != 1) throw ContractError("backward: loss must be scalar");
        for (auto& n : nodes) {
            n.grad = FeatMat<T>(n.value.rows, n.value.cols);
        }
        nodes[loss_id].grad.at(0, 0) = T(1);
        for (int i = loss_id; i >= 0; --i)
            if (nodes[i].back) nodes[i].back(*this, i);
    }
};

// --- Tape ops -------------------------------------------------------------

template <typename T>
int op_input(Tape<T>& t, FeatMat<T> v) {
    return t.emplace(std::move(v), nullptr);
}

// Convolution against a named parameter. Same node works for submanifold,
// strided and transposed geometry; the kernel map decides.
template <typename T>
int op_conv(Tape<T>& t, int x, Param<T>* p, int map_idx) {
    const KernelMap& m = t.maps[map_idx];
    FeatMat<T> y = conv_forward(t.val(x), p->w, m);
    return t.emplace(std::move(y), [x, p, map_idx](Tape<T>& tp, int self) {
        const KernelMap& km = tp.maps[map_idx];
        FeatMat<T> gin, gw;
        conv_backward(tp.val(x), p->w, km, tp.grad(self), gin, gw);
        tp.grad(x).add_inplace(gin);
        p->g.add_inplace(gw);
    });
}

template <typename T>
int op_bias(Tape<T>& t, int x, Param<T>* p) {
    FeatMat<T> y = add_bias(t.val(x), p->w.data);
    return t.emplace(std::move(y), [x, p](Tape<T>& tp, int self) {
        std::vector<T> gb = bias_backward(tp.grad(self));
        for (std::int64_t i = 0; i < std::int64_t(gb.size()); ++i) p->g.data[i] += gb[i];
        tp.grad(x).add_inplace(tp.grad(self));
    });
}

template <typename T>
int op_bn(Tape<T>& t, int x, Param<T>* gamma, Param<T>* beta, std::vector<T>* run_mean,
          std::vector<T>* run_var, T eps, T momentum, bool train) {
    auto state = std::make_shared<BnState<T>>();
    FeatMat<T> y = bn_forward(t.val(x), gamma->w.data, beta->w.data, *run_mean, *run_var, eps,
                              momentum, train, state.get());
    return t.emplace(std::move(y), [x, gamma, beta, state, train](Tape<T>& tp, int self) {
        FeatMat<T> gin;
        std::vector<T> gg, gb;
        bn_backward(tp.val(x), gamma->w.data, *state, tp.grad(self), train, gin, gg, gb);
        tp.grad(x).add_inplace(gin);
        for (std::int64_t i = 0; i < std::int64_t(gg.size()); ++i) gamma->g.data[i] += gg[i];
        for (std::int64_t i = 0; i < std::int64_t(gb.size()); ++i) beta->g.data[i] += gb[i];
    });
}

template <typename T>
int op_relu(Tape<T>& t, int x) {
    FeatMat<T> y = relu_forward(t.val(x));
    return t.emplace(std::move(y), [x](Tape<T>& tp, int self) {
        tp.grad(x).add_inplace(relu_backward(tp.val(x), tp.grad(self)));
    });
}

template <typename T>
int op_logistic(Tape<T>& t, int x) {
    FeatMat<T> y = logistic_forward(t.val(x));
    return t.emplace(std::move(y), [x](Tape<T>& tp, int self) {
        tp.grad(x).add_inplace(logistic_backward(tp.val(self), tp.grad(self)));
    });
}

// Elementwise add of two nodes with identical support (residual skip).
template <typename T>
int op_add_same(Tape<T>& t, int a, int b) {
    FeatMat<T> y = t.val(a);
    y.add_inplace(t.val(b));
    return t.emplace(std::move(y), [a, b](Tape<T>& tp, int self) {
        tp.grad(a).add_inplace(tp.grad(self));
        tp.grad(b).add_inplace(tp.grad(self));
    });
}

// Union add of two sparse tensors whose row->output mappings were produced by
// tensor_add(); value must be that merged matrix.
template <typename T>
int op_add_union(Tape<T>& t, int a, int b, FeatMat<T> merged, std::vector<int> a_rows,
                 std::vector<int> b_rows) {
    return t.emplace(std::move(merged),
                     [a, b, ar = std::move(a_rows), br = std::move(b_rows)](Tape<T>& tp, int self) {
                         const FeatMat<T>& g = tp.grad(self);
                         FeatMat<T>& ga = tp.grad(a);
                         FeatMat<T>& gb = tp.grad(b);
                         for (std::int64_t i = 0; i < std::int64_t(ar.size()); ++i)
                             for (std::int64_t c = 0; c < g.cols; ++c)
                                 ga.at(i, c) += g.at(ar[i], c);
                         for (std::int64_t i = 0; i < std::int64_t(br.size()); ++i)
                             for (std::int64_t c = 0; c < g.cols; ++c)
                                 gb.at(i, c) += g.at(br[i], c);
                     });
}

// Row subset (prune): rows strictly increasing.
template <typename T>
int op_gather(Tape<T>& t, int x, std::vector<int> rows) {
    FeatMat<T> y = gather_rows(t.val(x), rows);
    const std::int64_t n_in = t.val(x).rows;
    return t.emplace(std::move(y), [x, rs = std::move(rows), n_in](Tape<T>& tp, int self) {
        tp.grad(x).add_inplace(scatter_rows_grad(tp.grad(self), rs, n_in));
    });
}

template <typename T>
int op_sum(Tape<T>& t, int x) {
    T s = 0;
    for (const T& v : t.val(x).data) s += v;
    FeatMat<T> y(1, 1);
    y.at(0, 0) = s;
    return t.emplace(std::move(y), [x](Tape<T>& tp, int self) {
        const T g = tp.grad(self).at(0, 0);
        for (T& v : tp.grad(x).data) v += g;
    });
}

// --- Optimizer --------------------------------------------------------------

struct OptimizerConfig {
    double base_lr = 0.1;
    double final_lr = 1e-3;
    std::int64_t total_iters = 120000;
    double momentum = 0.9;
    double weight_decay = 1e-4;
};

inline double lr_at(std::int64_t iter, const OptimizerConfig& cfg) {
    if (iter < 0 || iter > cfg.total_iters) throw ContractError("lr_at: iter out of range");
    if (iter == 0) return cfg.base_lr;
    if (iter == cfg.total_iters) return cfg.final_lr;
    const double t = double(iter) / double(cfg.total_iters);
    return cfg.base_lr * std::pow(cfg.final_lr / cfg.base_lr, t);
}

template <typename T>
void sgd_step(ParameterStore<T>& store, double lr, const OptimizerConfig& cfg) {
    for (auto& [name, p] : store.params) {
        const std::int64_t n = p.w.rows * p.w.cols;
        for (std::int64_t i = 0; i < n; ++i) {
            p.m.data[i] = T(cfg.momentum) * p.m.data[i] + p.g.data[i] + T(cfg.weight_decay) * p.w.data[i];
            p.w.data[i] -= T(lr) * p.m.data[i];
        }
        std::fill(p.g.data.begin(), p.g.data.end(), T(0));
    }
}

// --- Initialization ---------------------------------------------------------

template <typename T>
void init_conv(Param<T>& p, int fan_in, Rng& rng) {
    const T std = T(std::sqrt(2.0 / double(fan_in)));
    for (T& v : p.w.data) v = T(rng.gaussian()) * std;
}

template <typename T>
void init_const(Param<T>& p, T v) {
    std::fill(p.w.data.begin(), p.w.data.end(), v);
}

// --- Gradient check ---------------------------------------------------------

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::int64_t worst_index = -1;
    std::int64_t entries = 0;
};

// Probes every entry of every parameter with central differences. loss_fn must
// be a pure function of the store's parameter values (snapshot/restore any
// state it mutates, e.g. BN running stats).
inline GradCheckResult grad_check(ParameterStore<double>& store,
                                  const std::function<double()>& loss_fn,
                                  const std::function<void()>& backward_fn, double eps = 1e-5) {
    store.zero_grad();
    backward_fn();  // populates store gradients analytically
    std::map<std::string, std::vector<double>> analytic;
    for (auto& [name, p] : store.params) analytic[name] = p.g.data;

    GradCheckResult res;
    for (auto& [name, p] : store.params) {
        const std::int64_t n = p.w.rows * p.w.cols;
        for (std::int64_t i = 0; i < n; ++i) {
            const double w0 = p.w.data[i];
            p.w.data[i] = w0 + eps;
            const double lp = loss_fn();
            p.w.data[i] = w0 - eps;
            const double lm = loss_fn();
            p.w.data[i] = w0;
            if (!std::isfinite(lp) || !std::isfinite(lm))
                throw NumericError("grad_check: non-finite loss while probing " + name);
            const double num = (lp - lm) / (2.0 * eps);
            const double ana = analytic[name][i];
            const double rel = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
            ++res.entries;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = name;
                res.worst_index = i;
            }
        }
    }
    return res;
}

}  // namespace gsdn
