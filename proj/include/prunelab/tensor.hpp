#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "prunelab/common.hpp"

namespace prunelab {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

class Tape;

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;      // empty means "no gradient yet"
    const Tape* tape = nullptr;    // tape this node was produced on, null for leaves

    // Per-backward-pass scratch. adjoint_epoch marks which pass the buffer
    // belongs to; flush_epoch guards the adjoint -> grad accumulation.
    std::vector<double> adjoint;
    std::uint64_t adjoint_epoch = 0;
    std::uint64_t flush_epoch = 0;

    std::size_t numel() const { return values.size(); }

    std::span<double> adjoint_for(std::uint64_t epoch) {
        if (adjoint_epoch != epoch) {
            adjoint.assign(values.size(), 0.0);
            adjoint_epoch = epoch;
        }
        return std::span<double>(adjoint);
    }

    bool adjoint_live(std::uint64_t epoch) const { return adjoint_epoch == epoch; }
};

} // namespace detail

// Value-semantic handle on a flat row-major double array with optional
// gradient. Copies share storage; clone() makes an independent tensor.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(std::move(shape), {}, requires_grad, 0.0);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        return Tensor(std::move(shape), {}, requires_grad, value);
    }

    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tensor shape " + shape_str(shape) + " expects " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(values);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from_values({1}, {value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    int dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t size() const { return node_->values.size(); }

    // Spans alias the tensor's storage; binding them off a temporary would
    // dangle, so rvalue access is disabled.
    std::span<const double> values() const& { return std::span<const double>(node_->values); }
    std::span<const double> values() const&& = delete;
    std::span<double> values_mut() & { return std::span<double>(node_->values); }
    std::span<double> values_mut() && = delete;

    double item() const {
        if (size() != 1) {
            throw ShapeError("item() requires a scalar tensor, got shape " + shape_str(shape()));
        }
        return node_->values[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return !node_->grad.empty(); }

    std::span<const double> grad() const& {
        if (node_->grad.empty()) {
            throw Error("tensor has no gradient; run backward first");
        }
        return std::span<const double>(node_->grad);
    }
    std::span<const double> grad() const&& = delete;

    void zero_grad() { node_->grad.clear(); }

    void accumulate_grad(std::span<const double> g) {
        if (g.size() != size()) {
            throw ShapeError("gradient length " + std::to_string(g.size()) +
                             " does not match tensor of " + std::to_string(size()) + " elements");
        }
        if (node_->grad.empty()) node_->grad.assign(size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) node_->grad[i] += g[i];
    }

    Tensor clone() const {
        Tensor t = from_values(node_->shape, node_->values, node_->requires_grad);
        return t;
    }

    detail::TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

private:
    Tensor(Shape shape, std::vector<double>, bool requires_grad, double fill) {
        node_ = std::make_shared<detail::TensorNode>();
        node_->values.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    std::shared_ptr<detail::TensorNode> node_;
};

// Reverse-mode tape. Ops append records in execution order; backward replays
// them in reverse, accumulating adjoints into a per-pass scratch buffer and
// flushing into .grad at the end. Each backward pass therefore computes the
// exact derivative of its root, and repeated passes add up in .grad.
class Tape {
public:
    using NodePtr = std::shared_ptr<detail::TensorNode>;

    struct Record {
        const char* name;
        std::vector<NodePtr> inputs;
        NodePtr output;
        std::function<void(std::uint64_t)> backward;
    };

    void record(const char* name, std::vector<NodePtr> inputs, NodePtr output,
                std::function<void(std::uint64_t)> backward) {
        output->tape = this;
        records_.push_back(Record{name, std::move(inputs), std::move(output), std::move(backward)});
    }

    std::size_t num_ops() const { return records_.size(); }

    void backward(const Tensor& root) {
        if (!root.defined() || root.size() != 1) {
            throw Error("backward root must be a scalar tensor");
        }
        if (root.node()->tape != this) {
            throw Error("backward root was not produced on this tape");
        }
        // Epochs are process-global: long-lived nodes (model parameters)
        // carry stamps across tapes, so a per-tape counter would collide
        // with stale adjoints from an earlier tape's pass.
        epoch_ = ++global_epoch();
        root.node()->adjoint_for(epoch_)[0] = 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (it->output->adjoint_live(epoch_)) {
                it->backward(epoch_);
            }
        }
        // Flush adjoints into grads, visiting each node once.
        for (auto& rec : records_) {
            flush_node(*rec.output);
            for (auto& in : rec.inputs) flush_node(*in);
        }
    }

    // Drops the gradient buffers of every node this tape touches (leaves
    // included), so alternating backward passes over shared subgraphs do not
    // bleed into each other.
    void zero_grads() {
        for (auto& rec : records_) {
            rec.output->grad.clear();
            for (auto& in : rec.inputs) in->grad.clear();
        }
    }

    void clear() { records_.clear(); }

private:
    void flush_node(detail::TensorNode& n) {
        if (n.adjoint_epoch != epoch_ || n.flush_epoch == epoch_ || !n.requires_grad) return;
        n.flush_epoch = epoch_;
        if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
        for (std::size_t i = 0; i < n.adjoint.size(); ++i) n.grad[i] += n.adjoint[i];
    }

    static std::uint64_t& global_epoch() {
        static std::uint64_t counter = 0;
        return counter;
    }

    std::vector<Record> records_;
    std::uint64_t epoch_ = 0;
};

namespace detail {

inline bool want_recording(const Tape* tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape) return false;
    for (const Tensor* t : inputs) {
        if ((*t).requires_grad()) return true;
    }
    return false;
}

inline void check_same_tape(const Tape* tape, std::initializer_list<const Tensor*> inputs,
                            const char* op) {
    for (const Tensor* t : inputs) {
        const Tape* owner = (*t).node()->tape;
        if (owner != nullptr && owner != tape) {
            throw Error(std::string(op) + ": input tensor belongs to a different tape");
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

// Valid-padding stride-1 cross-correlation.
//   out[b,o,i,j] = bias[o] + sum_{c,u,v} input[b,c,i+u,j+v] * kernel[o,c,u,v]
inline Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& kernel, const Tensor& bias) {
    if (input.ndim() != 4 || kernel.ndim() != 4) {
        throw ShapeError("conv2d expects 4-d input and kernel, got input " +
                         shape_str(input.shape()) + " kernel " + shape_str(kernel.shape()));
    }
    const int B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Cout = kernel.dim(0), Kc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (Kc != Cin) {
        throw ShapeError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                         " vs kernel " + shape_str(kernel.shape()));
    }
    if (bias.ndim() != 1 || bias.dim(0) != Cout) {
        throw ShapeError("conv2d bias shape " + shape_str(bias.shape()) +
                         " does not match kernel " + shape_str(kernel.shape()));
    }
    if (kh > H || kw > W) {
        throw ShapeError("conv2d kernel " + shape_str(kernel.shape()) +
                         " larger than input " + shape_str(input.shape()));
    }
    const int Ho = H - kh + 1, Wo = W - kw + 1;

    Tensor out = Tensor::zeros({B, Cout, Ho, Wo});
    const double* in = input.values().data();
    const double* k = kernel.values().data();
    const double* bi = bias.values().data();
    double* o = out.values_mut().data();

    const std::size_t in_chw = static_cast<std::size_t>(Cin) * H * W;
    const std::size_t out_chw = static_cast<std::size_t>(Cout) * Ho * Wo;
    const std::size_t k_cuv = static_cast<std::size_t>(Cin) * kh * kw;

    for (int b = 0; b < B; ++b) {
        const double* in_b = in + b * in_chw;
        double* out_b = o + b * out_chw;
        for (int oc = 0; oc < Cout; ++oc) {
            double* out_p = out_b + static_cast<std::size_t>(oc) * Ho * Wo;
            std::fill(out_p, out_p + static_cast<std::size_t>(Ho) * Wo, bi[oc]);
            const double* k_o = k + oc * k_cuv;
            for (int c = 0; c < Cin; ++c) {
                const double* in_c = in_b + static_cast<std::size_t>(c) * H * W;
                for (int u = 0; u < kh; ++u) {
                    for (int v = 0; v < kw; ++v) {
                        const double kv = k_o[(static_cast<std::size_t>(c) * kh + u) * kw + v];
                        for (int i = 0; i < Ho; ++i) {
                            const double* src = in_c + static_cast<std::size_t>(i + u) * W + v;
                            double* dst = out_p + static_cast<std::size_t>(i) * Wo;
                            for (int j = 0; j < Wo; ++j) dst[j] += kv * src[j];
                        }
                    }
                }
            }
        }
    }

    detail::check_same_tape(tape, {&input, &kernel, &bias}, "conv2d");
    if (detail::want_recording(tape, {&input, &kernel, &bias})) {
        out.set_requires_grad(true);
        auto in_n = input.node_ptr();
        auto k_n = kernel.node_ptr();
        auto b_n = bias.node_ptr();
        auto out_n = out.node_ptr();
        tape->record(
            "conv2d", {in_n, k_n, b_n}, out_n,
            [in_n, k_n, b_n, out_n, B, Cin, H, W, Cout, kh, kw, Ho, Wo](std::uint64_t epoch) {
                const double* go = out_n->adjoint.data();
                const std::size_t in_chw = static_cast<std::size_t>(Cin) * H * W;
                const std::size_t out_chw = static_cast<std::size_t>(Cout) * Ho * Wo;
                const std::size_t k_cuv = static_cast<std::size_t>(Cin) * kh * kw;

                if (b_n->requires_grad) {
                    auto gb = b_n->adjoint_for(epoch);
                    for (int b = 0; b < B; ++b) {
                        for (int oc = 0; oc < Cout; ++oc) {
                            const double* g = go + b * out_chw + static_cast<std::size_t>(oc) * Ho * Wo;
                            double acc = 0.0;
                            for (int ij = 0; ij < Ho * Wo; ++ij) acc += g[ij];
                            gb[oc] += acc;
                        }
                    }
                }
                if (k_n->requires_grad) {
                    auto gk = k_n->adjoint_for(epoch);
                    const double* in = in_n->values.data();
                    for (int b = 0; b < B; ++b) {
                        const double* in_b = in + b * in_chw;
                        for (int oc = 0; oc < Cout; ++oc) {
                            const double* g_o = go + b * out_chw + static_cast<std::size_t>(oc) * Ho * Wo;
                            for (int c = 0; c < Cin; ++c) {
                                const double* in_c = in_b + static_cast<std::size_t>(c) * H * W;
                                for (int u = 0; u < kh; ++u) {
                                    for (int v = 0; v < kw; ++v) {
                                        double acc = 0.0;
                                        for (int i = 0; i < Ho; ++i) {
                                            const double* src = in_c + static_cast<std::size_t>(i + u) * W + v;
                                            const double* g_row = g_o + static_cast<std::size_t>(i) * Wo;
                                            for (int j = 0; j < Wo; ++j) acc += g_row[j] * src[j];
                                        }
                                        gk[(static_cast<std::size_t>(oc) * Cin + c) * kh * kw +
                                           static_cast<std::size_t>(u) * kw + v] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                if (in_n->requires_grad) {
                    auto gi = in_n->adjoint_for(epoch);
                    const double* k = k_n->values.data();
                    for (int b = 0; b < B; ++b) {
                        double* gi_b = gi.data() + b * in_chw;
                        for (int oc = 0; oc < Cout; ++oc) {
                            const double* g_o = go + b * out_chw + static_cast<std::size_t>(oc) * Ho * Wo;
                            const double* k_o = k + oc * k_cuv;
                            for (int c = 0; c < Cin; ++c) {
                                double* gi_c = gi_b + static_cast<std::size_t>(c) * H * W;
                                for (int u = 0; u < kh; ++u) {
                                    for (int v = 0; v < kw; ++v) {
                                        const double kv = k_o[(static_cast<std::size_t>(c) * kh + u) * kw + v];
                                        for (int i = 0; i < Ho; ++i) {
                                            const double* g_row = g_o + static_cast<std::size_t>(i) * Wo;
                                            double* dst = gi_c + static_cast<std::size_t>(i + u) * W + v;
                                            for (int j = 0; j < Wo; ++j) dst[j] += kv * g_row[j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
    }
    return out;
}

// Elementwise max(x, 0); the subgradient at exactly 0 is taken as 0.
inline Tensor relu(Tape* tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const double* in = x.values().data();
    double* o = out.values_mut().data();
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;

    detail::check_same_tape(tape, {&x}, "relu");
    if (detail::want_recording(tape, {&x})) {
        out.set_requires_grad(true);
        auto x_n = x.node_ptr();
        auto out_n = out.node_ptr();
        tape->record("relu", {x_n}, out_n, [x_n, out_n, n](std::uint64_t epoch) {
            if (!x_n->requires_grad) return;
            auto gx = x_n->adjoint_for(epoch);
            const double* go = out_n->adjoint.data();
            const double* in = x_n->values.data();
            for (std::size_t i = 0; i < n; ++i) {
                if (in[i] > 0.0) gx[i] += go[i];
            }
        });
    }
    return out;
}

// out[b,c,:,:] = gates[c] * x[b,c,:,:]
inline Tensor channel_scale(Tape* tape, const Tensor& x, const Tensor& gates) {
    if (x.ndim() != 4) {
        throw ShapeError("channel_scale expects a 4-d input, got " + shape_str(x.shape()));
    }
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gates.ndim() != 1 || gates.dim(0) != C) {
        throw ShapeError("channel_scale gates " + shape_str(gates.shape()) +
                         " do not match input channels of " + shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros(x.shape());
    const double* in = x.values().data();
    const double* g = gates.values().data();
    double* o = out.values_mut().data();
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
            const double gv = g[c];
            const double* src = in + (static_cast<std::size_t>(b) * C + c) * hw;
            double* dst = o + (static_cast<std::size_t>(b) * C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) dst[i] = gv * src[i];
        }
    }

    detail::check_same_tape(tape, {&x, &gates}, "channel_scale");
    if (detail::want_recording(tape, {&x, &gates})) {
        out.set_requires_grad(true);
        auto x_n = x.node_ptr();
        auto g_n = gates.node_ptr();
        auto out_n = out.node_ptr();
        tape->record("channel_scale", {x_n, g_n}, out_n,
                     [x_n, g_n, out_n, B, C, hw](std::uint64_t epoch) {
                         const double* go = out_n->adjoint.data();
                         if (g_n->requires_grad) {
                             auto gg = g_n->adjoint_for(epoch);
                             const double* in = x_n->values.data();
                             for (int b = 0; b < B; ++b) {
                                 for (int c = 0; c < C; ++c) {
                                     const std::size_t off = (static_cast<std::size_t>(b) * C + c) * hw;
                                     double acc = 0.0;
                                     for (std::size_t i = 0; i < hw; ++i) acc += go[off + i] * in[off + i];
                                     gg[c] += acc;
                                 }
                             }
                         }
                         if (x_n->requires_grad) {
                             auto gx = x_n->adjoint_for(epoch);
                             const double* g = g_n->values.data();
                             for (int b = 0; b < B; ++b) {
                                 for (int c = 0; c < C; ++c) {
                                     const std::size_t off = (static_cast<std::size_t>(b) * C + c) * hw;
                                     const double gv = g[c];
                                     for (std::size_t i = 0; i < hw; ++i) gx[off + i] += gv * go[off + i];
                                 }
                             }
                         }
                     });
    }
    return out;
}

// [B,C,H,W] -> [B,C], mean over the spatial dimensions.
inline Tensor global_avg_pool(Tape* tape, const Tensor& x) {
    if (x.ndim() != 4) {
        throw ShapeError("global_avg_pool expects a 4-d input, got " + shape_str(x.shape()));
    }
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    Tensor out = Tensor::zeros({B, C});
    const double* in = x.values().data();
    double* o = out.values_mut().data();
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
            const double* src = in + (static_cast<std::size_t>(b) * C + c) * hw;
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += src[i];
            o[static_cast<std::size_t>(b) * C + c] = acc / static_cast<double>(hw);
        }
    }

    detail::check_same_tape(tape, {&x}, "global_avg_pool");
    if (detail::want_recording(tape, {&x})) {
        out.set_requires_grad(true);
        auto x_n = x.node_ptr();
        auto out_n = out.node_ptr();
        tape->record("global_avg_pool", {x_n}, out_n,
                     [x_n, out_n, B, C, hw](std::uint64_t epoch) {
                         if (!x_n->requires_grad) return;
                         auto gx = x_n->adjoint_for(epoch);
                         const double* go = out_n->adjoint.data();
                         const double inv = 1.0 / static_cast<double>(hw);
                         for (int b = 0; b < B; ++b) {
                             for (int c = 0; c < C; ++c) {
                                 const double gv = go[static_cast<std::size_t>(b) * C + c] * inv;
                                 double* dst = gx.data() + (static_cast<std::size_t>(b) * C + c) * hw;
                                 for (std::size_t i = 0; i < hw; ++i) dst[i] += gv;
                             }
                         }
                     });
    }
    return out;
}

// out = x . weight^T + bias, x:[B,F] weight:[K,F] bias:[K]
inline Tensor linear(Tape* tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.ndim() != 2 || weight.ndim() != 2) {
        throw ShapeError("linear expects 2-d input and weight, got " + shape_str(x.shape()) +
                         " and " + shape_str(weight.shape()));
    }
    const int B = x.dim(0), F = x.dim(1), K = weight.dim(0);
    if (weight.dim(1) != F) {
        throw ShapeError("linear inner dimension mismatch: input " + shape_str(x.shape()) +
                         " vs weight " + shape_str(weight.shape()));
    }
    if (bias.ndim() != 1 || bias.dim(0) != K) {
        throw ShapeError("linear bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    Tensor out = Tensor::zeros({B, K});
    const double* in = x.values().data();
    const double* w = weight.values().data();
    const double* bi = bias.values().data();
    double* o = out.values_mut().data();
    for (int b = 0; b < B; ++b) {
        const double* xb = in + static_cast<std::size_t>(b) * F;
        double* ob = o + static_cast<std::size_t>(b) * K;
        for (int k = 0; k < K; ++k) {
            const double* wk = w + static_cast<std::size_t>(k) * F;
            double acc = bi[k];
            for (int f = 0; f < F; ++f) acc += xb[f] * wk[f];
            ob[k] = acc;
        }
    }

    detail::check_same_tape(tape, {&x, &weight, &bias}, "linear");
    if (detail::want_recording(tape, {&x, &weight, &bias})) {
        out.set_requires_grad(true);
        auto x_n = x.node_ptr();
        auto w_n = weight.node_ptr();
        auto b_n = bias.node_ptr();
        auto out_n = out.node_ptr();
        tape->record("linear", {x_n, w_n, b_n}, out_n,
                     [x_n, w_n, b_n, out_n, B, F, K](std::uint64_t epoch) {
                         const double* go = out_n->adjoint.data();
                         if (b_n->requires_grad) {
                             auto gb = b_n->adjoint_for(epoch);
                             for (int b = 0; b < B; ++b) {
                                 const double* gob = go + static_cast<std::size_t>(b) * K;
                                 for (int k = 0; k < K; ++k) gb[k] += gob[k];
                             }
                         }
                         if (w_n->requires_grad) {
                             auto gw = w_n->adjoint_for(epoch);
                             const double* in = x_n->values.data();
                             for (int b = 0; b < B; ++b) {
                                 const double* gob = go + static_cast<std::size_t>(b) * K;
                                 const double* xb = in + static_cast<std::size_t>(b) * F;
                                 for (int k = 0; k < K; ++k) {
                                     const double gv = gob[k];
                                     if (gv == 0.0) continue;
                                     double* dst = gw.data() + static_cast<std::size_t>(k) * F;
                                     for (int f = 0; f < F; ++f) dst[f] += gv * xb[f];
                                 }
                             }
                         }
                         if (x_n->requires_grad) {
                             auto gx = x_n->adjoint_for(epoch);
                             const double* w = w_n->values.data();
                             for (int b = 0; b < B; ++b) {
                                 const double* gob = go + static_cast<std::size_t>(b) * K;
                                 double* dst = gx.data() + static_cast<std::size_t>(b) * F;
                                 for (int k = 0; k < K; ++k) {
                                     const double gv = gob[k];
                                     if (gv == 0.0) continue;
                                     const double* wk = w + static_cast<std::size_t>(k) * F;
                                     for (int f = 0; f < F; ++f) dst[f] += gv * wk[f];
                                 }
                             }
                         }
                     });
    }
    return out;
}

// Mean over the batch of -log softmax(logits)[label], stabilized by
// max-subtraction.
inline Tensor softmax_cross_entropy(Tape* tape, const Tensor& logits, std::span<const int> labels) {
    if (logits.ndim() != 2) {
        throw ShapeError("softmax_cross_entropy expects 2-d logits, got " + shape_str(logits.shape()));
    }
    const int B = logits.dim(0), K = logits.dim(1);
    if (static_cast<int>(labels.size()) != B) {
        throw ShapeError("softmax_cross_entropy got " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(B) + " rows");
    }
    for (int b = 0; b < B; ++b) {
        if (labels[b] < 0 || labels[b] >= K) {
            throw Error("softmax_cross_entropy label " + std::to_string(labels[b]) +
                        " out of range [0," + std::to_string(K) + ") at row " + std::to_string(b));
        }
    }

    std::vector<double> softmax(static_cast<std::size_t>(B) * K);
    const double* in = logits.values().data();
    double total = 0.0;
    for (int b = 0; b < B; ++b) {
        const double* row = in + static_cast<std::size_t>(b) * K;
        double m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        double z = 0.0;
        for (int k = 0; k < K; ++k) z += std::exp(row[k] - m);
        const double log_z = std::log(z) + m;
        total += log_z - row[labels[b]];
        double* sm = softmax.data() + static_cast<std::size_t>(b) * K;
        for (int k = 0; k < K; ++k) sm[k] = std::exp(row[k] - log_z);
    }
    Tensor out = Tensor::scalar(total / B);

    detail::check_same_tape(tape, {&logits}, "softmax_cross_entropy");
    if (detail::want_recording(tape, {&logits})) {
        out.set_requires_grad(true);
        auto l_n = logits.node_ptr();
        auto out_n = out.node_ptr();
        std::vector<int> labels_copy(labels.begin(), labels.end());
        tape->record("softmax_cross_entropy", {l_n}, out_n,
                     [l_n, out_n, B, K, sm = std::move(softmax),
                      labels_copy = std::move(labels_copy)](std::uint64_t epoch) {
                         if (!l_n->requires_grad) return;
                         auto gl = l_n->adjoint_for(epoch);
                         const double g = out_n->adjoint[0] / B;
                         for (int b = 0; b < B; ++b) {
                             const double* smb = sm.data() + static_cast<std::size_t>(b) * K;
                             double* dst = gl.data() + static_cast<std::size_t>(b) * K;
                             for (int k = 0; k < K; ++k) dst[k] += g * smb[k];
                             dst[labels_copy[b]] -= g;
                         }
                     });
    }
    return out;
}

// Mean over the batch of the squared distance between a logit row and the
// one-hot encoding of its label. Secondary loss used by oracle tests.
inline Tensor mse_one_hot(Tape* tape, const Tensor& logits, std::span<const int> labels) {
    if (logits.ndim() != 2) {
        throw ShapeError("mse_one_hot expects 2-d logits, got " + shape_str(logits.shape()));
    }
    const int B = logits.dim(0), K = logits.dim(1);
    if (static_cast<int>(labels.size()) != B) {
        throw ShapeError("mse_one_hot got " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(B) + " rows");
    }
    const double* in = logits.values().data();
    double total = 0.0;
    for (int b = 0; b < B; ++b) {
        if (labels[b] < 0 || labels[b] >= K) {
            throw Error("mse_one_hot label " + std::to_string(labels[b]) + " out of range [0," +
                        std::to_string(K) + ") at row " + std::to_string(b));
        }
        const double* row = in + static_cast<std::size_t>(b) * K;
        double acc = 0.0;   // per-row subtotal keeps the batch mean equal to the
                            // left-to-right sum of per-sample losses
        for (int k = 0; k < K; ++k) {
            const double d = row[k] - (k == labels[b] ? 1.0 : 0.0);
            acc += d * d;
        }
        total += acc;
    }
    Tensor out = Tensor::scalar(total / B);

    detail::check_same_tape(tape, {&logits}, "mse_one_hot");
    if (detail::want_recording(tape, {&logits})) {
        out.set_requires_grad(true);
        auto l_n = logits.node_ptr();
        auto out_n = out.node_ptr();
        std::vector<int> labels_copy(labels.begin(), labels.end());
        tape->record("mse_one_hot", {l_n}, out_n,
                     [l_n, out_n, B, K, labels_copy = std::move(labels_copy)](std::uint64_t epoch) {
                         if (!l_n->requires_grad) return;
                         auto gl = l_n->adjoint_for(epoch);
                         const double g = out_n->adjoint[0] * 2.0 / B;
                         const double* in = l_n->values.data();
                         for (int b = 0; b < B; ++b) {
                             const double* row = in + static_cast<std::size_t>(b) * K;
                             double* dst = gl.data() + static_cast<std::size_t>(b) * K;
                             for (int k = 0; k < K; ++k) {
                                 dst[k] += g * (row[k] - (k == labels_copy[b] ? 1.0 : 0.0));
                             }
                         }
                     });
    }
    return out;
}

namespace detail {

inline void check_scalars(std::span<const Tensor> xs, const char* op) {
    if (xs.empty()) {
        throw Error(std::string(op) + " requires a nonempty sequence");
    }
    for (const Tensor& t : xs) {
        if (t.size() != 1) {
            throw ShapeError(std::string(op) + " expects scalar tensors, got " + shape_str(t.shape()));
        }
    }
}

} // namespace detail

inline Tensor mean_of_scalars(Tape* tape, std::span<const Tensor> xs) {
    detail::check_scalars(xs, "mean_of_scalars");
    const std::size_t n = xs.size();
    double acc = 0.0;
    for (const Tensor& t : xs) acc += t.values()[0];
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));

    bool any_grad = false;
    for (const Tensor& t : xs) {
        detail::check_same_tape(tape, {&t}, "mean_of_scalars");
        if (t.requires_grad()) any_grad = true;
    }
    if (tape && any_grad) {
        out.set_requires_grad(true);
        std::vector<Tape::NodePtr> nodes;
        nodes.reserve(n);
        for (const Tensor& t : xs) nodes.push_back(t.node_ptr());
        auto out_n = out.node_ptr();
        tape->record("mean_of_scalars", nodes, out_n,
                     [nodes, out_n, n](std::uint64_t epoch) {
                         const double g = out_n->adjoint[0] / static_cast<double>(n);
                         for (auto& in : nodes) {
                             if (in->requires_grad) in->adjoint_for(epoch)[0] += g;
                         }
                     });
    }
    return out;
}

enum class VarianceKind { population, sample };

inline std::string to_string(VarianceKind k) {
    return k == VarianceKind::population ? "population" : "sample";
}

inline VarianceKind variance_kind_from_string(const std::string& s) {
    if (s == "population") return VarianceKind::population;
    if (s == "sample") return VarianceKind::sample;
    throw ConfigError("unknown variance kind \"" + s + "\" (expected population or sample)");
}

// Variance of a set of scalars. Population form divides by N (the default);
// the sample switch divides by N-1.
inline Tensor variance_of_scalars(Tape* tape, std::span<const Tensor> xs,
                                  VarianceKind kind = VarianceKind::population) {
    detail::check_scalars(xs, "variance_of_scalars");
    const std::size_t n = xs.size();
    if (n < 2 && kind == VarianceKind::sample) {
        throw Error("variance_of_scalars(sample) requires at least 2 values");
    }
    double mean = 0.0;
    for (const Tensor& t : xs) mean += t.values()[0];
    mean /= static_cast<double>(n);
    const double denom = (kind == VarianceKind::population) ? static_cast<double>(n)
                                                            : static_cast<double>(n - 1);
    double acc = 0.0;
    for (const Tensor& t : xs) {
        const double d = t.values()[0] - mean;
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc / denom);

    bool any_grad = false;
    for (const Tensor& t : xs) {
        detail::check_same_tape(tape, {&t}, "variance_of_scalars");
        if (t.requires_grad()) any_grad = true;
    }
    if (tape && any_grad) {
        out.set_requires_grad(true);
        std::vector<Tape::NodePtr> nodes;
        nodes.reserve(n);
        for (const Tensor& t : xs) nodes.push_back(t.node_ptr());
        auto out_n = out.node_ptr();
        tape->record("variance_of_scalars", nodes, out_n,
                     [nodes, out_n, mean, denom](std::uint64_t epoch) {
                         const double g = out_n->adjoint[0];
                         for (auto& in : nodes) {
                             if (!in->requires_grad) continue;
                             in->adjoint_for(epoch)[0] += g * 2.0 * (in->values[0] - mean) / denom;
                         }
                     });
    }
    return out;
}

// out = sum_i coeffs[i] * xs[i] over scalar tensors.
inline Tensor linear_combination(Tape* tape, std::span<const Tensor> xs,
                                 std::span<const double> coeffs) {
    detail::check_scalars(xs, "linear_combination");
    if (xs.size() != coeffs.size()) {
        throw ShapeError("linear_combination got " + std::to_string(xs.size()) + " tensors and " +
                         std::to_string(coeffs.size()) + " coefficients");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) acc += coeffs[i] * xs[i].values()[0];
    Tensor out = Tensor::scalar(acc);

    bool any_grad = false;
    for (const Tensor& t : xs) {
        detail::check_same_tape(tape, {&t}, "linear_combination");
        if (t.requires_grad()) any_grad = true;
    }
    if (tape && any_grad) {
        out.set_requires_grad(true);
        std::vector<Tape::NodePtr> nodes;
        nodes.reserve(xs.size());
        for (const Tensor& t : xs) nodes.push_back(t.node_ptr());
        std::vector<double> cs(coeffs.begin(), coeffs.end());
        auto out_n = out.node_ptr();
        tape->record("linear_combination", nodes, out_n,
                     [nodes, out_n, cs = std::move(cs)](std::uint64_t epoch) {
                         const double g = out_n->adjoint[0];
                         for (std::size_t i = 0; i < nodes.size(); ++i) {
                             if (nodes[i]->requires_grad) {
                                 nodes[i]->adjoint_for(epoch)[0] += g * cs[i];
                             }
                         }
                     });
    }
    return out;
}

} // namespace prunelab
