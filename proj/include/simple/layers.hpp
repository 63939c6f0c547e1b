#pragma once

#include <string>
#include <vector>

#include "simple/tape.hpp"

namespace simple {

enum class LayerKind {
    conv2d,
    conv2d_transpose,
    dense,
    lstm_cell,
    layer_norm,
    dropout,
    relu,
    softmax,
    embedding,
};

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::conv2d_transpose: return "conv2d_transpose";
        case LayerKind::dense: return "dense";
        case LayerKind::lstm_cell: return "lstm_cell";
        case LayerKind::layer_norm: return "layer_norm";
        case LayerKind::dropout: return "dropout";
        case LayerKind::relu: return "relu";
        case LayerKind::softmax: return "softmax";
        case LayerKind::embedding: return "embedding";
    }
    return "?";
}

/// One layer's static description. `units` is the output channel/unit count
/// (hidden size for lstm_cell, embedding dim for embedding).
struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    int kernel_h = 1, kernel_w = 1;
    int stride_h = 1, stride_w = 1;
    int units = 0;
    int vocab = 0;
    double rate = 0.0;
    Padding padding = Padding::same;
    std::string name;

    std::string label() const { return name.empty() ? layer_kind_name(kind) : name; }

    void validate() const {
        if (kernel_h <= 0 || kernel_w <= 0 || stride_h <= 0 || stride_w <= 0)
            detail::op_fail(label(), "kernel and stride must be positive");
        if (rate < 0.0 || rate >= 1.0) detail::op_fail(label(), "dropout rate must be in [0,1)");
        switch (kind) {
            case LayerKind::conv2d:
            case LayerKind::conv2d_transpose:
            case LayerKind::dense:
            case LayerKind::lstm_cell:
                if (units <= 0) detail::op_fail(label(), "units must be positive");
                break;
            case LayerKind::embedding:
                if (units <= 0 || vocab <= 0) detail::op_fail(label(), "embedding needs vocab and units");
                break;
            default:
                break;
        }
    }
};

/// Fan-in scaled uniform init, U(+-sqrt(3/fan_in)). Seedable and dtype-generic.
template <typename T>
Tensor<T> uniform_init(std::vector<int> shape, int64_t fan_in, Rng& rng) {
    Tensor<T> w(std::move(shape));
    const double bound = std::sqrt(3.0 / static_cast<double>(std::max<int64_t>(fan_in, 1)));
    for (auto& x : w.v) x = static_cast<T>(rng.uniform(-bound, bound));
    return w;
}

/// Parameter tensors for a layer spec applied to `input_shape`, in the fixed
/// order layer_forward consumes them.
template <typename T>
std::vector<Tensor<T>> init_layer_params(const LayerSpec& spec, const std::vector<int>& input_shape, Rng& rng) {
    spec.validate();
    std::vector<Tensor<T>> p;
    const int ci = input_shape.empty() ? 0 : input_shape.back();
    switch (spec.kind) {
        case LayerKind::conv2d:
            p.push_back(uniform_init<T>({spec.kernel_h, spec.kernel_w, ci, spec.units},
                                        int64_t(spec.kernel_h) * spec.kernel_w * ci, rng));
            p.push_back(Tensor<T>({spec.units}));
            break;
        case LayerKind::conv2d_transpose:
            p.push_back(uniform_init<T>({spec.kernel_h, spec.kernel_w, spec.units, ci},
                                        int64_t(spec.kernel_h) * spec.kernel_w * ci, rng));
            p.push_back(Tensor<T>({spec.units}));
            break;
        case LayerKind::dense:
            p.push_back(uniform_init<T>({ci, spec.units}, ci, rng));
            p.push_back(Tensor<T>({spec.units}));
            break;
        case LayerKind::lstm_cell:
            p.push_back(uniform_init<T>({ci, 4 * spec.units}, ci, rng));
            p.push_back(uniform_init<T>({spec.units, 4 * spec.units}, spec.units, rng));
            p.push_back(Tensor<T>({4 * spec.units}));
            break;
        case LayerKind::layer_norm:
            p.push_back(Tensor<T>::full({ci}, T(1)));
            p.push_back(Tensor<T>({ci}));
            break;
        case LayerKind::embedding:
            p.push_back(uniform_init<T>({spec.vocab, spec.units}, spec.units, rng));
            break;
        default:
            break;  // dropout / relu / softmax are parameter-free
    }
    return p;
}

/// One LSTM cell step. Gate order (input, forget, candidate, output).
/// Returns (h', c').
template <typename T>
std::pair<Var<T>, Var<T>> lstm_cell(Tape<T>& t, Var<T> x, Var<T> h, Var<T> c, Var<T> wx, Var<T> wh,
                                    Var<T> b) {
    const int H4 = t.val(b).dim(0);
    const int H = H4 / 4;
    const int N = t.val(x).dim(0);
    Var<T> gates = add_bias(t, add(t, matmul(t, x, wx), matmul(t, h, wh)), b);
    // Split [N, 4H] into the four gate blocks.
    auto block = [&](int j) {
        const Tensor<T>& vg = t.val(gates);
        Tensor<T> sel({N, H});
        for (int n = 0; n < N; ++n)
            for (int k = 0; k < H; ++k) sel[n * H + k] = vg[n * H4 + j * H + k];
        Var<T> out = t.next_var();
        return t.push(std::move(sel), t.needs(gates), [gates, j, N, H, H4, out](Tape<T>& tp) {
            const Tensor<T>& g = tp.out_grad(out);
            if (auto* gg = tp.grad_ref(gates))
                for (int n = 0; n < N; ++n)
                    for (int k = 0; k < H; ++k) (*gg)[n * H4 + j * H + k] += g[n * H + k];
        });
    };
    Var<T> i = sigmoid(t, block(0));
    Var<T> f = sigmoid(t, block(1));
    Var<T> g = tanh_op(t, block(2));
    Var<T> o = sigmoid(t, block(3));
    Var<T> c_new = add(t, mul(t, f, c), mul(t, i, g));
    Var<T> h_new = mul(t, o, tanh_op(t, c_new));
    return {h_new, c_new};
}

/// Uniform single-input layer application on an existing tape. lstm_cell here
/// runs one step from zero hidden/cell state and returns the hidden output;
/// multi-step recurrences call lstm_cell directly.
template <typename T>
Var<T> layer_forward(Tape<T>& t, const LayerSpec& spec, const std::vector<Var<T>>& params, Var<T> input,
                     bool training, Rng& rng) {
    spec.validate();
    const auto& in_shape = t.val(input).shape;
    auto want = [&](size_t n) {
        if (params.size() != n)
            detail::op_fail(spec.label(), "expected " + std::to_string(n) + " parameter tensors, got " +
                                              std::to_string(params.size()));
    };
    switch (spec.kind) {
        case LayerKind::conv2d:
            want(2);
            return conv2d(t, input, params[0], params[1], spec.stride_h, spec.stride_w, spec.padding);
        case LayerKind::conv2d_transpose: {
            want(2);
            if (in_shape.size() != 4) detail::op_fail(spec.label(), "input must be NHWC");
            return conv2d_transpose(t, input, params[0], params[1], spec.stride_h, spec.stride_w,
                                    in_shape[1] * spec.stride_h, in_shape[2] * spec.stride_w);
        }
        case LayerKind::dense:
            want(2);
            return add_bias(t, matmul(t, input, params[0]), params[1]);
        case LayerKind::lstm_cell: {
            want(3);
            const int N = in_shape.empty() ? 1 : in_shape[0];
            Var<T> h0 = t.leaf(Tensor<T>({N, spec.units}));
            Var<T> c0 = t.leaf(Tensor<T>({N, spec.units}));
            return lstm_cell(t, input, h0, c0, params[0], params[1], params[2]).first;
        }
        case LayerKind::layer_norm:
            want(2);
            return layer_norm(t, input, params[0], params[1]);
        case LayerKind::dropout:
            want(0);
            return dropout(t, input, spec.rate, training, rng);
        case LayerKind::relu:
            want(0);
            return relu(t, input);
        case LayerKind::softmax:
            want(0);
            return softmax_lastdim(t, input);
        case LayerKind::embedding: {
            want(1);
            const Tensor<T>& vi = t.val(input);
            Tensor<int> idx(vi.shape);
            for (int64_t k = 0; k < vi.numel(); ++k) idx[k] = static_cast<int>(vi[k]);
            return embedding(t, params[0], idx);
        }
    }
    detail::op_fail(spec.label(), "unknown layer kind");
}

/// Standalone single-layer application (fresh tape, value out).
template <typename T>
Tensor<T> forward_layer(const LayerSpec& spec, const std::vector<Tensor<T>>& params, const Tensor<T>& input,
                        bool training, Rng& rng) {
    Tape<T> tape;
    std::vector<Var<T>> pv;
    pv.reserve(params.size());
    for (const auto& p : params) pv.push_back(tape.leaf(p));
    Var<T> out = layer_forward(tape, spec, pv, tape.leaf(input), training, rng);
    return tape.val(out);
}

}  // namespace simple
