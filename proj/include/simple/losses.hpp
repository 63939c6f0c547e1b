#pragma once

#include "simple/tape.hpp"

namespace simple {

/// -log softmax(logits)[target]. Tape form for training graphs.
template <typename T>
Var<T> softmax_cross_entropy(Tape<T>& t, Var<T> logits, int target_index) {
    const Tensor<T>& vl = t.val(logits);
    if (vl.rank() != 1) detail::op_fail("softmax_cross_entropy", "expects a logit vector");
    Tensor<int> tg({1});
    tg[0] = target_index;
    return reshape(t, softmax_ce(t, logits, tg), {1});
}

template <typename T>
T softmax_cross_entropy(const Tensor<T>& logits, int target_index) {
    Tape<T> t;
    return t.val(softmax_cross_entropy(t, t.leaf(logits), target_index))[0];
}

/// Per-element squared error, each clipped below at C, then averaged.
/// Elements with error below C contribute C and exactly zero gradient.
template <typename T>
Var<T> clipped_l2_loss(Tape<T>& t, Var<T> pred, Var<T> target, T clip) {
    if (clip <= T(0)) detail::op_fail("clipped_l2_loss", "C must be positive");
    Var<T> d = sub(t, pred, target);
    return mean_all(t, max_const(t, mul(t, d, d), clip));
}

template <typename T>
T clipped_l2_loss(const Tensor<T>& pred, const Tensor<T>& target, T clip) {
    Tape<T> t;
    return t.val(clipped_l2_loss(t, t.leaf(pred), t.leaf(target), clip))[0];
}

/// Per-row softmax cross-entropy against integer targets, clipped below at C,
/// averaged. Rows already predicted with CE < C contribute no gradient.
template <typename T>
Var<T> clipped_ce_loss(Tape<T>& t, Var<T> logits, const Tensor<int>& targets, T clip, int classes = -1) {
    if (clip <= T(0)) detail::op_fail("clipped_ce_loss", "C must be positive");
    return mean_all(t, max_const(t, softmax_ce(t, logits, targets, classes), clip));
}

template <typename T>
T clipped_ce_loss(const Tensor<T>& logits, const Tensor<int>& targets, T clip, int classes = -1) {
    Tape<T> t;
    return t.val(clipped_ce_loss(t, t.leaf(logits), targets, clip, classes))[0];
}

}  // namespace simple
