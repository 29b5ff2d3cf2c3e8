//! Fault injection for the gradient-check harness: a named op's backward rule
//! can be deliberately corrupted to prove the checker catches it.
//!
//! The setting is per thread, so a corrupted rule never leaks into unrelated work.

use std::cell::RefCell;

thread_local! {
    static CORRUPTED: RefCell<Option<String>> = const { RefCell::new(None) };
}

/// Scale applied to the upstream gradient of a corrupted op.
pub const CORRUPTION_FACTOR: f64 = 1.5;

/// Corrupt the backward rule of the op with this name (see [`super::Graph::op_name`]),
/// or clear corruption with `None`.
pub fn corrupt_backward(op: Option<&str>) {
    CORRUPTED.with(|c| *c.borrow_mut() = op.map(str::to_owned));
}

pub(crate) fn factor(op: &str) -> Option<f64> {
    CORRUPTED.with(|c| match c.borrow().as_deref() {
        Some(name) if name == op => Some(CORRUPTION_FACTOR),
        _ => None,
    })
}

/// Names of every op with a backward rule that can be corrupted.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "scale",
    "add",
    "sub",
    "mul",
    "linear",
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "concat_channels",
    "concat_batch",
    "select_batch",
    "reshape",
    "global_avg_pool",
    "sum",
    "mean",
    "log_clamped",
    "softmax_cross_entropy",
];
