"""Reverse-mode automatic differentiation with higher-order support."""

from .graph import (
    OPS,
    Graph,
    GraphError,
    Node,
    ShapeError,
    absolute,
    add,
    broadcast_to,
    concat,
    conv2d,
    conv2d_input_grad,
    conv2d_weight_grad,
    div,
    embed,
    exp,
    forward,
    grad,
    inner,
    l2_norm,
    matmul,
    maximum,
    mean,
    mul,
    relu,
    reshape,
    safe_div,
    scale,
    sign,
    softmax,
    softmax_cross_entropy,
    sqrt,
    square,
    step,
    sub,
    sum_all,
    sum_to,
    take,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
