"""Recover the victim's label from a single-sample cross-entropy gradient.

For softmax cross-entropy the gradient w.r.t. the last layer's bias is
``softmax(z) - onehot(y)``: negative at the true class, positive elsewhere.
"""

from __future__ import annotations

import numpy as np

from .models import ModelSpec


class AmbiguousLabel(ValueError):
    def __init__(self, candidates):
        self.candidates = tuple(int(c) for c in candidates)
        super().__init__(
            f"expected exactly one negative bias-gradient entry, found {len(self.candidates)}: "
            f"{list(self.candidates)} (batch > 1 or a loss other than cross-entropy?)"
        )


def _final_linear(spec: ModelSpec):
    for i in range(len(spec.layers) - 1, -1, -1):
        if spec.layers[i].kind == "linear":
            return i
    raise ValueError("model has no final linear layer")


def _offsets(spec: ModelSpec):
    out, start = {}, 0
    for name, shape in spec.param_shapes().items():
        size = int(np.prod(shape))
        out[name] = (start, start + size, shape)
        start += size
    return out


def restore_label(capture, spec: ModelSpec, strict: bool = True) -> int:
    """Index of the unique negative entry of the final bias gradient.

    With ``strict=False`` an ambiguous bias gradient falls back to the class
    whose final weight row has the most negative gradient sum.
    """
    gradient = np.asarray(getattr(capture, "gradient", capture), dtype=np.float64)
    if spec.num_classes == 1:
        return 0
    offsets = _offsets(spec)
    i = _final_linear(spec)
    bias = offsets.get(f"{i}.bias")
    if bias is not None:
        start, end, _ = bias
        negative = np.flatnonzero(gradient[start:end] < 0)
        if negative.size == 1:
            return int(negative[0])
        if strict:
            raise AmbiguousLabel(negative)
    start, end, shape = offsets[f"{i}.weight"]
    rows = gradient[start:end].reshape(shape).sum(axis=1)
    return int(np.argmin(rows))
