"""Victim side of one federated round and the GINV1 capture file format.

File layout::

    GINV1
    model <16 hex digits>
    label <int|unknown>
    trainsteps <int>
    len <int>
    data
    <len little-endian binary64 values>
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io_util import atomic_write_bytes
from .models import Model, ModelSpec, ParamStore, param_gradient, train_sgd

MAGIC = b"GINV1\n"


class CaptureFormatError(ValueError):
    pass


class FingerprintMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GradientCapture:
    gradient: np.ndarray
    fingerprint: str
    label: int | None = None
    train_steps: int = 0

    def __post_init__(self):
        g = np.array(self.gradient, dtype=np.float64).ravel()
        g.flags.writeable = False
        object.__setattr__(self, "gradient", g)

    def __eq__(self, other):
        if not isinstance(other, GradientCapture):
            return NotImplemented
        return (
            self.fingerprint == other.fingerprint
            and self.label == other.label
            and self.train_steps == other.train_steps
            and self.gradient.tobytes() == other.gradient.tobytes()
        )

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.gradient))

    def check_model(self, spec: ModelSpec):
        fp = spec.fingerprint()
        if fp != self.fingerprint:
            raise FingerprintMismatch(f"capture was made on model {self.fingerprint}, got model {fp}")
        if self.gradient.size != spec.param_count:
            raise CaptureFormatError(
                f"capture has {self.gradient.size} values, model has {spec.param_count} parameters"
            )


def prepare_params(spec: ModelSpec, params: ParamStore, train_steps: int, train_samples=None,
                   seed: int = 0) -> ParamStore:
    """Parameters at the training stage the victim is attacked at."""
    if train_steps <= 0:
        return params
    return train_sgd(spec, params, train_samples or [], train_steps, lr=0.1, seed=seed)


def victim_round(model: Model | ModelSpec, params: ParamStore, image, label: int, train_steps: int = 0,
                 train_samples=None, seed: int = 0, reveal_label: bool = False) -> GradientCapture:
    """Share one gradient on the secret ``(image, label)``.

    With ``train_steps > 0`` the model first takes that many SGD steps on
    ``train_samples`` (held-out ``(image, label)`` pairs), modelling a later
    stage of training.
    """
    spec = model.spec if isinstance(model, Model) else model
    image = np.asarray(image, dtype=np.float64)
    if image.shape != spec.input_shape:
        raise ValueError(f"image has shape {image.shape}, model expects {spec.input_shape}")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("secret image must lie in [0, 1]")
    if not 0 <= label < spec.num_classes:
        raise ValueError(f"label {label} out of range")
    params = prepare_params(spec, params, train_steps, train_samples, seed)
    g = param_gradient(spec, params, image, label)
    return GradientCapture(g, spec.fingerprint(), label if reveal_label else None, int(train_steps))


def encode_capture(capture: GradientCapture) -> bytes:
    label = "unknown" if capture.label is None else str(int(capture.label))
    header = (
        f"GINV1\nmodel {capture.fingerprint}\nlabel {label}\n"
        f"trainsteps {int(capture.train_steps)}\nlen {capture.gradient.size}\ndata\n"
    )
    return header.encode("ascii") + capture.gradient.astype("<f8").tobytes()


def decode_capture(data: bytes) -> GradientCapture:
    if not data.startswith(MAGIC):
        raise CaptureFormatError("not a GINV1 capture (bad magic or version)")
    lines = []
    pos = len(MAGIC)
    for key in ("model", "label", "trainsteps", "len", "data"):
        end = data.find(b"\n", pos)
        if end < 0:
            raise CaptureFormatError(f"truncated header before {key!r}")
        line = data[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        if key == "data":
            if line != "data":
                raise CaptureFormatError(f"expected 'data' line, got {line!r}")
            break
        name, _, value = line.partition(" ")
        if name != key or not value:
            raise CaptureFormatError(f"expected '{key} <value>', got {line!r}")
        lines.append(value)
    fingerprint, label, steps, length = lines
    try:
        if len(fingerprint) != 16:
            raise ValueError
        int(fingerprint, 16)
        label = None if label == "unknown" else int(label)
        steps = int(steps)
        length = int(length)
    except ValueError:
        raise CaptureFormatError("malformed header value") from None
    payload = data[pos:]
    if len(payload) != 8 * length:
        raise CaptureFormatError(f"payload has {len(payload)} bytes, header promises {8 * length}")
    gradient = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return GradientCapture(gradient, fingerprint, label, steps)


def write_capture(capture: GradientCapture, path):
    atomic_write_bytes(path, encode_capture(capture))


def read_capture(path) -> GradientCapture:
    return decode_capture(Path(path).read_bytes())
