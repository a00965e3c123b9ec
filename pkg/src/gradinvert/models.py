"""Small image classifiers built on the autodiff tape.

A model is described by a :class:`ModelSpec` (input shape, layer list, class
count) and its weights live in a :class:`ParamStore`. The same spec can be
instantiated into any graph with :func:`apply`, which is how the attack builds
its objective around a candidate-image input.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import ConfigError, check_keys, parse_int_list, parse_lines

PRNG_NAME = "numpy-pcg64/seedsequence-v1"
LAYER_KINDS = ("conv2d", "linear", "relu", "flatten")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str
    out: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def describe(self) -> str:
        if self.kind == "conv2d":
            return f"conv2d out={self.out} kernel={self.kernel} stride={self.stride} padding={self.padding}"
        if self.kind == "linear":
            return f"linear out={self.out}"
        return self.kind


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    layers: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def layer_shapes(self) -> list[tuple]:
        """Output shape of every layer; raises ModelError at the first bad one."""
        if not self.layers:
            raise ModelError("model has no layers")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ModelError(f"input shape must be (C, H, W) with positive sizes, got {self.input_shape}")
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            where = f"layer {i} ({layer.describe()})"
            if layer.kind == "conv2d":
                if len(shape) != 3:
                    raise ModelError(f"{where}: needs a (C, H, W) input, got {shape}")
                if layer.out < 1 or layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
                    raise ModelError(f"{where}: invalid sizes")
                h = (shape[1] + 2 * layer.padding - layer.kernel) // layer.stride + 1
                w = (shape[2] + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if h < 1 or w < 1:
                    raise ModelError(f"{where}: kernel larger than padded input {shape}")
                shape = (layer.out, h, w)
            elif layer.kind == "linear":
                if len(shape) != 1:
                    raise ModelError(f"{where}: needs a flat input, got {shape}; add a flatten layer")
                if layer.out < 1:
                    raise ModelError(f"{where}: invalid out size")
                shape = (layer.out,)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "relu":
                pass
            else:
                raise ModelError(f"{where}: unknown layer kind {layer.kind!r}")
            shapes.append(shape)
        if shape != (self.num_classes,):
            raise ModelError(
                f"layer {len(self.layers) - 1}: final output {shape} does not match {self.num_classes} classes"
            )
        return shapes

    def validate(self) -> "ModelSpec":
        self.layer_shapes()
        return self

    def param_shapes(self) -> "OrderedDict[str, tuple]":
        self.validate()
        shapes = OrderedDict()
        shape = self.input_shape
        for i, (layer, out_shape) in enumerate(zip(self.layers, self.layer_shapes())):
            if layer.kind == "conv2d":
                shapes[f"{i}.weight"] = (layer.out, shape[0], layer.kernel, layer.kernel)
                shapes[f"{i}.bias"] = (layer.out,)
            elif layer.kind == "linear":
                shapes[f"{i}.weight"] = (layer.out, shape[0])
                shapes[f"{i}.bias"] = (layer.out,)
            shape = out_shape
        return shapes

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def to_text(self) -> str:
        """Canonical config text; also the input of the fingerprint."""
        lines = [
            "input = " + ",".join(str(s) for s in self.input_shape),
            f"classes = {self.num_classes}",
        ]
        lines += [f"layer = {layer.describe()}" for layer in self.layers]
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return fnv1a64(self.to_text().encode("ascii"))

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        cfg = parse_lines(text, repeatable=("layer",))
        check_keys(cfg, ("input", "classes", "layer"), "model")
        for key in ("input", "classes"):
            if key not in cfg:
                raise ConfigError(f"model config is missing {key!r}")
        layers = tuple(_parse_layer(v) for v in cfg.get("layer", []))
        spec = cls(tuple(parse_int_list(cfg["input"])), layers, int(cfg["classes"]))
        try:
            spec.validate()
        except ModelError as exc:
            raise ConfigError(str(exc)) from None
        return spec


def _parse_layer(text: str) -> Layer:
    kind, *opts = text.split()
    if kind not in LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    kwargs = {}
    for opt in opts:
        key, _, value = opt.partition("=")
        if key not in ("out", "kernel", "stride", "padding"):
            raise ConfigError(f"unknown layer option {key!r} in {text!r}")
        kwargs[key] = int(value)
    return Layer(kind, **kwargs)


def fnv1a64(data: bytes) -> str:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def convnet_s(num_classes: int = 10, channels: int = 1, size: int = 16) -> ModelSpec:
    """Default desk-scale architecture: two 3x3 convs (the second strided) and a linear head."""
    layers = (
        Layer("conv2d", out=8, kernel=3, stride=1, padding=1),
        Layer("relu"),
        Layer("conv2d", out=8, kernel=3, stride=2, padding=1),
        Layer("relu"),
        Layer("flatten"),
        Layer("linear", out=num_classes),
    )
    return ModelSpec((channels, size, size), layers, num_classes).validate()


class ParamStore:
    """Named parameter arrays with a fixed flattening order."""

    def __init__(self, arrays: "OrderedDict[str, np.ndarray]"):
        self._arrays = OrderedDict()
        for name, value in arrays.items():
            a = np.array(value, dtype=np.float64)
            a.flags.writeable = False
            self._arrays[name] = a

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    @property
    def names(self) -> list[str]:
        return list(self._arrays)

    @property
    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def unflatten(self, flat) -> "ParamStore":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ModelError(f"flat vector has shape {flat.shape}, expected ({self.size},)")
        out, start = OrderedDict(), 0
        for name, a in self._arrays.items():
            out[name] = flat[start:start + a.size].reshape(a.shape)
            start += a.size
        return ParamStore(out)

    def slice_of(self, name) -> slice:
        """Coordinates of parameter ``name`` inside :meth:`flatten`."""
        start = 0
        for key, a in self._arrays.items():
            if key == name:
                return slice(start, start + a.size)
            start += a.size
        raise KeyError(name)

    def equals(self, other: "ParamStore") -> bool:
        return self.names == other.names and all(
            np.array_equal(self[n], other[n]) for n in self.names
        )


def init_params(spec: ModelSpec, seed: int) -> ParamStore:
    arrays = OrderedDict()
    for index, (name, shape) in enumerate(spec.param_shapes().items()):
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), index])))
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ParamStore(arrays)


def apply(spec: ModelSpec, x: ad.Node, params: dict) -> tuple:
    """Instantiate ``spec`` on graph input ``x``.

    ``params`` maps parameter names to nodes in ``x``'s graph. Returns the
    logits node and the activation trace as a list of ``(j, node)`` pairs,
    one per post-nonlinearity output, ``j`` counting from 0.
    """
    trace = []
    h = x
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv2d":
            h = ad.conv2d(h, params[f"{i}.weight"], layer.stride, layer.padding)
            h = h + ad.reshape(params[f"{i}.bias"], (layer.out, 1, 1))
        elif layer.kind == "linear":
            h = ad.reshape(params[f"{i}.weight"] @ ad.reshape(h, (h.size, 1)), (layer.out,))
            h = h + params[f"{i}.bias"]
        elif layer.kind == "relu":
            h = ad.relu(h)
            trace.append((len(trace), h))
        elif layer.kind == "flatten":
            h = ad.reshape(h, (h.size,))
    return h, trace


def conv_trace_indices(spec: ModelSpec) -> list[int]:
    """Trace positions whose activation is a (C, H, W) feature map."""
    out, shapes, j = [], spec.layer_shapes(), 0
    for layer, shape in zip(spec.layers, shapes):
        if layer.kind == "relu":
            if len(shape) == 3:
                out.append(j)
            j += 1
    return out


@dataclass
class Model:
    """A spec bound to a reusable forward graph."""

    spec: ModelSpec
    graph: ad.Graph = field(repr=False)
    x: ad.Node = field(repr=False)
    params: dict = field(repr=False)
    logits: ad.Node = field(repr=False)
    trace: list = field(repr=False)

    @property
    def fingerprint(self) -> str:
        return self.spec.fingerprint()


def build_model(spec: ModelSpec, seed: int) -> tuple[Model, ParamStore]:
    spec.validate()
    store = init_params(spec, seed)
    graph = ad.Graph()
    x = graph.input(np.zeros(spec.input_shape), name="x")
    nodes = {name: graph.parameter(value, name=name) for name, value in store.items()}
    logits, trace = apply(spec, x, nodes)
    return Model(spec, graph, x, nodes, logits, trace), store


def _bindings(model, params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.spec.input_shape:
        raise ModelError(f"input has shape {x.shape}, model expects {model.spec.input_shape}")
    b = {model.params[name]: value for name, value in params.items()}
    b[model.x] = x
    return b


def forward_with_trace(model: Model, params: ParamStore, x) -> tuple[np.ndarray, list]:
    outputs = [model.logits] + [node for _, node in model.trace]
    model.graph.forward(_bindings(model, params, x), outputs=outputs)
    return model.logits.value, [(j, node.value) for j, node in model.trace]


def param_gradient_node(spec: ModelSpec, x: ad.Node, params: ParamStore, label: int, param_nodes=None):
    """Flat cross-entropy gradient w.r.t. all parameters, as a node of ``x``'s graph."""
    g = x.graph
    if param_nodes is None:
        param_nodes = {name: g.parameter(value, name=name) for name, value in params.items()}
    logits, _ = apply(spec, x, param_nodes)
    loss = ad.softmax_cross_entropy(logits, label)
    grads = ad.grad(loss, [param_nodes[n] for n in params.names])
    flat = ad.concat([ad.reshape(grads[param_nodes[n]], (params[n].size,)) for n in params.names])
    return flat, loss


def param_gradient(model: Model | ModelSpec, params: ParamStore, x, y: int):
    """Gradient of softmax cross-entropy w.r.t. every parameter, flattened.

    If ``x`` is a graph node the result is a node of the same graph (so it can
    be differentiated again); otherwise a numpy vector is returned.
    """
    spec = model.spec if isinstance(model, Model) else model
    if isinstance(x, ad.Node):
        return param_gradient_node(spec, x, params, y)[0]
    x = np.asarray(x, dtype=np.float64)
    if x.shape != spec.input_shape:
        raise ModelError(f"input has shape {x.shape}, model expects {spec.input_shape}")
    g = ad.Graph()
    flat, _ = param_gradient_node(spec, g.constant(x), params, y)
    return np.array(flat.value)


def train_sgd(spec: ModelSpec, params: ParamStore, samples, steps: int, lr: float = 0.1, seed: int = 0) -> ParamStore:
    """Plain batch-size-1 SGD over ``samples`` (a list of ``(image, label)``)."""
    if steps <= 0:
        return params
    if not samples:
        raise ModelError("training requested without samples")
    graph = ad.Graph()
    x = graph.input(np.zeros(spec.input_shape), name="x")
    nodes = {name: graph.parameter(value, name=name) for name, value in params.items()}
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x5D])))
    flat = params.flatten()
    by_label = {}
    for t in range(steps):
        if t % len(samples) == 0:
            order = rng.permutation(len(samples))
        image, label = samples[order[t % len(samples)]]
        if label not in by_label:
            by_label[label] = param_gradient_node(spec, x, params, label, nodes)[0]
        current = params.unflatten(flat)
        bind = {nodes[n]: current[n] for n in current.names}
        bind[x] = image
        out = by_label[label]
        graph.forward(bind, outputs=[out])
        flat = flat - lr * out.value
    return params.unflatten(flat)
