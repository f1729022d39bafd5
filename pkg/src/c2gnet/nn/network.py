"""Network specs, the two architectures, forward/backward and the loss."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ..errors import DataError, EmptyBatch, ShapeMismatch, ShapeUnderflow
from . import layers as L

KINDS = ("conv", "maxpool", "flatten", "dense", "dropout", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """One layer.

    ``size`` is the kernel or pooling window, ``units`` the filter or neuron
    count. For pools, ``padding="same"`` keeps a partial trailing window.
    """

    kind: str
    size: int = 0
    units: int = 0
    padding: str = "valid"
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "maxpool") and self.size < 1:
            raise DataError(f"{self.kind} needs a positive window size")
        if self.kind in ("conv", "dense", "softmax") and self.units < 1:
            raise DataError(f"{self.kind} needs a positive unit count")
        if self.padding not in ("valid", "same"):
            raise DataError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        if not 0.0 <= self.rate < 1.0:
            raise DataError(f"dropout rate must lie in [0, 1), got {self.rate}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "dense", "softmax")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "size": self.size, "units": self.units, "padding": self.padding, "rate": self.rate}


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    l1: float = 1e-3
    name: str = "network"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.l1 < 0:
            raise DataError("L1 coefficient must be non-negative")
        if not self.layers or self.layers[-1].kind != "softmax":
            raise DataError("a network must end in a softmax layer")
        self.output_shapes()  # validates composition

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer (without the batch axis)."""
        shape: tuple[int, ...] = self.input_shape
        out = []
        for i, ly in enumerate(self.layers):
            if ly.kind in ("conv", "maxpool"):
                if len(shape) != 3:
                    raise ShapeMismatch(f"layer {i} ({ly.kind}) needs a 3-D input, got {shape}")
                x, y, c = shape
                if ly.kind == "conv":
                    if ly.padding == "valid":
                        x, y = x - ly.size + 1, y - ly.size + 1
                    c = ly.units
                else:
                    x, y = L.pool_output(x, ly.size, ly.padding), L.pool_output(y, ly.size, ly.padding)
                if x < 1 or y < 1:
                    raise ShapeUnderflow(f"layer {i} ({ly.kind} {ly.size}x{ly.size}) on {shape} leaves {x}x{y}")
                shape = (x, y, c)
            elif ly.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif ly.kind in ("dense", "softmax"):
                if len(shape) != 1:
                    raise ShapeMismatch(f"layer {i} ({ly.kind}) needs a flat input, got {shape}")
                shape = (ly.units,)
            out.append(shape)
        return out

    def param_shapes(self) -> list[tuple[tuple[int, ...], ...]]:
        shapes, prev = [], self.input_shape
        for ly, out in zip(self.layers, self.output_shapes()):
            if ly.kind == "conv":
                shapes.append(((ly.size, ly.size, prev[-1], ly.units), (ly.units,)))
            elif ly.kind in ("dense", "softmax"):
                shapes.append(((prev[0], ly.units), (ly.units,)))
            else:
                shapes.append(())
            prev = out
        return shapes

    def param_counts(self) -> list[int]:
        return [sum(int(np.prod(s)) for s in ps) for ps in self.param_shapes()]

    @property
    def n_params(self) -> int:
        return sum(self.param_counts())

    def with_l1(self, l1: float) -> "NetworkSpec":
        return replace(self, l1=l1)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "l1": self.l1,
            "layers": [ly.to_dict() for ly in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            layers=tuple(LayerSpec(**ly) for ly in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            l1=d["l1"],
            name=d.get("name", "network"),
        )


def build_deeplnino(channels: int = 6, classes: int = 2, input_plane=(135, 101), l1: float = 1e-3) -> NetworkSpec:
    """The compact 16-filter network: 1x1 conv, five conv+pool stages, dense(32)."""
    if channels < 1:
        raise DataError("need at least one input channel")
    conv = lambda k, pad="valid": LayerSpec("conv", size=k, units=16, padding=pad)  # noqa: E731
    pool = lambda k, pad="valid": LayerSpec("maxpool", size=k, padding=pad)  # noqa: E731
    layers = (
        conv(1),
        conv(2),
        pool(2),
        conv(3),
        pool(3),
        conv(3),
        pool(3),
        conv(3, "same"),
        pool(3, "same"),
        conv(2, "same"),
        pool(2, "same"),
        LayerSpec("flatten"),
        LayerSpec("dense", units=32),
        LayerSpec("dropout", rate=0.33),
        LayerSpec("softmax", units=classes),
    )
    return NetworkSpec(layers, (*input_plane, channels), l1=l1, name="DeepLNiNo")


def build_deepcnet(
    l: int,
    k: int = 32,
    input_shape=(672, 504, 6),
    dense_units: int = 128,
    classes: int = 2,
    padding: str = "same",
) -> NetworkSpec:
    """Reference network: ``l`` conv+maxpool(2) stages with ``n * k`` filters at stage ``n``.

    The first convolution is 3x3, the rest 2x2. No L1 term. With the default
    ``"same"`` padding (convs and pools), eight stages fit a 672x504 plane
    and six fit 135x101; ``"valid"`` underflows on both.
    """
    if l < 2:
        raise DataError("DeepCNet needs at least two stages")
    layers = []
    for n in range(1, l + 1):
        layers.append(LayerSpec("conv", size=3 if n == 1 else 2, units=n * k, padding=padding))
        layers.append(LayerSpec("maxpool", size=2, padding=padding))
    layers += [LayerSpec("flatten"), LayerSpec("dense", units=dense_units), LayerSpec("softmax", units=classes)]
    return NetworkSpec(tuple(layers), tuple(input_shape), l1=0.0, name=f"DeepCNet(l={l})")


# ---------------------------------------------------------------------------


def init_params(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> list[tuple[np.ndarray, ...]]:
    """Glorot-uniform weights, zero biases; ``()`` for parameter-free layers."""
    params = []
    for shapes in spec.param_shapes():
        if not shapes:
            params.append(())
            continue
        wshape, bshape = shapes
        receptive = int(np.prod(wshape[:-2])) if len(wshape) == 4 else 1
        fan_in, fan_out = receptive * wshape[-2], receptive * wshape[-1]
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        params.append((rng.uniform(-lim, lim, wshape).astype(dtype), np.zeros(bshape, dtype=dtype)))
    return params


def flatten_params(params) -> list[np.ndarray]:
    return [a for p in params for a in p]


def unflatten_params(spec: NetworkSpec, flat: Sequence[np.ndarray]) -> list[tuple[np.ndarray, ...]]:
    it = iter(flat)
    return [tuple(next(it) for _ in shapes) for shapes in spec.param_shapes()]


def first_conv_index(spec: NetworkSpec) -> int:
    for i, ly in enumerate(spec.layers):
        if ly.has_params:
            return i
    raise DataError("network has no trainable layer")


def forward(spec: NetworkSpec, params, x, training: bool = False, rng: np.random.Generator | None = None):
    """Class probabilities for a batch ``x`` of shape ``(N, X, Y, P)``.

    Returns ``(probs, cache)``; ``cache`` feeds :func:`backward`. Dropout is
    active only with ``training=True``.
    """
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != spec.input_shape:
        raise ShapeMismatch(f"input {x.shape[1:]} does not match network input {spec.input_shape}")
    if training and rng is None:
        rng = np.random.default_rng()
    caches = []
    h = x
    for ly, p in zip(spec.layers, params):
        if ly.kind == "conv":
            h, c = L.conv_forward(h, p[0], p[1], ly.padding, relu=True)
        elif ly.kind == "maxpool":
            h, c = L.maxpool_forward(h, ly.size, ly.padding)
        elif ly.kind == "flatten":
            c = h.shape
            h = h.reshape(h.shape[0], -1)
        elif ly.kind == "dense":
            h, c = L.dense_forward(h, p[0], p[1], relu=True)
        elif ly.kind == "dropout":
            if training and ly.rate > 0:
                h, c = L.dropout_forward(h, ly.rate, rng)
            else:
                c = None
        else:  # softmax
            h, c = L.dense_forward(h, p[0], p[1], relu=False)
        caches.append(c)
    logits = h
    return L.softmax(logits), (logits, caches)


def predict_proba(spec: NetworkSpec, params, x, batch_size: int = 32) -> np.ndarray:
    x = np.asarray(x)
    return np.concatenate(
        [forward(spec, params, x[i : i + batch_size])[0] for i in range(0, len(x), batch_size)]
    ) if len(x) else np.zeros((0, spec.layers[-1].units))


def backward(spec: NetworkSpec, params, cache, dlogits):
    """Parameter gradients given the gradient of the loss w.r.t. the logits."""
    _, caches = cache
    first = first_conv_index(spec)
    grads: list[tuple[np.ndarray, ...]] = [()] * len(spec.layers)
    g = dlogits
    for i in range(len(spec.layers) - 1, -1, -1):
        ly, c = spec.layers[i], caches[i]
        if ly.kind == "conv":
            g, dW, db = L.conv_backward(g, c, need_dx=i > first)
            grads[i] = (dW, db)
        elif ly.kind == "maxpool":
            g = L.maxpool_backward(g, c)
        elif ly.kind == "flatten":
            g = g.reshape(c)
        elif ly.kind in ("dense", "softmax"):
            g, dW, db = L.dense_backward(g, c)
            grads[i] = (dW, db)
        elif ly.kind == "dropout" and c is not None:
            g = L.dropout_backward(g, c)
    return grads


def loss_and_grads(
    spec: NetworkSpec,
    params,
    x,
    y,
    class_weights=(1.0, 1.0),
    l1: float | None = None,
    training: bool = True,
    rng: np.random.Generator | None = None,
):
    """Weighted mean cross entropy plus an L1 penalty on the first conv weights.

    The per-sample loss is multiplied by the weight of its true class and the
    sum divided by the batch size. ``l1`` defaults to ``spec.l1``. Returns
    ``(loss, grads)`` with ``grads`` shaped like ``params``.
    """
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise EmptyBatch("loss of an empty batch")
    if np.any(np.asarray(class_weights) <= 0):
        raise DataError("class weights must be positive")
    lam = spec.l1 if l1 is None else l1
    _, cache = forward(spec, params, x, training=training, rng=rng)
    logits = cache[0]
    if len(y) != len(logits):
        raise ShapeMismatch(f"{len(y)} labels for {len(logits)} samples")
    logp = L.log_softmax(logits)
    w = np.asarray(class_weights, dtype=logits.dtype)[y]
    n = len(y)
    loss = -(w * logp[np.arange(n), y]).sum() / n
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1
    dlogits *= (w / n)[:, None]
    grads = backward(spec, params, cache, dlogits.astype(logits.dtype))

    i = first_conv_index(spec)
    W1 = params[i][0]
    loss = loss + lam * np.abs(W1).sum()
    if lam:
        grads[i] = (grads[i][0] + W1.dtype.type(lam) * np.sign(W1), grads[i][1])
    return float(loss), grads
