"""Minimal reference feed-forward network with tracing and input gradients.

Four layer kinds are supported: dense, single-channel 2-D convolution
(valid padding, stride 1), batch-normalization in inference mode, and leaky
ReLU with slope 0.01 on the negative branch. That is enough to produce
activation traces and to drive gradient-sign attacks at desk scale; there is
no training loop, weights come from a seeded initializer.

All arithmetic runs in float64. Forward passes are pure and deterministic,
so networks are safe to share across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .traces import _atomic_write_bytes

LEAKY_SLOPE = 0.01
NETWORK_FORMAT_VERSION = 1


def leaky_relu(v):
    """Identity for positive inputs, 0.01 * v otherwise. Works elementwise."""
    v = np.asarray(v, dtype=np.float64)
    out = np.where(v > 0.0, v, LEAKY_SLOPE * v)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class Dense:
    """Fully connected layer y = W @ flatten(x) + b; weights shape (out, in)."""

    weights: np.ndarray
    bias: np.ndarray
    kind: str = field(default="dense", init=False)

    def __post_init__(self) -> None:
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        b = np.ascontiguousarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ValueError(f"dense shapes do not chain: W{w.shape}, b{b.shape}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True, eq=False)
class Conv2D:
    """Single-channel valid cross-correlation with one filter, stride 1."""

    filter: np.ndarray
    kind: str = field(default="conv2d", init=False)

    def __post_init__(self) -> None:
        f = np.ascontiguousarray(self.filter, dtype=np.float64)
        if f.ndim != 2 or f.size == 0:
            raise ValueError(f"conv2d filter must be a non-empty 2-D matrix, got {f.shape}")
        object.__setattr__(self, "filter", f)


@dataclass(frozen=True, eq=False)
class BatchNorm:
    """Inference-mode normalization: gamma * (x - mean) / sqrt(var + eps) + beta."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    kind: str = field(default="batchnorm", init=False)

    def __post_init__(self) -> None:
        arrays = {}
        for name in ("gamma", "beta", "running_mean", "running_var"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1:
                raise ValueError(f"batchnorm {name} must be 1-D")
            arrays[name] = arr
        sizes = {a.shape[0] for a in arrays.values()}
        if len(sizes) != 1:
            raise ValueError("batchnorm parameter vectors must share one length")
        if (arrays["running_var"] < 0.0).any():
            raise ValueError("batchnorm running variance must be >= 0")
        if not self.eps > 0.0:
            raise ValueError("batchnorm eps must be > 0")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    @property
    def n_units(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class LeakyReLU:
    kind: str = field(default="leaky_relu", init=False)


LayerSpec = Dense | Conv2D | BatchNorm | LeakyReLU


def _layer_output_shape(layer: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Dense):
        if layer.weights.shape[1] != int(np.prod(in_shape)):
            raise ValueError(
                f"dense expects {layer.weights.shape[1]} inputs, "
                f"previous layer provides {int(np.prod(in_shape))}"
            )
        return (layer.weights.shape[0],)
    if isinstance(layer, Conv2D):
        if len(in_shape) != 2:
            raise ValueError(f"conv2d needs a 2-D input, got shape {in_shape}")
        fh, fw = layer.filter.shape
        h, w = in_shape
        if fh > h or fw > w:
            raise ValueError(f"filter {layer.filter.shape} larger than input {in_shape}")
        return (h - fh + 1, w - fw + 1)
    if isinstance(layer, BatchNorm):
        if layer.n_units != int(np.prod(in_shape)):
            raise ValueError(
                f"batchnorm sized for {layer.n_units} units, "
                f"previous layer provides {int(np.prod(in_shape))}"
            )
        return in_shape
    return in_shape


@dataclass(frozen=True, eq=False)
class Network:
    """Ordered layer stack with a fixed input shape; shapes chain end to end."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        shape = tuple(int(d) for d in self.input_shape)
        if not shape or any(d <= 0 for d in shape):
            raise ValueError(f"invalid input shape {shape}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", shape)
        for i, layer in enumerate(layers):
            try:
                shape = _layer_output_shape(layer, shape)
            except ValueError as exc:
                raise ValueError(f"layer {i} ({layer.kind}): {exc}") from None
        object.__setattr__(self, "_output_shape", shape)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self._output_shape  # type: ignore[attr-defined]

    @property
    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Activation shapes per trace index: input shape, then each layer's output."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(_layer_output_shape(layer, shapes[-1]))
        return shapes


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Flattened per-layer activations; entry 0 is the flattened input."""

    layers: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.layers[i]


def _corr2d_valid(x: np.ndarray, filt: np.ndarray) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(x, filt.shape)
    return np.einsum("ijkl,kl->ij", windows, filt)


def _apply_layer(layer: LayerSpec, a: np.ndarray) -> np.ndarray:
    if isinstance(layer, Dense):
        return layer.weights @ a.ravel() + layer.bias
    if isinstance(layer, Conv2D):
        return _corr2d_valid(a, layer.filter)
    if isinstance(layer, BatchNorm):
        flat = a.ravel()
        scale = layer.gamma / np.sqrt(layer.running_var + layer.eps)
        return (scale * (flat - layer.running_mean) + layer.beta).reshape(a.shape)
    return np.where(a > 0.0, a, LEAKY_SLOPE * a)


def _check_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ValueError(f"input shape {x.shape} does not match {net.input_shape}")
    if not np.isfinite(x).all():
        raise ValueError("input must be finite")
    return x


def _forward_pass(net: Network, x: np.ndarray) -> list[np.ndarray]:
    """Activations entering each layer plus the final output, original shapes."""
    acts = [x]
    for layer in net.layers:
        acts.append(_apply_layer(layer, acts[-1]))
    return acts


def forward(net: Network, x) -> np.ndarray:
    """Run the network; returns the flattened output vector."""
    acts = _forward_pass(net, _check_input(net, x))
    return acts[-1].ravel().copy()


def forward_with_trace(net: Network, x) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network and record every layer's flattened activations.

    The trace has ``len(net.layers) + 1`` entries: index 0 is the flattened
    input, index i the output of layer i-1, the last entry the output.
    """
    acts = _forward_pass(net, _check_input(net, x))
    trace = ForwardTrace(tuple(a.ravel().copy() for a in acts))
    return trace[len(net.layers)], trace


def input_gradient(net: Network, x, target, loss: str = "sse") -> np.ndarray:
    """Gradient of the sum-of-squared-errors loss w.r.t. the input.

    Reverse-mode differentiation through all four layer kinds. The leaky ReLU
    derivative at exactly 0 is fixed to the negative-branch slope 0.01, so
    finite-difference checks must keep pre-activations away from 0.

    Args:
        net: network to differentiate through.
        x: input matching ``net.input_shape``.
        target: desired output vector; loss is ``sum((forward(net,x)-target)**2)``.
        loss: only "sse" is supported.

    Returns:
        Gradient array with the same shape as ``x``.
    """
    if loss != "sse":
        raise ValueError(f"unsupported loss {loss!r}, only 'sse'")
    x = _check_input(net, x)
    target = np.asarray(target, dtype=np.float64).ravel()
    acts = _forward_pass(net, x)
    out = acts[-1].ravel()
    if target.shape != out.shape:
        raise ValueError(f"target length {target.shape[0]} != output length {out.shape[0]}")

    grad = (2.0 * (out - target)).reshape(acts[-1].shape)
    for layer, a_in in zip(reversed(net.layers), reversed(acts[:-1])):
        if isinstance(layer, Dense):
            grad = (layer.weights.T @ grad.ravel()).reshape(a_in.shape)
        elif isinstance(layer, Conv2D):
            fh, fw = layer.filter.shape
            padded = np.pad(grad, ((fh - 1, fh - 1), (fw - 1, fw - 1)))
            grad = _corr2d_valid(padded, layer.filter[::-1, ::-1])
        elif isinstance(layer, BatchNorm):
            scale = layer.gamma / np.sqrt(layer.running_var + layer.eps)
            grad = (grad.ravel() * scale).reshape(a_in.shape)
        else:
            grad = grad * np.where(a_in > 0.0, 1.0, LEAKY_SLOPE)
    return grad


def init_network(arch: Sequence, input_shape: Sequence[int], seed: int) -> Network:
    """Build a network with seeded random weights.

    ``arch`` is a sequence of layer descriptors:

    * ``("dense", n_out)``
    * ``("conv2d", size)`` or ``("conv2d", (fh, fw))``
    * ``("batchnorm",)`` or ``"batchnorm"``
    * ``("leaky_relu",)`` or ``"leaky_relu"``

    Dense and conv weights are uniform in [-r, r] with r = 1/sqrt(fan_in).
    Batchnorm gets a mild randomized affine (gamma near 1, beta near 0) as a
    stand-in for trained statistics, since training is out of scope here.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(int(d) for d in input_shape)
    layers: list[LayerSpec] = []
    for i, desc in enumerate(arch):
        if isinstance(desc, str):
            desc = (desc,)
        kind = desc[0]
        if kind == "dense":
            n_in = int(np.prod(shape))
            n_out = int(desc[1])
            r = 1.0 / math.sqrt(n_in)
            layer: LayerSpec = Dense(
                weights=rng.uniform(-r, r, size=(n_out, n_in)),
                bias=rng.uniform(-r, r, size=n_out),
            )
        elif kind == "conv2d":
            size = desc[1]
            fh, fw = (size, size) if isinstance(size, int) else (int(size[0]), int(size[1]))
            r = 1.0 / math.sqrt(fh * fw)
            layer = Conv2D(filter=rng.uniform(-r, r, size=(fh, fw)))
        elif kind == "batchnorm":
            n = int(np.prod(shape))
            layer = BatchNorm(
                gamma=rng.uniform(0.8, 1.2, size=n),
                beta=rng.uniform(-0.2, 0.2, size=n),
                running_mean=rng.uniform(-0.2, 0.2, size=n),
                running_var=rng.uniform(0.5, 1.5, size=n),
            )
        elif kind == "leaky_relu":
            layer = LeakyReLU()
        else:
            raise ValueError(f"arch entry {i}: unknown layer kind {kind!r}")
        shape = _layer_output_shape(layer, shape)
        layers.append(layer)
    return Network(tuple(layers), tuple(int(d) for d in input_shape))


def monitored_layer_index(net: Network, which) -> int:
    """Trace index of a monitored layer.

    ``which`` is either an integer trace index (0 = input, i = output of
    layer i-1) or one of "last_batchnorm" / "last_leaky_relu".
    """
    if isinstance(which, int):
        if not 0 <= which <= len(net.layers):
            raise ValueError(f"trace index {which} out of range 0..{len(net.layers)}")
        return which
    kinds = {"last_batchnorm": "batchnorm", "last_leaky_relu": "leaky_relu"}
    if which not in kinds:
        raise ValueError(f"unknown layer selector {which!r}")
    for i in range(len(net.layers) - 1, -1, -1):
        if net.layers[i].kind == kinds[which]:
            return i + 1
    raise ValueError(f"network has no {kinds[which]} layer")


def network_to_json(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, Dense):
            layers.append(
                {"kind": "dense", "weights": layer.weights.tolist(), "bias": layer.bias.tolist()}
            )
        elif isinstance(layer, Conv2D):
            layers.append({"kind": "conv2d", "filter": layer.filter.tolist()})
        elif isinstance(layer, BatchNorm):
            layers.append(
                {
                    "kind": "batchnorm",
                    "gamma": layer.gamma.tolist(),
                    "beta": layer.beta.tolist(),
                    "mean": layer.running_mean.tolist(),
                    "var": layer.running_var.tolist(),
                    "eps": layer.eps,
                }
            )
        else:
            layers.append({"kind": "leaky_relu"})
    return {
        "version": NETWORK_FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "layers": layers,
    }


def network_from_json(doc: dict) -> Network:
    if not isinstance(doc, dict) or doc.get("version") != NETWORK_FORMAT_VERSION:
        raise ValueError(f"unsupported network file version {doc.get('version')!r}")
    layers: list[LayerSpec] = []
    for entry in doc["layers"]:
        kind = entry["kind"]
        if kind == "dense":
            layers.append(Dense(np.array(entry["weights"]), np.array(entry["bias"])))
        elif kind == "conv2d":
            layers.append(Conv2D(np.array(entry["filter"])))
        elif kind == "batchnorm":
            layers.append(
                BatchNorm(
                    np.array(entry["gamma"]),
                    np.array(entry["beta"]),
                    np.array(entry["mean"]),
                    np.array(entry["var"]),
                    eps=float(entry["eps"]),
                )
            )
        elif kind == "leaky_relu":
            layers.append(LeakyReLU())
        else:
            raise ValueError(f"unknown layer kind {kind!r} in network file")
    return Network(tuple(layers), tuple(doc["input_shape"]))


def save_network(net: Network, path: str) -> None:
    data = json.dumps(network_to_json(net)).encode("utf-8")
    _atomic_write_bytes(path, data)


def load_network(path: str) -> Network:
    with open(path, "r", encoding="utf-8") as fh:
        return network_from_json(json.load(fh))
