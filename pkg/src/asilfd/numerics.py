"""Dense feed-forward networks with hand-written backprop.

Networks are ReLU MLPs with an identity or tanh output layer. Parameters
live in one flat vector (``theta``); the per-layer weight matrices and bias
vectors exposed by :class:`NetworkParams` are views into it, so optimizers
and Polyak averaging work on a single contiguous buffer.

Weight matrices are stored transposed (``n_in x n_out``); ``weights[l]``
returns the conventional ``n_out x n_in`` view.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from asilfd.backend import kernels
from asilfd.errors import ConfigError, NumericError, ShapeError

OUTPUT_ACTIVATIONS = ("identity", "tanh")
CHECKPOINT_FORMAT = "asilfd-mlp/1"


def n_params(layer_sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def _param_offsets(layer_sizes: Sequence[int]) -> list[tuple[int, int, int]]:
    """(weight_start, bias_start, end) per layer."""
    out = []
    off = 0
    for a, b in zip(layer_sizes[:-1], layer_sizes[1:]):
        out.append((off, off + a * b, off + a * b + b))
        off += a * b + b
    return out


@dataclass
class NetworkParams:
    """Architecture plus a flat parameter vector.

    ``theta`` may be a view into a larger stacked buffer (an ensemble row).
    """

    layer_sizes: tuple[int, ...]
    output_activation: str
    theta: np.ndarray
    hidden_activation: str = "relu"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if self.theta.ndim != 1 or self.theta.shape[0] != n_params(self.layer_sizes):
            raise ShapeError(
                f"theta has shape {self.theta.shape}, expected ({n_params(self.layer_sizes)},)"
            )

    @property
    def weights(self) -> list[np.ndarray]:
        ws = []
        for (w0, b0, _), a, b in zip(
            _param_offsets(self.layer_sizes), self.layer_sizes[:-1], self.layer_sizes[1:]
        ):
            ws.append(self.theta[w0:b0].reshape(a, b).T)
        return ws

    @property
    def biases(self) -> list[np.ndarray]:
        return [self.theta[b0:end] for _, b0, end in _param_offsets(self.layer_sizes)]

    @property
    def dtype(self):
        return self.theta.dtype

    @property
    def tanh_out(self) -> bool:
        return self.output_activation == "tanh"

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.layer_sizes, self.output_activation, self.theta.copy())

    def stacked(self) -> np.ndarray:
        return self.theta.reshape(1, -1)

    def layer_of(self, flat_index: int) -> int:
        for l, (_, _, end) in enumerate(_param_offsets(self.layer_sizes)):
            if flat_index < end:
                return l
        raise IndexError(flat_index)


@dataclass
class GradientBundle:
    """Gradient of a scalar w.r.t. every parameter (flat, same layout as
    ``NetworkParams.theta``) and w.r.t. the network input."""

    layer_sizes: tuple[int, ...]
    theta: np.ndarray
    input_grad: np.ndarray | None = None

    @property
    def weights(self) -> list[np.ndarray]:
        return NetworkParams(self.layer_sizes, "identity", self.theta).weights

    @property
    def biases(self) -> list[np.ndarray]:
        return NetworkParams(self.layer_sizes, "identity", self.theta).biases


@dataclass
class ForwardCache:
    """Activation record of one forward pass (needed for the exact backward)."""

    layer_sizes: tuple[int, ...]
    inputs: np.ndarray  # (B, n_in)
    acts: np.ndarray  # (1, B, total non-input width)
    single: bool  # input was a vector rather than a batch


def net_init(
    layer_sizes: Sequence[int],
    output_activation: str = "identity",
    seed: int = 0,
    dtype=np.float64,
) -> NetworkParams:
    """Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases."""
    sizes = tuple(layer_sizes)
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ConfigError(f"invalid layer sizes {sizes!r}")
    if output_activation not in OUTPUT_ACTIVATIONS:
        raise ConfigError(f"unknown output activation {output_activation!r}")
    rng = np.random.default_rng(seed)
    theta = np.zeros(n_params(sizes), dtype=np.float64)
    for (w0, b0, _), a, b in zip(_param_offsets(sizes), sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (a + b))
        # drawn in (out, in) order, stored transposed
        theta[w0:b0] = rng.uniform(-bound, bound, size=(b, a)).T.reshape(-1)
    return NetworkParams(sizes, output_activation, theta.astype(dtype, copy=False))


def _as_batch(params: NetworkParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=params.dtype)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise ShapeError(
            f"input has shape {x.shape}, network expects {params.layer_sizes[0]} features"
        )
    return np.ascontiguousarray(x), single


def net_forward(params: NetworkParams, x) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass for a vector ``(n_in,)`` or batch ``(B, n_in)``."""
    X, single = _as_batch(params, x)
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite network input")
    acts = kernels.forward(params.stacked(), params.layer_sizes, params.tanh_out, X)
    out = acts[0, :, -params.layer_sizes[-1] :]
    cache = ForwardCache(params.layer_sizes, X, acts, single)
    return (out[0].copy() if single else out.copy()), cache


def net_backward(params: NetworkParams, cache: ForwardCache, output_grad) -> GradientBundle:
    """Exact gradients of ``sum(output * output_grad)``."""
    if cache.layer_sizes != params.layer_sizes:
        raise ShapeError("forward cache was produced by a different architecture")
    G = np.asarray(output_grad, dtype=params.dtype)
    if cache.single and G.ndim == 1:
        G = G.reshape(1, -1)
    if G.shape != (cache.inputs.shape[0], params.layer_sizes[-1]):
        raise ShapeError(f"output_grad shape {G.shape} does not match the cached batch")
    gth, gx = kernels.backward(
        params.stacked(),
        params.layer_sizes,
        params.tanh_out,
        cache.inputs,
        cache.acts,
        np.ascontiguousarray(G).reshape(1, *G.shape),
    )
    gx = gx[0]
    return GradientBundle(params.layer_sizes, gth[0], gx[0] if cache.single else gx)


@dataclass
class AdamState:
    """Adam moments for a parameter buffer of any shape (one net or a stack)."""

    m: np.ndarray
    v: np.ndarray
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def like(cls, theta: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(theta), np.zeros_like(theta), **hyper)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.lr, self.beta1, self.beta2, self.eps, self.step)


def _theta_of(obj) -> np.ndarray:
    return obj.theta if hasattr(obj, "theta") else obj


def adam_step(state: AdamState, params, grads) -> None:
    """One bias-corrected Adam update, in place.

    ``params``/``grads`` are ``NetworkParams``/``GradientBundle`` or raw
    arrays of identical shape.
    """
    theta, g = _theta_of(params), _theta_of(grads)
    if theta.shape != g.shape or state.m.shape != theta.shape:
        raise ShapeError(f"Adam shapes disagree: params {theta.shape}, grads {g.shape}")
    if not np.all(np.isfinite(g)):
        flat = int(np.flatnonzero(~np.isfinite(g.reshape(-1)))[0])
        sizes = getattr(params, "layer_sizes", None)
        if sizes is not None:
            layer = NetworkParams(sizes, "identity", np.zeros(n_params(sizes))).layer_of(
                flat % n_params(sizes)
            )
        else:
            layer = None
        raise NumericError(f"non-finite gradient entry at flat index {flat}", layer=layer)
    state.step += 1
    kernels.adam(
        theta.reshape(-1), g.reshape(-1), state.m.reshape(-1), state.v.reshape(-1),
        state.lr, state.beta1, state.beta2, state.eps, state.step,
    )


def polyak_update(target, online, tau: float) -> None:
    """``target <- tau * online + (1 - tau) * target`` in place."""
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")
    t, o = _theta_of(target), _theta_of(online)
    if t.shape != o.shape:
        raise ShapeError(f"Polyak shapes disagree: {t.shape} vs {o.shape}")
    kernels.polyak(t.reshape(-1), o.reshape(-1), float(tau))


@dataclass
class GradCheckResult:
    worst: float  # worst relative error over the probed coordinates
    checked: int
    skipped: int  # coordinates whose probe crossed a ReLU kink


def grad_check(
    loss_fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    h: float = 1e-4,
    max_coords: int = 200,
    seed: int = 0,
    kink_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    five_point: bool = True,
) -> GradCheckResult:
    """Compare ``grad_fn`` against central differences of ``loss_fn``.

    Both take a flat parameter vector. All coordinates are probed when there
    are at most ``max_coords``, otherwise a seeded subsample. The default
    five-point central stencil has O(h^4) truncation error; ``five_point=False``
    uses the two-point quotient. The relative error of a coordinate is
    ``|g_a - g_n| / max(|g_a| + |g_n|, 1e-8)``.

    ``kink_fn`` maps parameters to the boolean ReLU pattern. A coordinate
    whose probes disagree on it straddles a kink, where the quotient is not
    a derivative, and is skipped.
    """
    theta = np.array(theta, dtype=np.float64)
    analytic = np.asarray(grad_fn(theta.copy()), dtype=np.float64).reshape(-1)
    if analytic.shape != theta.reshape(-1).shape:
        raise ShapeError("analytic gradient shape differs from parameters")
    n = theta.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        coords = np.sort(np.random.default_rng(seed).choice(n, size=max_coords, replace=False))
    worst, checked, skipped = 0.0, 0, 0
    flat = theta.reshape(-1)
    offsets = (h, -h, 2 * h, -2 * h) if five_point else (h, -h)
    for i in coords:
        orig = flat[i]
        values, patterns = [], []
        for off in offsets:
            flat[i] = orig + off
            values.append(float(loss_fn(theta.copy())))
            if kink_fn is not None:
                patterns.append(kink_fn(theta.copy()))
        flat[i] = orig
        if not all(math.isfinite(v) for v in values):
            raise NumericError(f"non-finite loss while probing coordinate {i}")
        if patterns and not all(np.array_equal(patterns[0], p) for p in patterns[1:]):
            skipped += 1
            continue
        if five_point:
            numeric = (8 * (values[0] - values[1]) - (values[2] - values[3])) / (12 * h)
        else:
            numeric = (values[0] - values[1]) / (2 * h)
        denom = max(abs(analytic[i]) + abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
        checked += 1
    return GradCheckResult(worst, checked, skipped)


def relu_pattern(params: NetworkParams, x) -> np.ndarray:
    """Which hidden units are active for each input row."""
    X, _ = _as_batch(params, x)
    acts = kernels.forward(params.stacked(), params.layer_sizes, params.tanh_out, X)
    n_hidden = sum(params.layer_sizes[1:-1])
    return acts[0, :, :n_hidden] > 0


# -- checkpoints -----------------------------------------------------------

def network_to_arrays(params: NetworkParams, prefix: str = "") -> tuple[dict, dict]:
    """Metadata dict and named row-major arrays for one network."""
    meta = {
        "layer_sizes": list(params.layer_sizes),
        "hidden_activation": params.hidden_activation,
        "output_activation": params.output_activation,
        "dtype": np.dtype(params.dtype).name,
    }
    arrays = {}
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"{prefix}W{l}"] = np.ascontiguousarray(W)
        arrays[f"{prefix}b{l}"] = np.ascontiguousarray(b)
    return meta, arrays


def network_from_arrays(meta: dict, arrays, prefix: str = "") -> NetworkParams:
    sizes = tuple(meta["layer_sizes"])
    dtype = np.dtype(meta["dtype"])
    params = NetworkParams(sizes, meta["output_activation"], np.zeros(n_params(sizes), dtype=dtype))
    for l, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = np.asarray(arrays[f"{prefix}W{l}"])
        bias = np.asarray(arrays[f"{prefix}b{l}"])
        if W.shape != (b, a) or bias.shape != (b,):
            raise ShapeError(f"layer {l} arrays do not match layer sizes {sizes}")
        params.weights[l][...] = W
        params.biases[l][...] = bias
    return params


def save_network(params: NetworkParams, path) -> None:
    meta, arrays = network_to_arrays(params)
    meta["format"] = CHECKPOINT_FORMAT
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_network(path) -> NetworkParams:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: not an {CHECKPOINT_FORMAT} checkpoint")
        return network_from_arrays(meta, data)
