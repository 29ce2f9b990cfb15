"""Feed-forward networks with hand-written backprop, Adam, and checkpoint I/O.

Everything is float64 numpy. Weight matrices are stored ``(fan_out, fan_in)``
so a layer computes ``x @ W.T + b`` on a row batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh")
HEADS = ("linear", "sigmoid")

CHECKPOINT_MAGIC = b"TMLP"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when an input or gradient does not match the network layout."""


class NonFiniteError(FloatingPointError):
    """Raised when a gradient, loss or activation stops being finite."""


@dataclass
class MlpParams:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    output_head: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        n = len(self.layer_sizes) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ShapeError(f"expected {n} weight layers, got {len(self.weights)}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != expected:
                raise ShapeError(f"layer {i}: weight shape {w.shape} != {expected}")
            if b.shape != (expected[0],):
                raise ShapeError(f"layer {i}: bias shape {b.shape} != ({expected[0]},)")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def blocks(self) -> list[np.ndarray]:
        """Parameter arrays in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.output_head,
        )

    def equals(self, other: "MlpParams") -> bool:
        return (
            self.layer_sizes == other.layer_sizes
            and self.activation == other.activation
            and self.output_head == other.output_head
            and all(np.array_equal(a, b) for a, b in zip(self.blocks(), other.blocks()))
        )


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    def blocks(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def init_mlp(layer_sizes, rng: np.random.Generator, activation="relu", output_head="linear") -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    layer_sizes = [int(s) for s in layer_sizes]
    if len(layer_sizes) < 2 or min(layer_sizes) < 1:
        raise ShapeError(f"invalid layer sizes {layer_sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(layer_sizes, weights, biases, activation, output_head)


def sigmoid(z):
    # split branches so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.layer_sizes[0]:
        raise ShapeError(
            f"layer 0: input width {xb.shape[-1]} != expected {params.layer_sizes[0]}"
        )
    return xb, single


def _forward_cache(params: MlpParams, xb: np.ndarray, row_exact: bool = False):
    acts = [xb]
    pre = []
    h = xb
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if row_exact:
            # BLAS picks kernels by batch shape, so a row's bits can depend on
            # its neighbours; einsum's summation order depends only on fan-in
            z = np.einsum("ij,kj->ik", h, w, optimize=False) + b
        else:
            z = h @ w.T + b
        pre.append(z)
        if i < last:
            h = _act(z, params.activation)
        else:
            h = sigmoid(z) if params.output_head == "sigmoid" else z
        acts.append(h)
    return pre, acts


def mlp_forward(params: MlpParams, x, row_exact: bool = False) -> np.ndarray:
    """Evaluate the network on a vector or a ``(n, in)`` batch.

    ``row_exact=True`` guarantees each row's output is bit-identical however
    the batch is composed (slower, avoids BLAS).
    """
    xb, single = _as_batch(params, x)
    _, acts = _forward_cache(params, xb, row_exact)
    out = acts[-1]
    return out[0] if single else out


def mlp_logits(params: MlpParams, x, row_exact: bool = False) -> np.ndarray:
    """Final-layer pre-activation (equal to the output for a linear head)."""
    xb, single = _as_batch(params, x)
    pre, _ = _forward_cache(params, xb, row_exact)
    return pre[-1][0] if single else pre[-1]


def mlp_forward_cached(params: MlpParams, x):
    """Forward pass that also returns the cache ``mlp_backward`` can reuse."""
    xb, single = _as_batch(params, x)
    cache = _forward_cache(params, xb)
    out = cache[1][-1]
    return (out[0] if single else out), cache


def mlp_backward(params: MlpParams, x, upstream_grad, through_head: bool = True, cache=None) -> MlpGrads:
    """Backpropagate ``upstream_grad`` (dL/d output) to parameters and input.

    For a batch, parameter gradients are summed over rows. With
    ``through_head=False`` the upstream gradient is taken w.r.t. the final
    pre-activation instead, which is how the logistic loss is wired.
    """
    xb, single = _as_batch(params, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    g = g[None, :] if g.ndim == 1 else g
    out_dim = params.layer_sizes[-1]
    if g.shape != (xb.shape[0], out_dim):
        raise ShapeError(
            f"layer {params.n_layers - 1}: upstream gradient shape {g.shape} "
            f"!= {(xb.shape[0], out_dim)}"
        )
    pre, acts = cache if cache is not None else _forward_cache(params, xb)
    if through_head and params.output_head == "sigmoid":
        s = acts[-1]
        g = g * s * (1.0 - s)
    gw = [None] * params.n_layers
    gb = [None] * params.n_layers
    for i in range(params.n_layers - 1, -1, -1):
        gw[i] = g.T @ acts[i]
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i]
        if i > 0:
            g = g * _act_grad(pre[i - 1], acts[i], params.activation)
    gin = g[0] if single else g
    return MlpGrads(gw, gb, gin)


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams, lr=1e-3, beta1=0.9, beta2=0.999, eps_hat=1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        return cls(
            [np.zeros_like(p) for p in params.blocks()],
            [np.zeros_like(p) for p in params.blocks()],
            0, lr, beta1, beta2, eps_hat,
        )


def _block_name(i):
    return f"{'weight' if i % 2 == 0 else 'bias'}[{i // 2}]"


def adam_step(params: MlpParams, grads: MlpGrads, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update. Inputs are not mutated."""
    gblocks = grads.blocks()
    pblocks = params.blocks()
    if len(gblocks) != len(pblocks):
        raise ShapeError("gradient block count does not match parameters")
    for i, (p, g) in enumerate(zip(pblocks, gblocks)):
        if g.shape != p.shape:
            raise ShapeError(f"{_block_name(i)}: gradient shape {g.shape} != {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {_block_name(i)}")
    step = state.step + 1
    bc1 = 1.0 - state.beta1**step
    bc2 = 1.0 - state.beta2**step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(pblocks, gblocks, state.first_moment, state.second_moment):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        p = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps_hat)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    out = MlpParams(
        list(params.layer_sizes), new_p[0::2], new_p[1::2], params.activation, params.output_head
    )
    return out, AdamState(new_m, new_v, step, state.lr, state.beta1, state.beta2, state.eps_hat)


# ---------------------------------------------------------------------------
# checkpoint format (all little-endian):
#   4s   magic "TMLP"
#   u32  format version (1)
#   u32  number of layer sizes L
#   u32  x L layer sizes
#   u32  activation  (0 relu, 1 tanh)
#   u32  output head (0 linear, 1 sigmoid)
#   f64  blocks W0 (row-major), b0, W1, b1, ... in layer order
# ---------------------------------------------------------------------------


def params_to_bytes(params: MlpParams) -> bytes:
    sizes = params.layer_sizes
    header = struct.pack(
        f"<4sII{len(sizes)}III",
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        len(sizes),
        *sizes,
        ACTIVATIONS.index(params.activation),
        HEADS.index(params.output_head),
    )
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params.blocks())
    return header + body


def params_from_bytes(buf: bytes) -> MlpParams:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a TMLP checkpoint")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    sizes = list(struct.unpack_from(f"<{n}I", buf, off))
    off += 4 * n
    act, head = struct.unpack_from("<II", buf, off)
    off += 8
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(buf, dtype="<f8", count=fan_in * fan_out, offset=off)
        off += w.nbytes
        b = np.frombuffer(buf, dtype="<f8", count=fan_out, offset=off)
        off += b.nbytes
        weights.append(w.reshape(fan_out, fan_in).astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(buf):
        raise ValueError("trailing bytes in checkpoint")
    return MlpParams(sizes, weights, biases, ACTIVATIONS[act], HEADS[head])


def save_params(params: MlpParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> MlpParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
