"""Minimal differentiable layers with hand-derived backward passes.

Everything is float64 and framework-free: 1-D same-padding convolution over
(T, C) sequences, dense layers over (B, C) batches, ReLU, clamped sigmoid, a
bias-corrected Adam optimizer, and a shape-tagged binary tensor format for
checkpoints. Networks are flat lists of layer specs plus a parallel list of
parameter dicts, which keeps parameter trees trivial to copy, average, and
serialize.

Checkpoint tensor file layout (version 1, little-endian):

    magic b"STPK" | u32 version | u32 tensor count
    per tensor (name-sorted): u16 name length | name utf-8 | u8 ndim |
                              u64 x ndim shape | float64 raw data (C order)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DivergenceError, ValidationError

SIGMOID_EPS = 1e-7

_MAGIC = b"STPK"
_CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class Conv1dSpec:
    c_in: int
    c_out: int
    k: int

    kind: str = "conv1d"

    def __post_init__(self):
        if self.k % 2 != 1:
            raise ValidationError(f"conv kernel width must be odd, got {self.k}")


@dataclass(frozen=True)
class DenseSpec:
    c_in: int
    c_out: int

    kind: str = "dense"


@dataclass(frozen=True)
class ReluSpec:
    kind: str = "relu"


@dataclass(frozen=True)
class SigmoidSpec:
    kind: str = "sigmoid"


def spec_to_dict(spec) -> dict:
    d = {"kind": spec.kind}
    for name in ("c_in", "c_out", "k"):
        if hasattr(spec, name):
            d[name] = getattr(spec, name)
    return d


def spec_from_dict(d: dict):
    kind = d["kind"]
    if kind == "conv1d":
        return Conv1dSpec(d["c_in"], d["c_out"], d["k"])
    if kind == "dense":
        return DenseSpec(d["c_in"], d["c_out"])
    if kind == "relu":
        return ReluSpec()
    if kind == "sigmoid":
        return SigmoidSpec()
    raise ValidationError(f"unknown layer kind {kind!r}")


def init_params(specs, rng: np.random.Generator) -> list[dict[str, np.ndarray]]:
    """He-style initialization; parameter-free layers get empty dicts."""
    params: list[dict[str, np.ndarray]] = []
    for spec in specs:
        if isinstance(spec, Conv1dSpec):
            std = np.sqrt(2.0 / (spec.c_in * spec.k))
            params.append({
                "w": rng.normal(0.0, std, size=(spec.c_out, spec.c_in, spec.k)),
                "b": np.zeros(spec.c_out),
            })
        elif isinstance(spec, DenseSpec):
            std = np.sqrt(2.0 / spec.c_in)
            params.append({
                "w": rng.normal(0.0, std, size=(spec.c_out, spec.c_in)),
                "b": np.zeros(spec.c_out),
            })
        else:
            params.append({})
    return params


# ---------------------------------------------------------------------------
# forward / backward kernels


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-length 1-D convolution with zero padding.

    x: (T, C_in), w: (C_out, C_in, k) with odd k, b: (C_out,).
    out[t, o] = b[o] + sum_{c,j} w[o, c, j] * x_pad[t + j, c].
    Returns (y, cache) with y of shape (T, C_out).
    """
    x = np.asarray(x, dtype=np.float64)
    c_out, c_in, k = w.shape
    if x.ndim != 2 or x.shape[1] != c_in:
        raise ValidationError(f"conv input shape {x.shape} incompatible with kernel {w.shape}")
    T = x.shape[0]
    pad = (k - 1) // 2
    xp = np.zeros((T + k - 1, c_in))
    xp[pad:pad + T] = x
    # one (T, C_in) x (C_in, C_out) product per tap; the per-tap weight copy
    # keeps BLAS on its fast contiguous path
    wt = np.ascontiguousarray(w.transpose(2, 1, 0))
    y = xp[0:T] @ wt[0]
    for j in range(1, k):
        y += xp[j:j + T] @ wt[j]
    y += b
    return y, xp


def conv1d_backward(cache, w: np.ndarray, grad_y: np.ndarray):
    """Gradients of conv1d_forward; cache is the zero-padded input."""
    xp = cache
    c_out, c_in, k = w.shape
    T = grad_y.shape[0]
    if grad_y.shape != (T, c_out) or xp.shape != (T + k - 1, c_in):
        raise ValidationError("conv backward shape mismatch")
    wt = np.ascontiguousarray(w.transpose(2, 0, 1))  # (k, c_out, c_in)
    gwt = np.empty((k, c_out, c_in))
    gxp = np.zeros_like(xp)
    for j in range(k):
        gwt[j] = grad_y.T @ xp[j:j + T]
        gxp[j:j + T] += grad_y @ wt[j]
    gw = np.ascontiguousarray(gwt.transpose(1, 2, 0))
    gb = grad_y.sum(axis=0)
    pad = (k - 1) // 2
    gx = gxp[pad:pad + T]
    return gx, {"w": gw, "b": gb}


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: (B, C_in), w: (C_out, C_in), b: (C_out,) -> (y, cache)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValidationError(f"dense input shape {x.shape} incompatible with weight {w.shape}")
    return x @ w.T + b, x


def dense_backward(cache, w: np.ndarray, grad_y: np.ndarray):
    x = cache
    if grad_y.shape != (x.shape[0], w.shape[0]):
        raise ValidationError("dense backward shape mismatch")
    gw = grad_y.T @ x
    gb = grad_y.sum(axis=0)
    gx = grad_y @ w
    return gx, {"w": gw, "b": gb}


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), x > 0.0


def relu_backward(cache, grad_y: np.ndarray):
    return grad_y * cache, {}


def sigmoid_forward(x: np.ndarray):
    """Numerically stable sigmoid clamped to [eps, 1 - eps]."""
    y = np.clip(expit(x), SIGMOID_EPS, 1.0 - SIGMOID_EPS)
    return y, y


def sigmoid_backward(cache, grad_y: np.ndarray):
    y = cache
    return grad_y * y * (1.0 - y), {}


def net_forward(specs, params, x: np.ndarray):
    """Run the layer stack; returns (output, caches) for a later backward."""
    caches = []
    for spec, p in zip(specs, params):
        if isinstance(spec, Conv1dSpec):
            x, cache = conv1d_forward(x, p["w"], p["b"])
        elif isinstance(spec, DenseSpec):
            x, cache = dense_forward(x, p["w"], p["b"])
        elif isinstance(spec, ReluSpec):
            x, cache = relu_forward(x)
        elif isinstance(spec, SigmoidSpec):
            x, cache = sigmoid_forward(x)
        else:
            raise ValidationError(f"unknown layer spec {spec!r}")
        caches.append(cache)
    return x, caches


def net_backward(specs, params, caches, grad_out: np.ndarray):
    """Exact analytic gradients; returns (grad_input, per-layer grad dicts)."""
    grads: list[dict[str, np.ndarray]] = [None] * len(specs)
    g = grad_out
    for i in range(len(specs) - 1, -1, -1):
        spec, p, cache = specs[i], params[i], caches[i]
        if isinstance(spec, Conv1dSpec):
            g, layer_grads = conv1d_backward(cache, p["w"], g)
        elif isinstance(spec, DenseSpec):
            g, layer_grads = dense_backward(cache, p["w"], g)
        elif isinstance(spec, ReluSpec):
            g, layer_grads = relu_backward(cache, g)
        else:
            g, layer_grads = sigmoid_backward(cache, g)
        grads[i] = layer_grads
    return g, grads


# ---------------------------------------------------------------------------
# parameter trees


def tree_map(fn, *trees):
    return [
        {key: fn(*(t[i][key] for t in trees)) for key in trees[0][i]}
        for i in range(len(trees[0]))
    ]


def tree_copy(tree):
    return tree_map(np.copy, tree)


def tree_zeros_like(tree):
    return tree_map(np.zeros_like, tree)


def tree_add_(accum, other, scale: float = 1.0):
    """In-place accum += scale * other."""
    for a, o in zip(accum, other):
        for key in a:
            a[key] += scale * o[key]
    return accum


def tree_all_finite(tree) -> bool:
    return all(np.all(np.isfinite(v)) for layer in tree for v in layer.values())


def tree_equal(a, b) -> bool:
    return all(
        np.array_equal(la[key], lb[key]) for la, lb in zip(a, b) for key in la
    )


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None


def adam_init(params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    if lr <= 0:
        raise ValidationError(f"learning rate must be > 0, got {lr}")
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                     m=tree_zeros_like(params), v=tree_zeros_like(params))


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; returns (new_params, state).

    Each parameter tensor is updated independently from its own moments.
    """
    if not tree_all_finite(grads):
        raise DivergenceError(f"non-finite gradients at optimizer step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        layer = {}
        for key in p:
            m[key] = b1 * m[key] + (1.0 - b1) * g[key]
            v[key] = b2 * v[key] + (1.0 - b2) * g[key] ** 2
            m_hat = m[key] / c1
            v_hat = v[key] / c2
            layer[key] = p[key] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_params.append(layer)
    return new_params, state


# ---------------------------------------------------------------------------
# checkpoint format


def save_tensors(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors in the documented shape-tagged float64 layout."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValidationError(f"{path} is not a checkpoint tensor file")
        version, count = struct.unpack("<II", f.read(8))
        if version != _CKPT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * size), dtype="<f8").reshape(shape)
            tensors[name] = data.astype(np.float64)
        return tensors


def params_to_tensors(prefix: str, params) -> dict[str, np.ndarray]:
    return {
        f"{prefix}/{i}/{key}": arr
        for i, layer in enumerate(params)
        for key, arr in layer.items()
    }


def tensors_to_params(prefix: str, tensors: dict[str, np.ndarray], specs) -> list[dict]:
    params: list[dict] = [{} for _ in specs]
    marker = prefix + "/"
    for name, arr in tensors.items():
        if not name.startswith(marker):
            continue
        _, idx, key = name.rsplit("/", 2)
        params[int(idx)][key] = arr.copy()
    return params


def finite_difference_grads(loss_fn, params, h: float = 1e-5):
    """Central finite differences of a scalar loss over a parameter tree.

    Independent oracle for gradient checks; touches every coordinate.
    """
    fd = tree_zeros_like(params)
    for layer, gl in zip(params, fd):
        for key in layer:
            arr = layer[key]
            flat = arr.reshape(-1)
            gflat = gl[key].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = loss_fn()
                flat[i] = orig - h
                lm = loss_fn()
                flat[i] = orig
                gflat[i] = (lp - lm) / (2.0 * h)
    return fd
