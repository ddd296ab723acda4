"""Residual MLP core: flat parameter storage, analytic backprop and Adam.

Everything here works on 64-bit numpy arrays. A network's parameters live in
one flat vector; a :class:`Layout` maps tensor names to slices of it so that
optimizers, regularizers and parameter-space mixing can treat a whole network
as a single vector.
"""
from __future__ import annotations

import functools
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numba
import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
INIT_SCALE = 0.1
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

CHECKPOINT_MAGIC = b"CNPV"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    output_dim: int
    hidden_width: int = 64
    n_hidden_blocks: int = 3
    residual: bool = True
    layernorm: bool = True

    def __post_init__(self):
        for name in ("input_dim", "output_dim", "hidden_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_hidden_blocks < 0:
            raise ValueError("n_hidden_blocks must be >= 0")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_width": self.hidden_width,
            "n_hidden_blocks": self.n_hidden_blocks,
            "residual": self.residual,
            "layernorm": self.layernorm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLPSpec":
        return cls(**d)


@dataclass(frozen=True)
class Layout:
    """Ordered table of ``name -> (offset, shape)`` over a flat vector."""

    entries: Tuple[Tuple[str, int, Tuple[int, ...]], ...]

    @functools.cached_property
    def size(self) -> int:
        if not self.entries:
            return 0
        _, off, shape = self.entries[-1]
        return off + int(np.prod(shape, dtype=np.int64))

    @classmethod
    def build(cls, shapes) -> "Layout":
        entries, off = [], 0
        for name, shape in shapes:
            shape = tuple(int(s) for s in shape)
            entries.append((name, off, shape))
            off += int(np.prod(shape, dtype=np.int64))
        return cls(tuple(entries))

    @functools.cached_property
    def _slices(self):
        return tuple(
            (name, off, off + int(np.prod(shape, dtype=np.int64)), shape)
            for name, off, shape in self.entries
        )

    def views(self, flat: np.ndarray) -> Dict[str, np.ndarray]:
        """Reshaped views into ``flat`` (writes go through)."""
        if flat.shape != (self.size,):
            raise ValueError(f"layout expects {self.size} values, got shape {flat.shape}")
        return {name: flat[a:b].reshape(shape) for name, a, b, shape in self._slices}

    def to_list(self) -> list:
        return [[name, off, list(shape)] for name, off, shape in self.entries]

    @classmethod
    def from_list(cls, items) -> "Layout":
        return cls(tuple((str(n), int(o), tuple(int(s) for s in sh)) for n, o, sh in items))


@dataclass
class ParamVector:
    data: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.layout.size,):
            raise ValueError(
                f"parameter length {self.data.shape} does not match layout size {self.layout.size}"
            )

    def views(self) -> Dict[str, np.ndarray]:
        return self.layout.views(self.data)

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout)


@functools.lru_cache(maxsize=None)
def mlp_layout(spec: MLPSpec) -> Layout:
    H = spec.hidden_width
    shapes = [("in.W", (spec.input_dim, H)), ("in.b", (H,))]
    for i in range(spec.n_hidden_blocks):
        shapes += [(f"blk{i}.W1", (H, H)), (f"blk{i}.b1", (H,))]
        if spec.layernorm:
            shapes += [(f"blk{i}.ln.g", (H,)), (f"blk{i}.ln.b", (H,))]
        shapes += [(f"blk{i}.W2", (H, H)), (f"blk{i}.b2", (H,))]
    shapes += [("out.W", (H, spec.output_dim)), ("out.b", (spec.output_dim,))]
    return Layout.build(shapes)


def param_count(spec: MLPSpec) -> int:
    return mlp_layout(spec).size


def flatten(arrays: Dict[str, np.ndarray], layout: Layout) -> np.ndarray:
    names = {name for name, _, _ in layout.entries}
    if set(arrays) != names:
        raise ValueError(f"tensor names {sorted(arrays)} do not match layout {sorted(names)}")
    flat = np.empty(layout.size)
    for name, off, shape in layout.entries:
        a = np.asarray(arrays[name], dtype=np.float64)
        if a.shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
        flat[off:off + a.size] = a.ravel()
    return flat


def unflatten(flat: np.ndarray, layout: Layout) -> Dict[str, np.ndarray]:
    return {k: v.copy() for k, v in layout.views(np.asarray(flat, dtype=np.float64)).items()}


def truncated_normal(rng: np.random.Generator, std: float, shape) -> np.ndarray:
    """Normal(0, std) truncated at +-2 std, by resampling the rejects."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(spec: MLPSpec, seed, scale: float = INIT_SCALE) -> ParamVector:
    """Variance-scaling (fan-in) truncated-normal weights, zero biases, unit LN gains."""
    layout = mlp_layout(spec)
    rng = np.random.default_rng(seed)
    flat = np.zeros(layout.size)
    views = layout.views(flat)
    for name, _, shape in layout.entries:
        kind = name.rsplit(".", 1)[-1]
        if kind.startswith("W"):
            views[name][...] = truncated_normal(rng, math.sqrt(scale / shape[0]), shape)
        elif name.endswith("ln.g"):
            views[name][...] = 1.0
    return ParamVector(flat, layout)


# -- primitives -------------------------------------------------------------

def gelu(x: np.ndarray) -> np.ndarray:
    return x * normal_cdf(x)


def normal_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    if cdf is None:
        cdf = normal_cdf(x)
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def layer_norm(x: np.ndarray, gain, bias, eps: float = LN_EPS):
    """Returns (y, xhat, inv_std); normalization over the last axis."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    return xhat * gain + bias, xhat, inv_std


def layer_norm_backward(gy, xhat, inv_std, gain):
    """Returns (gx, g_gain, g_bias)."""
    g_gain = (gy * xhat).sum(axis=0)
    g_bias = gy.sum(axis=0)
    gxhat = gy * gain
    gx = inv_std * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return gx, g_gain, g_bias


@numba.njit(cache=True)
def _ln_gelu_forward(z, gain, bias, eps, u, xhat, inv_std, cdf, a):
    n, H = z.shape
    for r in range(n):
        mu = 0.0
        for j in range(H):
            mu += z[r, j]
        mu /= H
        var = 0.0
        for j in range(H):
            d = z[r, j] - mu
            var += d * d
        inv = 1.0 / math.sqrt(var / H + eps)
        inv_std[r, 0] = inv
        for j in range(H):
            xh = (z[r, j] - mu) * inv
            xhat[r, j] = xh
            uu = xh * gain[j] + bias[j]
            u[r, j] = uu
            c = 0.5 * (1.0 + math.erf(uu * 0.7071067811865476))
            cdf[r, j] = c
            a[r, j] = uu * c


@numba.njit(cache=True)
def _ln_gelu_backward(ga, u, cdf, xhat, inv_std, gain, gz, g_gain, g_bias):
    n, H = ga.shape
    gxhat = np.empty(H)
    for r in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(H):
            uu = u[r, j]
            gu = ga[r, j] * (cdf[r, j] + uu * 0.3989422804014327 * math.exp(-0.5 * uu * uu))
            g_gain[j] += gu * xhat[r, j]
            g_bias[j] += gu
            gx = gu * gain[j]
            gxhat[j] = gx
            m1 += gx
            m2 += gx * xhat[r, j]
        m1 /= H
        m2 /= H
        inv = inv_std[r, 0]
        for j in range(H):
            gz[r, j] = inv * (gxhat[j] - m1 - xhat[r, j] * m2)


# -- residual blocks --------------------------------------------------------

def block_forward(spec: MLPSpec, v: Dict[str, np.ndarray], i: int, h: np.ndarray, extra=None):
    """One hidden block; ``extra`` is added to the first linear's output (lateral input).

    Returns (h_next, tape, post_norm) where ``post_norm`` is the normalized
    pre-activation that lateral connections read from.
    """
    p = f"blk{i}."
    z = h @ v[p + "W1"]
    z += v[p + "b1"]
    if extra is not None:
        z += extra
    if spec.layernorm:
        n, H = z.shape
        u, xhat, cdf, a = (np.empty((n, H)) for _ in range(4))
        inv_std = np.empty((n, 1))
        _ln_gelu_forward(z, v[p + "ln.g"], v[p + "ln.b"], LN_EPS, u, xhat, inv_std, cdf, a)
    else:
        u, xhat, inv_std = z, None, None
        cdf = normal_cdf(u)
        a = u * cdf
    out = a @ v[p + "W2"]
    out += v[p + "b2"]
    h_next = h + out if spec.residual else out
    return h_next, (h, u, xhat, inv_std, a, cdf), u


def block_backward(spec: MLPSpec, v, g: Dict[str, np.ndarray], i: int, tape, gh_next):
    """Accumulates parameter grads into ``g``; returns (gh, gz) where gz is the
    gradient at the first linear's output (the lateral injection point)."""
    p = f"blk{i}."
    h, u, xhat, inv_std, a, cdf = tape
    g[p + "W2"] += a.T @ gh_next
    g[p + "b2"] += gh_next.sum(axis=0)
    ga = gh_next @ v[p + "W2"].T
    if spec.layernorm:
        gz = np.empty_like(ga)
        _ln_gelu_backward(ga, u, cdf, xhat, inv_std, v[p + "ln.g"], gz, g[p + "ln.g"], g[p + "ln.b"])
    else:
        gz = ga * gelu_grad(u, cdf)
    g[p + "W1"] += h.T @ gz
    g[p + "b1"] += gz.sum(axis=0)
    gh = gz @ v[p + "W1"].T
    if spec.residual:
        gh = gh + gh_next
    return gh, gz


@dataclass
class Tape:
    x: np.ndarray
    blocks: list = field(default_factory=list)
    h_last: np.ndarray | None = None
    post_norm: list = field(default_factory=list)


def forward(spec: MLPSpec, params, x: np.ndarray, laterals=None):
    """Batched forward pass. ``params`` is a ParamVector or a flat array.

    ``laterals`` optionally supplies one additive input per hidden block.
    Returns (outputs, tape).
    """
    flat = params.data if isinstance(params, ParamVector) else params
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected input of shape (batch, {spec.input_dim}), got {x.shape}")
    v = mlp_layout(spec).views(flat)
    tape = Tape(x=x)
    h = x @ v["in.W"] + v["in.b"]
    for i in range(spec.n_hidden_blocks):
        extra = None if laterals is None else laterals[i]
        h, bt, u = block_forward(spec, v, i, h, extra)
        tape.blocks.append(bt)
        tape.post_norm.append(u)
    tape.h_last = h
    return h @ v["out.W"] + v["out.b"], tape


def backward(spec: MLPSpec, params, tape: Tape, gout: np.ndarray, return_lateral_grads=False):
    """Gradient of ``sum(outputs * gout)`` w.r.t. the flat parameters."""
    flat = params.data if isinstance(params, ParamVector) else params
    layout = mlp_layout(spec)
    gout = np.asarray(gout, dtype=np.float64)
    if gout.shape != (tape.x.shape[0], spec.output_dim):
        raise ValueError(
            f"output gradient shape {gout.shape} does not match ({tape.x.shape[0]}, {spec.output_dim})"
        )
    v = layout.views(flat)
    grad = np.zeros(layout.size)
    g = layout.views(grad)
    g["out.W"] += tape.h_last.T @ gout
    g["out.b"] += gout.sum(axis=0)
    gh = gout @ v["out.W"].T
    gz_list = [None] * spec.n_hidden_blocks
    for i in reversed(range(spec.n_hidden_blocks)):
        gh, gz_list[i] = block_backward(spec, v, g, i, tape.blocks[i], gh)
    g["in.W"] += tape.x.T @ gh
    g["in.b"] += gh.sum(axis=0)
    if return_lateral_grads:
        return grad, gz_list
    return grad


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **hyper)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.lr, self.beta1, self.beta2, self.eps)


class NonFiniteError(FloatingPointError):
    pass


@numba.njit(cache=True)
def _adam_kernel(params, grads, m, v, b1, b2, lr, eps, c1, c2, out, m_out, v_out):
    for i in range(params.shape[0]):
        gi = grads[i]
        if not math.isfinite(gi):
            return i
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m_out[i] = mi
        v_out[i] = vi
        out[i] = params[i] - lr * (mi / c1) / (math.sqrt(vi / c2) + eps)
    return -1


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState):
    """Bias-corrected Adam; returns new (params, state) without touching the inputs."""
    params = np.ascontiguousarray(params, dtype=np.float64)
    grads = np.ascontiguousarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"length mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    step = state.step + 1
    out, m, v = np.empty_like(params), np.empty_like(params), np.empty_like(params)
    bad = _adam_kernel(
        params, grads, state.m, state.v, state.beta1, state.beta2, state.lr, state.eps,
        1.0 - state.beta1 ** step, 1.0 - state.beta2 ** step, out, m, v,
    )
    if bad >= 0:
        raise NonFiniteError(f"non-finite gradient at coordinate {bad}: {grads[bad]}")
    return out, AdamState(m, v, step, state.lr, state.beta1, state.beta2, state.eps)


# -- checkpoints ------------------------------------------------------------

def save_params(path, params: ParamVector, meta: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header (layout + meta), little-endian f8 data."""
    header = json.dumps(
        {"layout": params.layout.to_list(), "meta": meta or {}}, sort_keys=True
    ).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(params.data.astype("<f8").tobytes())


def load_params(path):
    """Returns (ParamVector, meta)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + hlen])
    layout = Layout.from_list(header["layout"])
    data = np.frombuffer(blob[12 + hlen:], dtype="<f8").astype(np.float64)
    if data.size != layout.size:
        raise ValueError(f"{path}: layout wants {layout.size} values, file holds {data.size}")
    return ParamVector(data, layout), header["meta"]
