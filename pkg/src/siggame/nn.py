"""Neural layers, Adam, and named-tensor checkpoints.

GRU and LayerNorm are fused primitives with hand-written backward passes; they
sit in the inner loop of every rollout and a composite of elementwise
primitives would multiply the tape length several-fold.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LAYER_NORM_EPS = 1e-5
CHECKPOINT_VERSION = "1"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, name: str | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape), name)


def zeros(shape, name: str | None = None) -> Tensor:
    return parameter(np.zeros(shape), name)


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``(in, out)``."""
    out = ad.matmul(x, weight)
    if bias is not None:
        out = ad.add(out, bias)
    return out


def embedding(table: Tensor, index) -> Tensor:
    return ad.index_select(table, index)


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x = ad.constant(x)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    g_data = gain.data
    out = xhat * g_data + bias.data
    batch_axes = tuple(range(x.ndim - 1))

    def vjp(g):
        gx = None
        if x.requires_grad:
            dxhat = g * g_data
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        ggain = (g * xhat).sum(axis=batch_axes) if gain.requires_grad else None
        gbias = g.sum(axis=batch_axes) if bias.requires_grad else None
        return gx, ggain, gbias

    return ad.record("layer_norm", out, (x, gain, bias), vjp)


@dataclass
class GRUParams:
    """Gate weights stacked in ``[reset, update, candidate]`` order."""

    w_input: Tensor  # (in, 3H)
    w_hidden: Tensor  # (H, 3H)
    b_input: Tensor  # (3H,)
    b_hidden: Tensor  # (3H,)

    @classmethod
    def init(cls, rng: np.random.Generator, input_size: int, hidden_size: int, prefix: str = "gru"):
        h3 = 3 * hidden_size
        return cls(
            uniform_init(rng, (input_size, h3), hidden_size, f"{prefix}.w_input"),
            uniform_init(rng, (hidden_size, h3), hidden_size, f"{prefix}.w_hidden"),
            zeros((h3,), f"{prefix}.b_input"),
            zeros((h3,), f"{prefix}.b_hidden"),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {
            "w_input": self.w_input,
            "w_hidden": self.w_hidden,
            "b_input": self.b_input,
            "b_hidden": self.b_hidden,
        }


def gru_cell(x, h, params: GRUParams) -> Tensor:
    """One GRU update.

    r = σ(x Wr + h Ur + b), z = σ(x Wz + h Uz + b),
    n = tanh(x Wn + b_in + r ⊙ (h Un + b_hn)), h' = (1 - z) ⊙ n + z ⊙ h.
    """
    x, h = ad.constant(x), ad.constant(h)
    hidden = params.w_hidden.shape[0]
    if params.w_input.shape != (x.shape[-1], 3 * hidden):
        raise ShapeError("gru_cell", x.shape, params.w_input.shape)
    if h.shape[-1] != hidden or params.w_hidden.shape != (hidden, 3 * hidden):
        raise ShapeError("gru_cell", h.shape, params.w_hidden.shape)
    if x.ndim != h.ndim or x.shape[:-1] != h.shape[:-1]:
        raise ShapeError("gru_cell", x.shape, h.shape)

    xd, hd = x.data, h.data
    wi, wh = params.w_input.data, params.w_hidden.data
    gx = xd @ wi + params.b_input.data
    gh = hd @ wh + params.b_hidden.data
    H = hidden
    r = expit(gx[..., :H] + gh[..., :H])
    z = expit(gx[..., H : 2 * H] + gh[..., H : 2 * H])
    gh_n = gh[..., 2 * H :]
    n = np.tanh(gx[..., 2 * H :] + r * gh_n)
    out = (1.0 - z) * n + z * hd
    batch_axes = tuple(range(xd.ndim - 1))

    def vjp(g):
        dz = g * (hd - n)
        dan = g * (1.0 - z) * (1.0 - n * n)
        dar = dan * gh_n * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgx = np.concatenate([dar, daz, dan], axis=-1)
        dgh = np.concatenate([dar, daz, dan * r], axis=-1)
        gx_in = dgx @ wi.T if x.requires_grad else None
        gh_in = (g * z + dgh @ wh.T) if h.requires_grad else None
        if xd.ndim == 1:
            gwi, gwh = np.outer(xd, dgx), np.outer(hd, dgh)
        else:
            gwi = xd.reshape(-1, xd.shape[-1]).T @ dgx.reshape(-1, 3 * H)
            gwh = hd.reshape(-1, H).T @ dgh.reshape(-1, 3 * H)
        return (
            gx_in,
            gh_in,
            gwi,
            gwh,
            dgx.sum(axis=batch_axes),
            dgh.sum(axis=batch_axes),
        )

    return ad.record(
        "gru_cell",
        out,
        (x, h, params.w_input, params.w_hidden, params.b_input, params.b_hidden),
        vjp,
    )


def gaussian_dropout_mask(shape, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative mask with entries drawn from Normal(1, scale**2)."""
    if scale < 0:
        raise ValueError("dropout scale must be non-negative")
    if scale == 0:
        return np.ones(shape)
    return rng.normal(1.0, scale, size=shape)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name or i}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    """Write named float64 arrays as ``<u64 header length><JSON header><raw data>``."""
    header = {"version": CHECKPOINT_VERSION, "dtype": "float64", "tensors": {}, "metadata": metadata or {}}
    offset = 0
    chunks = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        header["tensors"][name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    (size,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + size].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
    body = raw[8 + size :]
    out = {}
    for name, info in header["tensors"].items():
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=info["offset"])
        out[name] = arr.reshape(info["shape"]).astype(np.float64)
    return out, header.get("metadata", {})
