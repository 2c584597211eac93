"""MLP velocity field ``F(x_t, s, t | c)`` with exact reverse-mode gradients.

Layout (row-vector convention, ``z = a @ W + b``)::

    time_emb  = W_te2 . silu(W_te1 . feat(t))             # current time
    phi_s     = W_ps2 . silu(W_ps1 . feat(s))             # target time, W_ps2 = 0 at init
    ctx       = silu(W_ce . c)                            # context encoder
    h1        = silu(W_h1 . [x_flat, time_emb + phi_s, ctx])
    h2        = silu(W_h2 . h1)
    out       = W_out . h2 + W_skip . x_flat              # reshaped to (H, D)

``feat`` is a fixed sinusoidal ladder ``[sin(pi 2^k r), cos(pi 2^k r)]``.
Parameters are a plain ``dict[str, ndarray]``; groups used for freezing are
``trunk`` (time embedding and MLP trunk), ``phi_s`` and ``context``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

Params = dict


@dataclass(frozen=True)
class NetConfig:
    horizon: int = 8
    action_dim: int = 2
    context_dim: int = 4
    hidden: int = 64
    time_embed: int = 16
    context_embed: int = 16
    n_freq: int = 4

    @property
    def chunk_size(self) -> int:
        return self.horizon * self.action_dim

    @property
    def trunk_in(self) -> int:
        return self.chunk_size + self.time_embed + self.context_embed

    def shapes(self) -> dict:
        nf = 2 * self.n_freq
        E, C, Hd = self.time_embed, self.context_embed, self.hidden
        return {
            "te1.W": (nf, E), "te1.b": (E,),
            "te2.W": (E, E), "te2.b": (E,),
            "ps1.W": (nf, E), "ps1.b": (E,),
            "ps2.W": (E, E), "ps2.b": (E,),
            "ce.W": (max(self.context_dim, 1), C), "ce.b": (C,),
            "h1.W": (self.trunk_in, Hd), "h1.b": (Hd,),
            "h2.W": (Hd, Hd), "h2.b": (Hd,),
            "out.W": (Hd, self.chunk_size), "out.b": (self.chunk_size,),
            "skip.W": (self.chunk_size, self.chunk_size),
        }


GROUPS = {
    "trunk": ("te1", "te2", "h1", "h2", "out", "skip"),
    "phi_s": ("ps1", "ps2"),
    "context": ("ce",),
}


def group_of(name: str) -> str:
    layer = name.split(".")[0]
    for g, layers in GROUPS.items():
        if layer in layers:
            return g
    raise KeyError(name)


def init_params(cfg: NetConfig, rng: np.random.Generator) -> Params:
    """Fan-in scaled Gaussian weights, zero biases; phi_s output layer all zero."""
    params = {}
    for name, shape in cfg.shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    zero_phi_s(params)
    return params


def zero_phi_s(params: Params) -> None:
    params["ps2.W"][...] = 0.0
    params["ps2.b"][...] = 0.0


def n_params(params: Params) -> int:
    return sum(v.size for v in params.values())


def _silu(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


def _dsilu(z, sig):
    return sig * (1.0 + z * (1.0 - sig))


def time_features(r: np.ndarray, n_freq: int) -> np.ndarray:
    w = np.pi * 2.0 ** np.arange(n_freq)
    ang = np.asarray(r, dtype=np.float64)[:, None] * w[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _as_batch(x, s, t, context, cfg: NetConfig):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (cfg.horizon, cfg.action_dim):
        raise ValueError(f"expected chunks of shape (B, {cfg.horizon}, {cfg.action_dim}), got {x.shape}")
    B = x.shape[0]
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), (B,))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    if context is None:
        context = np.zeros((B, max(cfg.context_dim, 1)))
    context = np.asarray(context, dtype=np.float64)
    if context.ndim == 1:
        context = np.broadcast_to(context, (B, context.shape[0]))
    if context.shape != (B, max(cfg.context_dim, 1)):
        raise ValueError(f"context shape {context.shape} does not match batch {B}")
    return x, s, t, context


def _dense(a, params, name):
    return a @ params[name + ".W"] + params[name + ".b"]


def forward(params: Params, cfg: NetConfig, x, s, t, context=None, *, cache: bool = False):
    """Batched velocity prediction, shape ``(B, H, D)``."""
    x, s, t, context = _as_batch(x, s, t, context, cfg)
    B = x.shape[0]
    ft = time_features(t, cfg.n_freq)
    fs = time_features(s, cfg.n_freq)
    z_te1 = _dense(ft, params, "te1")
    a_te1, g_te1 = _silu(z_te1)
    temb = _dense(a_te1, params, "te2")
    z_ps1 = _dense(fs, params, "ps1")
    a_ps1, g_ps1 = _silu(z_ps1)
    phi = _dense(a_ps1, params, "ps2")
    z_ce = _dense(context, params, "ce")
    a_ce, g_ce = _silu(z_ce)
    x_flat = x.reshape(B, -1)
    inp = np.concatenate([x_flat, temb + phi, a_ce], axis=1)
    z1 = _dense(inp, params, "h1")
    a1, g1 = _silu(z1)
    z2 = _dense(a1, params, "h2")
    a2, g2 = _silu(z2)
    out = _dense(a2, params, "out") + x_flat @ params["skip.W"]
    out = out.reshape(B, cfg.horizon, cfg.action_dim)
    if not cache:
        return out
    mem = dict(
        ft=ft, fs=fs, z_te1=z_te1, a_te1=a_te1, g_te1=g_te1, z_ps1=z_ps1,
        a_ps1=a_ps1, g_ps1=g_ps1, context=context, z_ce=z_ce, a_ce=a_ce, g_ce=g_ce,
        inp=inp, z1=z1, a1=a1, g1=g1, z2=z2, a2=a2, g2=g2,
    )
    return out, mem


def backward(params: Params, cfg: NetConfig, mem: dict, upstream: np.ndarray) -> dict:
    """Gradient of ``sum(upstream * forward(...))`` with respect to every parameter."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if not np.all(np.isfinite(upstream)):
        raise ValueError("non-finite upstream gradient")
    B = upstream.shape[0]
    dy = upstream.reshape(B, -1)
    g = {}
    g["out.W"] = mem["a2"].T @ dy
    g["out.b"] = dy.sum(axis=0)
    g["skip.W"] = mem["inp"][:, :cfg.chunk_size].T @ dy
    da2 = dy @ params["out.W"].T
    dz2 = da2 * _dsilu(mem["z2"], mem["g2"])
    g["h2.W"] = mem["a1"].T @ dz2
    g["h2.b"] = dz2.sum(axis=0)
    da1 = dz2 @ params["h2.W"].T
    dz1 = da1 * _dsilu(mem["z1"], mem["g1"])
    g["h1.W"] = mem["inp"].T @ dz1
    g["h1.b"] = dz1.sum(axis=0)
    dinp = dz1 @ params["h1.W"].T
    n_x, E = cfg.chunk_size, cfg.time_embed
    demb = dinp[:, n_x:n_x + E]
    dctx = dinp[:, n_x + E:]
    # time embedding branch
    g["te2.W"] = mem["a_te1"].T @ demb
    g["te2.b"] = demb.sum(axis=0)
    dz = (demb @ params["te2.W"].T) * _dsilu(mem["z_te1"], mem["g_te1"])
    g["te1.W"] = mem["ft"].T @ dz
    g["te1.b"] = dz.sum(axis=0)
    # target-time branch
    g["ps2.W"] = mem["a_ps1"].T @ demb
    g["ps2.b"] = demb.sum(axis=0)
    dz = (demb @ params["ps2.W"].T) * _dsilu(mem["z_ps1"], mem["g_ps1"])
    g["ps1.W"] = mem["fs"].T @ dz
    g["ps1.b"] = dz.sum(axis=0)
    # context encoder
    dz = dctx * _dsilu(mem["z_ce"], mem["g_ce"])
    g["ce.W"] = mem["context"].T @ dz
    g["ce.b"] = dz.sum(axis=0)
    return g


def freeze_mask(params: Params, trainable: Iterable[str]) -> dict:
    """Boolean per-tensor mask: True where the tensor's group is trainable."""
    trainable = set(trainable)
    unknown = trainable - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
    return {name: group_of(name) in trainable for name in params}


class VelocityNet:
    """Callable velocity field bound to a parameter dict."""

    def __init__(self, params: Params, cfg: NetConfig):
        self.params = params
        self.cfg = cfg

    def __call__(self, x, s, t, context=None):
        return forward(self.params, self.cfg, x, s, t, context)


# ---------------------------------------------------------------------------
# Checkpoints
#
# Binary layout, little-endian:
#   magic  b"SNPF"  | u32 version (=1) | u32 tensor count
#   per tensor:  u16 name length | name (utf-8) | u32 ndim | u32 dims... |
#                f64 data (row-major)
# A JSON sidecar next to the file records the NetConfig and config hash.

_MAGIC = b"SNPF"


def save_checkpoint(path, params: Params, cfg: NetConfig, meta: Optional[dict] = None) -> None:
    path = Path(path)
    chunks = [_MAGIC, struct.pack("<II", 1, len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))
    sidecar = {"net": asdict(cfg), **(meta or {})}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    _, count = struct.unpack_from("<II", buf, 4)
    off = 12
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    sidecar = json.loads(path.with_suffix(".json").read_text())
    cfg = NetConfig(**sidecar.pop("net"))
    return params, cfg, sidecar


def gradient_check(cfg: NetConfig, rng: np.random.Generator, *, batch: int = 3,
                   h: float = 1e-6, floor: float = 1e-4) -> float:
    """Max relative error of :func:`backward` against central differences.

    Every parameter (including the target-time layers, given random values
    here so their gradients are non-trivial) is perturbed in turn.  The
    relative error of an entry is ``|g - fd| / max(|g|, |fd|, floor)``; the
    floor sits at the roundoff scale of an ``h = 1e-6`` difference divided by
    the 1e-5 tolerance, below which central differences cannot resolve.
    """
    params = init_params(cfg, rng)
    params["ps2.W"] = rng.standard_normal(params["ps2.W"].shape) * 0.5
    params["ps2.b"] = rng.standard_normal(params["ps2.b"].shape) * 0.1
    for k in params:
        if k.endswith(".b"):
            params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
    x = rng.standard_normal((batch, cfg.horizon, cfg.action_dim))
    s = rng.uniform(size=batch)
    t = rng.uniform(size=batch)
    c = rng.standard_normal((batch, max(cfg.context_dim, 1)))
    up = rng.standard_normal(x.shape)
    _, mem = forward(params, cfg, x, s, t, c, cache=True)
    grads = backward(params, cfg, mem, up)

    def out():
        return forward(params, cfg, x, s, t, c)

    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = out()
            flat[i] = old - h
            fm = out()
            flat[i] = old
            # difference before reducing keeps roundoff at the entry scale
            fd = float(np.sum(up * (fp - fm))) / (2 * h)
            err = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), floor)
            worst = max(worst, err)
    return float(worst)
