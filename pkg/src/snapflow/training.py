"""Flow-matching pretraining and shortcut self-distillation.

One training step draws, per sample, a branch: with probability ``alpha``
the flow-matching regression on a random path time, otherwise the one-step
student ``F(x1, 0, 1)`` regressed onto the detached two-step Euler target
(weighted by ``lam``).  Per-sample losses are averaged over the batch, so
the expected objective is ``alpha * L_fm + (1 - alpha) * lam * L_shortcut``.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

from .flow import DivergenceError
from .network import NetConfig, Params, backward, forward, freeze_mask, zero_phi_s

LOG_FIELDS = ("step", "loss", "fm_loss", "shortcut_loss", "grad_norm", "lr")


@dataclass
class TrainConfig:
    alpha: float = 0.5
    lam: float = 0.1
    lr_peak: float = 2.5e-5
    warmup_steps: int = 500
    total_steps: int = 30_000
    grad_clip_norm: float = 1.0
    clamp: tuple = (-20.0, 20.0)
    batch_size: int = 4
    seed: int = 7
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    log_every: int = 50
    trainable: tuple = ("trunk", "phi_s")

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        lo, hi = self.clamp
        if lo >= hi:
            raise ValueError("clamp must satisfy lo < hi")
        self.clamp = (float(lo), float(hi))
        self.betas = tuple(float(b) for b in self.betas)
        self.trainable = tuple(self.trainable)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("log steps must increase")
        self.rows.append(row)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=np.float64)

    def to_csv(self, path, header: Iterable[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_FIELDS)
            for r in self.rows:
                w.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` then cosine decay to 0 at ``total_steps``."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr_peak * (step + 1) / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return 0.0 if step >= cfg.total_steps else cfg.lr_peak
    frac = min(max((step - cfg.warmup_steps) / span, 0.0), 1.0)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def _zeros_like(params: Params) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _add_into(acc: dict, g: dict) -> None:
    for k, v in g.items():
        acc[k] += v


def _check_finite(value, what: str) -> None:
    if not np.all(np.isfinite(value)):
        raise DivergenceError(f"diverged: non-finite {what}")


# ---------------------------------------------------------------------------
# Losses.  Each returns (loss, grads) with loss averaged over all entries.


def fm_loss(params: Params, cfg: NetConfig, x0, context, rng: np.random.Generator,
            *, t=None, eps=None):
    """Flow-matching regression onto the conditional velocity ``eps - x0``."""
    x0 = np.asarray(x0, dtype=np.float64)
    B = x0.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if t is None:
        t = rng.uniform(size=B)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    tb = np.asarray(t)[:, None, None]
    xt = (1.0 - tb) * x0 + tb * eps
    pred, mem = forward(params, cfg, xt, t, t, context, cache=True)
    diff = pred - (eps - x0)
    loss = float(np.mean(diff * diff))
    _check_finite(loss, "flow-matching loss")
    return loss, backward(params, cfg, mem, 2.0 * diff / diff.size)


def shortcut_target(params: Params, cfg: NetConfig, x1, context, clamp=(-20.0, 20.0)):
    """Detached two-step Euler average velocity from t=1 through t=0.5."""
    x1 = np.asarray(x1, dtype=np.float64)
    v1 = forward(params, cfg, x1, 1.0, 1.0, context)
    x_half = x1 - 0.5 * v1
    v_half = forward(params, cfg, x_half, 0.5, 0.5, context)
    target = np.clip(0.5 * (v1 + v_half), clamp[0], clamp[1])
    _check_finite(target, "shortcut target")
    return target


def shortcut_loss(params: Params, cfg: NetConfig, x1, context, clamp=(-20.0, 20.0),
                  *, target=None):
    """Regress the one-step student ``F(x1, 0, 1)`` onto the shortcut target.

    Only the student branch is differentiated; ``target`` may be supplied
    precomputed and is treated as a constant either way.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    if target is None:
        target = shortcut_target(params, cfg, x1, context, clamp)
    pred, mem = forward(params, cfg, x1, 0.0, 1.0, context, cache=True)
    diff = pred - target
    loss = float(np.mean(diff * diff))
    _check_finite(loss, "shortcut loss")
    return loss, backward(params, cfg, mem, 2.0 * diff / diff.size)


def mixed_loss(params: Params, cfg: NetConfig, x0, context, eps, t, use_fm, tcfg: TrainConfig):
    """Per-sample branched objective for a fixed branch assignment.

    Returns ``(loss, grads, fm_loss, shortcut_loss)``; the component losses are
    means over their own sub-batches (NaN when a branch is empty).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    B = x0.shape[0]
    context = None if context is None else np.asarray(context, dtype=np.float64)
    use_fm = np.asarray(use_fm, dtype=bool)
    grads = _zeros_like(params)
    total = 0.0
    l_fm = l_sc = float("nan")
    fm_idx = np.flatnonzero(use_fm)
    sc_idx = np.flatnonzero(~use_fm)
    if fm_idx.size:
        c = None if context is None else context[fm_idx]
        l_fm, g = fm_loss(params, cfg, x0[fm_idx], c, None, t=t[fm_idx], eps=eps[fm_idx])
        w = fm_idx.size / B
        total += w * l_fm
        _add_into(grads, {k: w * v for k, v in g.items()})
    if sc_idx.size and tcfg.lam > 0:
        c = None if context is None else context[sc_idx]
        # the noise endpoint of the path is the student's input
        l_sc, g = shortcut_loss(params, cfg, eps[sc_idx], c, tcfg.clamp)
        w = tcfg.lam * sc_idx.size / B
        total += w * l_sc
        _add_into(grads, {k: w * v for k, v in g.items()})
    elif sc_idx.size:
        l_sc = 0.0
    return total, grads, l_fm, l_sc


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: Params) -> "AdamState":
        return cls(_zeros_like(params), _zeros_like(params), 0)


def global_norm(grads: dict) -> float:
    # fixed key order so the result does not depend on dict construction
    return float(math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads))))


def adamw_update(params: Params, grads: dict, state: AdamState, lr: float,
                 tcfg: TrainConfig, mask: dict) -> None:
    """In-place AdamW step; masked-out tensors are left untouched."""
    b1, b2 = tcfg.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in params.items():
        if not mask[k]:
            continue
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        upd = (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + tcfg.adam_eps)
        if tcfg.weight_decay:
            p -= lr * tcfg.weight_decay * p
        p -= lr * upd


def draw_branches(rng: np.random.Generator, n: int, alpha: float) -> np.ndarray:
    """Per-sample branch flags: True selects flow matching (probability ``alpha``)."""
    return rng.uniform(size=n) < alpha


def train_step(params: Params, cfg: NetConfig, x0, context, tcfg: TrainConfig,
               rng: np.random.Generator, step: int, state: AdamState,
               mask: Optional[dict] = None):
    """One optimizer step of the branched objective; updates ``params`` in place."""
    if step >= tcfg.total_steps:
        raise ValueError("step must be < total_steps")
    x0 = np.asarray(x0, dtype=np.float64)
    B = x0.shape[0]
    if mask is None:
        mask = freeze_mask(params, tcfg.trainable)
    eps = rng.standard_normal(x0.shape)
    t = rng.uniform(size=B)
    use_fm = draw_branches(rng, B, tcfg.alpha)
    loss, grads, l_fm, l_sc = mixed_loss(params, cfg, x0, context, eps, t, use_fm, tcfg)
    for k in grads:
        if not mask[k]:
            grads[k][...] = 0.0
    gnorm = global_norm(grads)
    _check_finite(gnorm, "gradient")
    if tcfg.grad_clip_norm and gnorm > tcfg.grad_clip_norm:
        scale = tcfg.grad_clip_norm / gnorm
        grads = {k: v * scale for k, v in grads.items()}
    lr = lr_at(step, tcfg)
    adamw_update(params, grads, state, lr, tcfg, mask)
    row = {"step": step, "loss": loss, "fm_loss": l_fm, "shortcut_loss": l_sc,
           "grad_norm": gnorm, "lr": lr}
    return params, row


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i:i + batch_size]


def train(params: Params, cfg: NetConfig, data_x0, data_ctx, tcfg: TrainConfig,
          rng: np.random.Generator, *, callback=None):
    """Run ``total_steps`` of :func:`train_step` on a copy of ``params``.

    Log rows are kept every ``log_every`` steps (and at the final step), each
    averaging the per-step values since the previous row.
    """
    params = copy.deepcopy(params)
    log = TrainLog()
    if tcfg.total_steps == 0:
        return params, log
    data_x0 = np.asarray(data_x0, dtype=np.float64)
    n = data_x0.shape[0]
    bs = min(tcfg.batch_size, n)
    mask = freeze_mask(params, tcfg.trainable)
    state = AdamState.zeros(params)
    batches = _batches(n, bs, rng)
    window = []
    for step in range(tcfg.total_steps):
        idx = next(batches)
        ctx = None if data_ctx is None else data_ctx[idx]
        params, row = train_step(params, cfg, data_x0[idx], ctx, tcfg, rng, step, state, mask)
        window.append(row)
        last = step == tcfg.total_steps - 1
        if (step + 1) % tcfg.log_every == 0 or last:
            agg = {"step": step, "lr": row["lr"]}
            for key in ("loss", "fm_loss", "shortcut_loss", "grad_norm"):
                vals = np.array([r[key] for r in window])
                vals = vals[~np.isnan(vals)]
                agg[key] = float(vals.mean()) if vals.size else float("nan")
            log.append(agg)
            window = []
            if callback is not None:
                callback(step, params, agg)
    return params, log


def pretrain(params: Params, cfg: NetConfig, data_x0, data_ctx, tcfg: TrainConfig,
             rng: np.random.Generator, **kw):
    """Pure flow matching (alpha = 1) with the target-time embedding held at zero."""
    tcfg = TrainConfig(**{**asdict(tcfg), "alpha": 1.0,
                          "trainable": tuple(g for g in tcfg.trainable if g != "phi_s")})
    return train(params, cfg, data_x0, data_ctx, tcfg, rng, **kw)


def distill(pretrained: Params, cfg: NetConfig, data_x0, data_ctx, tcfg: TrainConfig,
            rng: np.random.Generator, **kw):
    """Shortcut self-distillation from a flow-matching checkpoint.

    The target-time output layer is reset to zero first, so at step 0 the
    network is exactly the teacher for every target time.
    """
    if tcfg.total_steps == 0:
        return copy.deepcopy(pretrained), TrainLog()
    start = copy.deepcopy(pretrained)
    zero_phi_s(start)
    return train(start, cfg, data_x0, data_ctx, tcfg, rng, **kw)
