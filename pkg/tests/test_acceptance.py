"""Acceptance criteria 1-11 on the default configuration.

Runs the full pipeline (verify, pretrain, distill, sweep, rollout) twice
through the CLI entry point, then checks each criterion and prints one
``CRITERION n: PASS|FAIL`` line.  Run directly with ``python
tests/test_acceptance.py`` or under pytest (lines are printed with capture
disabled).  Takes about three minutes on one core.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from snapflow import config as config_mod
from snapflow.cli import main as cli_main
from snapflow.flow import euler_sample
from snapflow.network import forward, load_checkpoint, zero_phi_s
from snapflow.numerics import make_rng
from snapflow.oracle import MixtureSpec, verify_theorem1, verify_theorem2
from snapflow.training import shortcut_loss, shortcut_target

PHASES = ("verify", "pretrain", "distill", "sweep", "rollout")


class Pipeline:
    def __init__(self, root: Path):
        self.root = root
        self.cfg = config_mod.resolve()
        self.timings = {}
        self.codes = {}
        for tag in ("a", "b"):
            for cmd in PHASES:
                t0 = time.perf_counter()
                self.codes[tag, cmd] = cli_main([cmd, "--out", str(root / tag), "-q"])
                self.timings[tag, cmd] = time.perf_counter() - t0

    def out(self, tag="a") -> Path:
        return self.root / tag

    def json(self, name, tag="a"):
        return json.loads((self.out(tag) / name).read_text())

    def csv(self, name, tag="a"):
        with open(self.out(tag) / name) as fh:
            return list(csv.DictReader(line for line in fh if not line.startswith("#")))

    def net(self, name):
        params, cfg, _ = load_checkpoint(self.out() / f"{name}.bin")
        return params, cfg


# ---------------------------------------------------------------------------
# criteria


def criterion_1(pl):
    v = pl.cfg["verify"]
    rep = pl.json("verify_theorem1.json")
    grid_ok = v["t_grid"] == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9] and v["n_mc"] == 100_000
    mc_ok = all(r["passed"] and min(r["mc"]) > 0 and min(r["analytic"]) > 0 for r in rep["reports"])
    a = rep["single_gaussian_anchors"]
    anchors = abs(a["0.5"] - 2.0) < 1e-12 and abs(a["0.0"] - 1.0) < 1e-12 and abs(a["1.0"] - 1.0) < 1e-12
    o = pl.cfg["oracle"]
    t0 = time.perf_counter()
    for spec in (MixtureSpec(o["weights"], o["means"], o["scales"]), MixtureSpec.single(2)):
        verify_theorem1(spec, v["t_grid"], v["n_mc"], make_rng(0, 10))
    elapsed = time.perf_counter() - t0
    zmax = max(
        abs(m - an) / se for r in rep["reports"] for m, an, se in zip(r["mc"], r["analytic"], r["mc_stderr"])
    )
    ok = grid_ok and mc_ok and anchors and elapsed < 30
    return ok, f"max |z|={zmax:.2f} (<3), oracle 2.0/1.0/1.0 anchors={anchors}, runtime {elapsed:.1f}s"


def criterion_2(pl):
    rep = pl.json("verify_theorem2.json")
    lin = rep["reports"][0]
    resid, cross = lin["mc"]
    se_r, se_c = lin["mc_stderr"]
    o = pl.cfg["oracle"]
    t0 = time.perf_counter()
    verify_theorem2(MixtureSpec(o["weights"], o["means"], o["scales"]), np.array([[1.0, 0.5], [-0.3, 2.0]]),
                    np.array([0.2, -0.1]), 0.5, pl.cfg["verify"]["n_mc"], make_rng(0, 10))
    elapsed = time.perf_counter() - t0
    ok = abs(resid) < 3 * se_r and abs(cross) < 3 * se_c and rep["passed"] and elapsed < 30
    return ok, (f"residual {resid:.2e} vs 3se {3 * se_r:.2e}, cross {cross:.2e} vs 3se "
                f"{3 * se_c:.2e}, runtime {elapsed:.1f}s")


def criterion_3(pl):
    rep = pl.json("verify_a4_identity.json")
    parts = []
    ok = True
    for r in rep["reports"]:
        gap, se = abs(r["mc"][0]), r["mc_stderr"][0]
        ok &= gap < 3 * se
        parts.append(f"{r['probe']}: {gap:.2e} < {3 * se:.2e}")
    return ok, "; ".join(parts)


def criterion_4(pl):
    rep = pl.json("verify_theorem3.json")
    f = rep["fields"]
    ok = len(f) >= 2 and all(e["relative_gap"] < 1e-2 and e["halving_ok"] for e in f)
    detail = "; ".join(
        f"{e['field']}: gap {e['relative_gap']:.1e}, bound {e['error_bound_full']:.3f} -> "
        f"{e['error_bound_half']:.3f}" for e in f)
    return ok, detail


def criterion_5(pl):
    rep = pl.json("verify_gradcheck.json")
    ok = all(c["n_params"] <= 10_000 and len(c["max_relative_error"]) == 5
             and max(c["max_relative_error"]) < 1e-5 for c in rep["checks"])
    detail = "; ".join(f"{c['net']} ({c['n_params']} params, h={c['fd_step']:g}): "
                       f"{max(c['max_relative_error']):.1e}" for c in rep["checks"])
    return ok, detail


def criterion_6(pl):
    teacher, cfg = pl.net("teacher")
    start = copy.deepcopy(teacher)
    zero_phi_s(start)  # what distillation does at step 0
    rng = make_rng(0, 60)
    x = rng.standard_normal((16, cfg.horizon, cfg.action_dim))
    c = rng.standard_normal((16, cfg.context_dim))
    t = rng.uniform(size=16)
    ref = forward(start, cfg, x, t, t, c)
    ok = all(np.array_equal(forward(start, cfg, x, s, t, c), ref) for s in (0.0, 0.13, 0.5, 1.0))
    ok &= np.array_equal(forward(start, cfg, x, t, t, c), forward(teacher, cfg, x, t, t, c))
    return ok, "outputs bit-identical for s in {0, 0.13, 0.5, 1, t} and equal to the teacher"


def criterion_7(pl):
    params, cfg = pl.net("student")
    rng = make_rng(0, 70)
    x1 = rng.standard_normal((32, cfg.horizon, cfg.action_dim))
    c = rng.standard_normal((32, cfg.context_dim))
    target = shortcut_target(params, cfg, x1, c)
    _, g = shortcut_loss(params, cfg, x1, c)
    pred, mem = forward(params, cfg, x1, 0.0, 1.0, c, cache=True)
    from snapflow.network import backward
    g_ref = backward(params, cfg, mem, 2.0 * (pred - target) / pred.size)
    rel = max(float(np.abs(g[k] - g_ref[k]).max() / max(np.abs(g_ref[k]).max(), 1e-300)) for k in g)
    return rel <= 1e-12, f"max relative deviation {rel:.1e}"


def criterion_8(pl):
    """20 random affine fields F = A x + b with spectral radius 0.3.

    The 1/K law is asymptotic; at K = 1 a step of size 1 sees the full
    ``||A||``, and for spectral radius near 1 the K=1 point bends the fit.
    """
    from scipy.linalg import expm

    Ks = np.array([1, 2, 4, 8, 16])
    slopes = []
    for seed in range(20):
        rng = make_rng(seed, 80)
        A = rng.standard_normal((3, 3))
        A *= 0.3 / np.max(np.abs(np.linalg.eigvals(A)))
        b = rng.standard_normal(3)
        x1 = rng.standard_normal((1, 1, 3))

        def field(x, s, t, ctx=None):
            return x @ A.T + b

        # integrating dx/dt = A x + b from t = 1 down to 0
        E = expm(-A)
        exact = E @ x1[0, 0] + (E - np.eye(3)) @ np.linalg.solve(A, b)
        errs = [np.linalg.norm(euler_sample(field, x1, int(K))[0, 0] - exact) for K in Ks]
        slopes.append(np.polyfit(np.log(Ks), np.log(errs), 1)[0])
    slopes = np.array(slopes)
    ok = bool(np.all(np.abs(slopes + 1) <= 0.1))
    return ok, f"slopes over 20 fields in [{slopes.min():.3f}, {slopes.max():.3f}]"


def criterion_9(pl):
    s = pl.json("metrics_summary.json")
    naive, snap, teach = s["naive_1step"], s["snapflow_1step"], s["teacher_10step"]
    ratio = teach["nfe_per_chunk"] / snap["nfe_per_chunk"]
    total = sum(pl.timings["a", c] for c in PHASES)
    ok = (snap["mse_mean"] < naive["mse_mean"] and snap["mse_mean"] <= 1.1 * teach["mse_mean"]
          and teach["nfe_per_chunk"] == 10 and snap["nfe_per_chunk"] == 1 and total < 600
          and pl.cfg["seed"] == 7)
    return ok, (f"SnapFlow-1 {snap['mse_mean']:.4f} vs naive-1 {naive['mse_mean']:.4f} vs "
                f"teacher-10 {teach['mse_mean']:.4f} (x1.1 = {1.1 * teach['mse_mean']:.4f}), "
                f"NFE {teach['nfe_per_chunk']}:{snap['nfe_per_chunk']} = {ratio:g}, "
                f"pipeline {total:.0f}s")


def criterion_10(pl):
    rows = pl.csv("nact_sweep.csv")
    eps = pl.csv("nact_episodes.csv")
    grid = sorted({int(r["n_act"]) for r in rows})
    ok = grid == [1, 2, 4, 8]
    worst_gap = -1.0
    for n in grid:
        t = next(r for r in rows if r["method"] == "baseline" and int(r["n_act"]) == n)
        s = next(r for r in rows if r["method"] == "snapflow" and int(r["n_act"]) == n)
        ok &= int(t["episodes"]) >= 50 and int(t["K"]) == 10 and int(s["K"]) == 1
        gap = float(t["success_rate"]) - float(s["success_rate"])
        worst_gap = max(worst_gap, gap)
        ok &= gap <= 0.05
        te = {int(e["episode"]): int(e["nfe"]) for e in eps if e["method"] == "baseline" and int(e["n_act"]) == n}
        se = {int(e["episode"]): int(e["nfe"]) for e in eps if e["method"] == "snapflow" and int(e["n_act"]) == n}
        ok &= te.keys() == se.keys() and all(te[i] == 10 * se[i] for i in te)
    rates = ", ".join(f"n_act={r['n_act']} {r['method']} {float(r['success_rate']):.2f}" for r in rows)
    return ok, f"episode NFE exactly 10:1, worst success gap {100 * worst_gap:.0f}pp; {rates}"


def criterion_11(pl):
    codes_ok = all(code == 0 for code in pl.codes.values())
    diffs, n = [], 0
    for p in sorted(pl.out("a").iterdir()):
        if p.suffix not in (".csv", ".json") or p.name.startswith("timing_"):
            continue
        n += 1
        if p.read_bytes() != (pl.out("b") / p.name).read_bytes():
            diffs.append(p.name)
    return codes_ok and not diffs and n > 10, f"{n} CSV/JSON files compared, differing: {diffs or 'none'}"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10, criterion_11]


def line(i, ok, detail):
    return f"CRITERION {i}: {'PASS' if ok else 'FAIL'} | {detail}"


# ---------------------------------------------------------------------------
# pytest entry


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return Pipeline(tmp_path_factory.mktemp("acceptance"))


@pytest.mark.parametrize("i", range(1, 12))
def test_criterion(pipeline, i, capsys):
    ok, detail = CRITERIA[i - 1](pipeline)
    with capsys.disabled():
        print("\n" + line(i, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        pl = Pipeline(Path(tmp))
        results = [c(pl) for c in CRITERIA]
    for i, (ok, detail) in enumerate(results, 1):
        print(line(i, ok, detail))
    sys.exit(0 if all(ok for ok, _ in results) else 1)
