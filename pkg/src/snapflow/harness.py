"""Pipeline phases: verify, pretrain, distill, sweep, rollout.

Each phase reads the resolved config, writes its artifacts into the output
directory and merges them into ``manifest.json``.  Artifacts carry the
config hash; phases that consume checkpoints refuse ones written under a
different hash.  Wall-clock measurements are the only non-deterministic
outputs and are confined to ``timing_*.json``.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .evaluation import (
    ToyEnv,
    expert_dataset,
    nact_sweep,
    step_sweep,
    write_rows_csv,
)
from .flow import DivergenceError
from .network import (
    NetConfig,
    VelocityNet,
    forward,
    gradient_check,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import make_rng
from .oracle import (
    MixtureSpec,
    OracleError,
    affine_probe,
    conditional_covariance,
    marginal_velocity,
    theorem3_terms,
    field_flow_map,
    verify_a4_identity,
    verify_theorem1,
    verify_theorem2,
)
from .plots import bar_chart, line_chart
from .training import TrainConfig, distill, pretrain

log = logging.getLogger("snapflow")


class MissingArtifact(RuntimeError):
    pass


class VerificationFailed(RuntimeError):
    def __init__(self, manifest, failed):
        super().__init__(f"verification failed: {', '.join(failed)}")
        self.manifest = manifest


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    artifacts: list = field(default_factory=list)
    verification: dict = field(default_factory=dict)

    def add(self, *paths) -> None:
        self.artifacts = sorted(set(self.artifacts) | {str(p) for p in paths})


# ---------------------------------------------------------------------------
# helpers


class Run:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.hash = config_mod.config_hash(cfg)
        self.seed = int(cfg["seed"])
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = self._load_manifest()

    def _load_manifest(self) -> RunManifest:
        path = self.out / "manifest.json"
        if path.exists():
            data = json.loads(path.read_text())
            if data.get("config_hash") == self.hash:
                return RunManifest(**data)
        return RunManifest(self.hash, self.seed)

    def header(self) -> list:
        return [f"config_hash={self.hash}", f"seed={self.seed}"]

    def write_json(self, name: str, obj: dict) -> Path:
        path = self.out / name
        body = {"config_hash": self.hash, "seed": self.seed, **obj}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        self.manifest.add(name)
        return path

    def write_csv(self, name: str, rows: list) -> Path:
        path = self.out / name
        write_rows_csv(path, rows, self.header())
        self.manifest.add(name)
        return path

    def write_text(self, name: str, text: str) -> Path:
        (self.out / name).write_text(text)
        self.manifest.add(name)
        return self.out / name

    def save_manifest(self) -> RunManifest:
        path = self.out / "manifest.json"
        path.write_text(json.dumps(asdict(self.manifest), indent=2, sort_keys=True) + "\n")
        return self.manifest

    def net_config(self) -> NetConfig:
        n, e = self.cfg["net"], self.cfg["env"]
        return NetConfig(horizon=e["horizon"], action_dim=2, context_dim=4, **n)

    def env(self) -> ToyEnv:
        e = self.cfg["env"]
        return ToyEnv(horizon=e["horizon"], max_step=e["max_step"], budget=e["budget"],
                      success_radius=e["success_radius"], fixed_length=e["fixed_length"])

    def datasets(self):
        e = self.cfg["env"]
        env = self.env()
        train = expert_dataset(env, e["n_train"], make_rng(self.seed, 1), e["jitter"])
        held = expert_dataset(env, e["n_heldout"], make_rng(self.seed, 2), e["jitter"])
        return train, held

    def load_net(self, name: str, needed_by: str):
        path = self.out / f"{name}.bin"
        if not path.exists():
            prior = {"teacher": "pretrain", "student": "distill"}[name]
            raise MissingArtifact(
                f"{needed_by} needs {path}; run `snapflow {prior}` with this config first"
            )
        params, cfg, meta = load_checkpoint(path)
        if meta.get("config_hash") != self.hash:
            raise MissingArtifact(
                f"{path} was written under config hash {meta.get('config_hash')}, "
                f"current config hash is {self.hash}; rerun `snapflow "
                f"{'pretrain' if name == 'teacher' else 'distill'}`"
            )
        return params, cfg

    def save_net(self, name: str, params, net_cfg: NetConfig) -> None:
        path = self.out / f"{name}.bin"
        tmp = self.out / f"{name}.tmp.bin"
        save_checkpoint(tmp, params, net_cfg, {"config_hash": self.hash, "seed": self.seed})
        tmp.replace(path)
        tmp.with_suffix(".json").replace(path.with_suffix(".json"))
        self.manifest.add(path.name, path.with_suffix(".json").name)


def _train_config(section: dict, seed: int, **extra) -> TrainConfig:
    kw = dict(section)
    if "clamp" in kw:
        kw["clamp"] = tuple(kw["clamp"])
    return TrainConfig(seed=seed, **kw, **extra)


def _mixture(cfg: dict) -> MixtureSpec:
    o = cfg["oracle"]
    try:
        return MixtureSpec(o["weights"], o["means"], o["scales"])
    except OracleError as exc:
        raise config_mod.ConfigError(f"config key 'oracle': {exc}") from None


# ---------------------------------------------------------------------------
# verify


def _tanh_field(x, s, t):
    return np.tanh(x) * (1.0 + s) + 0.3 * t * x


def _mlp_field(dim: int, seed: int):
    cfg = NetConfig(horizon=1, action_dim=dim, context_dim=0, hidden=16,
                    time_embed=8, context_embed=4, n_freq=3)
    rng = make_rng(seed, 77)
    params = init_params(cfg, rng)
    params["ps2.W"] = 0.5 * rng.standard_normal(params["ps2.W"].shape)

    def field_fn(x, s, t):
        n = x.shape[0]
        s = np.broadcast_to(np.asarray(s, dtype=np.float64), (n,))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        return forward(params, cfg, x.reshape(n, 1, dim), s, t).reshape(n, dim)

    return field_fn


def theorem3_report(spec: MixtureSpec, v: dict, seed: int) -> dict:
    s, t, n = v["theorem3_s"], v["theorem3_t"], v["theorem3_quad_steps"]
    rtol = v["theorem3_rtol"]
    probes = np.array([[-0.8, 0.3], [0.2, -0.5], [1.1, 0.9]])[:, : spec.dim]
    if probes.shape[1] < spec.dim:
        probes = np.pad(probes, ((0, 0), (0, spec.dim - probes.shape[1])))
    s_half = t - 0.5 * (t - s)
    entries = []
    for name, fn in (("tanh_field", _tanh_field), ("mlp_field", _mlp_field(spec.dim, seed))):
        full = theorem3_terms(spec, field_flow_map(fn), probes, s, t, n)
        half = theorem3_terms(spec, field_flow_map(fn), probes, s_half, t, n // 2)
        gaps = np.linalg.norm(full.direct - full.integral, axis=1) / np.maximum(
            np.linalg.norm(full.direct, axis=1), 1e-12)
        halving_ok = half.error_bound <= 0.5 * full.error_bound * (1 + 1e-9)
        bound_ok = bool(np.all(np.linalg.norm(half.direct, axis=1) <= half.error_bound))
        entries.append({
            "field": name,
            "s": s, "t": t, "s_half": s_half,
            "relative_gap": float(gaps.max()),
            "direct_norm": float(np.linalg.norm(full.direct)),
            "integral_norm": float(np.linalg.norm(full.integral)),
            "error_bound_full": full.error_bound,
            "error_bound_half": half.error_bound,
            "halving_ok": bool(halving_ok),
            "bound_holds": bound_ok,
            "passed": bool(gaps.max() < rtol and halving_ok and bound_ok),
        })
    return {"name": "theorem3", "rtol": rtol, "fields": entries,
            "passed": all(e["passed"] for e in entries)}


def cmd_verify(cfg: dict) -> RunManifest:
    run = Run(cfg)
    v = cfg["verify"]
    tol = float(v["tolerance_sigmas"])
    mix = _mixture(cfg)
    single = MixtureSpec.single(mix.dim)
    rng = make_rng(run.seed, 10)
    results = {}

    reps = [verify_theorem1(sp, v["t_grid"], v["n_mc"], rng, tol=tol) for sp in (mix, single)]
    anchors = {str(t): conditional_covariance(single, np.zeros(mix.dim), t) for t in (0.0, 0.5, 1.0)}
    anchors_ok = (abs(anchors["0.0"] - 1.0) < 1e-12 and abs(anchors["0.5"] - 2.0) < 1e-12
                  and abs(anchors["1.0"] - 1.0) < 1e-12)
    results["theorem1"] = {
        "reports": [dict(asdict(r), spec=lab) for r, lab in zip(reps, ("mixture", "single_gaussian"))],
        "single_gaussian_anchors": anchors,
        "passed": all(r.passed for r in reps) and anchors_ok,
    }

    A = np.array([[1.0, 0.5], [-0.3, 2.0]])[: mix.dim, : mix.dim]
    if A.shape[0] < mix.dim:
        A = np.eye(mix.dim)
    fdot = np.linspace(0.2, -0.1, mix.dim)
    t2 = v["theorem2_t"]
    reps = [verify_theorem2(mix, A, fdot, t2, v["n_mc"], rng, tol=tol),
            verify_theorem2(mix, np.zeros_like(A), fdot, t2, v["n_mc"], rng, tol=tol)]
    results["theorem2"] = {
        "reports": [dict(asdict(r), probe=lab) for r, lab in zip(reps, ("linear", "zero_jacobian"))],
        "passed": all(r.passed for r in reps),
    }

    s4, t4 = v["a4_s"], v["a4_t"]
    d = mix.dim
    probe = affine_probe(0.4 * np.eye(d), np.full(d, 0.1), -0.3 * np.eye(d), np.zeros(d), s4, t4)

    def oracle_probe(x):
        return marginal_velocity(mix, x, t4), np.zeros_like(x)

    reps = [verify_a4_identity(mix, probe, t4, v["n_mc"], rng, tol=tol),
            verify_a4_identity(mix, oracle_probe, t4, v["n_mc"], rng, tol=tol)]
    results["a4_identity"] = {
        "reports": [dict(asdict(r), probe=lab) for r, lab in zip(reps, ("affine", "oracle_u"))],
        "passed": all(r.passed for r in reps),
    }

    results["theorem3"] = theorem3_report(mix, v, run.seed)

    # the spec step h = 1e-6 on a small net, and the full experiment net at
    # h = 1e-5 where h = 1e-6 roundoff (~1e-9 absolute) sits at the floor
    checks = []
    small = NetConfig(horizon=4, action_dim=2, context_dim=4, hidden=32, time_embed=8,
                      context_embed=8, n_freq=3)
    for label, gc_cfg, h in (("small", small, 1e-6), ("experiment", run.net_config(), 1e-5)):
        errs = [gradient_check(gc_cfg, make_rng(run.seed, 20 + i), h=h)
                for i in range(v["gradcheck_seeds"])]
        n = sum(int(np.prod(sh)) for sh in gc_cfg.shapes().values())
        checks.append({"net": label, "config": asdict(gc_cfg), "n_params": n, "fd_step": h,
                       "max_relative_error": errs, "passed": max(errs) < v["gradcheck_rtol"]})
    results["gradcheck"] = {
        "rtol": v["gradcheck_rtol"],
        "checks": checks,
        "passed": all(c["passed"] for c in checks),
    }

    for name, body in results.items():
        run.write_json(f"verify_{name}.json", body)
        log.info("%s: %s", name, "PASSED" if body["passed"] else "FAILED")
    run.manifest.verification = {k: ("PASSED" if b["passed"] else "FAILED") for k, b in results.items()}
    manifest = run.save_manifest()
    failed = [k for k, b in results.items() if not b["passed"]]
    if failed:
        raise VerificationFailed(manifest, failed)
    return manifest


# ---------------------------------------------------------------------------
# training phases


def _run_training(run: Run, name: str, fn, start, net_cfg, data, tcfg, rng):
    last_good = {"params": copy.deepcopy(start)}

    def keep(step, params, row):
        last_good["params"] = copy.deepcopy(params)

    try:
        params, tlog = fn(start, net_cfg, data[0], data[1], tcfg, rng, callback=keep)
    except (DivergenceError, KeyboardInterrupt) as exc:
        run.save_net(f"{name}.last_good", last_good["params"], net_cfg)
        run.save_manifest()
        if isinstance(exc, KeyboardInterrupt):
            raise
        raise TrainingDiverged(
            f"{name} training diverged ({exc}); last good checkpoint at "
            f"{run.out / (name + '.last_good.bin')}"
        ) from exc
    return params, tlog


def cmd_pretrain(cfg: dict) -> RunManifest:
    run = Run(cfg)
    net_cfg = run.net_config()
    train, _ = run.datasets()
    params = init_params(net_cfg, make_rng(run.seed, 3))
    tcfg = _train_config(cfg["pretrain"], run.seed, alpha=1.0, trainable=("trunk", "context"))
    teacher, tlog = _run_training(run, "teacher", pretrain, params, net_cfg, train, tcfg,
                                  make_rng(run.seed, 4))
    run.save_net("teacher", teacher, net_cfg)
    tlog.to_csv(run.out / "pretrain_log.csv", run.header())
    run.manifest.add("pretrain_log.csv")
    return run.save_manifest()


def cmd_distill(cfg: dict) -> RunManifest:
    run = Run(cfg)
    teacher, net_cfg = run.load_net("teacher", "distill")
    train, _ = run.datasets()
    tcfg = _train_config(cfg["distill"], run.seed, trainable=("trunk", "phi_s"))
    student, tlog = _run_training(run, "student", distill, teacher, net_cfg, train, tcfg,
                                  make_rng(run.seed, 5))
    run.save_net("student", student, net_cfg)
    tlog.to_csv(run.out / "distill_log.csv", run.header())
    run.manifest.add("distill_log.csv")
    return run.save_manifest()


# ---------------------------------------------------------------------------
# evaluation phases


def cmd_sweep(cfg: dict) -> RunManifest:
    run = Run(cfg)
    teacher, net_cfg = run.load_net("teacher", "sweep")
    student, _ = run.load_net("student", "sweep")
    _, held = run.datasets()
    ev = cfg["eval"]
    k_grid = list(ev["k_grid"])
    res = step_sweep(VelocityNet(teacher, net_cfg), VelocityNet(student, net_cfg), k_grid,
                     held, run.seed, n_noise=ev["n_noise"], timed=ev["timing"])
    run.write_csv("step_sweep.csv", res.rows)
    per_sample = []
    for rep in res.reports:
        for i, (m, c) in enumerate(zip(rep.per_sample_mse, rep.per_sample_cos)):
            per_sample.append({"method": rep.method, "K": rep.K, "sample": i,
                               "mse": float(m), "cos": float(c)})
    run.write_csv("step_sweep_per_sample.csv", per_sample)

    naive = res.cell(method="baseline", K=1)
    teacher_k = ev["teacher_k"]
    summary = {
        "naive_1step": naive,
        "snapflow_1step": res.cell(method="snapflow", K=1),
        "rows": res.rows,
    }
    if teacher_k in k_grid:
        summary[f"teacher_{teacher_k}step"] = res.cell(method="baseline", K=teacher_k)
    run.write_json("metrics_summary.json", summary)

    series = {
        "Euler (teacher)": [(r["K"], r["mse_mean"]) for r in res.rows if r["method"] == "baseline"],
        "SnapFlow": [(r["K"], r["mse_mean"]) for r in res.rows if r["method"] == "snapflow"],
    }
    note = f"config_hash={run.hash} seed={run.seed}"
    run.write_text("pareto.svg", line_chart(series, title="Offline MSE vs denoising steps",
                                            xlabel="NFE per chunk (K)", ylabel="mean MSE",
                                            comment=note))
    bars = {}
    for r in res.rows:
        if r["K"] in (1, teacher_k):
            label = f"{'SF' if r['method'] == 'snapflow' else 'Euler'}-{r['K']}"
            bars[label] = {"context encoding": 1, "denoising": r["nfe_per_chunk"]}
    run.write_text("nfe_decomposition.svg", bar_chart(
        bars, title="Forward passes per chunk", ylabel="network evaluations", comment=note))
    if ev["timing"]:
        timing = {f"{r.method}_K{r.K}": r.wall_clock_per_chunk for r in res.reports}
        run.write_json("timing_sweep.json", {"wall_clock_per_chunk_s": timing})
    return run.save_manifest()


def cmd_rollout(cfg: dict) -> RunManifest:
    run = Run(cfg)
    teacher, net_cfg = run.load_net("teacher", "rollout")
    student, _ = run.load_net("student", "rollout")
    ev = cfg["eval"]
    res = nact_sweep(VelocityNet(teacher, net_cfg), VelocityNet(student, net_cfg), run.env(),
                     ev["nact_grid"], ev["episodes"], run.seed, teacher_K=ev["teacher_k"])
    timing = {}
    rows = []
    for r in res.rows:
        r = dict(r)
        timing[f"{r['method']}_nact{r['n_act']}"] = r.pop("wall_clock_per_episode")
        rows.append(r)
    run.write_csv("nact_sweep.csv", rows)
    run.write_csv("nact_episodes.csv", res.reports)
    run.write_json("nact_summary.json", {"rows": rows})
    if ev["timing"]:
        run.write_json("timing_rollout.json", {"wall_clock_per_episode_s": timing})
    return run.save_manifest()


COMMANDS = {
    "verify": cmd_verify,
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "sweep": cmd_sweep,
    "rollout": cmd_rollout,
}
