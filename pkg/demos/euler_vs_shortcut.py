"""Pretrain a small flow-matching policy, distill it, compare samplers.

Runs the whole pipeline on the default point-mass task (about a minute on
one core) and prints the step sweep: the teacher integrated with K Euler
steps against the distilled field used as a flow map.  Artifacts land in
``runs/demo``.
"""

import csv
import sys

from snapflow import config, harness

cfg = config.resolve({"output_dir": sys.argv[1] if len(sys.argv) > 1 else "runs/demo"})
for phase in ("pretrain", "distill", "sweep", "rollout"):
    print(f"-- {phase}")
    harness.COMMANDS[phase](cfg)

out = harness.Run(cfg).out


def rows(name):
    with open(out / name) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


print("\nmethod     K   NFE   mean MSE   P95 MSE   cos")
for r in rows("step_sweep.csv"):
    print(f"{r['method']:9s} {r['K']:>2s}  {r['nfe_per_chunk']:>3s}  {float(r['mse_mean']):9.4f}"
          f"  {float(r['mse_p95']):8.4f}  {float(r['cos_mean']):.4f}")

print("\nmethod    n_act  success  NFE/episode")
for r in rows("nact_sweep.csv"):
    print(f"{r['method']:9s} {r['n_act']:>5s}  {float(r['success_rate']):7.2f}"
          f"  {int(r['total_nfe']) / int(r['episodes']):8.1f}")
print(f"\nplots: {out / 'pareto.svg'}, {out / 'nfe_decomposition.svg'}")
