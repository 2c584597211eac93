"""``snapflow <verify|pretrain|distill|sweep|rollout> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 verification failure, 2 configuration or missing
prerequisite, 3 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as config_mod
from . import harness


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snapflow", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=sorted(harness.COMMANDS))
    p.add_argument("--config", help="JSON config; omitted keys take their defaults")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    log = logging.getLogger("snapflow")
    try:
        cfg = config_mod.load(args.config) if args.config else config_mod.resolve()
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["output_dir"] = args.out
        manifest = harness.COMMANDS[args.command](cfg)
    except harness.VerificationFailed as exc:
        log.error("%s", exc)
        return 1
    except (config_mod.ConfigError, harness.MissingArtifact) as exc:
        log.error("%s", exc)
        return 2
    except harness.TrainingDiverged as exc:
        log.error("%s", exc)
        return 3
    except KeyboardInterrupt:
        log.error("interrupted; partial checkpoint saved as *.last_good.bin where applicable")
        return 130
    log.info("%s done: %d artifacts in manifest (config_hash=%s)",
             args.command, len(manifest.artifacts), manifest.config_hash)
    return 0


if __name__ == "__main__":
    sys.exit(main())
