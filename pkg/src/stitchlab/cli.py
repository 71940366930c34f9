"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 2 config or input error, 3 missing or stale
artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from stitchlab import pipeline as P
from stitchlab.config import ExperimentConfig, config_from_dict, load_config, resolve, validate_selection
from stitchlab.errors import ConfigError, StitchLabError

log = logging.getLogger("stitchlab")

STAGES = ("gen-data", "train-anchors", "train-probes", "similarity", "select", "init-stitches",
          "finetune", "evaluate", "report", "oracle", "ablate-tau", "ablate-buckets")
EXTRA = ("run", "study")
METHOD_STAGES = ("select", "init-stitches", "finetune", "evaluate")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stitchlab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=STAGES + EXTRA, help="pipeline stage to run")
    ap.add_argument("--config", help="experiment config (JSON); defaults apply when omitted")
    ap.add_argument("--seed", type=int, help="override the top-level seed")
    ap.add_argument("--out", help="base output directory (overrides output_dir)")
    ap.add_argument("--method", choices=("klas", "snnet", "minkl"),
                    help="selection method for select/init-stitches/finetune/evaluate")
    ap.add_argument("--tau", type=float, help="relative threshold slack for klas")
    ap.add_argument("--buckets", type=int, help="number of FLOPs buckets for klas")
    ap.add_argument("--threads", type=int, help="BLAS threads (fallback: STITCHLAB_THREADS, else 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_threads(flag: int | None, env=None) -> int:
    env = os.environ if env is None else env
    if flag is not None:
        value, source = flag, "--threads"
    elif env.get("STITCHLAB_THREADS"):
        raw = env["STITCHLAB_THREADS"]
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}", "STITCHLAB_THREADS") from None
        source = "STITCHLAB_THREADS"
    else:
        return 1
    if value < 1:
        raise ConfigError(f"must be >= 1, got {value}", source)
    return value


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    cfg = resolve(cfg, args.seed)
    if args.tau is not None or args.buckets is not None:
        validate_selection(cfg.selection.method, cfg.selection.tau if args.tau is None else args.tau,
                           args.buckets)
    return cfg


def _run_stage(ctx: P.RunContext, args) -> None:
    cmd = args.command
    method = args.method or ctx.cfg.selection.method
    if cmd == "gen-data":
        P.stage_gen_data(ctx)
    elif cmd == "train-anchors":
        P.stage_train_anchors(ctx)
    elif cmd == "train-probes":
        P.stage_train_probes(ctx)
    elif cmd == "similarity":
        P.stage_similarity(ctx)
    elif cmd == "select":
        P.stage_select(ctx, method, args.tau, args.buckets)
    elif cmd == "init-stitches":
        P.stage_init_stitches(ctx, method)
    elif cmd == "finetune":
        P.stage_finetune(ctx, method)
    elif cmd == "evaluate":
        P.stage_evaluate(ctx, method)
    elif cmd == "oracle":
        P.stage_oracle(ctx)
    elif cmd == "report":
        checks = P.stage_report(ctx)
        for k, v in checks.items():
            print(f"{k}: {v}")
    elif cmd == "ablate-tau":
        print(P.run_ablation(ctx, "tau"))
    elif cmd == "ablate-buckets":
        print(P.run_ablation(ctx, "buckets"))
    elif cmd == "run":
        checks = P.run_all(ctx)
        for k, v in checks.items():
            print(f"{k}: {v}")


def _study(cfg: ExperimentConfig, args) -> None:
    """Full pipeline once per seed in ``seeds``; writes study.csv in the base output dir."""
    rows = []
    for seed in cfg.seeds:
        ctx = P.open_run(resolve(cfg, seed), args.out)
        log.info("seed %d -> %s", seed, ctx.root)
        rows.append(P.study_row(seed, P.run_all(ctx)))
    base = args.out or cfg.output_dir
    os.makedirs(base, exist_ok=True)
    path = os.path.join(base, "study.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in r.items()})
    n = len(rows)
    for key in ("spearman_ok", "snnet_ok", "minkl_ok", "cascade_ok"):
        print(f"{key}: {sum(r[key] for r in rows)}/{n}")
    print(path)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        threads = resolve_threads(args.threads)
        cfg = _load(args)
        with threadpool_limits(limits=threads):
            if args.command == "study":
                _study(cfg, args)
                return 0
            ctx = P.open_run(cfg, args.out)
            log.info("run directory %s", ctx.root)
            _run_stage(ctx, args)
            print(ctx.root)
    except StitchLabError as exc:
        print(f"stitchlab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"stitchlab {args.command}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
