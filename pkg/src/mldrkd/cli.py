"""Command-line front end.

Subcommands:
  run               one experiment from a config file
  grid              Cartesian sweep over grid.vary.* axes
  pred-dist         averaged per-category prediction distribution
  gen-data          write the configured synthetic dataset to a file
  pretrain-teacher  train and save the teacher only
  gradcheck         finite-difference verification of every op
  bench             compare compiled vs pure-python kernel backends

Output locations resolve as: explicit --out, else the config's run.out,
else a name derived from the config file under the output root.  The
root is MLDRKD_OUT_ROOT when set, ./runs otherwise.
"""

import argparse
import csv
import os
import sys

from .config import apply_overrides, load_config_file, resolve_grid
from .errors import TrainingAborted

OUT_ROOT_ENV = "MLDRKD_OUT_ROOT"


def _out_root():
    return os.environ.get(OUT_ROOT_ENV) or "runs"


def _default_out(config_path, suffix=""):
    stem = os.path.splitext(os.path.basename(config_path))[0]
    return os.path.join(_out_root(), stem + suffix)


def _load_values(args, seed_key):
    """Parse + override the config; returns (values, grid_axes, source)."""
    entries = load_config_file(args.config)
    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"{seed_key}={args.seed}")
    if overrides:
        entries = apply_overrides(entries, overrides)
    values, grid = resolve_grid(entries, args.config)
    return values, grid


def _require_single(values, grid):
    if grid:
        raise SystemExit(
            f"error: grid axes {sorted(grid)} present; use the grid subcommand"
        )
    return values


def _cmd_run(args):
    from .runner import run_experiment

    values, grid = _load_values(args, "train.seed")
    _require_single(values, grid)
    out_dir = args.out or values.get("run.out") or _default_out(args.config)
    result = run_experiment(values, out_dir)
    t = result["teacher_acc"]
    t_txt = "" if t is None else f"  teacher_acc={t:.4f}"
    print(f"out={out_dir}")
    print(
        f"final_acc={result['final_acc']:.4f}  best_acc={result['best_acc']:.4f}{t_txt}"
    )
    return 0


def _cmd_grid(args):
    from .grid import run_grid

    entries = load_config_file(args.config)
    if args.override:
        entries = apply_overrides(entries, args.override)
    values, grid = resolve_grid(entries, args.config)
    out_root = args.out or values.get("run.out") or _default_out(args.config, "-grid")
    rows, statuses = run_grid(entries, out_root, parallel=args.parallel, source=args.config)
    failed = [name for name, st, _ in statuses if st != "ok"]
    print(f"out={out_root}  cells={len(statuses)}  failed={len(failed)}")
    for row in rows:
        keys = [f"{k}={v}" for k, v in row.items() if k not in (
            "n_runs", "n_ok", "mean_final_acc", "std_final_acc", "status")]
        mean = row["mean_final_acc"]
        mean_txt = f"{mean:.4f}" if mean != "" else "-"
        std = row["std_final_acc"]
        std_txt = f"{std:.4f}" if std != "" else "-"
        print(f"  {' '.join(keys) or '(single cell)'}: mean={mean_txt} std={std_txt} [{row['status']}]")
    if failed:
        print(f"error: {len(failed)} cell(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _cmd_pred_dist(args):
    from .runner import pred_dist_from_checkpoint

    values, grid = _load_values(args, "train.seed")
    _require_single(values, grid)
    dist, _ = pred_dist_from_checkpoint(values, args.checkpoint, args.category)
    out_path = args.out or _default_out(args.config, f"-pred{args.category}.csv")
    parent = os.path.dirname(out_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class_index", "mean_probability"])
        for i, p in enumerate(dist):
            writer.writerow([i, repr(float(p))])
    print(f"out={out_path}")
    for i, p in enumerate(dist):
        print(f"  class {i}: {p:.6f}")
    return 0


def _cmd_gen_data(args):
    from .config import _resolve_values
    from .data import generate, save

    values, grid = _load_values(args, "data.seed")
    _require_single(values, grid)
    cfg = _resolve_values(values)
    ds = generate(cfg.synth)
    out_path = args.out or _default_out(args.config, ".mlds")
    parent = os.path.dirname(out_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    save(out_path, ds)
    print(f"out={out_path}  samples={len(ds.labels)}  classes={ds.n_classes}")
    return 0


def _cmd_pretrain_teacher(args):
    from .config import _resolve_values
    from .runner import make_splits, pretrain_teacher

    values, grid = _load_values(args, "teacher.seed")
    _require_single(values, grid)
    cfg = _resolve_values(values)
    train_ds, eval_ds = make_splits(cfg)
    out_path = args.out or _default_out(args.config, "-teacher.ckpt")
    parent = os.path.dirname(out_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    _, record = pretrain_teacher(cfg, train_ds, eval_ds, out_path)
    print(f"out={out_path}")
    print(f"final_acc={record.final_acc:.4f}  best_acc={record.best_acc:.4f}")
    return 0


def _cmd_gradcheck(args):
    from .checks import run_checks

    reports = run_checks(seed=args.seed if args.seed is not None else 0)
    worst = 0.0
    failed = 0
    for name, rep in reports:
        status = "ok" if rep.ok else "FAIL"
        worst = max(worst, rep.max_rel_diff)
        failed += 0 if rep.ok else 1
        print(
            f"{name:28s} {status:4s} elements={rep.n_elements:5d} "
            f"max_rel_err={rep.max_rel_diff:.3e}"
        )
        if not rep.ok:
            for m in rep.mismatches[:5]:
                print(f"    {m}")
    print(f"worst max_rel_err={worst:.3e} over {len(reports)} cases")
    return 1 if failed else 0


def _cmd_bench(args):
    from .bench import run_bench

    run_bench(repeats=args.repeats)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="mldrkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed_help="override train.seed"):
        if config:
            p.add_argument("--config", required=True, help="config file path")
        p.add_argument("--seed", type=int, default=None, help=seed_help)
        p.add_argument("--out", default=None, help="output path (overrides run.out)")
        if config:
            p.add_argument(
                "--override",
                action="append",
                metavar="KEY=VALUE",
                help="config override, repeatable",
            )

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("grid", help="run a Cartesian sweep")
    common(p)
    p.add_argument("--parallel", type=int, default=1, help="worker processes")
    p.set_defaults(fn=_cmd_grid)

    p = sub.add_parser("pred-dist", help="averaged prediction distribution")
    common(p)
    p.add_argument("--checkpoint", required=True, help="student checkpoint path")
    p.add_argument("--category", required=True, type=int, help="class index")
    p.set_defaults(fn=_cmd_pred_dist)

    p = sub.add_parser("gen-data", help="write the synthetic dataset")
    common(p, seed_help="override data.seed")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("pretrain-teacher", help="train and save the teacher")
    common(p, seed_help="override teacher.seed")
    p.set_defaults(fn=_cmd_pretrain_teacher)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=None, help="battery seed")
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("bench", help="compare kernel backends")
    p.add_argument("--repeats", type=int, default=5, help="timing repeats")
    p.set_defaults(fn=_cmd_bench)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, TrainingAborted, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(main())
