"""Ablation grids: Cartesian sweeps of config keys over isolated cells.

Each cell executes as an independent run in its own output directory
(optionally in separate processes); a failed cell is recorded and does
not abort its siblings.  The aggregate table is recomputed purely from
the per-cell metrics CSVs on disk, grouping over every swept key except
the seed and reporting mean +/- sample std of final accuracy.
"""

import csv
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context

import numpy as np

from .config import _format_value, _resolve_values, grid_cells, resolve_grid
from .runner import make_splits, pretrain_teacher, run_experiment

SEED_KEY = "train.seed"


def _cell_worker(job):
    name, values, out_dir = job
    try:
        run_experiment(values, out_dir)
        return name, "ok", ""
    except Exception as e:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "error.txt"), "w") as f:
            f.write(traceback.format_exc())
        return name, "failed", f"{type(e).__name__}: {e}"


def _final_acc_from_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path}: no epochs recorded")
    return float(rows[-1]["eval_acc"])


def _share_teacher(base_values, axes, cells, out_root):
    """Pretrain one teacher for the whole grid when every cell can share it.

    Sharing is valid only when no swept key changes the data or the
    teacher; cells then get the frozen checkpoint path injected.
    """
    if any(k.startswith(("data.", "teacher.")) for k in axes):
        return cells
    if base_values["teacher.checkpoint"] is not None:
        return cells
    if not any(_resolve_values(v).train.needs_teacher for _, v in cells):
        return cells
    cfg = _resolve_values(base_values)
    train_ds, eval_ds = make_splits(cfg)
    os.makedirs(out_root, exist_ok=True)
    ckpt = os.path.join(out_root, "teacher.ckpt")
    pretrain_teacher(cfg, train_ds, eval_ds, ckpt)
    shared = []
    for name, values in cells:
        values = dict(values)
        values["teacher.checkpoint"] = ckpt
        shared.append((name, values))
    return shared


def run_grid(entries, out_root, parallel=1, source="<config>"):
    """Execute the sweep; returns (aggregate rows, cell statuses).

    Artifacts: cells/<name>/ per cell, grid.csv at the root.
    """
    base_values, axes = resolve_grid(entries, source)
    cells = list(grid_cells(base_values, axes))
    cells = _share_teacher(base_values, axes, cells, out_root)
    jobs = [
        (name, values, os.path.join(out_root, "cells", name)) for name, values in cells
    ]
    if parallel > 1:
        with ProcessPoolExecutor(
            max_workers=parallel, mp_context=get_context("spawn")
        ) as pool:
            statuses = list(pool.map(_cell_worker, jobs))
    else:
        statuses = [_cell_worker(job) for job in jobs]
    status_by_name = {name: (st, err) for name, st, err in statuses}

    group_keys = sorted(k for k in axes if k != SEED_KEY)
    groups = {}
    for name, values in cells:
        gid = tuple((k, _format_value(k, values[k])) for k in group_keys)
        groups.setdefault(gid, []).append(name)

    rows = []
    for gid in sorted(groups):
        names = groups[gid]
        accs = []
        all_ok = True
        for name in names:
            st, _ = status_by_name[name]
            if st != "ok":
                all_ok = False
                continue
            accs.append(_final_acc_from_csv(os.path.join(out_root, "cells", name, "metrics.csv")))
        row = dict(gid)
        row["n_runs"] = len(names)
        row["n_ok"] = len(accs)
        row["mean_final_acc"] = float(np.mean(accs)) if accs else ""
        row["std_final_acc"] = (
            float(np.std(accs, ddof=1)) if len(accs) > 1 else (0.0 if accs else "")
        )
        row["status"] = "ok" if all_ok and accs else "failed"
        rows.append(row)

    columns = group_keys + ["n_runs", "n_ok", "mean_final_acc", "std_final_acc", "status"]
    os.makedirs(out_root, exist_ok=True)
    with open(os.path.join(out_root, "grid.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row.get(c, "") for c in columns])
    return rows, statuses
