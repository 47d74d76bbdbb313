"""Plain-text experiment configuration.

Format: `key = value` lines grouped under `[section]` headers (a line
`train.lam = 0.5` outside any section means the same as `lam = 0.5`
under `[train]`).  Blank lines and lines starting with `#` or `;` are
ignored.  Every key must appear in the schema; unknown keys are hard
errors carrying the offending line number.  All keys have defaults, so
an empty file is a valid experiment (the bundled desk preset).

Grid sweeps add `[grid]` entries of the form `vary.train.seed = 0,1,2`,
one comma-separated value list per swept key; cells are the Cartesian
product.
"""

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import SynthSpec, similarity_from_pairs
from .errors import ConfigError
from .models import ModelSpec
from .train import TrainConfig

GRID_PREFIX = "grid.vary."


def _parse_bool(raw):
    low = raw.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_int(raw):
    return int(raw)


def _parse_float(raw):
    return float(raw)


def _parse_str(raw):
    return raw


def _parse_intlist(raw):
    if not raw.strip():
        raise ValueError("expected at least one integer")
    return tuple(int(p.strip()) for p in raw.split(","))


def _parse_dims(raw):
    parts = raw.lower().split("x")
    if len(parts) < 1 or any(not p.strip() for p in parts):
        raise ValueError(f"expected dims like 1x16x16, got {raw!r}")
    return tuple(int(p.strip()) for p in parts)


def _parse_simpairs(raw):
    """Triples i:j:s separated by commas; empty means no overrides."""
    pairs = {}
    if not raw.strip():
        return pairs
    for part in raw.split(","):
        bits = part.strip().split(":")
        if len(bits) != 3:
            raise ValueError(f"expected i:j:similarity, got {part.strip()!r}")
        i, j, s = int(bits[0]), int(bits[1]), float(bits[2])
        pairs[(i, j)] = s
    return pairs


def _opt(parser):
    def inner(raw):
        return None if raw.lower() == "none" else parser(raw)

    return inner


def _choice(*values):
    def inner(raw):
        if raw not in values:
            raise ValueError(f"expected one of {values}, got {raw!r}")
        return raw

    return inner


# key -> (parser, default raw string)
SCHEMA = {
    "data.n_classes": (_parse_int, "10"),
    "data.samples_per_class": (_parse_int, "200"),
    "data.input_shape": (_parse_dims, "1x16x16"),
    "data.similarity_pairs": (_parse_simpairs, "0:1:0.9,2:3:0.7,4:5:0.5,6:7:0.3"),
    "data.similarity_background": (_parse_float, "0.1"),
    "data.noise_sigma": (_parse_float, "0.6"),
    "data.base_distance": (_parse_float, "6.0"),
    "data.seed": (_parse_int, "42"),
    "data.eval_fraction": (_parse_float, "0.25"),
    "data.split_seed": (_parse_int, "3"),
    "teacher.arch": (_choice("spatial", "token-based"), "token-based"),
    "teacher.n_stages": (_parse_int, "4"),
    "teacher.widths": (_parse_intlist, "64,64,64,64"),
    "teacher.patch_size": (_parse_int, "4"),
    "teacher.checkpoint": (_opt(_parse_str), "none"),
    "teacher.base_lr": (_parse_float, "2e-3"),
    "teacher.epochs": (_parse_int, "60"),
    "teacher.batch_size": (_parse_int, "128"),
    "teacher.optimizer": (_choice("auto", "sgd", "adamw"), "adamw"),
    "teacher.weight_decay": (_parse_float, "3e-3"),
    "teacher.momentum": (_parse_float, "0.9"),
    "teacher.ce_mean": (_parse_bool, "true"),
    "teacher.seed": (_parse_int, "7"),
    "student.arch": (_choice("spatial", "token-based"), "spatial"),
    "student.n_stages": (_parse_int, "4"),
    "student.widths": (_parse_intlist, "6,12,18,24"),
    "student.patch_size": (_parse_int, "4"),
    "train.method": (
        _choice("ce_only", "vanilla_kd", "dfra_logit_only", "mldr_full", "custom"),
        "mldr_full",
    ),
    "train.optimizer": (_choice("auto", "sgd", "adamw"), "auto"),
    "train.base_lr": (_parse_float, "0.05"),
    "train.epochs": (_parse_int, "40"),
    "train.batch_size": (_parse_int, "128"),
    "train.seed": (_parse_int, "0"),
    "train.temperature": (_parse_float, "4.0"),
    "train.lam": (_parse_float, "1.0"),
    "train.kd_lam": (_opt(_parse_float), "0.25"),
    "train.mu": (_parse_float, "1.0"),
    "train.use_cwrd": (_parse_bool, "true"),
    "train.use_swrd": (_parse_bool, "true"),
    "train.kl_direction": (_choice("student_first", "teacher_first"), "student_first"),
    "train.sample_scale": (_choice("categories", "batch"), "categories"),
    "train.t2_scale": (_parse_bool, "false"),
    "train.kd_t2_scale": (_parse_bool, "true"),
    "train.ce_mean": (_parse_bool, "true"),
    "train.n_stages_used": (_parse_int, "4"),
    "train.d_tok": (_parse_int, "16"),
    "train.h_gate": (_opt(_parse_int), "none"),
    "train.logit_kind": (_opt(_choice("off", "kd", "dfra")), "none"),
    "train.feature_kind": (_opt(_choice("off", "mean", "msdf")), "none"),
    "train.momentum": (_parse_float, "0.9"),
    "train.weight_decay": (_parse_float, "0.0"),
    "train.grad_clip": (_parse_float, "0.0"),
    "train.eval_batch_size": (_parse_int, "256"),
    "run.out": (_opt(_parse_str), "none"),
}


def parse_config(text, source="<config>"):
    """Parse config text into {key: (raw value, line number)}; syntax only."""
    entries = {}
    section = ""
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"{source}:{lineno}: empty section header")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw_line.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: missing key before '='")
        full = f"{section}.{key}" if section and "." not in key else key
        if full in entries:
            raise ConfigError(
                f"{source}:{lineno}: duplicate key {full!r} (first set on line {entries[full][1]})"
            )
        entries[full] = (value, lineno)
    return entries


def load_config_file(path):
    with open(path) as f:
        return parse_config(f.read(), source=str(path))


def apply_overrides(entries, overrides, source="--override"):
    """Apply key=value override strings on top of parsed entries."""
    out = dict(entries)
    for i, ov in enumerate(overrides):
        if "=" not in ov:
            raise ConfigError(f"{source}: expected key=value, got {ov!r}")
        key, _, value = ov.partition("=")
        out[key.strip()] = (value.strip(), 0)
    return out


def _typed(entries, source="<config>"):
    """Validate keys against the schema and parse values; returns {key: value}."""
    values = {}
    grid = {}
    for key, (raw, lineno) in entries.items():
        target = key
        is_grid = key.startswith(GRID_PREFIX)
        if is_grid:
            target = key[len(GRID_PREFIX) :]
        if target not in SCHEMA:
            where = f"{source}:{lineno}: " if lineno else f"{source}: "
            raise ConfigError(f"{where}unknown key {key!r}")
        parser, _ = SCHEMA[target]
        try:
            if is_grid:
                parts = [p.strip() for p in raw.split(",")] if raw.strip() else []
                if not parts:
                    raise ValueError("grid axis needs at least one value")
                # lists of lists are ambiguous in comma syntax; sweep scalars only
                if parser in (_parse_intlist, _parse_simpairs):
                    raise ValueError(f"key {target!r} cannot be swept")
                grid[target] = [parser(p) for p in parts]
            else:
                values[key] = parser(raw)
        except ValueError as e:
            where = f"{source}:{lineno}: " if lineno else f"{source}: "
            raise ConfigError(f"{where}bad value for {key!r}: {e}") from None
    for key, (parser, default) in SCHEMA.items():
        if key not in values:
            values[key] = parser(default)
    return values, grid


@dataclass
class ExperimentConfig:
    """Fully resolved description of one run: data, models, training, output."""

    synth: SynthSpec
    eval_fraction: float
    split_seed: int
    teacher_spec: ModelSpec
    teacher_train: TrainConfig
    teacher_checkpoint: Optional[str]
    student_spec: ModelSpec
    train: TrainConfig
    out: Optional[str]
    raw: dict = field(default_factory=dict, repr=False)


def resolve(entries, source="<config>"):
    """Turn parsed entries into an ExperimentConfig (grid axes must be absent)."""
    values, grid = _typed(entries, source)
    if grid:
        raise ConfigError(f"{source}: grid axes present; use the grid runner for {sorted(grid)}")
    return _resolve_values(values)


def resolve_grid(entries, source="<config>"):
    """Returns (base values dict, {key: [values]}) for sweeping."""
    values, grid = _typed(entries, source)
    return values, grid


def _resolve_values(v):
    n = v["data.n_classes"]
    sim = similarity_from_pairs(n, v["data.similarity_pairs"], v["data.similarity_background"])
    synth = SynthSpec(
        n_classes=n,
        samples_per_class=v["data.samples_per_class"],
        input_shape=v["data.input_shape"],
        class_similarity=sim,
        noise_sigma=v["data.noise_sigma"],
        seed=v["data.seed"],
        base_distance=v["data.base_distance"],
    )
    teacher_spec = ModelSpec(
        arch_kind=v["teacher.arch"],
        n_stages=v["teacher.n_stages"],
        widths=v["teacher.widths"],
        n_classes=n,
        input_shape=v["data.input_shape"],
        patch_size=v["teacher.patch_size"],
    )
    teacher_train = TrainConfig(
        base_lr=v["teacher.base_lr"],
        epochs=v["teacher.epochs"],
        batch_size=v["teacher.batch_size"],
        seed=v["teacher.seed"],
        method="ce_only",
        optimizer=v["teacher.optimizer"],
        ce_mean=v["teacher.ce_mean"],
        momentum=v["teacher.momentum"],
        weight_decay=v["teacher.weight_decay"],
    )
    student_spec = ModelSpec(
        arch_kind=v["student.arch"],
        n_stages=v["student.n_stages"],
        widths=v["student.widths"],
        n_classes=n,
        input_shape=v["data.input_shape"],
        patch_size=v["student.patch_size"],
    )
    train_cfg = TrainConfig(
        base_lr=v["train.base_lr"],
        epochs=v["train.epochs"],
        batch_size=v["train.batch_size"],
        seed=v["train.seed"],
        method=v["train.method"],
        optimizer=v["train.optimizer"],
        temperature=v["train.temperature"],
        lam=v["train.lam"],
        kd_lam=v["train.kd_lam"],
        mu=v["train.mu"],
        use_cwrd=v["train.use_cwrd"],
        use_swrd=v["train.use_swrd"],
        kl_direction=v["train.kl_direction"],
        sample_scale=v["train.sample_scale"],
        t2_scale=v["train.t2_scale"],
        kd_t2_scale=v["train.kd_t2_scale"],
        ce_mean=v["train.ce_mean"],
        n_stages_used=v["train.n_stages_used"],
        d_tok=v["train.d_tok"],
        h_gate=v["train.h_gate"],
        logit_kind=v["train.logit_kind"],
        feature_kind=v["train.feature_kind"],
        momentum=v["train.momentum"],
        weight_decay=v["train.weight_decay"],
        grad_clip=v["train.grad_clip"],
        eval_batch_size=v["train.eval_batch_size"],
    )
    return ExperimentConfig(
        synth=synth,
        eval_fraction=v["data.eval_fraction"],
        split_seed=v["data.split_seed"],
        teacher_spec=teacher_spec,
        teacher_train=teacher_train,
        teacher_checkpoint=v["teacher.checkpoint"],
        student_spec=student_spec,
        train=train_cfg,
        out=v["run.out"],
        raw=dict(v),
    )


def _format_value(key, value):
    parser, _ = SCHEMA[key]
    if value is None:
        return "none"
    if parser is _parse_bool:
        return "true" if value else "false"
    if parser is _parse_intlist:
        return ",".join(str(x) for x in value)
    if parser is _parse_dims:
        return "x".join(str(x) for x in value)
    if parser is _parse_simpairs:
        return ",".join(f"{i}:{j}:{repr(s)}" for (i, j), s in sorted(value.items()))
    if parser is _parse_float:
        return repr(float(value))
    return str(value)


def dump_resolved(values):
    """Render a fully resolved value map back to parseable config text."""
    lines = []
    last_section = None
    for key in sorted(values):
        section, _, name = key.partition(".")
        if section != last_section:
            if last_section is not None:
                lines.append("")
            lines.append(f"[{section}]")
            last_section = section
        lines.append(f"{name} = {_format_value(key, values[key])}")
    return "\n".join(lines) + "\n"


def grid_cells(base_values, grid_axes):
    """Enumerate (cell_name, values_dict) over the Cartesian product."""
    if not grid_axes:
        yield "cell", dict(base_values)
        return
    keys = sorted(grid_axes)
    for combo in itertools.product(*(grid_axes[k] for k in keys)):
        values = dict(base_values)
        parts = []
        for k, val in zip(keys, combo):
            values[k] = val
            parts.append(f"{k.split('.')[-1]}={_format_value(k, val)}")
        yield "_".join(parts), values
