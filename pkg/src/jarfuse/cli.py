"""Command-line entry point: training runs, cost sweeps, ablation grids and
gradient checks, all emitting deterministic CSV artifacts.

Config files are flat ``key = value`` text under ``[section]`` headers;
``#`` starts a comment.  Sections and keys are listed in ``SCHEMA`` below;
unknown names are rejected with the offending line number.  Any value can be
overridden from the command line with ``--set section.key=value``.

Exit codes: 0 success, 1 check failure, 2 usage or config error,
3 runtime divergence.
"""

from __future__ import annotations

import argparse
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint, costmodel, sampler, tasks
from .costmodel import SWEEP_AXES, ArchSpec
from .fusion import (
    COMBINATION_MODES,
    FUSION_KINDS,
    RESAMPLE_MODES,
    ConfigError,
    FusionConfig,
    FusionModel,
    ModalityFeatures,
    randomize_parameters,
)
from .tasks import TASK_KINDS, GenerationError, TaskSpec, TrainConfig, TrainingDivergedError
from .tensor import Tensor, grad_check, seeded_rng, set_backward_fault, sum_all

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

ABLATE_AXES = ("iterations", "tokens", "combination_mode", "resample_mode", "layers")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


SCHEMA: dict[str, dict[str, type]] = {
    "fusion": {
        "kind": str,
        "width": int,
        "heads": int,
        "latent_tokens": int,
        "iterations": int,
        "total_layers": int,
        "mlp_ratio": int,
        "combination_mode": str,
        "resample_mode": str,
        "use_positions": _parse_bool,
    },
    "task": {
        "kind": str,
        "grid": int,
        "channels": int,
        "vocab": int,
        "classes": int,
        "max_distractors": int,
        "text_len": int,
    },
    "train": {
        "steps": int,
        "batch_size": int,
        "learning_rate": float,
        "eval_every": int,
        "eval_samples": int,
        "train_pool": int,
        "seed": int,
        "ablate_image": _parse_bool,
    },
    "sampler": {
        "decay": float,
        "floor": float,
        "tasks": str,
    },
}

DEFAULTS: dict[str, dict] = {
    "fusion": {
        "kind": "jar",
        "width": 64,
        "heads": 4,
        "latent_tokens": 16,
        "iterations": 2,
        "total_layers": 4,
        "mlp_ratio": 4,
        "combination_mode": "weighted",
        "resample_mode": "latent",
        "use_positions": True,
    },
    "task": {
        "kind": "presence",
        "grid": 4,
        "channels": 8,
        "vocab": 6,
        "classes": 0,
        "max_distractors": 2,
        "text_len": 3,
    },
    "train": {
        "steps": 200,
        "batch_size": 8,
        "learning_rate": 1e-3,
        "eval_every": 50,
        "eval_samples": 128,
        "train_pool": 1024,
        "seed": 0,
        "ablate_image": False,
    },
    "sampler": {
        "decay": 0.99,
        "floor": 0.1,
        "tasks": "",
    },
}


@dataclass
class RunConfig:
    fusion_kind: str
    fusion: FusionConfig
    task: TaskSpec
    train: TrainConfig
    sampler_decay: float
    sampler_floor: float
    sampler_tasks: list[str]


def parse_config_text(text: str, source: str = "<config>") -> dict[str, dict]:
    """Parse and type-check the flat key=value grammar; errors carry line numbers."""
    values = {section: dict(defaults) for section, defaults in DEFAULTS.items()}
    seen: set[tuple[str, str]] = set()
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in SCHEMA:
                raise ConfigError(
                    f"{source}:{lineno}: unknown section [{current}] "
                    f"(valid: {sorted(SCHEMA)})"
                )
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if current is None:
            raise ConfigError(f"{source}:{lineno}: key before any [section] header")
        key, _, rawval = line.partition("=")
        key, rawval = key.strip(), rawval.strip()
        if key not in SCHEMA[current]:
            raise ConfigError(
                f"{source}:{lineno}: unknown key {current}.{key} "
                f"(valid: {sorted(SCHEMA[current])})"
            )
        if (current, key) in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {current}.{key}")
        seen.add((current, key))
        try:
            values[current][key] = SCHEMA[current][key](rawval)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {current}.{key}: {exc}")
    return values


def apply_overrides(values: dict[str, dict], overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, _, rawval = item.partition("=")
        section, _, key = dotted.strip().partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown override target {section}.{key}")
        try:
            values[section][key] = SCHEMA[section][key](rawval.strip())
        except ValueError as exc:
            raise ConfigError(f"bad override value for {section}.{key}: {exc}")


def build_run_config(values: dict[str, dict], seed_override: int | None) -> RunConfig:
    f = values["fusion"]
    fusion = FusionConfig(
        width=f["width"],
        heads=f["heads"],
        latent_tokens=f["latent_tokens"],
        iterations=f["iterations"],
        total_layers=f["total_layers"],
        mlp_ratio=f["mlp_ratio"],
        combination_mode=f["combination_mode"],
        resample_mode=f["resample_mode"],
        use_positions=f["use_positions"],
    )
    fusion.validate()
    kind = f["kind"]
    if kind not in FUSION_KINDS:
        raise ConfigError(f"fusion.kind must be one of {FUSION_KINDS}, got {kind!r}")
    if kind == "jar" and fusion.resample_mode == "spatial":
        kind = "spatial"
    t = values["task"]
    task = TaskSpec(
        kind=t["kind"],
        grid=t["grid"],
        channels=t["channels"],
        vocab=t["vocab"],
        classes=t["classes"],
        max_distractors=t["max_distractors"],
        text_len=t["text_len"],
    )
    tr = values["train"]
    train_cfg = TrainConfig(
        steps=tr["steps"],
        batch_size=tr["batch_size"],
        learning_rate=tr["learning_rate"],
        eval_every=tr["eval_every"],
        eval_samples=tr["eval_samples"],
        train_pool=tr["train_pool"],
        seed=seed_override if seed_override is not None else tr["seed"],
        ablate_image=tr["ablate_image"],
    )
    train_cfg.validate()
    s = values["sampler"]
    mix_tasks = [x.strip() for x in s["tasks"].split(",") if x.strip()]
    for name in mix_tasks:
        if name not in TASK_KINDS:
            raise ConfigError(f"sampler.tasks entry {name!r} is not one of {TASK_KINDS}")
    return RunConfig(
        fusion_kind=kind,
        fusion=fusion,
        task=task,
        train=train_cfg,
        sampler_decay=s["decay"],
        sampler_floor=s["floor"],
        sampler_tasks=mix_tasks,
    )


def load_run_config(path: str, overrides: list[str], seed_override: int | None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = parse_config_text(p.read_text(), source=str(path))
    apply_overrides(values, overrides)
    return build_run_config(values, seed_override)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args.set or [], args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if rc.sampler_tasks:
        specs = {
            kind: replace(rc.task, kind=kind, classes=0) for kind in rc.sampler_tasks
        }
        result = tasks.train_mixture(
            rc.fusion_kind, specs, rc.train, rc.fusion,
            decay=rc.sampler_decay, floor=rc.sampler_floor,
        )
        sampler.write_weight_log(out_dir / "sampler_weights.csv", result.weight_rows)
    else:
        result = tasks.train(rc.fusion_kind, rc.task, rc.train, rc.fusion)
    tasks.write_train_log(out_dir / "train_log.csv", result.rows)
    checkpoint.save_params(out_dir / "checkpoint.bin", result.model.store)
    print(
        f"trained {rc.fusion_kind} for {rc.train.steps} steps: "
        f"final accuracy {result.final_accuracy:.4f}, "
        f"cumulative forward FLOPs {result.rows[-1].cum_flops}"
    )
    print(f"artifacts in {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _parse_int_grid(raw: str) -> list[int]:
    items = [x.strip() for x in raw.split(",") if x.strip()]
    if not items:
        raise ConfigError("grid must list at least one value")
    try:
        return [int(x) for x in items]
    except ValueError as exc:
        raise ConfigError(f"grid values must be integers: {exc}")


def cmd_sweep(args) -> int:
    base = ArchSpec(
        width=args.width,
        heads=args.heads,
        total_layers=args.depth,
        text_len=args.text_len,
        grid_h=args.grid_h,
        grid_w=args.grid_w,
        channels=args.channels,
        latent_tokens=args.latents,
        iterations=args.iterations,
        mlp_ratio=args.mlp_ratio,
    )
    kinds = tuple(x.strip() for x in args.kinds.split(",") if x.strip())
    rows = costmodel.sweep(args.axis, _parse_int_grid(args.grid), base, kinds)
    text = costmodel.sweep_csv(rows)
    if args.out:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        target = out_dir / args.out
        with open(target, "w", newline="\n") as fh:
            fh.write(text)
        print(f"wrote {len(rows)} rows to {target}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def _ablate_cell(payload: dict) -> dict:
    """Train one ablation cell (runs in a worker process)."""
    rc_values = payload["values"]
    axis, value = payload["axis"], payload["value"]
    rc = build_run_config(rc_values, payload["seed"])
    fusion = rc.fusion
    kind = rc.fusion_kind
    if axis == "iterations":
        fusion = replace(fusion, iterations=int(value))
    elif axis == "tokens":
        fusion = replace(fusion, latent_tokens=int(value))
    elif axis == "layers":
        fusion = replace(fusion, total_layers=int(value))
    elif axis == "combination_mode":
        fusion = replace(fusion, combination_mode=str(value))
    elif axis == "resample_mode":
        fusion = replace(fusion, resample_mode=str(value))
        kind = "spatial" if value == "spatial" else "jar"
    fusion.validate()
    spec = ArchSpec(
        width=fusion.width,
        heads=fusion.heads,
        total_layers=fusion.total_layers,
        text_len=rc.task.text_len,
        grid_h=rc.task.grid,
        grid_w=rc.task.grid,
        channels=rc.task.channels,
        latent_tokens=fusion.latent_tokens,
        iterations=fusion.iterations,
        fusion_kind=kind,
        mlp_ratio=fusion.mlp_ratio,
    )
    flops = costmodel.flops_total(spec).flops
    result = tasks.train(kind, rc.task, rc.train, fusion)
    return {"value": value, "flops": flops, "eval_acc": result.final_accuracy}


def cmd_ablate(args) -> int:
    if args.axis in ("iterations", "tokens", "layers"):
        grid: list = _parse_int_grid(args.grid)
    else:
        grid = [x.strip() for x in args.grid.split(",") if x.strip()]
        valid = COMBINATION_MODES if args.axis == "combination_mode" else RESAMPLE_MODES
        if not grid:
            raise ConfigError("grid must list at least one value")
        for v in grid:
            if v not in valid:
                raise ConfigError(f"grid value {v!r} invalid for {args.axis}; valid: {valid}")
    if len(grid) > args.max_cells:
        raise ConfigError(
            f"grid holds {len(grid)} cells, above the --max-cells bound {args.max_cells}"
        )
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise ConfigError(f"config file not found: {args.config}")
        values = parse_config_text(p.read_text(), source=str(p))
    else:
        values = {section: dict(defaults) for section, defaults in DEFAULTS.items()}
    apply_overrides(values, args.set or [])
    values["train"]["steps"] = args.steps
    payloads = [
        {"values": values, "axis": args.axis, "value": v, "seed": args.seed}
        for v in grid
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_ablate_cell, payloads))
    else:
        results = [_ablate_cell(p) for p in payloads]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "ablate.csv"
    with open(target, "w", newline="\n") as fh:
        fh.write("axis,value,flops,eval_acc\n")
        for r in results:  # payload order == grid order
            fh.write(f"{args.axis},{r['value']},{r['flops']},{r['eval_acc']!r}\n")
    print(f"wrote {len(results)} rows to {target}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    if args.config:
        rc = load_run_config(args.config, args.set or [], args.seed)
        fusion_cfg = rc.fusion
        grid, channels, text_len = rc.task.grid, rc.task.channels, rc.task.text_len
        seed = rc.train.seed
    else:
        fusion_cfg = FusionConfig(
            width=16, heads=2, latent_tokens=8, iterations=2, total_layers=4,
            mlp_ratio=2,
        )
        grid, channels, text_len = 4, 8, 6
        seed = args.seed if args.seed is not None else 0
    image_tokens = grid * grid
    if text_len > 32 or image_tokens > 32 or fusion_cfg.latent_tokens > 32:
        raise ConfigError(
            f"gradcheck is restricted to token counts <= 32 "
            f"(text {text_len}, image {image_tokens}, latents {fusion_cfg.latent_tokens})"
        )
    if args.corrupt_backward:
        set_backward_fault(args.corrupt_backward)
        print(f"test hook: corrupt backward active on op {args.corrupt_backward!r}")
    try:
        rng = seeded_rng(seed)
        model = FusionModel("jar", fusion_cfg, channels, image_tokens, rng)
        randomize_parameters(model, rng)
        features = ModalityFeatures(
            text=Tensor(rng.normal(0.0, 1.0, (text_len, fusion_cfg.width))),
            image=Tensor(rng.normal(0.0, 1.0, (grid, grid, channels))),
        )

        def loss():
            out = model.forward(features).features
            return sum_all(out * out)

        started = time.perf_counter()
        report = grad_check(loss, model.store, h=args.step, tol=args.tol)
        elapsed = time.perf_counter() - started
    finally:
        set_backward_fault(None)
    for entry in sorted(report.entries, key=lambda e: e.name):
        marker = "ok" if entry.max_rel_err <= report.tol else "FAIL"
        print(f"{entry.name:40s} max rel err {entry.max_rel_err:.3e}  {marker}")
    print(
        f"checked {len(report.entries)} parameter groups "
        f"({model.store.value_count()} values) in {elapsed:.1f}s; "
        f"worst {report.worst.name} at {report.worst.max_rel_err:.3e}"
    )
    if not report.passed:
        bad = report.failures()[0]
        print(f"FAIL: gradient mismatch in {bad.name} (rel err {bad.max_rel_err:.3e})")
        return EXIT_CHECK_FAILED
    print("PASS: all gradients match finite differences")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master RNG seed (overrides config)")
    p.add_argument("--out-dir", default="runs", help="directory for all written artifacts")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker bound")
    p.add_argument("--config", default=None, help="path to a key=value config file")
    p.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jarfuse",
        description="Latent-resampling image-language fusion: training, cost sweeps, "
        "ablations and gradient checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a fusion model on a synthetic task")
    _add_common(p_train)
    p_train.set_defaults(func=cmd_train, needs_config=True)

    p_sweep = sub.add_parser("sweep", help="emit cost-model CSV along one axis")
    _add_common(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--grid", required=True, help="comma-separated integer grid")
    p_sweep.add_argument(
        "--kinds", default=",".join(FUSION_KINDS), help="comma-separated fusion kinds"
    )
    p_sweep.add_argument("--out", default=None, help="CSV filename inside --out-dir (default: stdout)")
    p_sweep.add_argument("--width", type=int, default=768)
    p_sweep.add_argument("--heads", type=int, default=12)
    p_sweep.add_argument("--depth", type=int, default=32)
    p_sweep.add_argument("--text-len", type=int, default=16)
    p_sweep.add_argument("--grid-h", type=int, default=14)
    p_sweep.add_argument("--grid-w", type=int, default=14)
    p_sweep.add_argument("--channels", type=int, default=768)
    p_sweep.add_argument("--latents", type=int, default=64)
    p_sweep.add_argument("--iterations", type=int, default=4)
    p_sweep.add_argument("--mlp-ratio", type=int, default=4)
    p_sweep.set_defaults(func=cmd_sweep, needs_config=False)

    p_ablate = sub.add_parser("ablate", help="train a small grid of config variants")
    _add_common(p_ablate)
    p_ablate.add_argument("--axis", required=True, choices=ABLATE_AXES)
    p_ablate.add_argument("--grid", required=True, help="comma-separated grid values")
    p_ablate.add_argument("--steps", type=int, default=150, help="training budget per cell")
    p_ablate.add_argument("--max-cells", type=int, default=16)
    p_ablate.set_defaults(func=cmd_ablate, needs_config=False)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    _add_common(p_gc)
    p_gc.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance")
    p_gc.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p_gc.add_argument(
        "--corrupt-backward",
        choices=("matmul", "softmax", "layer_norm", "gelu"),
        default=None,
        help="test hook: inject a backward fault into one op",
    )
    p_gc.set_defaults(func=cmd_gradcheck, needs_config=False)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "needs_config", False) and not args.config:
        print("error: train requires --config PATH", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, GenerationError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
