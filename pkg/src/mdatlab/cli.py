"""Command-line front door: ``mdatlab {train,sweep,gradcheck,export}``.

Exit codes: 0 success, 1 configuration error, 2 numerical divergence,
3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from pathlib import Path

from .datasets import GlyphConfig, MoonsConfig, SHIFT_KINDS, TaskData, gen_glyphs, gen_moons
from .gradcheck import gradcheck_suite
from .metrics import (
    boundary_grid,
    export_embeddings,
    export_reconstructions,
    write_boundary_csv,
    write_embeddings_csv,
)
from .nn import ModelBundle, load_checkpoint, save_checkpoint
from .trainer import (
    METHODS,
    ConfigError,
    DivergenceError,
    TrainConfig,
    run_training,
    write_logs,
)

EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_GRADCHECK = 1, 2, 3
TASKS = ("moons", "glyphs")
EXPORTS = ("boundary", "embeddings", "reconstructions", "checkpoint")
OUT_ENV = "MDAT_LAB_OUT"


@dataclass(frozen=True)
class TaskSettings:
    """Data-generation knobs; ``None`` means the task's own default."""

    task: str = "moons"
    n_per_domain: int | None = None
    noise: float = 0.1
    rotation: float = 30.0
    shift: str = "inversion"
    shift_strength: float = 1.0
    n_classes: int = 4
    data_seed: int | None = None


# Per-task training defaults applied before the config file and flags.
TASK_DEFAULTS = {
    "moons": {"margin": 1.0},
    "glyphs": {"margin": 1.0},
}

TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
TASK_KEYS = {f.name: f.type for f in fields(TaskSettings)}


def _convert(key: str, raw: str, kind) -> object:
    kind = str(kind)
    if "tuple" in kind:
        return tuple(int(v) for v in raw.replace("x", ",").split(",") if v.strip())
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def _parse_lines(text: str, source: str) -> dict[str, tuple[str, int]]:
    entries: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in TRAIN_KEYS and key not in TASK_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        entries[key] = (value, lineno)
    return entries


def parse_config(path: str | Path | None = None, overrides: dict[str, object] | None = None,
                 allow_degenerate_margin: bool = False) -> tuple[TrainConfig, TaskSettings]:
    """Read ``key = value`` lines, then apply ``overrides`` (flags win).

    Defaults: alpha 0.02, lr 0.01, momentum 0.9, epochs 100, batch 50, seed 1,
    margin from the task defaults.
    """
    source = str(path) if path is not None else "<flags>"
    entries = _parse_lines(Path(path).read_text(), source) if path is not None else {}
    values: dict[str, object] = {}
    for key, (raw, lineno) in entries.items():
        kind = TRAIN_KEYS.get(key, TASK_KEYS.get(key))
        try:
            values[key] = _convert(key, raw, kind)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value {raw!r} for {key}") from None
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in TRAIN_KEYS and key not in TASK_KEYS:
            raise ConfigError(f"unknown setting {key!r}")
        values[key] = value

    task_values = {k: v for k, v in values.items() if k in TASK_KEYS}
    settings = TaskSettings(**task_values)
    if settings.task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {settings.task!r}")
    if settings.shift not in SHIFT_KINDS:
        raise ConfigError(f"shift must be one of {SHIFT_KINDS}, got {settings.shift!r}")
    train_values = dict(TASK_DEFAULTS[settings.task])
    train_values.update({k: v for k, v in values.items() if k in TRAIN_KEYS})
    cfg = TrainConfig(**train_values)
    try:
        cfg.validate(allow_degenerate_margin)
    except ConfigError as exc:
        where = entries.get(_offending_key(str(exc)), (None, None))[1]
        raise ConfigError(f"{source}:{where}: {exc}" if where else f"{source}: {exc}") from None
    return cfg, settings


def _offending_key(message: str) -> str:
    for key in TRAIN_KEYS:
        if message.startswith(key):
            return key
    return ""


def make_task(settings: TaskSettings, seed: int) -> TaskData:
    data_seed = seed if settings.data_seed is None else settings.data_seed
    try:
        if settings.task == "moons":
            return gen_moons(MoonsConfig(settings.n_per_domain or 300, settings.noise,
                                         settings.rotation, data_seed))
        return gen_glyphs(GlyphConfig(n_classes=settings.n_classes, shift=settings.shift,
                                      strength=settings.shift_strength,
                                      n_per_domain=settings.n_per_domain or 400, seed=data_seed))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class RunManifest:
    config: dict
    output_dir: str
    files: list[str] = field(default_factory=list)
    status: str = "running"
    exit_code: int = 0
    wall_time: float = 0.0
    message: str = ""

    def write(self) -> Path:
        path = Path(self.output_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def output_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "runs")


def new_run_dir(root: Path, kind: str) -> Path:
    """A fresh directory; existing ones are never reused."""
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    root.mkdir(parents=True, exist_ok=True)
    for i in range(10_000):
        path = root / (f"{kind}-{stamp}" + (f"-{i}" if i else ""))
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise RuntimeError(f"could not allocate a run directory under {root}")


def _config_echo(cfg: TrainConfig, settings: TaskSettings) -> dict:
    return {"train": asdict(cfg), "task": asdict(settings)}


def export_artifacts(bundle: ModelBundle, data: TaskData, what: list[str], out: Path) -> list[Path]:
    data = data.standardized()
    files: list[Path] = []
    for item in what:
        if item == "checkpoint":
            files.append(save_checkpoint(bundle, out / "checkpoint.txt"))
        elif item == "boundary":
            if data.source.dim != 2:
                raise ConfigError("boundary export needs a 2-D task")
            grid = boundary_grid(bundle, standardizer=data.standardizer)
            files.append(write_boundary_csv(grid, out / "boundary.csv"))
        elif item == "embeddings":
            rows = export_embeddings(bundle, [data.source_test, data.target_test])
            files.append(write_embeddings_csv(rows, out / "embeddings.csv"))
        elif item == "reconstructions":
            if data.image_shape is None:
                raise ConfigError("reconstruction export needs an image task")
            files.extend(export_reconstructions(bundle, data.target_test.inputs[:16],
                                                out / "reconstructions", data.image_shape,
                                                data.standardizer))
        else:
            raise ConfigError(f"unknown export {item!r}; choose from {EXPORTS}")
    return files


def cmd_train(cfg: TrainConfig, settings: TaskSettings, out_root: Path,
              exports: list[str]) -> tuple[int, RunManifest]:
    out = new_run_dir(out_root, "train")
    manifest = RunManifest(_config_echo(cfg, settings), str(out))
    t0 = time.perf_counter()
    try:
        data = make_task(settings, cfg.seed)
        result = run_training(cfg, data)
        files = [write_logs(result.logs, out / "epochs.csv"),
                 write_logs(result.logs, out / "epochs_timed.csv", timing=True),
                 save_checkpoint(result.bundle, out / "checkpoint.txt")]
        files += export_artifacts(result.bundle, data,
                                  [e for e in exports if e != "checkpoint"], out)
        manifest.files = [str(p.relative_to(out)) for p in files]
        manifest.status = "success"
        code = 0
    except DivergenceError as exc:
        manifest.status, manifest.message, code = "diverged", str(exc), EXIT_DIVERGENCE
    except ConfigError as exc:
        manifest.status, manifest.message, code = "config_error", str(exc), EXIT_CONFIG
    manifest.exit_code = code
    manifest.wall_time = time.perf_counter() - t0
    manifest.write()
    return code, manifest


SWEEP_COLUMNS = ("kind", "param", "value", "seed", "n", "tgt_acc", "tgt_acc_std", "src_acc",
                 "src_acc_std", "status")


def parse_grid(spec: str) -> tuple[str, list[float]]:
    """``"alpha: 0.01,0.03"`` or ``"alpha=0.01,0.03"``."""
    sep = ":" if ":" in spec else "="
    if sep not in spec:
        raise ConfigError(f"grid spec {spec!r} must look like 'name: v1,v2,...'")
    name, values = (part.strip() for part in spec.split(sep, 1))
    if name not in ("alpha", "margin", "lr", "momentum", "batch_size", "epochs"):
        raise ConfigError(f"cannot sweep over {name!r}")
    try:
        parsed = [float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad grid values {values!r}") from None
    if not parsed:
        raise ConfigError("grid needs at least one value")
    return name, parsed


def _sweep_job(args) -> dict:
    cfg, settings, param, value, seed = args
    kind = int if param in ("batch_size", "epochs") else float
    cfg = replace(cfg, **{param: kind(value)}, seed=seed)
    degenerate = param == "margin" and value == 0 and cfg.method in ("mdat", "arn_no_mdat")
    try:
        cfg.validate(allow_degenerate_margin=degenerate)
        result = run_training(cfg, make_task(settings, seed), allow_degenerate_margin=degenerate)
        last = result.logs[-1] if result.logs else None
        return {"param": param, "value": value, "seed": seed,
                "tgt_acc": last.tgt_acc if last else float("nan"),
                "src_acc": last.src_acc if last else float("nan"),
                "status": "degenerate" if degenerate else "ok"}
    except DivergenceError:
        return {"param": param, "value": value, "seed": seed, "tgt_acc": float("nan"),
                "src_acc": float("nan"), "status": "diverged"}


def _std(values: list[float]) -> float:
    return statistics.stdev(values) if len(values) > 1 else 0.0


def aggregate_sweep(rows: list[dict]) -> list[dict]:
    """Mean/std per grid point over runs that finished (diverged runs excluded)."""
    out = []
    for value in dict.fromkeys(r["value"] for r in rows):
        group = [r for r in rows if r["value"] == value]
        ok = [r for r in group if r["status"] != "diverged"]
        tgt = [r["tgt_acc"] for r in ok]
        src = [r["src_acc"] for r in ok]
        out.append({
            "param": group[0]["param"], "value": value, "n": len(ok),
            "tgt_acc": statistics.fmean(tgt) if tgt else float("nan"),
            "tgt_acc_std": _std(tgt) if tgt else float("nan"),
            "src_acc": statistics.fmean(src) if src else float("nan"),
            "src_acc_std": _std(src) if src else float("nan"),
            "status": "degenerate" if any(r["status"] == "degenerate" for r in group)
            else ("ok" if len(ok) == len(group) else f"diverged:{len(group) - len(ok)}"),
        })
    return out


def write_sweep_csv(rows: list[dict], aggregates: list[dict], path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow(["run", r["param"], repr(r["value"]), r["seed"], 1, repr(r["tgt_acc"]), "",
                        repr(r["src_acc"]), "", r["status"]])
        for a in aggregates:
            w.writerow(["mean", a["param"], repr(a["value"]), "", a["n"], repr(a["tgt_acc"]),
                        repr(a["tgt_acc_std"]), repr(a["src_acc"]), repr(a["src_acc_std"]),
                        a["status"]])
    return path


def read_sweep_csv(path: str | Path) -> tuple[list[dict], list[dict]]:
    runs, means = [], []
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            rec = {"param": r["param"], "value": float(r["value"]), "status": r["status"],
                   "tgt_acc": float(r["tgt_acc"]), "src_acc": float(r["src_acc"])}
            if r["kind"] == "run":
                rec["seed"] = int(r["seed"])
                runs.append(rec)
            else:
                rec.update(n=int(r["n"]), tgt_acc_std=float(r["tgt_acc_std"]),
                           src_acc_std=float(r["src_acc_std"]))
                means.append(rec)
    return runs, means


def cmd_sweep(cfg: TrainConfig, settings: TaskSettings, grid: str, repeats: int,
              out_root: Path, jobs: int = 1) -> tuple[int, RunManifest]:
    param, values = parse_grid(grid)
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    out = new_run_dir(out_root, "sweep")
    manifest = RunManifest({**_config_echo(cfg, settings), "grid": grid, "repeats": repeats},
                           str(out))
    t0 = time.perf_counter()
    tasks = [(cfg, settings, param, v, cfg.seed + r) for v in values for r in range(repeats)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_job, tasks))
    else:
        rows = [_sweep_job(t) for t in tasks]
    path = write_sweep_csv(rows, aggregate_sweep(rows), out / "sweep.csv")
    manifest.files = [path.name]
    manifest.status = "success"
    manifest.wall_time = time.perf_counter() - t0
    manifest.write()
    return 0, manifest


def cmd_gradcheck(seeds: int = 10, out=None) -> int:
    out = out or sys.stdout
    report = gradcheck_suite(seeds=range(seeds))
    for p in report.params:
        print(f"{p.name:40s} max={p.max_rel_error:.3e} mean={p.mean_rel_error:.3e} "
              f"checked={p.checked} excluded={p.excluded}", file=out)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: max relative error {report.max_rel_error:.3e} "
          f"(tolerance {report.tolerance:g}), {report.checked} entries, "
          f"{report.excluded} excluded at kinks", file=out)
    return 0 if report.passed else EXIT_GRADCHECK


def cmd_export(checkpoint: Path, settings: TaskSettings, seed: int, what: list[str],
               out_root: Path) -> tuple[int, RunManifest]:
    out = new_run_dir(out_root, "export")
    manifest = RunManifest({"checkpoint": str(checkpoint), "task": asdict(settings),
                            "seed": seed, "export": what}, str(out))
    t0 = time.perf_counter()
    bundle = load_checkpoint(checkpoint)
    files = export_artifacts(bundle, make_task(settings, seed), what, out)
    manifest.files = [str(p.relative_to(out)) for p in files]
    manifest.status = "success"
    manifest.wall_time = time.perf_counter() - t0
    manifest.write()
    return 0, manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdatlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="key = value file; flags override it")
        p.add_argument("--task", choices=TASKS)
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--alpha", type=float)
        p.add_argument("--margin", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int, dest="batch_size")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--export", action="append", default=[], choices=EXPORTS)

    p = sub.add_parser("sweep", help="sensitivity sweep over one hyperparameter")
    common(p)
    p.add_argument("--grid", required=True, help="e.g. 'alpha: 0.01,0.03,0.1'")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference check of every objective")
    p.add_argument("--seeds", type=int, default=10)

    p = sub.add_parser("export", help="export artifacts from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--export", action="append", required=True, choices=EXPORTS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "gradcheck":
        return cmd_gradcheck(args.seeds)
    overrides = {k: getattr(args, k) for k in
                 ("task", "method", "alpha", "margin", "epochs", "batch_size", "seed")}
    try:
        cfg, settings = parse_config(args.config, overrides,
                                     allow_degenerate_margin=args.command == "sweep")
        root = output_root(args.out)
        if args.command == "train":
            code, manifest = cmd_train(cfg, settings, root, args.export)
        elif args.command == "sweep":
            code, manifest = cmd_sweep(cfg, settings, args.grid, args.repeats, root, args.jobs)
        else:
            code, manifest = cmd_export(args.checkpoint, settings, cfg.seed, args.export, root)
    except ConfigError as exc:
        print(f"mdatlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if code:
        print(f"mdatlab: {manifest.status}: {manifest.message}", file=sys.stderr)
    else:
        print(manifest.output_dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
