"""Command-line entry point: manifests in, datasets / run records / curves out.

Exit codes: 0 success, 2 validation error, 3 aborted training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import harness, presets, tasks
from .architectures import ModelSpec, strict_init
from .errors import LabError, TrainingAborted
from .relational import inner_product_preservation_probe
from .rng import Rng

EXPERIMENTS = ("gen-data", "train", "curve", "pretrain-transfer", "robustness", "probe")
EXIT_OK, EXIT_INVALID, EXIT_ABORTED = 0, 2, 3
OUT_ENV = "ABSTRACTOR_LAB_OUT"
DEFAULT_OUT = "abstractor_lab_runs"


class ManifestError(LabError, ValueError):
    pass


@dataclasses.dataclass
class CurveSection:
    sizes: list = dataclasses.field(default_factory=lambda: [100])
    trials: int = 1


@dataclasses.dataclass
class PretrainSection:
    n_train: int = 3000
    order_seed: int | None = None


@dataclasses.dataclass
class RobustnessSection:
    kinds: list = dataclasses.field(default_factory=lambda: ["additive", "linear"])
    additive_grid: list = dataclasses.field(default_factory=lambda: list(presets.ADDITIVE_GRID))
    linear_grid: list = dataclasses.field(default_factory=lambda: list(presets.LINEAR_GRID))
    trials: int = 5


@dataclasses.dataclass
class ProbeSection:
    d: int = 1024
    sigma: float | None = None  # None: 1/sqrt(d)
    trials: int = 100


TOP_LEVEL = {
    "experiment", "seed", "profile", "preset", "out", "workers", "task", "train", "models",
    "curve", "pretrain", "robustness", "probe", "init_checkpoint",
}
SECTIONS = {"curve": CurveSection, "pretrain": PretrainSection, "robustness": RobustnessSection, "probe": ProbeSection}
# keys that do not change results and so stay out of the manifest hash
UNHASHED = ("out", "workers")


@dataclasses.dataclass
class Manifest:
    experiment: str
    seed: int
    raw: dict
    task: harness.TaskConfig
    train: dict
    models: dict
    curve: CurveSection
    pretrain: PretrainSection
    robustness: RobustnessSection
    probe: ProbeSection
    init_checkpoint: str | None = None

    def digest(self) -> str:
        blob = json.dumps({k: v for k, v in self.raw.items() if k not in UNHASHED}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def train_config(self, name: str, task: harness.TaskConfig | None = None, seed: int | None = None) -> harness.TrainConfig:
        spec = self.models[name]
        task = task_for_model(task or self.task, spec)
        return harness.TrainConfig(model=spec, task=task, seed=self.seed if seed is None else seed, **self.train)


def task_for_model(task: harness.TaskConfig, spec: ModelSpec) -> harness.TaskConfig:
    """The symbolic SET baseline reads relation bits rather than card embeddings."""
    if spec.kind == "symbolic_mlp" and task.kind == "set":
        return dataclasses.replace(task, kind="set_symbolic")
    return task


def parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(d: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ManifestError(f"override {assignment!r} is not of the form key.path=value")
    path, text = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = d
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ManifestError(f"override {path!r} descends into a non-table")
    node[keys[-1]] = parse_value(text.strip())


def resolve_manifest(experiment: str, args) -> Manifest:
    """Merge preset, manifest file, overrides and flags; validate everything. Writes nothing."""
    raw: dict = {}
    if args.manifest:
        path = Path(args.manifest)
        if not path.is_file():
            raise ManifestError(f"manifest {path} does not exist")
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ManifestError(f"manifest {path} is malformed: {exc}") from exc
    unknown = sorted(set(raw) - TOP_LEVEL)
    if unknown:
        raise ManifestError(f"unknown manifest keys: {unknown}")
    preset_name = args.preset or raw.get("preset")
    profile = args.profile or raw.get("profile") or "desk"
    if profile not in presets.PROFILES:
        raise ManifestError(f"unknown profile {profile!r}")
    base = presets.preset(preset_name, profile) if preset_name else {"experiment": experiment}
    merged = presets.deep_merge(base, raw)
    for assignment in args.set or []:
        apply_override(merged, assignment)
    if getattr(args, "task", None):
        merged.setdefault("task", {})["kind"] = args.task
    if args.seed is not None:
        merged["seed"] = args.seed
    merged["profile"] = profile
    if preset_name:
        merged["preset"] = preset_name
    merged.pop("out", None)
    merged.pop("workers", None)
    unknown = sorted(set(merged) - TOP_LEVEL)
    if unknown:
        raise ManifestError(f"unknown manifest keys: {unknown}")
    if merged.get("experiment", experiment) != experiment:
        raise ManifestError(f"manifest describes a {merged['experiment']!r} experiment, not {experiment!r}")
    merged["experiment"] = experiment
    if "seed" not in merged:
        raise ManifestError("a seed is required (manifest `seed` or --seed)")
    seed = merged["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ManifestError(f"seed must be a non-negative integer, got {seed!r}")

    task_raw = dict(merged.get("task", {}))
    root = Rng(seed)
    task_raw.setdefault("universe_seed", root.spawn("universe").seed)
    task_raw.setdefault("data_seed", root.spawn("data").seed)
    task_raw.setdefault("pretrain_order_seed", root.spawn("pretrain-order").seed)
    if "split_fracs" in task_raw:
        task_raw["split_fracs"] = tuple(task_raw["split_fracs"])
    task = strict_init(harness.TaskConfig, task_raw, "task")
    task.validate()
    merged["task"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(task).items()}

    train = dict(merged.get("train", {}))
    allowed = {f.name for f in dataclasses.fields(harness.TrainConfig)} - {"model", "task", "seed"}
    bad = sorted(set(train) - allowed)
    if bad:
        raise ManifestError(f"train: unknown keys {bad}")

    models = {}
    needs_models = experiment in ("train", "curve", "pretrain-transfer", "robustness")
    for name, spec_raw in merged.get("models", {}).items():
        spec = ModelSpec.from_dict(spec_raw)
        spec.validate()
        models[name] = spec
    if needs_models and not models:
        raise ManifestError(f"{experiment} needs at least one [models.<name>] table")

    sections = {}
    for key, cls in SECTIONS.items():
        sections[key] = strict_init(cls, dict(merged.get(key, {})), key)
    manifest = Manifest(experiment, seed, merged, task, train, models, init_checkpoint=merged.get("init_checkpoint"), **sections)

    for name in models:
        manifest.train_config(name).validate()
    curve = manifest.curve
    if experiment in ("curve", "pretrain-transfer"):
        sizes = curve.sizes
        if not sizes or sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
            raise ManifestError("curve.sizes must be strictly ascending and non-empty")
        pool = tasks.split_sizes(task.order_n**2, task.split_fracs)[0] if task.kind == "order" else task.n_train
        if sizes[-1] > pool:
            raise ManifestError(f"curve size {sizes[-1]} exceeds the training pool of {pool}")
        if curve.trials < 1:
            raise ManifestError("curve.trials must be >= 1")
    if experiment in ("pretrain-transfer", "robustness") and task.kind != "sorting":
        raise ManifestError(f"{experiment} runs on the sorting task, got {task.kind!r}")
    if experiment == "pretrain-transfer" and manifest.pretrain.n_train < 1:
        raise ManifestError("pretrain.n_train must be positive")
    if experiment == "robustness":
        rb = manifest.robustness
        for kind in rb.kinds:
            if kind not in ("additive", "linear"):
                raise ManifestError(f"unknown corruption kind {kind!r}")
        for grid in (rb.additive_grid, rb.linear_grid):
            if any(s < 0 for s in grid):
                raise ManifestError("noise levels must be >= 0")
    if experiment == "probe" and (manifest.probe.d < 2 or manifest.probe.trials < 1):
        raise ManifestError("probe needs d >= 2 and trials >= 1")
    if manifest.init_checkpoint is not None and not Path(manifest.init_checkpoint).is_file():
        raise ManifestError(f"init_checkpoint {manifest.init_checkpoint} does not exist")
    return manifest


def output_root(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def run_directory(root: Path, manifest: Manifest) -> Path:
    return root / f"{manifest.experiment}-{manifest.digest()[:12]}-seed{manifest.seed}"


def prepare_run_dir(root: Path, manifest: Manifest) -> Path:
    run_dir = run_directory(root, manifest)
    config_path = run_dir / "effective_config.json"
    text = json.dumps(manifest.raw, sort_keys=True, indent=2) + "\n"
    if config_path.exists() and config_path.read_text() != text:
        raise ManifestError(f"{run_dir} holds a result for a different configuration; refusing to overwrite")
    run_dir.mkdir(parents=True, exist_ok=True)
    config_path.write_text(text)
    return run_dir


# experiments ----------------------------------------------------------------------
def _say(msg: str) -> None:
    print(msg, flush=True)


def _split_records(split: harness.Split) -> list[dict]:
    rows = []
    for x, y in zip(split.x, split.y):
        rows.append({"x": np.asarray(x).tolist(), "y": np.asarray(y).tolist()})
    return rows


def run_gen_data(manifest: Manifest, run_dir: Path) -> int:
    data = harness.build_task_data(manifest.task)
    arrays = {}
    for name in ("train", "val", "test"):
        split = getattr(data, name)
        arrays[f"{name}_x"] = split.x
        arrays[f"{name}_y"] = split.y
        if data.indices is not None:
            arrays[f"{name}_objects"] = data.indices[name]
    meta = {"task": manifest.raw["task"]}
    if data.universe is not None:
        arrays["universe_objects"] = data.universe.objects
        meta["a_order"] = data.universe.a_order.tolist()
        meta["b_order"] = data.universe.b_order.tolist()
    kind = manifest.task.kind
    tasks.save_arrays(run_dir / f"{kind}.data", kind, manifest.seed, arrays, meta)
    records = []
    for name in ("train", "val", "test"):
        for rec in _split_records(getattr(data, name)):
            records.append({"split": name, **rec})
    tasks.export_jsonl(run_dir / f"{kind}.jsonl", records)
    _say(f"gen-data {kind}: train={len(data.train)} val={len(data.val)} test={len(data.test)} -> {run_dir}")
    return EXIT_OK


def _data_cache():
    cache: dict = {}

    def get(task: harness.TaskConfig) -> harness.TaskData:
        key = json.dumps(dataclasses.asdict(task), sort_keys=True, default=list)
        if key not in cache:
            cache[key] = harness.build_task_data(task)
        return cache[key]

    return get


def run_train(manifest: Manifest, run_dir: Path) -> int:
    from .checkpoint import read_checkpoint

    data_for = _data_cache()
    aborted = False
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    for name in manifest.models:
        cfg = manifest.train_config(name)
        init_state = None
        if manifest.init_checkpoint is not None:
            _, init_state = read_checkpoint(manifest.init_checkpoint)
        record = harness.train(
            cfg, data_for(cfg.task), init_state=init_state,
            checkpoint_path=run_dir / "checkpoints" / f"{name}.ckpt", tag={"model": name},
        )
        record.write_jsonl(run_dir / f"{name}.jsonl")
        aborted |= record.aborted
        _say(f"train {name}: best_epoch={record.best_epoch} test={_fmt(record.test)}" + (" ABORTED" if record.aborted else ""))
    return EXIT_ABORTED if aborted else EXIT_OK


def _fmt(test: dict) -> str:
    return ", ".join(f"{k}={v:.4f}" for k, v in sorted(test.items()) if isinstance(v, float))


def write_curve(curve: harness.LearningCurve, run_dir: Path, label: str) -> None:
    curves = run_dir / "curves"
    curves.mkdir(exist_ok=True)
    curve.write_csv(curves / f"{label}_trials.csv", curves / f"{label}_aggregate.csv")
    runs = run_dir / "runs" / label
    runs.mkdir(parents=True, exist_ok=True)
    for size, recs in curve.records.items():
        for trial, rec in enumerate(recs):
            rec.write_jsonl(runs / f"size{size}_trial{trial}.jsonl")


def write_combined_aggregate(curves: dict, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "size", "mean", "sem"])
        for label, curve in curves.items():
            for row in curve.aggregate():
                w.writerow([label, row["size"], repr(row["mean"]), repr(row["sem"])])


def _any_aborted(curve: harness.LearningCurve) -> bool:
    return any(r.aborted for recs in curve.records.values() for r in recs)


def run_curve(manifest: Manifest, run_dir: Path, workers: int) -> int:
    data_for = _data_cache()
    curves = {}
    for name in manifest.models:
        cfg = manifest.train_config(name)
        curve = harness.learning_curve(cfg, manifest.curve.sizes, manifest.curve.trials, manifest.seed, data=data_for(cfg.task), workers=workers, label=name)
        write_curve(curve, run_dir, name)
        curves[name] = curve
        for row in curve.aggregate():
            _say(f"curve {name} size={row['size']}: mean={row['mean']:.4f} sem={row['sem']:.4f} n={row['n']}")
    write_combined_aggregate(curves, run_dir / "curve_aggregate.csv")
    return EXIT_ABORTED if any(_any_aborted(c) for c in curves.values()) else EXIT_OK


def pretrain_config(manifest: Manifest, name: str) -> harness.TrainConfig:
    """Training config for the reshuffled-order pre-training run of model ``name``."""
    pre_task = dataclasses.replace(manifest.task, kind="sorting_pretrain", n_train=manifest.pretrain.n_train)
    if manifest.pretrain.order_seed is not None:
        pre_task = dataclasses.replace(pre_task, pretrain_order_seed=manifest.pretrain.order_seed)
    return manifest.train_config(name, pre_task, Rng(manifest.seed).spawn("pretrain").seed)


def run_pretrain_transfer(manifest: Manifest, run_dir: Path, workers: int) -> int:
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    curves = {}
    for name in manifest.models:
        result = harness.pretrain_transfer(
            pretrain_config(manifest, name),
            manifest.train_config(name),
            manifest.curve.sizes,
            manifest.curve.trials,
            manifest.seed,
            checkpoint_path=run_dir / "checkpoints" / f"{name}_pretrain.ckpt",
            workers=workers,
        )
        result.pretrain.write_jsonl(run_dir / f"{name}_pretrain.jsonl")
        _say(f"pretrain {name}: best_epoch={result.pretrain.best_epoch} test={_fmt(result.pretrain.test)}")
        for arm, curve in (("pretrained", result.with_pretraining), ("scratch", result.without_pretraining)):
            label = f"{name}_{arm}"
            write_curve(curve, run_dir, label)
            curves[label] = curve
            for row in curve.aggregate():
                _say(f"curve {label} size={row['size']}: mean={row['mean']:.4f} sem={row['sem']:.4f} n={row['n']}")
    write_combined_aggregate(curves, run_dir / "curve_aggregate.csv")
    return EXIT_ABORTED if any(_any_aborted(c) for c in curves.values()) else EXIT_OK


def run_robustness(manifest: Manifest, run_dir: Path) -> int:
    data = harness.build_task_data(manifest.task)
    rb = manifest.robustness
    grids = {"additive": rb.additive_grid, "linear": rb.linear_grid}
    rows = []
    aborted = False
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    for name in manifest.models:
        cfg = manifest.train_config(name)
        record, model = harness.train(cfg, data, return_model=True, checkpoint_path=run_dir / "checkpoints" / f"{name}.ckpt", tag={"model": name})
        record.write_jsonl(run_dir / f"{name}.jsonl")
        _say(f"train {name}: best_epoch={record.best_epoch} test={_fmt(record.test)}")
        if record.aborted:
            aborted = True
            continue
        for kind in rb.kinds:
            table = harness.robustness_sweep(model, data, kind, grids[kind], rb.trials, manifest.seed)
            for i, sigma in enumerate(grids[kind]):
                for t in range(rb.trials):
                    rows.append([name, kind, repr(float(sigma)), t, repr(float(table[i, t]))])
                _say(f"robustness {name} {kind} sigma={sigma:.4f}: mean={table[i].mean():.4f}")
    with open(run_dir / "robustness_trials.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "kind", "sigma", "trial", "acc"])
        w.writerows(rows)
    return EXIT_ABORTED if aborted else EXIT_OK


def run_probe(manifest: Manifest, run_dir: Path) -> int:
    p = manifest.probe
    sigma = p.sigma if p.sigma is not None else 1.0 / math.sqrt(p.d)
    err = inner_product_preservation_probe(p.d, sigma, p.trials, Rng(manifest.seed))
    (run_dir / "probe.json").write_text(json.dumps({"d": p.d, "sigma": sigma, "trials": p.trials, "error": err}, sort_keys=True) + "\n")
    _say(f"probe d={p.d} sigma={sigma:.6f}: mean normalized error={err:.4f}")
    return EXIT_OK


# report -----------------------------------------------------------------------------
def build_report(results_dir: Path) -> list[dict]:
    rows = []
    for config_path in sorted(results_dir.rglob("effective_config.json")):
        run_dir = config_path.parent
        config = json.loads(config_path.read_text())
        curve_dir = run_dir / "curves"
        if not curve_dir.is_dir():
            continue
        expected_trials = config.get("curve", {}).get("trials")
        expected_sizes = config.get("curve", {}).get("sizes", [])
        for trials_csv in sorted(curve_dir.glob("*_trials.csv")):
            label = trials_csv.name[: -len("_trials.csv")]
            accs: dict = {}
            with open(trials_csv, newline="") as fh:
                for rec in csv.DictReader(fh):
                    if int(rec["aborted"]):
                        continue
                    accs.setdefault(int(rec["size"]), []).append(float(rec["test_acc"]))
            for size in sorted(set(expected_sizes) | set(accs)):
                vals = accs.get(size, [])
                mean, sem = harness.mean_sem(vals)
                rows.append(
                    {
                        "run": run_dir.name,
                        "model": label,
                        "size": size,
                        "mean": mean,
                        "sem": sem,
                        "n_trials": len(vals),
                        "complete": expected_trials is not None and len(vals) == expected_trials,
                    }
                )
    return rows


def run_report(results_dir: Path) -> int:
    if not results_dir.is_dir():
        raise ManifestError(f"results directory {results_dir} does not exist")
    rows = build_report(results_dir)
    if not rows:
        raise ManifestError(f"no learning-curve records under {results_dir}")
    fields = ["run", "model", "size", "mean", "sem", "n_trials", "complete"]
    with open(results_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for row in rows:
            w.writerow([repr(row[f]) if isinstance(row[f], float) else row[f] for f in fields])
    (results_dir / "report.json").write_text(json.dumps(rows, sort_keys=True, indent=1) + "\n")
    incomplete = sum(not r["complete"] for r in rows)
    _say(f"report: {len(rows)} rows from {len({r['run'] for r in rows})} runs, {incomplete} incomplete -> {results_dir / 'report.csv'}")
    return EXIT_OK


# entry point ------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abstractor-lab", description="Relational sequence-model experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--manifest", help="TOML manifest")
        p.add_argument("--preset", choices=presets.PRESETS, help="start from a named preset")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--profile", choices=presets.PROFILES)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a manifest value, e.g. train.max_epochs=5")
        if name == "gen-data":
            p.add_argument("--task", choices=harness.TASK_KINDS)
    rep = sub.add_parser("report")
    rep.add_argument("results_dir", nargs="?")
    rep.add_argument("--out", help="results directory (alternative to the positional argument)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        if args.command == "report":
            target = args.results_dir or args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
            return run_report(Path(target))
        if args.workers < 1:
            raise ManifestError("--workers must be >= 1")
        manifest = resolve_manifest(args.command, args)
        run_dir = prepare_run_dir(output_root(args), manifest)
        if args.command == "gen-data":
            return run_gen_data(manifest, run_dir)
        if args.command == "train":
            return run_train(manifest, run_dir)
        if args.command == "curve":
            return run_curve(manifest, run_dir, args.workers)
        if args.command == "pretrain-transfer":
            return run_pretrain_transfer(manifest, run_dir, args.workers)
        if args.command == "robustness":
            return run_robustness(manifest, run_dir)
        return run_probe(manifest, run_dir)
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (LabError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
