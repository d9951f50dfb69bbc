"""Training loop, metrics and experiment protocols (learning curves, transfer, robustness)."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tasks
from . import tensor as T
from .architectures import START_TOKEN, ModelSpec, assemble, strict_init
from .errors import ConfigError, ContractError, TrainingAborted
from .rng import Rng


# optimizer -------------------------------------------------------------------
@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """Bias-corrected Adam update applied in place to every named parameter."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data = (p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-7):
        self.params = params
        self.state = OptimizerState(lr, beta1, beta2, eps)

    def step(self) -> None:
        adam_step(self.params, {n: p.grad for n, p in self.params.items()}, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# loss and metrics -------------------------------------------------------------
def cross_entropy_loss(logits, targets, ignore_token: int | None = None):
    return T.cross_entropy(logits, targets, ignore_index=ignore_token)


def metrics(preds, targets, mask=None) -> dict:
    """Elementwise, full-sequence, binary and (masked) teacher-forcing accuracies."""
    preds = np.asarray(preds)
    targets = np.asarray(targets)
    if preds.shape != targets.shape:
        raise ContractError(f"prediction shape {preds.shape} != target shape {targets.shape}")
    hit = preds == targets
    out = {"elementwise_acc": float(hit.mean())}
    if hit.ndim >= 2:
        out["full_sequence_acc"] = float(hit.reshape(len(hit), -1).all(axis=1).mean())
    else:
        out["full_sequence_acc"] = out["elementwise_acc"]
    out["binary_acc"] = out["elementwise_acc"]
    keep = np.ones_like(hit) if mask is None else np.asarray(mask, dtype=bool)
    out["teacher_forcing_acc"] = float(hit[keep].mean()) if keep.any() else float("nan")
    return out


# task data --------------------------------------------------------------------
TASK_KINDS = ("sorting", "sorting_pretrain", "order", "set", "set_symbolic")


@dataclass
class TaskConfig:
    kind: str = "sorting"
    n_train: int = 3000
    n_val: int = 500
    n_test: int = 1000
    seq_len: int = 10
    universe_seed: int = 0
    data_seed: int = 1
    # seed of the reshuffled primary order used by the pre-training task
    pretrain_order_seed: int = 2
    order_n: int = 32
    order_dim: int = 8
    split_fracs: tuple = (0.50, 0.15, 0.35)

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"task {name} must be positive")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    def take(self, rows) -> "Split":
        return Split(self.x[rows], self.y[rows])


@dataclass
class TaskData:
    kind: str
    seq2seq: bool
    train: Split
    val: Split
    test: Split
    # sorting only: the universe and the object indices of each split, for corruption sweeps
    universe: tasks.ObjectUniverse | None = None
    indices: dict | None = None


def build_task_data(cfg: TaskConfig) -> TaskData:
    cfg.validate()
    if cfg.kind in ("sorting", "sorting_pretrain"):
        u = tasks.gen_object_universe(cfg.universe_seed)
        data_seed = cfg.data_seed
        if cfg.kind == "sorting_pretrain":
            u = tasks.reshuffle_primary_order(u, cfg.pretrain_order_seed)
            # a fresh batch of sequences, distinct from the primary task's draw
            data_seed = Rng(cfg.data_seed).spawn("pretrain").seed
        ds = tasks.gen_sorting_dataset(u, cfg.n_train, cfg.n_val, cfg.n_test, cfg.seq_len, data_seed)
        splits = {k: Split(s.inputs, s.targets) for k, s in ds.splits().items()}
        return TaskData(cfg.kind, True, **splits, universe=u, indices={k: s.indices for k, s in ds.splits().items()})
    if cfg.kind == "order":
        ds = tasks.gen_order_pairs(cfg.order_n, cfg.order_dim, cfg.split_fracs, cfg.data_seed)
        parts = {k: Split(*ds.part(k)) for k in ("train", "val", "test")}
        return TaskData(cfg.kind, False, **parts)
    ds = tasks.gen_set_splits(cfg.n_train, cfg.n_val, cfg.n_test, cfg.data_seed)
    parts = {}
    for k in ("train", "val", "test"):
        cards, labels = tasks.SetDataset.arrays(getattr(ds, k))
        if cfg.kind == "set_symbolic":
            x = tasks.symbolic_relations_batch(cards)
        else:
            x = tasks.one_hot_cards(cards)
        parts[k] = Split(x, labels)
    return TaskData(cfg.kind, False, **parts)


def decoder_inputs(targets: np.ndarray) -> np.ndarray:
    """Start token followed by the targets shifted right by one."""
    start = np.full((len(targets), 1), START_TOKEN, dtype=np.int64)
    return np.concatenate([start, targets[:, :-1]], axis=1)


# training -----------------------------------------------------------------------
@dataclass
class TrainConfig:
    model: ModelSpec
    task: TaskConfig = field(default_factory=TaskConfig)
    batch_size: int = 512
    max_epochs: int = 100
    patience: int | None = None  # None: equal to max_epochs (restore-best only)
    monitor: str = "val_loss"
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    eval_batch_size: int = 1000
    # test-time decoding for seq2seq: "greedy" (autoregressive) or "teacher_forcing"
    test_decoding: str = "greedy"

    def validate(self) -> None:
        self.model.validate()
        self.task.validate()
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience is not None and not 1 <= self.patience <= self.max_epochs:
            raise ConfigError("patience must lie in [1, max_epochs]")
        if self.monitor != "val_loss":
            raise ConfigError(f"only val_loss can be monitored, got {self.monitor!r}")
        if self.test_decoding not in ("greedy", "teacher_forcing"):
            raise ConfigError(f"unknown test_decoding {self.test_decoding!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["task"]["split_fracs"] = list(self.task.split_fracs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" not in d:
            raise ConfigError("train config needs a model table")
        d["model"] = ModelSpec.from_dict(d["model"])
        if "task" in d:
            task = dict(d["task"])
            if "split_fracs" in task:
                task["split_fracs"] = tuple(task["split_fracs"])
            d["task"] = strict_init(TaskConfig, task, "task")
        return strict_init(cls, d, "train")


@dataclass
class RunRecord:
    config: dict
    epochs: list = field(default_factory=list)
    test: dict = field(default_factory=dict)
    best_epoch: int = -1
    wall_clock: float = 0.0
    checkpoint_path: str | None = None
    aborted: bool = False
    abort_reason: str | None = None
    tag: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "summary": True,
            "tag": self.tag,
            "best_epoch": self.best_epoch,
            "test": self.test,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "wall_clock": self.wall_clock,
            "checkpoint_path": self.checkpoint_path,
            "config": self.config,
        }

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.epochs:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.write(json.dumps(self.summary(), sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "RunRecord":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not rows or not rows[-1].get("summary"):
            raise ContractError(f"{path}: missing summary line")
        s = rows[-1]
        return cls(
            s["config"], rows[:-1], s["test"], s["best_epoch"], s["wall_clock"],
            s["checkpoint_path"], s["aborted"], s["abort_reason"], s.get("tag", {}),
        )

    def primary_metric(self) -> float:
        return self.test.get("elementwise_acc", float("nan"))


def _batches(n: int, size: int, rng: Rng | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, size):
        yield order[start : start + size]


def _forward(model, data_seq2seq: bool, split: Split):
    if data_seq2seq:
        return model(split.x, decoder_inputs(split.y))
    return model(split.x)


def evaluate_loss(model, data: TaskData, split: Split, batch_size: int) -> tuple[float, float]:
    """Teacher-forced mean loss and accuracy over ``split``."""
    total, correct, count = 0.0, 0, 0
    with T.no_grad():
        for rows in _batches(len(split), batch_size, None):
            part = split.take(rows)
            logits = _forward(model, data.seq2seq, part)
            loss = cross_entropy_loss(logits, part.y)
            n_pos = part.y.size
            total += float(loss.data) * n_pos
            correct += int((logits.data.argmax(-1) == part.y).sum())
            count += n_pos
    return total / count, correct / count


def predict(model, data: TaskData, split: Split, batch_size: int, decoding: str = "greedy") -> np.ndarray:
    out = []
    with T.no_grad():
        for rows in _batches(len(split), batch_size, None):
            part = split.take(rows)
            if data.seq2seq and decoding == "greedy":
                out.append(model.greedy_decode(part.x, part.y.shape[1]))
            else:
                out.append(_forward(model, data.seq2seq, part).data.argmax(-1))
    return np.concatenate(out)


def evaluate(model, data: TaskData, split: Split, batch_size: int, decoding: str = "greedy") -> dict:
    preds = predict(model, data, split, batch_size, decoding)
    result = metrics(preds, split.y)
    if data.seq2seq and decoding == "greedy":
        tf = predict(model, data, split, batch_size, "teacher_forcing")
        result["teacher_forcing_acc"] = metrics(tf, split.y)["elementwise_acc"]
    return result


def train(
    cfg: TrainConfig,
    data: TaskData | None = None,
    init_state: dict | None = None,
    val_loss_fn: Callable[[int, object], float] | None = None,
    checkpoint_path=None,
    return_model: bool = False,
    tag: dict | None = None,
):
    """Train with teacher forcing, keep the weights of the best validation-loss epoch, test them.

    ``val_loss_fn(epoch, model)`` replaces the measured validation loss when
    given (used to inject synthetic curves). Divergence aborts the run and
    is reported through ``RunRecord.aborted``.
    """
    cfg.validate()
    if data is None:
        data = build_task_data(cfg.task)
    rng = Rng(cfg.seed)
    model = assemble(cfg.model, rng.spawn("init"))
    if init_state is not None:
        model.load_state_dict(init_state, strict=True)
    params = model.named_parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    shuffle = rng.spawn("shuffle")
    patience = cfg.patience or cfg.max_epochs
    record = RunRecord(cfg.to_dict(), tag=dict(tag or {}))
    best = (math.inf, -1, model.state_dict())
    started = time.perf_counter()
    since_best = 0
    try:
        for epoch in range(cfg.max_epochs):
            seen, loss_sum, hits = 0, 0.0, 0
            for rows in _batches(len(data.train), cfg.batch_size, shuffle):
                part = data.train.take(rows)
                opt.zero_grad()
                logits = _forward(model, data.seq2seq, part)
                loss = cross_entropy_loss(logits, part.y)
                if not np.isfinite(loss.data):
                    raise TrainingAborted(f"loss became non-finite at epoch {epoch}")
                loss.backward()
                opt.step()
                loss_sum += float(loss.data) * len(rows)
                hits += int((logits.data.argmax(-1) == part.y).sum())
                seen += len(rows)
            val_loss, val_acc = evaluate_loss(model, data, data.val, cfg.eval_batch_size)
            if val_loss_fn is not None:
                val_loss = float(val_loss_fn(epoch, model))
            if not np.isfinite(val_loss):
                raise TrainingAborted(f"validation loss became non-finite at epoch {epoch}")
            record.epochs.append(
                {
                    "epoch": epoch,
                    "train_loss": loss_sum / seen,
                    "train_acc": hits / (seen * (part.y.size // len(rows))),
                    "val_loss": val_loss,
                    "val_acc": val_acc,
                }
            )
            if val_loss < best[0]:
                best = (val_loss, epoch, model.state_dict())
                since_best = 0
            else:
                since_best += 1
                if since_best >= patience:
                    break
    except TrainingAborted as exc:
        record.aborted = True
        record.abort_reason = str(exc)
    record.best_epoch = best[1]
    if best[1] >= 0:
        model.load_state_dict(best[2])
        record.test = evaluate(model, data, data.test, cfg.eval_batch_size, cfg.test_decoding)
        record.test["val_loss"] = best[0]
    record.wall_clock = time.perf_counter() - started
    if checkpoint_path is not None and best[1] >= 0:
        from .checkpoint import save_checkpoint

        save_checkpoint(checkpoint_path, model, cfg.model.spec_hash(), cfg.seed, best[1], record.test)
        record.checkpoint_path = str(checkpoint_path)
    return (record, model) if return_model else record


# learning curves ------------------------------------------------------------------
def run_seed(base_seed: int, size: int, trial: int) -> int:
    """Model-init / shuffle seed for one (size, trial) cell."""
    return Rng(base_seed).spawn(f"size={size}/trial={trial}").seed


def subset_order(base_seed: int, n_pool: int, trial: int) -> np.ndarray:
    """Seeded shuffle of the training pool; size s uses its first s entries."""
    return Rng(base_seed).spawn(f"subset/trial={trial}").permutation(n_pool)


@dataclass
class LearningCurve:
    sizes: list
    trials: int
    records: dict = field(default_factory=dict)  # size -> list of RunRecord (index = trial)
    label: str = ""

    def accuracies(self, size: int) -> list[float]:
        return [r.primary_metric() for r in self.records.get(size, []) if not r.aborted]

    def aggregate(self) -> list[dict]:
        rows = []
        for s in self.sizes:
            accs = self.accuracies(s)
            rows.append({"size": s, "mean": mean_sem(accs)[0], "sem": mean_sem(accs)[1], "n": len(accs), "complete": len(accs) == self.trials})
        return rows

    def mean_at(self, size: int) -> float:
        return mean_sem(self.accuracies(size))[0]

    def write_csv(self, trials_path, aggregate_path) -> None:
        with open(trials_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["size", "trial", "test_acc", "aborted"])
            for s in self.sizes:
                for t, r in enumerate(self.records.get(s, [])):
                    w.writerow([s, t, repr(r.primary_metric()), int(r.aborted)])
        with open(aggregate_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["size", "mean", "sem"])
            for row in self.aggregate():
                w.writerow([row["size"], repr(row["mean"]), repr(row["sem"])])


def mean_sem(values) -> tuple[float, float]:
    """Mean and standard error (sample std with ddof=1 over sqrt(n); 0 for n=1)."""
    values = np.asarray(list(values), dtype=float)
    if len(values) == 0:
        return float("nan"), float("nan")
    if len(values) == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(len(values)))


def _curve_cell(args):
    cfg, data, size, trial, base_seed, init_state = args
    order = subset_order(base_seed, len(data.train), trial)
    sub = dataclasses.replace(data, train=data.train.take(order[:size]))
    cell_cfg = dataclasses.replace(cfg, seed=run_seed(base_seed, size, trial))
    return train(cell_cfg, sub, init_state=init_state, tag={"size": size, "trial": trial})


def learning_curve(
    base_cfg: TrainConfig,
    sizes,
    trials: int,
    seed: int,
    data: TaskData | None = None,
    init_state: dict | None = None,
    workers: int = 1,
    label: str = "",
    progress: Callable[[RunRecord], None] | None = None,
) -> LearningCurve:
    """Train a fresh model per (size, trial) on nested prefixes of a seeded shuffle."""
    sizes = [int(s) for s in sizes]
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ConfigError("learning-curve sizes must be strictly ascending")
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    base_cfg.validate()
    if data is None:
        data = build_task_data(base_cfg.task)
    if sizes[-1] > len(data.train):
        raise ConfigError(f"largest size {sizes[-1]} exceeds training pool {len(data.train)}")
    cells = [(base_cfg, data, s, t, seed, init_state) for s in sizes for t in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_curve_cell, cells))
    else:
        results = []
        for cell in cells:
            results.append(_curve_cell(cell))
            if progress is not None:
                progress(results[-1])
    curve = LearningCurve(sizes, trials, label=label)
    for (_, _, s, _, _, _), rec in zip(cells, results):
        curve.records.setdefault(s, []).append(rec)
    return curve


# pre-training transfer --------------------------------------------------------------
@dataclass
class TransferResult:
    pretrain: RunRecord
    with_pretraining: LearningCurve
    without_pretraining: LearningCurve
    pretrained_state: dict


def pretrain_transfer(
    pretrain_cfg: TrainConfig,
    curve_cfg: TrainConfig,
    sizes,
    trials: int,
    seed: int,
    checkpoint_path=None,
    workers: int = 1,
) -> TransferResult:
    """Train once on the reshuffled-order task, then run learning curves from that init and from scratch."""
    if pretrain_cfg.model.spec_hash() != curve_cfg.model.spec_hash():
        raise ConfigError("pre-training and fine-tuning model specs differ; weights cannot be transferred")
    pre_record, pre_model = train(pretrain_cfg, checkpoint_path=checkpoint_path, return_model=True, tag={"phase": "pretrain"})
    if pre_record.aborted:
        raise TrainingAborted(f"pre-training aborted: {pre_record.abort_reason}")
    state = pre_model.state_dict()
    data = build_task_data(curve_cfg.task)
    with_pt = learning_curve(curve_cfg, sizes, trials, seed, data=data, init_state=state, workers=workers, label="pretrained")
    without = learning_curve(curve_cfg, sizes, trials, seed, data=data, workers=workers, label="scratch")
    return TransferResult(pre_record, with_pt, without, state)


# robustness -------------------------------------------------------------------------
def robustness_sweep(model, data: TaskData, noise_kind: str, sigma_grid, trials: int, seed: int, batch_size: int = 1000, decoding: str = "greedy") -> np.ndarray:
    """Elementwise test accuracy, shape (len(sigma_grid), trials), with the universe's objects corrupted."""
    if data.universe is None:
        raise ConfigError("robustness sweeps need a sorting task")
    base = Rng(seed)
    idx = data.indices["test"]
    table = np.zeros((len(sigma_grid), trials))
    for a, sigma in enumerate(sigma_grid):
        for t in range(trials):
            rng = base.spawn(f"{noise_kind}/sigma={sigma!r}/trial={t}")
            u = tasks.corrupt_universe(data.universe, noise_kind, float(sigma), rng)
            split = Split(u.objects[idx], data.test.y)
            table[a, t] = metrics(predict(model, data, split, batch_size, decoding), split.y)["elementwise_acc"]
    return table
