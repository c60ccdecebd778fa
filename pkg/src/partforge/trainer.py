"""Two-stage training loop: Adam with decoupled weight decay and a step-decay schedule."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff.checkpoint import load_table, save_table
from .autodiff.tensor import Tape, no_grad
from .model import (
    LOSS_TERMS,
    LossBreakdown,
    ModelConfig,
    PartCompletionModel,
    TrainItem,
    load_model,
    save_model,
)
from .priorbank import PriorBank
from .synthdata import CorruptionParams, Dataset, corrupt_scan, jitter_scan
from .voxelgrid import atomic_write_bytes

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
ABLATION_FLAGS = ("no_priors", "no_message_passing", "no_refine", "refine_absolute", "refine_additive")


@dataclass
class TrainConfig:
    batch_size: int = 24
    lr: float = 1e-3
    weight_decay: float = 0.01
    decay_factor: float = 0.8
    decay_every: int = 8
    pretrain_epochs: int = 20
    finetune_epochs: int = 10
    seed: int = 0
    resolution: int = 32
    loss_weights: dict = field(default_factory=lambda: {t: 1.0 for t in LOSS_TERMS})
    no_priors: bool = False
    no_message_passing: bool = False
    no_refine: bool = False
    refine_absolute: bool = False
    refine_additive: bool = False
    grad_clip: float = 10.0
    jitter: float = 0.1
    finetune_crop_prob: float = 0.5
    finetune_crop_depth: float = 0.4
    finetune_part_drop: float = 0.1
    finetune_dropout: float = 0.1

    def __post_init__(self):
        for name in ("batch_size", "lr", "decay_factor", "decay_every", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.jitter < 0:
            raise ValueError("weight_decay and jitter must be non-negative")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be non-negative")

    @property
    def epochs(self) -> int:
        return self.pretrain_epochs + self.finetune_epochs

    def finetune_corruption(self) -> CorruptionParams:
        return CorruptionParams(self.finetune_crop_prob, self.finetune_crop_depth,
                                self.finetune_part_drop, self.finetune_dropout, self.seed)

    def model_config(self, n_types: int, k: int) -> ModelConfig:
        return ModelConfig(
            resolution=self.resolution, n_types=n_types, k=k, seed=self.seed,
            loss_weights=dict(self.loss_weights),
            **{f: getattr(self, f) for f in ABLATION_FLAGS},
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * config.decay_factor ** (epoch // config.decay_every)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float) -> None:
    """In-place Adam update with decoupled weight decay.

    ``params`` maps names to Tensors; ``grads`` maps the same names to arrays.
    Raises FloatingPointError naming the first parameter with a non-finite
    gradient, before any parameter is touched.
    """
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        if weight_decay:
            p.data -= p.data * p.dtype.type(lr * weight_decay)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.dtype)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(scale)
    return total


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_val: float = math.inf
    best_epoch: int = -1
    adam: AdamState = field(default_factory=AdamState)


@dataclass
class TrainResult:
    model: PartCompletionModel
    state: TrainState
    log: list[dict]


def _mean_breakdown(rows: list[tuple[int, LossBreakdown]]) -> dict:
    total_n = sum(n for n, _ in rows)
    out = {}
    for key in LOSS_TERMS + ("total",):
        vals = [(n, getattr(b, key)) for n, b in rows]
        if any(v is None for _, v in vals):
            out[key] = None
        else:
            out[key] = sum(n * v for n, v in vals) / total_n
    return out


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 1009, int(epoch)])


def _batch_items(samples, stage: str, config: TrainConfig, rng: np.random.Generator) -> list[TrainItem]:
    items = []
    corruption = config.finetune_corruption()
    for s in samples:
        if stage == "finetune":
            if not corruption.is_identity:
                s = corrupt_scan(s, corruption, rng)
            scan = jitter_scan(s.scan, config.jitter, rng)
            if scan.count() == 0:
                scan = s.scan
            items.append(TrainItem.from_sample(s, scan))
        else:
            items.append(TrainItem.from_sample(s))
    return items


def evaluate_loss(model: PartCompletionModel, samples, bank, batch_size: int) -> dict | None:
    """Mean loss with frozen normalization statistics; leaves the model untouched."""
    if not samples:
        return None
    rows = []
    model.set_training(False)
    try:
        with no_grad():
            for i in range(0, len(samples), batch_size):
                chunk = samples[i:i + batch_size]
                _, bd, _ = model.batch_loss([TrainItem.from_sample(s) for s in chunk], bank)
                rows.append((len(chunk), bd))
    finally:
        model.set_training(True)
    return _mean_breakdown(rows)


# -- persistence --------------------------------------------------------------


def _save_state(directory: Path, model: PartCompletionModel, state: TrainState) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_model(model, directory)
    table = {f"m:{k}": v for k, v in state.adam.m.items()}
    table.update({f"v:{k}": v for k, v in state.adam.v.items()})
    save_table(table, directory / "optim.pfck")
    meta = {"epoch": state.epoch, "step": state.step, "adam_t": state.adam.t,
            "best_val": state.best_val if math.isfinite(state.best_val) else None,
            "best_epoch": state.best_epoch}
    atomic_write_bytes(directory / "state.json", (json.dumps(meta, sort_keys=True) + "\n").encode())


def _load_state(directory: Path) -> tuple[PartCompletionModel, TrainState]:
    model = load_model(directory)
    meta = json.loads((directory / "state.json").read_text())
    table = load_table(directory / "optim.pfck")
    adam = AdamState(
        m={k[2:]: v for k, v in table.items() if k.startswith("m:")},
        v={k[2:]: v for k, v in table.items() if k.startswith("v:")},
        t=meta["adam_t"],
    )
    best = meta["best_val"]
    state = TrainState(meta["epoch"], meta["step"], math.inf if best is None else best, meta["best_epoch"], adam)
    return model, state


def train(config: TrainConfig, dataset: Dataset, bank: PriorBank | None, out_dir=None,
          resume: bool = False, stop_after: int | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run (or continue) training; one JSON log record per epoch.

    With ``out_dir`` the run keeps ``last/`` (resumable state), ``best/``
    (lowest validation total) and ``metrics.jsonl``. ``stop_after`` ends the
    run after that many epochs in this call, for interruption tests.
    """
    train_set = dataset.split("train")
    if not train_set:
        raise ValueError("training split is empty")
    val_set = dataset.split("val")
    if not config.no_priors:
        if bank is None:
            raise ValueError("a prior bank is required unless priors are ablated")
        if bank.resolution != config.resolution:
            raise ValueError(f"bank resolution {bank.resolution} != config resolution {config.resolution}")
    if dataset.resolution != config.resolution:
        raise ValueError(f"dataset resolution {dataset.resolution} != config resolution {config.resolution}")
    n_types = dataset.taxonomy.n_part_types
    k = bank.k if bank is not None else 1

    out = Path(out_dir) if out_dir is not None else None
    log_path = out / "metrics.jsonl" if out else None
    records: list[dict] = []
    if resume and out and (out / "last" / "state.json").exists():
        model, state = _load_state(out / "last")
        if log_path.exists():
            records = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
            records = records[:state.epoch]
            log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    else:
        mc = config.model_config(n_types, k)
        mc.taxonomy_sha256 = dataset.taxonomy.digest()
        mc.bank_sha256 = bank.digest() if bank is not None else ""
        model = PartCompletionModel(mc)
        state = TrainState()
        if out:
            out.mkdir(parents=True, exist_ok=True)
            log_path.write_text("")

    names = [n for n, _ in model.named_parameters()]
    params = dict(model.named_parameters())
    done_here = 0
    while state.epoch < config.epochs:
        epoch = state.epoch
        stage = "pretrain" if epoch < config.pretrain_epochs else "finetune"
        lr = lr_schedule(config, epoch)
        rng = epoch_rng(config.seed, epoch)
        order = rng.permutation(len(train_set))
        rows = []
        norms = []
        for i in range(0, len(order), config.batch_size):
            batch = [train_set[j] for j in order[i:i + config.batch_size]]
            items = _batch_items(batch, stage, config, rng)
            with Tape() as tape:
                total, bd, _ = model.batch_loss(items, bank)
            grads = dict(zip(names, tape.backward(total, [params[n] for n in names])))
            norms.append(clip_global_norm(grads, config.grad_clip))
            adam_step(params, grads, state.adam, lr, config.weight_decay)
            state.step += 1
            rows.append((len(batch), bd))
        train_loss = _mean_breakdown(rows)
        val_loss = evaluate_loss(model, val_set, bank, config.batch_size)
        score = (val_loss or train_loss)["total"]
        improved = score < state.best_val
        if improved:
            state.best_val, state.best_epoch = score, epoch
        record = {
            "epoch": epoch, "stage": stage, "lr": lr, "steps": state.step,
            "train": train_loss, "val": val_loss, "max_grad_norm": max(norms),
            "best_epoch": state.best_epoch,
        }
        records.append(record)
        state.epoch += 1
        if out:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            if improved:
                save_model(model, out / "best")
            _save_state(out / "last", model, state)
        log.info("epoch %d %s lr=%.6g train=%.4f val=%s", epoch, stage, lr, train_loss["total"],
                 None if val_loss is None else round(val_loss["total"], 4))
        if on_epoch:
            on_epoch(record)
        done_here += 1
        if stop_after is not None and done_here >= stop_after:
            break
    return TrainResult(model, state, records)
