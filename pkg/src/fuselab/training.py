"""Adam training with component-wise learning rates and early stopping.

Each run owns three optimizer groups (backbone incl. fusion, text MLP,
projection), each at its default learning rate times one shared sweep
multiplier. The model with the lowest validation loss is kept and
evaluated once on the test split.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import rng as _rng
from .autodiff import Tensor, backward, mse_loss
from .backbone import ForecastModel
from .data import Splits, WindowBatch
from .layers import restore, snapshot

LR_MULTIPLIERS = (0.05, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0)

IMPROVEMENT_TOLERANCE = 1e-12
DIVERGENCE_FACTOR = 10.0


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr_backbone: float = 1e-4
    lr_text_mlp: float = 1e-2
    lr_projection: float = 1e-3
    lr_multiplier: float = 1.0
    batch: int = 32
    max_epochs: int = 10
    patience: int = 5
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")

    def group_lrs(self) -> Dict[str, float]:
        m = self.lr_multiplier
        return {
            "backbone": self.lr_backbone * m,
            "text_mlp": self.lr_text_mlp * m,
            "projection": self.lr_projection * m,
        }


@dataclass
class RunRecord:
    seed: int
    lr_multiplier: float
    train_losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    best_val_epoch: int = 0
    best_val_mse: float = float("inf")
    test_mse: float = float("nan")
    test_mae: float = float("nan")
    per_label_mse: Dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0
    epochs_run: int = 0
    shuffled: bool = True
    failed: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "lr_multiplier": self.lr_multiplier,
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "best_val_epoch": self.best_val_epoch,
            "best_val_mse": self.best_val_mse,
            "test_mse": self.test_mse,
            "test_mae": self.test_mae,
            "per_label_mse": self.per_label_mse,
            "wall_time": self.wall_time,
            "epochs_run": self.epochs_run,
            "shuffled": self.shuffled,
            "failed": self.failed,
        }


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on `params`."""
    state.setdefault("t", 0)
    state["t"] += 1
    t = state["t"]
    m = state.setdefault("m", {k: np.zeros_like(v.data) for k, v in params.items()})
    v = state.setdefault("v", {k: np.zeros_like(p.data) for k, p in params.items()})
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient on {name}", epoch=-1)
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1**t)
        v_hat = v[name] / (1.0 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Component-wise Adam over a model's parameter groups."""

    def __init__(self, groups: Dict[str, Dict[str, Tensor]], lrs: Dict[str, float]):
        self.groups = {name: params for name, params in groups.items() if params}
        self.lrs = lrs
        self.states: Dict[str, dict] = {name: {} for name in self.groups}

    def step(self) -> None:
        for name, params in self.groups.items():
            grads = {k: p.grad for k, p in params.items()}
            for k, g in grads.items():
                if g is None:
                    grads[k] = np.zeros_like(params[k].data)
            adam_step(params, grads, self.states[name], self.lrs[name])


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def _batched_indices(count: int, batch: int):
    for start in range(0, count, batch):
        yield np.arange(start, min(start + batch, count))


def evaluate(model: ForecastModel, batch: WindowBatch, batch_size: int = 256) -> Tuple[float, float]:
    """Mean MSE / MAE over a window batch, in normalized space."""
    if batch.count == 0:
        raise ValueError("evaluate: empty batch")
    se = ae = 0.0
    n = 0
    for idx in _batched_indices(batch.count, batch_size):
        result = model.forward(batch.x[idx], batch.z_text_raw[idx])
        err = result.yhat.data - batch.y[idx]
        se += float(np.sum(err**2))
        ae += float(np.sum(np.abs(err)))
        n += err.size
    return se / n, ae / n


def per_label_mse(model: ForecastModel, batch: WindowBatch) -> Dict[str, float]:
    if batch.labels is None:
        return {}
    out: Dict[str, float] = {}
    for label in sorted(set(batch.labels.tolist())):
        subset = batch.subset(batch.labels == label)
        mse, _ = evaluate(model, subset)
        out[label] = mse
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train_run(model: ForecastModel, data: Splits, cfg: TrainConfig) -> RunRecord:
    """Train with early stopping, restore the best checkpoint, test once."""
    for split_name, split in (("train", data.train), ("val", data.val), ("test", data.test)):
        if split.count < 1:
            raise ValueError(f"train_run: {split_name} split has no windows")

    record = RunRecord(seed=cfg.seed, lr_multiplier=cfg.lr_multiplier, shuffled=cfg.shuffle)
    start = time.perf_counter()
    params = model.params()
    optimizer = Adam(model.param_groups(), cfg.group_lrs())

    best_snapshot = snapshot(params)
    best_val = float("inf")
    bad_epochs = 0

    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.shuffle:
            order = _rng.stream(cfg.seed, "shuffle", str(epoch)).permutation(data.train.count)
        else:
            order = np.arange(data.train.count)
        epoch_loss = 0.0
        batches = 0
        for s in range(0, data.train.count, cfg.batch):
            idx = order[s : s + cfg.batch]
            result = model.forward(data.train.x[idx], data.train.z_text_raw[idx])
            loss = mse_loss(result.yhat, Tensor(data.train.y[idx]))
            value = float(loss.data[0])
            if not np.isfinite(value):
                raise TrainingDiverged(f"NaN loss at epoch {epoch}", epoch=epoch)
            backward(loss)
            optimizer.step()
            epoch_loss += value
            batches += 1
        record.train_losses.append(epoch_loss / batches)

        val_mse, _ = evaluate(model, data.val)
        if not np.isfinite(val_mse):
            raise TrainingDiverged(f"NaN validation loss at epoch {epoch}", epoch=epoch)
        record.val_losses.append(val_mse)
        record.epochs_run = epoch

        if val_mse < best_val - IMPROVEMENT_TOLERANCE:
            best_val = val_mse
            record.best_val_epoch = epoch
            best_snapshot = snapshot(params)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    restore(params, best_snapshot)
    record.best_val_mse = best_val
    record.test_mse, record.test_mae = evaluate(model, data.test)
    record.per_label_mse = per_label_mse(model, data.test)
    record.wall_time = time.perf_counter() - start
    return record


@dataclass
class SweepResult:
    best: RunRecord
    records: List[RunRecord]
    best_model: ForecastModel


def lr_sweep(
    model_factory: Callable[[], ForecastModel],
    data: Splits,
    cfg_template: TrainConfig,
    multipliers: Tuple[float, ...] = LR_MULTIPLIERS,
) -> SweepResult:
    """Train once per multiplier; best = lowest val loss, ties to lower lr.

    Runs are ordered by multiplier. Diverged runs are recorded as failed;
    if every run fails the sweep raises. The trained model of the winning
    run is returned for diagnostics.
    """
    records: List[RunRecord] = []
    best_record: Optional[RunRecord] = None
    best_model: Optional[ForecastModel] = None
    for multiplier in multipliers:
        cfg = replace(cfg_template, lr_multiplier=multiplier)
        model = model_factory()
        try:
            record = train_run(model, data, cfg)
        except TrainingDiverged as exc:
            records.append(RunRecord(seed=cfg.seed, lr_multiplier=multiplier, failed=str(exc)))
            continue
        records.append(record)
        if best_record is None or record.best_val_mse < best_record.best_val_mse:
            best_record, best_model = record, model
    if best_record is None:
        raise TrainingDiverged("all sweep runs diverged", epoch=-1)
    return SweepResult(best=best_record, records=records, best_model=best_model)


def divergence_flag(record: RunRecord, unimodal_val_mse: Optional[float]) -> bool:
    """Tag runs whose validation MSE blows past the unimodal baseline."""
    if record.failed is not None:
        return True
    if unimodal_val_mse is None or not np.isfinite(unimodal_val_mse):
        return False
    return record.best_val_mse > DIVERGENCE_FACTOR * unimodal_val_mse
