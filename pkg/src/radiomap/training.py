"""Seeded training loop, evaluation and baselines."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import Adam, Tensor, mse_loss
from .model import UNetDCN, predict
from .scaling import ScalingConfig, nmse_db, rmse


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    lr_factor: float = 0.5
    patience_lr: int = 3
    patience_early: int = 6
    max_epochs: int = 100
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience_lr < 1:
            raise ValueError("batch_size, max_epochs and patience_lr must be positive")
        if not self.lr > 0 or not 0 < self.lr_factor < 1:
            raise ValueError("lr must be positive and lr_factor in (0, 1)")
        if self.patience_early < self.patience_lr:
            raise ValueError("patience_early must be >= patience_lr")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Samples:
    """Encoded inputs ``(N, C, H, W)`` with grayscale targets ``(N, 1, H, W)``."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 4 or self.targets.ndim != 4 or self.targets.shape[1] != 1:
            raise ValueError("inputs must be (N, C, H, W) and targets (N, 1, H, W)")
        if len(self.inputs) != len(self.targets) or self.inputs.shape[2:] != self.targets.shape[2:]:
            raise ValueError("inputs and targets disagree in count or size")

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "Samples":
        idx = np.asarray(idx)
        return Samples(self.inputs[idx], self.targets[idx])


def dihedral(x: np.ndarray, code: int) -> np.ndarray:
    """One of the 8 square symmetries on the last two axes: ``code & 3`` quarter turns, then a flip if ``code & 4``."""
    y = np.rot90(x, code & 3, axes=(-2, -1))
    if code & 4:
        y = y[..., ::-1]
    return y


def augment_batch(inputs: np.ndarray, targets: np.ndarray, codes) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``codes[i]`` jointly to every channel of sample ``i`` and to its target."""
    xi = np.stack([dihedral(x, c) for x, c in zip(inputs, codes)])
    yi = np.stack([dihedral(y, c) for y, c in zip(targets, codes)])
    return xi, yi


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_rmse: float = math.inf
    stopped_early: bool = False

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_rmse", "val_rmse", "lr"])
            for h in self.history:
                w.writerow([h["epoch"], repr(h["train_rmse"]), repr(h["val_rmse"]), repr(h["lr"])])


def eval_rmse(model: UNetDCN, data: Samples, batch_size: int = 16) -> float:
    """Grayscale RMSE of clamped eval-mode predictions."""
    pred = np.clip(predict(model, data.inputs, batch_size), 0.0, 1.0)
    return rmse(pred, data.targets)


def train(model: UNetDCN, train_set: Samples, val_set: Samples | None, cfg: TrainConfig,
          log=None) -> TrainResult:
    """Adam on MSE with plateau LR decay, early stopping and best-epoch restore.

    If ``val_set`` is None, the eval-mode RMSE on the training set is monitored
    instead (used for memorisation runs).
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    monitor = val_set if val_set is not None else train_set
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    dt = model.config.dtype
    result = TrainResult()
    best_state = model.state_dict()
    since_best = 0
    since_lr = 0
    n = len(train_set)
    for epoch in range(cfg.max_epochs):
        model.train()
        order = rng.permutation(n)
        codes = rng.integers(0, 8, size=n) if cfg.augment else np.zeros(n, dtype=int)
        sq, count = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x, y = train_set.inputs[idx], train_set.targets[idx]
            if cfg.augment:
                x, y = augment_batch(x, y, codes[idx])
            opt.zero_grad()
            loss = mse_loss(model(np.ascontiguousarray(x, dtype=dt)), Tensor(np.ascontiguousarray(y, dtype=dt)))
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}, batch starting at {s}")
            loss.backward()
            opt.step()
            sq += value * len(idx)
            count += len(idx)
        train_rmse = math.sqrt(sq / count)
        val_rmse = eval_rmse(model, monitor)
        result.history.append({"epoch": epoch, "train_rmse": train_rmse, "val_rmse": val_rmse, "lr": opt.lr})
        if log is not None:
            log(f"epoch {epoch:3d} train {train_rmse:.5f} val {val_rmse:.5f} lr {opt.lr:.2e}")
        if val_rmse < result.best_val_rmse:
            result.best_val_rmse, result.best_epoch = val_rmse, epoch
            best_state = model.state_dict()
            since_best = since_lr = 0
        else:
            since_best += 1
            since_lr += 1
            if since_best >= cfg.patience_early:
                result.stopped_early = True
                break
            if since_lr >= cfg.patience_lr:
                opt.lr = opt.lr * cfg.lr_factor
                since_lr = 0
    model.load_state_dict(best_state)
    model.eval()
    model.trained = True
    return result


@dataclass
class MetricsReport:
    rmse_gray: float
    rmse_db: float
    nmse_db: float
    baseline_rmse_gray: float
    baseline_rmse_db: float
    baseline_nmse_db: float

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_report(pred_gray: np.ndarray, target_gray: np.ndarray, baseline_value: float,
                   scaling: ScalingConfig | None = None) -> MetricsReport:
    """Metrics of clamped predictions next to those of a constant predictor."""
    scaling = scaling or ScalingConfig()
    pred = np.clip(pred_gray, 0.0, 1.0)
    base = np.full_like(np.asarray(target_gray, dtype=np.float64), baseline_value)
    return MetricsReport(rmse(pred, target_gray), rmse(pred, target_gray, "db", scaling),
                         nmse_db(pred, target_gray, scaling),
                         rmse(base, target_gray), rmse(base, target_gray, "db", scaling),
                         nmse_db(base, target_gray, scaling))


def evaluate(model: UNetDCN, data: Samples, scaling: ScalingConfig | None = None,
             baseline_value: float | None = None) -> MetricsReport:
    """Metrics on ``data``; the baseline predicts ``baseline_value`` (default: the mean target of ``data``)."""
    if baseline_value is None:
        baseline_value = float(np.mean(data.targets))
    return metrics_report(predict(model, data.inputs), data.targets, baseline_value, scaling)
