"""Stratified splitting, momentum SGD, plateau scheduling, metrics and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Dataset
from .model import ModelConfig, Output, batch_loss, forward, init_params

log = logging.getLogger(__name__)

# named sub-streams of the run seed
STREAMS = {"init": 0, "shuffle": 1, "split": 2, "synth": 3}


def rng_for(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[stream]])


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 0.001
    weight_decay: float = 5e-5
    momentum: float = 0.9
    num_epoch: int = 100
    plateau_patience: int = 3
    plateau_factor: float = 0.8
    seed: int = 0
    split_ratio: tuple[int, int, int] = (8, 1, 1)
    split_bin_width: float = 0.01

    def __post_init__(self):
        self.split_ratio = tuple(int(x) for x in self.split_ratio)
        if len(self.split_ratio) != 3 or min(self.split_ratio) <= 0:
            raise ValueError("split_ratio needs three positive integers")
        for name in ("batch_size", "lr", "num_epoch", "plateau_patience", "plateau_factor", "split_bin_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.momentum < 0:
            raise ValueError("weight_decay and momentum must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["split_ratio"] = list(self.split_ratio)
        return out


# --- splitting --------------------------------------------------------------

def stratified_split(labels, seed: int = 0, ratio=(8, 1, 1), bin_width: float = 0.01,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-bin seeded 8:1:1 split of sample indices.

    Labels are grouped into ``bin_width`` bins starting at the smallest
    label. Each bin gets floor shares; the remainder goes round-robin to
    train, then val, then test.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("cannot split an empty dataset")
    if not np.all(np.isfinite(labels)):
        raise ValueError("every record needs a finite label to be split")
    rng = rng or rng_for(seed, "split")
    order = np.argsort(labels, kind="stable")
    bins = np.floor(np.round((labels[order] - labels[order[0]]) / bin_width, 9)).astype(np.int64)
    bounds = np.flatnonzero(np.diff(bins)) + 1
    total = sum(ratio)
    parts: list[list[np.ndarray]] = [[], [], []]
    for group in np.split(order, bounds):
        group = group[rng.permutation(group.size)]
        n = group.size
        counts = [n * k // total for k in ratio]
        for k in range(n - sum(counts)):
            counts[k % 3] += 1
        start = 0
        for k in range(3):
            parts[k].append(group[start:start + counts[k]])
            start += counts[k]
    return tuple(np.sort(np.concatenate(p)) if p else np.zeros(0, np.int64) for p in parts)


# --- optimization -----------------------------------------------------------

def decays(name: str) -> bool:
    """LayerNorm gains/biases are exempt from weight decay."""
    return ".norm" not in name


def sgd_momentum_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict[str, np.ndarray],
                      lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """In place: g' = g + wd*theta; v = momentum*v + g'; theta -= lr*v."""
    for name, g in grads.items():
        # a NaN or inf anywhere survives the sum
        if not math.isfinite(float(g.sum())):
            raise FloatingPointError(f"non-finite gradient for {name}")
    for name, p in params.items():
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p.data)
        v *= momentum
        v += grads[name]
        if weight_decay and decays(name):
            v += weight_decay * p.data
        p.data -= lr * v


def plateau_schedule(val_history, lr: float, patience: int = 3, factor: float = 0.8) -> float:
    """Learning rate after replaying ``val_history`` from ``lr``.

    Each time the best value so far has gone ``patience`` epochs without a
    strict improvement, the rate is multiplied by ``factor`` and the count
    restarts.
    """
    best = math.inf
    stale = 0
    for v in val_history:
        if v < best:
            best, stale = v, 0
        else:
            stale += 1
            if stale >= patience:
                lr *= factor
                stale = 0
    return lr


# --- metrics ----------------------------------------------------------------

@dataclass
class MetricsReport:
    mae: float
    log_mae: float
    smape: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(y_true, y_pred) -> MetricsReport:
    y = np.asarray(y_true, dtype=np.float64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y.shape != p.shape or y.size == 0:
        raise ValueError("need equal-length, non-empty label and prediction vectors")
    err = np.abs(y - p)
    mae = float(err.mean())
    denom = (np.abs(y) + np.abs(p)) / 2.0
    ratio = np.divide(err, denom, out=np.zeros_like(err), where=denom > 0)
    return MetricsReport(mae, math.log(mae) if mae > 0 else -math.inf, float(100.0 * ratio.mean()), int(y.size))


def predict(params: dict[str, Tensor], data: Dataset, config: ModelConfig, batch_size: int = 512) -> np.ndarray:
    """Decoded predictions in Hz (argmax class upper edge, or scaled sigmoid)."""
    out = np.zeros(len(data))
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = forward(data.features[sl], data.adjacency[sl], data.mask[sl], params, config).scc
    return out


def evaluate(params: dict[str, Tensor], data: Dataset, config: ModelConfig) -> MetricsReport:
    if not data.labeled:
        raise ValueError("evaluation needs labeled samples")
    return metrics(data.labels, predict(params, data, config))


# --- training loop ----------------------------------------------------------

class NaNLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_mae: float
    val_smape: float
    lr: float


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    best_params: dict[str, Tensor]
    best_epoch: int
    log: list[EpochLog] = field(default_factory=list)


def _copy(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}


def train(train_set: Dataset, val_set: Dataset, model_config: ModelConfig, train_config: TrainConfig,
          params: dict[str, Tensor] | None = None, callback=None) -> TrainResult:
    """Mini-batch momentum SGD for ``num_epoch`` epochs.

    Classification sums cross entropy over the batch; ``train_loss`` in the
    log is the per-sample mean. The learning rate follows the plateau rule
    on validation MAE, and the parameters with the lowest validation MAE are
    kept alongside the final ones.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    tc = train_config
    if params is None:
        params = init_params(model_config, rng_for(tc.seed, "init"))
    shuffle = rng_for(tc.seed, "shuffle")
    state: dict[str, np.ndarray] = {}
    plist = list(params.values())
    lr = tc.lr
    history: list[float] = []
    result = TrainResult(params, _copy(params), 0)
    best = math.inf
    for epoch in range(1, tc.num_epoch + 1):
        t0 = time.perf_counter()
        order = shuffle.permutation(len(train_set))
        total = 0.0
        for b, start in enumerate(range(0, len(order), tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            with ad.Tape() as tape:
                out = forward(train_set.features[idx], train_set.adjacency[idx], train_set.mask[idx],
                              params, model_config)
                loss = batch_loss(out, train_set.labels[idx], model_config)
                if not np.isfinite(loss.item()):
                    raise NaNLossError(epoch, b)
                tape.backward(loss, plist)
            total += loss.item() * (1 if model_config.head == "classification" else len(idx))
            sgd_momentum_step(params, {k: p.grad for k, p in params.items()}, state,
                              lr, tc.momentum, tc.weight_decay)
        report = evaluate(params, val_set, model_config) if len(val_set) else MetricsReport(math.nan, math.nan, math.nan, 0)
        entry = EpochLog(epoch, total / len(train_set), report.mae, report.smape, lr)
        result.log.append(entry)
        log.info("epoch %d loss %.4f val_mae %.4f val_smape %.3f lr %.3g (%.1fs)", epoch, entry.train_loss,
                 entry.val_mae, entry.val_smape, lr, time.perf_counter() - t0)
        # without a validation set the latest parameters count as best
        if report.mae < best or not len(val_set):
            best = report.mae
            result.best_params = _copy(params)
            result.best_epoch = epoch
        if np.isfinite(report.mae):
            history.append(report.mae)
            lr = plateau_schedule(history, tc.lr, tc.plateau_patience, tc.plateau_factor)
        if callback is not None:
            callback(entry, params)
    return result
