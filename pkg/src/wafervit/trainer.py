"""Losses, Adam and the training loop.

All randomness derives from ``TrainConfig.seed`` through named sub-streams
(``init``, ``shuffle``, ``augment``, ``dropout``), so two runs with the same
seed and config produce bitwise-identical checkpoints.
"""

import csv
from dataclasses import asdict, dataclass, field
import logging
import math
import os
from typing import Callable, Dict, List, Optional

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import Dataset, augment_grids, target_matrix, to_model_batch
from .errors import ConfigError, ContractError, TrainingDiverged
from .metrics import EvalReport, evaluate
from .patterns import MASK_TO_INDEX, NUM_BASE, NUM_CLASSES
from .tensor import Tensor
from .vit import VitModel

log = logging.getLogger(__name__)

LOSS_MODES = ("bce", "ce")
STREAMS = {"init": 1, "shuffle": 2, "augment": 3, "dropout": 4}
HISTORY_HEADER = ("epoch", "train_loss", "train_acc", "val_acc")


def stream_seed(seed: int, name: str) -> List[int]:
    return [int(seed), STREAMS[name]]


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 30
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    loss_mode: str = "bce"
    eval_every: int = 1
    augment: bool = True
    threshold: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- losses --------------------------------------------------------------

def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on logits, ``max(z,0) - z*t + log(1 + exp(-|z|))``."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    if t.shape != z.shape:
        raise ContractError(f"bce_loss: logits {z.shape} vs targets {t.shape}")
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return ((sig - t) * (g / n),)

    return T.custom_op(np.asarray(loss.mean(), dtype=z.dtype), (logits,), backward)


def ce_loss(logits: Tensor, class_ids) -> Tensor:
    """Mean softmax cross-entropy; ``class_ids`` are 0-based column indices."""
    z = logits.data
    y = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    if z.ndim != 2 or len(y) != len(z):
        raise ContractError(f"ce_loss: logits {z.shape} vs {len(y)} class ids")
    if ((y < 0) | (y >= z.shape[1])).any():
        raise ContractError(f"ce_loss: class ids must lie in [0, {z.shape[1]})")
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    rows = np.arange(len(y))
    loss = lse - z[rows, y]
    n = len(y)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, y] -= 1.0
        return (p * (g / n),)

    return T.custom_op(np.asarray(loss.mean(), dtype=z.dtype), (logits,), backward)


# -- optimizer -----------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, named_params) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in named_params},
                   {k: np.zeros_like(p.data) for k, p in named_params}, 0)

    def to_dict(self) -> dict:
        return {"step": self.step, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict, dtype=None) -> "AdamState":
        cast = (lambda a: np.array(a, dtype=dtype)) if dtype else np.array
        return cls({k: cast(a) for k, a in d["m"].items()},
                   {k: cast(a) for k, a in d["v"].items()}, int(d["step"]))

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.step)


def adam_step(named_params, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update in place.

    Decoupled weight decay (``theta -= lr * wd * theta``) happens before the
    moment update.  Parameters without a gradient are treated as having a
    zero gradient.
    """
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient in tensor {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- loop ----------------------------------------------------------------

@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: Optional[float]


@dataclass
class TrainResult:
    model: VitModel
    optimizer: AdamState
    history: List[HistoryRow]
    best_epoch: int
    best_val_acc: Optional[float]
    best_model: VitModel

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def history_to_csv(rows: List[HistoryRow]) -> str:
    lines = [",".join(HISTORY_HEADER)]
    for r in rows:
        val = "" if r.val_acc is None else repr(float(r.val_acc))
        lines.append(f"{r.epoch},{float(r.train_loss)!r},{float(r.train_acc)!r},{val}")
    return "\n".join(lines) + "\n"


def check_compatible(model: VitModel, loss_mode: str) -> None:
    cfg = model.config
    want = ("multilabel", NUM_BASE) if loss_mode == "bce" else ("multiclass", NUM_CLASSES)
    if (cfg.head_mode, cfg.num_outputs) != want:
        raise ConfigError(
            f"loss_mode {loss_mode!r} needs head_mode={want[0]}, num_outputs={want[1]}; "
            f"model has head_mode={cfg.head_mode}, num_outputs={cfg.num_outputs}")


def _targets(masks: np.ndarray, loss_mode: str):
    if loss_mode == "bce":
        return target_matrix(masks)
    return np.array([MASK_TO_INDEX[m] for m in masks], dtype=np.int64)


def _n_correct(logits: np.ndarray, masks: np.ndarray, loss_mode: str) -> int:
    if loss_mode == "bce":
        pred = logits >= 0.0
        return int(np.all(pred == target_matrix(masks).astype(bool), axis=1).sum())
    truth = np.array([MASK_TO_INDEX[m] for m in masks])
    return int((logits.argmax(axis=1) == truth).sum())


def predict_scores(model: VitModel, ds: Dataset, batch_size: int = 256) -> np.ndarray:
    """Sigmoid probabilities ``[n, 8]`` or softmax scores ``[n, 38]`` in eval mode."""
    cfg = model.config
    dtype = model.params["head.bias"].dtype
    out = []
    with T.no_grad():
        for lo in range(0, len(ds), batch_size):
            x = to_model_batch(ds.grids[lo:lo + batch_size], cfg.image_size, dtype)
            z = model(Tensor(x, dtype=dtype)).data.astype(np.float64)
            if cfg.head_mode == "multilabel":
                out.append(0.5 * (1.0 + np.tanh(0.5 * z)))
            else:
                e = np.exp(z - z.max(axis=1, keepdims=True))
                out.append(e / e.sum(axis=1, keepdims=True))
    width = cfg.num_outputs
    return np.concatenate(out) if out else np.zeros((0, width))


def evaluate_model(model: VitModel, ds: Dataset, threshold: float = 0.5,
                   batch_size: int = 256) -> EvalReport:
    return evaluate(predict_scores(model, ds, batch_size), ds.masks, threshold)


def exact_match_accuracy(model: VitModel, ds: Dataset, threshold: float = 0.5) -> float:
    return evaluate_model(model, ds, threshold).exact_match_accuracy


def train(model: VitModel, train_ds: Dataset, test_ds: Optional[Dataset], config: TrainConfig,
          out_dir: Optional[str] = None,
          on_epoch: Optional[Callable[[HistoryRow], None]] = None) -> TrainResult:
    """Train ``model`` in place.

    With ``out_dir`` set, ``final.wvck`` is rewritten after every epoch (so
    it always holds the last good state), ``best.wvck`` tracks the best
    validation accuracy and ``history.csv`` is written at the end.
    """
    if len(train_ds) == 0:
        raise ContractError("training set is empty")
    check_compatible(model, config.loss_mode)
    cfg = model.config
    dtype = model.params["head.bias"].dtype
    shuffle_rng = substream(config.seed, "shuffle")
    aug_rng = substream(config.seed, "augment")
    drop_rng = substream(config.seed, "dropout")
    state = AdamState.zeros_like(model.named_parameters())
    history: List[HistoryRow] = []
    best_epoch, best_val, best_model = 0, None, model.copy()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _save(out_dir, "final.wvck", model, state, config, 0)
        _save(out_dir, "best.wvck", model, state, config, 0)

    n = len(train_ds)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            grids = train_ds.grids[idx]
            masks = train_ds.masks[idx]
            if config.augment:
                grids = augment_grids(grids, aug_rng)
            x = Tensor(to_model_batch(grids, cfg.image_size, dtype), dtype=dtype)
            logits = model(x, training=True, rng=drop_rng)
            if config.loss_mode == "bce":
                loss = bce_loss(logits, _targets(masks, "bce"))
            else:
                loss = ce_loss(logits, _targets(masks, "ce"))
            lv = loss.item()
            if not math.isfinite(lv):
                T.get_tape().clear()
                raise TrainingDiverged(f"loss became {lv} at epoch {epoch}")
            model.zero_grad()
            T.backward(loss)
            adam_step(model.named_parameters(), state, config.learning_rate, config.beta1,
                      config.beta2, config.adam_eps, config.weight_decay)
            loss_sum += lv * len(idx)
            correct += _n_correct(logits.data, masks, config.loss_mode)
        val = None
        if test_ds is not None and len(test_ds) and (
                epoch % config.eval_every == 0 or epoch == config.epochs):
            val = exact_match_accuracy(model, test_ds, config.threshold)
            if best_val is None or val > best_val:
                best_epoch, best_val, best_model = epoch, val, model.copy()
                if out_dir:
                    _save(out_dir, "best.wvck", model, state, config, epoch)
        row = HistoryRow(epoch, loss_sum / n, correct / n, val)
        history.append(row)
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %s", epoch, row.train_loss,
                 row.train_acc, "-" if val is None else f"{val:.4f}")
        if on_epoch:
            on_epoch(row)
        if out_dir:
            _save(out_dir, "final.wvck", model, state, config, epoch)
    if best_val is None:
        best_model = model.copy()
        best_epoch = config.epochs
    result = TrainResult(model, state, history, best_epoch, best_val, best_model)
    if out_dir:
        with open(os.path.join(out_dir, "history.csv"), "w") as fh:
            fh.write(result.history_csv())
        if best_val is None:
            _save(out_dir, "best.wvck", model, state, config, config.epochs)
    return result


def _save(out_dir, name, model, state, config, epoch):
    checkpoint.save(os.path.join(out_dir, name), model, state.to_dict(),
                    {"train_config": config.to_dict(), "epoch": epoch})


def read_history_csv(path) -> List[HistoryRow]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [HistoryRow(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]),
                       float(r["val_acc"]) if r["val_acc"] else None) for r in rows]
