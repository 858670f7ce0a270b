"""Mini-batch training with Adam and validation-AUC early stopping.

The neighbor partition is built once from train labels before the first
epoch and reused everywhere, including validation and test scoring: at
inference time only training labels are known, so val and test nodes stay
in the unlabeled bucket.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import graph as graph_mod
from . import metrics as metrics_mod
from . import ndiff as nd
from .graph import NodeTable, RelationalGraph
from .model import PmpModel, loss as loss_fn, model_forward

__all__ = ["TrainConfig", "Adam", "TrainingDiverged", "History", "train", "evaluate", "forward_scores"]

EVAL_BATCH_SIZE = 4096


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    dropout_p: float = 0.0
    batch_size: int = 512
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    selection_metric: str = "auc"
    pos_weight: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, patience must be positive")
        if self.selection_metric != "auc":
            raise ValueError("selection_metric must be 'auc'")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "dropout_p": self.dropout_p,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "selection_metric": self.selection_metric,
            "pos_weight": self.pos_weight,
        }


class TrainingDiverged(ArithmeticError):
    """Loss or a gradient became non-finite."""

    def __init__(self, epoch: int, batch_index: int, message: str = ""):
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(f"training diverged at epoch {epoch}, batch {batch_index}: {message}")


class Adam:
    """Adam with decoupled weight decay.

    update = lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta),
    so with zero gradient a parameter shrinks by the factor
    (1 - lr * weight_decay) per step.
    """

    def __init__(self, params: dict, learning_rate: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        if learning_rate < 0 or weight_decay < 0 or eps <= 0:
            raise ValueError("invalid optimizer hyperparameter")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        self.params = dict(params)
        self.lr = float(learning_rate)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: dict):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise nd.NonFiniteError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update


@dataclass
class History:
    """Per-epoch (train_loss, val_auc) plus which epoch was kept."""

    entries: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = math.nan

    def append(self, epoch: int, train_loss: float, val_auc: float):
        self.entries.append((epoch, train_loss, val_auc))

    def to_csv(self, path: str, meta_line: str = ""):
        with open(path, "w") as fh:
            if meta_line:
                fh.write(f"# {meta_line}\n")
            fh.write("epoch,train_loss,val_auc\n")
            for epoch, train_loss, val_auc in self.entries:
                fh.write(f"{epoch},{train_loss:.17g},{val_auc:.17g}\n")


def forward_scores(model: PmpModel, graph: RelationalGraph, partition, features, ids: np.ndarray,
                   batch_size: int = EVAL_BATCH_SIZE) -> np.ndarray:
    """Deterministic probabilities for a node list, computed in chunks."""
    out = np.empty(ids.size, dtype=np.float64)
    for start in range(0, ids.size, batch_size):
        chunk = ids[start : start + batch_size]
        z = model_forward(model, graph, partition, features, chunk, training=False)
        out[start : start + chunk.size] = z.data
    return out


def _val_auc(model, graph, partition, table: NodeTable) -> float:
    ids = table.split_ids("val")
    labels = table.labels[ids]
    if ids.size == 0 or (labels == 1).sum() == 0 or (labels == 0).sum() == 0:
        return math.nan
    scores = forward_scores(model, graph, partition, table.features, ids)
    return metrics_mod.auc(scores, labels)


def train(model: PmpModel, graph: RelationalGraph, table: NodeTable, config: TrainConfig):
    """Train in place; returns (model, History) with the best-epoch weights.

    Selection tracks validation AUC; training stops after ``patience``
    epochs without improvement. If the val split cannot score an AUC
    (empty or single-class), selection is disabled and the final epoch is
    kept, with NaN recorded in the history.
    """
    model.dropout_p = config.dropout_p
    partition = graph_mod.PartitionIndex.from_table(graph, table)
    params = model.parameters()
    opt = Adam(params, config.learning_rate, config.weight_decay)
    tape = nd.GradientTape(params)
    rng = np.random.default_rng(config.seed)
    train_ids = table.split_ids("train")
    history = History()
    best_state = model.state()
    best_auc = -math.inf
    stale = 0

    for epoch in range(config.max_epochs):
        perm = rng.permutation(train_ids)
        total_loss = 0.0
        for batch_index, start in enumerate(range(0, perm.size, config.batch_size)):
            batch = perm[start : start + config.batch_size]
            try:
                probs = model_forward(
                    model, graph, partition, table.features, batch,
                    training=True, seed=config.seed, epoch=epoch, batch_index=batch_index,
                )
                batch_loss = loss_fn(probs, table.labels, batch, pos_weight=config.pos_weight)
                grads = tape.gradients(batch_loss)
                opt.step(grads)
            except nd.NonFiniteError as err:
                raise TrainingDiverged(epoch, batch_index, str(err)) from err
            total_loss += float(batch_loss.data) * batch.size
        train_loss = total_loss / perm.size
        try:
            val_auc = _val_auc(model, graph, partition, table)
        except nd.NonFiniteError as err:
            raise TrainingDiverged(epoch, -1, str(err)) from err
        history.append(epoch, train_loss, val_auc)
        if math.isnan(val_auc):
            # No usable validation signal; keep the latest weights.
            best_state = model.state()
            history.best_epoch = epoch
            continue
        if val_auc >= best_auc:
            # Ties keep the later epoch: equal validation AUC cannot pick a
            # winner, so prefer the state with more optimization behind it.
            # Only a strict improvement resets the patience counter.
            stale = 0 if val_auc > best_auc else stale + 1
            best_auc = val_auc
            best_state = model.state()
            history.best_epoch = epoch
            history.best_val_auc = val_auc
        else:
            stale += 1
        if stale >= config.patience:
            break

    model.load_state(best_state)
    return model, history


def evaluate(model: PmpModel, graph: RelationalGraph, table: NodeTable, split: str,
             threshold: float = 0.5, seed: int = -1) -> metrics_mod.MetricsReport:
    """Metrics for one split, using the train-label partition."""
    partition = graph_mod.PartitionIndex.from_table(graph, table)
    ids = table.split_ids(split)
    if ids.size == 0:
        raise ValueError(f"split {split!r} is empty")
    scores = forward_scores(model, graph, partition, table.features, ids)
    return metrics_mod.compute_report(scores, table.labels[ids], threshold, split=split, seed=seed)
