"""Stacked per-relation message passing with a shared probability head.

Each relation runs its own stack of layers over the same input features;
the per-relation outputs are concatenated, passed through one hidden
readout layer with ReLU, and mapped to a fraud probability by a sigmoid
head. Hidden layers use ReLU, the last message passing layer is linear,
and dropout follows each layer's activation during training.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import ndiff as nd
from .graph import PartitionIndex, RelationalGraph
from .layer import LayerVariant, PmpLayerParams, layer_forward

__all__ = ["ModelConfig", "PmpModel", "model_forward", "loss"]

_MODEL_SIDECAR = "model.json"


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    hidden_dim: int
    num_layers: int = 1
    num_relations: int = 1
    variant: LayerVariant = field(default_factory=LayerVariant.full)
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.feature_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("dimensions must be positive")
        if self.num_layers < 1 or self.num_relations < 1:
            raise ValueError("need at least one layer and one relation")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "num_relations": self.num_relations,
            "variant": self.variant.to_dict(),
            "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            feature_dim=int(d["feature_dim"]),
            hidden_dim=int(d["hidden_dim"]),
            num_layers=int(d["num_layers"]),
            num_relations=int(d["num_relations"]),
            variant=LayerVariant.from_dict(d["variant"]),
            dropout_p=float(d["dropout_p"]),
        )


class PmpModel:
    """Per-relation layer stacks, concat readout, sigmoid head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.dropout_p = config.dropout_p
        rng = np.random.default_rng(seed)
        self.layers = []
        for _ in range(config.num_relations):
            stack = []
            for l in range(config.num_layers):
                d_in = config.feature_dim if l == 0 else config.hidden_dim
                stack.append(PmpLayerParams(d_in, config.hidden_dim, rng))
            self.layers.append(stack)
        d_cat = config.num_relations * config.hidden_dim
        bound = np.sqrt(6.0 / (d_cat + config.hidden_dim))
        self.readout_W = nd.Tensor(rng.uniform(-bound, bound, (d_cat, config.hidden_dim)), requires_grad=True)
        self.readout_b = nd.Tensor(np.zeros(config.hidden_dim), requires_grad=True)
        bound = np.sqrt(6.0 / (config.hidden_dim + 1))
        self.head_w = nd.Tensor(rng.uniform(-bound, bound, (config.hidden_dim, 1)), requires_grad=True)
        self.head_b = nd.Tensor(np.zeros(1), requires_grad=True)

    def parameters(self) -> dict:
        out = {}
        for r, stack in enumerate(self.layers):
            for l, p in enumerate(stack):
                out.update(p.tensors(prefix=f"rel{r}.layer{l}."))
        out["readout.W"] = self.readout_W
        out["readout.b"] = self.readout_b
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def state(self) -> dict:
        """Copies of all parameter arrays, keyed like parameters()."""
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict):
        params = self.parameters()
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def save(self, directory: str):
        nd.save_checkpoint(directory, self.parameters())
        with open(os.path.join(directory, _MODEL_SIDECAR), "w") as fh:
            json.dump(self.config.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, directory: str) -> "PmpModel":
        with open(os.path.join(directory, _MODEL_SIDECAR)) as fh:
            config = ModelConfig.from_dict(json.load(fh))
        model = cls(config, seed=0)
        model.load_state(nd.load_checkpoint(directory))
        return model


def _positions(sorted_ids: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return np.searchsorted(sorted_ids, ids)


class _LocalSegments:
    """A BucketSegments view with member ids remapped to frontier rows."""

    __slots__ = (
        "num_segments",
        "fr_members",
        "fr_segments",
        "be_members",
        "be_segments",
        "un_members",
        "un_segments",
        "all_members",
        "all_segments",
    )

    def __init__(self, segs, sorted_frontier: np.ndarray):
        self.num_segments = segs.num_segments
        self.fr_members = _positions(sorted_frontier, segs.fr_members)
        self.fr_segments = segs.fr_segments
        self.be_members = _positions(sorted_frontier, segs.be_members)
        self.be_segments = segs.be_segments
        self.un_members = _positions(sorted_frontier, segs.un_members)
        self.un_segments = segs.un_segments
        self.all_members = _positions(sorted_frontier, segs.all_members)
        self.all_segments = segs.all_segments


def model_forward(
    model: PmpModel,
    graph: RelationalGraph,
    partition: PartitionIndex,
    features,
    batch,
    training: bool = False,
    seed: int = 0,
    epoch: int = 0,
    batch_index: int = 0,
) -> nd.Tensor:
    """Fraud probabilities for ``batch``, strictly inside (0, 1).

    Representations are computed on demand for each layer's one-hop
    frontier, so cost scales with the batch neighborhood, not the graph.
    ``features`` may be a gradient-enabled tensor for sensitivity
    analysis. Dropout masks are keyed by (seed, relation, layer, epoch,
    batch_index) and replay exactly.
    """
    cfg = model.config
    if graph.num_relations != cfg.num_relations:
        raise ValueError(f"model expects {cfg.num_relations} relations, graph has {graph.num_relations}")
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim != 1 or batch.size == 0:
        raise ValueError("batch must be a non-empty 1-d list of node ids")
    if batch.min() < 0 or batch.max() >= graph.num_nodes:
        raise ValueError("batch node index out of range")
    feats = features if isinstance(features, nd.Tensor) else nd.Tensor(features)
    if feats.shape != (graph.num_nodes, cfg.feature_dim):
        raise ValueError(f"features must be [{graph.num_nodes}, {cfg.feature_dim}]")

    per_relation = []
    for r in range(cfg.num_relations):
        fronts = [None] * (cfg.num_layers + 1)
        fronts[cfg.num_layers] = batch
        for l in range(cfg.num_layers, 0, -1):
            members, _ = graph.neighbor_segments(r, fronts[l])
            fronts[l - 1] = np.union1d(fronts[l], members)
        h = nd.gather_rows(feats, fronts[0])
        h_gate_src = h
        for l in range(1, cfg.num_layers + 1):
            centers, prev = fronts[l], fronts[l - 1]
            segs = _LocalSegments(partition.bucket_segments(r, centers), prev)
            pos = _positions(prev, centers)
            h_c = nd.gather_rows(h, pos)
            h_g = nd.gather_rows(h_gate_src, pos)
            act = layer_forward(
                model.layers[r][l - 1],
                cfg.variant,
                segs,
                h,
                h_c,
                h_g,
                use_relu=(l < cfg.num_layers),
            )
            if model.dropout_p > 0.0:
                key = np.random.SeedSequence(entropy=seed, spawn_key=(r, l, epoch, batch_index))
                h = nd.dropout(act, model.dropout_p, training, key)
            else:
                h = act
            h_gate_src = act
        per_relation.append(h)

    cat = per_relation[0] if len(per_relation) == 1 else nd.concat(per_relation, axis=1)
    hidden = nd.relu(nd.add_rowvec(nd.matmul(cat, model.readout_W), model.readout_b))
    logits = nd.add_rowvec(nd.matmul(hidden, model.head_w), model.head_b)
    return nd.sigmoid(nd.reshape(logits, (batch.size,)))


def loss(probs: nd.Tensor, labels: np.ndarray, batch, pos_weight: float | None = None) -> nd.Tensor:
    """Mean negated Bernoulli log likelihood of the batch labels.

    ``pos_weight``, when set, reweights fraud examples by that factor
    (weighted mean); by default every example counts equally.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise ValueError("empty batch")
    y = np.asarray(labels)[batch].astype(np.float64)
    per_example = nd.binary_cross_entropy(probs, y)
    if pos_weight is None:
        return nd.mean(per_example)
    w = np.where(y == 1, float(pos_weight), 1.0)
    weighted = nd.mul(per_example, nd.Tensor(w))
    return nd.affine(nd.mean(weighted), y.size / w.sum())
