"""Optimizer arithmetic, the training loop, and split evaluation."""
import math

import numpy as np
import pytest

from pmpfraud import ndiff as nd
from pmpfraud.graph import NodeTable, PartitionIndex
from pmpfraud.layer import LayerVariant
from pmpfraud.model import ModelConfig, PmpModel
from pmpfraud.synth import generate_ba_graph, generate_features, make_splits
from pmpfraud.training import (
    Adam,
    History,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    forward_scores,
    train,
)

from .reference import counted_metrics


def small_dataset(seed=0, n=60):
    g, labels = generate_ba_graph(n, 2, 0.3, seed=seed)
    x = generate_features(labels, feature_dim=4, seed=seed + 1)
    splits = make_splits(n, (0.5, 0.25, 0.25), seed=seed + 2, stratify_labels=labels)
    return g, NodeTable(x, labels, splits)


def small_model(table, hidden=8, seed=0, variant=None):
    cfg = ModelConfig(
        feature_dim=table.feature_dim,
        hidden_dim=hidden,
        variant=variant or LayerVariant.full(),
    )
    return PmpModel(cfg, seed=seed)


class TestAdam:
    def test_single_step_closed_form(self):
        theta = nd.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam({"w": theta}, learning_rate=0.1)
        g = np.array([0.5, -3.0])
        opt.step({"w": g})
        # bias corrections cancel at t=1: update = g / (|g| + eps)
        want = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_array_equal(theta.data, want)

    def test_zero_gradient_with_decay_shrinks_multiplicatively(self):
        theta = nd.Tensor(np.array([4.0, -8.0]), requires_grad=True)
        opt = Adam({"w": theta}, learning_rate=0.05, weight_decay=0.1)
        for step in range(3):
            opt.step({"w": np.zeros(2)})
        want = np.array([4.0, -8.0]) * (1.0 - 0.05 * 0.1) ** 3
        np.testing.assert_allclose(theta.data, want, rtol=1e-14)

    def test_zero_learning_rate_is_identity(self):
        theta = nd.Tensor(np.array([3.0]), requires_grad=True)
        opt = Adam({"w": theta}, learning_rate=0.0, weight_decay=0.5)
        opt.step({"w": np.array([7.0])})
        np.testing.assert_array_equal(theta.data, [3.0])

    def test_non_finite_gradient_raises(self):
        theta = nd.Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"w": theta}, learning_rate=0.1)
        with pytest.raises(nd.NonFiniteError, match="w"):
            opt.step({"w": np.array([np.nan])})

    def test_hyperparameter_validation(self):
        theta = nd.Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ValueError):
            Adam({"w": theta}, learning_rate=-1.0)
        with pytest.raises(ValueError):
            Adam({"w": theta}, learning_rate=0.1, betas=(1.0, 0.9))

    def test_steps_follow_sign_of_gradient(self):
        theta = nd.Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam({"w": theta}, learning_rate=0.01)
        for step in range(5):
            opt.step({"w": np.array([2.0])})
        assert theta.data[0] < 0.0


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 0.01
        assert cfg.batch_size == 512
        assert cfg.pos_weight is None

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(dropout_p=1.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(selection_metric="f1")

    def test_to_dict_covers_every_field(self):
        d = TrainConfig().to_dict()
        assert set(d) == {
            "learning_rate", "weight_decay", "dropout_p", "batch_size",
            "max_epochs", "patience", "seed", "selection_metric", "pos_weight",
        }


class TestTrainLoop:
    def run(self, seed=0, **overrides):
        g, table = small_dataset(seed=seed)
        model = small_model(table, seed=seed)
        defaults = dict(batch_size=16, max_epochs=8, patience=3, seed=seed)
        defaults.update(overrides)
        cfg = TrainConfig(**defaults)
        model, history = train(model, g, table, cfg)
        return g, table, model, history

    def test_deterministic_replay(self):
        _, _, m1, h1 = self.run(seed=3)
        _, _, m2, h2 = self.run(seed=3)
        assert h1.entries == h2.entries
        assert h1.best_epoch == h2.best_epoch
        for k, v in m1.state().items():
            np.testing.assert_array_equal(v, m2.state()[k])

    def test_seed_changes_trajectory(self):
        _, _, _, h1 = self.run(seed=3)
        _, _, _, h2 = self.run(seed=4)
        assert h1.entries != h2.entries

    def test_loss_decreases_on_separable_data(self):
        _, _, _, history = self.run(seed=0, max_epochs=6, patience=6)
        losses = [e[1] for e in history.entries]
        assert losses[-1] < losses[0]

    def test_best_epoch_weights_are_restored(self):
        g, table, model, history = self.run(seed=1, max_epochs=10, patience=2)
        assert 0 <= history.best_epoch < len(history.entries)
        recorded = [e[2] for e in history.entries]
        assert history.best_val_auc == max(recorded)
        partition = PartitionIndex.from_table(g, table)
        ids = table.split_ids("val")
        scores = forward_scores(model, g, partition, table.features, ids)
        from pmpfraud.metrics import auc

        assert auc(scores, table.labels[ids]) == pytest.approx(history.best_val_auc, abs=1e-12)

    def test_early_stopping_bounds_epochs(self):
        _, _, _, history = self.run(seed=2, max_epochs=50, patience=2)
        assert len(history.entries) <= history.best_epoch + 2 + 1

    def test_single_class_val_disables_selection(self):
        g, table = small_dataset(seed=5)
        labels = table.labels.copy()
        # drain fraud out of the val split; train keeps both classes
        labels[table.splits == 1] = 0
        table2 = NodeTable(table.features, labels, table.splits)
        model = small_model(table2, seed=5)
        model, history = train(model, g, table2, TrainConfig(batch_size=16, max_epochs=4, patience=2, seed=5))
        assert all(math.isnan(e[2]) for e in history.entries)
        assert history.best_epoch == len(history.entries) - 1
        assert len(history.entries) == 4  # patience cannot trigger

    def test_divergence_reports_location(self):
        g, table = small_dataset(seed=6)
        model = small_model(table, seed=6)
        cfg = TrainConfig(learning_rate=1e200, batch_size=16, max_epochs=4, patience=2, seed=6)
        with np.errstate(all="ignore"), pytest.raises(TrainingDiverged) as info:
            train(model, g, table, cfg)
        assert info.value.epoch >= 0
        assert info.value.batch_index >= -1

    def test_partition_is_built_once(self, monkeypatch):
        calls = []
        original = PartitionIndex.from_table.__func__

        def counting(cls, graph, table):
            calls.append(1)
            return original(cls, graph, table)

        monkeypatch.setattr(PartitionIndex, "from_table", classmethod(counting))
        self.run(seed=7, max_epochs=5, patience=5)
        assert len(calls) == 1

    def test_dropout_config_overrides_model(self):
        g, table = small_dataset(seed=8)
        model = small_model(table, seed=8)
        model.dropout_p = 0.9
        train(model, g, table, TrainConfig(batch_size=16, max_epochs=2, patience=2, seed=8, dropout_p=0.25))
        assert model.dropout_p == 0.25


class TestEvaluate:
    def test_zero_model_scores_half_everywhere(self):
        g, table = small_dataset(seed=9)
        model = small_model(table, seed=9)
        model.load_state({k: np.zeros_like(v) for k, v in model.state().items()})
        report = evaluate(model, g, table, "test")
        assert report.auc == 0.5
        # every score is exactly 0.5, so every node is predicted fraud
        assert report.confusion["fn"] == 0
        assert report.confusion["tn"] == 0

    def test_report_matches_counted_oracle(self):
        g, table = small_dataset(seed=10)
        model = small_model(table, seed=10)
        ids = table.split_ids("test")
        partition = PartitionIndex.from_table(g, table)
        scores = forward_scores(model, g, partition, table.features, ids)
        want = counted_metrics(scores, table.labels[ids], 0.5)
        report = evaluate(model, g, table, "test")
        assert report.confusion == want["confusion"]
        assert report.f1_macro == pytest.approx(want["f1_macro"], abs=1e-15)
        assert report.g_mean == pytest.approx(want["g_mean"], abs=1e-15)
        assert report.split == "test"

    def test_empty_split_raises(self):
        g, table = small_dataset(seed=11)
        splits = table.splits.copy()
        splits[splits == 1] = 2
        table2 = NodeTable(table.features, table.labels, splits)
        model = small_model(table2, seed=11)
        with pytest.raises(ValueError, match="val"):
            evaluate(model, g, table2, "val")

    def test_chunked_scores_match_single_pass(self):
        g, table = small_dataset(seed=12)
        model = small_model(table, seed=12)
        partition = PartitionIndex.from_table(g, table)
        ids = np.arange(g.num_nodes)
        a = forward_scores(model, g, partition, table.features, ids, batch_size=7)
        b = forward_scores(model, g, partition, table.features, ids, batch_size=1000)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


class TestHistory:
    def test_csv_format(self, tmp_path):
        h = History()
        h.append(0, 0.5, 0.75)
        h.append(1, 0.25, 0.875)
        h.best_epoch = 1
        path = tmp_path / "history.csv"
        h.to_csv(str(path), meta_line="config_hash=abc seed=0")
        lines = path.read_text().splitlines()
        assert lines[0] == "# config_hash=abc seed=0"
        assert lines[1] == "epoch,train_loss,val_auc"
        assert lines[2].startswith("0,0.5,0.75")
        assert len(lines) == 4
