import json
import logging
import math
from dataclasses import replace

import numpy as np
import pytest

from reform_cli.dataset import DatasetError
from reform_cli.encoder import ProfileStore
from reform_cli.exceptions import CheckpointFormatError, ConfigError
from reform_cli.graphconv import PropagatedEmbeddings
from reform_cli.trainer import (
    AttentionKind,
    AttentiveTables,
    ModelParams,
    TrainConfig,
    TripletBatch,
    adam_step,
    batch_loss,
    bpr_loss,
    config_dict,
    fit,
    fuse,
    fuse_and_score,
    load_checkpoint,
    sample_triplets,
    save_checkpoint,
    train_epoch,
)
from tests.utils import make_graph, max_rel_err, numeric_gradient, random_graph


def test_bpr_loss():
    assert abs(bpr_loss(1.5, 1.5) - math.log(2)) < 1e-12
    assert bpr_loss(20.0, 0.0) == pytest.approx(2.0611536e-9, rel=1e-6)
    assert bpr_loss(0.0, 20.0) == pytest.approx(20.0 + 2.0611536e-9, rel=1e-12)
    values = bpr_loss(np.linspace(-5, 5, 21), 0.0)
    assert (values > 0).all()
    assert (np.diff(values) < 0).all()


def test_fuse_and_score():
    zeros = PropagatedEmbeddings((), np.zeros((1, 2)), np.zeros((1, 2)))
    assert fuse_and_score(0, 0, zeros, AttentiveTables(np.zeros((1, 2)), np.zeros((1, 2)))) == 0.0

    rng = np.random.default_rng(0)
    g, a = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    same = fuse_and_score(0, 0, PropagatedEmbeddings((), g, g), AttentiveTables(a, a))
    assert same == pytest.approx(float(fuse(g[0], a[0]) @ fuse(g[0], a[0])), abs=1e-15)

    g_u, g_i, a_u, a_i = rng.normal(size=(4, 1, 2))
    score = fuse_and_score(0, 0, PropagatedEmbeddings((), g_u, g_i), AttentiveTables(a_u, a_i))
    halves = float(g_u[0] @ g_i[0]) + float(a_u[0] @ a_i[0])
    assert score == pytest.approx(halves, abs=1e-14)
    assert fuse(np.ones((3, 2)), np.zeros((3, 4))).shape == (3, 6)


def test_train_config_validation(caplog):
    assert TrainConfig(size_mode="total_256").dims == (128, 128)
    assert TrainConfig(d_g=16, d_star=8).dims == (16, 8)
    assert TrainConfig(pooling="avg").pooling == "avg"
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(l2_lambda=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(pooling="median")
    with caplog.at_level(logging.WARNING):
        TrainConfig(n_keys=9)
    assert "n_keys=9" in caplog.text
    assert config_dict(TrainConfig())["attention"] == "mfa"


def test_sample_triplets():
    forced = make_graph([(0, 0)], 1, 2)
    batch = sample_triplets(forced, 16, seed=0)
    assert batch.pos.tolist() == [0] * 16
    assert batch.neg.tolist() == [1] * 16

    rng = np.random.default_rng(1)
    graph = random_graph(rng, 4, 6, p=0.3)
    big = sample_triplets(graph, 4096, seed=3, epoch=2, batch_index=1)
    assert len(big) == 4096
    assert graph.contains(big.users, big.pos).all()
    assert not graph.contains(big.users, big.neg).any()
    again = sample_triplets(graph, 4096, seed=3, epoch=2, batch_index=1)
    assert again.neg.tolist() == big.neg.tolist()


def test_saturated_users(caplog):
    graph = make_graph([(0, 0), (0, 1), (1, 1)], 2, 2)
    with caplog.at_level(logging.WARNING):
        batch = sample_triplets(graph, 8, seed=0)
    assert batch.users.tolist() == [1] * 8
    assert batch.neg.tolist() == [0] * 8
    assert "every item" in caplog.text
    with pytest.raises(DatasetError):
        sample_triplets(make_graph([(0, 0)], 1, 1), 4, seed=0)


MICRO_EDGES = [(0, 0), (0, 1), (1, 1), (2, 2), (2, 0)]


def micro_setup(attention="mfa", **changes):
    graph = make_graph(MICRO_EDGES, 3, 3)
    rng = np.random.default_rng(5)
    profiles = ProfileStore(rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4)))
    options = dict(
        d_g=4, d_star=4, layers=1, n_keys=1, l2_lambda=0.1, attention=attention, init_std=0.5
    )
    cfg = TrainConfig(**(options | changes))
    params = ModelParams.init(cfg, 3, 3, profiles.d)
    return graph, profiles, cfg, params


MICRO_BATCH = TripletBatch(np.array([0, 1, 2, 1]), np.array([0, 1, 2, 1]), np.array([2, 0, 1, 2]))


@pytest.mark.parametrize(
    "attention, changes",
    [
        ("mfa", {}),
        ("mfa", {"include_layer0": True, "layers": 2}),
        ("mfa", {"pooling": "avg", "n_keys": 2}),
        ("mlp", {}),
    ],
)
def test_batch_gradient_matches_finite_differences(attention, changes):
    graph, profiles, cfg, params = micro_setup(attention, **changes)
    assert params.attention is AttentionKind(attention)

    def loss() -> float:
        return batch_loss(params, graph, profiles, MICRO_BATCH, cfg, with_grad=False)[0].loss

    _, grads = batch_loss(params, graph, profiles, MICRO_BATCH, cfg)
    assert set(grads) == set(params.tensors)
    for name, tensor in params.tensors.items():
        assert max_rel_err(grads[name], numeric_gradient(loss, tensor)) <= 1e-4, name


def test_regularization_parts():
    graph, profiles, cfg, params = micro_setup(l2_lambda=0.0)
    plain = batch_loss(params, graph, profiles, MICRO_BATCH, cfg, with_grad=False)[0]
    assert plain.reg == 0.0
    assert plain.loss == plain.bpr
    one, two = (
        batch_loss(params, graph, profiles, MICRO_BATCH, replace(cfg, l2_lambda=lam), with_grad=False)[0]
        for lam in (0.1, 0.2)
    )
    assert one.bpr == two.bpr == plain.bpr
    assert two.reg == pytest.approx(2 * one.reg, rel=1e-12)


def test_zero_learning_rate_keeps_params():
    graph, profiles, cfg, params = micro_setup(learning_rate=0.0, batch_size=4)
    before = params.copy()
    stats = train_epoch(params, graph, profiles, cfg, epoch=1)
    assert math.isfinite(stats.loss) and stats.batches == 2
    for name, tensor in params.tensors.items():
        assert np.array_equal(tensor, before.tensors[name])


def test_single_step_descends():
    graph, profiles, cfg, params = micro_setup(init_std=0.01, l2_lambda=0.0)
    batch = TripletBatch(np.array([0]), np.array([0]), np.array([2]))
    first, grads = batch_loss(params, graph, profiles, batch, cfg)
    adam_step(params, grads, 1e-3)
    after = batch_loss(params, graph, profiles, batch, cfg, with_grad=False)[0]
    assert after.loss < first.loss


def test_epochs_are_reproducible():
    losses = []
    for _ in range(2):
        graph, profiles, cfg, params = micro_setup(batch_size=3)
        losses.append([train_epoch(params, graph, profiles, cfg, epoch=e).loss for e in (1, 2, 3)])
    assert losses[0] == losses[1]


def test_fit_early_stopping(tmp_path, mocker):
    graph, profiles, cfg, params = micro_setup(patience=0, max_epochs=10)
    snapshots = []

    def validate(p):
        snapshots.append({k: v.copy() for k, v in p.tensors.items()})
        return [0.5, 0.4, 0.9][len(snapshots) - 1]

    result = fit(params, graph, profiles, cfg, validate, tmp_path / "log.jsonl", config_hash="abc")
    assert result.epochs_run == 2
    assert result.best_epoch == 1
    assert result.best_metric == 0.5
    assert len(result.history) == 2
    for name, tensor in params.tensors.items():
        assert np.array_equal(tensor, snapshots[0][name])
    lines = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2]
    assert lines[1]["val_recall@20"] == 0.4
    assert {r["config_hash"] for r in lines} == {"abc"}
    assert set(lines[0]) == {"epoch", "loss", "val_recall@20", "elapsed_ms", "config_hash"}

    graph, profiles, cfg, params = micro_setup(patience=1, max_epochs=5, eval_interval=2)
    improving = mocker.Mock(side_effect=[0.1, 0.2, 0.3])
    result = fit(params, graph, profiles, cfg, improving)
    assert result.epochs_run == 5
    assert improving.call_count == len(result.history) == 2
    assert result.best_epoch == 4


def test_checkpoint_roundtrip(tmp_path):
    _, _, cfg, params = micro_setup()
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(path, params, epoch=3, metric=0.25, config_hash="abc")
    loaded, meta = load_checkpoint(path)
    assert meta == {"epoch": 3, "metric": 0.25, "config_hash": "abc"}
    assert list(loaded.tensors) == list(params.tensors)
    for name, tensor in params.tensors.items():
        assert np.array_equal(loaded.tensors[name], tensor.astype("<f4").astype(np.float64))
    assert loaded.attention is AttentionKind.mfa

    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(CheckpointFormatError, match="offset"):
        load_checkpoint(path)
    path.write_bytes(raw + b"\0\0")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_checkpoint(path)
    path.write_bytes(b"junk\n")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
