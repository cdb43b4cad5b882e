import numpy as np
import pytest
from hypothesis import given, strategies as st

from texiris.checkpoint import load_checkpoint
from texiris.data import Dataset, SynthSpec, synthetic_dataset
from texiris.errors import ConfigurationError, InputError, ShapeMismatchError, TrainingError
from texiris.losses import cross_entropy
from texiris.models import CombNetVariant, build_autoencoder, build_combnet
from texiris.tensor import Tensor
from texiris.training import (SGD, TrainConfig, accuracy, sgd_step, stratified_split, train_stage1,
                              train_stage2)


def _param(v):
    return Tensor(np.array([v]))


def test_sgd_plain_step():
    p = _param(1.0)
    sgd_step([p], [np.array([0.5])], TrainConfig(learning_rate=1.0, momentum=0.0, weight_decay=0.0))
    assert p.data[0] == 0.5


def test_sgd_weight_decay_only():
    p = _param(1.0)
    sgd_step([p], [np.array([0.0])], TrainConfig(learning_rate=1.0, momentum=0.0, weight_decay=0.1))
    assert p.data[0] == pytest.approx(0.9)


def test_sgd_momentum_two_steps():
    cfg = TrainConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    p = _param(1.0)
    v = sgd_step([p], [np.array([1.0])], cfg)
    sgd_step([p], [np.array([1.0])], cfg, v)
    # v1 = 1, p1 = 0.9; v2 = 0.9 + 1 = 1.9, p2 = 0.9 - 0.19
    assert p.data[0] == pytest.approx(0.71)


def test_sgd_shape_mismatch():
    with pytest.raises(ConfigurationError):
        sgd_step([_param(1.0)], [np.zeros(2)], TrainConfig())


def test_config_validation():
    assert TrainConfig(stage=1).learning_rate == 0.5
    assert TrainConfig(stage=2).learning_rate == 0.01
    for bad in ({"batch_size": 1}, {"val_fraction": 0.0}, {"learning_rate": -1.0},
                {"stage": 3}, {"pool": "avg"}, {"epochs": 0}):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)


def test_lr_schedule():
    cfg = TrainConfig(epochs=10, learning_rate=1.0)
    assert [cfg.lr_at(e) for e in (0, 5, 6, 9)] == [1.0, 1.0, pytest.approx(0.1), pytest.approx(0.1)]


@given(st.lists(st.integers(0, 4), min_size=2, max_size=60), st.integers(0, 100))
def test_stratified_split_is_a_partition(labels, seed):
    labels = np.array(labels)
    train, val = stratified_split(labels, 0.2, np.random.default_rng(seed))
    assert sorted(np.concatenate([train, val]).tolist()) == list(range(len(labels)))
    for c in np.unique(labels):
        assert np.any(labels[train] == c)  # every class keeps a training sample


def test_stage1_zero_lr_loss_is_constant():
    ds = synthetic_dataset(SynthSpec(num_classes=2, samples_per_class=3, height=16, width=32))
    _, report = train_stage1(ds, TrainConfig(stage=1, epochs=3, batch_size=8, learning_rate=0.0))
    assert len(set(report.losses)) == 1
    assert len(report.losses) == len(report.metrics) == 3


def test_stage1_overfits_single_image():
    ds = synthetic_dataset(SynthSpec(num_classes=1, samples_per_class=1))
    cfg = TrainConfig(stage=1, epochs=200, batch_size=2, learning_rate=0.5, lr_decay_at=1.0)
    _, report = train_stage1(ds, cfg)
    assert report.best_metric >= 0.95


def test_stage1_makes_progress(tiny_dataset):
    _, report = train_stage1(tiny_dataset, TrainConfig(stage=1, epochs=4, batch_size=8))
    assert report.losses[report.best_epoch] < report.losses[0]
    assert report.best_metric > report.initial_metric
    assert all(np.isfinite(report.losses))


def test_stage1_is_deterministic(tiny_dataset):
    cfg = TrainConfig(stage=1, epochs=2, batch_size=8, seed=4)
    a_state, a = train_stage1(tiny_dataset, cfg)
    b_state, b = train_stage1(tiny_dataset, cfg)
    assert a.losses == b.losses and a.checkpoint_id == b.checkpoint_id
    for k in a_state:
        np.testing.assert_array_equal(a_state[k], b_state[k])


def test_stage1_checkpoint(tmp_path, tiny_dataset):
    path = tmp_path / "enc.irnf"
    state, report = train_stage1(tiny_dataset, TrainConfig(stage=1, epochs=1, batch_size=12,
                                                           checkpoint=str(path)))
    ckpt = load_checkpoint(path)
    assert ckpt.metadata["stage"] == 1 and ckpt.metadata["pool"] == "eap"
    assert set(ckpt.tensors) == set(state)
    assert report.loss_csv().splitlines()[0] == "epoch,loss,metric"


def test_stage1_empty_dataset():
    with pytest.raises(InputError):
        train_stage1(Dataset(np.zeros((0, 1, 16, 16)), []), TrainConfig(stage=1))


def test_stage_mismatch(tiny_dataset):
    with pytest.raises(ConfigurationError):
        train_stage1(tiny_dataset, TrainConfig(stage=2))
    with pytest.raises(ConfigurationError):
        train_stage2(tiny_dataset, "random", TrainConfig(stage=1))


def test_stage2_overfits_eight_samples():
    ds = synthetic_dataset(SynthSpec(num_classes=2, samples_per_class=4, height=16, width=64, seed=2))
    model = build_combnet(CombNetVariant("eap", "tel", "random"), 2, (16, 64), seed=0)
    opt = SGD(model.parameters(), TrainConfig(learning_rate=0.05))
    x = Tensor(ds.images)
    for step in range(300):
        model.train()
        loss = cross_entropy(model(x), ds.labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 10 == 9 and accuracy(model, ds.images, ds.labels) == 1.0:
            break
    assert accuracy(model, ds.images, ds.labels) == 1.0


def test_stage2_frozen_zero_lr_keeps_initial_accuracy(tiny_dataset):
    cfg = TrainConfig(epochs=3, learning_rate=0.0, head="fc", freeze_encoder=True)
    _, report = train_stage2(tiny_dataset, "random", cfg)
    assert report.metrics == [report.initial_metric] * 3


def test_stage2_learns_and_is_deterministic(tiny_dataset):
    enc, _ = build_autoencoder("eap", seed=1)
    state = {f"encoder.{k}": v for k, v in enc.state_dict().items()}
    cfg = TrainConfig(epochs=3, seed=2)
    model_a, a = train_stage2(tiny_dataset, state, cfg)
    _, b = train_stage2(tiny_dataset, state, cfg)
    assert a.losses == b.losses and a.metrics == b.metrics
    assert a.losses[-1] < a.losses[0]
    assert model_a.variant.init == "pretrained"
    # the returned model carries the best epoch's weights
    _, val = stratified_split(tiny_dataset.labels, cfg.val_fraction, np.random.default_rng(cfg.seed))
    assert accuracy(model_a, tiny_dataset.images[val], tiny_dataset.labels[val]) == a.best_metric


def test_stage2_label_contract(tiny_dataset):
    gappy = Dataset(tiny_dataset.images, np.where(tiny_dataset.labels == 0, 9, tiny_dataset.labels))
    with pytest.raises(InputError):
        train_stage2(gappy, "random", TrainConfig(epochs=1))


def test_stage2_incompatible_encoder(tiny_dataset):
    enc, _ = build_autoencoder("eap")
    state = {f"encoder.{k}": v for k, v in enc.state_dict().items()}
    state["encoder.0.conv.weight"] = np.zeros((32, 1, 3, 3), dtype=np.float32)
    with pytest.raises(ShapeMismatchError, match="encoder.0.conv.weight"):
        train_stage2(tiny_dataset, state, TrainConfig(epochs=1))


def test_divergence_names_the_epoch(tiny_dataset):
    with pytest.raises(TrainingError) as info:
        train_stage2(tiny_dataset, "random", TrainConfig(epochs=2, learning_rate=1e30))
    assert info.value.epoch == 1
    assert "epoch 1" in str(info.value)


def test_progress_lines(tiny_dataset, capsys):
    train_stage1(tiny_dataset, TrainConfig(stage=1, epochs=1, batch_size=12, log=True))
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert '"epoch": 1' in line and '"loss"' in line and '"metric"' in line
