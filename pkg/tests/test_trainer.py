import dataclasses

import numpy as np
import pytest

from afsrl import trainer
from afsrl.augmentation import make_pair
from afsrl.encoder import PerturbedParams
from afsrl.errors import NumericalError
from afsrl.gradcheck import check
from afsrl.numerics import add, constant
from afsrl.pointcloud import PointCloud, synthetic_dataset
from afsrl.trainer import (
    TrainConfig,
    batches,
    embed_dataset,
    forward_losses,
    load_checkpoint,
    new_state,
    parse_kv,
    train,
    train_step,
)

SMALL = TrainConfig(k_neighbors=5, batch_size=8, epochs=2, encoder_dims=(3, 16, 32), head_dims=(32, 32, 16))


@pytest.fixture(scope="module")
def clouds():
    ds = synthetic_dataset(per_class=8, n_points=64, noise=0.02, seed=1)
    return ds.clouds


def pairs_for(clouds, cfg, seed=0, n=4):
    rng = np.random.default_rng(seed)
    return [make_pair(c, cfg.k_neighbors, cfg.sample_ratio, rng, i) for i, c in enumerate(clouds[:n])]


def test_config_validation_and_text_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(k_neighbors=0)
    with pytest.raises(ValueError):
        TrainConfig(epsilon=-1)
    cfg = dataclasses.replace(SMALL, epsilon=0.25, pooling="max")
    assert TrainConfig.from_mapping(parse_kv(cfg.to_text())) == cfg


def test_batches_cover_and_drop_singletons():
    rng = np.random.default_rng(0)
    out = batches(33, 16, rng)
    assert [len(b) for b in out] == [16, 16]
    out = batches(64, 16, rng)
    assert len(out) == 4 and sorted(np.concatenate(out).tolist()) == list(range(64))


def test_steps_per_epoch(clouds):
    data = (clouds * 2)[:64]
    cfg = dataclasses.replace(SMALL, batch_size=16, epochs=1)
    assert train(data, cfg).step == 4


def test_beta_zero_is_invariant_to_epsilon(clouds):
    cfg = dataclasses.replace(SMALL, beta=0.0)
    a = train(clouds, dataclasses.replace(cfg, epsilon=0.0))
    b = train(clouds, dataclasses.replace(cfg, epsilon=5.0))
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.params.layers, b.params.layers))
    # step_log rows: epoch, step, L_DA, L_FA, L
    assert [s[2] for s in a.step_log] == [s[2] for s in b.step_log]
    assert [s[4] for s in a.step_log] == [s[4] for s in b.step_log]
    assert all(np.isfinite(s[3]) for s in a.step_log)  # L_FA still reported


def test_zero_epsilon_duplicates_the_positive(clouds):
    cfg = dataclasses.replace(SMALL, epsilon=0.0)
    state = new_state(cfg)
    _, _, _, h, zu = forward_losses(pairs_for(clouds, cfg), state.params, cfg, state.rng)
    assert h.data.tobytes() == zu.data.tobytes()


def test_training_is_deterministic(clouds):
    a = train(clouds, SMALL)
    b = train(clouds, SMALL)
    assert a.loss_history == b.loss_history
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.params.layers, b.params.layers))


def test_step_keeps_shapes_and_moves_weights(clouds):
    state = new_state(SMALL)
    before = [w.data.copy() for w in state.params.layers]
    out = train_step(pairs_for(clouds, SMALL), state, SMALL)
    assert np.isfinite(out.loss) and abs(out.loss - (out.loss_da + out.loss_fa)) < 1e-12
    assert [w.shape for w in state.params.layers] == [b.shape for b in before]
    assert all(not np.array_equal(w.data, b) for w, b in zip(state.params.layers, before))
    assert state.step == 1


def test_collapse_is_reported_as_numerical_error(clouds):
    state = new_state(SMALL)
    for w in state.params.encoder_layers:
        w.data[:] = 0.0
    with pytest.raises(NumericalError, match="collapse"):
        train_step(pairs_for(clouds, SMALL), state, SMALL)


def test_stop_on_failure_marks_state(clouds, monkeypatch):
    def boom(*a, **k):
        raise NumericalError("non-finite loss")

    monkeypatch.setattr(trainer, "train_step", boom)
    state = train(clouds, SMALL, stop_on_failure=True)
    assert state.aborted and state.step == 0


def test_full_step_gradient_with_frozen_noise(clouds, monkeypatch):
    cfg = dataclasses.replace(SMALL, epsilon=0.5, encoder_dims=(3, 6, 8), head_dims=(8, 8, 4))
    state = new_state(cfg)
    pairs = pairs_for(clouds, cfg, seed=3)
    rng = np.random.default_rng(9)
    frozen = [cfg.epsilon * np.std(w.data, ddof=1) * rng.standard_normal(w.shape) for w in state.params.encoder_layers]

    def fixed_perturb(params, epsilon, _rng):
        layers = [add(w, constant(e)) for w, e in zip(params.encoder_layers, frozen)]
        return PerturbedParams(params, epsilon, layers, [0.0] * len(layers))

    monkeypatch.setattr(trainer, "perturb", fixed_perturb)

    def build():
        return forward_losses(pairs, state.params, cfg, state.rng)[2]

    assert check(build, state.params.layers) < 1e-4


def test_loss_decreases():
    ds = synthetic_dataset(per_class=8, n_points=96, noise=0.02, seed=2)
    cfg = dataclasses.replace(SMALL, epochs=20, batch_size=8, learning_rate=3e-3)
    state = train(ds.clouds, cfg)
    losses = np.array([s[4] for s in state.step_log])
    k = max(1, len(losses) // 10)
    assert np.median(losses[-k:]) < np.median(losses[:k])


def test_resume_is_bit_exact(clouds, tmp_path):
    full = dataclasses.replace(SMALL, epochs=4)
    train(clouds, full, out_dir=tmp_path / "a")

    train(clouds, dataclasses.replace(full, epochs=2), out_dir=tmp_path / "b")
    state, cfg = load_checkpoint(tmp_path / "b")
    assert state.epoch == 2 and cfg.epochs == 2
    train(clouds, dataclasses.replace(cfg, epochs=4), out_dir=tmp_path / "b", state=state)

    a_state, _ = load_checkpoint(tmp_path / "a")
    b_state, _ = load_checkpoint(tmp_path / "b")
    assert a_state.loss_history == b_state.loss_history
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a_state.params.layers, b_state.params.layers))
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()


def test_metrics_csv_layout(clouds, tmp_path):
    state = train(clouds, SMALL, out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,loss_da,loss_fa,loss_total"
    assert len(lines) == 1 + state.step
    assert [e for e, *_ in state.loss_history] == [1, 2]


def test_embed_dataset_deterministic_and_invariant(clouds):
    params = new_state(SMALL).params
    emb, labels = embed_dataset(clouds, params, SMALL, seed=0)
    again, _ = embed_dataset(clouds, params, SMALL, seed=0)
    assert emb.shape == (len(clouds), 32) and labels.shape == (len(clouds),)
    assert emb.tobytes() == again.tobytes()

    c = clouds[5]
    perm = np.random.default_rng(0).permutation(len(c))
    shuffled = PointCloud(c.points[perm], c.label, c.part_labels[perm] if c.part_labels is not None else None)
    a, _ = embed_dataset([c], params, SMALL)
    b, _ = embed_dataset([shuffled], params, SMALL)
    assert np.max(np.abs(a - b)) < 1e-9
