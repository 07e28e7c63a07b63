import math
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emoscore.augment import AugmentConfig, NoiseBank
from emoscore.dataio import DatasetManifest, UtteranceRecord, load_features, split_dataset
from emoscore.errors import TrainingError, ValidationError
from emoscore.model import TRAINABLE, ModelConfig, ModelParams, head
from emoscore.synthdata import SynthSpec, generate
from emoscore.train import (
    EpochRecord,
    OptimizerState,
    TrainConfig,
    adam_step,
    best_val_rmse,
    format_history,
    head_gradient,
    mse_loss,
    penultimate,
    plateau_scheduler,
    train,
)

from oracles import (
    CONVEX_ADAM,
    convex_head_problem,
    finite_difference_grad,
    full_batch_adam,
    gradient_instance,
    least_squares_optimum,
    relative_error,
)

TINY = ModelConfig(input_dim=16, model_dim=8, heads=2, blocks=1, hidden=(12, 8), seed=2)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    c = generate(SynthSpec(n_train_pool=24, n_test=4, t_min=6, t_max=14, seed=4), out)
    manifest = split_dataset(c.train_pool, 0.25, seed=0)
    feats = load_features(manifest, TINY.input_dim)
    return manifest, NoiseBank.from_dir(c.noise_dir), feats


# -- loss ---------------------------------------------------------------

def test_mse_zero():
    y = np.full(8, 3.0)
    assert mse_loss(y, y) == 0.0


def test_mse_unit_offset():
    y = np.arange(1.0, 9.0) / 2
    assert mse_loss(y, y + 1) == 1.0


def test_mse_hand_case():
    y = [1, 5, 3, 3, 3, 3, 3, 3]
    y_hat = [2, 3, 3, 3, 3, 3, 3, 3]
    assert mse_loss(y, y_hat) == pytest.approx(0.625, abs=1e-15)


def test_mse_batch_averages_all_cells():
    y = np.zeros((2, 8))
    y_hat = np.zeros((2, 8))
    y_hat[0] = 2.0
    assert mse_loss(y, y_hat) == pytest.approx(2.0)


def test_mse_shape_mismatch():
    with pytest.raises(ValidationError):
        mse_loss(np.zeros(8), np.zeros(7))


# -- head gradient ------------------------------------------------------

def test_gradient_zero_at_fit():
    z = np.ones((3, 5))
    y = np.full((3, 8), 2.5)
    dW, db = head_gradient(z, y, y)
    assert not dW.any() and not db.any()
    assert dW.shape == (8, 5) and db.shape == (8,)


def test_gradient_hand_case():
    z = np.zeros(6)
    y = np.full(8, 3.0)
    dW, db = head_gradient(z, y, y - 2.0)
    assert np.all(db == -0.5)
    assert not dW.any()


def test_gradient_rejects_clamp():
    with pytest.raises(TrainingError):
        head_gradient(np.zeros(4), np.zeros(8), np.zeros(8), clamp=True)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    Z, Y, W, b = gradient_instance(seed)
    y_hat = Z @ W.T + b
    analytic = head_gradient(Z, Y, y_hat)
    numeric = finite_difference_grad(Z, Y, W, b)
    # single-precision instance; the double-precision bound is tighter still
    assert relative_error(analytic, numeric) <= 1e-6


# -- Adam ---------------------------------------------------------------

def _head_params(h=4, W=0.0, b=0.0):
    cfg = ModelConfig(input_dim=2, model_dim=4, heads=1, blocks=1, hidden=(4, h), seed=0)
    p = ModelParams.init(cfg)
    p.set_head(np.full((8, h), W), np.full(8, b))
    return p


def test_adam_zero_gradient_is_noop():
    p = _head_params()
    cfg = TrainConfig()
    state = OptimizerState.create(p, cfg)
    adam_step(p, {"fc3.W": np.zeros((8, 4)), "fc3.b": np.zeros(8)}, state, cfg)
    assert not p["fc3.W"].any() and not p["fc3.b"].any()
    assert state.t == 1


def test_adam_first_step():
    p = _head_params()
    cfg = TrainConfig(lr0=1e-3, weight_decay=0.0)
    state = OptimizerState.create(p, cfg)
    adam_step(p, {"fc3.W": np.ones((8, 4)), "fc3.b": np.ones(8)}, state, cfg)
    expected = -1e-3 / (1 + 1e-8)
    np.testing.assert_allclose(p["fc3.W"], expected, rtol=1e-6)
    np.testing.assert_allclose(p["fc3.b"], expected, rtol=1e-6)


def test_adam_pure_decay_shrinks():
    p = _head_params(W=1.0, b=1.0)
    cfg = TrainConfig(lr0=1e-3, weight_decay=0.1)
    state = OptimizerState.create(p, cfg)
    adam_step(p, {"fc3.W": np.zeros((8, 4)), "fc3.b": np.zeros(8)}, state, cfg)
    assert np.all(p["fc3.W"] < 1.0) and np.all(p["fc3.b"] < 1.0)


def test_adam_tracks_only_head():
    p = _head_params()
    state = OptimizerState.create(p, TrainConfig())
    assert set(state.m) == set(state.v) == set(TRAINABLE)
    assert state.m["fc3.W"].shape == (8, 4) and state.v["fc3.b"].shape == (8,)


def test_adam_rejects_bad_shape():
    p = _head_params()
    cfg = TrainConfig()
    state = OptimizerState.create(p, cfg)
    with pytest.raises(ValidationError):
        adam_step(p, {"fc3.W": np.zeros((8, 3)), "fc3.b": np.zeros(8)}, state, cfg)


def test_adam_non_finite_names_tensor():
    p = _head_params()
    cfg = TrainConfig()
    state = OptimizerState.create(p, cfg)
    with pytest.raises(TrainingError, match="fc3.W"):
        adam_step(p, {"fc3.W": np.full((8, 4), np.nan), "fc3.b": np.zeros(8)}, state, cfg)


# -- scheduler ----------------------------------------------------------

def _trace(values, cfg):
    state = OptimizerState(m={}, v={}, t=0, lr=cfg.lr0)
    lrs = []
    for v in values:
        plateau_scheduler(state, v, cfg)
        lrs.append(state.lr)
    return lrs


def test_scheduler_improving_keeps_lr():
    cfg = TrainConfig()
    assert _trace([1.0 - 0.01 * k for k in range(30)], cfg) == [1e-4] * 30


def test_scheduler_constant_trace():
    lrs = _trace([1.0] * 8, TrainConfig(lr0=1e-4, patience=5, factor=0.5))
    assert lrs[:6] == [1e-4] * 6
    assert lrs[6] == 5e-5  # after epoch 7
    assert lrs[7] == 5e-5


def test_scheduler_tiny_improvement_is_not_improvement():
    lrs = _trace([1.0] + [1.0 - 1e-7 * k for k in range(1, 7)], TrainConfig())
    assert lrs[-1] == 5e-5


def test_scheduler_floor():
    cfg = TrainConfig(lr0=1e-4, min_lr=1e-5, patience=1)
    lrs = _trace([1.0] * 40, cfg)
    assert lrs[-1] == 1e-5
    assert min(lrs) == 1e-5


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=60))
def test_scheduler_lr_stays_in_range(values):
    cfg = TrainConfig(lr0=1e-3, min_lr=1e-5, patience=2)
    lrs = _trace(values, cfg)
    assert all(cfg.min_lr <= lr <= cfg.lr0 for lr in lrs)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# -- config -------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    {"lr0": 0.0}, {"factor": 1.0}, {"factor": 0.0}, {"patience": 0}, {"batch_size": 0},
    {"max_epochs": -1}, {"min_lr": 1.0},
])
def test_train_config_rejects(kw):
    with pytest.raises(ValidationError):
        TrainConfig(**kw)


def test_history_format_round_trips_floats():
    rec = EpochRecord(3, 0.1 + 0.2, 1 / 3, 1e-4)
    fields = format_history([rec]).rstrip("\n").split("\t")
    assert fields[0] == "3"
    assert [float(f) for f in fields[1:]] == [rec.train_loss, rec.val_rmse, rec.lr]


def test_best_val_rmse():
    hist = [EpochRecord(1, 1.0, 0.9, 1e-4), EpochRecord(2, 0.8, 0.7, 1e-4), EpochRecord(3, 0.7, 0.8, 1e-4)]
    assert best_val_rmse(hist) == 0.7
    assert math.isnan(best_val_rmse([]))


# -- convex head problem ------------------------------------------------

@pytest.mark.parametrize("seed", [0, 3])
def test_adam_reaches_least_squares_optimum(seed):
    params, Z, Y = convex_head_problem(seed)
    losses = full_batch_adam(params, Z, Y, CONVEX_ADAM, 2000)
    assert abs(losses[-1] - least_squares_optimum(Z, Y)) <= 1e-3


def test_least_squares_oracle_is_a_lower_bound():
    params, Z, Y = convex_head_problem(1)
    opt = least_squares_optimum(Z, Y)
    losses = full_batch_adam(params, Z, Y, CONVEX_ADAM, 50)
    assert min(losses) >= opt - 1e-12


def test_full_batch_loss_non_increasing():
    steady = 0
    trials = 20
    cfg = TrainConfig(lr0=1e-2, weight_decay=0.0, min_lr=0.0)
    for seed in range(trials):
        r = np.random.default_rng(seed)
        p = ModelParams.init(ModelConfig(input_dim=6, model_dim=8, heads=2, blocks=1, hidden=(16, 8), seed=seed))
        Z = np.maximum(r.normal(size=(16, 8)), 0)
        Y = r.uniform(1, 5, (16, 8))
        losses = full_batch_adam(p, Z, Y, cfg, 150)[10:]
        steady += all(b <= a for a, b in zip(losses, losses[1:]))
    assert steady >= 0.95 * trials


# -- training loop ------------------------------------------------------

def _fresh():
    return ModelParams.init(TINY)


def test_zero_epochs_returns_initial(corpus):
    manifest, bank, feats = corpus
    init = _fresh()
    out, hist = train(manifest, bank, TINY, init, TrainConfig(max_epochs=0), features=feats)
    assert hist == []
    assert out is not init
    for name in init.tensors:
        assert np.array_equal(out[name], init[name])


def test_training_is_deterministic(corpus):
    manifest, bank, feats = corpus
    cfg = TrainConfig(lr0=1e-2, max_epochs=4, augment=AugmentConfig(0.5, 1.0, 7), seed=7)
    a, ha = train(manifest, bank, TINY, _fresh(), cfg, features=feats)
    b, hb = train(manifest, bank, TINY, _fresh(), cfg, features=feats)
    assert format_history(ha) == format_history(hb)
    for name in a.tensors:
        assert a[name].tobytes() == b[name].tobytes()


def test_backbone_frozen_after_training(corpus):
    manifest, bank, feats = corpus
    init = _fresh()
    snapshot = {n: t.copy() for n, t in init.tensors.items()}
    out, hist = train(manifest, bank, TINY, init, TrainConfig(lr0=1e-2, max_epochs=5,
                                                               augment=AugmentConfig(0.8)), features=feats)
    assert len(hist) == 5
    for name, before in snapshot.items():
        if name in TRAINABLE:
            continue
        assert out[name].tobytes() == before.tobytes(), name
        assert init[name].tobytes() == before.tobytes(), name
    assert not np.array_equal(out["fc3.W"], snapshot["fc3.W"])


def test_training_descends(corpus):
    manifest, bank, feats = corpus
    _, hist = train(manifest, bank, TINY, _fresh(), TrainConfig(lr0=3e-2, max_epochs=15), features=feats)
    assert hist[-1].train_loss < hist[0].train_loss


def test_returns_best_validation_head(corpus):
    manifest, bank, feats = corpus
    out, hist = train(manifest, bank, TINY, _fresh(), TrainConfig(lr0=5e-2, max_epochs=10), features=feats)
    val = manifest.subset("val")
    Z = penultimate([feats[r.id] for r in val], out, TINY)
    pred = head(Z, out)
    truth = np.stack([r.labels for r in val])
    assert math.sqrt(np.mean((pred - truth) ** 2)) == pytest.approx(best_val_rmse(hist), rel=1e-12)


def test_history_lr_is_epoch_lr(corpus):
    manifest, bank, feats = corpus
    _, hist = train(manifest, bank, TINY, _fresh(), TrainConfig(lr0=1e-2, max_epochs=3), features=feats)
    assert [r.epoch for r in hist] == [1, 2, 3]
    assert hist[0].lr == 1e-2


def test_p_zero_matches_no_augmentation(corpus):
    manifest, bank, feats = corpus
    base = TrainConfig(lr0=1e-2, max_epochs=3, seed=5)
    _, h_none = train(manifest, None, TINY, _fresh(), base, features=feats)
    off = TrainConfig(lr0=1e-2, max_epochs=3, seed=5, augment=AugmentConfig(0.0, 1.0, 5))
    _, h_zero = train(manifest, bank, TINY, _fresh(), off, features=feats)
    assert format_history(h_none) == format_history(h_zero)


def test_empty_split_rejected(corpus):
    manifest, bank, feats = corpus
    only_train = DatasetManifest(manifest.subset("train").records, manifest.base_dir)
    with pytest.raises(TrainingError, match="non-empty"):
        train(only_train, bank, TINY, _fresh(), TrainConfig(), features=feats)


def test_augmentation_without_bank_rejected(corpus):
    manifest, _, feats = corpus
    with pytest.raises(TrainingError):
        train(manifest, None, TINY, _fresh(), TrainConfig(augment=AugmentConfig(0.3)), features=feats)


def test_dim_mismatch_rejected(corpus):
    manifest, bank, feats = corpus
    bad = dict(feats)
    rec = manifest.subset("train").records[0]
    bad[rec.id] = np.zeros((5, 3), dtype=np.float32)
    with pytest.raises(ValidationError, match=rec.id):
        train(manifest, bank, TINY, _fresh(), TrainConfig(), features=bad)


def test_non_finite_loss_aborts(corpus, monkeypatch):
    manifest, bank, feats = corpus
    monkeypatch.setattr(sys.modules["emoscore.train"], "head", lambda z, params: np.full((len(z), 8), np.nan))
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(manifest, bank, TINY, _fresh(), TrainConfig(), features=feats)


def test_single_record_splits():
    recs = [UtteranceRecord("a", "a.emof", "train", np.full(8, 2.0)),
            UtteranceRecord("b", "b.emof", "val", np.full(8, 4.0))]
    m = DatasetManifest(recs, ".")
    feats = {"a": np.ones((3, 16), np.float32), "b": np.zeros((2, 16), np.float32)}
    _, hist = train(m, None, TINY, _fresh(), TrainConfig(max_epochs=2), features=feats)
    assert len(hist) == 2


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**16))
def test_gradient_linear_in_residual(n, h, seed):
    r = np.random.default_rng(seed)
    z = r.normal(size=(n, h))
    y = r.uniform(1, 5, (n, 8))
    d = r.normal(size=(n, 8))
    g1 = head_gradient(z, y, y + d)
    g2 = head_gradient(z, y, y + 2 * d)
    np.testing.assert_allclose(g2[0], 2 * g1[0], rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(g2[1], 2 * g1[1], rtol=1e-9, atol=1e-12)
