import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import random_model
from uqeval.errors import ConfigError, FormatError, InputError
from uqeval.estimators import (
    EnsembleConfig,
    MemberOutputs,
    aggregate,
    config_hash,
    mc_dropout_predict,
    member_bootstrap_indices,
    members_predict,
    read_manifest,
    train_bootstrap,
    train_ensemble,
    train_mc_dropout,
    write_manifest,
)
from uqeval.model import TrainConfig


def _toy(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, size=(n, 1))
    y = np.sin(2 * x[:, 0]) + (0.05 + 0.2 * np.abs(x[:, 0])) * rng.standard_normal(n)
    return x, y


FAST = TrainConfig(learning_rate=1e-2, max_epochs=40, patience=10, batch_size=32)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def test_two_member_example():
    out = MemberOutputs([[1.0], [3.0]], [[0.5], [1.5]])
    p = aggregate(out)
    assert p.mean.tolist() == [2.0]
    assert p.epi.tolist() == [1.0]
    assert p.ale.tolist() == [1.0]
    assert p.total.tolist() == [2.0]
    assert aggregate(out, ddof=1).epi.tolist() == [2.0]


def test_identical_members_have_zero_epistemic():
    row = np.array([0.3, -1.7, 2.2])
    out = MemberOutputs(np.tile(row, (7, 1)), np.full((7, 3), 0.4))
    p = aggregate(out)
    assert np.all(p.epi == 0.0)
    assert np.array_equal(p.total, p.ale)


def test_single_member_rejected():
    with pytest.raises(ConfigError):
        aggregate(MemberOutputs([[1.0, 2.0]], [[1.0, 1.0]]))


def test_non_positive_variance_rejected():
    with pytest.raises(InputError):
        MemberOutputs([[1.0], [2.0]], [[1.0], [0.0]])


def test_variance_selector():
    p = aggregate(MemberOutputs([[1.0], [3.0]], [[0.5], [1.5]]))
    assert p.variance("epistemic") is p.epi
    with pytest.raises(InputError):
        p.variance("ale")


_members = st.integers(2, 12).flatmap(lambda m: st.tuples(
    arrays(np.float64, (m, 5), elements=st.floats(-100, 100)),
    arrays(np.float64, (m, 5), elements=st.floats(1e-3, 100)),
))


@settings(max_examples=200, deadline=None)
@given(data=_members, shift=st.floats(-50, 50), seed=st.integers(0, 1000))
def test_aggregate_properties(data, shift, seed):
    means, ale = data
    p = aggregate(MemberOutputs(means, ale))
    assert np.array_equal(p.total, p.ale + p.epi)
    assert np.all(p.epi >= 0)
    assert np.all(p.ale >= ale.min(axis=0) * (1 - 1e-12)) and np.all(p.ale <= ale.max(axis=0) * (1 + 1e-12))
    # a common shift moves the mean and leaves the variances alone
    shifted = aggregate(MemberOutputs(means + shift, ale))
    assert np.allclose(shifted.mean, p.mean + shift, atol=1e-9)
    assert np.allclose(shifted.epi, p.epi, atol=1e-7 * (1 + np.abs(means).max() ** 2))
    # member order is irrelevant
    perm = np.random.default_rng(seed).permutation(means.shape[0])
    q = aggregate(MemberOutputs(means[perm], ale[perm]))
    assert np.allclose(q.mean, p.mean, atol=1e-12 * (1 + np.abs(means).max()))
    assert np.allclose(q.epi, p.epi, rtol=1e-9, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(
    data=st.integers(2, 12).flatmap(lambda m: arrays(np.int64, (m, 6), elements=st.integers(-3, 3))),
    offset=st.floats(-100, 100),
)
def test_zero_epistemic_iff_members_agree(data, offset):
    # a coarse grid makes agreement common; squared gaps stay far from underflow
    means = offset + data / 8.0
    p = aggregate(MemberOutputs(means, np.ones_like(means)))
    agree = np.all(means == means[0], axis=0)
    assert np.array_equal(p.epi == 0, agree)


# ---------------------------------------------------------------------------
# MC-Dropout
# ---------------------------------------------------------------------------

def test_mc_dropout_requires_dropout():
    with pytest.raises(ConfigError):
        EnsembleConfig("mc_dropout", 10, dropout_rate=0.0)
    with pytest.raises(ConfigError):
        mc_dropout_predict(random_model((1, 4, 2), 0), np.zeros((3, 1)), 10, 0)


def test_all_ones_masks_give_zero_epistemic():
    model = random_model((2, 6, 5, 2), 1, dropout_rate=0.3)
    masks = [[np.ones(6), np.ones(5)] for _ in range(20)]
    x = np.random.default_rng(0).normal(size=(8, 2))
    p = aggregate(mc_dropout_predict(model, x, 20, 0, masks=masks))
    assert np.all(p.epi == 0.0)


def test_mc_dropout_is_deterministic_for_a_seed():
    model = random_model((2, 6, 2), 2, dropout_rate=0.5)
    x = np.random.default_rng(1).normal(size=(5, 2))
    a = mc_dropout_predict(model, x, 30, 9)
    b = mc_dropout_predict(model, x, 30, 9)
    c = mc_dropout_predict(model, x, 30, 10)
    assert np.array_equal(a.means, b.means) and np.array_equal(a.ale_vars, b.ale_vars)
    assert not np.array_equal(a.means, c.means)


def test_mc_dropout_converges():
    model = random_model((2, 16, 16, 2), 3, dropout_rate=0.3)
    x = np.random.default_rng(2).normal(size=(4, 2))
    m = 150
    small = mc_dropout_predict(model, x, m, 11)
    big = aggregate(mc_dropout_predict(model, x, 10 * m, 12))
    est = aggregate(small)
    se_mean = np.sqrt(est.epi / m + big.epi / (10 * m))
    assert np.all(np.abs(est.mean - big.mean) <= 3 * se_mean)
    # variance estimate: standard error of a sample variance ~ sqrt(m4 - s^4) / sqrt(m)
    dev = small.means - small.means.mean(axis=0)
    se_var = np.sqrt(np.maximum((dev**4).mean(axis=0) - est.epi**2, 0) / m)
    assert np.all(np.abs(est.epi - big.epi) <= 3 * se_var + 1e-12)


def test_train_mc_dropout_single_network():
    x, y = _toy(200, 0)
    xv, yv = _toy(50, 1)
    cfg = EnsembleConfig("mc_dropout", 20, FAST, hidden=(16,), dropout_rate=0.2)
    models, hists = train_mc_dropout((x, y), (xv, yv), cfg)
    assert len(models) == 1 and len(hists) == 1
    p = aggregate(mc_dropout_predict(models[0], xv, 20, 0))
    assert np.all(p.epi > 0)


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

def test_member_seed_validation():
    with pytest.raises(ConfigError):
        EnsembleConfig("ensemble", 3, member_seeds=(1, 1, 2))
    with pytest.raises(ConfigError):
        EnsembleConfig("ensemble", 3, member_seeds=(1, 2))
    with pytest.raises(ConfigError):
        EnsembleConfig("ensemble", 1)
    with pytest.raises(ConfigError):
        EnsembleConfig("boosting", 3)
    assert EnsembleConfig("ensemble", 3, TrainConfig(seed=5)).member_seeds == (5, 6, 7)
    assert EnsembleConfig("bootstrap").members == 15


def test_ensemble_members_differ_and_mean_beats_members():
    x, y = _toy(400, 0)
    xv, yv = _toy(100, 1)
    xt, yt = _toy(300, 2)
    cfg = EnsembleConfig("ensemble", 4, FAST, hidden=(16, 16))
    models, _ = train_ensemble((x, y), (xv, yv), cfg)
    assert len(models) == 4
    for a in range(4):
        for b in range(a + 1, 4):
            assert np.max(np.abs(models[a].params[0] - models[b].params[0])) > 1e-9
    out = members_predict(models, xt)
    p = aggregate(out)
    ens_mae = np.mean(np.abs(p.mean - yt))
    member_mae = np.mean(np.abs(out.means - yt[None, :]), axis=1)
    # triangle inequality: the averaged prediction is never worse than the average member
    assert ens_mae <= member_mae.mean() + 1e-12
    assert np.all(p.epi > 0)


def test_overlapping_train_and_val_rejected():
    x, y = _toy(50, 0)
    cfg = EnsembleConfig("ensemble", 2, FAST, hidden=(4,))
    with pytest.raises(InputError):
        train_ensemble((x, y), (x, y), cfg, train_idx=np.arange(10), val_idx=np.arange(5, 15))


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

def test_bootstrap_indices_statistics():
    n = 10_000
    idx = member_bootstrap_indices(n, 3)
    assert idx.shape == (n,)
    assert idx.min() >= 0 and idx.max() < n
    assert abs(np.unique(idx).size / n - (1 - np.exp(-1))) < 0.02
    assert np.array_equal(idx, member_bootstrap_indices(n, 3))
    assert not np.array_equal(idx, member_bootstrap_indices(n, 4))


def test_train_bootstrap():
    x, y = _toy(150, 0)
    xv, yv = _toy(40, 1)
    cfg = EnsembleConfig("bootstrap", 3, FAST, hidden=(8,))
    models, hists = train_bootstrap((x, y), (xv, yv), cfg)
    assert len(models) == 3 and len(hists) == 3
    again, _ = train_bootstrap((x, y), (xv, yv), cfg)
    for a, b in zip(models, again):
        assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


def test_trainers_check_method():
    x, y = _toy(20, 0)
    with pytest.raises(ConfigError):
        train_bootstrap((x, y), (x, y), EnsembleConfig("ensemble", 2, FAST))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def test_manifest_roundtrip_and_tamper(tmp_path):
    models = [random_model((2, 3, 2), s) for s in (0, 1, 2)]
    h = config_hash({"a": 1})
    manifest, digest = write_manifest(tmp_path / "manifest.json", "ensemble", models, (0, 1, 2), h, 3)
    assert len(list((tmp_path / "models").iterdir())) == 3
    loaded, got = read_manifest(tmp_path / "manifest.json")
    assert loaded == manifest and loaded["config_hash"] == h
    for a, b in zip(models, got):
        assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    _, digest2 = write_manifest(tmp_path / "manifest.json", "ensemble", models, (0, 1, 2), h, 3)
    assert digest == digest2

    ckpt = tmp_path / "models" / "member_001.ckpt"
    data = bytearray(ckpt.read_bytes())
    data[-1] ^= 0xFF
    ckpt.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "manifest.json")


def test_manifest_missing_or_wrong_format(tmp_path):
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "none.json")
    (tmp_path / "m.json").write_text('{"format": "other"}')
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "m.json")
