"""Training loop, history recording, restricted fits, divergence handling."""

import csv

import numpy as np
import pytest

from noisedg.datagen import (
    EnvironmentSpec,
    FeatureSpec,
    apply_random_projection,
    sample_environment,
)
from noisedg.errors import TrainingDivergedError
from noisedg.model import BlockMask, predict_logits, zero_one_error
from noisedg.objectives import ObjectiveConfig
from noisedg.trainer import TrainConfig, fit_restricted, train

SMALL = FeatureSpec(d_inv=2, d_spu=2, d_nui=8, var_inv=0.25, var_spu=0.25)
ERM = ObjectiveConfig(kind="ERM")


def _env(seed: int = 0, n: int = 60, eta: float = 0.0, env_id: str = "e0"):
    env = EnvironmentSpec(n=n, gamma=0.9, eta=eta, env_id=env_id)
    return sample_environment(SMALL, env, seed)


# ---------------------------------------------------------------------------
# config validation

def test_train_config_rejects_bad_values():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0, steps=10)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.1, steps=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.1, steps=10, l2_reg=-1e-6)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.1, steps=10, record_every=0)


# ---------------------------------------------------------------------------
# basic optimization behaviour

def test_erm_objective_decreases_monotonically():
    cfg = TrainConfig(learning_rate=0.1, steps=200, record_every=1)
    _, hist = train([_env()], ERM, cfg)
    vals = np.array(hist.objective)
    assert (np.diff(vals) <= 1e-12).all()
    assert vals[-1] < vals[0]


def test_erm_fits_noise_free_training_set():
    cfg = TrainConfig(learning_rate=0.5, steps=500)
    ds = _env()
    model, hist = train([ds], ERM, cfg)
    assert hist.train_err[-1] <= 0.05
    assert zero_one_error(model, ds.features, ds.labels) == hist.train_err[-1]


def test_training_is_deterministic():
    cfg = TrainConfig(learning_rate=0.3, steps=100, l2_reg=1e-4, seed=5)
    m1, h1 = train([_env()], ERM, cfg)
    m2, h2 = train([_env()], ERM, cfg)
    assert np.array_equal(m1.flat(), m2.flat())
    assert h1.objective == h2.objective


def test_history_records_start_every_interval_and_final_step():
    cfg = TrainConfig(learning_rate=0.1, steps=5, record_every=2)
    _, hist = train([_env()], ERM, cfg)
    assert hist.steps == [0, 2, 4, 5]
    assert len(hist) == 4


def test_history_initial_row_is_zero_model():
    cfg = TrainConfig(learning_rate=0.1, steps=1, record_every=1)
    ds = _env()
    _, hist = train([ds], ERM, cfg)
    assert hist.norm_inv[0] == 0.0
    assert hist.norm_spu[0] == 0.0
    assert hist.norm_nui[0] == 0.0
    assert np.isclose(hist.objective[0], np.log(2.0))
    # the zero model scores every sample on the boundary; ties count as errors
    assert hist.train_err[0] == 1.0


def test_memo_acc_nan_without_flips_defined_with():
    cfg = TrainConfig(learning_rate=0.3, steps=50)
    _, clean_hist = train([_env(eta=0.0)], ERM, cfg)
    assert np.isnan(clean_hist.memo_acc[-1])
    _, noisy_hist = train([_env(eta=0.3, n=100)], ERM, cfg)
    assert 0.0 <= noisy_hist.memo_acc[-1] <= 1.0


def test_overparameterized_fit_memorizes_flipped_labels():
    spec = FeatureSpec(d_inv=2, d_spu=2, d_nui=400, var_inv=0.25, var_spu=0.25)
    env = EnvironmentSpec(n=80, gamma=0.9, eta=0.25, env_id="e0")
    ds = sample_environment(spec, env, seed=1)
    cfg = TrainConfig(learning_rate=0.5, steps=2000)
    _, hist = train([ds], ERM, cfg)
    assert hist.train_err[-1] == 0.0
    assert hist.memo_acc[-1] == 1.0


def test_worst_group_train_error_tracks_weakest_group():
    cfg = TrainConfig(learning_rate=0.3, steps=200)
    ds = _env(n=200, eta=0.1)
    _, hist = train([ds], ERM, cfg)
    w = hist.wg_train_err[-1]
    assert w >= hist.train_err[-1]
    assert 0.0 <= w <= 1.0


# ---------------------------------------------------------------------------
# environments and validation

def test_train_rejects_empty_and_mixed_inputs():
    cfg = TrainConfig(learning_rate=0.1, steps=1)
    with pytest.raises(ValueError):
        train([], ERM, cfg)
    other_spec = FeatureSpec(d_inv=2, d_spu=2, d_nui=9)
    env = EnvironmentSpec(n=20, gamma=0.9, eta=0.0, env_id="e1")
    mixed = [_env(), sample_environment(other_spec, env, seed=0)]
    with pytest.raises(ValueError):
        train(mixed, ERM, cfg)
    proj, _ = apply_random_projection(_env(), seed=3)
    with pytest.raises(ValueError):
        train([_env(), proj], ERM, cfg)


def test_multi_env_risks_recorded_per_environment():
    cfg = TrainConfig(learning_rate=0.1, steps=20)
    envs = [_env(seed=0, env_id="a"), _env(seed=1, env_id="b")]
    _, hist = train(envs, ERM, cfg)
    assert hist.env_ids == ("a", "b")
    assert all(len(r) == 2 for r in hist.env_risks)


def test_each_objective_kind_trains_without_error():
    cfg = TrainConfig(learning_rate=0.2, steps=30)
    envs = [_env(seed=0, env_id="a"), _env(seed=1, env_id="b")]
    for obj in (
        ObjectiveConfig(kind="ERM"),
        ObjectiveConfig(kind="ERM", erm_pooled=True),
        ObjectiveConfig(kind="IRMv1", penalty_lambda=10.0),
        ObjectiveConfig(kind="VREx", penalty_lambda=10.0),
        ObjectiveConfig(kind="GroupDRO", dro_step=0.05),
        ObjectiveConfig(kind="Mixup", mixup_alpha=0.2),
    ):
        model, hist = train(envs, obj, cfg)
        assert np.isfinite(hist.objective).all()
        assert np.isfinite(model.flat()).all()


def test_mixup_draws_depend_on_train_seed():
    cfg_a = TrainConfig(learning_rate=0.2, steps=30, seed=0)
    cfg_b = TrainConfig(learning_rate=0.2, steps=30, seed=1)
    obj = ObjectiveConfig(kind="Mixup", mixup_alpha=0.2)
    m_a, _ = train([_env()], obj, cfg_a)
    m_b, _ = train([_env()], obj, cfg_b)
    assert not np.array_equal(m_a.flat(), m_b.flat())


def _irm_penalty(model, envs) -> float:
    """sum_e (mean residual * logit)^2, the stationarity term the penalty drives down."""
    total = 0.0
    for ds in envs:
        phi = predict_logits(model, ds.features)
        y01 = (ds.labels + 1) / 2
        r = 1.0 / (1.0 + np.exp(-phi)) - y01
        total += float(np.mean(r * phi)) ** 2
    return total


def test_penalty_strength_shrinks_irmv1_stationarity_gap():
    cfg = TrainConfig(learning_rate=0.05, steps=300)
    envs = [_env(seed=0, env_id="a"), _env(seed=1, env_id="b")]
    weak, _ = train(envs, ObjectiveConfig(kind="IRMv1", penalty_lambda=0.0), cfg)
    strong, _ = train(envs, ObjectiveConfig(kind="IRMv1", penalty_lambda=10.0), cfg)
    assert _irm_penalty(strong, envs) < _irm_penalty(weak, envs)


# ---------------------------------------------------------------------------
# divergence

@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_learning_rate_hint():
    cfg = TrainConfig(learning_rate=1e4, steps=500, l2_reg=1.0)
    with pytest.raises(TrainingDivergedError, match="learning_rate"):
        train([_env()], ERM, cfg)


# ---------------------------------------------------------------------------
# block masks and restricted fits

def test_masked_blocks_stay_exactly_zero():
    mask = BlockMask(inv=True, spu=False, nui=True)
    cfg = TrainConfig(learning_rate=0.3, steps=100, block_mask=mask)
    model, _ = train([_env()], ERM, cfg)
    assert not model.w_spu.any()
    assert model.w_inv.any()


def test_fit_restricted_zeroes_the_excluded_block():
    cfg = TrainConfig(learning_rate=0.3, steps=200, l2_reg=1e-6)
    ds = _env(n=100)
    inv_model = fit_restricted(ds, BlockMask(inv=True, spu=False, nui=True), cfg)
    spu_model = fit_restricted(ds, BlockMask(inv=False, spu=True, nui=True), cfg)
    assert not inv_model.w_spu.any()
    assert not spu_model.w_inv.any()
    assert inv_model.w_inv.any()
    assert spu_model.w_spu.any()


def test_fit_restricted_rejects_degenerate_masks():
    cfg = TrainConfig(learning_rate=0.3, steps=10)
    ds = _env()
    with pytest.raises(ValueError):
        fit_restricted(ds, BlockMask(inv=True, spu=True, nui=True), cfg)
    with pytest.raises(ValueError):
        fit_restricted(ds, BlockMask(inv=False, spu=False, nui=True), cfg)


def test_block_mask_rejected_on_projected_features():
    proj, _ = apply_random_projection(_env(), seed=2)
    mask = BlockMask(inv=True, spu=False, nui=True)
    cfg = TrainConfig(learning_rate=0.3, steps=10, block_mask=mask)
    with pytest.raises(ValueError):
        train([proj], ERM, cfg)


def test_unmasked_training_works_on_projected_features():
    proj, _ = apply_random_projection(_env(), seed=2)
    cfg = TrainConfig(learning_rate=0.3, steps=50)
    model, hist = train([proj], ERM, cfg)
    assert np.isfinite(hist.objective).all()
    assert predict_logits(model, proj.features).shape == (60,)


# ---------------------------------------------------------------------------
# history serialization

def test_history_csv_round_trip(tmp_path):
    cfg = TrainConfig(learning_rate=0.2, steps=10, record_every=5)
    _, hist = train([_env()], ERM, cfg)
    path = tmp_path / "history.csv"
    hist.to_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == hist.header()
    assert len(rows) == len(hist) + 1
    # repr round trip: floats survive exactly
    assert float(rows[1][1]) == hist.objective[0]
