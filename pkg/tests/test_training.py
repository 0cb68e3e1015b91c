import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from agrifuse.autodiff.gradcheck import check_gradients
from agrifuse.autodiff.tensor import Tensor
from agrifuse.data.assemble import assemble
from agrifuse.data.synthetic import RampSpec, SyntheticSpec, ramp_series, synthesize_dataset
from agrifuse.errors import ConfigError, ContractError
from agrifuse.series import REAL, ImageSeries
from agrifuse.training.convlstm_train import (
    SIGMA_GRID,
    ConvLSTMTrainConfig,
    audit_batch,
    held_out_data,
    load_convlstm,
    save_convlstm,
    task_rng,
    train_convlstm,
    training_windows,
)
from agrifuse.training.fusion_train import (
    FusionTrainConfig,
    fit_fusion,
    split_years,
    to_data,
    train_fusion,
    validation_split,
)
from agrifuse.training.losses import cross_entropy, rmse_loss
from agrifuse.training.optim import AdamState, adam_step
from agrifuse.training.schedule import Schedule, cosine_warmup_lr

# -- Adam -----------------------------------------------------------------------------------


def test_adam_first_step_is_signed_lr():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0, 1e-3])
    adam_step([p], AdamState(lr=0.01))
    np.testing.assert_allclose(p.data, [1.0 - 0.01, -2.0 + 0.01, 3.0 - 0.01], atol=1e-7)


def test_adam_matches_reference_over_steps(rng):
    p = Tensor(rng.normal(size=5), requires_grad=True)
    ref, m, v = p.data.copy(), np.zeros(5), np.zeros(5)
    state = AdamState(lr=0.05)
    for t in range(1, 6):
        g = rng.normal(size=5)
        p.grad = g.copy()
        adam_step([p], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12, atol=0)
    assert state.step == 5


@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)), st.integers(1, 5), st.floats(1e-5, 1.0))
def test_adam_zero_grad_fixed_point(x, steps, lr):
    p = Tensor(x.copy(), requires_grad=True)
    state = AdamState(lr=lr)
    for _ in range(steps):
        p.grad = np.zeros_like(x)
        adam_step([p], state)
    assert p.data.tobytes() == x.tobytes()


def test_adam_deterministic_and_contracts(rng):
    g = rng.normal(size=(2, 3))
    outs = []
    for _ in range(2):
        p = Tensor(np.ones((2, 3)), requires_grad=True)
        p.grad = g.copy()
        adam_step([p], AdamState())
        outs.append(p.data.tobytes())
    assert outs[0] == outs[1]
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError, match="no gradient"):
        adam_step([p], AdamState())


# -- schedule -----------------------------------------------------------------------------


def test_schedule_golden_values():
    s = Schedule(100, 600, 1e-6)
    for epoch, want in [(0, 0.0), (100, 1e-6), (350, 5e-7), (600, 0.0)]:
        assert abs(cosine_warmup_lr(epoch, s) - want) <= 1e-12


@given(st.floats(0, 700))
def test_schedule_bounded(epoch):
    s = Schedule(100, 600, 1e-6)
    assert 0.0 <= cosine_warmup_lr(epoch, s) <= 1e-6


def test_schedule_continuous_and_shaped():
    s = Schedule(10, 50, 2.0)
    eps = 1e-9
    assert cosine_warmup_lr(10 - eps, s) == pytest.approx(cosine_warmup_lr(10 + eps, s), abs=1e-6)
    warm = [cosine_warmup_lr(e, s) for e in np.linspace(0, 10, 50)]
    decay = [cosine_warmup_lr(e, s) for e in np.linspace(10, 50, 50)]
    assert np.all(np.diff(warm) > 0) and np.all(np.diff(decay) < 0)
    assert cosine_warmup_lr(700, s) == 0.0


@pytest.mark.parametrize("args", [(0, 600, 1e-6), (600, 600, 1e-6), (100, 600, 0.0)])
def test_schedule_rejects_degenerate(args):
    with pytest.raises(ConfigError):
        Schedule(*args)


def test_schedule_rejects_negative_epoch():
    with pytest.raises(ContractError):
        cosine_warmup_lr(-1, Schedule())


# -- losses ------------------------------------------------------------------------------


def test_rmse_value_and_zero_gradient(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert rmse_loss(Tensor(a), Tensor(b)).item() == pytest.approx(np.sqrt(np.mean((a - b) ** 2)), rel=1e-14)
    p = Tensor(a.copy(), requires_grad=True)
    loss = rmse_loss(p, Tensor(a))
    loss.backward()
    assert loss.item() == 0.0 and np.all(p.grad == 0) and np.all(np.isfinite(p.grad))


def test_rmse_gradcheck(rng):
    p = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    t = rng.normal(size=(2, 5))
    assert max(check_gradients(lambda: rmse_loss(p, t), {"p": p}, rng=rng).values()) < 1e-5


def test_cross_entropy_values(rng):
    assert cross_entropy(Tensor(np.zeros(2)), 1).item() == pytest.approx(math.log(2), abs=1e-15)
    logits = rng.normal(size=(6, 2))
    labels = rng.integers(0, 2, size=6)
    lse = np.log(np.exp(logits).sum(axis=1))
    want = np.mean(lse - logits[np.arange(6), labels])
    assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(want, rel=1e-13)
    big = cross_entropy(Tensor(np.array([[1000.0, -1000.0]])), np.array([1])).item()
    assert big == pytest.approx(2000.0) and np.isfinite(big)


def test_cross_entropy_gradcheck_and_contracts(rng):
    p = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    y = np.array([0, 1, 1, 0])
    assert max(check_gradients(lambda: cross_entropy(p, y), {"p": p}, rng=rng).values()) < 1e-5
    with pytest.raises(ContractError):
        cross_entropy(p, np.array([0, 1, 2, 0]))
    with pytest.raises(ContractError):
        cross_entropy(p, np.array([0, 1]))


# -- ConvLSTM harness -----------------------------------------------------------------------


def test_sigma_grid():
    assert SIGMA_GRID == (0.04, 0.06, 0.08, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2)


def test_task_rng_independent_of_order():
    a = task_rng(0, 2019, 0.1).random(3)
    task_rng(0, 2020, 0.2).random(3)
    assert a.tobytes() == task_rng(0, 2019, 0.1).random(3).tobytes()
    assert a.tobytes() != task_rng(0, 2019, 0.12).random(3).tobytes()


def tiny_ramp(seed=0, **kw):
    spec = RampSpec(size=8, season_days=16, channels=1, **kw)
    observed, _ = ramp_series(spec, np.random.default_rng(seed))
    return {"ramp": observed}


def test_training_windows_exclude_other_years_and_pair_copies():
    series = tiny_ramp()
    rng = np.random.default_rng(0)
    x, y, dates = training_windows(series, [2018, 2019], 0.1, rng)
    assert {d.year for d in dates.ravel()} == {2018, 2019}
    assert len(x) == 2 * 2 * 13  # two seasons, 13 windows each, noised and clean
    for row in dates:
        assert [(row[k + 1] - row[k]).days for k in range(3)] == [1, 1, 1]
    x0, _, _ = training_windows(series, [2018, 2019], 0.1, np.random.default_rng(0), clean_copies=False)
    assert len(x0) == 26
    xc, _, _ = training_windows(series, [2018], 0.0, rng)
    assert len(xc) == 13  # no copies without noise


def test_held_out_targets_are_real_frames():
    series = tiny_ramp()
    tx, ty = held_out_data(series, 2020)
    real = [f.image for f in series["ramp"].frames if f.date.year == 2020 and f.provenance == REAL]
    assert len(ty) > 0
    assert all(any(np.array_equal(t, r) for r in real) for t in ty)
    assert tx.shape[1:] == (3, 1, 8, 8)


def test_audit_refuses_leak():
    dates = np.array([[dt.date(2019, 6, 1 + k) for k in range(4)]], dtype=object)
    audit_batch(dates, 2020)
    with pytest.raises(ContractError, match="held-out"):
        audit_batch(dates, 2019)


@pytest.fixture(scope="module")
def tiny_run():
    cfg = ConvLSTMTrainConfig(hidden=2, blocks=1, epochs=1, warmup=0, lr=1e-3, batch=8, final_fit=True)
    return train_convlstm(tiny_ramp(), cfg)


def test_train_convlstm_covers_grid(tiny_run):
    report, final = tiny_run
    assert [f["test_year"] for f in report["folds"]] == [2018, 2019, 2020, 2021]
    for fold in report["folds"]:
        assert [r["sigma"] for r in fold["results"]] == list(SIGMA_GRID)
        assert all(np.isfinite(r["rmse"]) for r in fold["results"])
    assert len(report["rmse_by_sigma"]) == 9
    assert final is not None and report["final"]["sigma"] in SIGMA_GRID


def test_train_convlstm_reproducible(tiny_run, tmp_path):
    cfg = ConvLSTMTrainConfig(hidden=2, blocks=1, epochs=1, warmup=0, lr=1e-3, batch=8, final_fit=True)
    report, final = train_convlstm(tiny_ramp(), cfg)
    assert report == tiny_run[0]
    save_convlstm(tmp_path / "m", final, {"sigma": 0.1})
    back, meta = load_convlstm(tmp_path / "m")
    assert meta["sigma"] == 0.1
    for k, v in final.state_dict().items():
        assert back.state_dict()[k].tobytes() == v.tobytes()


def test_convlstm_config_round_trip():
    cfg = ConvLSTMTrainConfig(hidden=3, sigma_grid=(0.1, 0.2))
    assert ConvLSTMTrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ConvLSTMTrainConfig.from_dict({"hiden": 3})
    with pytest.raises(ConfigError):
        ConvLSTMTrainConfig(sigma_grid=())


# -- fusion harness --------------------------------------------------------------------------

TINY = dict(epochs=4, warmup=1, lr=1e-3, batch=8, patience=1, layers=1, heads=2, d_model=8, d_ff=16, tokens=2,
            vit_patch=8, vit_dim=8, vit_layers=1, vit_heads=2, vit_d_ff=16)


@pytest.fixture(scope="module")
def tiny_samples():
    spec = SyntheticSpec(plots=2, season_days=10, real_counts=(4, 4, 4, 4), raster_size=16, image_size=16,
                         disease_months=(6,))
    ds = synthesize_dataset(spec, np.random.default_rng(0))
    series = {p: {k: ds.truth_series(p, k) for k in ("NDCI", "NDVI", "NDMI")} for p in ds.plots}
    return assemble(series, ds.weather, ds.labels)


def test_fusion_config_rejects_overlap():
    with pytest.raises(ConfigError, match="overlap"):
        FusionTrainConfig(train_years=(2018, 2019), test_years=(2019, 2020))
    with pytest.raises(ConfigError):
        FusionTrainConfig(branch="audio")
    with pytest.raises(ConfigError):
        FusionTrainConfig(indices=("NDVI", "NDVI"))


def test_split_and_validation_tail(tiny_samples):
    train, test = split_years(tiny_samples, (2018, 2019), (2020, 2021))
    assert {s.date.year for s in train} == {2018, 2019} and {s.date.year for s in test} == {2020, 2021}
    fit, val = validation_split(train, 0.2)
    assert len(val) == 2 * 2 * 2 and len(fit) + len(val) == len(train)
    for year in (2018, 2019):
        assert max(s.date for s in fit if s.date.year == year) < min(s.date for s in val if s.date.year == year)


def test_to_data_selects_channels_and_features(tiny_samples):
    d = to_data(tiny_samples, ("NDVI",), features=("tavg_c", "havg_pct"))
    assert d.images.shape[1:] == (3, 16, 16) and d.weather.shape[1] == 2


def test_train_fusion_reproducible(tiny_samples):
    cfg = FusionTrainConfig(**TINY)
    a = train_fusion(tiny_samples, cfg)
    b = train_fusion(tiny_samples, cfg)
    assert a.report == b.report
    assert set(a.report["test"]) >= {"accuracy", "f1", "loss", "tp", "fp", "tn", "fn"}
    for k, v in a.model.state_dict().items():
        assert v.tobytes() == b.model.state_dict()[k].tobytes()


@pytest.mark.parametrize("branch", ["image_only", "weather_only"])
def test_train_fusion_branches(tiny_samples, branch):
    run = train_fusion(tiny_samples, FusionTrainConfig(**{**TINY, "epochs": 2, "branch": branch}))
    assert 0.0 <= run.report["test"]["accuracy"] <= 1.0


def test_early_stopping_counts_after_warmup(tiny_samples, monkeypatch):
    import agrifuse.training.fusion_train as ft

    script = iter([1.0, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1])
    monkeypatch.setattr(ft, "mean_cross_entropy", lambda logits, labels: next(script))
    cfg = FusionTrainConfig(**{**TINY, "epochs": 8, "warmup": 1, "patience": 2})
    data = to_data(tiny_samples)
    model = ft.FusionModel(cfg.model_config(16, 11), np.random.default_rng(0))
    history = fit_fusion(model, data.take(slice(0, 8)), data.take(slice(8, 16)), cfg, np.random.default_rng(0))
    assert history["best_epoch"] == 1
    assert history["stopped_epoch"] == 3
    assert len(history["train_loss"]) == 4
