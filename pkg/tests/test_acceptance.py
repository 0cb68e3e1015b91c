"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines go straight to the
terminal (capture is bypassed for them).
"""

import time

import numpy as np
import pytest
from _pipeline import run_pipeline
from test_autodiff import primitive_cases
from test_transformer import randomize, zero_sublayers

from agrifuse.analysis.experiments import PRUNE_FRACTIONS, PRUNE_SCOPES, evaluate, prune_model, prune_table
from agrifuse.autodiff import ops
from agrifuse.autodiff.gradcheck import check_gradients
from agrifuse.autodiff.tensor import Tensor
from agrifuse.data.assemble import assemble
from agrifuse.data.indices import INDEX_ORDER
from agrifuse.data.synthetic import RampSpec, SyntheticSpec, ramp_series, synthesize_dataset
from agrifuse.data.weather_io import standardize_stats
from agrifuse.models.convlstm import ConvLSTMConfig, ConvLSTMParams, convlstm_forward, gates
from agrifuse.models.transformer import EncoderParams, encoder_block_postnorm, encoder_block_prenorm, scaled_attention
from agrifuse.models.vit import ViTConfig, ViTParams, vit_forward
from agrifuse.series import linear_interpolate
from agrifuse.training.convlstm_train import ConvLSTMTrainConfig, train_convlstm
from agrifuse.training.fusion_train import FusionTrainConfig, load_fusion, overfit_one_batch, save_fusion, train_fusion
from agrifuse.training.optim import AdamState, adam_step
from agrifuse.training.schedule import Schedule, cosine_warmup_lr

pytestmark = pytest.mark.slow

# scaled geometry for the fusion experiments (64x64 imagery, small encoders)
FUSION_CONFIG = dict(
    epochs=600, warmup=10, lr=1e-3, batch=8, patience=60,
    layers=2, heads=4, d_model=32, d_ff=64, tokens=8, dropout=0.1,
    vit_patch=8, vit_dim=32, vit_layers=2, vit_heads=4, vit_d_ff=64,
)
CONVLSTM_CONFIG = dict(hidden=8, epochs=3, batch=4, lr=1e-4, warmup=1, final_fit=False)


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


# -- 1. gradient suite -------------------------------------------------------------------


def _block_errors(rng):
    out = {}
    for kind, block in (("pre-norm", encoder_block_prenorm), ("post-norm", encoder_block_postnorm)):
        p = randomize(EncoderParams.init(8, 2, 12, rng), rng)
        x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
        w = rng.normal(size=(5, 8))
        params = {**dict(p.named_parameters()), "x": x}
        out[kind] = max(check_gradients(lambda: ops.sum(block(x, p) * w), params).values())

    vit = ViTParams(ViTConfig(image_size=32, patch=16, channels=9, dim=8, layers=2, heads=2, d_ff=16), rng)
    img = Tensor(rng.random((9, 32, 32)), requires_grad=True)
    w = rng.normal(size=(14, 14))
    params = {**dict(vit.named_parameters()), "image": img}
    out["vit 9x32x32 D=8 L=2"] = max(
        check_gradients(lambda: ops.sum(vit_forward(img, vit) * w), params, max_entries=40).values()
    )

    p = ConvLSTMParams(ConvLSTMConfig(channels=1, height=8, width=8, hidden=2), rng)
    for name, t in p.named_parameters():
        scale = 0.3 if "w_c" in name else 0.5
        t.data[...] = rng.normal(scale=scale, size=t.shape) if t.ndim > 1 else t.data + rng.normal(scale=0.1, size=t.shape)
    p.out_w.data[...] = rng.normal(scale=0.02, size=p.out_w.shape)
    p.out_b.data[...] = 0.0
    for blk in p.blocks:
        blk.bn.running_var[...] = rng.uniform(0.5, 2.0, size=blk.bn.running_var.shape)
    x = Tensor(0.3 + 0.4 * rng.random((2, 3, 1, 8, 8)), requires_grad=True)
    w = rng.normal(size=(2, 1, 8, 8))
    params = {**dict(p.named_parameters()), "x": x}
    out["convlstm 1x8x8"] = max(
        check_gradients(lambda: ops.sum(convlstm_forward(x, p, training=False) * w), params, max_entries=30).values()
    )
    return out


def test_criterion_1_gradient_suite(capsys):
    start = time.time()
    prim = {}
    for name, (fn, params) in primitive_cases(np.random.default_rng(0)).items():
        prim[name] = max(check_gradients(fn, params).values())
    rng = np.random.default_rng(1)
    q, k, v = (Tensor(rng.normal(size=(4, 6)), requires_grad=True) for _ in range(3))
    w = rng.normal(size=(4, 6))
    prim["scaled_attention"] = max(
        check_gradients(lambda: ops.sum(scaled_attention(q, k, v) * w), {"q": q, "k": k, "v": v}).values()
    )
    blocks = _block_errors(np.random.default_rng(2))
    elapsed = time.time() - start
    worst_prim = max(prim, key=prim.get)
    worst_block = max(blocks, key=blocks.get)
    ok = prim[worst_prim] < 1e-5 and blocks[worst_block] < 1e-4 and elapsed < 300
    report(capsys, 1, ok, f"{len(prim)} primitives max rel err {prim[worst_prim]:.1e} ({worst_prim}) < 1e-5; "
           f"{len(blocks)} blocks max {blocks[worst_block]:.1e} ({worst_block}) < 1e-4; {elapsed:.0f} s < 300 s")
    assert ok


# -- 2. invariant suite --------------------------------------------------------------------


def _invariants(seed):
    r = np.random.default_rng(seed)
    failures = []

    x = r.normal(scale=20, size=(4, 7))
    if np.max(np.abs(ops.softmax(Tensor(x), axis=-1).data.sum(axis=-1) - 1)) > 1e-12:
        failures.append("softmax")

    Q, K, V = r.normal(scale=3, size=(3, 4)), r.normal(scale=3, size=(6, 4)), r.normal(size=(6, 5))
    out = scaled_attention(Tensor(Q), Tensor(K), Tensor(V)).data
    if np.any(out < V.min(axis=0) - 1e-12) or np.any(out > V.max(axis=0) + 1e-12):
        failures.append("convex hull")

    kind = (encoder_block_prenorm, encoder_block_postnorm)[seed % 2]
    p = randomize(EncoderParams.init(8, 2, 16, r), r)
    x = r.normal(size=(6, 8))
    perm = r.permutation(6)
    if np.max(np.abs(kind(Tensor(x[perm]), p).data - kind(Tensor(x), p).data[perm])) > 1e-10:
        failures.append("permutation equivariance")

    z = zero_sublayers(randomize(EncoderParams.init(8, 2, 16, r), r))
    x = r.normal(size=(5, 8))
    if encoder_block_prenorm(Tensor(x), z).data.tobytes() != x.tobytes():
        failures.append("pre-norm identity")

    a, b = r.random((3, 5, 5)), r.random((3, 5, 5))
    k = int(r.integers(2, 10))
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    for i in range(1, k):
        m = linear_interpolate(a, b, i, k)
        if np.any(m < lo) or np.any(m > hi):
            failures.append("interpolation bound")
            break
    if linear_interpolate(a, a, 1, k).tobytes() != a.tobytes():
        failures.append("interpolation of equal endpoints")

    cell = ConvLSTMParams(ConvLSTMConfig(channels=2, height=4, width=4, hidden=3), r).blocks[0]
    for t in cell.parameters().values():
        t.data[...] = r.normal(scale=0.3, size=t.shape)
    gi, gf, go = gates(r.normal(scale=0.3, size=(2, 4, 4)), r.normal(size=(3, 4, 4)),
                       r.normal(scale=0.3, size=(3, 4, 4)), cell)
    if not all(np.all((g > 0) & (g < 1)) for g in (gi, gf, go)):
        failures.append("gate range")

    w0 = r.normal(scale=10, size=(3, 4))
    t = Tensor(w0.copy(), requires_grad=True)
    state = AdamState(lr=float(r.uniform(1e-5, 1.0)))
    for _ in range(int(r.integers(1, 6))):
        t.grad = np.zeros_like(w0)
        adam_step([t], state)
    if t.data.tobytes() != w0.tobytes():
        failures.append("adam fixed point")
    return failures


def test_criterion_2_invariant_suite(capsys):
    failures = {}
    for seed in range(100):
        for name in _invariants(seed):
            failures[name] = failures.get(name, 0) + 1
    ok = not failures
    detail = "7 invariant families x 100 randomized instances" + ("" if ok else f"; failures {failures}")
    report(capsys, 2, ok, detail)
    assert ok


# -- 3. scheduler golden values ----------------------------------------------------------------


def test_criterion_3_schedule_golden_values(capsys):
    peak = 1e-6
    s = Schedule(100, 600, peak)
    want = {0: 0.0, 100: peak, 350: peak / 2, 600: 0.0}
    errors = {e: abs(cosine_warmup_lr(e, s) - v) for e, v in want.items()}
    ok = max(errors.values()) <= 1e-12
    report(capsys, 3, ok, f"lr at epochs 0/100/350/600 max abs err {max(errors.values()):.1e} <= 1e-12")
    assert ok


# -- 4. ConvLSTM generation ---------------------------------------------------------------------


def test_criterion_4_convlstm_generation(capsys):
    observed, _ = ramp_series(RampSpec(size=32, drift=0.0025), np.random.default_rng(0))
    start = time.time()
    rep, _ = train_convlstm({"ramp": observed}, ConvLSTMTrainConfig(**CONVLSTM_CONFIG))
    elapsed = time.time() - start
    rmses = [r["rmse"] for f in rep["folds"] for r in f["results"]]
    per_fold = {f["test_year"]: f["mean_rmse"] for f in rep["folds"]}
    ok = len(per_fold) == 4 and len(rmses) == 36 and max(rmses) < 5e-3 and elapsed < 1800
    report(capsys, 4, ok, f"4 folds x 9 sigmas, held-out real-frame RMSE max {max(rmses):.2e} "
           f"(fold means {', '.join(f'{v:.2e}' for v in per_fold.values())}) < 5e-3; {elapsed:.0f} s < 1800 s")
    assert ok


# -- 5-7. fusion experiments on the joint-dependence dataset -----------------------------------------


@pytest.fixture(scope="module")
def fusion_samples():
    ds = synthesize_dataset(SyntheticSpec(), np.random.default_rng(0))
    series = {p: {k: ds.truth_series(p, k) for k in INDEX_ORDER} for p in ds.plots}
    train_weather = [r for r in ds.weather if r.date.year in (2018, 2019)]
    stats = standardize_stats(np.stack([r.features() for r in train_weather]))
    return assemble(series, ds.weather, ds.labels, stats=stats)


@pytest.fixture(scope="module")
def fusion_runs(fusion_samples):
    runs = {}
    for branch in ("fusion", "image_only", "weather_only"):
        runs[branch] = train_fusion(fusion_samples, FusionTrainConfig(**FUSION_CONFIG, branch=branch))
    return runs


def test_criterion_5_fusion_training(capsys, fusion_samples, fusion_runs):
    run = fusion_runs["fusion"]
    acc = run.report["test"]["accuracy"]
    epochs = len(run.history["train_loss"])
    batch = [s for s in fusion_samples if s.label == 1][:4] + [s for s in fusion_samples if s.label == 0][:4]
    losses = overfit_one_batch(batch, FusionTrainConfig(**FUSION_CONFIG), steps=2000, target=0.01)
    ok = acc >= 0.95 and epochs <= 600 and losses[-1] < 0.01
    report(capsys, 5, ok, f"test accuracy {acc:.3f} >= 0.95 after {epochs} epochs (<= 600); "
           f"overfit 4+4 batch loss {losses[0]:.3f} -> {losses[-1]:.4f} < 0.01 after {len(losses)} steps (<= 2000)")
    assert ok


def test_criterion_6_ablation_ordering(capsys, fusion_runs):
    acc = {b: r.report["test"]["accuracy"] for b, r in fusion_runs.items()}
    gap = acc["fusion"] - max(acc["image_only"], acc["weather_only"])
    ok = gap >= 0.10
    report(capsys, 6, ok, f"fusion {acc['fusion']:.3f}, image-only {acc['image_only']:.3f}, "
           f"weather-only {acc['weather_only']:.3f}; gap {100 * gap:.1f} points >= 10")
    assert ok


def test_criterion_7_pruning(capsys, fusion_samples, fusion_runs, tmp_path):
    save_fusion(tmp_path / "ck", fusion_runs["fusion"].model, {"purpose": "acceptance"})
    start = time.time()
    model, _ = load_fusion(tmp_path / "ck")
    test = [s for s in fusion_samples if s.date.year in (2020, 2021)]
    table = prune_table(model, test)
    elapsed = time.time() - start
    exact = all(m["pruned"] == m["expected"] == int(np.floor(m["fraction"] * m["weights_in_scope"]))
                for m in table["masks"])
    combos = {(m["scope"], m["fraction"]) for m in table["masks"]}
    baseline = evaluate(model, test).to_dict()
    p0_equal = all(evaluate(prune_model(model, scope, 0.0)[0], test).to_dict() == baseline for scope in PRUNE_SCOPES)
    ok = exact and p0_equal and combos == {(s, p) for s in PRUNE_SCOPES for p in PRUNE_FRACTIONS} and elapsed < 300
    report(capsys, 7, ok, f"{len(combos)} scope x fraction cells all prune exactly floor(pN); p=0 bitwise equal "
           f"to baseline: {p0_equal}; report from checkpoint in {elapsed:.0f} s < 300 s")
    assert ok


# -- 8. end-to-end determinism ---------------------------------------------------------------------


def test_criterion_8_determinism(capsys, tmp_path):
    first = run_pipeline(tmp_path / "a", seed=7).read_bytes()
    second = run_pipeline(tmp_path / "b", seed=7).read_bytes()
    ok = first == second
    report(capsys, 8, ok, f"synth-data -> interpolate -> train-convlstm -> gen-daily -> train-fusion -> evaluate "
           f"twice with seed 7: metric JSON bitwise identical ({len(first)} bytes)")
    assert ok
