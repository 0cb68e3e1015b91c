import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from agrifuse.autodiff import ops
from agrifuse.autodiff.gradcheck import check_gradients
from agrifuse.autodiff.tensor import Tensor
from agrifuse.errors import ConfigError, InputError, ShapeError
from agrifuse.models.fusion import (
    FusionModel,
    ModelConfig,
    classify,
    classify_batch,
    fuse,
    fusion_forward,
)
from agrifuse.models.params import load_checkpoint, save_checkpoint
from agrifuse.models.vit import ViTConfig, ViTParams, attention_map, patchify, patchify_embed, vit_forward
from agrifuse.models.weather import EncoderConfig, EncoderStackParams, expand, weather_forward

BLOCK_TOL = 1e-4
SMALL_VIT = dict(image_size=32, patch=16, channels=9, dim=8, layers=2, heads=2, d_ff=16)


def small_vit(rng, **kw):
    return ViTParams(ViTConfig(**{**SMALL_VIT, **kw}), rng)


def small_encoder(rng, **kw):
    cfg = dict(in_features=11, tokens=3, d_model=8, layers=2, heads=2, d_ff=12, dropout=0.1, out_features=196)
    cfg.update(kw)
    return EncoderStackParams(EncoderConfig(**cfg), rng)


# -- ViT --------------------------------------------------------------------------


def test_input_stats_default_identity_and_fit(rng):
    p = small_vit(rng)
    x = rng.random((7, 9, 32, 32))
    before = patchify_embed(x, p).data
    assert p.pixel_mean.value.shape == (9, 32, 32) and p.pixel_scale.value.tolist() == [1.0]
    # the default statistics leave the input bitwise unchanged
    p2 = small_vit(np.random.default_rng(1234))
    p2.pixel_mean.value = np.zeros((9, 32, 32))
    assert patchify_embed(x, p2).data.tobytes() == patchify_embed(x, small_vit(np.random.default_rng(1234))).data.tobytes()
    p.set_input_stats(x)
    z = (x - p.pixel_mean.value) / p.pixel_scale.value
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    assert np.sqrt(np.mean(z**2)) == pytest.approx(1.0, rel=1e-12)
    assert not np.allclose(patchify_embed(x, p).data, before)


def test_input_stats_constant_images(rng):
    p = small_vit(rng)
    p.set_input_stats(np.full((3, 9, 32, 32), 0.5))
    assert p.pixel_scale.value.tolist() == [1.0]
    with pytest.raises(ShapeError):
        p.set_input_stats(np.zeros((0, 9, 32, 32)))
    with pytest.raises(ShapeError):
        p.set_input_stats(np.zeros((2, 3, 32, 32)))


def test_full_geometry_token_count_and_output_shape():
    p = ViTParams(ViTConfig(layers=1, dim=16, heads=2, d_ff=16), np.random.default_rng(0))
    img = np.random.default_rng(1).random((9, 224, 224))
    assert patchify_embed(Tensor(img), p).shape == (197, 16)
    assert vit_forward(img, p).shape == (14, 14)


def test_patchify_embed_zero_image_zero_sequence(rng):
    p = small_vit(rng)
    p.pos.data[...] = 0.0
    p.cls_token.data[...] = 0.0
    np.testing.assert_array_equal(patchify_embed(np.zeros((9, 32, 32)), p).data, 0.0)


def test_constant_image_patch_rows_closed_form(rng):
    p = small_vit(rng)
    z = patchify_embed(np.full((9, 32, 32), 0.3), p).data
    expected = 0.3 * p.patch_proj.data.sum(axis=0)
    np.testing.assert_allclose(z[1:] - p.pos.data[1:], np.tile(expected, (4, 1)), atol=1e-12)
    np.testing.assert_allclose(z[0], p.cls_token.data + p.pos.data[0], atol=1e-15)


def test_patch_scan_order_and_flattening():
    img = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)
    patches = patchify(Tensor(img), 2).data
    # second patch is the top-right 2x2 block, flattened (row, col, channel)
    block = img[:, 0:2, 2:4]
    np.testing.assert_array_equal(patches[1], block.transpose(1, 2, 0).ravel())


def test_patchify_is_bijection():
    img = np.random.default_rng(3).random((9, 32, 32))
    flat = np.sort(patchify(Tensor(img), 16).data.ravel())
    np.testing.assert_array_equal(flat, np.sort(img.ravel()))


def test_vit_rejects_wrong_geometry(rng):
    p = small_vit(rng)
    with pytest.raises(ShapeError):
        vit_forward(np.zeros((3, 32, 32)), p)
    with pytest.raises(ShapeError):
        vit_forward(np.zeros((9, 48, 48)), p)
    with pytest.raises(ConfigError):
        ViTConfig(image_size=30, patch=16)


def test_vit_zero_weights_zero_output(rng):
    p = small_vit(rng)
    for t in p.parameters().values():
        t.data[...] = 0.0
    np.testing.assert_array_equal(vit_forward(rng.random((9, 32, 32)), p).data, 0.0)


def test_vit_eval_deterministic_and_batched(rng):
    p = small_vit(rng)
    imgs = rng.random((3, 9, 32, 32))
    a = vit_forward(imgs[0], p).data
    assert a.tobytes() == vit_forward(imgs[0], p).data.tobytes()
    np.testing.assert_allclose(vit_forward(imgs, p).data[0], a, atol=1e-12)


def test_attention_map_uniform_when_qk_zero(rng):
    p = small_vit(rng, image_size=64)
    for blk in p.blocks:
        blk.attn.w_q.data[...] = 0.0
        blk.attn.w_k.data[...] = 0.0
    amap = attention_map(rng.random((9, 64, 64)), p)
    assert amap.shape == (4, 4)
    np.testing.assert_allclose(amap, 1.0 / 16, atol=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_attention_map_is_distribution(seed):
    r = np.random.default_rng(seed)
    p = small_vit(r)
    amap = attention_map(r.random((9, 32, 32)), p)
    assert np.all(amap >= 0)
    assert abs(amap.sum() - 1.0) < 1e-10


def test_patch_permutation_invariance_without_positions(rng):
    p = small_vit(rng, image_size=48)
    p.pos.data[...] = 0.0
    img = rng.random((9, 48, 48))
    blocks = [img[:, 16 * r : 16 * r + 16, 16 * c : 16 * c + 16] for r in range(3) for c in range(3)]
    perm = rng.permutation(9)
    shuffled = np.zeros_like(img)
    for k, src in enumerate(perm):
        r, c = divmod(k, 3)
        shuffled[:, 16 * r : 16 * r + 16, 16 * c : 16 * c + 16] = blocks[src]
    np.testing.assert_allclose(vit_forward(shuffled, p).data, vit_forward(img, p).data, atol=1e-10)


def test_vit_gradient_reduced_geometry(rng):
    p = small_vit(rng)
    img = Tensor(rng.random((9, 32, 32)), requires_grad=True)
    w = rng.normal(size=(14, 14))
    params = dict(p.named_parameters())
    params["image"] = img
    errors = check_gradients(lambda: ops.sum(vit_forward(img, p) * w), params, max_entries=40)
    assert max(errors.values()) < BLOCK_TOL, errors


# -- weather encoder ----------------------------------------------------------------


def test_expand_zero_weights_gives_bias_tokens(rng):
    p = small_encoder(rng)
    p.expand_w.data[...] = 0.0
    p.expand_b.data[...] = rng.normal(size=p.expand_b.shape)
    out = expand(rng.normal(size=11), p).data
    np.testing.assert_array_equal(out, p.expand_b.data.reshape(3, 8))


def test_expand_matches_affine_oracle(rng):
    p = small_encoder(rng)
    p.expand_b.data[...] = rng.normal(size=p.expand_b.shape)
    x = rng.normal(size=11)
    np.testing.assert_allclose(expand(x, p).data, (x @ p.expand_w.data + p.expand_b.data).reshape(3, 8), atol=1e-12)


def test_expand_rejects_nan(rng):
    p = small_encoder(rng)
    x = np.zeros(11)
    x[4] = np.nan
    with pytest.raises(InputError):
        expand(x, p)
    with pytest.raises(ShapeError):
        expand(np.zeros(10), p)


@given(st.integers(0, 2**32 - 1))
def test_weather_shape_contract_and_determinism(seed):
    r = np.random.default_rng(seed)
    p = small_encoder(r)
    x = r.normal(size=11)
    a = weather_forward(x, p).data
    assert a.shape == (14, 14) and np.all(np.isfinite(a))
    assert a.tobytes() == weather_forward(x, p).data.tobytes()


def test_default_weather_encoder_geometry():
    p = EncoderStackParams(EncoderConfig(), np.random.default_rng(0))
    assert p.expand_w.shape == (11, 512)
    assert len(p.blocks) == 12 and p.blocks[0].attn.heads == 8
    assert weather_forward(np.zeros(11), p).shape == (14, 14)


def test_weather_zero_head_zero_output(rng):
    p = small_encoder(rng)
    p.head_w.data[...] = 0.0
    np.testing.assert_array_equal(weather_forward(rng.normal(size=11), p).data, 0.0)


def test_weather_gradient(rng):
    p = small_encoder(rng, dropout=0.0)
    x = Tensor(rng.normal(size=(2, 11)), requires_grad=True)
    w = rng.normal(size=(2, 14, 14))
    params = dict(p.named_parameters())
    params["x"] = x
    errors = check_gradients(lambda: ops.sum(weather_forward(x, p) * w), params, max_entries=40)
    assert max(errors.values()) < BLOCK_TOL, errors


def test_weather_train_mode_dropout_gradient(rng):
    p = small_encoder(rng, dropout=0.3)
    x = Tensor(rng.normal(size=11))
    w = rng.normal(size=(14, 14))
    fn = lambda: ops.sum(weather_forward(x, p, training=True, rng=np.random.default_rng(5)) * w)  # noqa: E731
    errors = check_gradients(fn, dict(p.named_parameters()), max_entries=30)
    assert max(errors.values()) < BLOCK_TOL, errors


# -- fusion --------------------------------------------------------------------------


def test_fuse_examples(rng):
    A, B = rng.normal(size=(14, 14)), rng.normal(size=(14, 14))
    out = fuse(A, B).data
    assert out.shape == (28, 14)
    np.testing.assert_array_equal(out[:14], A)
    np.testing.assert_array_equal(out[14:], B)
    z = fuse(np.zeros((14, 14)), B).data
    np.testing.assert_array_equal(z[:14], 0.0)
    with pytest.raises(ShapeError):
        fuse(np.zeros((14, 13)), B)


def test_fusion_zero_head_returns_bias(rng):
    p = small_encoder(rng, in_features=28 * 14, out_features=2)
    p.head_w.data[...] = 0.0
    p.head_b.data[...] = [0.7, -1.3]
    for _ in range(3):
        np.testing.assert_array_equal(fusion_forward(rng.normal(size=(28, 14)), p).data, [0.7, -1.3])


def test_fusion_logits_finite_fuzz(rng):
    p = small_encoder(rng, in_features=28 * 14, out_features=2)
    x = rng.normal(size=(1000, 28, 14))
    logits = fusion_forward(x, p).data
    assert logits.shape == (1000, 2) and np.all(np.isfinite(logits))


def test_fusion_gradient(rng):
    p = small_encoder(rng, in_features=28 * 14, out_features=2, dropout=0.0)
    x = Tensor(rng.normal(size=(28, 14)), requires_grad=True)
    w = rng.normal(size=2)
    params = dict(p.named_parameters())
    params["x"] = x
    errors = check_gradients(lambda: ops.sum(fusion_forward(x, p) * w), params, max_entries=40)
    assert max(errors.values()) < BLOCK_TOL, errors


def test_classify_examples():
    assert classify(np.array([0.0, 0.0])) == (0, 0.5)
    label, p = classify(np.array([-3.0, 5.0]))
    assert label == 1 and p == pytest.approx(1 / (1 + np.exp(-8)), abs=1e-15)
    assert p == pytest.approx(0.99966, abs=5e-6)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-100, 100), st.floats(0.01, 100))
def test_classify_shift_and_scale_invariance(a, b, c, s):
    label, p = classify(np.array([a, b]))
    label_c, p_c = classify(np.array([a + c, b + c]))
    assert label_c == label or abs(a - b) < 1e-9
    assert p_c == pytest.approx(p, abs=1e-9)
    # a subnormal gap can underflow to a tie when scaled
    assert classify(np.array([a * s, b * s]))[0] == label or abs(a - b) < 1e-9


def test_classify_batch_matches_scalar(rng):
    z = rng.normal(size=(20, 2))
    z[3] = [1.0, 1.0]
    labels, probs = classify_batch(z)
    for i in range(20):
        assert (labels[i], probs[i]) == classify(z[i])


def tiny_model_config(branch="fusion"):
    vit = ViTConfig(**SMALL_VIT)
    enc = dict(tokens=2, d_model=8, layers=1, heads=2, d_ff=8)
    rows = 28 if branch == "fusion" else 14
    return ModelConfig(
        vit=vit,
        weather=EncoderConfig(in_features=11, out_features=196, **enc),
        fusion=EncoderConfig(in_features=rows * 14, out_features=2, **enc),
        branch=branch,
    )


@pytest.mark.parametrize("branch", ["fusion", "image_only", "weather_only"])
def test_model_branches_shape_contract(rng, branch):
    model = FusionModel(tiny_model_config(branch), rng)
    imgs, weather = rng.random((4, 9, 32, 32)), rng.normal(size=(4, 11))
    emb = model.embed(imgs, weather)
    assert emb.shape == ((4, 28, 14) if branch == "fusion" else (4, 14, 14))
    assert model(imgs, weather).shape == (4, 2)
    assert hasattr(model, "vit") == (branch != "weather_only")
    assert hasattr(model, "weather") == (branch != "image_only")


def test_pipeline_full_geometry_pure():
    cfg = ModelConfig(
        vit=ViTConfig(dim=16, layers=1, heads=2, d_ff=16),
        weather=EncoderConfig(layers=1, d_model=16, heads=2, d_ff=16),
        fusion=EncoderConfig(in_features=392, out_features=2, layers=1, d_model=16, heads=2, d_ff=16),
    )
    model = FusionModel(cfg, np.random.default_rng(0))
    img, w = np.random.default_rng(1).random((9, 224, 224)), np.random.default_rng(2).normal(size=11)
    a = model(img, w).data
    assert a.shape == (2,)
    assert classify(a) == classify(model(img, w).data)
    assert a.tobytes() == model(img, w).data.tobytes()


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(branch="bogus")
    with pytest.raises(ConfigError):
        ModelConfig(branch="image_only")  # default fusion width is for (28, 14)
    cfg = tiny_model_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_round_trip(tmp_path, rng):
    model = FusionModel(tiny_model_config(), rng)
    save_checkpoint(tmp_path / "ck", model.state_dict(), {"model": model.config.to_dict()})
    tensors, meta = load_checkpoint(tmp_path / "ck")
    other = FusionModel(ModelConfig.from_dict(meta["model"]), np.random.default_rng(99))
    other.load_state_dict(tensors)
    x, w = rng.random((2, 9, 32, 32)), rng.normal(size=(2, 11))
    assert model(x, w).data.tobytes() == other(x, w).data.tobytes()
    assert (tmp_path / "ck" / "manifest.json").exists()


def test_checkpoint_keeps_input_stats(tmp_path, rng):
    model = FusionModel(tiny_model_config(), rng)
    model.vit.set_input_stats(rng.random((5, 9, 32, 32)))
    save_checkpoint(tmp_path / "ck", model.state_dict(), {"model": model.config.to_dict()})
    tensors, meta = load_checkpoint(tmp_path / "ck")
    other = FusionModel(ModelConfig.from_dict(meta["model"]), np.random.default_rng(99))
    other.load_state_dict(tensors)
    assert other.vit.pixel_mean.value.tobytes() == model.vit.pixel_mean.value.tobytes()
    assert other.vit.pixel_scale.value.tobytes() == model.vit.pixel_scale.value.tobytes()
    x, w = rng.random((2, 9, 32, 32)), rng.normal(size=(2, 11))
    assert model(x, w).data.tobytes() == other(x, w).data.tobytes()
