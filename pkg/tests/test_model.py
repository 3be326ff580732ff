"""Generative model contracts: patch round-trips, zero-initialized branch
neutrality, the residual merge rule, sampler exactness against an analytic
velocity, and the flow-matching loss.
"""
import numpy as np
import pytest

from posterkit import autodiff as ad
from posterkit import glyphs
from posterkit import model as gm
from posterkit.autodiff import Tensor
from posterkit.params import ParamStore
from posterkit.rng import RngStream

CFG = gm.ModelConfig(image_size=16, patch=4, width=32, heads=2,
                     base_blocks=3, scene_blocks=3, text_blocks=2)


def small_store(branches=True, branch_init="copy", seed=0):
    store = ParamStore()
    rng = RngStream(seed, "test/model")
    gm.init_model_params(CFG, store, rng, branches=branches, branch_init=branch_init)
    return store


def bundle_for(b=2, n_tok=3, seed=0):
    rng = np.random.default_rng(seed)
    return gm.ControlBundle(
        text_tokens=rng.standard_normal((b, n_tok, glyphs.TOKEN_DIM)).astype(np.float32),
        prompt_ids=np.zeros((b, 3), dtype=np.int64),
        mask=(rng.uniform(size=(b, 1, CFG.image_size, CFG.image_size)) < 0.5
              ).astype(np.float32),
        masked_image=rng.standard_normal(
            (b, CFG.channels, CFG.image_size, CFG.image_size)).astype(np.float32),
    )


def test_patchify_round_trip():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((2, 3, CFG.image_size, CFG.image_size)).astype(np.float32)
    back = gm.unpatchify(gm.patchify(Tensor(z), CFG), CFG).data
    np.testing.assert_array_equal(back, z)


def test_patchify_row_major_order():
    # first patch token must contain exactly the top-left p x p block
    z = np.zeros((1, 1, 8, 8), dtype=np.float32)
    z[0, 0, :4, :4] = np.arange(16, dtype=np.float32).reshape(4, 4)
    cfg = gm.ModelConfig(image_size=8, patch=4, width=32, heads=2,
                         base_blocks=1, scene_blocks=1, text_blocks=1, channels=1)
    tok = gm.patchify(Tensor(z), cfg).data
    np.testing.assert_array_equal(tok[0, 0], np.arange(16, dtype=np.float32))
    assert (tok[0, 1:] == 0).all()


def test_zero_init_branches_are_neutral():
    store = small_store()
    rng = np.random.default_rng(1)
    z = Tensor(rng.standard_normal((2, 3, 16, 16)).astype(np.float32))
    t = np.array([0.3, 0.8], dtype=np.float32)
    bundle = bundle_for()
    with ad.no_grad():
        base_only = gm.base_forward(store, CFG, z, t, bundle.prompt_ids).data
        full = gm.model_velocity(store, CFG, z, t, bundle).data
    np.testing.assert_array_equal(full, base_only)  # exactly zero difference


def test_branch_residuals_exactly_zero_at_init():
    store = small_store()
    rng = np.random.default_rng(2)
    z = Tensor(rng.standard_normal((1, 3, 16, 16)).astype(np.float32))
    t = np.array([0.5], dtype=np.float32)
    bundle = bundle_for(b=1)
    adapted = glyphs.adapt(bundle.text_tokens, store)
    with ad.no_grad():
        res = gm.text_render_branch(store, CFG, z, t, adapted)
        assert all(np.abs(r.data).max() == 0.0 for r in res)
        res = gm.scene_gen_branch(store, CFG, z, t, bundle.prompt_ids, bundle.mask,
                                  bundle.masked_image)
        assert all(np.abs(r.data).max() == 0.0 for r in res)


def test_branch_copy_inherits_base_weights():
    store = small_store()
    np.testing.assert_array_equal(store["text.b0.img.q.w"].data,
                                  store["base.b0.img.q.w"].data)
    np.testing.assert_array_equal(store["scene.b1.img.mlp1.w"].data,
                                  store["base.b1.img.mlp1.w"].data)
    # but the patch embedding differs in shape for the scene branch (2C+1)
    assert store["scene.patch.w"].shape[0] == CFG.patch ** 2 * (2 * CFG.channels + 1)


def test_merge_rule_indexing():
    # scene residual i (1-indexed) gets text residual ceil(i/2)
    scene = [Tensor(np.zeros((1, 2))) for _ in range(4)]
    text = [Tensor(np.full((1, 2), 10.0)), Tensor(np.full((1, 2), 20.0))]
    merged = gm.merge_residuals(scene, text)
    got = [float(m.data[0, 0]) for m in merged]
    assert got == [10.0, 10.0, 20.0, 20.0]
    with pytest.raises(ad.ShapeError):
        gm.merge_residuals([Tensor(np.zeros((1, 2)))] * 5, text)


def test_residual_count_validated():
    store = small_store()
    z = Tensor(np.zeros((1, 3, 16, 16), np.float32))
    t = np.array([0.5], dtype=np.float32)
    bad = [Tensor(np.zeros((1, CFG.n_patches, CFG.width)))] * (CFG.base_blocks + 1)
    with pytest.raises(ad.ShapeError):
        gm.base_forward(store, CFG, z, t, np.zeros((1, 3), np.int64), residuals=bad)


def test_prompt_shape_validation():
    store = small_store()
    with pytest.raises(ad.ShapeError):
        gm._prompt_ctx(store, np.zeros((2, 3, 4), dtype=np.int64))
    # (B,) is normalized to (B, 1)
    assert gm._prompt_ctx(store, np.zeros(2, dtype=np.int64)).shape == (2, 1, CFG.width)


def test_scene_branch_rejects_soft_mask():
    store = small_store()
    bundle = bundle_for(b=1)
    z = Tensor(np.zeros((1, 3, 16, 16), np.float32))
    mask = np.full((1, 1, 16, 16), 0.5, dtype=np.float32)
    with pytest.raises(ValueError):
        gm.scene_gen_branch(store, CFG, z, np.array([0.5], np.float32),
                            bundle.prompt_ids, mask, bundle.masked_image)


def test_one_step_denoise_identity():
    # x0 = z_t - t * v holds exactly when v is the true velocity eps - x0
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((2, 3, 8, 8))
    eps = rng.standard_normal((2, 3, 8, 8))
    t = 0.37
    zt = (1 - t) * x0 + t * eps
    v = eps - x0
    np.testing.assert_allclose(zt - t * v, x0, rtol=0, atol=1e-12)


def test_sampler_recovers_x0_with_oracle_velocity():
    # under v(z, t) = eps - x0 (constant in z), Euler integration is exact
    store = small_store()
    for trial in range(10):
        rng = np.random.default_rng(100 + trial)
        x0 = rng.standard_normal((1, 3, 16, 16)).astype(np.float64)
        bundle = bundle_for(b=1, seed=trial)
        seed = 1000 + trial
        noise = RngStream(seed, "sample/noise").normal((1, 3, 16, 16)).astype(np.float64)

        def velocity(z, t, x0=x0, noise=noise):
            return noise - x0

        out = gm.sample(store, CFG, bundle, steps=28, cfg_scale=1.0, seed=seed,
                        velocity_fn=velocity)
        assert np.abs(out - np.clip(x0, -1, 1)).max() < 1e-6


def test_sampler_deterministic():
    store = small_store()
    bundle = bundle_for(b=1)
    a = gm.sample(store, CFG, bundle, steps=4, seed=9)
    b = gm.sample(store, CFG, bundle, steps=4, seed=9)
    np.testing.assert_array_equal(a, b)
    c = gm.sample(store, CFG, bundle, steps=4, seed=10)
    assert not np.array_equal(a, c)


def test_sampler_validates_steps():
    store = small_store()
    with pytest.raises(ValueError):
        gm.sample(store, CFG, bundle_for(b=1), steps=0)


def test_cfg_combine_formula():
    vc = np.array([2.0])
    vu = np.array([1.0])
    np.testing.assert_allclose(gm.cfg_combine(vc, vu, 5.0), [1.0 + 5.0 * 1.0])
    np.testing.assert_allclose(gm.cfg_combine(vc, vu, 1.0), vc)
    with pytest.raises(ad.ShapeError):
        gm.cfg_combine(np.zeros(2), np.zeros(3), 5.0)


def test_unconditional_bundle_drops_conditions():
    bundle = bundle_for()
    un = gm.unconditional_bundle(bundle, CFG)
    assert (np.asarray(un.text_tokens) == 0).all()
    assert (un.prompt_ids == CFG.null_prompt_id).all()
    np.testing.assert_array_equal(un.mask, bundle.mask)  # scene inputs kept


def test_flow_loss_decreases_under_training_step():
    store = small_store()
    store.set_trainable(["base.", "text.", "scene.", "adapter."])
    rng = RngStream(0, "test/flow")
    bundle = bundle_for(b=2)
    images = np.clip(np.random.default_rng(5).standard_normal((2, 3, 16, 16)), -1, 1
                     ).astype(np.float32)
    loss = gm.flow_loss(store, CFG, images, bundle, rng, t=np.array([0.4, 0.6], np.float32))
    assert np.isfinite(loss.data)
    ad.backward(loss)
    assert store["base.final.w"].grad is not None


def test_flow_loss_mask_zeroes_pixel_gradient():
    # a pixel under a zero loss-mask weight must contribute no gradient
    store = small_store()
    rng = RngStream(0, "test/flowmask")
    bundle = bundle_for(b=1)
    images = np.zeros((1, 3, 16, 16), dtype=np.float32)
    loss_mask = np.ones((1, 1, 16, 16), dtype=np.float32)
    loss_mask[0, 0, :8] = 0.0
    t = np.array([0.5], dtype=np.float32)
    eps = RngStream(1, "eps").normal((1, 3, 16, 16))

    def loss_of(img):
        store.zero_grads()
        l = gm.flow_loss(store, CFG, img, bundle, rng, loss_mask=loss_mask, t=t, eps=eps)
        return float(l.data)

    base = loss_of(images)
    bumped = images.copy()
    bumped[0, 0, 2, 2] += 0.05  # inside the masked-out region
    # the loss only sees the image through z_t and the target; a masked pixel
    # changes neither the masked MSE nor its gradient contribution
    assert gm.flow_loss(store, CFG, bumped, bundle, rng, loss_mask=loss_mask,
                        t=t, eps=eps).data == pytest.approx(base, abs=1e-6)


def test_timestep_embedding_distinguishes_times():
    store = small_store(branches=False)
    e1 = gm.timestep_embedding(np.array([0.1], np.float32), CFG, store).data
    e2 = gm.timestep_embedding(np.array([0.9], np.float32), CFG, store).data
    assert np.abs(e1 - e2).max() > 1e-3


def test_key_bias_masks_padding_tokens():
    tm = np.array([[True, True, False]])
    bias = gm._key_bias(1, 4, tm)
    assert bias.shape == (1, 1, 1, 7)
    assert bias[0, 0, 0, 6] < -1e8 and (bias[0, 0, 0, :6] == 0).all()
    assert gm._key_bias(1, 4, np.ones((1, 3), bool)) is None


def test_config_validation():
    with pytest.raises(ValueError):
        gm.ModelConfig(image_size=30, patch=8)
