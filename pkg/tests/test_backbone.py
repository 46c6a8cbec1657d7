import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refvid import autodiff as ad
from refvid import backbone as bb
from refvid import entity_vae as ev
from refvid.autodiff import Tensor
from refvid.errors import ConfigError, DimensionError

TINY = bb.BackboneConfig(depth=2, width=16, heads=2, t_emb=8, ffn_mult=2, frames=2, lat_h=4, lat_w=4, lat_c=2,
                         patch=2, K=3, M=5, vis_in=4)


def tiny_cond(rng, cfg=TINY, n_valid=3):
    lat = ev.EntityLatent(rng.standard_normal((1, n_valid, cfg.vis_in)))
    vis = ev.flatten_pad([lat], cfg.M, Tensor(rng.standard_normal((cfg.vis_in, cfg.width))))
    return bb.concat_unified(Tensor(rng.standard_normal((cfg.K, cfg.width))), vis)


def live_params(cfg, seed):
    """Parameters with nonzero modulation and output so every path carries signal."""
    rng = np.random.default_rng(seed)
    p = bb.init_params(cfg, rng, zero_final=False)
    for k in p:
        if "mod_" in k:
            p[k] = rng.standard_normal(p[k].shape) * 0.2
    return p


def oracle_lengths(K, M, frames, lat_h, lat_w, patch):
    """Token bookkeeping written out by hand: one row per text latent, visual slot and video patch."""
    T = 0
    for _f in range(frames):
        for _r in range(0, lat_h, patch):
            for _c in range(0, lat_w, patch):
                T += 1
    return K + M, K + M + T


@settings(max_examples=25)
@given(st.integers(1, 300), st.integers(0, 64), st.integers(1, 4), st.sampled_from([2, 4, 8]), st.integers(0, 10_000))
def test_sequence_lengths_match_bookkeeping(K, M, frames, side, seed):
    rng = np.random.default_rng(seed)
    d = 4
    n_valid = int(rng.integers(0, M + 1))
    lats = [ev.EntityLatent(rng.standard_normal((1, n_valid, d)))] if n_valid else []
    vis = ev.flatten_pad(lats, M, Tensor(np.eye(d)))
    uni = bb.concat_unified(Tensor(rng.standard_normal((K, d))), vis)
    noise = bb.patchify(rng.standard_normal((frames, side, side, 1)), 2)
    x, mask = bb.concat_input(uni, noise)
    km, kmt = oracle_lengths(K, M, frames, side, side, 2)
    assert uni.tokens.shape[0] == km and uni.K == K
    assert x.shape[0] == kmt and mask.shape == (kmt,)
    assert mask[:K].all() and mask[K:K + n_valid].all() and not mask[K + n_valid:K + M].any() and mask[km:].all()


def test_production_scale_lengths():
    rng = np.random.default_rng(0)
    cfg = bb.BackboneConfig(K=226, M=96)
    vis = ev.flatten_pad([ev.EntityLatent(rng.random((4, 4, 8)))], 96, Tensor(np.ones((8, 32))))
    uni = bb.concat_unified(Tensor(np.zeros((226, 32))), vis)
    x, _ = bb.concat_input(uni, bb.patchify(np.zeros(cfg.latent_shape), cfg.patch))
    assert uni.tokens.shape[0] == 226 + 96 and x.shape[0] == 226 + 96 + cfg.T == 226 + 96 + 128


def test_concat_width_mismatch():
    with pytest.raises(DimensionError):
        bb.concat_unified(Tensor(np.zeros((3, 5))), ev.flatten_pad([], 4, Tensor(np.eye(4))))
    uni = bb.concat_unified(Tensor(np.zeros((3, 4))), ev.flatten_pad([], 4, Tensor(np.eye(4))))
    with pytest.raises(DimensionError):
        bb.concat_input(uni, bb.patchify(np.zeros((1, 2, 2, 2)), 2))


def test_patchify_round_trip_and_order():
    x = np.random.default_rng(1).standard_normal((3, 4, 6, 2))
    nt = bb.patchify(x, 2)
    assert nt.tokens.shape == (3 * 2 * 3, 8)
    assert np.array_equal(bb.unpatchify(nt.tokens, nt.patch_meta), x)
    i = bb.token_index(2, 1, 2, (2, 3))
    assert np.array_equal(nt.tokens[i].reshape(2, 2, 2), x[2, 2:4, 4:6])
    with pytest.raises(DimensionError):
        bb.patchify(np.zeros((1, 3, 4, 1)), 2)


def test_config_validation():
    with pytest.raises(ConfigError):
        bb.BackboneConfig(width=10, heads=4)
    with pytest.raises(ConfigError):
        bb.BackboneConfig(lat_h=7)
    with pytest.raises(ConfigError):
        bb.BackboneConfig(visual_pos="rope")


def test_output_shape_and_zero_init():
    rng = np.random.default_rng(2)
    p = bb.init_params(TINY, rng)
    x = rng.standard_normal(TINY.latent_shape)
    out = bb.denoise_predict(p, x, 3, tiny_cond(rng), TINY)
    assert out.shape == TINY.latent_shape and not out.any()
    out = bb.denoise_predict(live_params(TINY, 3), x, 3, tiny_cond(rng), TINY)
    assert out.shape == TINY.latent_shape and np.isfinite(out).all() and out.any()


def test_unconditional_and_wrong_rows():
    rng = np.random.default_rng(4)
    p = live_params(TINY, 4)
    x = rng.standard_normal(TINY.latent_shape)
    assert bb.denoise_predict(p, x, 1, None, TINY).shape == TINY.latent_shape
    bad = bb.concat_unified(Tensor(np.zeros((2, 16))), ev.flatten_pad([], TINY.M, Tensor(np.ones((4, 16)))))
    with pytest.raises(DimensionError):
        bb.denoise_predict(p, x, 1, bad, TINY)
    with pytest.raises(DimensionError):
        bb.denoise_predict(p, x[:1], 1, None, TINY)


@pytest.mark.parametrize("seed", range(10))
def test_padded_rows_do_not_affect_prediction(seed):
    rng = np.random.default_rng(seed)
    p = live_params(TINY, seed)
    x = rng.standard_normal(TINY.latent_shape)
    cond = tiny_cond(rng)
    base = bb.denoise_predict(p, x, 5, cond, TINY)
    data = cond.tokens.data.copy()
    pad = ~cond.mask
    data[pad] = rng.standard_normal((pad.sum(), TINY.width)) * 100
    other = bb.UnifiedFeatures(Tensor(data), cond.mask, cond.K)
    assert np.array_equal(bb.denoise_predict(p, x, 5, other, TINY), base)


def test_valid_rows_do_affect_prediction():
    rng = np.random.default_rng(9)
    p = live_params(TINY, 9)
    x = rng.standard_normal(TINY.latent_shape)
    cond = tiny_cond(rng)
    data = cond.tokens.data.copy()
    data[TINY.K] += 1.0
    other = bb.UnifiedFeatures(Tensor(data), cond.mask, cond.K)
    assert not np.array_equal(bb.denoise_predict(p, x, 5, other, TINY), bb.denoise_predict(p, x, 5, cond, TINY))


def test_denoiser_loss_grad_check():
    rng = np.random.default_rng(5)
    cfg = bb.BackboneConfig(depth=1, width=8, heads=2, t_emb=4, ffn_mult=1, frames=1, lat_h=2, lat_w=4, lat_c=1,
                            patch=2, K=2, M=3, vis_in=2)
    p = live_params(cfg, 5)
    x = rng.standard_normal(cfg.latent_shape)
    eps = rng.standard_normal(cfg.latent_shape)
    cond = tiny_cond(rng, cfg, n_valid=2)

    def loss(q):
        pred = bb.denoise_tensor(q, x, 2, cond, cfg)
        return ad.mean(ad.square(ad.sub(pred, Tensor(eps))))

    assert ad.grad_check_params(loss, p, 1e-5) < 1e-3


def test_visual_positions_can_be_disabled():
    cfg = bb.BackboneConfig(**{**bb.config_dict(TINY), "visual_pos": "none"})
    p = bb.init_params(cfg, np.random.default_rng(0))
    assert "vis_pos" not in p and "vis_pos" in bb.init_params(TINY, np.random.default_rng(0))
