import numpy as np
import pytest

from condnoise import tensor as T
from condnoise.condsa import (
    LFM, Attention, CondformerConfig, CondSABlock, EmbedFC, PatchDataset, TrainSchedule, build_model,
    channel_attention, condsa_block, embed_prior, lfm, load_model, make_eval_set, micro_condformer,
    train_denoiser,
)
from condnoise.errors import DataEmpty, NotDivisible, ShapeMismatch
from condnoise.image_io import ColorImage
from condnoise.noise_model import NoisePrior, add_noise, make_rng

TINY = CondformerConfig(base_channels=4, levels=2, latent_blocks=1, k=2)


def rand(shape, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, shape)


class TestEmbedding:
    def test_repeat_identity(self):
        np.testing.assert_array_equal(embed_prior((0.1, 0.3), 2).data, [[0.1, 0.1, 0.3, 0.3]])

    def test_zero_prior_zero_bias(self):
        fc = EmbedFC(3).finalize(0)
        assert np.all(embed_prior((0.0, 0.0), 3, fc).data == 0.0)

    def test_blocks_differ(self):
        a, b = EmbedFC(4).finalize(0), EmbedFC(4).finalize(1)
        za, zb = embed_prior((0.2, 0.1), 4, a).data, embed_prior((0.2, 0.1), 4, b).data
        assert za.shape == (1, 8) and not np.allclose(za, zb)

    def test_k_positive(self):
        with pytest.raises(ValueError):
            embed_prior((0.1, 0.1), 0)


class TestLFM:
    def test_constructed_identity(self):
        m = LFM(3, 2)
        m.pw.weight.data = np.hstack([np.eye(3), np.zeros((3, 4))])
        m.dw.weight.data = np.zeros((3, 3, 3))
        m.dw.weight.data[:, 1, 1] = 1.0
        x = rand((1, 3, 5, 5))
        np.testing.assert_array_equal(lfm(x, np.zeros(4), m).data, x)

    def test_default_init_is_identity_at_zero(self):
        m = LFM(4, 3).finalize(5)
        x = rand((2, 4, 6, 6))
        np.testing.assert_allclose(lfm(x, np.zeros((2, 6)), m).data, x, atol=1e-15)

    def test_constant_interior(self):
        m = LFM(3, 2).finalize(1)
        m.pw.weight.data = rand(m.pw.weight.data.shape, 1)
        m.dw.weight.data = rand(m.dw.weight.data.shape, 2)
        out = lfm(np.full((1, 3, 7, 7), 0.4), rand((4,), 3), m).data
        interior = out[0, :, 1:-1, 1:-1]
        assert np.allclose(interior, interior[:, :1, :1])

    def test_grad_wrt_z(self):
        m = LFM(3, 2).finalize(2)
        x = T.Tensor(rand((1, 3, 4, 4)))
        z = T.Tensor(rand((1, 4), 4))
        errs = T.gradcheck(lambda z_: lfm(x, z_, m), [z], probes=40)
        assert max(errs) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            lfm(rand((1, 3, 4, 4)), np.zeros(5), LFM(3, 2).finalize(0))


class TestChannelAttention:
    def test_large_alpha_uniform(self):
        q, k, v = (rand((4, 10), s) for s in range(3))
        out, attn = channel_attention(q, k, v, 1e9)
        np.testing.assert_allclose(attn.data, 0.25, atol=1e-8)
        np.testing.assert_allclose(out.data, np.tile(v.mean(0), (4, 1)), atol=1e-8)

    def test_single_channel(self):
        q, k, v = (rand((1, 7), s) for s in range(3))
        out, attn = channel_attention(q, k, v, 1.0)
        np.testing.assert_array_equal(attn.data, [[1.0]])
        np.testing.assert_allclose(out.data, v, atol=1e-15)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        q, k, v = (rand((6, 20), s) for s in range(3))
        perm = rng.permutation(20)
        out, attn = channel_attention(q, k, v, 0.7)
        out_p, attn_p = channel_attention(q[:, perm], k[:, perm], v[:, perm], 0.7)
        np.testing.assert_allclose(attn_p.data, attn.data, atol=1e-12)
        np.testing.assert_allclose(out_p.data, out.data[:, perm], atol=1e-12)

    def test_rows_sum_to_one(self):
        att = Attention(8, k=4).finalize(0)
        att(T.Tensor(rand((2, 8, 6, 6))), T.Tensor(rand((2, 8))))
        assert np.max(np.abs(att.last_attention.sum(-1) - 1.0)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            channel_attention(rand((3, 5)), rand((4, 5)), rand((3, 5)), 1.0)


class TestBlock:
    def test_shape_preserved(self):
        for c, k, s in [(4, 2, 5), (8, 4, 6), (6, 3, 3)]:
            blk = CondSABlock(c, k).finalize(c)
            assert condsa_block(rand((c, s, s)), (0.1, 0.1), blk).shape == (c, s, s)

    def test_zero_init_residual_identity(self):
        blk = CondSABlock(8, 4).finalize(0)
        blk.block.attn.proj.weight.data[:] = 0.0
        blk.block.ffn.project.weight.data[:] = 0.0
        x = rand((1, 8, 6, 6))
        np.testing.assert_array_equal(condsa_block(x, (0.3, 0.1), blk).data, x)

    def test_prior_changes_output(self):
        blk = CondSABlock(8, 4).finalize(0)
        x = rand((1, 8, 6, 6))
        a = condsa_block(x, (0.05, 0.02), blk).data
        b = condsa_block(x, (0.25, 0.15), blk).data
        assert np.linalg.norm(a - b) > 0

    def test_alpha_positive(self):
        att = Attention(4).finalize(0)
        att.log_alpha.data[:] = -30.0
        assert np.all(att.alpha().data > 0)


class TestCondformer:
    def test_zero_out_conv_identity(self):
        model = build_model(TINY, 0)
        model.out.weight.data[:] = 0.0
        model.out.bias.data[:] = 0.0
        img = np.random.default_rng(0).random((3, 8, 12))
        out = micro_condformer(ColorImage(img), (0.1, 0.1), params=model)
        np.testing.assert_array_equal(out.data, img)

    def test_shape(self):
        model = build_model(CondformerConfig(), 0)
        with T.no_grad():
            assert model(rand((2, 3, 16, 24)), np.array([[0.1, 0.0], [0.2, 0.1]])).shape == (2, 3, 16, 24)

    def test_not_divisible(self):
        with pytest.raises(NotDivisible):
            build_model(TINY, 0)(rand((1, 3, 6, 8)), (0, 0))

    def test_zero_prior_matches_baseline_at_init(self):
        from dataclasses import replace
        plain = build_model(replace(TINY, conditional=False), 3)
        cond = build_model(TINY, 3)
        x = rand((1, 3, 8, 8))
        with T.no_grad():
            np.testing.assert_array_equal(plain(x).data, cond(x, (0.0, 0.0)).data)

    def test_overfit_one_pair(self):
        rng = make_rng(0)
        clean = np.random.default_rng(1).random((3, 16, 16)) * 0.8 + 0.1
        ds = PatchDataset([clean], patch_size=16, fixed_prior=(0.1, 0.05), augment=False)
        res = train_denoiser(ds, TINY, TrainSchedule(steps=200, batch_size=1, patch_size=16, lr_max=3e-3, seed=0))
        assert np.mean(res.losses[-10:]) < 0.5 * res.losses[0]

    def test_zero_noise_identity_task(self):
        clean = np.random.default_rng(2).random((3, 32, 32))
        ds = PatchDataset([clean], patch_size=16, fixed_prior=(0.0, 0.0))
        res = train_denoiser(ds, TINY, TrainSchedule(steps=1000, batch_size=2, patch_size=16, lr_max=2e-3))
        assert np.mean(res.losses[-20:]) < 1e-3

    def test_deterministic_and_checkpoint(self, tmp_path):
        ds = PatchDataset([np.random.default_rng(3).random((3, 24, 24))], patch_size=8)
        sched = TrainSchedule(steps=5, batch_size=2, patch_size=8, seed=4)
        a = train_denoiser(ds, TINY, sched, checkpoint=tmp_path / "a.ckpt")
        b = train_denoiser(ds, TINY, sched)
        assert a.losses == b.losses
        assert (tmp_path / "a.ckpt.loss.json").exists()
        loaded = load_model(tmp_path / "a.ckpt")
        x = rand((1, 3, 8, 8))
        with T.no_grad():
            np.testing.assert_array_equal(loaded(x, (0.1, 0.1)).data, a.model(x, (0.1, 0.1)).data)

    def test_empty_dataset(self):
        with pytest.raises(DataEmpty):
            PatchDataset([])


def test_eval_set_reproducible():
    imgs = [np.random.default_rng(0).random((3, 40, 40))]
    a, b = make_eval_set(imgs, crop=16, seed=5), make_eval_set(imgs, crop=16, seed=5)
    assert len(a) == 3
    for (na, ca, pa), (nb, cb, pb) in zip(a, b):
        np.testing.assert_array_equal(na, nb)
        assert pa == pb and isinstance(pa, NoisePrior)
