"""Pyramid encoder: stride contract, shared weights, determinism."""

import numpy as np
import pytest

from obda import tensor as T
from obda.encoder import EncoderConfig, PyramidEncoder, REFERENCE_CHANNELS, \
    TOY_CHANNELS
from obda.errors import ConfigError, InputError


def build(in_channels=3, channels=TOY_CHANNELS, seed=0, dtype=np.float32):
    return PyramidEncoder(EncoderConfig(in_channels, channels),
                          np.random.default_rng(seed), dtype)


def image(rng, c=3, hw=256, dtype=np.float32):
    return T.Tensor(rng.uniform(-0.5, 0.5, (c, hw, hw)).astype(dtype))


class TestShapes:
    def test_reference_profile_1024(self, rng):
        enc = build(channels=REFERENCE_CHANNELS)
        maps = enc.encode(image(rng, hw=1024))
        shapes = [tuple(m.data.shape) for m in maps]
        assert shapes == [(128, 128, 128), (256, 64, 64), (512, 32, 32)]

    def test_toy_profile_256(self, rng):
        maps = build().encode(image(rng, hw=256))
        shapes = [tuple(m.data.shape) for m in maps]
        assert shapes == [(16, 32, 32), (32, 16, 16), (64, 8, 8)]

    def test_stride_contract(self, rng):
        for hw in (64, 160, 256):
            for m in build().encode(image(rng, hw=hw)):
                assert m.data.shape[1] * m.stride == hw
                assert m.data.shape[2] * m.stride == hw

    def test_indivisible_dims_rejected(self, rng):
        enc = build()
        with pytest.raises(InputError):
            enc.encode(T.Tensor(rng.uniform(size=(3, 100, 96)).astype("f4")))

    def test_channel_profile_must_increase(self):
        with pytest.raises(ConfigError):
            EncoderConfig(3, (32, 32, 64))


class TestDeterminism:
    def test_identical_calls_bit_identical(self, rng):
        enc = build()
        img = image(rng, hw=64)
        a = enc.encode(img)
        b = enc.encode(img)
        for ma, mb in zip(a, b):
            assert np.array_equal(ma.data.data, mb.data.data)

    def test_same_seed_same_weights(self):
        w1 = build(seed=7).stem.weight.data
        w2 = build(seed=7).stem.weight.data
        assert np.array_equal(w1, w2)


class TestSiamese:
    def test_identical_inputs_identical_pyramids(self, rng):
        enc = build()
        img = image(rng, hw=64)
        pre, post = enc.encode_siamese(img, img)
        for mp, mq in zip(pre, post):
            assert np.array_equal(mp.data.data, mq.data.data)
            assert np.all((mp.data - mq.data).data == 0.0)

    def test_branch_independence(self, rng):
        enc = build()
        a = image(rng, hw=64)
        b = image(rng, hw=64)
        b2 = T.Tensor(b.data + 0.1)
        pre1, _ = enc.encode_siamese(a, b)
        pre2, _ = enc.encode_siamese(a, b2)
        for m1, m2 in zip(pre1, pre2):
            assert np.array_equal(m1.data.data, m2.data.data)

    def test_parameter_count_matches_single_encoder(self):
        enc = build(seed=3)
        single = build(seed=11)
        assert enc.parameter_count() == single.parameter_count()
        # One weight store: the siamese call introduces no extra parameters.
        names = [n for n, _ in enc.named_parameters()]
        assert len(names) == len(set(names))

    def test_dim_mismatch_rejected(self, rng):
        enc = build()
        with pytest.raises(InputError):
            enc.encode_siamese(image(rng, hw=64), image(rng, hw=96))

    def test_shared_gradient_is_sum_of_branches(self):
        # f uses both branches; the finite-difference oracle sees the sum of
        # the two per-branch contributions through one weight store.
        rng = np.random.default_rng(0)
        enc = PyramidEncoder(EncoderConfig(3, (4, 8, 16)),
                             np.random.default_rng(5), np.float64)
        a = rng.uniform(-0.5, 0.5, (3, 32, 32))
        b = rng.uniform(-0.5, 0.5, (3, 32, 32))
        w0 = enc.stem.weight.data.copy()
        probes = [rng.standard_normal((4, 4, 4)), rng.standard_normal((8, 2, 2)),
                  rng.standard_normal((16, 1, 1))]

        def f(x):
            enc.stem.weight = x
            pre, post = enc.encode_siamese(T.Tensor(a), T.Tensor(b))
            total = None
            for m, probe in zip(pre, probes):
                term = T.tsum(m.data * probe)
                total = term if total is None else total + term
            for m, probe in zip(post, probes):
                total = total + T.tsum(m.data * probe) * 2.0
            return total

        assert T.grad_check(f, T.Tensor(w0)) < 1e-4

    def test_requires_three_channel_config(self, rng):
        enc = build(in_channels=6)
        img = image(rng, c=6, hw=64)
        with pytest.raises(ConfigError):
            enc.encode_siamese(img, img)
