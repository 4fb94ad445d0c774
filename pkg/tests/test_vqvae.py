"""Tests for the vector-quantized context autoencoder."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cvmd.errors import ConfigError, InputError
from cvmd.scenario import DatasetSplit, SynthConfig, synth_generate
from cvmd.vqvae import (
    Codebook,
    VqVaeHyperParams,
    VqVaeModel,
    assign_all,
    classify,
    decode,
    encode,
    load_vqvae,
    quantize,
    save_vqvae,
    total_loss,
    train_vqvae,
    vq_loss,
)


class TestQuantize:
    def test_nearest_entry(self):
        cb = Codebook(np.array([[0.0, 0.0], [10.0, 10.0]]))
        res = quantize(np.array([1.0, 1.0]), cb)
        assert res.index == 1
        np.testing.assert_array_equal(res.z_q, [0.0, 0.0])

    def test_exact_match_zero_distance(self):
        cb = Codebook(np.arange(12.0).reshape(4, 3))
        res = quantize(cb.entries[2].copy(), cb)
        assert res.index == 3
        np.testing.assert_array_equal(res.z_q, cb.entries[2])

    def test_tie_breaks_to_lowest_index(self):
        cb = Codebook(np.array([[5.0], [-1.0], [1.0], [9.0], [-1.0]]))
        res = quantize(np.array([0.0]), cb)  # entries 2 and 3 both at distance 1
        assert res.index == 2

    def test_dimension_mismatch(self):
        cb = Codebook(np.zeros((3, 4)))
        with pytest.raises(InputError):
            quantize(np.zeros(5), cb)

    def test_empty_codebook_rejected(self):
        with pytest.raises(ConfigError):
            Codebook(np.zeros((0, 4)))

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_matches_brute_force_scan(self, seed):
        rng = np.random.default_rng(seed)
        q, dim = rng.integers(2, 20), rng.integers(1, 8)
        entries = rng.normal(0, 1, (q, dim)).round(2)  # rounding induces ties
        z = rng.normal(0, 1, dim).round(2)
        res = quantize(z, Codebook(entries))
        dists = [float(np.sum((e - z) ** 2)) for e in entries]
        best = min(range(q), key=lambda i: (dists[i], i))
        assert res.index == best + 1
        np.testing.assert_array_equal(res.z_q, entries[best])


class TestLosses:
    def test_perfect_reconstruction_zero_loss(self):
        x = np.ones((2, 3))
        z = np.ones(4)
        assert float(vq_loss(x, x, z, z)) == 0.0

    def test_latent_terms_counted_twice(self):
        x = np.zeros((2, 3))
        z_hat = np.array([0.5, 0.0])
        z_q = np.array([0.0, 0.0])
        # codebook and commitment terms are both |z_hat - z_q|^2 = 0.25
        assert float(vq_loss(x, x, z_hat, z_q)) == pytest.approx(0.5)

    def test_codebook_term_has_no_encoder_gradient(self):
        z_hat = torch.tensor([1.0, 2.0], requires_grad=True, dtype=torch.float64)
        z_q = torch.tensor([0.0, 0.0], requires_grad=True, dtype=torch.float64)
        x = torch.zeros((2, 2), dtype=torch.float64)
        loss = vq_loss(x, x, z_hat, z_q)
        loss.backward()
        # d/dz_hat of commitment term only: 2(z_hat - z_q)
        np.testing.assert_allclose(z_hat.grad.numpy(), [2.0, 4.0])
        # d/dz_q of codebook term only: 2(z_q - z_hat)
        np.testing.assert_allclose(z_q.grad.numpy(), [-2.0, -4.0])

    def test_total_loss_weighting(self):
        assert total_loss(0.4, 0.2, 0.0) == pytest.approx(0.4)
        assert total_loss(0.4, 0.2, 1.0) == pytest.approx(0.6)
        assert total_loss(0.4, 0.2, 2.0) == pytest.approx(0.8)

    def test_negative_lambda_rejected(self):
        with pytest.raises(InputError):
            total_loss(0.4, 0.2, -1.0)


@pytest.fixture(scope="module")
def tiny_split():
    return synth_generate(SynthConfig(samples_per_class=6), seed=13)


@pytest.fixture(scope="module")
def tiny_model(tiny_split):
    hp = VqVaeHyperParams(codebook_size=8, latent_dim=6, epochs=40,
                          learning_rate=1e-3, batch_size=8)
    model, log = train_vqvae(tiny_split, hp, seed=0)
    return model, hp, log


class TestEncodeDecodeClassify:
    def test_encode_shape_and_determinism(self, tiny_model, tiny_split):
        model, hp, _ = tiny_model
        z1 = encode(model, tiny_split.train[0].observation)
        z2 = encode(model, tiny_split.train[0].observation)
        assert z1.shape == (hp.latent_dim,)
        np.testing.assert_array_equal(z1, z2)

    def test_batch_matches_per_item(self, tiny_model, tiny_split):
        model, _, _ = tiny_model
        batch = np.stack([s.observation for s in tiny_split.train[:3]])
        zb = encode(model, batch)
        for i in range(3):
            np.testing.assert_allclose(
                zb[i], encode(model, tiny_split.train[i].observation), atol=1e-12)

    def test_encode_shape_mismatch(self, tiny_model):
        model, _, _ = tiny_model
        with pytest.raises(InputError):
            encode(model, np.zeros((9, 4, 7)))

    def test_decode_shape(self, tiny_model, tiny_split):
        model, hp, _ = tiny_model
        z = encode(model, tiny_split.train[0].observation)
        out = decode(model, z)
        assert out.shape == tiny_split.train[0].observation.shape

    def test_decode_wrong_length(self, tiny_model):
        model, _, _ = tiny_model
        with pytest.raises(InputError):
            decode(model, np.zeros(3))

    def test_classify_simplex(self, tiny_model):
        model, hp, _ = tiny_model
        rng = np.random.default_rng(1)
        for _ in range(10):
            p = classify(model, rng.normal(0, 10, hp.latent_dim))
            assert np.all(p >= 0)
            assert float(p.sum()) == pytest.approx(1.0, abs=1e-6)

    def test_classify_softmax_arithmetic(self):
        logits = torch.tensor([math.log(2.0), 0.0, 0.0])
        probs = torch.softmax(logits, dim=-1).numpy()
        np.testing.assert_allclose(probs, [0.5, 0.25, 0.25], atol=1e-12)


class TestTraining:
    def test_loss_decreases(self, tiny_model):
        _, _, log = tiny_model
        assert log[-1] < log[0]

    def test_same_seed_identical_logs(self, tiny_split):
        hp = VqVaeHyperParams(codebook_size=8, latent_dim=6, epochs=5,
                              learning_rate=1e-3, batch_size=8)
        _, log_a = train_vqvae(tiny_split, hp, seed=4)
        _, log_b = train_vqvae(tiny_split, hp, seed=4)
        assert log_a == log_b

    def test_empty_training_set_rejected(self):
        from cvmd.errors import TrainingError
        split = DatasetSplit(train=[], test=[], split_seed=0)
        with pytest.raises(TrainingError):
            train_vqvae(split, VqVaeHyperParams(), seed=0)


class TestAssignAll:
    def test_partition(self, tiny_model, tiny_split):
        model, _, _ = tiny_model
        assignments = assign_all(model, tiny_split.train)
        assert len(assignments) == len(tiny_split.train)
        assert [i for i, _, _ in assignments] == list(range(len(tiny_split.train)))

    def test_matches_brute_force_scan(self, tiny_model, tiny_split):
        model, _, _ = tiny_model
        cb = model.codebook
        for i, q, z_hat in assign_all(model, tiny_split.train):
            dists = np.sum((cb.entries - z_hat) ** 2, axis=1)
            assert q == int(np.argmin(dists)) + 1

    def test_usage_at_most_codebook_size(self, tiny_model, tiny_split):
        model, hp, _ = tiny_model
        used = {q for _, q, _ in assign_all(model, tiny_split.train)}
        assert len(used) <= hp.codebook_size


class TestCheckpoint:
    def test_save_load_bit_exact(self, tiny_model, tiny_split, tmp_path):
        model, hp, log = tiny_model
        save_vqvae(model, hp, 0, log, tmp_path / "ckpt")
        loaded = load_vqvae(tmp_path / "ckpt")
        z_orig = encode(model, tiny_split.train[0].observation)
        z_load = encode(loaded, tiny_split.train[0].observation)
        np.testing.assert_array_equal(z_orig, z_load)
        np.testing.assert_array_equal(model.codebook.entries, loaded.codebook.entries)
