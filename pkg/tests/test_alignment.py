import numpy as np
import pytest

from fbl.alignment import (
    AlignmentTable,
    alignment_gap,
    embedding_rows,
    forward_aligned,
    make_drop_mask,
    train_batch_aligned,
)
from fbl.config import FederationConfig
from fbl.data import LabeledDataset, Origin, Sample
from fbl.model import GradientBuffer, backward, forward_features, forward_head

from conftest import random_classifier


def mixed_batch(rng, n_real=3, synth_labels=(1, 1, 2), dim=4, classes=3):
    x = rng.normal(size=(n_real + len(synth_labels), dim))
    y = np.concatenate([rng.integers(0, classes, size=n_real), synth_labels]).astype(int)
    origin = np.array([Origin.REAL] * n_real + [Origin.SYNTHETIC] * len(synth_labels))
    return LabeledDataset(x, y, classes, origin)


def cfg(**kw):
    base = dict(num_clients=1, lr=0.1, momentum=0.5, weight_decay=1e-3, drop_count=0)
    base.update(kw)
    return FederationConfig(**base)


class TestForwardAligned:
    def test_zero_embedding_is_neutral(self, rng):
        model = random_classifier(rng, [4, 5, 3], 3)
        table = AlignmentTable.zeros([1], 3)
        s = Sample(rng.normal(size=4), 1, Origin.SYNTHETIC)
        plain = forward_head(model, forward_features(model, s.features))
        np.testing.assert_array_equal(forward_aligned(model, table, s), plain)

    def test_real_sample_ignores_table(self, rng):
        model = random_classifier(rng, [4, 3], 3)
        s = Sample(rng.normal(size=4), 2)
        empty = AlignmentTable(3)
        np.testing.assert_array_equal(
            forward_aligned(model, empty, s), forward_head(model, forward_features(model, s.features))
        )

    def test_matches_composed_oracle(self, rng):
        model = random_classifier(rng, [4, 5, 3], 3)
        table = AlignmentTable.zeros([0, 2], 3)
        table.embeddings[2] = rng.normal(size=3)
        x = rng.normal(size=4)
        a = x
        for layer in model.feature_layers:
            a = np.tanh(layer.weight @ a + layer.bias)
        expected = model.head.weight @ (a + table.embeddings[2]) + model.head.bias
        out = forward_aligned(model, table, Sample(x, 2, Origin.SYNTHETIC))
        np.testing.assert_allclose(out, expected, atol=1e-12, rtol=0)

    def test_dropped_skips_embedding(self, rng):
        model = random_classifier(rng, [4, 3], 3)
        table = AlignmentTable.zeros([1], 3)
        table.embeddings[1] += 5.0
        s = Sample(rng.normal(size=4), 1, Origin.SYNTHETIC)
        np.testing.assert_array_equal(
            forward_aligned(model, table, s, dropped=True), forward_head(model, forward_features(model, s.features))
        )

    def test_missing_embedding(self, rng):
        model = random_classifier(rng, [4, 3], 3)
        with pytest.raises(KeyError):
            forward_aligned(model, AlignmentTable(3), Sample(np.zeros(4), 0, Origin.SYNTHETIC))


class TestDropMask:
    def test_zero_drop(self, rng):
        assert not make_drop_mask(mixed_batch(rng), 0, rng).any()

    def test_clamped_to_synthetic_count(self, rng):
        batch = mixed_batch(rng, synth_labels=(2,))
        mask = make_drop_mask(batch, 2, rng)
        assert mask.tolist() == [False, False, False, True]

    def test_only_synthetic_dropped(self, rng):
        batch = mixed_batch(rng, n_real=10, synth_labels=(0, 1, 2, 1, 0))
        for _ in range(50):
            mask = make_drop_mask(batch, 2, rng)
            assert mask.sum() == 2
            assert np.all(batch.origin[mask] == Origin.SYNTHETIC)

    def test_uniform_over_synthetic(self):
        r = np.random.default_rng(0)
        batch = mixed_batch(r, n_real=2, synth_labels=(0, 1, 1, 2))
        hits = np.zeros(len(batch), dtype=int)
        for _ in range(10_000):
            hits += make_drop_mask(batch, 2, r)
        tol = 3 * np.sqrt(10_000 * 0.5 * 0.5)
        assert np.all(np.abs(hits[2:] - 5000) <= tol)
        assert hits[:2].sum() == 0


class TestTrainBatch:
    def _setup(self, rng):
        model = random_classifier(rng, [4, 5, 3], 3, scale=0.5)
        table = AlignmentTable.zeros([1, 2], 3)
        table.embeddings[1] = rng.normal(size=3)
        table.embeddings[2] = rng.normal(size=3)
        return model, table

    def test_all_real_batch_leaves_table(self, rng):
        model, table = self._setup(rng)
        before = {c: p.copy() for c, p in table.embeddings.items()}
        batch = mixed_batch(rng, n_real=5, synth_labels=())
        train_batch_aligned(model, table, batch, cfg(), rng, rng, GradientBuffer.zeros_like(model), 0.1)
        for c in before:
            np.testing.assert_array_equal(table.embeddings[c], before[c])

    def test_fully_dropped_class_unchanged(self, rng):
        model, table = self._setup(rng)
        batch = mixed_batch(rng, synth_labels=(1, 2, 2))
        # drop everything synthetic: the class-1 sample is always dropped
        before = table.embeddings[1].copy()
        train_batch_aligned(model, table, batch, cfg(drop_count=3), rng, rng, GradientBuffer.zeros_like(model))
        np.testing.assert_array_equal(table.embeddings[1], before)

    def test_embedding_gradient_matches_finite_differences(self, rng):
        model, table = self._setup(rng)
        batch = mixed_batch(rng, synth_labels=(1, 1, 2))
        none = np.zeros(len(batch), dtype=bool)
        offsets, carries = embedding_rows(table, batch, none)
        res = backward(model, batch.features, batch.labels, offsets)
        analytic =res.offset_grads[carries & (batch.labels == 1)].sum(axis=0)

        def loss_at(p1):
            t = AlignmentTable(3, {1: p1, 2: table.embeddings[2]}, {})
            off, _ = embedding_rows(t, batch, none)
            return backward(model, batch.features, batch.labels, off).loss

        h = 1e-5
        numeric = np.zeros(3)
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            numeric[j] = (loss_at(table.embeddings[1] + e) - loss_at(table.embeddings[1] - e)) / (2 * h)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        assert rel.max() < 1e-4

    def test_dropped_sample_contributes_nothing(self, rng):
        model, table = self._setup(rng)
        batch = mixed_batch(rng, n_real=0, synth_labels=(1, 1))
        dropped = np.array([True, False])
        offsets, carries = embedding_rows(table, batch, dropped)
        assert carries.tolist() == [False, True]
        res = backward(model, batch.features, batch.labels, offsets)
        # the class-1 update uses only the kept row; the dropped row has no offset
        assert np.all(offsets[0] == 0)
        expected = res.offset_grads[1]
        p_before = table.embeddings[1].copy()
        table.step(1, expected, 1.0, 0.0, 0.0)
        np.testing.assert_allclose(table.embeddings[1], p_before - expected)

    def test_zero_embedding_neutrality(self, rng):
        """All-zero table with every synthetic sample dropped trains exactly like no alignment."""
        model, _ = self._setup(rng)
        batches = [mixed_batch(rng, synth_labels=(1, 2, 2)) for _ in range(4)]
        m_a, m_b = model.copy(), model.copy()
        table = AlignmentTable.zeros([1, 2], 3)
        buf_a, buf_b = GradientBuffer.zeros_like(m_a), GradientBuffer.zeros_like(m_b)
        ra, rb = np.random.default_rng(9), np.random.default_rng(9)
        for b in batches:
            train_batch_aligned(m_a, table, b, cfg(drop_count=10), ra, np.random.default_rng(1), buf_a, 0.1)
            train_batch_aligned(m_b, None, b, cfg(use_alignment=False), rb, np.random.default_rng(2), buf_b, 0.1)
        for p, q in zip(m_a.parameters(), m_b.parameters()):
            np.testing.assert_array_equal(p, q)
        assert all(np.all(p == 0) for p in table.embeddings.values())

    def test_real_rows_augmented_synthetic_not(self, rng):
        model, table = self._setup(rng)
        batch = mixed_batch(rng, n_real=2, synth_labels=(1,))
        seen = {}

        import fbl.alignment as al

        orig = al.backward

        def spy(m, x, y, offsets=None, buffer=None):
            seen["x"] = x.copy()
            return orig(m, x, y, offsets, buffer)

        al.backward = spy
        try:
            train_batch_aligned(model, table, batch, cfg(), rng, rng, GradientBuffer.zeros_like(model), 0.5)
        finally:
            al.backward = orig
        assert not np.allclose(seen["x"][:2], batch.features[:2])
        np.testing.assert_array_equal(seen["x"][2], batch.features[2])

    def test_synthetic_embedding_moves(self, rng):
        model, table = self._setup(rng)
        before = table.embeddings[2].copy()
        batch = mixed_batch(rng, synth_labels=(2, 2))
        train_batch_aligned(model, table, batch, cfg(), rng, rng, GradientBuffer.zeros_like(model))
        assert not np.array_equal(before, table.embeddings[2])


def test_alignment_gap_zero_when_embedding_closes_it(rng):
    model = random_classifier(rng, [3, 4], 2)
    real = LabeledDataset(rng.normal(size=(20, 3)), np.repeat([0, 1], 10), 2)
    syn = LabeledDataset(
        rng.normal(size=(10, 3)) + 1.0, np.repeat([0, 1], 5), 2, np.full(10, Origin.SYNTHETIC)
    )
    table = AlignmentTable.zeros([0, 1], 4)
    raw = alignment_gap(model, table, syn, real)
    assert raw > 0
    for c in (0, 1):
        table.embeddings[c] = (
            forward_features(model, real.features[real.labels == c]).mean(axis=0)
            - forward_features(model, syn.features[syn.labels == c]).mean(axis=0)
        )
    assert alignment_gap(model, table, syn, real) == pytest.approx(0.0, abs=1e-12)


def test_table_serialization():
    t = AlignmentTable.zeros([3, 1], 2)
    t.embeddings[3][:] = [0.5, -1.0]
    assert t.to_dict() == {"1": [0.0, 0.0], "3": [0.5, -1.0]}
