import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from prevmatch.nn import SegModel
from prevmatch.registry import (
    PrevRegistry,
    RegistryOrderError,
    Snapshot,
    ensemble_predict,
    ensemble_probs,
    sample_k,
    sample_weights,
    select_snapshots,
)
from prevmatch.rng import stream


def constant_snapshot(probs, epoch=1):
    """A 1x1-conv snapshot whose softmax output is ``probs`` at every pixel."""
    probs = np.asarray(probs, dtype=float)
    c = len(probs)
    return Snapshot((np.zeros((c, 1, 1, 1)), np.log(probs)), epoch, 0.0)


def random_snapshot(seed, c=3, hidden=(4,)):
    model = SegModel(2, c, hidden, seed=seed)
    return Snapshot.capture(model, seed + 1, 0.0)


class TestMaybeSave:
    def test_first_score_saved(self):
        reg = PrevRegistry(3)
        assert reg.maybe_save(SegModel(1, 2, (2,)), 1, 0.01)

    def test_tie_not_saved(self):
        reg = PrevRegistry(3)
        m = SegModel(1, 2, (2,))
        reg.maybe_save(m, 1, 0.4)
        assert not reg.maybe_save(m, 2, 0.4)
        assert reg.epochs() == [1]

    def test_eviction_keeps_newest(self):
        reg = PrevRegistry(2)
        m = SegModel(1, 2, (2,))
        for epoch, score in zip((1, 2, 3), (0.3, 0.4, 0.5)):
            assert reg.maybe_save(m, epoch, score)
        assert reg.epochs() == [2, 3]
        assert [s.val_score for s in reg.snapshots] == [0.4, 0.5]

    def test_non_monotone_epoch(self):
        reg = PrevRegistry(2)
        m = SegModel(1, 2, (2,))
        reg.maybe_save(m, 3, 0.1)
        with pytest.raises(RegistryOrderError):
            reg.maybe_save(m, 3, 0.9)
        with pytest.raises(RegistryOrderError):
            reg.maybe_save(m, 2, 0.9)

    def test_capacity_validated(self):
        with pytest.raises(ValueError):
            PrevRegistry(0)

    @pytest.mark.parametrize("capacity", [1, 2, 3])
    def test_exhaustive_against_oracle(self, capacity):
        m = SegModel(1, 2, (2,))
        for scores in itertools.product((0.1, 0.2, 0.3), repeat=6):
            reg = PrevRegistry(capacity)
            best, saved = -math.inf, []
            for epoch, s in enumerate(scores, start=1):
                expect = s > best
                if expect:
                    best = s
                    saved.append(epoch)
                assert reg.maybe_save(m, epoch, s) == expect
                assert len(reg) <= capacity
            assert reg.epochs() == saved[-capacity:]

    def test_snapshot_is_a_copy(self):
        m = SegModel(1, 2, (2,), seed=0)
        reg = PrevRegistry(2)
        reg.maybe_save(m, 1, 0.5)
        digest = reg.snapshots[0].checksum()
        for p in m.parameters():
            p.data += 1.0
        assert reg.snapshots[0].checksum() == digest
        with pytest.raises(ValueError):
            reg.snapshots[0].params[0][0, 0, 0, 0] = 5.0


class TestSaveOnInterval:
    def test_every_epoch(self):
        reg = PrevRegistry(20)
        m = SegModel(1, 2, (2,))
        assert all(reg.save_on_interval(m, e, 1) for e in range(1, 11))
        assert reg.epochs() == list(range(1, 11))

    def test_every_third(self):
        reg = PrevRegistry(8)
        m = SegModel(1, 2, (2,))
        saved = [e for e in range(1, 10) if reg.save_on_interval(m, e, 3)]
        assert saved == [3, 6, 9]

    def test_eviction_over_long_run(self):
        reg = PrevRegistry(8)
        m = SegModel(1, 2, (2,))
        for e in range(1, 81):
            reg.save_on_interval(m, e, 3)
        assert reg.epochs() == [57, 60, 63, 66, 69, 72, 75, 78]

    def test_bad_interval(self):
        with pytest.raises(ValueError):
            PrevRegistry(2).save_on_interval(SegModel(1, 2, (2,)), 1, 0)


class TestSampleK:
    def test_k_one(self):
        rng = stream(0, "k1")
        assert all(sample_k(rng, 1, 8) == 1 for _ in range(200))

    @pytest.mark.parametrize("K,available,support", [(3, 2, 2), (3, 3, 3), (3, 8, 3), (5, 8, 5)])
    def test_uniform_chi_square(self, K, available, support):
        rng = stream(1, "k", K, available)
        draws = np.array([sample_k(rng, K, available) for _ in range(10_000)])
        assert draws.min() == 1 and draws.max() == support
        counts = np.bincount(draws, minlength=support + 1)[1:]
        assert stats.chisquare(counts).pvalue > 0.01

    def test_empty_registry(self):
        with pytest.raises(ValueError):
            sample_k(stream(0), 3, 0)


class TestSampleWeights:
    def test_single(self):
        w = sample_weights(stream(0), 1)
        assert w.tolist() == [1.0]

    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_flat_means(self, k):
        rng = stream(2, "flat", k)
        w = np.array([sample_weights(rng, k, 1.0) for _ in range(10_000)])
        # Dir(1,...,1) marginal variance (k-1)/(k^2 (k+1))
        se = math.sqrt((k - 1) / (k * k * (k + 1)) / len(w))
        assert np.all(np.abs(w.mean(axis=0) - 1.0 / k) <= 3 * se)

    def test_two_component_is_uniform(self):
        rng = stream(3, "ks")
        w1 = [sample_weights(rng, 2, (1.0, 1.0))[0] for _ in range(10_000)]
        assert stats.kstest(w1, "uniform").pvalue > 0.01

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 8), st.floats(0.05, 20.0), st.integers(0, 2**31))
    def test_simplex(self, k, alpha, seed):
        w = sample_weights(stream(seed), k, alpha)
        assert len(w) == k
        assert abs(w.sum() - 1.0) <= 1e-9
        assert np.all(w >= 0)

    @pytest.mark.parametrize("alpha", [0.0, -1.0, (1.0, 0.0)])
    def test_nonpositive_alpha(self, alpha):
        with pytest.raises(ValueError):
            sample_weights(stream(0), 2, alpha)


class TestEnsemble:
    def test_single_snapshot_bit_exact(self):
        snap = random_snapshot(0)
        x = np.random.default_rng(0).normal(size=(2, 2, 5, 5))
        g = ensemble_predict([snap], x, [1.0], 0.5)
        assert np.array_equal(g.probs, snap.predict(x))

    def test_identical_snapshots(self):
        snap = random_snapshot(1)
        x = np.random.default_rng(1).normal(size=(2, 2, 5, 5))
        out = ensemble_probs([snap, snap], x, [0.3, 0.7])
        assert np.max(np.abs(out - snap.predict(x))) <= 1e-12

    def test_hand_example(self):
        a = constant_snapshot([0.8, 0.2])
        b = constant_snapshot([0.4, 0.6])
        g = ensemble_predict([a, b], np.zeros((1, 1, 1, 1)), [0.5, 0.5], 0.5)
        np.testing.assert_allclose(g.probs.reshape(2), [0.6, 0.4], atol=1e-12)
        assert g.pseudo_labels.item() == 0
        assert g.mask.item()
        assert g.k_used == 2

    def test_tie_goes_to_lowest_class(self):
        g = ensemble_predict([constant_snapshot([0.25, 0.375, 0.375])], np.zeros((1, 1, 2, 2)), [1.0], 0.0)
        assert np.all(g.pseudo_labels == 1)

    def test_mask_threshold(self):
        snaps = [random_snapshot(s) for s in range(3)]
        x = np.random.default_rng(2).normal(size=(3, 2, 6, 6))
        g = ensemble_predict(snaps, x, [0.2, 0.3, 0.5], 0.45)
        assert np.array_equal(g.mask, g.probs.max(axis=1) >= 0.45)

    def test_degenerate_weight(self):
        snaps = [random_snapshot(s) for s in range(3)]
        x = np.random.default_rng(3).normal(size=(1, 2, 4, 4))
        out = ensemble_probs(snaps, x, [0.0, 1.0, 0.0])
        assert np.array_equal(out, snaps[1].predict(x))

    def test_architecture_mismatch(self):
        a = random_snapshot(0, hidden=(4,))
        b = random_snapshot(0, hidden=(5,))
        with pytest.raises(ValueError):
            ensemble_probs([a, b], np.zeros((1, 2, 3, 3)), [0.5, 0.5])

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            ensemble_probs([random_snapshot(0)], np.zeros((1, 2, 3, 3)), [0.5, 0.5])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 1000))
    def test_convex_and_normalized(self, k, seed):
        snaps = [random_snapshot(seed + i) for i in range(k)]
        x = np.random.default_rng(seed).normal(size=(2, 2, 4, 4))
        w = sample_weights(stream(seed), k)
        out = ensemble_probs(snaps, x, w)
        preds = np.stack([s.predict(x) for s in snaps])
        assert np.all(out >= preds.min(axis=0) - 1e-15)
        assert np.all(out <= preds.max(axis=0) + 1e-15)
        assert np.all(np.abs(out.sum(axis=1) - 1) <= 1e-9)


class TestSelect:
    def test_distinct_sorted(self):
        reg = PrevRegistry(8)
        m = SegModel(1, 2, (2,))
        for e in range(1, 9):
            reg.save_on_interval(m, e, 1)
        rng = stream(4)
        for _ in range(500):
            k = sample_k(rng, 5, len(reg))
            idx = select_snapshots(rng, reg, k)
            assert len(set(idx)) == k and list(idx) == sorted(idx)
