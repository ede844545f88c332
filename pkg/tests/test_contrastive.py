import math

import numpy as np
import pytest

from iic.contrastive import (
    MemoryBank,
    NegativeDraw,
    bank_update,
    contrastive_loss,
    critic,
    fetch_weights,
    init_banks,
    load_banks,
    loss_one_direction,
    sample_negatives,
    save_banks,
    total_loss,
)
from iic.errors import DataError


def unit(x):
    x = np.asarray(x, float)
    return x / np.linalg.norm(x)


def scalar_loss(anchor, positive, negatives, tau):
    """Reference: one term at a time, straight from the definition."""
    h = lambda a, b: math.exp(sum(x * y for x, y in zip(unit(a), unit(b))) / tau)
    num = h(anchor, positive)
    den = num + sum(h(anchor, n) for n in negatives)
    return -math.log(num / den)


def random_instance(rng, d, k, N=20, intra=True):
    banks = init_banks(N, d, int(rng.integers(1 << 30)))
    i = int(rng.integers(N))
    draw = sample_negatives(N, k, i, rng, intra)
    return banks, draw, unit(rng.standard_normal(d)), unit(rng.standard_normal(d))


class TestCritic:
    def test_identical(self):
        a = unit([1, 2, 3])
        assert critic(a, a, 0.07) == pytest.approx(math.exp(1 / 0.07), rel=1e-12)
        assert critic(a, a, 0.07) == pytest.approx(1.60e6, rel=0.01)

    def test_orthogonal(self):
        assert critic([1, 0], [0, 1], 0.3) == pytest.approx(1.0)

    def test_opposite(self):
        assert critic([1, 0], [-1, 0], 1.0) == pytest.approx(0.36788, abs=1e-5)

    def test_range_and_renormalization(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = rng.standard_normal(5) * 3, rng.standard_normal(5) * 0.2
            v = critic(a, b, 0.5)
            assert math.exp(-2) <= v <= math.exp(2)
            assert v == pytest.approx(critic(unit(a), unit(b), 0.5))

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            critic([1, 0], [1, 0], 0.0)


class TestSampling:
    def test_only_candidate(self):
        for seed in range(20):
            d = sample_negatives(2, 1, 0, seed)
            assert d.indices_view2.tolist() == [1]

    def test_shapes_and_exclusion(self):
        d = sample_negatives(5000, 1024, 17, 0)
        assert len(d.indices_view2) == 1024
        assert len(d.indices_neg) == 1025
        assert 17 not in d.indices_view2
        assert d.indices_neg.max() < 5000

    def test_uniform_frequencies(self):
        N, k, i = 100, 10, 3
        rng = np.random.default_rng(1)
        c2 = np.zeros(N)
        cn = np.zeros(N)
        draws = 10_000
        for _ in range(draws):
            d = sample_negatives(N, k, i, rng)
            c2 += np.bincount(d.indices_view2, minlength=N)
            cn += np.bincount(d.indices_neg, minlength=N)
        assert c2[i] == 0
        n2, p2 = draws * k, 1 / (N - 1)
        others = np.delete(c2, i)
        assert np.all(np.abs(others - n2 * p2) < 4 * math.sqrt(n2 * p2 * (1 - p2)))
        nn, pn = draws * (k + 1), 1 / N
        assert np.all(np.abs(cn - nn * pn) < 4 * math.sqrt(nn * pn * (1 - pn)))
        # neg draws may include the positive index
        assert cn[i] > 0

    def test_k_out_of_range(self):
        with pytest.raises(DataError):
            sample_negatives(5, 5, 0)
        with pytest.raises(DataError):
            sample_negatives(5, 0, 0)

    def test_ablation_draw_has_no_intra_negatives(self):
        assert sample_negatives(10, 3, 0, 0, intra_neg=False).indices_neg.size == 0


class TestLoss:
    def test_hand_example(self):
        bank2 = MemoryBank(np.array([[1.0, 0.0], [0.0, 1.0]]), "view2")
        bankn = MemoryBank(np.array([[0.0, 1.0], [0.0, 1.0]]), "intra_neg")
        draw = NegativeDraw(0, np.array([1]), np.array([0, 1]))
        loss, _, _ = loss_one_direction([1.0, 0.0], [1.0, 0.0], bank2, bankn, draw, tau=1.0)
        assert loss == pytest.approx(math.log(1 + 3 / math.e), abs=1e-12)
        assert loss == pytest.approx(0.7437, abs=1e-4)

    def test_all_scores_equal(self):
        v = unit([0.3, -0.2, 0.9])
        bank = MemoryBank(np.tile(v, (3, 1)))
        draw = NegativeDraw(0, np.array([1]), np.array([0, 2]))
        loss, _, _ = loss_one_direction(v, v, bank, MemoryBank(bank.rows.copy(), "intra_neg"), draw, 0.07)
        assert loss == pytest.approx(math.log(4), abs=1e-12)
        assert loss == pytest.approx(scalar_loss(v, v, [v, v, v], 0.07), abs=1e-12)

    def test_vectorized_equals_scalar_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            d, k = int(rng.integers(2, 17)), int(rng.integers(1, 9))
            tau = float(rng.uniform(0.05, 1.0))
            banks, draw, a, p = random_instance(rng, d, k)
            negs = list(banks.view2.rows[draw.indices_view2]) + list(banks.intra_neg.rows[draw.indices_neg])
            assert len(negs) + 1 == 2 * (k + 1)
            got, _, _ = loss_one_direction(a, p, banks.view2, banks.intra_neg, draw, tau)
            assert got == pytest.approx(scalar_loss(a, p, negs, tau), abs=1e-10)

    def test_shift_invariance(self):
        # the max-score shift is internal; compare against an unshifted float64 evaluation
        rng = np.random.default_rng(3)
        for _ in range(20):
            banks, draw, a, p = random_instance(rng, 8, 5)
            negs = np.concatenate([banks.view2.rows[draw.indices_view2], banks.intra_neg.rows[draw.indices_neg]])
            s = np.concatenate([[a @ p], negs @ a]) / 0.5
            direct = -s[0] + np.log(np.exp(s).sum())
            for c in (0.0, 7.5, -30.0):
                shifted = -(s[0] - c) + np.log(np.exp(s - c).sum())
                assert shifted == pytest.approx(direct, abs=1e-12)
            got = loss_one_direction(a, p, banks.view2, banks.intra_neg, draw, 0.5)[0]
            assert got == pytest.approx(direct, abs=1e-12)

    def test_tiny_tau_stays_finite(self):
        rng = np.random.default_rng(4)
        banks, draw, a, p = random_instance(rng, 8, 4)
        loss, ga, gp = loss_one_direction(a, p, banks.view2, banks.intra_neg, draw, 1e-4)
        assert np.isfinite(loss) and np.all(np.isfinite(ga)) and np.all(np.isfinite(gp))

    @pytest.mark.parametrize("which", ["anchor", "positive"])
    def test_gradient_finite_differences(self, which):
        rng = np.random.default_rng(5)
        for _ in range(10):
            banks, draw, a, p = random_instance(rng, 8, 4)
            a, p = a * 1.3, p * 0.8  # off the sphere: the loss uses cosines
            _, ga, gp = loss_one_direction(a, p, banks.view2, banks.intra_neg, draw, 0.2)
            g = ga if which == "anchor" else gp
            x = a if which == "anchor" else p
            h = 1e-6
            for j in range(8):
                e = np.zeros(8)
                e[j] = h
                f = lambda v: loss_one_direction(
                    v if which == "anchor" else a, v if which == "positive" else p,
                    banks.view2, banks.intra_neg, draw, 0.2)[0]
                num = (f(x + e) - f(x - e)) / (2 * h)
                assert abs(num - g[j]) <= 1e-6 * max(abs(num), abs(g[j]), 1e-3)

    def test_out_of_range_index(self):
        banks = init_banks(4, 3, 0)
        draw = NegativeDraw(0, np.array([9]), np.array([0]))
        with pytest.raises(DataError):
            loss_one_direction(unit([1, 0, 0]), unit([0, 1, 0]), banks.view2, banks.intra_neg, draw)


class TestTotalLoss:
    def test_symmetric_construction(self):
        rng = np.random.default_rng(6)
        banks = init_banks(10, 6, 0)
        banks.view2.rows[:] = banks.view1.rows
        v = unit(rng.standard_normal(6))
        draw = sample_negatives(10, 3, 2, rng)
        loss, (g1, g2) = total_loss(v, v, banks, (draw, draw), 0.3)
        one = loss_one_direction(v, v, banks.view2, banks.intra_neg, draw, 0.3)[0]
        assert loss == pytest.approx(2 * one, abs=1e-12)
        np.testing.assert_allclose(g1, g2, atol=1e-12)

    def test_sum_of_directions(self):
        rng = np.random.default_rng(7)
        banks = init_banks(30, 8, 1)
        v1, v2 = unit(rng.standard_normal(8)), unit(rng.standard_normal(8))
        d1, d2 = sample_negatives(30, 5, 4, rng), sample_negatives(30, 5, 4, rng)
        loss, _ = total_loss(v1, v2, banks, (d1, d2), 0.07)
        a = loss_one_direction(v1, v2, banks.view2, banks.intra_neg, d1, 0.07)[0]
        b = loss_one_direction(v2, v1, banks.view1, banks.intra_neg, d2, 0.07)[0]
        assert loss == pytest.approx(a + b, abs=1e-12)
        assert loss > 0

    def test_gradients_finite_differences(self):
        rng = np.random.default_rng(8)
        banks = init_banks(25, 8, 2)
        v1, v2 = rng.standard_normal(8), rng.standard_normal(8)
        d1, d2 = sample_negatives(25, 4, 0, rng), sample_negatives(25, 4, 0, rng)
        _, (g1, g2) = total_loss(v1, v2, banks, (d1, d2), 0.1)
        f = lambda a, b: total_loss(a, b, banks, (d1, d2), 0.1)[0]
        h = 1e-6
        for j in range(8):
            e = np.zeros(8)
            e[j] = h
            n1 = (f(v1 + e, v2) - f(v1 - e, v2)) / (2 * h)
            n2 = (f(v1, v2 + e) - f(v1, v2 - e)) / (2 * h)
            assert abs(n1 - g1[j]) <= 1e-6 * max(abs(n1), 1e-3)
            assert abs(n2 - g2[j]) <= 1e-6 * max(abs(n2), 1e-3)


class TestBatchedLoss:
    def test_matches_single(self):
        rng = np.random.default_rng(9)
        B, n, d = 5, 7, 6
        a, p = rng.standard_normal((B, d)), rng.standard_normal((B, d))
        negs = rng.standard_normal((B, n, d))
        loss, ga, gp = contrastive_loss(a, p, negs, 0.2)
        for b in range(B):
            lb, gab, gpb = contrastive_loss(a[b : b + 1], p[b : b + 1], negs[b : b + 1], 0.2)
            assert loss[b] == pytest.approx(lb[0], abs=1e-14)
            np.testing.assert_allclose(ga[b], gab[0], atol=1e-14)
            assert loss[b] == pytest.approx(scalar_loss(a[b], p[b], negs[b], 0.2), abs=1e-10)


class TestWeights:
    def test_single_row(self):
        banks = init_banks(1, 4, 0)
        w = fetch_weights(banks, NegativeDraw(0, np.array([0]), np.array([0])))
        np.testing.assert_array_equal(w.w1[0], banks.view1.rows[0])

    def test_concat_count_and_bitwise(self):
        banks = init_banks(50, 4, 1)
        draw = sample_negatives(50, 7, 3, 0)
        w = fetch_weights(banks, draw)
        assert w.w1_cat.shape == (7 + 8, 4) and w.w2_cat.shape == (15, 4)
        for r, j in enumerate(draw.indices_view2):
            assert w.w2[r].tobytes() == banks.view2.rows[j].tobytes()
            assert w.w1[r].tobytes() == banks.view1.rows[j].tobytes()
        for r, j in enumerate(draw.indices_neg):
            assert w.w1_cat[7 + r].tobytes() == banks.intra_neg.rows[j].tobytes()

    def test_bad_index(self):
        with pytest.raises(DataError):
            fetch_weights(init_banks(3, 2, 0), NegativeDraw(0, np.array([3]), np.array([0])))


class TestBanks:
    def test_init_unit_and_deterministic(self):
        a, b = init_banks(100, 64, 5), init_banks(100, 64, 5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.rows, y.rows)
            np.testing.assert_allclose(np.linalg.norm(x.rows, axis=1), 1.0, atol=1e-6)
        assert [x.role for x in a] == ["view1", "view2", "intra_neg"]

    def test_mean_pairwise_cosine(self):
        rows = init_banks(1000, 64, 0).view1.rows
        c = rows @ rows.T
        mean_off = (c.sum() - np.trace(c)) / (1000 * 999)
        assert abs(mean_off) < 0.05

    def test_update_overwrites_only_row(self):
        bank = init_banks(10, 4, 0).view1
        before = bank.rows.copy()
        v = unit([1, 2, 3, 4])
        bank_update(bank, 3, v)
        np.testing.assert_array_equal(bank.rows[3], v)
        mask = np.arange(10) != 3
        assert bank.rows[mask].tobytes() == before[mask].tobytes()

    def test_momentum_update_stays_unit(self):
        bank = init_banks(10, 4, 0).view1
        bank_update(bank, 0, unit([1, 0, 0, 0]), momentum=0.5)
        assert np.linalg.norm(bank.rows[0]) == pytest.approx(1.0, abs=1e-12)

    def test_epoch_visits_each_row_once(self):
        N = 37
        bank = init_banks(N, 4, 0).view1
        rng = np.random.default_rng(0)
        writes = np.zeros(N, int)
        for i in rng.permutation(N):
            bank_update(bank, int(i), unit(rng.standard_normal(4)))
            writes[i] += 1
        assert np.all(writes == 1)

    def test_update_errors(self):
        bank = init_banks(3, 2, 0).view1
        with pytest.raises(DataError):
            bank_update(bank, 3, unit([1, 0]))
        with pytest.raises(DataError):
            bank_update(bank, 0, [2.0, 0.0])

    def test_checkpoint_roundtrip(self, tmp_path):
        banks = init_banks(7, 5, 3)
        save_banks(tmp_path / "b.iicbnk", banks)
        raw = (tmp_path / "b.iicbnk").read_bytes()
        assert raw[:7] == b"IICBNK1" and raw[7] == 0
        assert len(raw) == 3 * (7 + 1 + 8 + 8 * 7 * 5)
        back = load_banks(tmp_path / "b.iicbnk")
        for x, y in zip(banks, back):
            assert x.role == y.role
            np.testing.assert_array_equal(x.rows, y.rows)

    def test_checkpoint_corrupt(self, tmp_path):
        (tmp_path / "b.iicbnk").write_bytes(b"IICBNK1" + bytes(3))
        with pytest.raises(DataError):
            load_banks(tmp_path / "b.iicbnk")
