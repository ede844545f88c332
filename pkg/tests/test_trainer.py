import math

import numpy as np
import pytest

from conftest import TINY_ENCODER
from iic.contrastive import MemoryBanks
from iic.datasets import load_batch
from iic.encoder import embed
from iic.errors import DataError
from iic.trainer import (
    FinetuneConfig,
    TrainConfig,
    epoch_batches,
    finetune_classifier,
    full_scale_schedule,
    head_loss,
    init_state,
    lr_at,
    run_training,
    sgd_step,
    train_iteration,
)


def tiny_config(**kw):
    base = dict(batch_size=4, epochs=1, k=5, encoder=TINY_ENCODER, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_full_scale_schedule_exact(self):
        cfg = full_scale_schedule()
        expected = {0: 0.01, 44: 0.01, 45: 0.001, 89: 0.001, 90: 1e-4, 100: 1e-4, 125: 1e-5, 160: 1e-6, 200: 1e-6}
        for epoch, lr in expected.items():
            assert lr_at(epoch, cfg) == lr, epoch

    def test_desk_schedule(self):
        cfg = TrainConfig()
        assert [lr_at(e, cfg) for e in (0, 14, 15, 22, 23, 29)] == [0.01, 0.01, 0.001, 0.001, 1e-4, 1e-4]

    def test_bad_schedule(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_milestones=(10, 10))
        with pytest.raises(ValueError):
            TrainConfig(lr_decay=1.0)


class TestSGD:
    def test_plain_step(self):
        from iic.encoder import init_params

        p = init_params(TINY_ENCODER, 0)
        before = p.flat.copy()
        g = np.random.default_rng(0).standard_normal(p.size)
        sgd_step(p, g, np.zeros(p.size), 0.1, momentum=0.0)
        np.testing.assert_allclose(p.flat, before - 0.1 * g, rtol=0, atol=1e-15)

    def test_two_momentum_steps(self):
        from iic.encoder import init_params

        p = init_params(TINY_ENCODER, 0)
        before = p.flat.copy()
        g = np.random.default_rng(1).standard_normal(p.size)
        v = np.zeros(p.size)
        sgd_step(p, g, v, 0.01, momentum=0.9)
        sgd_step(p, g, v, 0.01, momentum=0.9)
        np.testing.assert_allclose(before - p.flat, 0.01 * g * 2.9, rtol=1e-12, atol=1e-15)

    def test_zero_everything_is_noop(self):
        from iic.encoder import init_params

        p = init_params(TINY_ENCODER, 0)
        before = p.flat.tobytes()
        sgd_step(p, np.zeros(p.size), np.zeros(p.size), 0.5, 0.9, 0.0)
        assert p.flat.tobytes() == before

    def test_weight_decay_term(self):
        from iic.encoder import init_params

        p = init_params(TINY_ENCODER, 0)
        before = p.flat.copy()
        sgd_step(p, np.zeros(p.size), np.zeros(p.size), 0.1, 0.0, 0.5)
        np.testing.assert_allclose(p.flat, before * 0.95, atol=1e-15)


def test_epoch_batches():
    assert epoch_batches(range(4), 2) == [[0, 1], [2, 3]]
    assert epoch_batches(range(5), 2) == [[0, 1], [2, 3, 4]]
    assert epoch_batches(range(7), 3) == [[0, 1, 2], [3, 4, 5, 6]]
    assert epoch_batches(range(1), 4) == [[0]]


class TestIteration:
    def _state_and_batch(self, data, cfg, seed=0):
        train = data.split("train")
        state = init_state(cfg, len(train))
        batch = load_batch(train, [0, 3, 5, 7], cfg.clip_length, seed)
        return state, batch

    def test_lr_zero_params_fixed_banks_updated(self, tiny_data):
        cfg = tiny_config()
        state, batch = self._state_and_batch(tiny_data, cfg)
        before = state.params.flat.tobytes()
        banks_before = state.banks.copy()
        train_iteration(state, batch, cfg, np.random.default_rng(0), lr=0.0)
        assert state.params.flat.tobytes() == before
        idx = batch[1]
        for new, old in zip(state.banks, banks_before):
            assert not np.array_equal(new.rows[idx], old.rows[idx])
            rest = np.setdiff1d(np.arange(new.size), idx)
            assert new.rows[rest].tobytes() == old.rows[rest].tobytes()
            np.testing.assert_allclose(np.linalg.norm(new.rows, axis=1), 1.0, atol=1e-6)

    def test_bank_rows_equal_fresh_embeddings(self, tiny_data):
        # overwrite semantics: with lr=0 and batch statistics, row i is the embedding computed this iteration
        from iic.clips import make_view1, make_view2

        cfg = tiny_config()
        state, batch = self._state_and_batch(tiny_data, cfg)
        params = state.params.copy()
        train_iteration(state, batch, cfg, np.random.default_rng(0), lr=0.0)
        x1 = np.stack([make_view1(w, 4).frames for w in batch[0]]).astype(np.float32)
        x2 = np.stack([make_view2(w, "residual", 4).frames for w in batch[0]]).astype(np.float32)
        np.testing.assert_allclose(state.banks.view1.rows[batch[1]], embed(params, x1, "rgb", True), atol=1e-6)
        np.testing.assert_allclose(state.banks.view2.rows[batch[1]], embed(params, x2, "res", True), atol=1e-6)
        # intra-negative rows: unit vectors, different from the anchors' own rows
        rows = state.banks.intra_neg.rows[batch[1]]
        np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-6)
        assert not np.allclose(rows, state.banks.view1.rows[batch[1]], atol=1e-3)

    def test_bitwise_reproducible(self, tiny_data):
        cfg = tiny_config()
        out = []
        for _ in range(2):
            state, batch = self._state_and_batch(tiny_data, cfg)
            loss = train_iteration(state, batch, cfg, np.random.default_rng(7))
            out.append((loss, state.params.flat.tobytes(), state.banks.intra_neg.rows.tobytes()))
        assert out[0] == out[1]

    def test_index_out_of_range(self, tiny_data):
        cfg = tiny_config()
        state, (windows, idx) = self._state_and_batch(tiny_data, cfg)
        with pytest.raises(DataError):
            train_iteration(state, (windows, [0, 1, 2, 99]), cfg, np.random.default_rng(0))

    def test_first_iteration_loss_window(self, desk_data):
        # desk config, random params and random banks: loss near the uniform-score value 2 log(2(k+1))
        train = desk_data.split("train")
        center = 2 * math.log(2 * (64 + 1))
        assert center == pytest.approx(9.73, abs=0.01)
        for seed in range(3):
            cfg = TrainConfig(bank_init="random", seed=seed)
            state = init_state(cfg, len(train))
            rng = np.random.default_rng(seed)
            batch = load_batch(train, rng.permutation(len(train))[:16].tolist(), cfg.clip_length, rng)
            loss = train_iteration(state, batch, cfg, rng)
            assert 0.5 * center <= loss <= 1.5 * center

    def test_ablation_uses_no_intra_negatives(self, tiny_data):
        cfg = tiny_config(intra_neg=False)
        state, batch = self._state_and_batch(tiny_data, cfg)
        before = state.banks.intra_neg.rows.copy()
        train_iteration(state, batch, cfg, np.random.default_rng(0))
        assert state.banks.intra_neg.rows.tobytes() == before.tobytes()


class TestRun:
    def test_iteration_count(self, tiny_data):
        train = tiny_data.split("train")  # 16 videos
        res = run_training(train, tiny_config(epochs=2, batch_size=4))
        assert res.state.iteration == 2 * math.ceil(16 / 4)
        assert [r[0] for r in res.loss_curve] == [0] * 4 + [1] * 4
        assert all(math.isfinite(r[2]) for r in res.loss_curve)

    def test_four_videos_batch_two(self, tiny_data):
        from iic.datasets import DatasetManifest

        train = tiny_data.split("train")
        small = DatasetManifest(train.root, train.records[:4])
        res = run_training(small, tiny_config(epochs=1, batch_size=2, k=2))
        assert res.state.iteration == 2

    def test_rerun_identical(self, tiny_data, tmp_path):
        train = tiny_data.split("train")
        (tmp_path / "a").mkdir()
        a = run_training(train, tiny_config(epochs=2), tmp_path / "a")
        b = run_training(train, tiny_config(epochs=2))
        assert a.loss_curve == b.loss_curve
        assert a.state.params.flat.tobytes() == b.state.params.flat.tobytes()
        c = run_training(train, tiny_config(epochs=2, seed=1))
        assert c.loss_curve != a.loss_curve
        rows = (tmp_path / "a" / "train_loss.csv").read_text().splitlines()
        assert rows[0] == "epoch,iteration,loss" and len(rows) == 1 + len(a.loss_curve)
        assert (tmp_path / "a" / "encoder.iicwgt").is_file() and (tmp_path / "a" / "banks.iicbnk").is_file()

    def test_empty_dataset(self, tiny_data):
        from iic.datasets import DatasetManifest

        with pytest.raises(DataError):
            run_training(DatasetManifest(tiny_data.root, []), tiny_config())

    def test_k_too_large(self, tiny_data):
        with pytest.raises(DataError):
            run_training(tiny_data.split("train"), tiny_config(k=16))

    def test_zero_epochs_keeps_init(self, tiny_data):
        res = run_training(tiny_data.split("train"), tiny_config(epochs=0))
        assert res.state.iteration == 0
        assert res.state.params.flat.tobytes() == init_state(tiny_config(), 16).params.flat.tobytes()
        assert isinstance(res.state.banks, MemoryBanks)


class TestHead:
    def test_head_gradient_finite_differences(self):
        rng = np.random.default_rng(0)
        emb, W, b = rng.standard_normal((6, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)
        y = rng.integers(0, 3, 6)
        _, dW, db, de = head_loss(emb, W, b, y)
        h = 1e-6
        for arr, grad in ((W, dW), (b, db), (emb, de)):
            for j in range(arr.size):
                flat = arr.reshape(-1)
                old = flat[j]
                flat[j] = old + h
                up = head_loss(emb, W, b, y)[0]
                flat[j] = old - h
                dn = head_loss(emb, W, b, y)[0]
                flat[j] = old
                num = (up - dn) / (2 * h)
                g = grad.reshape(-1)[j]
                assert abs(num - g) <= 1e-6 * max(abs(num), abs(g), 1e-4)

    def test_separable_embeddings_fit(self):
        rng = np.random.default_rng(1)
        labels = np.repeat(np.arange(4), 10)
        emb = np.eye(8)[labels * 2] + 0.05 * rng.standard_normal((40, 8))
        W, b = np.zeros((8, 4)), np.zeros(4)
        for _ in range(300):
            _, dW, db, _ = head_loss(emb, W, b, labels)
            W -= 1.0 * dW
            b -= 1.0 * db
        assert np.mean((emb @ W + b).argmax(1) == labels) == 1.0

    def test_random_labels_near_chance(self):
        rng = np.random.default_rng(2)
        emb = rng.standard_normal((400, 8))
        labels = rng.integers(0, 4, 400)
        W, b = np.zeros((8, 4)), np.zeros(4)
        for _ in range(200):
            _, dW, db, _ = head_loss(emb[:200], W, b, labels[:200])
            W -= 0.5 * dW
            b -= 0.5 * db
        acc = np.mean((emb[200:] @ W + b).argmax(1) == labels[200:])
        assert abs(acc - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / 200)


class TestFinetune:
    def test_runs_and_reports(self, tiny_data):
        from iic.encoder import init_params

        params = init_params(TINY_ENCODER, 0)
        cfg = FinetuneConfig(epochs=2, batch_size=4, clips_per_video=2)
        for mode in ("view1_rgb", "view2_modality"):
            res = finetune_classifier(params, tiny_data.split("train"), tiny_data.split("test"), mode, cfg)
            assert 0.0 <= res.test_accuracy <= 1.0 and 0.0 <= res.train_accuracy <= 1.0
            assert res.unseen_labels == []
            assert len(res.loss_history) == 2 * 4

    def test_unseen_label_reported(self, tiny_data):
        from iic.datasets import DatasetManifest
        from iic.encoder import init_params

        train = tiny_data.split("train")
        reduced = DatasetManifest(train.root, [r for r in train.records if r.class_label != 3])
        res = finetune_classifier(init_params(TINY_ENCODER, 0), reduced, tiny_data.split("test"), "view1_rgb",
                                  FinetuneConfig(epochs=1, batch_size=4, clips_per_video=1))
        assert res.unseen_labels == [3]

    def test_needs_two_labels(self, tiny_data):
        from iic.datasets import DatasetManifest
        from iic.encoder import init_params

        train = tiny_data.split("train")
        one = DatasetManifest(train.root, [r for r in train.records if r.class_label == 0])
        with pytest.raises(DataError):
            finetune_classifier(init_params(TINY_ENCODER, 0), one, tiny_data.split("test"))
