"""Inter-intra contrastive training loop and supervised fine-tuning.

One iteration: build the RGB and second views, derive intra-negatives from
the RGB view, embed all three streams with the single shared encoder, score
against previous-iteration memory-bank rows, take an SGD step on the
symmetric loss, then overwrite bank rows with the fresh embeddings.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np

from . import config as cfgfile
from .clips import NegGenSpec, crop_offsets, make_intra_negative, make_view1, make_view2, random_crop
from .contrastive import MemoryBanks, bank_update, contrastive_loss, init_banks, sample_negatives, save_banks
from .datasets import DatasetManifest, load_batch, window_at
from .encoder import (EncoderConfig, EncoderParams, backward, embed, forward, init_params, projection_features,
                      save_params, update_stats)
from .errors import DataError, NumericError

log = logging.getLogger(__name__)

FULL_SCALE_MILESTONES = (45, 90, 125, 160)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 30
    base_lr: float = 0.01
    lr_milestones: tuple = (15, 23)
    lr_decay: float = 0.1
    k: int = 64
    tau: float = 0.07
    intra_neg: bool = True
    neg_kind: str = "repeat"
    n_subclips: int = 4
    view2: str = "residual"
    crop: tuple = ()  # (h, w); empty means the encoder input size, i.e. no crop
    momentum: float = 0.9
    weight_decay: float = 5e-4
    bank_momentum: float = 0.0
    bank_init: str = "encoder"  # "encoder": one pass of the initial encoder; "random": unit sphere
    positive: str = "bank"  # "bank": other view's bank row i (a constant); "fresh": current batch embedding
    stat_momentum: float = 0.1  # per-step update rate of the encoder's centering statistics
    dtype: str = "float32"
    checkpoint_every: int = 0
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        object.__setattr__(self, "crop", tuple(int(c) for c in self.crop))
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if not 0.0 < self.lr_decay < 1.0:
            raise ValueError("lr_decay must be in (0, 1)")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ValueError("lr_milestones must be strictly increasing")
        if self.batch_size < 1 or self.epochs < 0 or self.k < 1 or self.tau <= 0:
            raise ValueError("batch_size, k and tau must be positive, epochs non-negative")
        if self.view2 not in ("residual", "external"):
            raise ValueError("view2 must be 'residual' or 'external'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.positive not in ("bank", "fresh"):
            raise ValueError("positive must be 'bank' or 'fresh'")
        if self.bank_init not in ("encoder", "random"):
            raise ValueError("bank_init must be 'encoder' or 'random'")
        if self.crop and len(self.crop) != 2:
            raise ValueError("crop must be empty or (h, w)")
        if self.encoder.center_embedding and self.batch_size < 2:
            raise ValueError("batch statistics need batch_size >= 2")
        NegGenSpec(self.neg_kind, self.n_subclips)

    @property
    def neg_gen(self) -> NegGenSpec:
        return NegGenSpec(self.neg_kind, self.n_subclips, self.seed)

    @property
    def view2_stream(self) -> str:
        return "res" if self.view2 == "residual" else "external"

    @property
    def clip_length(self) -> int:
        return self.encoder.input_shape[0]


def full_scale_schedule(**overrides) -> TrainConfig:
    """Optimizer settings reported for the full-scale runs (240 epochs, batch 16, k=1024)."""
    kw = dict(batch_size=16, epochs=240, base_lr=0.01, lr_milestones=FULL_SCALE_MILESTONES, lr_decay=0.1, k=1024)
    kw.update(overrides)
    return TrainConfig(**kw)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """base_lr * decay ** (milestones reached); a milestone counts from its own epoch on.

    Evaluated in decimal so that e.g. 0.01 * 0.1**2 is exactly 1e-4.
    """
    n = sum(1 for m in config.lr_milestones if epoch >= m)
    return float(Decimal(repr(config.base_lr)) * Decimal(repr(config.lr_decay)) ** n)


def sgd_step(params: EncoderParams, grads, velocity, lr, momentum=0.9, weight_decay=0.0) -> None:
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v (in place)."""
    velocity *= momentum
    velocity += grads
    if weight_decay:
        velocity += weight_decay * params.flat
    params.flat -= lr * velocity
    params.mark_updated()


@dataclass
class TrainState:
    params: EncoderParams
    banks: MemoryBanks
    velocity: np.ndarray
    epoch: int = 0
    iteration: int = 0
    loss_history: list = field(default_factory=list)  # (epoch, iteration, loss)

    @property
    def N(self) -> int:
        return self.banks.view1.size


def init_state(config: TrainConfig, N: int) -> TrainState:
    ss = np.random.SeedSequence(config.seed)
    p_seed, b_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    params = init_params(config.encoder, p_seed)
    banks = init_banks(N, config.encoder.embedding_dim, b_seed)
    return TrainState(params, banks, np.zeros_like(params.flat))


def _views(windows, config: TrainConfig, rng):
    """Stack view-1, view-2 and intra-negative clips for a batch of windows."""
    T = config.clip_length
    dtype = np.dtype(config.dtype)
    x1, x2, xn = [], [], []
    for w in windows:
        v1 = make_view1(w, T)
        v2 = make_view2(w, config.view2, T)
        if config.crop:
            _, H, W, _ = v1.shape
            off = crop_offsets(H, W, *config.crop, rng)  # shared by both views
            v1 = random_crop(v1, *config.crop, offset=off)
            v2 = random_crop(v2, *config.crop, offset=off)
        x1.append(v1.frames)
        x2.append(v2.frames)
        if config.intra_neg:
            xn.append(make_intra_negative(v1, config.neg_gen, rng).frames)
    stack = lambda xs: np.stack(xs).astype(dtype) if xs else None
    return stack(x1), stack(x2), stack(xn)


def train_iteration(state: TrainState, batch, config: TrainConfig, rng, lr: float | None = None) -> float:
    """One step of the training loop on (windows, indices). Returns the mean batch loss."""
    windows, indices = batch
    idx = np.asarray(indices, dtype=np.int64)
    N = state.N
    if idx.size == 0 or idx.min() < 0 or idx.max() >= N:
        raise DataError(f"batch indices out of range for {N} bank rows")
    lr = lr_at(state.epoch, config) if lr is None else lr
    x1, x2, xn = _views(windows, config, rng)

    s2 = config.view2_stream
    e1, c1 = forward(state.params, x1, stream="rgb", batch_stats=True)
    e2, c2 = forward(state.params, x2, stream=s2, batch_stats=True)
    # intra-negatives enter the loss only through the bank, so no cache is kept
    en = embed(state.params, xn, "rgb", batch_stats=True) if xn is not None else None

    draws1 = [sample_negatives(N, config.k, i, rng, config.intra_neg) for i in idx]
    draws2 = [sample_negatives(N, config.k, i, rng, config.intra_neg) for i in idx]
    b = state.banks
    negs1 = np.stack([np.concatenate([b.view2.rows[d.indices_view2], b.intra_neg.rows[d.indices_neg]]) for d in draws1])
    negs2 = np.stack([np.concatenate([b.view1.rows[d.indices_view2], b.intra_neg.rows[d.indices_neg]]) for d in draws2])

    if config.positive == "bank":
        # the positive is a stored weight like the negatives; gradient reaches the anchors only
        l1, ga1, _ = contrastive_loss(e1, b.view2.rows[idx], negs1, config.tau)
        l2, ga2, _ = contrastive_loss(e2, b.view1.rows[idx], negs2, config.tau)
        g1, g2 = ga1, ga2
    else:
        l1, ga1, gp2 = contrastive_loss(e1, e2, negs1, config.tau)
        l2, ga2, gp1 = contrastive_loss(e2, e1, negs2, config.tau)
        g1, g2 = ga1 + gp1, ga2 + gp2
    B = len(idx)
    loss = float(np.mean(l1 + l2))
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss at epoch {state.epoch}, iteration {state.iteration}")

    grad = backward(state.params, c1, g1 / B) + backward(state.params, c2, g2 / B)
    sgd_step(state.params, grad, state.velocity, lr, config.momentum, config.weight_decay)
    if c1.features is not None:
        update_stats(state.params, "rgb", c1.features, config.stat_momentum)
        update_stats(state.params, s2, c2.features, config.stat_momentum)

    for j, i in enumerate(idx):
        bank_update(b.view1, i, e1[j], config.bank_momentum)
        bank_update(b.view2, i, e2[j], config.bank_momentum)
        if en is not None:
            bank_update(b.intra_neg, i, en[j], config.bank_momentum)
    state.iteration += 1
    state.loss_history.append((state.epoch, state.iteration, loss))
    return loss


def epoch_batches(order, batch_size: int) -> list:
    """Consecutive chunks of `order`; a trailing single index joins the previous chunk."""
    order = list(order)
    chunks = [order[s : s + batch_size] for s in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        tail = chunks.pop()
        chunks[-1] += tail
    return chunks


def fill_banks(state: TrainState, dataset: DatasetManifest, config: TrainConfig, data_rng, aug_rng) -> None:
    """Overwrite every bank row with the current encoder's embedding of a random window.

    The encoder's centering statistics are first set from the same windows.
    """
    T = config.clip_length
    s2 = config.view2_stream
    batches = []
    for idx in epoch_batches(range(len(dataset)), config.batch_size):
        windows, _ = load_batch(dataset, idx, T, data_rng)
        batches.append((idx, _views(windows, config, aug_rng)))
    if config.encoder.center_embedding:
        for stream, k in (("rgb", 0), (s2, 1)):
            z = np.concatenate([projection_features(state.params, views[k]) for _, views in batches])
            update_stats(state.params, stream, z, momentum=1.0)
    for idx, (x1, x2, xn) in batches:
        streams = [(state.banks.view1, x1, "rgb"), (state.banks.view2, x2, s2)]
        if xn is not None:
            streams.append((state.banks.intra_neg, xn, "rgb"))
        for bank, x, stream in streams:
            e = embed(state.params, x, stream, batch_stats=len(idx) > 1)
            for j, i in enumerate(idx):
                bank_update(bank, i, e[j])


@dataclass
class TrainResult:
    state: TrainState
    loss_curve: list  # (epoch, iteration, loss)

    def epoch_means(self) -> list:
        by_epoch: dict = {}
        for ep, _, loss in self.loss_curve:
            by_epoch.setdefault(ep, []).append(loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def write_loss_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "iteration", "loss"])
        for ep, it, loss in rows:
            w.writerow([ep, it, repr(float(loss))])


def save_checkpoint(state: TrainState, out_dir) -> None:
    out = Path(out_dir)
    save_params(out / "encoder.iicwgt", state.params)
    save_banks(out / "banks.iicbnk", state.banks)


def run_training(dataset: DatasetManifest, config: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    """Full training run over `dataset` (bank row i is dataset record i)."""
    N = len(dataset)
    if N == 0:
        raise DataError("dataset is empty")
    if config.k > N - 1:
        raise DataError(f"k={config.k} needs at least {config.k + 1} videos, dataset has {N}")
    state = init_state(config, N)
    order_rng, data_rng, aug_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(5)[2:])
    out = Path(out_dir) if out_dir is not None else None
    T = config.clip_length
    if config.bank_init == "encoder":
        fill_banks(state, dataset, config, data_rng, aug_rng)
    for epoch in range(config.epochs):
        state.epoch = epoch
        lr = lr_at(epoch, config)
        for idx in epoch_batches(order_rng.permutation(N).tolist(), config.batch_size):
            train_iteration(state, load_batch(dataset, idx, T, data_rng), config, aug_rng, lr)
        if progress:
            progress(epoch, state)
        log.info("epoch %d lr %.2g loss %.4f", epoch, lr, np.mean([r[2] for r in state.loss_history if r[0] == epoch]))
        if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(state, out)
    state.epoch = config.epochs
    if out is not None:
        save_checkpoint(state, out)
        write_loss_csv(out / "train_loss.csv", state.loss_history)
        cfgfile.save(config, out / "train_config.txt")
    return TrainResult(state, list(state.loss_history))


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.001
    head_lr: float = 0.0  # 0 means same as lr
    momentum: float = 0.9
    weight_decay: float = 5e-4
    freeze_encoder: bool = False
    clips_per_video: int = 4
    dtype: str = "float32"
    seed: int = 0


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


def head_loss(emb, W, b, labels):
    """Cross-entropy of a linear head; returns (loss, dW, db, d_emb)."""
    loss, dlogits = softmax_cross_entropy(emb @ W + b, labels)
    return loss, emb.T @ dlogits, dlogits.sum(axis=0), dlogits @ W.T


@dataclass
class FinetuneResult:
    mode: str
    train_accuracy: float
    test_accuracy: float
    unseen_labels: list
    loss_history: list


def _modality_clip(window, mode: str, T: int):
    """(clip frames, encoder stream) for a fine-tuning mode."""
    if mode == "view1_rgb":
        return make_view1(window, T).frames, "rgb"
    if mode == "view2_modality":
        if window.external is not None:
            return make_view2(window, "external", T).frames, "external"
        return make_view2(window, "residual", T).frames, "res"
    raise DataError(f"unknown fine-tuning mode {mode!r}")


def _modality_batch(windows, mode, T, dtype):
    clips = [_modality_clip(w, mode, T) for w in windows]
    return np.stack([c for c, _ in clips]).astype(dtype), clips[0][1]


def _video_logits(params, W, b, manifest, mode, T, cpv, dtype):
    out = []
    for i in range(len(manifest)):
        F = manifest.video(i).shape[0]
        if F < T + 1:
            raise DataError(f"video {manifest.records[i].video_id} shorter than one window")
        offs = np.unique(np.linspace(0, F - T - 1, cpv).round().astype(int))
        x, stream = _modality_batch([window_at(manifest, i, o, T) for o in offs], mode, T, dtype)
        out.append((embed(params, x, stream) @ W + b).mean(axis=0))
    return np.array(out)


def finetune_classifier(params: EncoderParams, train: DatasetManifest, test: DatasetManifest,
                        mode: str = "view2_modality", config: FinetuneConfig = FinetuneConfig()) -> FinetuneResult:
    """Attach a linear head to the embedding and train with cross-entropy.

    The encoder is updated too unless config.freeze_encoder. Accuracy on
    `test` averages logits over clips_per_video evenly spaced clips.
    """
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise DataError("fine-tuning needs at least two labels")
    if mode not in ("view1_rgb", "view2_modality"):
        raise DataError(f"unknown fine-tuning mode {mode!r}")
    remap = {c: j for j, c in enumerate(classes)}
    params = params.copy()
    T = params.config.input_shape[0]
    d = params.config.embedding_dim
    rng = np.random.default_rng(config.seed)
    W = rng.normal(0.0, 0.01, (d, len(classes)))
    b = np.zeros(len(classes))
    vW, vb, vp = np.zeros_like(W), np.zeros_like(b), np.zeros_like(params.flat)
    head_lr = config.head_lr or config.lr
    dtype = np.dtype(config.dtype)
    y_all = np.array([remap[c] for c in train.labels])
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        for s in range(0, len(train), config.batch_size):
            idx = order[s : s + config.batch_size]
            windows, _ = load_batch(train, idx.tolist(), T, rng)
            x, stream = _modality_batch(windows, mode, T, dtype)
            emb, cache = forward(params, x, need_cache=not config.freeze_encoder, stream=stream)
            loss, dW, db, demb = head_loss(emb.astype(np.float64), W, b, y_all[idx])
            history.append((epoch, loss))
            vW = config.momentum * vW + dW + config.weight_decay * W
            vb = config.momentum * vb + db
            W -= head_lr * vW
            b -= head_lr * vb
            if not config.freeze_encoder:
                g = backward(params, cache, demb)
                sgd_step(params, g, vp, config.lr, config.momentum, config.weight_decay)
    train_pred = _video_logits(params, W, b, train, mode, T, config.clips_per_video, dtype).argmax(axis=1)
    train_acc = float(np.mean(classes[train_pred] == train.labels))
    unseen = sorted(set(test.labels.tolist()) - set(classes.tolist()))
    if unseen:
        log.warning("test labels %s never seen in training; they count as errors", unseen)
    test_pred = _video_logits(params, W, b, test, mode, T, config.clips_per_video, dtype).argmax(axis=1)
    test_acc = float(np.mean(classes[test_pred] == test.labels)) if len(test) else float("nan")
    return FinetuneResult(mode, train_acc, test_acc, unseen, history)
