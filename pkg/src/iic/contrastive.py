"""Memory banks, negative sampling and the inter-intra contrastive loss.

Scores are cosine similarities divided by the temperature; the loss of one
direction is the negative log softmax probability of the positive among
1 positive + k other-view negatives + (k+1) intra-negatives. Bank rows are
constants: no gradient flows into them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError

ROLES = ("view1", "view2", "intra_neg")
DEFAULT_TAU = 0.07


@dataclass
class MemoryBank:
    rows: np.ndarray  # N x d, unit-norm rows; row i belongs to video i
    role: str = "view1"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown bank role {self.role!r}")
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise DataError("bank must be an N x d matrix")

    @property
    def size(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def gather(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise DataError(f"bank index out of range for a bank of {self.size} rows")
        return self.rows[idx]


@dataclass
class MemoryBanks:
    view1: MemoryBank
    view2: MemoryBank
    intra_neg: MemoryBank

    def __iter__(self):
        return iter((self.view1, self.view2, self.intra_neg))

    def copy(self) -> "MemoryBanks":
        return MemoryBanks(*(MemoryBank(b.rows.copy(), b.role) for b in self))


@dataclass(frozen=True)
class NegativeDraw:
    """Sampled negatives for one anchor.

    indices_view2 index the *other* view's bank (bank 2 when view 1 is the
    anchor, bank 1 in the symmetric direction) and never contain the
    positive index. indices_neg index the intra-negative bank and may.
    """

    positive: int
    indices_view2: np.ndarray
    indices_neg: np.ndarray

    @property
    def k(self) -> int:
        return len(self.indices_view2)


def _unit(x, axis=-1):
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


def critic(a, b, tau: float = DEFAULT_TAU) -> float:
    """exp(cos(a, b) / tau)."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    a, b = _unit(np.asarray(a, float)), _unit(np.asarray(b, float))
    return float(np.exp(np.clip(a @ b, -1.0, 1.0) / tau))


def sample_negatives(N: int, k: int, i: int, rng=None, intra_neg: bool = True) -> NegativeDraw:
    """k other-view indices uniform over {0..N-1} minus {i}; k+1 intra-negative
    indices uniform over {0..N-1}. Both with replacement."""
    if N < 2 or not 1 <= k <= N - 1:
        raise DataError(f"k={k} out of range for N={N}")
    if not 0 <= i < N:
        raise DataError(f"positive index {i} out of range for N={N}")
    rng = np.random.default_rng(rng)
    other = rng.integers(N - 1, size=k)
    other += other >= i
    neg = rng.integers(N, size=k + 1) if intra_neg else np.empty(0, dtype=np.int64)
    return NegativeDraw(i, other, neg)


@dataclass
class Weights:
    w1: np.ndarray
    w2: np.ndarray
    wneg: np.ndarray

    @property
    def w1_cat(self) -> np.ndarray:
        return np.concatenate([self.w1, self.wneg])

    @property
    def w2_cat(self) -> np.ndarray:
        return np.concatenate([self.w2, self.wneg])


def fetch_weights(banks: MemoryBanks, draw: NegativeDraw) -> Weights:
    """Gather the non-parametric weights for one draw."""
    return Weights(
        banks.view1.gather(draw.indices_view2),
        banks.view2.gather(draw.indices_view2),
        banks.intra_neg.gather(draw.indices_neg),
    )


def contrastive_loss(anchors, positives, negatives, tau: float = DEFAULT_TAU):
    """Batched one-direction loss.

    anchors, positives: (B, d); negatives: (B, n, d), treated as constants.
    Returns per-item losses (B,) and gradients with respect to anchors and
    positives. Max-score subtraction keeps the exponentials finite for any tau.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    neg = _unit(np.asarray(negatives, dtype=np.float64))
    na = np.linalg.norm(a, axis=1, keepdims=True)
    npos = np.linalg.norm(p, axis=1, keepdims=True)
    ah, ph = a / na, p / npos
    s_pos = (ah * ph).sum(axis=1) / tau
    s_neg = np.einsum("bd,bnd->bn", ah, neg) / tau
    s = np.concatenate([s_pos[:, None], s_neg], axis=1)
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    z = e.sum(axis=1, keepdims=True)
    loss = (np.log(z) + m)[:, 0] - s_pos
    if not np.all(np.isfinite(loss)):
        raise NumericError("non-finite contrastive loss")
    prob = e / z
    # dL/ds = softmax - onehot(positive)
    dpos = (prob[:, 0] - 1.0)[:, None] / tau
    g_ah = dpos * ph + np.einsum("bn,bnd->bd", prob[:, 1:], neg) / tau
    g_ph = dpos * ah
    g_a = (g_ah - ah * (g_ah * ah).sum(axis=1, keepdims=True)) / na
    g_p = (g_ph - ph * (g_ph * ph).sum(axis=1, keepdims=True)) / npos
    return loss, g_a, g_p


def loss_one_direction(anchor, positive, bank2: MemoryBank, bank_neg: MemoryBank,
                       draw: NegativeDraw, tau: float = DEFAULT_TAU):
    """Loss with `anchor` against its positive, the other-view bank rows and
    the intra-negative bank rows of `draw`. Returns (loss, grad_anchor, grad_positive)."""
    negs = np.concatenate([bank2.gather(draw.indices_view2), bank_neg.gather(draw.indices_neg)])
    loss, ga, gp = contrastive_loss(np.asarray(anchor)[None], np.asarray(positive)[None], negs[None], tau)
    return float(loss[0]), ga[0], gp[0]


def total_loss(v1, v2, banks: MemoryBanks, draws, tau: float = DEFAULT_TAU):
    """Symmetric loss: view-1-anchored plus view-2-anchored.

    draws = (draw anchored at v1, draw anchored at v2). Returns
    (loss, (grad_v1, grad_v2)).
    """
    d1, d2 = draws
    l1, ga1, gp2 = loss_one_direction(v1, v2, banks.view2, banks.intra_neg, d1, tau)
    l2, ga2, gp1 = loss_one_direction(v2, v1, banks.view1, banks.intra_neg, d2, tau)
    return l1 + l2, (ga1 + gp1, ga2 + gp2)


def bank_update(bank: MemoryBank, i: int, v, momentum: float = 0.0) -> None:
    """Overwrite row i with v; with momentum > 0 blend and renormalize instead."""
    if not 0 <= i < bank.size:
        raise DataError(f"row {i} out of range for a bank of {bank.size} rows")
    v = np.asarray(v, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise DataError("bank updates must be unit-norm")
    if momentum:
        v = momentum * bank.rows[i] + (1.0 - momentum) * v
        v = v / np.linalg.norm(v)
    bank.rows[i] = v


def init_banks(N: int, d: int, seed: int = 0) -> MemoryBanks:
    """Three banks with rows drawn uniformly from the unit sphere."""
    rng = np.random.default_rng(seed)
    return MemoryBanks(*(MemoryBank(_unit(rng.standard_normal((N, d))), role) for role in ROLES))


# -- bank checkpoint (IICBNK1) -----------------------------------------------

BANK_MAGIC = b"IICBNK1"
_BANK_HEADER = struct.Struct("<7sBII")


def write_bank(fh, bank: MemoryBank) -> None:
    fh.write(_BANK_HEADER.pack(BANK_MAGIC, ROLES.index(bank.role), bank.size, bank.dim))
    fh.write(np.ascontiguousarray(bank.rows, dtype="<f8").tobytes())


def save_banks(path, banks: MemoryBanks) -> None:
    """All three banks, one IICBNK1 record after another."""
    with open(path, "wb") as fh:
        for b in banks:
            write_bank(fh, b)


def load_banks(path) -> MemoryBanks:
    data = Path(path).read_bytes()
    off, out = 0, {}
    while off < len(data):
        if len(data) - off < _BANK_HEADER.size:
            raise DataError(f"{path}: truncated bank header")
        magic, role, N, d = _BANK_HEADER.unpack_from(data, off)
        if magic != BANK_MAGIC or role >= len(ROLES):
            raise DataError(f"{path}: bad bank record at byte {off}")
        off += _BANK_HEADER.size
        if len(data) - off < 8 * N * d:
            raise DataError(f"{path}: truncated bank rows")
        rows = np.frombuffer(data, dtype="<f8", count=N * d, offset=off).reshape(N, d)
        out[ROLES[role]] = MemoryBank(rows.astype(np.float64), ROLES[role])
        off += 8 * N * d
    if set(out) != set(ROLES):
        raise DataError(f"{path}: expected banks {ROLES}, found {sorted(out)}")
    return MemoryBanks(out["view1"], out["view2"], out["intra_neg"])
