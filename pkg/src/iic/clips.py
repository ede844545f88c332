"""Clip data model, view construction and intra-negative generation.

Arrays are laid out T x H x W x C throughout. A raw window carries one more
frame than the clip length so that the residual view also has T frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

CLIP_MAGIC = b"IICCLIP1"
_HEADER = struct.Struct("<8s6I")


@dataclass(frozen=True)
class VideoClip:
    frames: np.ndarray
    clip_id: int = 0
    source_video_id: int = 0
    kind: str = "rgb"  # "rgb" frames live in [0, 1], "residual" in [-1, 1]

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4:
            raise DataError(f"clip must be T x H x W x C, got shape {f.shape}")
        t, h, w, c = f.shape
        if t < 2 or h < 4 or w < 4 or c not in (1, 3):
            raise DataError(f"invalid clip shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise DataError("clip contains non-finite values")
        lo = 0.0 if self.kind == "rgb" else -1.0  # residual and external views are signed
        if f.min() < lo - 1e-6 or f.max() > 1.0 + 1e-6:
            raise DataError(f"{self.kind} clip values outside [{lo}, 1]")
        object.__setattr__(self, "frames", f)

    @property
    def shape(self):
        return self.frames.shape

    def with_frames(self, frames: np.ndarray, kind: str | None = None) -> "VideoClip":
        return VideoClip(frames, self.clip_id, self.source_video_id, kind or self.kind)


@dataclass(frozen=True)
class RawWindow:
    """T+1 consecutive frames cut from one video."""

    frames: np.ndarray
    clip_id: int = 0
    source_video_id: int = 0
    external: np.ndarray | None = None  # T frames of an externally supplied second view

    @property
    def clip_length(self) -> int:
        return self.frames.shape[0] - 1


@dataclass(frozen=True)
class NegGenSpec:
    kind: str = "repeat"  # "repeat" | "shuffle"
    n_subclips: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("repeat", "shuffle"):
            raise ValueError(f"unknown intra-negative kind {self.kind!r}")
        if self.n_subclips < 1:
            raise ValueError("n_subclips must be positive")


def _check_window(window: RawWindow, T: int | None) -> int:
    n = window.frames.shape[0]
    T = n - 1 if T is None else T
    if T < 2 or n < T + 1:
        raise DataError(f"window of {n} frames is too short for a {T}-frame clip")
    return T


def make_view1(window: RawWindow, T: int | None = None) -> VideoClip:
    """Anchor RGB view: the first T frames of the window, unchanged."""
    T = _check_window(window, T)
    return VideoClip(window.frames[:T], window.clip_id, window.source_video_id, "rgb")


def make_residual_view(window: RawWindow, T: int | None = None) -> VideoClip:
    """Frame t of the output is window[t + 1] - window[t]."""
    T = _check_window(window, T)
    f = window.frames
    return VideoClip(f[1 : T + 1] - f[:T], window.clip_id, window.source_video_id, "residual")


def make_view2(window: RawWindow, kind: str = "residual", T: int | None = None) -> VideoClip:
    """Second view: the residual clip, or externally supplied frames (e.g. optical flow)."""
    if kind == "residual":
        return make_residual_view(window, T)
    if kind != "external":
        raise DataError(f"unknown second view {kind!r}")
    T = _check_window(window, T)
    if window.external is None or window.external.shape[0] < T:
        raise DataError("window carries no external second-view frames")
    return VideoClip(window.external[:T], window.clip_id, window.source_video_id, "external")


def intra_negative_repeat(clip: VideoClip, rng=None, frame_index: int | None = None) -> VideoClip:
    """Repeat one uniformly chosen frame T times."""
    T = clip.frames.shape[0]
    if T < 2:
        raise DataError("need at least two frames")
    k = int(np.random.default_rng(rng).integers(T)) if frame_index is None else frame_index
    if not 0 <= k < T:
        raise DataError(f"frame index {k} out of range for T={T}")
    out = np.broadcast_to(clip.frames[k], clip.frames.shape).copy()
    return clip.with_frames(out)


def draw_subclip_order(n_subclips: int, rng=None) -> np.ndarray:
    """Uniform non-identity permutation of range(n_subclips); identity draws are rejected."""
    if n_subclips < 2:
        raise DataError("shuffling needs at least two sub-clips")
    if not hasattr(rng, "permutation"):
        rng = np.random.default_rng(rng)
    ident = np.arange(n_subclips)
    while True:
        order = rng.permutation(n_subclips)
        if not np.array_equal(order, ident):
            return order


def intra_negative_shuffle(clip: VideoClip, spec: NegGenSpec, rng=None, order=None) -> VideoClip:
    """Split into equal contiguous sub-clips and reorder them by a non-identity permutation.

    The permutation is never the identity, so the output differs from the
    input whenever the sub-clips themselves differ.
    """
    T = clip.frames.shape[0]
    n = spec.n_subclips
    if n < 2:
        raise DataError("shuffling needs at least two sub-clips")
    if T % n:
        raise DataError(f"n_subclips={n} does not divide T={T}")
    if order is None:
        order = draw_subclip_order(n, rng)
    order = np.asarray(order)
    if sorted(order.tolist()) != list(range(n)):
        raise DataError(f"{order.tolist()} is not a permutation of {n} sub-clips")
    L = T // n
    idx = (order[:, None] * L + np.arange(L)[None, :]).ravel()
    return clip.with_frames(clip.frames[idx])


def make_intra_negative(clip: VideoClip, spec: NegGenSpec, rng=None) -> VideoClip:
    if spec.kind == "repeat":
        return intra_negative_repeat(clip, rng)
    return intra_negative_shuffle(clip, spec, rng)


def crop_offsets(H: int, W: int, out_h: int, out_w: int, rng=None) -> tuple[int, int]:
    if out_h > H or out_w > W or out_h < 1 or out_w < 1:
        raise DataError(f"crop {out_h}x{out_w} does not fit in {H}x{W}")
    rng = np.random.default_rng(rng)
    return int(rng.integers(H - out_h + 1)), int(rng.integers(W - out_w + 1))


def random_crop(clip: VideoClip, out_h: int, out_w: int, rng=None, offset=None) -> VideoClip:
    """Crop the same spatial window from every frame."""
    _, H, W, _ = clip.frames.shape
    if offset is None:
        offset = crop_offsets(H, W, out_h, out_w, rng)
    y, x = offset
    if y < 0 or x < 0 or y + out_h > H or x + out_w > W:
        raise DataError(f"crop {out_h}x{out_w} at {offset} does not fit in {H}x{W}")
    return clip.with_frames(clip.frames[:, y : y + out_h, x : x + out_w])


# -- IICC v1 clip files ------------------------------------------------------


@dataclass
class ClipFile:
    frames: np.ndarray  # float32, T x H x W x C
    class_label: int
    video_id: int


def write_clip_file(path, frames: np.ndarray, class_label: int, video_id: int) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 4:
        raise DataError("clip file frames must be T x H x W x C")
    T, H, W, C = frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CLIP_MAGIC, T, H, W, C, class_label, video_id))
        fh.write(frames.tobytes())


def read_clip_file(path) -> ClipFile:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, T, H, W, C, label, vid = _HEADER.unpack_from(data)
    if magic != CLIP_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    n = T * H * W * C
    if len(data) != _HEADER.size + 4 * n:
        raise DataError(f"{path}: expected {n} floats, file size is {len(data)}")
    frames = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(T, H, W, C)
    return ClipFile(frames.astype(np.float32), label, vid)
