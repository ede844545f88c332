"""Synthetic moving-shape videos and IICC manifest handling.

Classes come in time-reversal pairs (up/down, left/right, grow/shrink,
clockwise/counter-clockwise). Both members of a pair draw appearance and
trajectory midpoints from the same distribution and differ only in the sign
of the motion, so a single frame carries no information about which member
of the pair a video belongs to.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .clips import RawWindow, read_clip_file, write_clip_file
from .errors import DataError

CLASS_NAMES = ("up", "down", "left", "right", "grow", "shrink", "clockwise", "counterclockwise")
SHAPES = ("square", "disc", "bar")


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    videos_per_class: int = 25
    frames_per_video: int = 12
    H: int = 32
    W: int = 32
    shapes: tuple = SHAPES
    speed_range: tuple = (0.8, 1.4)  # pixels per frame for translations
    scale_rate_range: tuple = (0.03, 0.05)  # relative size change per frame
    spin_range: tuple = (0.12, 0.22)  # radians per frame
    noise_sigma: float = 0.02
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        for name in ("speed_range", "scale_rate_range", "spin_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.num_classes < 2 or self.num_classes % 2 or self.num_classes > len(CLASS_NAMES):
            raise ValueError("num_classes must be an even number between 2 and 8")
        if self.videos_per_class < 2 or self.frames_per_video < 3:
            raise ValueError("need at least 2 videos per class and 3 frames per video")
        if min(self.H, self.W) < 8:
            raise ValueError("frames must be at least 8x8")
        if not set(self.shapes) <= set(SHAPES) or not self.shapes:
            raise ValueError(f"shapes must be drawn from {SHAPES}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in (0, 1)")


def paired_class(label: int) -> int:
    return label ^ 1


# -- rendering ----------------------------------------------------------------


@dataclass(frozen=True)
class VideoParams:
    label: int
    shape: str
    color: tuple
    background: tuple
    size: float  # half-extent in pixels at scale 1
    mid_y: float
    mid_x: float
    mid_scale: float
    mid_angle: float
    rate: float  # signed per-frame velocity of the class's motion variable


def _motion_variable(label: int) -> str:
    return ("y", "x", "scale", "angle")[label // 2]


def trajectory(p: VideoParams, n_frames: int) -> np.ndarray:
    """Per-frame (y, x, scale, angle), centred on the trajectory midpoint."""
    c = (n_frames - 1) / 2.0
    t = np.arange(n_frames) - c
    states = np.tile([p.mid_y, p.mid_x, p.mid_scale, p.mid_angle], (n_frames, 1)).astype(np.float64)
    col = ("y", "x", "scale", "angle").index(_motion_variable(p.label))
    sign = -1.0 if p.label % 2 == 0 else 1.0  # even member: up / left / grow / clockwise
    if col >= 2:  # grow and clockwise increase their variable
        sign = -sign
    states[:, col] += sign * p.rate * t
    return states


def render_frame(p: VideoParams, state, H: int, W: int) -> np.ndarray:
    y, x, scale, angle = state
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    dy, dx = yy - y, xx - x
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * dx + sa * dy) / scale
    v = (-sa * dx + ca * dy) / scale
    r = p.size
    if p.shape == "square":
        dist = np.maximum(np.abs(u), np.abs(v)) - r
    elif p.shape == "disc":
        dist = np.hypot(u, v) - r
    else:  # bar: long along u
        dist = np.maximum(np.abs(u) - 1.6 * r, np.abs(v) - 0.45 * r)
    alpha = np.clip(0.5 - dist * scale, 0.0, 1.0)[..., None]  # one-pixel anti-aliased edge
    bg = np.asarray(p.background)
    return bg + alpha * (np.asarray(p.color) - bg)


def render_video(p: VideoParams, n_frames: int, H: int, W: int) -> np.ndarray:
    states = trajectory(p, n_frames)
    return np.stack([render_frame(p, s, H, W) for s in states])


def reversed_params(p: VideoParams) -> VideoParams:
    """Parameters of the paired class whose video is the time reverse of p's."""
    return replace(p, label=paired_class(p.label))


def _centre(rng, extent: int, margin: float) -> float:
    # midpoint drawn from the central 40% of the frame, shrunk by half the travel;
    # frames too small for the travel get the exact centre
    lo, hi = extent * 0.3 + margin * 0.5, extent * 0.7 - margin * 0.5
    return float(rng.uniform(lo, hi)) if lo < hi else extent / 2.0


def sample_video_params(spec: SyntheticSpec, label: int, rng) -> VideoParams:
    var = _motion_variable(label)
    shapes = [s for s in spec.shapes if not (var == "angle" and s == "disc")] or ["square"]
    shape = shapes[rng.integers(len(shapes))]
    color = tuple(rng.uniform(0.55, 1.0, 3))
    background = tuple(rng.uniform(0.0, 0.3, 3))
    size = float(rng.uniform(0.1, 0.15) * min(spec.H, spec.W))
    F = spec.frames_per_video
    if var in ("y", "x"):
        rate = float(rng.uniform(*spec.speed_range))
    elif var == "scale":
        rate = float(rng.uniform(*spec.scale_rate_range))
    else:
        rate = float(rng.uniform(*spec.spin_range))
    span = rate * (F - 1) / 2.0 if var in ("y", "x") else 0.0
    margin_y = span if var == "y" else 0.0
    margin_x = span if var == "x" else 0.0
    mid_y = _centre(rng, spec.H, margin_y)
    mid_x = _centre(rng, spec.W, margin_x)
    return VideoParams(
        label=label,
        shape=shape,
        color=color,
        background=background,
        size=size,
        mid_y=mid_y,
        mid_x=mid_x,
        mid_scale=1.0,
        mid_angle=float(rng.uniform(0, np.pi)),
        rate=rate,
    )


def synthesize(spec: SyntheticSpec, video_id: int, label: int, noise: bool = True) -> np.ndarray:
    """One video, deterministic in (spec.seed, video_id)."""
    rng = np.random.default_rng([spec.seed, video_id])
    p = sample_video_params(spec, label, rng)
    frames = render_video(p, spec.frames_per_video, spec.H, spec.W)
    if noise and spec.noise_sigma > 0:
        frames = frames + rng.normal(0.0, spec.noise_sigma, frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


# -- manifests ----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    video_id: int
    class_label: int
    split: str = "train"
    view2_path: str | None = None  # optional externally supplied second-view frames


@dataclass
class DatasetManifest:
    root: Path
    records: list
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [r.video_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate video ids in manifest")

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> "DatasetManifest":
        sub = DatasetManifest(self.root, [r for r in self.records if r.split == name])
        sub._cache = self._cache
        return sub

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.class_label for r in self.records], dtype=np.int64)

    @property
    def video_ids(self) -> np.ndarray:
        return np.array([r.video_id for r in self.records], dtype=np.int64)

    def video(self, index: int) -> np.ndarray:
        return self._load(self.records[index].path)

    def external_view(self, index: int) -> np.ndarray | None:
        p = self.records[index].view2_path
        return None if p is None else self._load(p)

    def _load(self, rel: str) -> np.ndarray:
        if rel not in self._cache:
            self._cache[rel] = read_clip_file(self.root / rel).frames
        return self._cache[rel]


MANIFEST_NAME = "manifest.tsv"


def write_manifest(path, records) -> None:
    with open(path, "w") as fh:
        fh.write("# path\tvideo_id\tclass_label\tsplit\n")
        for r in records:
            cols = [r.path, str(r.video_id), str(r.class_label), r.split]
            if r.view2_path:
                cols.append(r.view2_path)
            fh.write("\t".join(cols) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"manifest {path} not found")
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 3:
            raise DataError(f"{path}:{n}: expected at least 3 tab-separated columns")
        try:
            vid, label = int(cols[1]), int(cols[2])
        except ValueError as exc:
            raise DataError(f"{path}:{n}: {exc}") from exc
        split = cols[3] if len(cols) > 3 else "train"
        if split not in ("train", "test"):
            raise DataError(f"{path}:{n}: unknown split {split!r}")
        records.append(ManifestRecord(cols[0], vid, label, split, cols[4] if len(cols) > 4 else None))
    return DatasetManifest(path.parent, records)


def generate_dataset(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write one IICC file per video plus manifest.tsv; 80/20 split per class."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=False, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    rng = np.random.default_rng([spec.seed, 2**31 - 1])
    n_test = max(1, int(round(spec.videos_per_class * spec.test_fraction)))
    records = []
    vid = 0
    for label in range(spec.num_classes):
        test_slots = set(rng.permutation(spec.videos_per_class)[:n_test].tolist())
        for j in range(spec.videos_per_class):
            rel = f"videos/{vid:05d}.iicc"
            records.append(ManifestRecord(rel, vid, label, "test" if j in test_slots else "train"))
            vid += 1
    (out / "videos").mkdir(exist_ok=True)
    for r in records:
        write_clip_file(out / r.path, synthesize(spec, r.video_id, r.class_label), r.class_label, r.video_id)
    write_manifest(out / MANIFEST_NAME, records)
    return DatasetManifest(out, records)


def directory_digest(path) -> str:
    """sha256 over every file's relative path and bytes, in sorted order."""
    h = hashlib.sha256()
    root = Path(path)
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def load_batch(manifest: DatasetManifest, indices, T: int, rng=None):
    """(T+1)-frame windows at random temporal offsets, plus the indices themselves."""
    rng = np.random.default_rng(rng)
    windows = []
    for i in indices:
        if not 0 <= i < len(manifest):
            raise DataError(f"index {i} out of range for {len(manifest)} videos")
        video = manifest.video(i)
        F = video.shape[0]
        if F < T + 1:
            raise DataError(f"video {manifest.records[i].video_id} has {F} frames, need {T + 1}")
        off = int(rng.integers(F - T))
        windows.append(window_at(manifest, i, off, T, video))
    return windows, list(indices)


def window_at(manifest, i, offset, T, video=None, ext=None) -> RawWindow:
    video = manifest.video(i) if video is None else video
    rec = manifest.records[i]
    ext = manifest.external_view(i) if ext is None else ext
    return RawWindow(
        video[offset : offset + T + 1],
        clip_id=offset,
        source_video_id=rec.video_id,
        external=None if ext is None else ext[offset : offset + T],
    )
