"""Per-video features, joint two-view features and kNN retrieval evaluation."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clips import make_view1, make_view2
from .datasets import DatasetManifest, window_at
from .encoder import EncoderParams, embed
from .errors import DataError

TOPK = (1, 5, 10, 20, 50)
SIM_DECIMALS = 12
VIEW_LABELS = {"rgb": "view1: rgb", "res": "view2: res", "joint": "joint"}


@dataclass(frozen=True)
class FeatureRecord:
    video_id: int
    class_label: int
    feature: np.ndarray


@dataclass
class FeatureSet:
    """Row-aligned video ids, labels and features."""

    video_ids: np.ndarray
    labels: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.video_ids = np.asarray(self.video_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or not len(self.video_ids) == len(self.labels) == len(self.features):
            raise DataError("feature set arrays are not row-aligned")

    def __len__(self):
        return len(self.video_ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def records(self) -> list:
        return [FeatureRecord(int(v), int(c), f) for v, c, f in zip(self.video_ids, self.labels, self.features)]

    @classmethod
    def from_records(cls, records) -> "FeatureSet":
        records = list(records)
        if not records:
            return cls(np.zeros(0), np.zeros(0), np.zeros((0, 0)))
        return cls([r.video_id for r in records], [r.class_label for r in records],
                   np.stack([r.feature for r in records]))


def clip_offsets(n_frames: int, T: int, clips_per_video: int) -> np.ndarray:
    """Evenly spaced window starts covering the video."""
    if n_frames < T + 1:
        raise DataError(f"video of {n_frames} frames is shorter than one {T + 1}-frame window")
    return np.linspace(0, n_frames - T - 1, clips_per_video).round().astype(int)


def extract_features(params: EncoderParams, dataset: DatasetManifest, view: str = "rgb",
                     clips_per_video: int = 4, dtype=np.float32) -> FeatureSet:
    """Mean of the embeddings of evenly spaced clips, re-normalized; one row per video.

    view is "rgb" (view 1), "res" (residual view 2) or "external".
    """
    if clips_per_video < 1:
        raise ValueError("clips_per_video must be at least 1")
    T = params.config.input_shape[0]
    stream = {"rgb": "rgb", "res": "res", "residual": "res", "external": "external"}.get(view)
    if stream is None:
        raise DataError(f"unknown view {view!r}")
    feats = []
    for i in range(len(dataset)):
        F = dataset.video(i).shape[0]
        clips = []
        for off in clip_offsets(F, T, clips_per_video):
            w = window_at(dataset, i, int(off), T)
            if view == "rgb":
                clips.append(make_view1(w, T).frames)
            elif view in ("res", "residual"):
                clips.append(make_view2(w, "residual", T).frames)
            else:
                clips.append(make_view2(w, "external", T).frames)
        e = embed(params, np.stack(clips).astype(dtype), stream).astype(np.float64).mean(axis=0)
        feats.append(e / np.linalg.norm(e))
    return FeatureSet(dataset.video_ids, dataset.labels, np.array(feats).reshape(len(feats), -1))


def joint_feature(f1: FeatureRecord, f2: FeatureRecord) -> FeatureRecord:
    if f1.video_id != f2.video_id:
        raise DataError(f"cannot join features of videos {f1.video_id} and {f2.video_id}")
    return FeatureRecord(f1.video_id, f1.class_label, np.concatenate([f1.feature, f2.feature]))


def joint_features(a: FeatureSet, b: FeatureSet) -> FeatureSet:
    if not np.array_equal(a.video_ids, b.video_ids):
        raise DataError("feature sets cover different videos")
    return FeatureSet(a.video_ids, a.labels, np.concatenate([a.features, b.features], axis=1))


@dataclass
class RetrievalReport:
    ranked_ids: np.ndarray  # Q x G gallery video ids, nearest first
    accuracies: dict  # k -> fraction of queries with a same-class hit in the top k

    def row(self) -> list:
        return [self.accuracies[k] for k in sorted(self.accuracies)]


def similarity(queries: np.ndarray, gallery: np.ndarray, metric: str = "cosine") -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if metric == "cosine":
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        g = g / np.linalg.norm(g, axis=1, keepdims=True)
        return q @ g.T
    if metric == "euclidean":
        d2 = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
        return -d2
    raise ValueError(f"unknown metric {metric!r}")


def knn_retrieve(queries: FeatureSet, gallery: FeatureSet, k_list=TOPK, metric: str = "cosine") -> RetrievalReport:
    """Exhaustive nearest-neighbour search; ties go to the lower gallery video id.

    Similarities are rounded to SIM_DECIMALS first so that values equal up to
    floating-point noise (summation order, BLAS kernel) rank as ties.
    """
    if len(gallery) == 0:
        raise DataError("gallery is empty")
    if queries.dim != gallery.dim:
        raise DataError(f"query dim {queries.dim} != gallery dim {gallery.dim}")
    sim = np.round(similarity(queries.features, gallery.features, metric), SIM_DECIMALS)
    ranked = np.empty(sim.shape, dtype=np.int64)
    for q in range(sim.shape[0]):
        ranked[q] = np.lexsort((gallery.video_ids, -sim[q]))
    hit = gallery.labels[ranked] == queries.labels[:, None]
    first_hit = np.where(hit.any(axis=1), hit.argmax(axis=1), np.iinfo(np.int64).max)
    acc = {int(k): float(np.mean(first_hit < k)) if len(queries) else 0.0 for k in k_list}
    return RetrievalReport(gallery.video_ids[ranked], acc)


def report_table(reports: dict, k_list=TOPK) -> str:
    """CSV with one row per labelled report; accuracies as percentages, one decimal."""
    buf = io.StringIO()
    buf.write("mode," + ",".join(f"top{k}" for k in k_list) + "\n")
    for label, rep in reports.items():
        buf.write(label + "," + ",".join(f"{100.0 * rep.accuracies[k]:.1f}" for k in k_list) + "\n")
    return buf.getvalue()


# -- feature files (IICFTR1) -------------------------------------------------

FEATURE_MAGIC = b"IICFTR1"


def save_features(path, fs: FeatureSet) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", len(fs), fs.dim))
        rec = np.dtype([("vid", "<u4"), ("label", "<u4"), ("f", "<f4", (fs.dim,))])
        arr = np.empty(len(fs), dtype=rec)
        arr["vid"], arr["label"], arr["f"] = fs.video_ids, fs.labels, fs.features
        fh.write(arr.tobytes())


def load_features(path) -> FeatureSet:
    data = Path(path).read_bytes()
    if data[:7] != FEATURE_MAGIC or len(data) < 15:
        raise DataError(f"{path}: not an IICFTR1 file")
    count, dim = struct.unpack_from("<II", data, 7)
    rec = np.dtype([("vid", "<u4"), ("label", "<u4"), ("f", "<f4", (dim,))])
    if len(data) != 15 + count * rec.itemsize:
        raise DataError(f"{path}: size does not match {count} records of dim {dim}")
    arr = np.frombuffer(data, dtype=rec, offset=15)
    return FeatureSet(arr["vid"].astype(np.int64), arr["label"].astype(np.int64),
                      arr["f"].reshape(count, dim).astype(np.float64))
