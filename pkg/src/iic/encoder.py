"""Small spatio-temporal convolutional encoder with hand-written backward.

The network is a scaled-down R3D analog: per stage a 3D convolution and
ReLU, optional basic residual blocks (two convolutions plus identity
shortcut), then average pooling; after the last stage a global average pool,
a linear projection and L2 normalization.

All parameters live in one flat float64 vector so finite-difference probes
can perturb any single scalar. Computation runs in the dtype of the input
clips (float32 for training throughput, float64 for gradient checks).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DegenerateNormError, StaleCacheError

NORM_EPS = 1e-12
STREAMS = ("rgb", "res", "external")  # input kinds with their own centering statistics


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    stage_channels: tuple = (8, 16, 32)
    blocks_per_stage: tuple = (0, 0, 1)
    kernel_size: tuple = (3, 3, 3)
    embedding_dim: int = 64
    input_shape: tuple = (8, 32, 32)  # T, H, W
    standardize_input: bool = True  # zero-mean, unit-variance per clip before the first conv
    center_embedding: bool = True  # normalize each projection dimension (batch or running stats) before L2

    def __post_init__(self):
        for name in ("stage_channels", "blocks_per_stage", "kernel_size", "input_shape"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be at least 2")
        if not self.stage_channels:
            raise ValueError("need at least one stage")
        if len(self.blocks_per_stage) != len(self.stage_channels):
            raise ValueError("blocks_per_stage must have one entry per stage")
        if len(self.kernel_size) != 3 or any(k < 1 or k % 2 == 0 for k in self.kernel_size):
            raise ValueError("kernel_size must be three odd positive integers")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError("input_shape must be (T, H, W) with positive entries")

    @property
    def clip_shape(self) -> tuple:
        return (*self.input_shape, self.in_channels)

    def to_dict(self) -> dict:
        return asdict(self)


def _pool_factors(stage: int, n_stages: int, dims: tuple) -> tuple:
    # Every stage except the last halves H and W once; stages after the first
    # also halve T. A dimension is only halved when it is even.
    if stage == n_stages - 1:
        return (1, 1, 1)
    t, h, w = dims
    pt = 2 if stage > 0 and t >= 2 and t % 2 == 0 else 1
    ph = 2 if h >= 2 and h % 2 == 0 else 1
    pw = 2 if w >= 2 and w % 2 == 0 else 1
    return (pt, ph, pw)


# -- layers -------------------------------------------------------------------


def _conv_same(x, w):
    kt, kh, kw = w.shape[:3]
    B, T, H, W, _ = x.shape
    xp = np.pad(x, ((0, 0), (kt // 2,) * 2, (kh // 2,) * 2, (kw // 2,) * 2, (0, 0)))
    y = np.zeros((B, T, H, W, w.shape[-1]), dtype=x.dtype)
    for a in range(kt):
        for c in range(kh):
            for e in range(kw):
                y += xp[:, a : a + T, c : c + H, e : e + W, :] @ w[a, c, e]
    return y, xp


class Standardize:
    """Per-clip zero mean, unit variance; puts RGB and residual clips on one scale."""

    eps = 1e-5

    def param_shapes(self):
        return []

    def forward(self, P, x):
        mu = x.mean(axis=(1, 2, 3, 4), keepdims=True)
        inv = 1.0 / np.sqrt(x.var(axis=(1, 2, 3, 4), keepdims=True) + self.eps)
        xhat = (x - mu) * inv
        return xhat, (xhat, inv)

    def backward(self, P, G, dy, cache):
        if dy is None:  # nothing upstream needs an input gradient
            return None
        xhat, inv = cache
        ax = (1, 2, 3, 4)
        return inv * (dy - dy.mean(axis=ax, keepdims=True) - xhat * (dy * xhat).mean(axis=ax, keepdims=True))


class Conv3d:
    """Same-padded stride-1 3D convolution, channels last."""

    def __init__(self, name, cin, cout, kernel, input_grad=True):
        self.name, self.cin, self.cout, self.kernel = name, cin, cout, kernel
        self.input_grad = input_grad

    def param_shapes(self):
        return [(self.name + ".w", (*self.kernel, self.cin, self.cout)), (self.name + ".b", (self.cout,))]

    def forward(self, P, x):
        y, xp = _conv_same(x, P[self.name + ".w"])
        y += P[self.name + ".b"]
        return y, xp

    def backward(self, P, G, dy, xp):
        kt, kh, kw = self.kernel
        B, T, H, W, _ = dy.shape
        gw = G[self.name + ".w"]
        G[self.name + ".b"] += dy.sum(axis=(0, 1, 2, 3))
        dy2 = dy.reshape(-1, self.cout)
        for a in range(kt):
            for c in range(kh):
                for e in range(kw):
                    xs = xp[:, a : a + T, c : c + H, e : e + W, :].reshape(-1, self.cin)
                    gw[a, c, e] += xs.T @ dy2
        if not self.input_grad:
            return None
        # input gradient is a same-padded convolution with the flipped, transposed kernel
        wf = np.ascontiguousarray(P[self.name + ".w"][::-1, ::-1, ::-1].swapaxes(3, 4))
        return _conv_same(dy, wf)[0]


class ReLU:
    def param_shapes(self):
        return []

    def forward(self, P, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, P, G, dy, mask):
        return dy * mask


class AvgPool3d:
    def __init__(self, factors):
        self.factors = factors

    def param_shapes(self):
        return []

    def forward(self, P, x):
        pt, ph, pw = self.factors
        B, T, H, W, C = x.shape
        y = x.reshape(B, T // pt, pt, H // ph, ph, W // pw, pw, C).mean(axis=(2, 4, 6))
        return y, x.shape

    def backward(self, P, G, dy, shape):
        pt, ph, pw = self.factors
        B, T, H, W, C = shape
        d = dy[:, :, None, :, None, :, None, :] / (pt * ph * pw)
        return np.broadcast_to(d, (B, T // pt, pt, H // ph, ph, W // pw, pw, C)).reshape(shape)


class ResidualBlock:
    """conv-relu-conv with identity shortcut, followed by ReLU."""

    def __init__(self, name, channels, kernel):
        self.conv1 = Conv3d(name + ".conv1", channels, channels, kernel)
        self.conv2 = Conv3d(name + ".conv2", channels, channels, kernel)
        self.relu = ReLU()

    def param_shapes(self):
        return self.conv1.param_shapes() + self.conv2.param_shapes()

    def forward(self, P, x):
        h, c1 = self.conv1.forward(P, x)
        h, m1 = self.relu.forward(P, h)
        h, c2 = self.conv2.forward(P, h)
        y, m2 = self.relu.forward(P, h + x)
        return y, (c1, m1, c2, m2)

    def backward(self, P, G, dy, cache):
        c1, m1, c2, m2 = cache
        ds = dy * m2
        dh = self.conv2.backward(P, G, ds, c2)
        dh = dh * m1
        return self.conv1.backward(P, G, dh, c1) + ds


class GlobalAvgPool:
    def param_shapes(self):
        return []

    def forward(self, P, x):
        return x.mean(axis=(1, 2, 3)), x.shape

    def backward(self, P, G, dy, shape):
        B, T, H, W, C = shape
        return np.broadcast_to(dy[:, None, None, None, :] / (T * H * W), shape)


class Linear:
    def __init__(self, name, cin, cout):
        self.name, self.cin, self.cout = name, cin, cout

    def param_shapes(self):
        return [(self.name + ".w", (self.cin, self.cout)), (self.name + ".b", (self.cout,))]

    def forward(self, P, x):
        return x @ P[self.name + ".w"] + P[self.name + ".b"], x

    def backward(self, P, G, dy, x):
        G[self.name + ".w"] += x.T @ dy
        G[self.name + ".b"] += dy.sum(axis=0)
        return dy @ P[self.name + ".w"].T


class Center:
    """Batch normalization of the projection output, without affine terms.

    With batch statistics (training) the mean and variance come from the
    batch and the backward pass runs through them. Otherwise the stream's
    stored running statistics are used as constants.
    """

    eps = 1e-5

    def param_shapes(self):
        return []

    def forward(self, P, x):
        if P["center.batch"]:
            if x.shape[0] < 2:
                raise DataError("batch statistics need at least two clips")
            mean, var = x.mean(axis=0), x.var(axis=0)
        else:
            mean, var = P["center.stats"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        return xhat, (xhat, inv, P["center.batch"])

    def backward(self, P, G, dy, cache):
        xhat, inv, batch = cache
        if not batch:
            return dy * inv
        return inv * (dy - dy.mean(axis=0) - xhat * (dy * xhat).mean(axis=0))


class L2Normalize:
    def param_shapes(self):
        return []

    def forward(self, P, x):
        norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
        if np.any(norm <= NORM_EPS):
            raise DegenerateNormError("pre-normalization feature has (near) zero norm")
        y = x / norm
        return y, (y, norm)

    def backward(self, P, G, dy, cache):
        y, norm = cache
        return (dy - y * (dy * y).sum(axis=1, keepdims=True)) / norm


def build_layers(config: EncoderConfig) -> list:
    layers = [Standardize()] if config.standardize_input else []
    dims = config.input_shape
    cin = config.in_channels
    n = len(config.stage_channels)
    for s, (cout, nblocks) in enumerate(zip(config.stage_channels, config.blocks_per_stage)):
        layers.append(Conv3d(f"stage{s}.conv", cin, cout, config.kernel_size, input_grad=s > 0))
        layers.append(ReLU())
        for j in range(nblocks):
            layers.append(ResidualBlock(f"stage{s}.block{j}", cout, config.kernel_size))
        f = _pool_factors(s, n, dims)
        if f != (1, 1, 1):
            layers.append(AvgPool3d(f))
            dims = tuple(d // p for d, p in zip(dims, f))
        cin = cout
    layers += [GlobalAvgPool(), Linear("proj", cin, config.embedding_dim)]
    if config.center_embedding:
        layers.append(Center())
    layers.append(L2Normalize())
    return layers


def param_layout(config: EncoderConfig) -> dict:
    """name -> (offset, shape) in the flat parameter vector."""
    layout, off = {}, 0
    for layer in build_layers(config):
        for name, shape in layer.param_shapes():
            layout[name] = (off, shape)
            off += int(np.prod(shape))
    return layout


# -- parameters ---------------------------------------------------------------


@dataclass
class EncoderParams:
    config: EncoderConfig
    flat: np.ndarray
    version: int = 0
    stats: dict = field(default_factory=dict)  # stream -> (2, d) running mean and variance
    layout: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.layout = param_layout(self.config)
        d = self.config.embedding_dim
        for stream in STREAMS:
            self.stats.setdefault(stream, np.stack([np.zeros(d), np.ones(d)]))
        for stream, st in self.stats.items():
            if stream not in STREAMS or np.shape(st) != (2, d):
                raise DataError(f"bad centering statistics for stream {stream!r}")
        n = sum(int(np.prod(s)) for _, s in self.layout.values())
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (n,):
            raise DataError(f"expected {n} parameters, got {self.flat.shape}")

    @property
    def size(self) -> int:
        return self.flat.size

    def view(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        return self.flat[off : off + int(np.prod(shape))].reshape(shape)

    def slice_of(self, name: str) -> slice:
        off, shape = self.layout[name]
        return slice(off, off + int(np.prod(shape)))

    def views(self, flat=None, dtype=np.float64) -> dict:
        flat = self.flat if flat is None else flat
        out = {}
        for name, (off, shape) in self.layout.items():
            out[name] = flat[off : off + int(np.prod(shape))].reshape(shape).astype(dtype, copy=False)
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, self.flat.copy(), self.version,
                             {k: v.copy() for k, v in self.stats.items()})

    def mark_updated(self) -> None:
        self.version += 1


def fan_in(shape: tuple) -> int:
    return int(np.prod(shape[:-1]))


def init_params(config: EncoderConfig, seed: int = 0) -> EncoderParams:
    """He-normal weights (variance 2 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    layout = param_layout(config)
    flat = np.zeros(sum(int(np.prod(s)) for _, s in layout.values()))
    for name, (off, shape) in layout.items():
        if name.endswith(".w"):
            n = int(np.prod(shape))
            flat[off : off + n] = rng.normal(0.0, np.sqrt(2.0 / fan_in(shape)), n)
    return EncoderParams(config, flat)


# -- forward / backward -------------------------------------------------------


@dataclass
class ActivationCache:
    params_id: int
    version: int
    batched: bool
    dtype: np.dtype
    entries: list
    features: np.ndarray = None  # B x d projection output before centering


def _as_batch(config: EncoderConfig, clip):
    x = clip.frames if hasattr(clip, "frames") else np.asarray(clip)
    batched = x.ndim == 5
    if not batched:
        x = x[None]
    if x.shape[1:] != config.clip_shape:
        raise DataError(f"clip shape {x.shape[1:]} does not match encoder input {config.clip_shape}")
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return x, batched


def forward(params: EncoderParams, clip, need_cache: bool = True, stream: str = "rgb",
            batch_stats: bool = False):
    """Embed one clip (T,H,W,C) or a batch (B,T,H,W,C).

    The projection output is centered and scaled per dimension, by the batch's
    own statistics when batch_stats (training) or else by the running
    statistics of `stream` ("rgb" for view 1 and intra-negatives, "res" or
    "external" for view 2). Returns (embedding, cache); the embedding has unit
    L2 norm along its last axis. With need_cache=False the cache is None.
    """
    if stream not in STREAMS:
        raise ValueError(f"unknown stream {stream!r}")
    x, batched = _as_batch(params.config, clip)
    P = params.views(dtype=x.dtype)
    P["center.stats"] = params.stats[stream].astype(x.dtype)
    P["center.batch"] = batch_stats
    entries = []
    features = None
    for layer in build_layers(params.config):
        if isinstance(layer, Center):
            features = x.astype(np.float64)
        x, c = layer.forward(P, x)
        if need_cache:
            entries.append((layer, c))
    emb = x if batched else x[0]
    if not need_cache:
        return emb, None
    return emb, ActivationCache(id(params), params.version, batched, x.dtype, entries, features)


def embed(params: EncoderParams, clips, stream: str = "rgb", batch_stats: bool = False) -> np.ndarray:
    return forward(params, clips, need_cache=False, stream=stream, batch_stats=batch_stats)[0]


def update_stats(params: EncoderParams, stream: str, features, momentum: float = 1.0) -> None:
    """Move a stream's running statistics toward the mean and variance of
    `features` (B x d, before centering). momentum=1 replaces them outright."""
    z = np.asarray(features, dtype=np.float64)
    batch = np.stack([z.mean(axis=0), z.var(axis=0)])
    params.stats[stream] = (1.0 - momentum) * params.stats[stream] + momentum * batch


def projection_features(params: EncoderParams, clips) -> np.ndarray:
    """Projection output before centering, for setting statistics."""
    return forward(params, clips, need_cache=True, batch_stats=len(clips) > 1)[1].features


def backward(params: EncoderParams, cache: ActivationCache, grad_wrt_embedding) -> np.ndarray:
    """Gradient of a loss with respect to the flat parameter vector.

    grad_wrt_embedding is dL/d(embedding) with the same shape forward returned.
    """
    if cache is None:
        raise StaleCacheError("forward was run without a cache")
    if cache.params_id != id(params) or cache.version != params.version:
        raise StaleCacheError("activation cache does not belong to the current parameters")
    dy = np.asarray(grad_wrt_embedding, dtype=cache.dtype)
    if not cache.batched:
        dy = dy[None]
    P = params.views(dtype=cache.dtype)
    gflat = np.zeros(params.size, dtype=cache.dtype)
    G = params.views(flat=gflat, dtype=cache.dtype)
    for layer, c in reversed(cache.entries):
        dy = layer.backward(P, G, dy, c)
    return gflat.astype(np.float64)


# -- checkpoint file (IICWGT1) -----------------------------------------------

WEIGHT_MAGIC = b"IICWGT1"


def save_params(path, params: EncoderParams) -> None:
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<Q", params.size))
        fh.write(params.flat.astype("<f8").tobytes())
        # centering statistics trail the parameters: per stream, mean then variance
        for stream in STREAMS:
            fh.write(params.stats[stream].astype("<f8").tobytes())


def load_params(path) -> EncoderParams:
    data = Path(path).read_bytes()
    if data[:7] != WEIGHT_MAGIC:
        raise DataError(f"{path}: not an IICWGT1 file")
    try:
        (n_cfg,) = struct.unpack_from("<I", data, 7)
        cfg = EncoderConfig(**json.loads(data[11 : 11 + n_cfg]))
        (n,) = struct.unpack_from("<Q", data, 11 + n_cfg)
        off = 19 + n_cfg
        d = cfg.embedding_dim
        if len(data) != off + 8 * (n + len(STREAMS) * 2 * d):
            raise ValueError(f"size {len(data)} does not match {n} parameters")
        flat = np.frombuffer(data, dtype="<f8", count=n, offset=off)
        tail = np.frombuffer(data, dtype="<f8", offset=off + 8 * n).reshape(len(STREAMS), 2, d)
    except (struct.error, ValueError, TypeError) as exc:
        raise DataError(f"{path}: corrupt weight file ({exc})") from exc
    stats = {s: tail[j].astype(np.float64) for j, s in enumerate(STREAMS)}
    return EncoderParams(cfg, flat.astype(np.float64), stats=stats)
