"""Siamese 3D ConvNet descriptor: forward, exact backward, contrastive training.

Everything is plain numpy. Activations are kept channel-last,
``(batch, x, y, z, channels)``, so a convolution is one im2col matmul.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

MAGIC = b"XSDN"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class WeightFileError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str  # "conv3d" | "maxpool3d"
    kernel: int = 3
    channels: int = 0
    padding: int = 0

    def __post_init__(self):
        if self.kind not in ("conv3d", "maxpool3d"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv3d" and self.channels <= 0:
            raise ValueError("conv3d layers need a positive channel count")


def conv(channels, kernel=3, padding=0):
    return Layer("conv3d", kernel, channels, padding)


def pool(kernel=2):
    return Layer("maxpool3d", kernel)


@dataclass(frozen=True)
class NetConfig:
    """Layer stack; the descriptor is the global average of the last conv's channels."""

    layers: tuple
    input_dim: int = 16
    in_channels: int = 1
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        convs = [l for l in self.layers if l.kind == "conv3d"]
        if not convs:
            raise ValueError("network needs at least one conv3d layer")
        if self.layers[-1].kind != "conv3d":
            raise ValueError("the last layer must be a conv3d layer")
        self.spatial_dims()

    @property
    def descriptor_dim(self) -> int:
        return self.layers[-1].channels

    @property
    def conv_layers(self):
        return [l for l in self.layers if l.kind == "conv3d"]

    def spatial_dims(self) -> list[int]:
        """Edge length after each layer; raises if it ever drops below 1."""
        d, dims = self.input_dim, []
        for layer in self.layers:
            if layer.kind == "conv3d":
                d = d + 2 * layer.padding - layer.kernel + 1
            else:
                d = d // layer.kernel
            if d < 1:
                raise ShapeError(f"input dim {self.input_dim} collapses to zero at layer {len(dims)}")
            dims.append(d)
        return dims

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetConfig":
        raw = json.loads(text)
        raw["layers"] = tuple(Layer(**l) for l in raw["layers"])
        return cls(**raw)


def desk_config(input_dim: int = 16) -> NetConfig:
    """9 conv + 1 pool, sized to train on a laptop CPU in minutes.

    16 -> 14 (valid conv), pool -> 7, valid convs -> 5 -> 3, then six padded
    convolutions on the 3^3 map. Nine valid convolutions cannot fit a 16^3
    input, hence the padding.
    """
    return NetConfig((
        conv(16), pool(), conv(16), conv(32),
        conv(32, padding=1), conv(32, padding=1), conv(64, padding=1), conv(64, padding=1),
        conv(64, padding=1), conv(64, padding=1),
    ), input_dim, note="desk: channel plan is an artifact choice")


def full_config(input_dim: int = 30) -> NetConfig:
    """All-64 channel variant of the same 9 conv + 1 pool stack."""
    return NetConfig((
        conv(64), conv(64), pool(),
        conv(64), conv(64), conv(64), conv(64),
        conv(64, padding=1), conv(64, padding=1), conv(64, padding=1),
    ), input_dim, note="full-scale widths")


@dataclass
class NetWeights:
    config: NetConfig
    kernels: list
    biases: list
    seed: int = 0

    @classmethod
    def init(cls, config: NetConfig, seed: int = 0, dtype=np.float32) -> "NetWeights":
        """Glorot-uniform kernels, zero biases."""
        rng = np.random.default_rng(seed)
        kernels, biases = [], []
        c_in = config.in_channels
        for layer in config.conv_layers:
            k3 = layer.kernel ** 3
            bound = np.sqrt(6.0 / (c_in * k3 + layer.channels * k3))
            w = rng.uniform(-bound, bound, size=(layer.channels, c_in, layer.kernel, layer.kernel, layer.kernel))
            kernels.append(w.astype(dtype))
            biases.append(np.zeros(layer.channels, dtype=dtype))
            c_in = layer.channels
        return cls(config, kernels, biases, seed)

    def params(self):
        for w, b in zip(self.kernels, self.biases):
            yield w
            yield b

    def astype(self, dtype) -> "NetWeights":
        return NetWeights(self.config, [w.astype(dtype) for w in self.kernels],
                          [b.astype(dtype) for b in self.biases], self.seed)

    def copy(self) -> "NetWeights":
        return self.astype(self.kernels[0].dtype)

    @property
    def dtype(self):
        return self.kernels[0].dtype


@dataclass
class Gradients:
    kernels: list
    biases: list

    def params(self):
        for w, b in zip(self.kernels, self.biases):
            yield w
            yield b


# -- layer primitives -----------------------------------------------------------

def _conv_forward(x, w, b, padding):
    if padding:
        p = padding
        x = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    k = w.shape[2]
    win = sliding_window_view(x, (k, k, k), axis=(1, 2, 3))  # (B, X, Y, Z, C, k, k, k)
    bsz, ox, oy, oz = win.shape[:4]
    cols = win.reshape(bsz * ox * oy * oz, -1)
    wm = w.reshape(w.shape[0], -1)
    out = cols @ wm.T + b
    return out.reshape(bsz, ox, oy, oz, w.shape[0]), (cols, x.shape)


def _conv_backward(dout, w, cache, padding, need_dx=True):
    cols, xshape = cache
    o = w.shape[0]
    k = w.shape[2]
    dm = dout.reshape(-1, o)
    dw = (dm.T @ cols).reshape(w.shape)
    db = dm.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dm @ w.reshape(o, -1)).reshape(*dout.shape[:4], xshape[4], k, k, k)
    dx = np.zeros(xshape, dtype=dout.dtype)
    ox, oy, oz = dout.shape[1:4]
    for a in range(k):
        for bb in range(k):
            for c in range(k):
                dx[:, a:a + ox, bb:bb + oy, c:c + oz, :] += dcols[..., a, bb, c]
    if padding:
        p = padding
        dx = dx[:, p:-p, p:-p, p:-p, :]
    return dx, dw, db


def _pool_forward(x, k):
    bsz, nx, ny, nz, c = x.shape
    mx, my, mz = nx // k, ny // k, nz // k
    x = x[:, :mx * k, :my * k, :mz * k, :]
    blocks = x.reshape(bsz, mx, k, my, k, mz, k, c).transpose(0, 1, 3, 5, 7, 2, 4, 6)
    blocks = blocks.reshape(bsz, mx, my, mz, c, k ** 3)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, (bsz, nx, ny, nz, c))


def _pool_backward(dout, k, cache):
    arg, shape = cache
    bsz, nx, ny, nz, c = shape
    mx, my, mz = dout.shape[1:4]
    blocks = np.zeros((bsz, mx, my, mz, c, k ** 3), dtype=dout.dtype)
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(bsz, mx, my, mz, c, k, k, k).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :mx * k, :my * k, :mz * k, :] = blocks.reshape(bsz, mx * k, my * k, mz * k, c)
    return dx


def _as_batch(grids, config: NetConfig, dtype):
    x = np.asarray(grids, dtype=dtype)
    d = config.input_dim
    if x.shape == (d, d, d):
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (d, d, d):
        raise ShapeError(f"expected grids of shape (n, {d}, {d}, {d}), got {x.shape}")
    return x[..., None]


def _forward_cached(weights: NetWeights, x):
    caches = []
    ci = 0
    for layer in weights.config.layers:
        if layer.kind == "conv3d":
            z, cache = _conv_forward(x, weights.kernels[ci], weights.biases[ci], layer.padding)
            x = np.maximum(z, 0)
            caches.append((cache, z > 0))
            ci += 1
        else:
            x, cache = _pool_forward(x, layer.kernel)
            caches.append(cache)
    spatial = x.shape[1] * x.shape[2] * x.shape[3]
    return x.mean(axis=(1, 2, 3)), (caches, x.shape, spatial)


def _backward_from(weights: NetWeights, cache, ddesc) -> Gradients:
    caches, shape, spatial = cache
    dx = np.broadcast_to((ddesc / spatial)[:, None, None, None, :], shape).astype(ddesc.dtype)
    dks = [None] * len(weights.kernels)
    dbs = [None] * len(weights.biases)
    ci = len(weights.kernels)
    for layer, c in zip(reversed(weights.config.layers), reversed(caches)):
        if layer.kind == "conv3d":
            ci -= 1
            conv_cache, mask = c
            dz = dx * mask
            dx, dks[ci], dbs[ci] = _conv_backward(dz, weights.kernels[ci], conv_cache,
                                                  layer.padding, need_dx=ci > 0)
        else:
            dx = _pool_backward(dx, layer.kernel, c)
    return Gradients(dks, dbs)


def forward_batch(weights: NetWeights, grids, chunk: int = 256) -> np.ndarray:
    """Descriptors for a stack of grids, shape (n, descriptor_dim)."""
    x = _as_batch(grids, weights.config, weights.dtype)
    out = [_forward_cached(weights, x[i:i + chunk])[0] for i in range(0, len(x), chunk)]
    if not out:
        return np.zeros((0, weights.config.descriptor_dim), dtype=weights.dtype)
    return np.concatenate(out)


def forward(weights: NetWeights, grid) -> np.ndarray:
    """Descriptor of a single grid (a ``VoxelGrid`` or a dim^3 array)."""
    values = getattr(grid, "values", grid)
    d = weights.config.input_dim
    if np.shape(values) != (d, d, d):
        raise ShapeError(f"grid shape {np.shape(values)} does not match input dim {d}")
    return forward_batch(weights, np.asarray(values)[None])[0]


# -- loss -------------------------------------------------------------------------

def descriptor_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"descriptor lengths differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def best_matches(desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """Index of the closest row of ``desc_b`` for each row of ``desc_a``; lowest index on ties."""
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2 * a @ b.T
    best = d2.min(axis=1)
    slack = 1e-9 * (1 + np.abs(best))
    out = np.empty(len(a), dtype=np.int64)
    # the expanded form is only a filter; ties are settled on exact differences
    for i in range(len(a)):
        cand = np.nonzero(d2[i] <= best[i] + slack[i])[0]
        exact = np.sum((b[cand] - a[i]) ** 2, axis=1)
        out[i] = cand[exact == exact.min()].min()
    return out


def contrastive_loss(d: float, positive: bool, margin: float = 1.0) -> tuple[float, float]:
    """(loss, dloss/dd): ``d^2`` for positives, ``max(0, m - d)^2`` for negatives."""
    if positive:
        return d * d, 2.0 * d
    gap = margin - d
    if gap <= 0:
        return 0.0, 0.0
    return gap * gap, -2.0 * gap


def _pair_loss_grads(fa, fb, positive, margin):
    """Vectorised loss and gradient w.r.t. both descriptors for a batch of pairs."""
    diff = fa - fb
    d = np.sqrt(np.sum(diff * diff, axis=1))
    pos = np.asarray(positive, dtype=bool)
    gap = np.maximum(margin - d, 0.0)
    loss = np.where(pos, d * d, gap * gap)
    # d/dfa of d^2 is 2 diff; of (m - d)^2 is -2 gap diff / d, taken as 0 at d == 0
    safe = np.where(d > 0, d, 1.0)
    scale = np.where(pos, 2.0, np.where(d > 0, -2.0 * gap / safe, 0.0))
    dfa = scale[:, None] * diff
    return loss, d, dfa, -dfa


def backward(weights: NetWeights, grid_a, grid_b, positive: bool, margin: float = 1.0):
    """Loss of one Siamese pair and its exact gradient w.r.t. every shared weight."""
    loss, grads, _, _ = _batch_loss_and_grads(weights, np.asarray(getattr(grid_a, "values", grid_a))[None],
                                           np.asarray(getattr(grid_b, "values", grid_b))[None],
                                           np.array([positive]), margin, reduce="sum")
    return loss, grads


def _batch_loss_and_grads(weights, grids_a, grids_b, positive, margin, reduce="mean"):
    n = len(grids_a)
    x = _as_batch(np.concatenate([grids_a, grids_b]), weights.config, weights.dtype)
    desc, cache = _forward_cached(weights, x)
    loss, d, dfa, dfb = _pair_loss_grads(desc[:n], desc[n:], positive, margin)
    norm = 1.0 / n if reduce == "mean" else 1.0
    ddesc = (np.concatenate([dfa, dfb]) * norm).astype(weights.dtype)
    grads = _backward_from(weights, cache, ddesc)
    total = float(loss.sum() * norm)
    return total, grads, d, loss


# -- training ----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    learning_rate: float = 0.01
    momentum: float = 0.0
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch size must be even and at least 2")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    pos_mean_dist: float
    neg_mean_dist: float


def train(weights: NetWeights, grids_a, grids_b, positive, cfg: TrainConfig = TrainConfig(),
          progress=None):
    """Mini-batch SGD on the contrastive loss.

    Every batch holds ``batch_size / 2`` positives and as many negatives (the
    last batch of an epoch may be smaller). The dataset must be balanced.
    Returns new weights and per-epoch statistics; the input weights are left
    untouched.
    """
    grids_a = np.asarray(grids_a)
    grids_b = np.asarray(grids_b)
    positive = np.asarray(positive, dtype=bool)
    pos_ids = np.nonzero(positive)[0]
    neg_ids = np.nonzero(~positive)[0]
    if len(pos_ids) != len(neg_ids):
        raise ValueError(f"unbalanced dataset: {len(pos_ids)} positive vs {len(neg_ids)} negative")
    if len(pos_ids) == 0:
        raise ValueError("empty training set")
    half = min(cfg.batch_size // 2, len(pos_ids))
    w = weights.copy()
    velocity = [np.zeros_like(p) for p in w.params()]
    rng = np.random.default_rng(cfg.seed)
    history = []
    n = len(positive)
    for epoch in range(cfg.epochs):
        pp = rng.permutation(pos_ids)
        nn = rng.permutation(neg_ids)
        # per-pair records, reduced in pair order so the epoch means do not
        # depend on the shuffle
        pair_loss = np.zeros(n)
        pair_dist = np.zeros(n)
        for start in range(0, len(pp), half):
            batch = np.concatenate([pp[start:start + half], nn[start:start + half]])
            _, grads, d, loss = _batch_loss_and_grads(w, grids_a[batch], grids_b[batch],
                                                      positive[batch], cfg.margin)
            pair_loss[batch] = loss
            pair_dist[batch] = d
            if cfg.learning_rate:
                for p, g, v in zip(w.params(), grads.params(), velocity):
                    v *= cfg.momentum
                    v -= cfg.learning_rate * g
                    p += v
        stats = EpochStats(epoch, float(pair_loss.mean()), float(pair_dist[positive].mean()),
                           float(pair_dist[~positive].mean()))
        history.append(stats)
        log.info("epoch %d loss %.5f pos %.4f neg %.4f", epoch, stats.mean_loss,
                 stats.pos_mean_dist, stats.neg_mean_dist)
        if progress:
            progress(stats)
    return w, history


def save_history(history, path):
    lines = ["epoch,mean_loss,pos_mean_dist,neg_mean_dist"]
    lines += [f"{h.epoch},{h.mean_loss!r},{h.pos_mean_dist!r},{h.neg_mean_dist!r}" for h in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


# -- persistence ---------------------------------------------------------------------

def save_weights(weights: NetWeights, path):
    """``XSDN`` magic, u32 version, u32 header length, JSON header, float32 LE payload."""
    header = json.dumps({"config": json.loads(weights.config.to_json()), "seed": weights.seed},
                        sort_keys=True).encode("ascii")
    payload = b"".join(np.asarray(p, dtype="<f4").tobytes() for p in weights.params())
    Path(path).write_bytes(MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + payload)


def load_weights(path, expected: NetConfig | None = None) -> NetWeights:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise WeightFileError(f"{path}: not a weight file")
    if len(raw) < 12:
        raise WeightFileError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    if len(raw) < 12 + hlen:
        raise WeightFileError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen])
        config = NetConfig.from_json(json.dumps(header["config"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFileError(f"{path}: bad header ({exc})") from None
    if expected is not None and expected != config:
        raise WeightFileError(f"{path}: stored network config does not match the expected one")
    template = NetWeights.init(config, 0)
    offset = 12 + hlen
    arrays = []
    for p in template.params():
        nbytes = p.size * 4
        if offset + nbytes > len(raw):
            raise WeightFileError(f"{path}: truncated weight payload")
        arrays.append(np.frombuffer(raw, dtype="<f4", count=p.size, offset=offset)
                      .reshape(p.shape).astype(np.float32))
        offset += nbytes
    if offset != len(raw):
        raise WeightFileError(f"{path}: {len(raw) - offset} trailing bytes")
    return NetWeights(config, arrays[0::2], arrays[1::2], int(header.get("seed", 0)))
