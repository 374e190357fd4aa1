"""Three-layer convolutional denoiser with a hand-written backward pass.

Activations are NHWC; kernels are (kh, kw, cin, cout). Each 3x3 convolution
is nine shifted matrix products, which keeps the hot path in BLAS and makes
the reduction order fixed for a given input, so results are reproducible.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import DataError, NumericalError

WIDTH = 64
LAYER_SHAPES = (
    ("conv1.kernel", (3, 3, 1, WIDTH)), ("conv1.bias", (WIDTH,)),
    ("conv2.kernel", (3, 3, WIDTH, WIDTH)), ("conv2.bias", (WIDTH,)),
    ("conv3.kernel", (3, 3, WIDTH, 1)), ("conv3.bias", (1,)),
)
_MAGIC = b"CNN3W1\n"


@dataclass(eq=False)
class Cnn3Weights:
    """The six parameter arrays plus the normalization they were trained under."""

    params: list
    normalization: str | None = None
    lo: float | None = None
    hi: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.params) != len(LAYER_SHAPES):
            raise DataError(f"expected {len(LAYER_SHAPES)} parameter arrays, got {len(self.params)}")
        checked = []
        for p, (name, shape) in zip(self.params, LAYER_SHAPES):
            p = np.asarray(p)
            if p.shape != shape:
                raise DataError(f"{name}: expected shape {shape}, got {p.shape}")
            if not np.all(np.isfinite(p)):
                raise DataError(f"{name}: non-finite values")
            checked.append(p)
        self.params = checked

    @classmethod
    def zeros(cls, dtype=np.float32, **meta) -> "Cnn3Weights":
        return cls([np.zeros(s, dtype) for _, s in LAYER_SHAPES], **meta)

    @classmethod
    def he_init(cls, seed: int, dtype=np.float32, **meta) -> "Cnn3Weights":
        rng = np.random.default_rng(seed)
        params = []
        for name, shape in LAYER_SHAPES:
            if name.endswith("kernel"):
                fan_in = shape[0] * shape[1] * shape[2]
                params.append((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype))
            else:
                params.append(np.zeros(shape, dtype))
        return cls(params, **meta)

    @classmethod
    def identity(cls, dtype=np.float32, **meta) -> "Cnn3Weights":
        """Center taps on one channel: the identity map for non-negative inputs."""
        w = cls.zeros(dtype, **meta)
        w.params[0][1, 1, 0, 0] = 1.0
        w.params[2][1, 1, 0, 0] = 1.0
        w.params[4][1, 1, 0, 0] = 1.0
        return w

    def astype(self, dtype) -> "Cnn3Weights":
        return Cnn3Weights([p.astype(dtype) for p in self.params], self.normalization,
                           self.lo, self.hi, dict(self.extra))

    def sq_norm(self) -> float:
        return float(sum(np.sum(np.asarray(p, np.float64) ** 2) for p in self.params))

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def header(self) -> dict:
        return {"layers": [{"name": n, "shape": list(s)} for n, s in LAYER_SHAPES],
                "dtype": "<f4", "normalization": self.normalization, "lo": self.lo, "hi": self.hi,
                "extra": self.extra}


def save_weights(w: Cnn3Weights, path) -> Path:
    """Magic line, 4-byte header length, JSON header, then little-endian f32 payload."""
    path = Path(path)
    header = json.dumps(w.header(), sort_keys=True).encode()
    payload = b"".join(np.asarray(p, "<f4").tobytes() for p in w.params)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".")
    with os.fdopen(fd, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(header)) + header + payload)
    os.replace(tmp, path)
    return path


def load_weights(path) -> Cnn3Weights:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read weights {path}: {exc.strerror}") from None
    if not blob.startswith(_MAGIC) or len(blob) < len(_MAGIC) + 4:
        raise DataError(f"{path} is not a weights file")
    off = len(_MAGIC)
    (n,) = struct.unpack("<I", blob[off:off + 4])
    try:
        header = json.loads(blob[off + 4:off + 4 + n])
    except ValueError:
        raise DataError(f"{path}: malformed weights header") from None
    values = np.frombuffer(blob[off + 4 + n:], dtype="<f4")
    expected = sum(int(np.prod(s)) for _, s in LAYER_SHAPES)
    if values.size != expected:
        raise DataError(f"{path}: expected {expected} weights, found {values.size}")
    params, i = [], 0
    for _, shape in LAYER_SHAPES:
        k = int(np.prod(shape))
        params.append(values[i:i + k].reshape(shape).astype(np.float32))
        i += k
    return Cnn3Weights(params, header.get("normalization"), header.get("lo"), header.get("hi"),
                       header.get("extra") or {})


_CHUNK = 4096  # rows per im2col block; small enough to stay in cache


def _offsets(wp: int) -> list[int]:
    return [dy * wp + dx for dy in range(3) for dx in range(3)]


def _conv(xp: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-size 3x3 convolution of a zero-padded NHWC batch.

    On the flattened padded grid every tap is a constant row offset. Outputs
    are produced at every padded position (rows whose window would wrap are
    discarded when the valid (H, W) corner is cut out). Wide layers gather the
    nine taps into an im2col block and do one matrix product per block;
    the single-output layer multiplies first and sums shifted columns.
    """
    n, hp, wp, cin = xp.shape
    cout = k.shape[3]
    flat = xp.reshape(-1, cin)
    total = flat.shape[0]
    rows = total - (2 * wp + 2)
    offs = _offsets(wp)
    dtype = np.result_type(xp, k)
    out = np.zeros((total, cout), dtype=dtype)
    if cout < cin:
        y = flat @ k.transpose(2, 0, 1, 3).reshape(cin, 9 * cout)
        for t, off in enumerate(offs):
            out[:rows] += y[off:off + rows, t * cout:(t + 1) * cout]
    else:
        km = k.reshape(9 * cin, cout)
        cols = np.empty((min(_CHUNK, rows), 9 * cin), dtype=dtype)
        for s in range(0, rows, _CHUNK):
            e = min(s + _CHUNK, rows)
            c = cols[:e - s]
            for t, off in enumerate(offs):
                c[:, t * cin:(t + 1) * cin] = flat[s + off:e + off]
            np.matmul(c, km, out=out[s:e])
    out[:rows] += b
    return out.reshape(n, hp, wp, cout)[:, :hp - 2, :wp - 2, :]


def _conv_backward(xp: np.ndarray, k: np.ndarray, dout: np.ndarray, need_input: bool):
    n, hp, wp, cin = xp.shape
    cout = dout.shape[3]
    # upstream gradient on the padded grid, zero at the discarded positions
    grid = np.zeros((n, hp, wp, cout), dtype=dout.dtype)
    grid[:, :hp - 2, :wp - 2, :] = dout
    flat = xp.reshape(-1, cin)
    total = flat.shape[0]
    margin = 2 * wp + 2
    rows = total - margin
    d2 = grid.reshape(-1, cout)[:rows]
    offs = _offsets(wp)
    dtype = np.result_type(xp, dout)
    if cout < cin:
        dk = np.stack([flat[off:off + rows].T @ d2 for off in offs]).reshape(k.shape)
    else:
        dkm = np.zeros((9 * cin, cout), dtype=dtype)
        cols = np.empty((min(_CHUNK, rows), 9 * cin), dtype=dtype)
        for s in range(0, rows, _CHUNK):
            e = min(s + _CHUNK, rows)
            c = cols[:e - s]
            for t, off in enumerate(offs):
                c[:, t * cin:(t + 1) * cin] = flat[s + off:e + off]
            dkm += c.T @ d2[s:e]
        dk = dkm.reshape(k.shape)
    db = d2.sum(axis=0)
    if not need_input:
        return dk.astype(k.dtype, copy=False), db, None
    # input gradient: correlate the padded-grid gradient with the transposed taps
    dpad = np.zeros((rows + 2 * margin, cout), dtype=dtype)
    dpad[margin:margin + rows] = d2
    kt = k.transpose(0, 1, 3, 2).reshape(9 * cout, cin)
    dflat = np.empty((total, cin), dtype=dtype)
    cols = np.empty((min(_CHUNK, total), 9 * cout), dtype=dtype)
    for s in range(0, total, _CHUNK):
        e = min(s + _CHUNK, total)
        c = cols[:e - s]
        for t, off in enumerate(offs):
            c[:, t * cout:(t + 1) * cout] = dpad[s - off + margin:e - off + margin]
        np.matmul(c, kt, out=dflat[s:e])
    return dk.astype(k.dtype, copy=False), db, dflat.reshape(xp.shape)[:, 1:-1, 1:-1, :]


def _pad(a):
    return np.pad(a, ((0, 0), (1, 1), (1, 1), (0, 0)))


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise DataError(f"expected an image or a batch of images, got shape {x.shape}")
    if x.shape[1] < 3 or x.shape[2] < 3:
        raise DataError(f"input {x.shape[1:]} is smaller than the 3x3 kernel")
    return x, single


@dataclass
class _Cache:
    x0p: np.ndarray
    a1p: np.ndarray
    a2p: np.ndarray


def cnn3_forward(x, w: Cnn3Weights, return_cache: bool = False):
    """Apply the network to one image (H, W) or a batch (N, H, W); dtype follows the weights."""
    xb, single = _batch(x)
    dtype = w.params[0].dtype
    k1, b1, k2, b2, k3, b3 = w.params
    x0p = _pad(xb.astype(dtype, copy=False)[..., None])
    a1p = _pad(np.maximum(_conv(x0p, k1, b1), 0))
    a2p = _pad(np.maximum(_conv(a1p, k2, b2), 0))
    y = _conv(a2p, k3, b3)[..., 0]
    if single:
        y = y[0]
    if return_cache:
        return y, _Cache(x0p, a1p, a2p)
    return y


def cnn3_backward(cache: _Cache, w: Cnn3Weights, dy, need_input: bool = False):
    """Parameter gradients (and optionally the input gradient) for upstream ``dy``."""
    dy = np.asarray(dy, dtype=w.params[0].dtype)
    if dy.ndim == 2:
        dy = dy[None]
    k1, _, k2, _, k3, _ = w.params
    dk3, db3, da2 = _conv_backward(cache.a2p, k3, dy[..., None], True)
    da2 *= cache.a2p[:, 1:-1, 1:-1, :] > 0
    dk2, db2, da1 = _conv_backward(cache.a1p, k2, da2, True)
    da1 *= cache.a1p[:, 1:-1, 1:-1, :] > 0
    dk1, db1, dx = _conv_backward(cache.x0p, k1, da1, need_input)
    grads = [dk1, db1, dk2, db2, dk3, db3]
    if need_input:
        return grads, dx[..., 0]
    return grads


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    minibatch: int = 128
    epochs: int = 10
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DataError(f"learning rate must be positive, got {self.learning_rate}")
        if self.minibatch < 1:
            raise DataError(f"minibatch must be >= 1, got {self.minibatch}")
        if self.epochs < 1:
            raise DataError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise DataError(f"unknown optimizer {self.optimizer!r}")


class _Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        corr1 = 1.0 - c.beta1 ** self.t
        corr2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= (c.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + c.eps)).astype(p.dtype)


class _Momentum:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.vel = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        for p, g, v in zip(params, grads, self.vel):
            v *= self.cfg.momentum
            v -= self.cfg.learning_rate * g
            p += v


@dataclass
class TrainResult:
    weights: Cnn3Weights
    loss_trace: list
    weight_digests: list
    steps: int


def cnn3_train(patches, loss, train: TrainConfig, init: Cnn3Weights | None = None,
               progress=None, max_steps: int | None = None) -> TrainResult:
    """Minibatch training on a patch set (``.ld`` inputs, ``.nd`` targets).

    Everything runs in float32 with a fixed operation order, so two runs with
    the same config and seed produce identical bits. ``max_steps`` truncates
    training (the epoch in progress still appears in the trace).
    """
    from .losses import loss_and_grad

    x_all = np.asarray(patches.ld, dtype=np.float32)
    y_all = np.asarray(patches.nd, dtype=np.float32)
    if len(x_all) == 0:
        raise DataError("empty patch set")
    if x_all.shape != y_all.shape:
        raise DataError(f"input/target shape mismatch: {x_all.shape} vs {y_all.shape}")
    w = (init.astype(np.float32) if init is not None else Cnn3Weights.he_init(train.seed))
    opt = (_Adam if train.optimizer == "adam" else _Momentum)(w.params, train)
    rng = np.random.default_rng(train.seed + 1)
    trace, digests, steps = [], [], 0
    for epoch in range(1, train.epochs + 1):
        order = rng.permutation(len(x_all))
        total, count = 0.0, 0
        for start in range(0, len(order), train.minibatch):
            idx = order[start:start + train.minibatch]
            pred, cache = cnn3_forward(x_all[idx], w, return_cache=True)
            value, g_pred, g_w = loss_and_grad(loss, pred, y_all[idx], w)
            if not np.isfinite(value) or not np.all(np.isfinite(g_pred)):
                raise NumericalError(f"training diverged in epoch {epoch} (loss {value})")
            grads = cnn3_backward(cache, w, g_pred)
            if g_w is not None:
                grads = [g + gw.astype(g.dtype) for g, gw in zip(grads, g_w)]
            opt.step(w.params, grads)
            total += value * len(idx)
            count += len(idx)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        mean = total / count
        if not np.isfinite(mean) or not all(np.all(np.isfinite(p)) for p in w.params):
            raise NumericalError(f"training diverged in epoch {epoch} (loss {mean})")
        trace.append(mean)
        digests.append(w.digest())
        if progress is not None:
            progress(epoch, mean)
        if max_steps is not None and steps >= max_steps:
            break
    return TrainResult(w, trace, digests, steps)
