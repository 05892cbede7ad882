"""Convolutional backbone with the lesion-map (MIL) and variance heads.

Layout of the network::

    images -> [conv3x3 - BN - ReLU (- maxpool)] x blocks -> M  (F x N x N)
    M -> 1x1 conv, linear                          -> L  (1 x N x N)
    L -> max  (or a dense layer in fc_direct mode) -> y_r
    M -> dense -> softplus + 1e-4                  -> sigma2

Activations run channels-last internally; the public tensors (``M``, ``L``)
are returned channels-first.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

POOL = "M"
HEAD_MODES = ("mil_max", "fc_direct")
SIGMA2_EPS = 1e-4
CHECKPOINT_MAGIC = b"DRGR"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    """Network shape.

    ``blocks`` follows the familiar VGG-style list: an int is a 3x3
    conv-BN-ReLU with that many output channels, ``"M"`` a 2x2 max-pool.
    """
    input_side: int = 128
    blocks: tuple = (16, POOL, 32, POOL, 64, POOL, 64, POOL, 128, POOL)
    in_channels: int = 3
    kernel_size: int = 3
    pool_size: int = 2
    head_mode: str = "mil_max"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if not any(b != POOL for b in self.blocks):
            raise ValueError("blocks must contain at least one convolution")

    @property
    def features(self) -> int:
        return [b for b in self.blocks if b != POOL][-1]

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(payload).hexdigest()


def full_scale_config() -> BackboneConfig:
    """640-pixel input with two convs per stage: N=20, stride 32, RF 156."""
    blocks = []
    for c in (32, 64, 128, 128, 256):
        blocks += [c, c, POOL]
    return BackboneConfig(input_side=640, blocks=tuple(blocks))


def geometry(config: BackboneConfig) -> tuple:
    """Return ``(N, stride, receptive_field)`` of the lesion map.

    Composes the per-layer kernel/stride/padding in closed form.  Padding is
    "same" (k // 2) for convolutions and zero for pools.
    """
    side, jump, rf = config.input_side, 1, 1
    k = config.kernel_size
    for b in config.blocks:
        if b == POOL:
            ksz, st, pad = config.pool_size, config.pool_size, 0
        else:
            ksz, st, pad = k, 1, k // 2
        side = (side + 2 * pad - ksz) // st + 1
        rf += (ksz - 1) * jump
        jump *= st
        if side < 1:
            raise ValueError(f"block spec {config.blocks} collapses a {config.input_side}px input to nothing")
    return side, jump, rf


def receptive_field_offset(config: BackboneConfig) -> int:
    """Input row of the first pixel seen by lesion-map row 0 (negative when it starts in the padding)."""
    jump, start = 1, 0
    for b in config.blocks:
        pad = 0 if b == POOL else config.kernel_size // 2
        st = config.pool_size if b == POOL else 1
        start -= pad * jump
        jump *= st
    return start


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class GradingNet:
    """Backbone plus heads.  Parameters are plain :class:`autodiff.Tensor` leaves."""

    def __init__(self, config: BackboneConfig | None = None, seed: int = 0):
        self.config = config or BackboneConfig()
        n, _, _ = geometry(self.config)
        if n < 1:
            raise ValueError("lesion map would be empty")
        self.n = n
        self.training = False
        rng = np.random.default_rng(seed)
        self._params: list = []   # (name, Tensor), declaration order
        self._buffers: list = []  # (name, ndarray)
        self.convs = []
        c_in = self.config.in_channels
        k = self.config.kernel_size
        for idx, b in enumerate(self.config.blocks):
            if b == POOL:
                continue
            w = self._param(f"conv{idx}.weight", _he(rng, (b, c_in, k, k), c_in * k * k))
            gamma = self._param(f"bn{idx}.gamma", np.ones(b))
            beta = self._param(f"bn{idx}.beta", np.zeros(b))
            rm = self._buffer(f"bn{idx}.running_mean", np.zeros(b))
            rv = self._buffer(f"bn{idx}.running_var", np.ones(b))
            self.convs.append((idx, w, gamma, beta, rm, rv))
            c_in = b
        f = self.config.features
        self.lesion_w = self._param("lesion.weight", rng.normal(0.0, np.sqrt(1.0 / f), size=(1, f, 1, 1)))
        self.lesion_b = self._param("lesion.bias", np.zeros(1))
        self.var_w = self._param("variance.weight", rng.normal(0.0, 0.1 / np.sqrt(f * n * n), size=(f * n * n, 1)))
        self.var_b = self._param("variance.bias", np.zeros(1))
        if self.config.head_mode == "fc_direct":
            self.fc_w = self._param("fc_grade.weight", rng.normal(0.0, 1.0 / (n * n), size=(n * n, 1)))
            self.fc_b = self._param("fc_grade.bias", np.zeros(1))

    def _param(self, name, value):
        t = ad.Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params.append((name, t))
        return t

    def _buffer(self, name, value):
        arr = np.asarray(value, dtype=np.float64)
        self._buffers.append((name, arr))
        return arr

    # -- bookkeeping ---------------------------------------------------------

    def parameters(self) -> list:
        return [t for _, t in self._params]

    def named_parameters(self) -> list:
        return list(self._params)

    def named_buffers(self) -> list:
        return list(self._buffers)

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    @property
    def dtype(self):
        return self.lesion_w.data.dtype.type

    def cast(self, dtype):
        """Convert parameters and buffers to ``dtype`` in place."""
        for _, t in self._params:
            t.data = t.data.astype(dtype)
            if t.grad is not None:
                t.grad = t.grad.astype(dtype)
        for i, (name, arr) in enumerate(self._buffers):
            self._buffers[i] = (name, arr.astype(dtype))
        lookup = dict(self._buffers)
        self.convs = [(idx, w, g, b, lookup[f"bn{idx}.running_mean"], lookup[f"bn{idx}.running_var"])
                      for idx, w, g, b, _, _ in self.convs]
        return self

    # -- forward -------------------------------------------------------------

    def features(self, images: ad.Tensor) -> ad.Tensor:
        """Backbone output in channels-last layout, [B, N, N, F]."""
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != cfg.in_channels or images.shape[2:] != (cfg.input_side,) * 2:
            raise ad.ShapeError(f"expected images of shape [B, {cfg.in_channels}, {cfg.input_side}, "
                                f"{cfg.input_side}], got {images.shape}")
        h = ad.Tensor(np.ascontiguousarray(images.data.transpose(0, 2, 3, 1))) if not ad._needs(images) \
            else ad.transpose(images, (0, 2, 3, 1))
        convs = iter(self.convs)
        blocks = list(cfg.blocks)
        i = 0
        while i < len(blocks):
            if blocks[i] == POOL:
                h = ad.maxpool2d(h, cfg.pool_size, channels_last=True)
                i += 1
                continue
            _, w, gamma, beta, rm, rv = next(convs)
            h = ad.conv2d(h, w, padding=cfg.kernel_size // 2, channels_last=True)
            h = ad.batchnorm2d(h, gamma, beta, rm, rv, self.training, channels_last=True)
            if i + 1 < len(blocks) and blocks[i + 1] == POOL:
                # ReLU and max-pool commute; pooling first touches a quarter of the values
                h = ad.relu(ad.maxpool2d(h, cfg.pool_size, channels_last=True))
                i += 2
            else:
                h = ad.relu(h)
                i += 1
        return h

    def forward(self, images) -> tuple:
        """Return ``(M, L, y_r, sigma2)``.

        ``M`` is [B, F, N, N], ``L`` is [B, 1, N, N], ``y_r`` and ``sigma2``
        are [B].  In ``mil_max`` mode ``y_r[b] == max(L[b])`` exactly.
        """
        images = ad.as_tensor(images)
        h = self.features(images)
        b, n, _, f = h.shape
        lesion = ad.conv2d(h, self.lesion_w, self.lesion_b, channels_last=True)  # [B, N, N, 1]
        if self.config.head_mode == "mil_max":
            y_r = ad.reduce_max(lesion)
        else:
            y_r = ad.reshape(ad.dense(ad.reshape(lesion, (b, n * n)), self.fc_w, self.fc_b), (b,))
        flat = ad.reshape(ad.transpose(h, (0, 3, 1, 2)), (b, f * n * n))
        sigma2 = ad.softplus(ad.reshape(ad.dense(flat, self.var_w, self.var_b), (b,))) + SIGMA2_EPS
        M = ad.transpose(h, (0, 3, 1, 2))
        L = ad.transpose(lesion, (0, 3, 1, 2))
        return M, L, y_r, sigma2

    __call__ = forward

    def predict_arrays(self, images: np.ndarray, batch_size: int = 32) -> dict:
        """Inference without graph bookkeeping; returns numpy arrays ``L``, ``y_r``, ``sigma2``."""
        was = self.training
        self.eval()
        outs = {"L": [], "y_r": [], "sigma2": []}
        try:
            with ad.compute_dtype(self.dtype):
                for start in range(0, len(images), batch_size):
                    _, L, y_r, s2 = self.forward(ad.Tensor(images[start:start + batch_size]))
                    outs["L"].append(L.data[:, 0].astype(np.float64))
                    outs["y_r"].append(y_r.data.astype(np.float64))
                    outs["sigma2"].append(s2.data.astype(np.float64))
        finally:
            self.train(was)
        return {k: np.concatenate(v) if v else np.empty(0) for k, v in outs.items()}

    # -- persistence -----------------------------------------------------------

    def state(self) -> list:
        return [(n, t.data) for n, t in self._params] + list(self._buffers)

    def save(self, path):
        """Write the versioned binary checkpoint.

        Header: b"DRGR", uint32 version, 64 hex chars of config digest,
        uint32 tensor count.  Each tensor: uint32 ndim, uint32 dims, then
        little-endian float64 values.
        """
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        buf.write(self.config.digest().encode("ascii"))
        state = self.state()
        buf.write(struct.pack("<I", len(state)))
        for _, arr in state:
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        Path(path).write_bytes(buf.getvalue())

    def load(self, path):
        raw = Path(path).read_bytes()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        if len(raw) < 76:
            raise CheckpointError(f"{path}: truncated checkpoint")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        digest = raw[8:72].decode("ascii")
        if digest != self.config.digest():
            raise CheckpointError(f"{path}: config digest {digest[:12]} does not match model config "
                                  f"{self.config.digest()[:12]}")
        (count,) = struct.unpack_from("<I", raw, 72)
        state = self.state()
        if count != len(state):
            raise CheckpointError(f"{path}: expected {len(state)} tensors, found {count}")
        off = 76
        loaded = []
        try:
            for name, arr in state:
                (ndim,) = struct.unpack_from("<I", raw, off)
                off += 4
                shape = struct.unpack_from(f"<{ndim}I", raw, off)
                off += 4 * ndim
                if tuple(shape) != arr.shape:
                    raise CheckpointError(f"{path}: tensor {name} has shape {shape}, expected {arr.shape}")
                n = int(np.prod(shape))
                loaded.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape))
                off += 8 * n
        except (struct.error, ValueError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"{path}: truncated checkpoint") from exc
        if off != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
        for (name, t), value in zip(self._params, loaded):
            t.data = value.astype(t.data.dtype)
        for (name, arr), value in zip(self._buffers, loaded[len(self._params):]):
            arr[...] = value
        return self

    @classmethod
    def from_checkpoint(cls, path, config: BackboneConfig):
        return cls(config).load(path)
