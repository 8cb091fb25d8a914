"""Desk-scale convolutional encoder with exact analytic gradients.

Maps a (252, 256) log-magnitude view to a unit-norm embedding. The stack is
a handful of 3x3 stride-2 conv+ReLU layers, global average pooling, one
linear layer, then L2 normalization. Forward and backward are plain numpy
(im2col + GEMM); gradients are exact reverse-mode derivatives, verified
against finite differences in the tests.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EncoderConfig",
    "Parameters",
    "init_parameters",
    "standardize",
    "forward",
    "backward",
    "embed",
    "l2_normalize",
    "config_digest",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

CHECKPOINT_MAGIC = b"SIDM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    embedding_dim: int = 128
    channels: tuple[int, ...] = (16, 32, 64, 128)
    kernel: int = 3
    stride: int = 2
    input_shape: tuple[int, int] = (252, 256)
    dtype: str = "float32"

    def __post_init__(self):
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if not self.channels:
            raise ValueError("need at least one conv layer")
        if self.kernel != 3 or self.stride != 2:
            raise ValueError("only 3x3 stride-2 convolutions are supported")
        shape = self.input_shape
        for _ in self.channels:
            shape = tuple((s - 1) // 2 + 1 for s in shape)
        if min(shape) < 1:
            raise ValueError("too many conv layers for the input size")


def _conv_out(size: int) -> int:
    # kernel 3, stride 2, pad 1
    return (size - 1) // 2 + 1


def _layout(config: EncoderConfig):
    """Name -> (offset, shape) map over the flat parameter vector."""
    layout = {}
    offset = 0
    c_in = 1
    for i, c_out in enumerate(config.channels):
        w_shape = (c_in, config.kernel, config.kernel, c_out)
        layout[f"conv{i}_w"] = (offset, w_shape)
        offset += int(np.prod(w_shape))
        layout[f"conv{i}_b"] = (offset, (c_out,))
        offset += c_out
        c_in = c_out
    layout["fc_w"] = (offset, (c_in, config.embedding_dim))
    offset += c_in * config.embedding_dim
    layout["fc_b"] = (offset, (config.embedding_dim,))
    offset += config.embedding_dim
    return layout, offset


@dataclass
class Parameters:
    """All trainable weights as one flat vector plus a layout map."""

    vector: np.ndarray
    layout: dict[str, tuple[int, tuple[int, ...]]]

    def __post_init__(self):
        covered = sum(int(np.prod(shape)) for _, shape in self.layout.values())
        if covered != self.vector.shape[0]:
            raise ValueError("layout does not cover the parameter vector exactly")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("parameters contain non-finite values")

    def get(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        return self.vector[offset:offset + int(np.prod(shape))].reshape(shape)

    @property
    def count(self) -> int:
        return self.vector.shape[0]


def init_parameters(config: EncoderConfig, rng: np.random.Generator) -> Parameters:
    """He-normal conv weights, smaller linear head, zero biases."""
    layout, total = _layout(config)
    vec = np.zeros(total, dtype=config.dtype)
    params = Parameters(vector=vec, layout=layout)
    for name, (offset, shape) in layout.items():
        block = vec[offset:offset + int(np.prod(shape))]
        if name.endswith("_b"):
            continue
        if name.startswith("conv"):
            fan_in = shape[0] * shape[1] * shape[2]
            std = np.sqrt(2.0 / fan_in)
        else:
            std = np.sqrt(1.0 / shape[0])
        block[:] = rng.standard_normal(block.shape[0]).astype(config.dtype) * std
    return params


def standardize(views: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-view standardization: zero mean, unit std over each view."""
    axes = tuple(range(views.ndim - 2, views.ndim))
    mean = views.mean(axis=axes, keepdims=True)
    std = views.std(axis=axes, keepdims=True)
    return (views - mean) / (std + eps)


def l2_normalize(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    return v / (norms + eps)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, Ho, Wo, C*9) patches for 3x3 stride-2 pad-1."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:h + 1, 1:w + 1] = x
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    windows = windows[:, ::2, ::2]  # (B, Ho, Wo, C, 3, 3)
    ho, wo = windows.shape[1], windows.shape[2]
    return np.ascontiguousarray(windows).reshape(b, ho, wo, c * 9)


def forward(
    views: np.ndarray,
    params: Parameters,
    config: EncoderConfig = EncoderConfig(),
    want_cache: bool = False,
    check_finite: bool = True,
):
    """Embeddings for a batch of standardized views.

    Accepts (H, W) or (B, H, W); returns (m,) or (B, m) unit-norm rows.
    With ``want_cache=True`` also returns the cache needed by `backward`.
    """
    single = views.ndim == 2
    x = views[None] if single else views
    if x.shape[1:] != config.input_shape:
        raise ValueError(f"expected views of shape {config.input_shape}")
    x = x.astype(config.dtype, copy=False)[..., None]  # (B, H, W, 1)

    cache = {"cols": [], "acts": []} if want_cache else None
    for i, c_out in enumerate(config.channels):
        cols = _im2col(x)
        b, ho, wo, ck = cols.shape
        w_mat = params.get(f"conv{i}_w").reshape(ck, c_out)
        pre = cols.reshape(b * ho * wo, ck) @ w_mat + params.get(f"conv{i}_b")
        act = np.maximum(pre, 0.0).reshape(b, ho, wo, c_out)
        if check_finite and not np.all(np.isfinite(act)):
            raise FloatingPointError(f"non-finite activations in conv layer {i}")
        if want_cache:
            cache["cols"].append(cols)
            cache["acts"].append(act)
        x = act

    pooled = x.mean(axis=(1, 2))  # (B, C)
    v = pooled @ params.get("fc_w") + params.get("fc_b")
    if check_finite and not np.all(np.isfinite(v)):
        raise FloatingPointError("non-finite activations in linear head")
    norms = np.sqrt((v * v).sum(axis=1, keepdims=True)) + np.asarray(
        1e-12, dtype=config.dtype
    )
    z = v / norms

    if want_cache:
        cache.update({"pooled": pooled, "v": v, "z": z, "norms": norms,
                      "spatial": x.shape[1:3]})
        return (z[0], cache) if single else (z, cache)
    return z[0] if single else z


def backward(
    grad_z: np.ndarray,
    cache: dict,
    params: Parameters,
    config: EncoderConfig = EncoderConfig(),
) -> np.ndarray:
    """Gradient of sum(grad_z * z) w.r.t. the flat parameter vector."""
    single = grad_z.ndim == 1
    g = (grad_z[None] if single else grad_z).astype(config.dtype, copy=False)
    # the cache always stores batch-shaped arrays, even for single views
    z, norms = cache["z"], cache["norms"]

    grad = np.zeros_like(params.vector)

    def out(name):
        offset, shape = params.layout[name]
        return grad[offset:offset + int(np.prod(shape))].reshape(shape)

    # through L2 normalization: d(v/|v|) projects onto the tangent space
    gv = (g - (g * z).sum(axis=1, keepdims=True) * z) / norms

    out("fc_w")[:] = cache["pooled"].T @ gv
    out("fc_b")[:] = gv.sum(axis=0)
    gx = gv @ params.get("fc_w").T  # (B, C)

    ho, wo = cache["spatial"]
    b = gx.shape[0]
    gx = np.broadcast_to(
        gx[:, None, None, :] / (ho * wo), (b, ho, wo, gx.shape[1])
    ).astype(config.dtype)

    for i in reversed(range(len(config.channels))):
        act = cache["acts"][i]
        cols = cache["cols"][i]
        gpre = gx * (act > 0)
        b, ho, wo, c_out = gpre.shape
        ck = cols.shape[3]
        g_flat = gpre.reshape(b * ho * wo, c_out)
        out(f"conv{i}_w")[:] = (
            cols.reshape(b * ho * wo, ck).T @ g_flat
        ).reshape(params.layout[f"conv{i}_w"][1])
        out(f"conv{i}_b")[:] = g_flat.sum(axis=0)
        if i == 0:
            break  # input gradient not needed
        w = params.get(f"conv{i}_w")  # (Cin, 3, 3, Cout)
        c_in = w.shape[0]
        prev = cache["acts"][i - 1]
        h_in, w_in = prev.shape[1], prev.shape[2]
        gxp = np.zeros((b, h_in + 2, w_in + 2, c_in), dtype=config.dtype)
        # one GEMM for all nine taps, then nine strided scatter-adds
        w_all = np.ascontiguousarray(
            w.transpose(3, 1, 2, 0).reshape(c_out, 9 * c_in)
        )
        contrib = (g_flat @ w_all).reshape(b, ho, wo, 3, 3, c_in)
        for u in range(3):
            for v_ in range(3):
                gxp[:, u:u + 2 * ho:2, v_:v_ + 2 * wo:2, :] += contrib[
                    :, :, :, u, v_, :
                ]
        gx = gxp[:, 1:h_in + 1, 1:w_in + 1, :]
    return grad


def embed(
    views: np.ndarray,
    params: Parameters,
    config: EncoderConfig = EncoderConfig(),
    check_finite: bool = True,
) -> np.ndarray:
    """Standardize then encode; the inference-path entry point."""
    return forward(standardize(views), params, config, check_finite=check_finite)


# ---------------------------------------------------------------------------
# checkpoint format: magic "SIDM", version u32, config digest (32 bytes),
# parameter count u64, then f32 parameters little-endian in layout order


class CheckpointError(Exception):
    pass


def config_digest(config: EncoderConfig) -> bytes:
    blob = json.dumps(
        {
            "embedding_dim": config.embedding_dim,
            "channels": list(config.channels),
            "kernel": config.kernel,
            "stride": config.stride,
            "input_shape": list(config.input_shape),
        },
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).digest()


def save_checkpoint(path, params: Parameters, config: EncoderConfig) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(config_digest(config))
        f.write(struct.pack("<Q", params.count))
        f.write(params.vector.astype("<f4").tobytes())


def load_checkpoint(path, config: EncoderConfig) -> Parameters:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported version {version}")
        digest = f.read(32)
        if digest != config_digest(config):
            raise CheckpointError("config digest mismatch")
        (count,) = struct.unpack("<Q", f.read(8))
        layout, total = _layout(config)
        if count != total:
            raise CheckpointError(f"parameter count {count} != expected {total}")
        data = np.frombuffer(f.read(count * 4), dtype="<f4").astype(config.dtype)
        if data.shape[0] != count:
            raise CheckpointError("truncated checkpoint")
    return Parameters(vector=data, layout=layout)
