"""Minimal deterministic CNN encoder: conv, batchnorm, ELU, max-pool, dense.

Everything is float32, inference-only, and pure: a loaded Model never mutates,
so it is safe to share across tasks. Convolution is cross-correlation (the ML
convention, no kernel flip). The portable weight file is self-describing, so
the layer stack is data, not code.

Weight file layout (little-endian):
    magic "OODW", u32 version=1, u32 layer_count
    per layer: u8 type tag, then per parameter array (fixed per-type order):
        u32 rank, u32 dims[rank], raw float32 values (row-major)
    per-type parameter order:
        0 Conv2D:      kernels (out,in,kh,kw), biases (out,), stride (1,), padding (1,)
        1 BatchNorm:   gamma, beta, running_mean, running_var (channels,), eps (1,)
        2 ELU:         alpha (1,)
        3 MaxPool2x2:  no arrays
        4 Flatten:     no arrays
        5 Dense:       weight (out,in), bias (out,)
A sidecar manifest at <path>.manifest records input_shape=C,H,W and latent_dim.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"OODW"
VERSION = 1

TAG_CONV = 0
TAG_BATCHNORM = 1
TAG_ELU = 2
TAG_MAXPOOL = 3
TAG_FLATTEN = 4
TAG_DENSE = 5


class WeightFormatError(Exception):
    pass


class ShapeError(Exception):
    pass


class NonFiniteError(Exception):
    pass


@dataclass(frozen=True)
class LatentStats:
    """Per-dimension Gaussian posterior parameters from the encoder."""

    mu: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape or self.mu.ndim != 1:
            raise ShapeError(
                f"mu/logvar must be equal-length vectors, got {self.mu.shape} vs {self.logvar.shape}"
            )
        if not (np.isfinite(self.mu).all() and np.isfinite(self.logvar).all()):
            raise NonFiniteError("latent statistics contain non-finite values")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class Conv2D:
    kernels: np.ndarray  # (out, in, kh, kw)
    biases: np.ndarray  # (out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.biases.ndim != 1:
            raise ShapeError("Conv2D expects rank-4 kernels and rank-1 biases")
        if self.kernels.shape[0] != self.biases.shape[0]:
            raise ShapeError("kernel/bias output-channel mismatch")
        if self.stride < 1:
            raise ShapeError("stride must be >= 1")
        if self.padding < 0:
            raise ShapeError("padding must be >= 0")


@dataclass(frozen=True)
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        n = self.gamma.shape[0]
        for arr in (self.beta, self.mean, self.var):
            if arr.shape != (n,):
                raise ShapeError("BatchNorm parameter vectors must share one length")
        if self.eps <= 0:
            raise ShapeError("BatchNorm eps must be > 0")
        if (self.var < 0).any():
            raise ShapeError("negative running variance")


@dataclass(frozen=True)
class ELU:
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ShapeError("ELU alpha must be > 0")


@dataclass(frozen=True)
class MaxPool2x2:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("Dense expects rank-2 weight and rank-1 bias")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError("Dense weight/bias output mismatch")


Layer = Conv2D | BatchNorm | ELU | MaxPool2x2 | Flatten | Dense


def conv2d(x: np.ndarray, layer: Conv2D) -> np.ndarray:
    """Cross-correlate (C,H,W) input with (O,C,kh,kw) kernels, zero padding."""
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects (C,H,W), got shape {x.shape}")
    out_ch, in_ch, kh, kw = layer.kernels.shape
    if x.shape[0] != in_ch:
        raise ShapeError(f"channel mismatch: input {x.shape[0]}, kernels {in_ch}")
    p, s = layer.padding, layer.stride
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    h_out = (xp.shape[1] - kh) // s + 1
    w_out = (xp.shape[2] - kw) // s + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"non-positive conv output {h_out}x{w_out}")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::s, ::s]  # (C, h_out, w_out, kh, kw)
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, in_ch * kh * kw)
    flat_k = layer.kernels.reshape(out_ch, in_ch * kh * kw)
    out = cols.astype(np.float32) @ flat_k.T.astype(np.float32)
    out = out.T.reshape(out_ch, h_out, w_out) + layer.biases[:, None, None]
    return out.astype(np.float32)


def batchnorm(x: np.ndarray, layer: BatchNorm) -> np.ndarray:
    """Per-channel inference-mode normalization with running statistics."""
    if x.shape[0] != layer.gamma.shape[0]:
        raise ShapeError(f"channel mismatch: input {x.shape[0]}, bn {layer.gamma.shape[0]}")
    scale = (layer.gamma / np.sqrt(layer.var + np.float32(layer.eps))).astype(np.float32)
    shift = (layer.beta - layer.mean * scale).astype(np.float32)
    if x.ndim == 3:
        return (x * scale[:, None, None] + shift[:, None, None]).astype(np.float32)
    return (x * scale + shift).astype(np.float32)


def elu(x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    if alpha <= 0:
        raise ShapeError("ELU alpha must be > 0")
    a = np.float32(alpha)
    return np.where(x > 0, x, a * np.expm1(x)).astype(np.float32)


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    if x.ndim != 3:
        raise ShapeError(f"maxpool2x2 expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    return x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def dense(x: np.ndarray, layer: Dense) -> np.ndarray:
    if x.ndim != 1:
        raise ShapeError(f"dense expects a flat vector, got shape {x.shape}")
    if x.shape[0] != layer.weight.shape[1]:
        raise ShapeError(
            f"dense input length {x.shape[0]} != weight columns {layer.weight.shape[1]}"
        )
    return (layer.weight @ x + layer.bias).astype(np.float32)


def _apply(layer: Layer, x: np.ndarray) -> np.ndarray:
    if isinstance(layer, Conv2D):
        return conv2d(x, layer)
    if isinstance(layer, BatchNorm):
        return batchnorm(x, layer)
    if isinstance(layer, ELU):
        return elu(x, layer.alpha)
    if isinstance(layer, MaxPool2x2):
        return maxpool2x2(x)
    if isinstance(layer, Flatten):
        return np.ascontiguousarray(x).reshape(-1)
    if isinstance(layer, Dense):
        return dense(x, layer)
    raise ShapeError(f"unknown layer {layer!r}")


def _shape_after(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Symbolic shape propagation used to validate composition at load time."""
    if isinstance(layer, Conv2D):
        if len(shape) != 3 or shape[0] != layer.kernels.shape[1]:
            raise ShapeError(f"Conv2D cannot follow shape {shape}")
        o, _, kh, kw = layer.kernels.shape
        p, s = layer.padding, layer.stride
        h = (shape[1] + 2 * p - kh) // s + 1
        w = (shape[2] + 2 * p - kw) // s + 1
        if h <= 0 or w <= 0:
            raise ShapeError(f"Conv2D collapses {shape} to {h}x{w}")
        return (o, h, w)
    if isinstance(layer, BatchNorm):
        if shape[0] != layer.gamma.shape[0]:
            raise ShapeError(f"BatchNorm channels {layer.gamma.shape[0]} vs input {shape}")
        return shape
    if isinstance(layer, ELU):
        return shape
    if isinstance(layer, MaxPool2x2):
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise ShapeError(f"MaxPool2x2 needs even (C,H,W), got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if isinstance(layer, Flatten):
        n = 1
        for d in shape:
            n *= d
        return (n,)
    if isinstance(layer, Dense):
        if len(shape) != 1 or shape[0] != layer.weight.shape[1]:
            raise ShapeError(f"Dense {layer.weight.shape} cannot follow shape {shape}")
        return (layer.weight.shape[0],)
    raise ShapeError(f"unknown layer {layer!r}")


@dataclass(frozen=True)
class Model:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    latent_dim: int

    def __post_init__(self):
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            try:
                shape = _shape_after(layer, shape)
            except ShapeError as e:
                raise ShapeError(f"layer {i}: {e}") from None
        if shape != (2 * self.latent_dim,):
            raise ShapeError(
                f"model output shape {shape} != (2*latent_dim,) = ({2 * self.latent_dim},)"
            )


def encode(model: Model, image: np.ndarray) -> LatentStats:
    """Run the encoder on a pre-scaled [0,1] image and split (mu, logvar)."""
    if tuple(image.shape) != tuple(model.input_shape):
        raise ShapeError(
            f"input shape {tuple(image.shape)} != model input {tuple(model.input_shape)}"
        )
    x = np.ascontiguousarray(image, dtype=np.float32)
    for i, layer in enumerate(model.layers):
        x = _apply(layer, x)
        if not np.isfinite(x).all():
            raise NonFiniteError(f"non-finite activation after layer {i} ({type(layer).__name__})")
    d = model.latent_dim
    return LatentStats(mu=x[:d].copy(), logvar=x[d:].copy())


# --- binary weight format -------------------------------------------------

def _write_array(f, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise WeightFormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def _read_array(f) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    if rank > 8:
        raise WeightFormatError(f"implausible array rank {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
    count = 1
    for d in dims:
        count *= d
    raw = _read_exact(f, 4 * count)
    arr = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if not np.isfinite(arr).all():
        raise WeightFormatError("non-finite parameter value in weight file")
    return arr


def _read_scalar(f) -> float:
    arr = _read_array(f)
    if arr.size != 1:
        raise WeightFormatError(f"expected scalar parameter, got shape {arr.shape}")
    return float(arr.reshape(-1)[0])


def save_weights(model: Model, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(model.layers)))
        for layer in model.layers:
            if isinstance(layer, Conv2D):
                f.write(struct.pack("<B", TAG_CONV))
                _write_array(f, layer.kernels)
                _write_array(f, layer.biases)
                _write_array(f, np.array([layer.stride], dtype=np.float32))
                _write_array(f, np.array([layer.padding], dtype=np.float32))
            elif isinstance(layer, BatchNorm):
                f.write(struct.pack("<B", TAG_BATCHNORM))
                for arr in (layer.gamma, layer.beta, layer.mean, layer.var):
                    _write_array(f, arr)
                _write_array(f, np.array([layer.eps], dtype=np.float32))
            elif isinstance(layer, ELU):
                f.write(struct.pack("<B", TAG_ELU))
                _write_array(f, np.array([layer.alpha], dtype=np.float32))
            elif isinstance(layer, MaxPool2x2):
                f.write(struct.pack("<B", TAG_MAXPOOL))
            elif isinstance(layer, Flatten):
                f.write(struct.pack("<B", TAG_FLATTEN))
            elif isinstance(layer, Dense):
                f.write(struct.pack("<B", TAG_DENSE))
                _write_array(f, layer.weight)
                _write_array(f, layer.bias)
            else:
                raise WeightFormatError(f"cannot serialize layer {layer!r}")
    write_manifest(manifest_path(path), model.input_shape, model.latent_dim)


def manifest_path(weights_path) -> str:
    return str(weights_path) + ".manifest"


def write_manifest(path, input_shape, latent_dim: int) -> None:
    with open(path, "w") as f:
        f.write(f"input_shape={','.join(str(d) for d in input_shape)}\n")
        f.write(f"latent_dim={latent_dim}\n")


def read_manifest(path) -> tuple[tuple[int, int, int], int]:
    values = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    try:
        shape = tuple(int(v) for v in values["input_shape"].split(","))
        latent = int(values["latent_dim"])
    except (KeyError, ValueError) as e:
        raise WeightFormatError(f"bad manifest {path}: {e}") from None
    if len(shape) != 3:
        raise WeightFormatError(f"manifest input_shape must be C,H,W, got {shape}")
    return shape, latent


def load_weights(path) -> Model:
    """Load a weight file and validate that its layer shapes compose."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise WeightFormatError(f"bad magic in {path}")
        version, n_layers = struct.unpack("<II", _read_exact(f, 8))
        if version != VERSION:
            raise WeightFormatError(f"unsupported version {version}")
        layers: list[Layer] = []
        for i in range(n_layers):
            (tag,) = struct.unpack("<B", _read_exact(f, 1))
            try:
                if tag == TAG_CONV:
                    kernels = _read_array(f)
                    biases = _read_array(f)
                    stride = int(_read_scalar(f))
                    padding = int(_read_scalar(f))
                    layers.append(Conv2D(kernels, biases, stride, padding))
                elif tag == TAG_BATCHNORM:
                    gamma, beta, mean, var = (_read_array(f) for _ in range(4))
                    eps = _read_scalar(f)
                    layers.append(BatchNorm(gamma, beta, mean, var, eps))
                elif tag == TAG_ELU:
                    layers.append(ELU(_read_scalar(f)))
                elif tag == TAG_MAXPOOL:
                    layers.append(MaxPool2x2())
                elif tag == TAG_FLATTEN:
                    layers.append(Flatten())
                elif tag == TAG_DENSE:
                    weight = _read_array(f)
                    bias = _read_array(f)
                    layers.append(Dense(weight, bias))
                else:
                    raise WeightFormatError(f"unknown layer tag {tag}")
            except ShapeError as e:
                raise WeightFormatError(f"layer {i}: {e}") from None
        if f.read(1):
            raise WeightFormatError("trailing bytes after declared layers")
    input_shape, latent_dim = read_manifest(manifest_path(path))
    try:
        return Model(tuple(layers), input_shape, latent_dim)
    except ShapeError as e:
        raise WeightFormatError(f"layers do not compose: {e}") from None
