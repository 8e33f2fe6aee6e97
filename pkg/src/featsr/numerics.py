"""Dense float64 array kernels, seeded Gaussian streams and the TNSR tensor format.

Arrays are plain ``numpy.ndarray`` objects (float64, C order). Image batches use
the channels-last layout ``(N, H, W, C)`` and convolution kernels are stored as
``(kh, kw, C_in, C_out)``; this keeps every convolution a short sum of
``(N*H*W, C_in) @ (C_in, C_out)`` products, which is the fastest pure-numpy
formulation on small channel counts.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .errors import FormatError

__all__ = [
    "RngStream",
    "gaussian",
    "add",
    "sub",
    "scale",
    "hadamard",
    "total",
    "mean",
    "l2_norm",
    "matmul",
    "conv2d",
    "conv2d_backward",
    "conv2d_transpose",
    "conv2d_transpose_backward",
    "conv_output_size",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "read_tensor_blob",
    "write_tensor",
    "read_tensor",
]

_U64 = (1 << 64) - 1


class RngStream:
    """Counter-based Gaussian/uniform stream keyed by ``(seed, stream_id)``.

    Backed by numpy's Philox-4x64 bit generator with the 128-bit key set to
    ``(seed, stream_id)``. Two streams with the same key always produce the
    same sequence; distinct ``stream_id`` values give independent sequences,
    so work split across threads can draw from per-unit streams without the
    thread count affecting results.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed <= _U64 and 0 <= stream_id <= _U64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    @property
    def counter(self) -> int:
        """Number of 256-bit Philox blocks consumed so far."""
        words = self.generator.bit_generator.state["state"]["counter"]
        return int(sum(int(w) << (64 * i) for i, w in enumerate(words)))

    def spawn(self, stream_id: int) -> RngStream:
        return RngStream(self.seed, stream_id)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"


def gaussian(rng: RngStream, shape: Sequence[int] | int) -> np.ndarray:
    """Draw i.i.d. standard normal samples of the given shape."""
    shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
    if not shape or any(int(d) < 1 for d in shape):
        raise ValueError(f"gaussian: shape must be non-empty with positive dims, got {shape}")
    return rng.generator.standard_normal(shape)


# ---------------------------------------------------------------------------
# elementwise and reduction kernels


def _same_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape("add", a, b)
    return a + b


def sub(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape("sub", a, b)
    return a - b


def scale(a, c: float) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) * float(c)


def hadamard(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape("hadamard", a, b)
    return a * b


def total(a) -> float:
    return float(np.sum(np.asarray(a, dtype=np.float64)))


def mean(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValueError("mean of an empty tensor")
    return float(np.mean(a))


def l2_norm(a) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64).ravel()))


def matmul(a, b) -> np.ndarray:
    """2-D matrix product ``(m, k) @ (k, n) -> (m, n)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return a @ b


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _window(arr: np.ndarray, i: int, j: int, out_h: int, out_w: int, stride: int) -> np.ndarray:
    return arr[:, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride, :]


def _zero_pad(x: np.ndarray, padding: int) -> np.ndarray:
    # np.pad is slow on small arrays
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
    out[:, padding : padding + h, padding : padding + w, :] = x
    return out


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects x (N,H,W,C) and w (kh,kw,Cin,Cout), got {x.shape}, {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ValueError(f"conv2d: input has {x.shape[3]} channels, kernel expects {w.shape[2]}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
    pad_mode: str = "zero",
) -> np.ndarray:
    """2-D cross-correlation.

    Output spatial size is ``(H + 2*padding - kh) // stride + 1`` (same for W).
    ``pad_mode`` is ``"zero"`` or ``"edge"`` (edge replication).
    """
    _check_conv(x, w, stride, padding)
    kh, kw, _, cout = w.shape
    n, h, wd, _ = x.shape
    oh, ow = conv_output_size(h, kh, stride, padding), conv_output_size(wd, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError("conv2d: kernel larger than padded input")
    if pad_mode not in ("zero", "edge"):
        raise ValueError(f"conv2d: unknown pad_mode {pad_mode!r}")
    if not padding:
        xp = x
    elif pad_mode == "zero":
        xp = _zero_pad(x, padding)
    else:
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)), mode="edge")
    out = np.zeros((n, oh, ow, cout))
    for i in range(kh):
        for j in range(kw):
            out += _window(xp, i, j, oh, ow, stride) @ w[i, j]
    if bias is not None:
        out += bias
    return out


def _input_grad(dout: np.ndarray, w: np.ndarray, in_h: int, in_w: int, stride: int, padding: int) -> np.ndarray:
    kh, kw, cin, _ = w.shape
    n, oh, ow, _ = dout.shape
    if stride == 1 and kh == kw and padding <= kh - 1 and (oh, ow) == (in_h + 2 * padding - kh + 1, in_w + 2 * padding - kw + 1):
        # full correlation with the flipped, transposed kernel
        wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        return conv2d(dout, wf, padding=kh - 1 - padding)
    dxp = np.zeros((n, in_h + 2 * padding, in_w + 2 * padding, cin))
    for i in range(kh):
        for j in range(kw):
            _window(dxp, i, j, oh, ow, stride)[...] += dout @ w[i, j].T
    if padding:
        dxp = dxp[:, padding : padding + in_h, padding : padding + in_w, :]
    return dxp


def _weight_grad(x: np.ndarray, dout: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    cin, cout = x.shape[3], dout.shape[3]
    _, oh, ow, _ = dout.shape
    xp = _zero_pad(x, padding) if padding else x
    d2 = dout.reshape(-1, cout)
    dw = np.empty((kh, kw, cin, cout))
    for i in range(kh):
        for j in range(kw):
            dw[i, j] = _window(xp, i, j, oh, ow, stride).reshape(-1, cin).T @ d2
    return dw


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray, stride: int = 1, padding: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients ``(dx, dw)`` of a zero-padded :func:`conv2d` given ``dout``."""
    kh, kw = w.shape[:2]
    dx = _input_grad(dout, w, x.shape[1], x.shape[2], stride, padding)
    return dx, _weight_grad(x, dout, kh, kw, stride, padding)


def conv2d_transpose(
    x: np.ndarray,
    w: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> np.ndarray:
    """Adjoint of :func:`conv2d` with the same kernel.

    ``w`` has shape ``(kh, kw, C_out, C_in)``: it is the kernel of the forward
    convolution mapping ``C_out -> C_in`` channels. Output spatial size is
    ``(H - 1)*stride - 2*padding + kh + output_padding``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[3]:
        raise ValueError(f"conv2d_transpose: incompatible shapes {x.shape}, {w.shape}")
    kh, kw = w.shape[:2]
    oh = (x.shape[1] - 1) * stride - 2 * padding + kh + output_padding
    ow = (x.shape[2] - 1) * stride - 2 * padding + kw + output_padding
    out = _input_grad(x, w, oh, ow, stride, padding)
    if bias is not None:
        out += bias
    return out


def conv2d_transpose_backward(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray, stride: int = 1, padding: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    kh, kw = w.shape[:2]
    dx = conv2d(dout, w, stride=stride, padding=padding)
    return dx, _weight_grad(dout, x, kh, kw, stride, padding)


# ---------------------------------------------------------------------------
# TNSR format: b"TNSR", u32 ndim, ndim x u32 dims, float32 payload (all LE)

_MAGIC = b"TNSR"


def tensor_to_bytes(a) -> bytes:
    a = np.asarray(a, dtype=np.float64)
    head = _MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def read_tensor_blob(fh: BinaryIO, name: str = "tensor") -> np.ndarray:
    """Read one TNSR blob from an open binary stream."""
    magic = fh.read(4)
    if magic != _MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError(f"{name}: truncated header")
    (ndim,) = struct.unpack("<I", raw)
    raw = fh.read(4 * ndim)
    if len(raw) != 4 * ndim:
        raise FormatError(f"{name}: truncated shape")
    shape = struct.unpack(f"<{ndim}I", raw)
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError(f"{name}: truncated payload ({len(payload)} of {4 * count} bytes)")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)


def tensor_from_bytes(buf: bytes, name: str = "tensor") -> np.ndarray:
    import io

    fh = io.BytesIO(buf)
    arr = read_tensor_blob(fh, name)
    if fh.read(1):
        raise FormatError(f"{name}: trailing bytes after payload")
    return arr


def write_tensor(path, a) -> None:
    Path(path).write_bytes(tensor_to_bytes(a))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    return tensor_from_bytes(path.read_bytes(), name=path.name)
