"""Dense float32 tensor math with exact derivatives and a gradient oracle.

Values are plain numpy arrays. Storage and element-wise compute are float32;
sums, means and normalization statistics accumulate in float64 before being
rounded back, so results are reproducible bit-for-bit for a fixed seed and
environment. Every public operation checks its result for NaN/Inf and raises
instead of letting them propagate.

All operations preserve the floating dtype of their input: feeding float64
runs the whole computation in double precision. The finite-difference oracle
relies on this to evaluate the function it probes at full precision.
"""

from __future__ import annotations

import struct
from enum import Enum
from typing import BinaryIO, Callable

import numpy as np
from scipy import special

from .errors import ConfigError, DataFormatError, NonFiniteError, ShapeError

Array = np.ndarray

TENSOR_MAGIC = b"RATN0001"

_INV_SQRT_2PI = 0.3989422804014327  # standard normal pdf at 0


class Activation(str, Enum):
    """Point-wise activation menu, plus softmax as the row-wise baseline."""

    RELU = "relu"
    RELU_SQUARED = "relu_squared"
    GELU = "gelu"
    SOFTPLUS = "softplus"
    IDENTITY = "identity"
    RELU6 = "relu6"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"


POINTWISE_ACTIVATIONS = tuple(a for a in Activation if a is not Activation.SOFTMAX)


def tensor(data, dtype=np.float32) -> Array:
    """Build a validated array: contiguous, floating, all entries finite."""
    x = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    require_finite(x, "tensor construction")
    return x


def require_finite(x: Array, context: str) -> Array:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {context}")
    return x


def matmul(a: Array, b: Array) -> Array:
    """Matrix product with broadcasting over leading axes.

    Summation order is the fixed blocked order of the underlying BLAS, which
    is deterministic for a given build; repeated calls are bit-identical.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a @ b
    require_finite(out, "matmul output")
    return out


def _gelu(x64: Array) -> Array:
    return x64 * special.ndtr(x64)


def _gelu_grad(x64: Array) -> Array:
    return special.ndtr(x64) + x64 * _INV_SQRT_2PI * np.exp(-0.5 * x64 * x64)


def _sigmoid(x64: Array) -> Array:
    return special.expit(x64)


# value / derivative pairs evaluated in float64, cast back by apply_activation
_ACTIVATIONS: dict[Activation, tuple[Callable[[Array], Array], Callable[[Array], Array]]] = {
    Activation.RELU: (
        lambda x: np.maximum(x, 0.0),
        lambda x: (x > 0).astype(np.float64),
    ),
    Activation.RELU_SQUARED: (
        lambda x: np.square(np.maximum(x, 0.0)),
        lambda x: 2.0 * np.maximum(x, 0.0),
    ),
    Activation.GELU: (_gelu, _gelu_grad),
    Activation.SOFTPLUS: (
        lambda x: np.logaddexp(0.0, x),
        _sigmoid,
    ),
    Activation.IDENTITY: (
        lambda x: x,
        lambda x: np.ones_like(x),
    ),
    Activation.RELU6: (
        lambda x: np.clip(x, 0.0, 6.0),
        lambda x: ((x > 0) & (x < 6)).astype(np.float64),
    ),
    Activation.SIGMOID: (
        _sigmoid,
        lambda x: _sigmoid(x) * (1.0 - _sigmoid(x)),
    ),
}


def apply_activation(h: Activation, x: Array, compute_grad: bool = False):
    """Element-wise h(x), optionally with the exact derivative h'(x).

    relu'(0) and relu6' at both kinks are taken as 0. gelu is the exact
    Gaussian-CDF form x * Phi(x), not the tanh approximation.
    """
    h = Activation(h)
    if h is Activation.SOFTMAX:
        raise ConfigError("softmax is row-wise, not point-wise; use softmax_rows")
    x = np.asarray(x)
    require_finite(x, f"apply_activation({h.value}) input")
    fn, grad_fn = _ACTIVATIONS[h]
    x64 = x.astype(np.float64, copy=False)
    y = fn(x64).astype(x.dtype, copy=False)
    require_finite(y, f"apply_activation({h.value}) output")
    if not compute_grad:
        return y
    g = grad_fn(x64).astype(x.dtype, copy=False)
    require_finite(g, f"apply_activation({h.value}) derivative")
    return y, g


def softmax_rows(x: Array) -> Array:
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    x = np.asarray(x)
    if x.ndim < 1:
        raise ShapeError("softmax_rows needs at least one axis")
    require_finite(x, "softmax_rows input")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    out = (e / denom).astype(x.dtype, copy=False)
    require_finite(out, "softmax_rows output")
    return out


def layernorm(x: Array, gain: Array, eps: float = 1e-6) -> Array:
    """Zero-mean unit-variance normalization over the last axis, scaled by gain.

    No additive bias. Statistics accumulate in float64.
    """
    x = np.asarray(x)
    gain = np.asarray(gain)
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(
            f"layernorm over a single element is degenerate (division hazard), got last axis {d}"
        )
    if gain.shape != (d,):
        raise ShapeError(f"layernorm gain shape {gain.shape} does not match last axis {d}")
    require_finite(x, "layernorm input")
    x64 = x.astype(np.float64, copy=False)
    mu = x64.mean(axis=-1, keepdims=True)
    centered = x64 - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    out = (gain.astype(np.float64, copy=False) * centered / np.sqrt(var + eps)).astype(
        x.dtype, copy=False
    )
    require_finite(out, "layernorm output")
    return out


def finite_diff_grad(f: Callable[[Array], float], x: Array, step: float = 1e-3) -> Array:
    """Central-difference gradient of a scalar function, the test-side oracle.

    Perturbs each coordinate of a float64 copy of ``x`` and differences in
    float64. Intended for tests only; cost is two evaluations per coordinate.
    """
    if not (1e-4 <= step <= 1e-2):
        raise ConfigError(f"finite difference step {step} outside [1e-4, 1e-2]")
    x64 = np.asarray(x, dtype=np.float64)
    flat = x64.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x64))
        flat[i] = orig - step
        fm = float(f(x64))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"finite_diff_grad: non-finite f(x +/- step) at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x64.shape)


def save_tensor(path_or_file, x: Array) -> None:
    """Write the binary tensor format: magic, u32 rank, u32 dims, f32 payload.

    All integers and floats are little-endian.
    """
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float32))
    header = TENSOR_MAGIC + struct.pack("<I", x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    payload = x.astype("<f4", copy=False).tobytes()
    if hasattr(path_or_file, "write"):
        path_or_file.write(header + payload)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(header + payload)


def load_tensor(path_or_file) -> Array:
    """Read back a tensor written by save_tensor, validating every field."""
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    if len(data) < len(TENSOR_MAGIC) + 4:
        raise DataFormatError(f"tensor file truncated: {len(data)} bytes")
    magic = data[: len(TENSOR_MAGIC)]
    if magic != TENSOR_MAGIC:
        raise DataFormatError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    (rank,) = struct.unpack_from("<I", data, len(TENSOR_MAGIC))
    if rank > 32:
        raise DataFormatError(f"implausible tensor rank {rank}")
    dims_off = len(TENSOR_MAGIC) + 4
    if len(data) < dims_off + 4 * rank:
        raise DataFormatError("tensor file truncated inside dimension list")
    shape = struct.unpack_from(f"<{rank}I", data, dims_off)
    if any(d == 0 for d in shape):
        raise DataFormatError(f"non-positive dimension in shape {shape}")
    count = int(np.prod(shape)) if rank else 1
    payload = data[dims_off + 4 * rank :]
    if len(payload) != 4 * count:
        raise DataFormatError(
            f"payload length {len(payload)} does not match shape {shape} ({4 * count} bytes)"
        )
    x = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    require_finite(x, "loaded tensor")
    return x
