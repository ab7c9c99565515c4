"""Attention kernels with a configurable weight map.

The weight map replaces row-wise softmax by a scaled point-wise alternative:
weights = seq_len**(-alpha) * h(logits) for a point-wise activation h and an
exponent alpha in [0, 1]. alpha = 1 with h = relu divides by sequence length,
which keeps the mean attention weight at the same 1/L order softmax gives at
initialization. alpha = 0 recovers the unscaled point-wise variants.

Also here: the multi-head assembly (optional qk-layernorm and multiplicative
gate), a chunked kernel that processes key/value blocks independently and
accounts for the cross-chunk reductions each variant needs, and the
linear-attention matrix-multiply reordering q(k^T v).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Activation, Array

LAYERNORM_EPS = 1e-6


@dataclass(frozen=True)
class AttentionConfig:
    """Which weight map to use and how the heads are laid out."""

    activation: Activation = Activation.SOFTMAX
    alpha: float = 1.0  # ignored for softmax (normalization is intrinsic)
    qk_layernorm: bool = False
    gated: bool = False
    num_heads: int = 1
    head_dim: int = 16

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.num_heads < 1 or self.head_dim < 1:
            raise ConfigError(
                f"num_heads and head_dim must be positive, got {self.num_heads}, {self.head_dim}"
            )

    @property
    def width(self) -> int:
        return self.num_heads * self.head_dim

    def to_dict(self) -> dict:
        return {
            "activation": self.activation.value,
            "alpha": self.alpha,
            "qk_layernorm": self.qk_layernorm,
            "gated": self.gated,
            "num_heads": self.num_heads,
            "head_dim": self.head_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionConfig":
        return cls(**d)


@dataclass(frozen=True)
class AttentionWeights:
    """Weight matrix produced by the configured map, one row per query."""

    weights: Array


@dataclass
class ReductionStats:
    """Cross-chunk communication tally for the chunked kernel.

    Point-wise maps leave chunk partials final, so combining them is a single
    additive reduction over chunks and nothing else. Online softmax must, per
    combine step, exchange a running row max, rescale and exchange the
    denominator sum, and merge the rescaled partial outputs; each combine step
    therefore counts one max, one sum, and one additive reduction.
    """

    chunks: int = 1
    cross_chunk_additive_reductions: int = 0
    cross_chunk_max_reductions: int = 0
    cross_chunk_sum_reductions: int = 0

    def to_dict(self) -> dict:
        return {
            "chunks": self.chunks,
            "cross_chunk_additive_reductions": self.cross_chunk_additive_reductions,
            "cross_chunk_max_reductions": self.cross_chunk_max_reductions,
            "cross_chunk_sum_reductions": self.cross_chunk_sum_reductions,
        }


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention layer.

    wg is required iff the config is gated; the layernorm gains are required
    iff qk_layernorm is set. Gains have shape (head_dim,) and are shared
    across heads, one per projection.
    """

    wq: Array
    wk: Array
    wv: Array
    wo: Array
    wg: Optional[Array] = None
    q_gain: Optional[Array] = None
    k_gain: Optional[Array] = None


def phi_scale(seq_len: int, cfg: AttentionConfig) -> float:
    """The seq_len**(-alpha) factor, with exact special cases at 0 and 1."""
    if cfg.alpha == 0.0:
        return 1.0
    if cfg.alpha == 1.0:
        return 1.0 / seq_len
    return float(seq_len) ** (-cfg.alpha)


_LOGIT_PROBES: Optional[list] = None  # diagnostic capture of pre-phi logits


@contextmanager
def capture_logits():
    """Collect every pre-activation logit block seen by the weight map.

    Used by the gradient-check harness to measure how far logits sit from
    activation kinks before trusting finite differences there.
    """
    global _LOGIT_PROBES
    prev, _LOGIT_PROBES = _LOGIT_PROBES, []
    try:
        yield _LOGIT_PROBES
    finally:
        _LOGIT_PROBES = prev


def _phi(s, cfg: AttentionConfig):
    """Weight map on logits; works on arrays and tape nodes alike."""
    if _LOGIT_PROBES is not None:
        _LOGIT_PROBES.append(np.array(ad.value(s)))
    seq_len = ad.value(s).shape[-1]
    if cfg.activation is Activation.SOFTMAX:
        return ad.softmax_rows(s)
    out = ad.activation(cfg.activation, s)
    c = phi_scale(seq_len, cfg)
    if c != 1.0:
        out = ad.scale(out, c)
    return out


def _maybe_qk_layernorm(q, k, cfg: AttentionConfig, q_gain, k_gain):
    if not cfg.qk_layernorm:
        return q, k
    if q_gain is None or k_gain is None:
        raise ConfigError("qk_layernorm is set but q_gain / k_gain were not supplied")
    return ad.layernorm(q, q_gain, LAYERNORM_EPS), ad.layernorm(k, k_gain, LAYERNORM_EPS)


def attention_logits(q, k, cfg: AttentionConfig, q_gain=None, k_gain=None):
    """Scaled dot-product logits S[i, j] = <q_i, k_j> / sqrt(d).

    Queries and keys are layernormed first iff the config says so. Accepts
    [..., L, d]; the last two axes are sequence and head dimension.
    """
    qv, kv = ad.value(q), ad.value(k)
    if qv.ndim < 2 or kv.ndim < 2:
        raise ShapeError(f"attention_logits needs [..., L, d] inputs, got {qv.shape}, {kv.shape}")
    if qv.shape[-1] != kv.shape[-1]:
        raise ShapeError(f"query dim {qv.shape[-1]} != key dim {kv.shape[-1]}")
    if qv.shape[-2] == 0 or kv.shape[-2] == 0:
        raise ShapeError("empty sequence: attention needs at least one token")
    d = qv.shape[-1]
    q, k = _maybe_qk_layernorm(q, k, cfg, q_gain, k_gain)
    return ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))


def apply_phi(s: Array, cfg: AttentionConfig) -> AttentionWeights:
    """Map logits to attention weights with the configured phi."""
    sv = ad.value(s)
    if sv.ndim < 2 or sv.shape[-1] != sv.shape[-2]:
        raise ShapeError(f"apply_phi expects square per-head logits, got {sv.shape}")
    return AttentionWeights(ad.value(_phi(sv, cfg)))


def attention_output(w: AttentionWeights, v):
    """Per-row weighted sum of value rows: o_i = sum_j w_ij v_j."""
    weights = w.weights if isinstance(w, AttentionWeights) else w
    wv, vv = ad.value(weights), ad.value(v)
    if wv.shape[-1] != vv.shape[-2]:
        raise ShapeError(f"weights {wv.shape} do not match values {vv.shape}")
    return ad.matmul(weights, v)


def validate_params(params: AttentionParams, cfg: AttentionConfig, width: int) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        w = ad.value(getattr(params, name))
        if w.shape != (width, width):
            raise ShapeError(f"{name} shape {w.shape} != ({width}, {width})")
    if cfg.gated and params.wg is None:
        raise ConfigError("gated attention configured but gate weight wg is missing")
    if cfg.qk_layernorm and (params.q_gain is None or params.k_gain is None):
        raise ConfigError("qk_layernorm configured but q_gain / k_gain are missing")


def _split_heads(x, num_heads: int, head_dim: int):
    # [..., L, D] -> [..., H, L, dh]
    xv = ad.value(x)
    new_shape = xv.shape[:-1] + (num_heads, head_dim)
    return ad.swapaxes(ad.reshape(x, new_shape), -3, -2)


def _merge_heads(x, width: int):
    # [..., H, L, dh] -> [..., L, D]
    xv = ad.value(x)
    merged = ad.swapaxes(x, -3, -2)
    new_shape = xv.shape[:-3] + (xv.shape[-2], width)
    return ad.reshape(merged, new_shape)


def _multihead(x, params: AttentionParams, cfg: AttentionConfig):
    """Shared forward used by the array path and the gradient tape."""
    xv = ad.value(x)
    width = cfg.width
    if xv.ndim < 2 or xv.shape[-1] != width:
        raise ShapeError(f"input {xv.shape} does not end in width {width}")
    if xv.shape[-2] == 0:
        raise ShapeError("empty sequence: attention needs at least one token")
    validate_params(params, cfg, width)

    q = _split_heads(ad.matmul(x, params.wq), cfg.num_heads, cfg.head_dim)
    k = _split_heads(ad.matmul(x, params.wk), cfg.num_heads, cfg.head_dim)
    v = _split_heads(ad.matmul(x, params.wv), cfg.num_heads, cfg.head_dim)

    s = attention_logits(q, k, cfg, params.q_gain, params.k_gain)
    w = _phi(s, cfg)
    heads = ad.matmul(w, v)  # [..., H, L, dh]
    out = _merge_heads(heads, width)
    if cfg.gated:
        out = ad.mul(out, ad.matmul(x, params.wg))
    return ad.matmul(out, params.wo)


def multihead_attention(x: Array, params: AttentionParams, cfg: AttentionConfig) -> Array:
    """Multi-head attention forward pass. x: [..., L, D] with D = heads * head_dim."""
    out = _multihead(np.asarray(x), params, cfg)
    T.require_finite(out, "multihead_attention output")
    return out


def multihead_attention_grads(
    x: Array, params: AttentionParams, cfg: AttentionConfig, grad_output: Array
):
    """Forward plus exact reverse-mode gradients for x and every parameter.

    Returns (output, grads) where grads maps 'x', 'wq', 'wk', 'wv', 'wo' and,
    when present, 'wg', 'q_gain', 'k_gain' to arrays shaped like the inputs.
    """
    leaves = {"x": ad.Var(np.asarray(x))}
    for name in ("wq", "wk", "wv", "wo", "wg", "q_gain", "k_gain"):
        arr = getattr(params, name)
        if arr is not None:
            leaves[name] = ad.Var(np.asarray(arr))
    var_params = AttentionParams(
        wq=leaves["wq"],
        wk=leaves["wk"],
        wv=leaves["wv"],
        wo=leaves["wo"],
        wg=leaves.get("wg"),
        q_gain=leaves.get("q_gain"),
        k_gain=leaves.get("k_gain"),
    )
    out = _multihead(leaves["x"], var_params, cfg)
    ad.backward(out, np.asarray(grad_output))
    grads = {
        name: (v.grad if v.grad is not None else np.zeros_like(v.data))
        for name, v in leaves.items()
    }
    return out.data, grads


def attention_chunked(
    q: Array,
    k: Array,
    v: Array,
    cfg: AttentionConfig,
    chunk_size: int,
    q_gain: Optional[Array] = None,
    k_gain: Optional[Array] = None,
) -> tuple[Array, ReductionStats]:
    """Attention with keys/values processed in chunks along the sequence.

    Point-wise maps: each chunk's partial outputs are final, combined by one
    additive reduction. Softmax: online softmax with a running max and
    denominator, which costs one max, one sum, and one additive reduction per
    combine step. With a single chunk this is exactly the monolithic kernel.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    for name, arr in (("q", q), ("k", k), ("v", v)):
        if arr.ndim != 2:
            raise ShapeError(f"attention_chunked expects 2-d {name}, got {arr.shape}")
    L, d = q.shape
    if k.shape != (L, d) or v.shape[0] != L:
        raise ShapeError(f"shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if not (1 <= chunk_size <= L):
        raise ConfigError(f"chunk_size {chunk_size} out of range [1, {L}]")

    if cfg.qk_layernorm:
        q, k = _maybe_qk_layernorm(q, k, cfg, q_gain, k_gain)

    n_chunks = math.ceil(L / chunk_size)
    stats = ReductionStats(chunks=n_chunks)
    if n_chunks == 1:
        cfg_plain = replace(cfg, qk_layernorm=False)  # already normalized above
        w = apply_phi(attention_logits(q, k, cfg_plain), cfg_plain)
        return attention_output(w, v), stats

    inv_sqrt_d = 1.0 / math.sqrt(d)
    bounds = [(i * chunk_size, min((i + 1) * chunk_size, L)) for i in range(n_chunks)]

    if cfg.activation is not Activation.SOFTMAX:
        c = phi_scale(L, cfg)  # scaling always uses the full sequence length
        acc = np.zeros((L, v.shape[1]), dtype=np.float64)
        for lo, hi in bounds:
            s_c = T.matmul(q, k[lo:hi].T) * inv_sqrt_d
            w_c = T.apply_activation(cfg.activation, s_c) * c
            acc += T.matmul(w_c, v[lo:hi]).astype(np.float64)
        stats.cross_chunk_additive_reductions = 1
        return acc.astype(q.dtype), stats

    # online softmax: carry (running max, denominator, rescaled partial sums)
    m = np.full(L, -np.inf, dtype=np.float64)
    denom = np.zeros(L, dtype=np.float64)
    acc = np.zeros((L, v.shape[1]), dtype=np.float64)
    for i, (lo, hi) in enumerate(bounds):
        s_c = (T.matmul(q, k[lo:hi].T) * inv_sqrt_d).astype(np.float64)
        m_new = np.maximum(m, s_c.max(axis=1))
        p = np.exp(s_c - m_new[:, None])
        rescale = np.exp(m - m_new)  # exp(-inf) = 0 on the first chunk
        denom = denom * rescale + p.sum(axis=1)
        acc = acc * rescale[:, None] + p @ v[lo:hi].astype(np.float64)
        m = m_new
        if i > 0:
            stats.cross_chunk_max_reductions += 1
            stats.cross_chunk_sum_reductions += 1
            stats.cross_chunk_additive_reductions += 1
    return (acc / denom[:, None]).astype(q.dtype), stats


def linear_attention_reordered(q: Array, k: Array, v: Array) -> Array:
    """Activation-free attention computed as q (k^T v), O(d^2 L) instead of O(d L^2).

    Matches the identity-activation, alpha = 0 weight map (including the
    1/sqrt(d) logit scaling) up to floating-point reassociation.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if q.ndim != 2 or k.shape != q.shape or v.shape[0] != k.shape[0]:
        raise ShapeError(f"shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    ctx = T.matmul(k.T, v)  # [d, d]
    return T.matmul(q, ctx) * (1.0 / math.sqrt(q.shape[1]))


def init_weight_statistics(
    d: int, L: int, cfg: AttentionConfig, trials: int = 1000, seed: int = 0
) -> float:
    """Monte-Carlo mean attention weight with standard-normal queries and keys.

    Draws q, k with i.i.d. N(0, 1) entries (the post-layernorm regime) and
    averages the weights the configured map produces. Softmax gives exactly
    1/L; relu with alpha = 1 gives about (2*pi)**-0.5 / L; alpha = 0 leaves
    the mean independent of L.
    """
    mean, _ = init_weight_statistics_detail(d, L, cfg, trials, seed)
    return mean


def init_weight_statistics_detail(
    d: int, L: int, cfg: AttentionConfig, trials: int = 1000, seed: int = 0
) -> tuple[float, float]:
    """Mean attention weight plus its Monte-Carlo standard error."""
    if trials < 1000:
        raise ConfigError(f"need at least 1000 Monte-Carlo trials, got {trials}")
    rng = np.random.Generator(np.random.PCG64(seed))
    inv_sqrt_d = 1.0 / math.sqrt(d)
    # batch trials so the [t, L, L] logit block stays within ~64 MB
    batch = max(1, min(trials, (8 << 20) // max(1, L * L)))
    trial_means = np.empty(trials, dtype=np.float64)
    done = 0
    while done < trials:
        t = min(batch, trials - done)
        q = rng.standard_normal((t, L, d)).astype(np.float32)
        k = rng.standard_normal((t, L, d)).astype(np.float32)
        s = T.matmul(q, k.swapaxes(-1, -2)) * inv_sqrt_d
        w = ad.value(_phi(s, cfg))
        trial_means[done : done + t] = w.mean(axis=(1, 2), dtype=np.float64)
        done += t
    mean = float(trial_means.mean())
    stderr = float(trial_means.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return mean, stderr
