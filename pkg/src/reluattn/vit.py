"""Miniature Vision Transformer built on the attention module.

Patch embedding, learned position embeddings, pre-norm transformer blocks
(attention + gelu MLP, both residual), final layernorm, global average
pooling, linear classifier. No class token, no biases: the learnable set is
exactly the projection matrices, the layernorm gains, and the embeddings.

The forward is written against the autodiff ops, so the same function serves
plain-array inference and the gradient tape in loss_and_grad.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .attention import LAYERNORM_EPS, AttentionConfig, AttentionParams, _multihead
from .errors import ConfigError, DataFormatError, ShapeError
from .tensor import Activation, Array, require_finite

CHECKPOINT_FORMAT = "reluattn-checkpoint-v1"


@dataclass(frozen=True)
class ViTConfig:
    image_size: int
    patch_size: int
    width: int
    depth: int
    num_heads: int
    mlp_dim: int
    num_classes: int
    attention: AttentionConfig
    channels: int = 1

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.width % self.num_heads != 0:
            raise ConfigError(f"width {self.width} not divisible by num_heads {self.num_heads}")
        if self.attention.num_heads != self.num_heads:
            raise ConfigError(
                f"attention.num_heads {self.attention.num_heads} != num_heads {self.num_heads}"
            )
        if self.attention.head_dim * self.num_heads != self.width:
            raise ConfigError(
                f"attention head layout {self.attention.num_heads}x{self.attention.head_dim}"
                f" does not produce width {self.width}"
            )

    @property
    def seq_len(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "width": self.width,
            "depth": self.depth,
            "num_heads": self.num_heads,
            "mlp_dim": self.mlp_dim,
            "num_classes": self.num_classes,
            "channels": self.channels,
            "attention": self.attention.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        d = dict(d)
        d["attention"] = AttentionConfig.from_dict(d["attention"])
        return cls(**d)


def micro4(attention: AttentionConfig, num_classes: int = 10) -> ViTConfig:
    """Micro/4 for 28x28x1 images: patch 4, L = 49, width 64, depth 4."""
    return ViTConfig(
        image_size=28, patch_size=4, width=64, depth=4, num_heads=4,
        mlp_dim=128, num_classes=num_classes, attention=attention, channels=1,
    )


def micro4_32(attention: AttentionConfig, num_classes: int = 10, channels: int = 3) -> ViTConfig:
    """Micro/4-32 for 32x32 images: patch 4, L = 64, width 64, depth 4."""
    return ViTConfig(
        image_size=32, patch_size=4, width=64, depth=4, num_heads=4,
        mlp_dim=128, num_classes=num_classes, attention=attention, channels=channels,
    )


def micro14(attention: AttentionConfig, num_classes: int = 10) -> ViTConfig:
    """Micro/14 for 28x28x1 images: patch 14, L = 4, depth 2. Gradient-check size."""
    return ViTConfig(
        image_size=28, patch_size=14, width=16, depth=2, num_heads=2,
        mlp_dim=32, num_classes=num_classes, attention=attention, channels=1,
    )


@dataclass
class BlockParams:
    ln1_gain: Array
    wq: Array
    wk: Array
    wv: Array
    wo: Array
    ln2_gain: Array
    mlp_w1: Array
    mlp_w2: Array
    wg: Optional[Array] = None
    q_gain: Optional[Array] = None
    k_gain: Optional[Array] = None


@dataclass
class ViTParams:
    patch_embed: Array
    pos_embed: Array
    blocks: list[BlockParams]
    final_ln_gain: Array
    head: Array


def named_arrays(params: ViTParams) -> Iterator[tuple[str, Array]]:
    """Every learnable leaf with a stable dotted name, in a fixed order."""
    yield "patch_embed", params.patch_embed
    yield "pos_embed", params.pos_embed
    for i, blk in enumerate(params.blocks):
        prefix = f"blocks.{i}."
        yield prefix + "ln1_gain", blk.ln1_gain
        yield prefix + "wq", blk.wq
        yield prefix + "wk", blk.wk
        yield prefix + "wv", blk.wv
        yield prefix + "wo", blk.wo
        if blk.wg is not None:
            yield prefix + "wg", blk.wg
        if blk.q_gain is not None:
            yield prefix + "q_gain", blk.q_gain
            yield prefix + "k_gain", blk.k_gain
        yield prefix + "ln2_gain", blk.ln2_gain
        yield prefix + "mlp_w1", blk.mlp_w1
        yield prefix + "mlp_w2", blk.mlp_w2
    yield "final_ln_gain", params.final_ln_gain
    yield "head", params.head


def to_flat_dict(params: ViTParams) -> dict[str, Array]:
    return dict(named_arrays(params))


def from_flat_dict(cfg: ViTConfig, flat: dict) -> ViTParams:
    """Rebuild the parameter structure from named leaves (values pass through
    untouched, so this also works for tape nodes and gradient arrays)."""
    blocks = []
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        blocks.append(
            BlockParams(
                ln1_gain=flat[p + "ln1_gain"],
                wq=flat[p + "wq"],
                wk=flat[p + "wk"],
                wv=flat[p + "wv"],
                wo=flat[p + "wo"],
                wg=flat.get(p + "wg"),
                q_gain=flat.get(p + "q_gain"),
                k_gain=flat.get(p + "k_gain"),
                ln2_gain=flat[p + "ln2_gain"],
                mlp_w1=flat[p + "mlp_w1"],
                mlp_w2=flat[p + "mlp_w2"],
            )
        )
    return ViTParams(
        patch_embed=flat["patch_embed"],
        pos_embed=flat["pos_embed"],
        blocks=blocks,
        final_ln_gain=flat["final_ln_gain"],
        head=flat["head"],
    )


def param_count(cfg: ViTConfig) -> int:
    """Closed-form learnable parameter count (kept in sync with vit_init)."""
    d, heads = cfg.width, cfg.num_heads
    qkln = 2 * (d // heads) if cfg.attention.qk_layernorm else 0
    gate = d * d if cfg.attention.gated else 0
    per_block = 2 * d + 4 * d * d + gate + qkln + 2 * d * cfg.mlp_dim
    return (
        cfg.patch_dim * d
        + cfg.seq_len * d
        + cfg.depth * per_block
        + d
        + d * cfg.num_classes
    )


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Array:
    """Normal(0, std) with draws beyond 2 sigma resampled."""
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    return (x * std).astype(np.float32)


def vit_init(cfg: ViTConfig, seed: int) -> ViTParams:
    """Deterministic initialization: truncated-normal(0, 0.02) linear weights,
    normal(0, 0.02) position embeddings, all gains 1."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d = cfg.width
    ones = lambda n: np.ones(n, dtype=np.float32)

    patch_embed = _trunc_normal(rng, (cfg.patch_dim, d))
    pos_embed = (rng.standard_normal((cfg.seq_len, d)) * 0.02).astype(np.float32)
    blocks = []
    for _ in range(cfg.depth):
        blocks.append(
            BlockParams(
                ln1_gain=ones(d),
                wq=_trunc_normal(rng, (d, d)),
                wk=_trunc_normal(rng, (d, d)),
                wv=_trunc_normal(rng, (d, d)),
                wo=_trunc_normal(rng, (d, d)),
                wg=_trunc_normal(rng, (d, d)) if cfg.attention.gated else None,
                q_gain=ones(cfg.attention.head_dim) if cfg.attention.qk_layernorm else None,
                k_gain=ones(cfg.attention.head_dim) if cfg.attention.qk_layernorm else None,
                ln2_gain=ones(d),
                mlp_w1=_trunc_normal(rng, (d, cfg.mlp_dim)),
                mlp_w2=_trunc_normal(rng, (cfg.mlp_dim, d)),
            )
        )
    return ViTParams(
        patch_embed=patch_embed,
        pos_embed=pos_embed,
        blocks=blocks,
        final_ln_gain=ones(d),
        head=_trunc_normal(rng, (d, cfg.num_classes)),
    )


def patchify(image: Array, patch_size: int) -> Array:
    """Cut [H, W, C] (or [B, H, W, C]) into non-overlapping patches.

    Patches are ordered row-major over the grid; within a patch, pixels are
    flattened row-major with channels fastest, i.e. a plain reshape of the
    [P, P, C] block.
    """
    image = np.asarray(image)
    batched = image.ndim == 4
    if image.ndim not in (3, 4):
        raise ShapeError(f"patchify expects [H, W, C] or [B, H, W, C], got {image.shape}")
    h, w, c = image.shape[-3:]
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    lead = image.shape[:-3]
    x = image.reshape(lead + (h // p, p, w // p, p, c))
    x = x.swapaxes(-4, -3)  # [..., H/p, W/p, p, p, C]
    return np.ascontiguousarray(x).reshape(lead + ((h // p) * (w // p), p * p * c))


def _forward_tokens(params: ViTParams, tokens, cfg: ViTConfig):
    """tokens: [..., L, patch_dim] -> logits [..., num_classes]."""
    att = cfg.attention
    h = ad.add(ad.matmul(tokens, params.patch_embed), params.pos_embed)
    for blk in params.blocks:
        attn_in = ad.layernorm(h, blk.ln1_gain, LAYERNORM_EPS)
        attn_params = AttentionParams(
            wq=blk.wq, wk=blk.wk, wv=blk.wv, wo=blk.wo,
            wg=blk.wg, q_gain=blk.q_gain, k_gain=blk.k_gain,
        )
        h = ad.add(h, _multihead(attn_in, attn_params, att))
        mlp_in = ad.layernorm(h, blk.ln2_gain, LAYERNORM_EPS)
        m = ad.matmul(mlp_in, blk.mlp_w1)
        m = ad.activation(Activation.GELU, m)
        m = ad.matmul(m, blk.mlp_w2)
        h = ad.add(h, m)
    h = ad.layernorm(h, params.final_ln_gain, LAYERNORM_EPS)
    pooled = ad.mean(h, axis=-2)  # global average over tokens
    return ad.matmul(pooled, params.head)


def _check_batch(batch: Array, cfg: ViTConfig) -> None:
    if batch.ndim != 4:
        raise ShapeError(f"batch must be [B, H, W, C], got {batch.shape}")
    b, h, w, c = batch.shape
    if (h, w, c) != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ShapeError(
            f"batch images {h}x{w}x{c} do not match config "
            f"{cfg.image_size}x{cfg.image_size}x{cfg.channels}"
        )


def vit_forward(params: ViTParams, batch: Array, cfg: ViTConfig) -> Array:
    """Class logits for an image batch. batch: [B, H, W, C] -> [B, num_classes]."""
    batch = np.asarray(batch)
    _check_batch(batch, cfg)
    tokens = patchify(batch, cfg.patch_size)
    logits = _forward_tokens(params, tokens, cfg)
    require_finite(logits, "vit_forward logits")
    return logits


def cross_entropy(logits: Array, labels) -> float:
    """Mean over the batch of -log softmax(logits)[label]."""
    return ad.cross_entropy(np.asarray(logits), labels)


def loss_and_grad(
    params: ViTParams, batch: Array, labels, cfg: ViTConfig
) -> tuple[float, ViTParams]:
    """Cross-entropy loss and its exact reverse-mode gradient for every leaf.

    Returns (loss, grads) with grads shaped exactly like params.
    """
    batch = np.asarray(batch)
    _check_batch(batch, cfg)
    tokens = patchify(batch, cfg.patch_size)
    leaves = {name: ad.Var(arr) for name, arr in named_arrays(params)}
    var_params = from_flat_dict(cfg, leaves)
    loss = ad.cross_entropy(_forward_tokens(var_params, tokens, cfg), labels)
    ad.backward(loss)
    grads = {
        name: (v.grad if v.grad is not None else np.zeros_like(v.data))
        for name, v in leaves.items()
    }
    return float(loss.data), from_flat_dict(cfg, grads)


def save_checkpoint(path, params: ViTParams, cfg: ViTConfig, seed: int, step: int) -> None:
    """Single-file checkpoint: u32 header length, JSON header, raw f32 blob.

    The header carries the config, seed, step, and a manifest of parameter
    names, shapes, and byte offsets into the little-endian float32 blob.
    """
    manifest = []
    chunks = []
    offset = 0
    for name, arr in named_arrays(params):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = json.dumps(
        {
            "format": CHECKPOINT_FORMAT,
            "config": cfg.to_dict(),
            "seed": seed,
            "step": step,
            "params": manifest,
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> tuple[ViTParams, ViTConfig, int, int]:
    """Read a checkpoint back; returns (params, config, seed, step)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError("checkpoint truncated before header length")
    (hlen,) = struct.unpack_from("<I", raw, 0)
    if len(raw) < 4 + hlen:
        raise DataFormatError("checkpoint truncated inside header")
    try:
        header = json.loads(raw[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"checkpoint header is not valid JSON: {e}") from e
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"unknown checkpoint format {header.get('format')!r}")
    cfg = ViTConfig.from_dict(header["config"])
    blob = raw[4 + hlen :]
    flat = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise DataFormatError(f"checkpoint blob truncated at parameter {entry['name']}")
        flat[entry["name"]] = (
            np.frombuffer(blob[start:end], dtype="<f4").astype(np.float32).reshape(shape)
        )
    params = from_flat_dict(cfg, flat)
    return params, cfg, int(header["seed"]), int(header["step"])
