"""Condition encoder: speaker/content/pitch fusion into a single vector.

The encoder adjusts a speaker feature using content and pitch sequences:

    pitch contour --(quantize)--> conv projection (1 -> d_model)
    speaker query --cross-attention--> content        (branch 1)
    speaker query --cross-attention--> projected pitch (branch 2)
    gated fusion of the two branches
    iterated residual self-attention (shared weights)
    multi-head attention (n_heads, head_dim = d_model / n_heads)
    mean-pool over positions, linear projection to cond_dim

All attention here is bias-free and uses no positional encoding, so
self-attention is permutation-equivariant and cross-attention is invariant
to key/value order. Every stage is differentiable with respect to the
encoder parameters; the pitch quantizer is a fixed codebook lookup and is
not trained.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError, EmptySequenceError


@dataclass
class FusionConfig:
    d_model: int = 256
    n_heads: int = 8
    n_self_attn_iters: int = 2
    codebook_size: int = 64
    cond_dim: int = 128
    pitch_range: tuple[float, float] = (-3.0, 3.0)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.n_self_attn_iters < 1:
            raise ConfigError(f"n_self_attn_iters must be >= 1, got {self.n_self_attn_iters}")
        if self.codebook_size < 1:
            raise ConfigError(f"codebook_size must be >= 1, got {self.codebook_size}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class ConditionBundle:
    """Raw conditioning factors plus (after fusion) the condition vector."""

    speaker: np.ndarray          # (d_model,)
    content: np.ndarray          # (L, d_model)
    pitch_raw: np.ndarray        # (L, 1), normalized log-F0
    pitch_quantized: np.ndarray | None = None  # (L,) codebook indices
    fused: np.ndarray | None = None            # (cond_dim,)

    def __post_init__(self):
        self.speaker = np.asarray(self.speaker, dtype=np.float64)
        self.content = np.asarray(self.content, dtype=np.float64)
        self.pitch_raw = np.asarray(self.pitch_raw, dtype=np.float64).reshape(-1, 1)
        if self.content.ndim != 2:
            raise DimensionError(f"content must be (L, d_model), got {self.content.shape}")
        if self.content.shape[0] != self.pitch_raw.shape[0]:
            raise DimensionError(
                f"content length {self.content.shape[0]} != pitch length {self.pitch_raw.shape[0]}"
            )
        if self.content.shape[1] != self.speaker.shape[0]:
            raise DimensionError(
                f"content width {self.content.shape[1]} != speaker width {self.speaker.shape[0]}"
            )


@dataclass
class BundleBatch:
    """Stacked bundles with equal sequence lengths, for vectorized fusion."""

    speaker: np.ndarray   # (n, d_model)
    content: np.ndarray   # (n, L, d_model)
    pitch_raw: np.ndarray  # (n, L, 1)
    pitch_quantized: np.ndarray | None = None  # (n, L)

    @classmethod
    def from_bundles(cls, bundles: list[ConditionBundle]) -> "BundleBatch":
        if not bundles:
            raise EmptySequenceError("cannot batch zero bundles")
        lengths = {b.content.shape[0] for b in bundles}
        if len(lengths) != 1:
            raise DimensionError(f"bundles have mixed sequence lengths: {sorted(lengths)}")
        pq = None
        if all(b.pitch_quantized is not None for b in bundles):
            pq = np.stack([b.pitch_quantized for b in bundles])
        return cls(
            speaker=np.stack([b.speaker for b in bundles]),
            content=np.stack([b.content for b in bundles]),
            pitch_raw=np.stack([b.pitch_raw for b in bundles]),
            pitch_quantized=pq,
        )

    def __len__(self) -> int:
        return self.speaker.shape[0]

    def row(self, i: int) -> ConditionBundle:
        return ConditionBundle(
            speaker=self.speaker[i],
            content=self.content[i],
            pitch_raw=self.pitch_raw[i],
            pitch_quantized=None if self.pitch_quantized is None else self.pitch_quantized[i],
        )

    def subset(self, idx) -> "BundleBatch":
        return BundleBatch(
            speaker=self.speaker[idx],
            content=self.content[idx],
            pitch_raw=self.pitch_raw[idx],
            pitch_quantized=None if self.pitch_quantized is None else self.pitch_quantized[idx],
        )


# -- pitch quantizer ----------------------------------------------------


def uniform_codebook(size: int, lo: float = -3.0, hi: float = 3.0) -> np.ndarray:
    """Evenly spaced scalar codebook over [lo, hi], sorted ascending."""
    if size < 1:
        raise ConfigError(f"codebook size must be >= 1, got {size}")
    if size == 1:
        return np.array([(lo + hi) / 2.0])
    return np.linspace(lo, hi, size)


def vq_quantize(pitch: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-codebook assignment; ties resolve to the lower index.

    A trailing singleton axis on ``pitch`` (the L x 1 column convention) is
    squeezed; returns (indices, codebook[indices]) of the squeezed shape.
    """
    codebook = np.asarray(codebook, dtype=np.float64).reshape(-1)
    if codebook.size == 0:
        raise ConfigError("codebook is empty")
    arr = np.asarray(pitch, dtype=np.float64)
    if arr.ndim > 1 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    dist = np.abs(arr[..., None] - codebook)
    idx = np.argmin(dist, axis=-1)  # argmin picks the first (lowest) index on ties
    return idx, codebook[idx]


# -- parameter groups ----------------------------------------------------


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, scale: float | None = None):
        s = scale if scale is not None else 1.0 / np.sqrt(d)
        return cls(
            wq=Tensor(rng.uniform(-s, s, size=(d, d)), requires_grad=True),
            wk=Tensor(rng.uniform(-s, s, size=(d, d)), requires_grad=True),
            wv=Tensor(rng.uniform(-s, s, size=(d, d)), requires_grad=True),
        )


@dataclass
class MultiHeadParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator):
        s = 1.0 / np.sqrt(d)
        make = lambda: Tensor(rng.uniform(-s, s, size=(d, d)), requires_grad=True)
        return cls(wq=make(), wk=make(), wv=make(), wo=make())


@dataclass
class GateParams:
    w: Tensor  # (2d, d)
    b: Tensor  # (d,)

    @classmethod
    def init(cls, d: int, rng: np.random.Generator):
        s = 1.0 / np.sqrt(2 * d)
        return cls(
            w=Tensor(rng.uniform(-s, s, size=(2 * d, d)), requires_grad=True),
            b=Tensor(np.zeros(d), requires_grad=True),
        )


@dataclass
class ConvParams:
    """Kernel-3 1-D convolution taps, 1 input channel -> d output channels."""

    taps: list[Tensor] = field(default_factory=list)  # three (1, d) tensors
    b: Tensor | None = None

    @classmethod
    def init(cls, d: int, rng: np.random.Generator):
        s = 1.0 / np.sqrt(3)
        taps = [Tensor(rng.uniform(-s, s, size=(1, d)), requires_grad=True) for _ in range(3)]
        return cls(taps=taps, b=Tensor(np.zeros(d), requires_grad=True))


# -- fusion operations ---------------------------------------------------


def pitch_project(pitch, params: ConvParams) -> Tensor:
    """Same-padded kernel-3 convolution lifting an (..., L, 1) contour to (..., L, d)."""
    pitch = ag.as_tensor(pitch)
    L = pitch.shape[-2]
    if L == 0:
        raise EmptySequenceError("pitch sequence is empty")
    pad_shape = pitch.shape[:-2] + (1, 1)
    zero = Tensor(np.zeros(pad_shape))
    padded = ag.concatenate([zero, pitch, zero], axis=-2)
    out = None
    for k, w in enumerate(params.taps):
        window = ag.take(padded, (..., slice(k, k + L), slice(None)))
        term = window @ w
        out = term if out is None else out + term
    return out + params.b


def cross_attention(q_seq, kv_seq, params: AttentionParams) -> Tensor:
    """Residual single-head attention of queries over a key/value sequence.

    out = q_seq + softmax(Q K^T / sqrt(d)) V with Q from q_seq and K, V from
    kv_seq. Shapes: q_seq (..., Lq, d), kv_seq (..., Lk, d).
    """
    q_seq = ag.as_tensor(q_seq)
    kv_seq = ag.as_tensor(kv_seq)
    if kv_seq.shape[-2] == 0:
        raise EmptySequenceError("key/value sequence is empty")
    d = q_seq.shape[-1]
    if kv_seq.shape[-1] != d:
        raise DimensionError(f"query width {d} != key/value width {kv_seq.shape[-1]}")
    q = q_seq @ params.wq
    k = kv_seq @ params.wk
    v = kv_seq @ params.wv
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d))
    attn = ag.softmax(scores, axis=-1)
    return q_seq + attn @ v


def gated_fusion(a, b, params: GateParams) -> Tensor:
    """Convex blend g*a + (1-g)*b with g = sigmoid(W [a; b] + bias)."""
    a = ag.as_tensor(a)
    b = ag.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"gated fusion inputs differ in shape: {a.shape} vs {b.shape}")
    gate_in = ag.concatenate([a, b], axis=-1)
    g = ag.sigmoid(gate_in @ params.w + params.b)
    return g * a + (1.0 - g) * b


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, L, d = x.shape
    hd = d // n_heads
    return x.reshape(tuple(lead) + (L, n_heads, hd)).swapaxes(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    y = x.swapaxes(-3, -2)
    *lead, L, n_heads, hd = y.shape
    return y.reshape(tuple(lead) + (L, n_heads * hd))


def multi_head_attention(q_seq, k_seq, v_seq, n_heads: int, params: MultiHeadParams) -> Tensor:
    """Scaled dot-product attention with per-head scale 1/sqrt(head_dim),
    concatenated heads, and an output projection."""
    q_seq = ag.as_tensor(q_seq)
    k_seq = ag.as_tensor(k_seq)
    v_seq = ag.as_tensor(v_seq)
    d = q_seq.shape[-1]
    if d % n_heads != 0:
        raise ConfigError(f"width {d} not divisible by n_heads {n_heads}")
    head_dim = d // n_heads
    q = _split_heads(q_seq @ params.wq, n_heads)
    k = _split_heads(k_seq @ params.wk, n_heads)
    v = _split_heads(v_seq @ params.wv, n_heads)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(head_dim))
    attn = ag.softmax(scores, axis=-1)
    return _merge_heads(attn @ v) @ params.wo


def self_attention_refine(x_seq, n_iters: int, params: AttentionParams) -> Tensor:
    """Apply the same residual self-attention block n_iters times (shared weights)."""
    if n_iters < 0:
        raise ConfigError(f"n_iters must be >= 0, got {n_iters}")
    x = ag.as_tensor(x_seq)
    for _ in range(n_iters):
        x = cross_attention(x, x, params)
    return x


# -- the encoder ----------------------------------------------------------


class FusionEncoder:
    """Holds all fusion parameters and runs the full conditioning pipeline."""

    def __init__(self, config: FusionConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        d = config.d_model
        self.conv = ConvParams.init(d, rng)
        self.cross_content = AttentionParams.init(d, rng)
        self.cross_pitch = AttentionParams.init(d, rng)
        self.gate = GateParams.init(d, rng)
        self.self_attn = AttentionParams.init(d, rng)
        self.mha = MultiHeadParams.init(d, rng)
        s = 1.0 / np.sqrt(d)
        self.w_out = Tensor(rng.uniform(-s, s, size=(d, config.cond_dim)), requires_grad=True)
        self.b_out = Tensor(np.zeros(config.cond_dim), requires_grad=True)
        lo, hi = config.pitch_range
        self.codebook = uniform_codebook(config.codebook_size, lo, hi)

    def parameters(self) -> list[tuple[str, Tensor]]:
        p = [
            ("fusion.conv.tap0", self.conv.taps[0]),
            ("fusion.conv.tap1", self.conv.taps[1]),
            ("fusion.conv.tap2", self.conv.taps[2]),
            ("fusion.conv.bias", self.conv.b),
            ("fusion.cross_content.wq", self.cross_content.wq),
            ("fusion.cross_content.wk", self.cross_content.wk),
            ("fusion.cross_content.wv", self.cross_content.wv),
            ("fusion.cross_pitch.wq", self.cross_pitch.wq),
            ("fusion.cross_pitch.wk", self.cross_pitch.wk),
            ("fusion.cross_pitch.wv", self.cross_pitch.wv),
            ("fusion.gate.w", self.gate.w),
            ("fusion.gate.b", self.gate.b),
            ("fusion.self_attn.wq", self.self_attn.wq),
            ("fusion.self_attn.wk", self.self_attn.wk),
            ("fusion.self_attn.wv", self.self_attn.wv),
            ("fusion.mha.wq", self.mha.wq),
            ("fusion.mha.wk", self.mha.wk),
            ("fusion.mha.wv", self.mha.wv),
            ("fusion.mha.wo", self.mha.wo),
            ("fusion.out.weight", self.w_out),
            ("fusion.out.bias", self.b_out),
        ]
        return p

    @property
    def param_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()

    def quantize_pitch(self, pitch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return vq_quantize(pitch, self.codebook)

    def fuse_batch(self, batch: BundleBatch) -> Tensor:
        """Fuse a batch of bundles into condition rows of shape (n, cond_dim).

        The pitch contour is always quantized with this encoder's codebook;
        any precomputed indices on the bundles are informational only.
        """
        cfg = self.config
        if batch.speaker.shape[-1] != cfg.d_model:
            raise DimensionError(
                f"speaker width {batch.speaker.shape[-1]} != d_model {cfg.d_model}"
            )
        _, q = self.quantize_pitch(batch.pitch_raw[..., 0])
        pq = q[..., None]

        pitch_feat = pitch_project(Tensor(pq), self.conv)
        query = ag.as_tensor(batch.speaker).reshape((len(batch), 1, cfg.d_model))
        branch_content = cross_attention(query, Tensor(batch.content), self.cross_content)
        branch_pitch = cross_attention(query, pitch_feat, self.cross_pitch)
        fused = gated_fusion(branch_content, branch_pitch, self.gate)
        refined = self_attention_refine(fused, cfg.n_self_attn_iters, self.self_attn)
        mixed = multi_head_attention(refined, refined, refined, cfg.n_heads, self.mha)
        pooled = mixed.mean(axis=-2)
        return pooled @ self.w_out + self.b_out

    def fuse(self, bundle: ConditionBundle) -> np.ndarray:
        """Fuse one bundle into its condition vector (no tape)."""
        for name in ("speaker", "content", "pitch_raw"):
            if getattr(bundle, name) is None:
                raise ConfigError(f"condition bundle is missing '{name}'")
        with ag.no_grad():
            c = self.fuse_batch(BundleBatch.from_bundles([bundle])).data[0]
        bundle.fused = c
        return c


def fuse_condition(bundle: ConditionBundle, encoder: FusionEncoder) -> np.ndarray:
    """Functional wrapper over :meth:`FusionEncoder.fuse`."""
    return encoder.fuse(bundle)


# -- bundle CSV format ----------------------------------------------------
#
# One file per bundle. Column layout:
#   section,index,values...
# with one `speaker` row (the d_model vector), L `content` rows (each a
# d_model vector), and L `pitch` rows (each a single value), in that order.


def save_bundle_csv(bundle: ConditionBundle, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["section", "index", "values"])
        w.writerow(["speaker", 0] + [repr(float(v)) for v in bundle.speaker])
        for i, row in enumerate(bundle.content):
            w.writerow(["content", i] + [repr(float(v)) for v in row])
        for i, p in enumerate(bundle.pitch_raw[:, 0]):
            w.writerow(["pitch", i, repr(float(p))])


def load_bundle_csv(path) -> ConditionBundle:
    speaker = None
    content: list[list[float]] = []
    pitch: list[float] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "section":
            raise ConfigError(f"{path}: not a condition bundle file (missing header)")
        for row in reader:
            if not row:
                continue
            section = row[0]
            values = [float(v) for v in row[2:]]
            if section == "speaker":
                speaker = values
            elif section == "content":
                content.append(values)
            elif section == "pitch":
                pitch.append(values[0])
            else:
                raise ConfigError(f"{path}: unknown bundle section '{section}'")
    if speaker is None or not content or not pitch:
        raise ConfigError(f"{path}: bundle file must contain speaker, content, and pitch sections")
    return ConditionBundle(
        speaker=np.array(speaker),
        content=np.array(content),
        pitch_raw=np.array(pitch).reshape(-1, 1),
    )
