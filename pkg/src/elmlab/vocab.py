"""Bit-level code decomposition and the decomposed embedding / multi-head
prediction machinery.

A D-bit binary code is split into ``g`` contiguous chunks of ``b`` bits.
Each chunk is read most-significant-bit first, so the 8-bit code
``[1,0,1,0,0,0,1,1]`` with g=2 becomes subcode indices ``(10, 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, RangeError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class VocabSpec:
    D: int
    g: int
    b: int

    def __post_init__(self):
        if self.g < 1 or self.b < 1 or self.D != self.g * self.b:
            raise ConfigError(f"invalid vocabulary {self.g}-{self.b} for D={self.D}: need D = g*b")
        if self.b > 16:
            raise ConfigError(f"sub-vocabulary 2^{self.b} does not fit a u16 index")

    @classmethod
    def parse(cls, text: str, D: int | None = None) -> "VocabSpec":
        """Parse the "g-b" naming ("2-10", "1-16"); checks g*b == D if given."""
        try:
            g, b = (int(p) for p in text.strip().split("-"))
        except ValueError as exc:
            raise ConfigError(f"vocabulary must look like 'g-b', got {text!r}") from exc
        return cls(D if D is not None else g * b, g, b)

    @property
    def sub_size(self) -> int:
        return 1 << self.b

    @property
    def size(self) -> int:
        return 1 << self.D

    def __str__(self) -> str:
        return f"{self.g}-{self.b}"


def decompose(bits, spec: VocabSpec) -> np.ndarray:
    """``[..., D]`` bits -> ``[..., g]`` subcode indices."""
    bits = np.asarray(bits)
    if bits.shape[-1:] != (spec.D,):
        raise ShapeError(f"expected {spec.D} bits in the last axis, got shape {bits.shape}")
    chunks = bits.reshape(*bits.shape[:-1], spec.g, spec.b).astype(np.int64)
    weights = 1 << np.arange(spec.b - 1, -1, -1, dtype=np.int64)
    return chunks @ weights


def recompose(indices, spec: VocabSpec) -> np.ndarray:
    """``[..., g]`` subcode indices -> ``[..., D]`` bits (uint8)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[-1:] != (spec.g,):
        raise ShapeError(f"expected {spec.g} subcodes in the last axis, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= spec.sub_size):
        raise RangeError(f"subcode index outside [0, {spec.sub_size})")
    shifts = np.arange(spec.b - 1, -1, -1, dtype=np.int64)
    bits = (idx[..., None] >> shifts) & 1
    return bits.reshape(*idx.shape[:-1], spec.D).astype(np.uint8)


def bits_to_codes(bits) -> np.ndarray:
    """``[..., D]`` bits -> integer code, MSB first."""
    bits = np.asarray(bits, dtype=np.int64)
    D = bits.shape[-1]
    return bits @ (1 << np.arange(D - 1, -1, -1, dtype=np.int64))


def codes_to_bits(codes, D: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    return ((codes[..., None] >> np.arange(D - 1, -1, -1, dtype=np.int64)) & 1).astype(np.uint8)


def codes_to_subcodes(codes, spec: VocabSpec) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= spec.size):
        raise RangeError(f"code outside [0, 2^{spec.D})")
    shifts = np.arange(spec.g - 1, -1, -1, dtype=np.int64) * spec.b
    return (codes[..., None] >> shifts) & (spec.sub_size - 1)


def subcodes_to_codes(indices, spec: VocabSpec) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= spec.sub_size):
        raise RangeError(f"subcode index outside [0, {spec.sub_size})")
    shifts = np.arange(spec.g - 1, -1, -1, dtype=np.int64) * spec.b
    return np.sum(idx << shifts, axis=-1)


class DecomposedEmbedding:
    """g lookup tables whose rows are concatenated and projected back to ``dim``.

    With ``full_width=False`` each table row has width ``dim // g`` so the
    concatenation is exactly ``dim`` wide; ``full_width=True`` uses
    ``dim``-wide tables and a ``g*dim -> dim`` projection.
    """

    def __init__(self, spec: VocabSpec, dim: int, rng=None, full_width: bool = False,
                 init_std: float = 0.02, dtype=None):
        if not full_width and dim % spec.g:
            raise ConfigError(f"dim {dim} not divisible by g={spec.g}; use full-width tables")
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = dtype or T.get_default_dtype()
        self.spec = spec
        self.dim = dim
        self.width = dim if full_width else dim // spec.g
        self.tables = [Tensor(rng.normal(0.0, init_std, (spec.sub_size, self.width)).astype(dtype), requires_grad=True)
                       for _ in range(spec.g)]
        concat = self.width * spec.g
        self.proj = Tensor(rng.normal(0.0, concat ** -0.5, (concat, dim)).astype(dtype), requires_grad=True)

    def parameters(self) -> list:
        return [*self.tables, self.proj]

    def named_parameters(self, prefix: str = "tok_emb") -> list:
        named = [(f"{prefix}.table{j}", t) for j, t in enumerate(self.tables)]
        return named + [(f"{prefix}.proj", self.proj)]

    def __call__(self, indices) -> Tensor:
        idx = np.asarray(indices)
        if idx.shape[-1] != self.spec.g:
            raise ShapeError(f"expected {self.spec.g} subcodes per position, got {idx.shape}")
        parts = [T.embedding(tbl, idx[..., j]) for j, tbl in enumerate(self.tables)]
        return (parts[0] if len(parts) == 1 else T.concat(parts, -1)) @ self.proj

    def embed_np(self, indices) -> np.ndarray:
        idx = np.asarray(indices)
        parts = [tbl.data[idx[..., j]] for j, tbl in enumerate(self.tables)]
        return np.concatenate(parts, axis=-1) @ self.proj.data


def embed(indices, emb: DecomposedEmbedding) -> Tensor:
    return emb(indices)


class MultiHead:
    """One ``dim -> 2^b`` linear head per subcode."""

    def __init__(self, spec: VocabSpec, dim: int, rng=None, zero_init: bool = False,
                 init_std: float = 0.02, dtype=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = dtype or T.get_default_dtype()
        self.spec = spec
        self.dim = dim
        self.weights, self.biases = [], []
        for _ in range(spec.g):
            w = np.zeros((dim, spec.sub_size)) if zero_init else rng.normal(0.0, init_std, (dim, spec.sub_size))
            self.weights.append(Tensor(w.astype(dtype), requires_grad=True))
            self.biases.append(Tensor(np.zeros(spec.sub_size, dtype=dtype), requires_grad=True))

    def parameters(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def named_parameters(self, prefix: str = "head") -> list:
        out = []
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"{prefix}{j}.weight", w), (f"{prefix}{j}.bias", b)]
        return out

    def __call__(self, feature: Tensor) -> list:
        if feature.shape[-1] != self.dim:
            raise ShapeError(f"feature width {feature.shape[-1]} != head input width {self.dim}")
        return [feature @ w + b for w, b in zip(self.weights, self.biases)]

    def logits_np(self, feature: np.ndarray) -> list:
        return [feature @ w.data + b.data for w, b in zip(self.weights, self.biases)]


def head_logits(feature: Tensor, heads: MultiHead) -> list:
    return heads(feature)


def multi_head_loss(logit_groups, targets) -> Tensor:
    """Sum over subheads of the mean cross-entropy.

    ``logit_groups`` is a list of g ``[n, 2^b]`` tensors; ``targets`` is an
    ``[n, g]`` integer array.
    """
    targets = np.asarray(targets)
    if targets.ndim != 2 or targets.shape[1] != len(logit_groups):
        raise ShapeError(f"targets shape {targets.shape} does not match {len(logit_groups)} heads")
    total = None
    for j, logits in enumerate(logit_groups):
        ce = T.cross_entropy(logits, targets[:, j])
        total = ce if total is None else total + ce
    return total


def table_rows(spec: VocabSpec) -> int:
    """Embedding rows needed for a vocabulary (also the head output width total)."""
    return spec.g * spec.sub_size
