"""Corpus statistics, attention summaries and the latent Fréchet quality proxy."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, RangeError, ShapeError
from .model import Transformer, attention_capture
from .tokenizer import TokenDataset, TokenizerCheckpoint, UtilizationReport, code_utilization, encode

__all__ = [
    "NgramDistribution", "ngram_distribution", "ngram_kl", "AttentionSummary", "attention_average",
    "locality_index", "frechet_distance", "latent_features", "latent_frechet", "write_report", "read_report",
    "utilization_rows", "code_utilization", "UtilizationReport",
]


# ---------------------------------------------------------------------------
# n-gram statistics
# ---------------------------------------------------------------------------

@dataclass
class NgramDistribution:
    order: int
    keys: np.ndarray  # [m, order] observed tuples, lexicographically sorted
    values: np.ndarray  # [m] counts
    total: int
    vocab_size: int

    @property
    def support_size(self) -> int:
        return self.vocab_size ** self.order

    @property
    def counts(self) -> dict:
        return {tuple(int(t) for t in k): int(v) for k, v in zip(self.keys, self.values)}

    def kl_to_uniform(self) -> float:
        """``sum p ln(p K^order)`` in nats; unobserved tuples contribute nothing."""
        support = self.support_size
        # exact integer ratios so a perfectly uniform corpus gives exactly 0
        ratio = np.array([int(c) * support / self.total for c in self.values])
        p = self.values / self.total
        return max(0.0, float((p * np.log(ratio)).sum()))


def _sequences(dataset, vocab_size):
    if isinstance(dataset, TokenDataset):
        return dataset.codes, vocab_size or (1 << dataset.D)
    seqs = np.asarray(dataset)
    if seqs.ndim == 1:
        seqs = seqs[None]
    if seqs.ndim != 2:
        raise ShapeError(f"token sequences must be [N, L], got {seqs.shape}")
    if vocab_size is None:
        raise ContractError("vocab_size is required for raw token arrays")
    return seqs, vocab_size


def ngram_distribution(dataset, order: int = 1, vocab_size: int | None = None) -> NgramDistribution:
    """Unigram or bigram counts. Bigrams pair raster neighbours within a sequence only."""
    if order not in (1, 2):
        raise ContractError(f"order must be 1 or 2, got {order}")
    seqs, K = _sequences(dataset, vocab_size)
    if seqs.size == 0 or seqs.shape[1] < order:
        raise ContractError("n-gram statistics need a nonempty dataset")
    if seqs.min() < 0 or seqs.max() >= K:
        raise RangeError(f"token values must lie in [0, {K}), got [{seqs.min()}, {seqs.max()}]")
    grams = seqs.reshape(-1, 1) if order == 1 else np.stack([seqs[:, :-1], seqs[:, 1:]], -1).reshape(-1, 2)
    keys, values = np.unique(grams.astype(np.int64), axis=0, return_counts=True)
    return NgramDistribution(order, keys, values, int(values.sum()), int(K))


def ngram_kl(dataset, order: int = 1, vocab_size: int | None = None) -> float:
    return ngram_distribution(dataset, order, vocab_size).kl_to_uniform()


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

@dataclass
class AttentionSummary:
    maps: np.ndarray  # [layers, heads, n, n] mean post-softmax attention
    heads: tuple
    count: int
    causal: bool

    @property
    def layers(self) -> int:
        return self.maps.shape[0]

    @property
    def n(self) -> int:
        return self.maps.shape[-1]

    def head(self, index: int) -> np.ndarray:
        """``[layers, n, n]`` for one model head index."""
        try:
            return self.maps[:, self.heads.index(index)]
        except ValueError:
            raise ContractError(f"head {index} not in summary (have {self.heads})") from None

    def save(self, path) -> None:
        """One text header line per matrix (``layer head L``) followed by
        ``L*L`` little-endian f32 values, row-major."""
        with open(path, "wb") as fh:
            fh.write(f"attention layers={self.layers} heads={','.join(map(str, self.heads))} "
                     f"count={self.count} causal={int(self.causal)}\n".encode())
            for i in range(self.layers):
                for j, h in enumerate(self.heads):
                    fh.write(f"layer {i} head {h} L {self.n}\n".encode())
                    fh.write(self.maps[i, j].astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "AttentionSummary":
        raw = Path(path).read_bytes()
        pos = raw.find(b"\n")
        m = re.fullmatch(rb"attention layers=(\d+) heads=([\d,]+) count=(\d+) causal=([01])", raw[:pos])
        if pos < 0 or not m:
            raise FormatError(f"{path}: bad attention header at byte 0")
        layers, heads = int(m[1]), tuple(int(h) for h in m[2].split(b","))
        pos += 1
        blocks = []
        for i in range(layers):
            for h in heads:
                end = raw.find(b"\n", pos)
                hm = re.fullmatch(rb"layer (\d+) head (\d+) L (\d+)", raw[pos:end]) if end >= 0 else None
                if not hm or (int(hm[1]), int(hm[2])) != (i, h):
                    raise FormatError(f"{path}: bad matrix header at byte {pos}")
                n = int(hm[3])
                pos = end + 1
                if pos + 4 * n * n > len(raw):
                    raise FormatError(f"{path}: truncated matrix at byte {pos}")
                blocks.append(np.frombuffer(raw, "<f4", n * n, pos).reshape(n, n))
                pos += 4 * n * n
        if pos != len(raw):
            raise FormatError(f"{path}: trailing bytes at byte {pos}")
        maps = np.stack(blocks).reshape(layers, len(heads), n, n).astype(np.float64)
        return cls(maps, heads, int(m[3]), m[4] == b"1")


def attention_average(model: Transformer, tokens, class_ids, heads=None, batch: int = 50) -> AttentionSummary:
    """Mean post-softmax attention over samples ``tokens [N, n, g]``, all heads by default."""
    tokens = np.asarray(tokens)
    class_ids = np.broadcast_to(np.asarray(class_ids), (len(tokens),))
    if len(tokens) == 0:
        raise ContractError("attention average over an empty sample set")
    heads = tuple(range(model.cfg.heads)) if heads is None else tuple(int(h) for h in np.atleast_1d(heads))
    if any(not 0 <= h < model.cfg.heads for h in heads):
        raise ContractError(f"head index out of range for {model.cfg.heads} heads: {heads}")
    total = None
    for s in range(0, len(tokens), batch):
        maps = attention_capture(model, tokens[s:s + batch], class_ids[s:s + batch])
        part = np.stack([m[:, list(heads)].astype(np.float64).sum(0) for m in maps])
        total = part if total is None else total + part
    return AttentionSummary(total / len(tokens), heads, len(tokens), model.cfg.mode == "ar")


def locality_index(summary, head: int | None = None) -> np.ndarray:
    """Per-layer mean over query rows of the attention-weighted ``|query - key|``.

    ``summary`` is an :class:`AttentionSummary` (first stored head unless
    ``head`` is given) or a raw ``[layers, n, n]`` / ``[n, n]`` array. Position
    0 is the class token.
    """
    if isinstance(summary, AttentionSummary):
        maps = summary.head(summary.heads[0] if head is None else head)
    else:
        maps = np.asarray(summary, dtype=np.float64)
        if maps.ndim == 2:
            maps = maps[None]
    n = maps.shape[-1]
    if maps.shape[-2] != n:
        raise ShapeError(f"attention matrices must be square, got {maps.shape}")
    dist = np.abs(np.arange(n)[:, None] - np.arange(n)[None, :])
    return (maps * dist).sum(-1).mean(-1)


# ---------------------------------------------------------------------------
# Fréchet proxy
# ---------------------------------------------------------------------------

def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = 1e-6) -> float:
    """``|mu1-mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`` with ``eps`` added to both diagonals.

    The cross term uses ``(S1^(1/2) S2 S1^(1/2))^(1/2)``, which has the same
    trace and stays symmetric; negative eigenvalues are clamped to zero.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, np.float64)), np.atleast_2d(np.asarray(sigma2, np.float64))
    d = mu1.shape[0]
    if mu2.shape != (d,) or s1.shape != (d, d) or s2.shape != (d, d):
        raise ShapeError(f"mismatched statistics: {mu1.shape} {s1.shape} vs {mu2.shape} {s2.shape}")
    s1 = s1 + eps * np.eye(d)
    s2 = s2 + eps * np.eye(d)
    r1 = _sqrtm_psd(s1)
    cross = np.trace(_sqrtm_psd(r1 @ s2 @ r1))
    diff = mu1 - mu2
    return max(0.0, float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * cross))


def _stats(features: np.ndarray) -> tuple:
    if len(features) < 2:
        raise ContractError("Fréchet statistics need at least 2 samples")
    return features.mean(0), np.cov(features, rowvar=False).reshape(features.shape[1], features.shape[1])


def latent_features(images, ckpt: TokenizerCheckpoint, pool: int = 2) -> np.ndarray:
    """Pre-quantization encoder latents, ``pool x pool`` average-pooled and flattened."""
    z = encode(images, ckpt).astype(np.float64)
    if z.ndim == 3:
        z = z[None]
    N, h, w, D = z.shape
    if h % pool or w % pool:
        pool = 1
    z = z.reshape(N, h // pool, pool, w // pool, pool, D).mean((2, 4))
    return z.reshape(N, -1)


def latent_frechet(real_images, generated_images, ckpt: TokenizerCheckpoint, pool: int = 2) -> float:
    a = latent_features(real_images, ckpt, pool)
    b = latent_features(generated_images, ckpt, pool)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature sizes differ: {a.shape[1]} vs {b.shape[1]} (image sizes must match)")
    return frechet_distance(*_stats(a), *_stats(b))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def utilization_rows(report: UtilizationReport, scope: str) -> list:
    return [("distinct_codes", scope, report.distinct), ("code_fraction", scope, report.fraction),
            ("tokens", scope, report.total)]


def write_report(path, rows) -> None:
    """CSV with columns ``metric, scope, value``."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "scope", "value"])
        for metric, scope, value in rows:
            w.writerow([metric, scope, repr(float(value)) if isinstance(value, float) else value])


def read_report(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["metric", "scope", "value"]:
        raise FormatError(f"{path}: missing metric,scope,value header")
    return [(m, s, float(v)) for m, s, v in rows[1:]]
