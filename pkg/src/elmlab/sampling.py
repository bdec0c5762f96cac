"""Decoding: guidance schedules, top-k, AR ancestral sampling, MaskGIT
iterative decoding and sliding-window extension.

Randomness is drawn per sample from ``default_rng([seed, sample_index])``
and always in the same amounts, so a sample's tokens do not depend on the
batch it was generated in.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .model import KVCache, Transformer, masked_count, train_mask_ratio
from .vocab import VocabSpec, codes_to_bits, subcodes_to_codes

SCHEDULES = ("constant", "linear", "cos", "log", "square", "r_square")


@dataclass(frozen=True)
class CfgSchedule:
    kind: str = "constant"
    s_min: float = 1.0
    s_max: float = 1.0
    N: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ConfigError(f"unknown guidance schedule {self.kind!r}; choose from {SCHEDULES}")
        if self.s_min > self.s_max:
            raise ConfigError(f"s_min {self.s_min} > s_max {self.s_max}")

    @classmethod
    def parse(cls, text: str, N: int = 1) -> "CfgSchedule":
        """``kind:s_min:s_max`` (``constant:s`` is also accepted)."""
        parts = text.split(":")
        try:
            if len(parts) == 2 and parts[0] == "constant":
                return cls("constant", float(parts[1]), float(parts[1]), N)
            kind, lo, hi = parts
            return cls(kind, float(lo), float(hi), N)
        except ValueError as exc:
            raise ConfigError(f"guidance must look like 'kind:s_min:s_max', got {text!r}") from exc

    def with_steps(self, N: int) -> "CfgSchedule":
        return CfgSchedule(self.kind, self.s_min, self.s_max, N)

    def __str__(self) -> str:
        return f"{self.kind}:{self.s_min:g}:{self.s_max:g}"


_SHAPES = {
    "linear": lambda t: t,
    "cos": lambda t: (1.0 - math.cos(math.pi * t)) / 2.0,
    "log": lambda t: math.log(1.0 + (math.e - 1.0) * t),
    "square": lambda t: t * t,
    "r_square": lambda t: 1.0 - (1.0 - t) * (1.0 - t),
}


def cfg_schedule(sched: CfgSchedule) -> list:
    """Scales at ``t = i/(N-1)``; ``N = 1`` evaluates at ``t = 0`` except that
    a one-step schedule always returns ``[s_max]``."""
    if sched.N < 1:
        raise ContractError(f"schedule needs N >= 1, got {sched.N}")
    if sched.kind == "constant" or sched.N == 1:
        return [float(sched.s_max)] * sched.N
    shape = _SHAPES[sched.kind]
    span = sched.s_max - sched.s_min
    out = [sched.s_min + span * shape(i / (sched.N - 1)) for i in range(sched.N)]
    out[-1] = float(sched.s_max)  # log(e) is not exactly 1 in floating point
    return out


def cfg_combine(cond, uncond, s: float) -> np.ndarray:
    """``u + s (c - u)``; ``s == 1`` returns the conditional logits exactly."""
    c, u = np.asarray(cond), np.asarray(uncond)
    if c.shape != u.shape:
        raise ShapeError(f"conditional {c.shape} and unconditional {u.shape} logits differ in shape")
    if s == 1.0:
        return c.copy()
    if s == 0.0:
        return u.copy()
    return u + s * (c - u)


def top_k_filter(logits, k: int) -> np.ndarray:
    """Keep the k largest entries of the last axis, set the rest to -inf.

    Ties at the k-th value keep the lower index.
    """
    x = np.asarray(logits, dtype=np.float64)
    width = x.shape[-1]
    if not 1 <= k <= width:
        raise ContractError(f"top-k needs 1 <= k <= {width}, got {k}")
    if k == width:
        return x.copy()
    order = np.argsort(-x, axis=-1, kind="stable")[..., :k]
    out = np.full_like(x, -np.inf)
    np.put_along_axis(out, order, np.take_along_axis(x, order, axis=-1), axis=-1)
    return out


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def sample_categorical(logits: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row with uniforms ``u`` in (0, 1]."""
    p = np.exp(log_softmax(logits))
    c = np.cumsum(p, axis=-1)
    idx = np.sum(c < (u * c[..., -1])[..., None], axis=-1)
    return np.minimum(idx, logits.shape[-1] - 1)


@dataclass(frozen=True)
class SamplerConfig:
    cfg: CfgSchedule = field(default_factory=CfgSchedule)
    top_k: int | None = None  # None keeps every index
    temperature: float = 1.0
    tau: float = 0.0
    iters: int = 10
    seed: int = 0
    anneal_gumbel: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.tau < 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if self.iters < 1:
            raise ContractError(f"MaskGIT needs at least one iteration, got {self.iters}")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")

    def check(self, spec: VocabSpec, L: int | None = None) -> None:
        """Validate against a model; ``L`` enables the iteration-count check."""
        if self.top_k is not None and self.top_k > spec.sub_size:
            raise ConfigError(f"top_k {self.top_k} exceeds sub-vocabulary size {spec.sub_size}")
        if L is not None and self.iters > L:
            raise ContractError(f"iterations {self.iters} exceed sequence length {L}")


def _filtered(logits: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    x = logits / cfg.temperature if cfg.temperature != 1.0 else logits
    return top_k_filter(x, cfg.top_k) if cfg.top_k is not None else x


def _guided(model: Transformer, hidden_c, hidden_u, s: float) -> list:
    lc = model.logits_np(hidden_c)
    if hidden_u is None:
        return lc
    lu = model.logits_np(hidden_u)
    return [cfg_combine(c, u, s) for c, u in zip(lc, lu)]


def _grid_shape(L: int, grid) -> tuple:
    if grid is not None:
        h, w = grid
    else:
        h = int(math.isqrt(L))
        w = L // h if h else 0
    if h * w != L:
        raise ShapeError(f"grid {h}x{w} does not hold {L} tokens")
    return h, w


def _streams(seed: int, first_index: int, B: int) -> list:
    return [np.random.default_rng([seed, first_index + i]) for i in range(B)]


def _ar_decode(model: Transformer, class_ids: np.ndarray, total: int, cfg: SamplerConfig,
               first_index: int, on_logits=None) -> np.ndarray:
    """Raster decoding of ``total`` tokens; positions past the context window
    are predicted from a sliding window of the class token plus the most
    recent ``seq_len - 1`` tokens at window-relative positions."""
    mc = model.cfg
    L, g = mc.seq_len, mc.vocab.g
    B = len(class_ids)
    scales = cfg_schedule(cfg.cfg.with_steps(total))
    guided = any(s != 1.0 for s in scales)
    uniforms = np.stack([1.0 - r.random((total, g)) for r in _streams(cfg.seed, first_index, B)])
    ids = np.concatenate([class_ids, np.full(B, mc.null_class)]) if guided else class_ids
    rows = len(ids)
    out = np.zeros((B, total, g), dtype=np.int64)
    cache = KVCache(model, rows, L)
    with T.no_grad():
        h = model.hidden_np(model.embed_np(np.zeros((rows, 0, g), np.int64), ids), True, cache=cache)[:, -1]
        for l in range(total):
            if l >= L:
                window = np.concatenate([out, out], axis=0)[:, l - L + 1:l] if guided else out[:, l - L + 1:l]
                h = model.hidden_np(model.embed_np(window, ids), True)[:, -1]
            logits = _guided(model, h[:B], h[B:] if guided else None, scales[l])
            if on_logits is not None:
                on_logits(l, logits)
            for j in range(g):
                out[:, l, j] = sample_categorical(_filtered(logits[j], cfg), uniforms[:, l, j])
            if l + 1 < L and l + 1 < total:
                tok = out[:, l:l + 1]
                tok = np.concatenate([tok, tok], axis=0) if guided else tok
                x = model.embed_np(tok, ids, positions=[0, l + 1])[:, 1:]
                h = model.hidden_np(x, True, cache=cache)[:, -1]
    return out


def _class_array(class_ids) -> np.ndarray:
    return np.atleast_1d(np.asarray(class_ids, dtype=np.int64))


def _check_classes(model: Transformer, ids: np.ndarray) -> None:
    if ids.size and (ids.min() < 0 or ids.max() > model.cfg.num_classes):
        raise ConfigError(f"class id outside [0, {model.cfg.num_classes}]")


def ar_generate(model: Transformer, class_ids, cfg: SamplerConfig, grid=None, first_index: int = 0,
                on_logits=None) -> np.ndarray:
    """Sample ``[B, h, w, g]`` subcode grids from an AR model."""
    if model.cfg.mode != "ar":
        raise ContractError("ar_generate needs an AR checkpoint")
    ids = _class_array(class_ids)
    _check_classes(model, ids)
    L = model.cfg.seq_len
    cfg.check(model.cfg.vocab)
    h, w = _grid_shape(L, grid)
    seq = _ar_decode(model, ids, L, cfg, first_index, on_logits)
    return seq.reshape(len(ids), h, w, model.cfg.vocab.g)


def extend_generate(model: Transformer, class_ids, target_h: int, target_w: int, cfg: SamplerConfig,
                    grid=None, first_index: int = 0, on_logits=None) -> np.ndarray:
    """Raster generation of a ``target_h x target_w`` grid with a sliding window."""
    if model.cfg.mode != "ar":
        raise ContractError("extension needs an AR checkpoint")
    L = model.cfg.seq_len
    h, w = _grid_shape(L, grid)
    if target_w < w:
        raise ContractError(f"target width {target_w} is below the trained width {w}")
    if target_h < h:
        raise ContractError(f"target {target_h}x{target_w} is smaller than the trained {h}x{w}; "
                            "use ar_generate")
    cfg.check(model.cfg.vocab)
    ids = _class_array(class_ids)
    _check_classes(model, ids)
    seq = _ar_decode(model, ids, target_h * target_w, cfg, first_index, on_logits)
    return seq.reshape(len(ids), target_h, target_w, model.cfg.vocab.g)


def mlm_generate(model: Transformer, class_ids, cfg: SamplerConfig, grid=None, first_index: int = 0,
                 trace: list | None = None) -> np.ndarray:
    """MaskGIT decoding in ``cfg.iters`` rounds.

    After round t (1-based) exactly ``ceil(gamma(t/T) * L)`` positions are
    still masked. ``trace`` receives that count after each round.
    """
    mc = model.cfg
    if mc.mode != "mlm":
        raise ContractError("mlm_generate needs an MLM checkpoint")
    L, g = mc.seq_len, mc.vocab.g
    T_ = cfg.iters
    cfg.check(mc.vocab, L)
    ids = _class_array(class_ids)
    _check_classes(model, ids)
    B = len(ids)
    h, w = _grid_shape(L, grid)
    scales = cfg_schedule(cfg.cfg.with_steps(T_))
    guided = any(s != 1.0 for s in scales)
    draws = [(r.random((T_, L, g)), r.random((T_, L))) for r in _streams(cfg.seed, first_index, B)]
    u_tok = 1.0 - np.stack([d[0] for d in draws])
    u_gum = np.stack([d[1] for d in draws])
    tokens = np.zeros((B, L, g), dtype=np.int64)
    masked = np.ones((B, L), dtype=bool)
    all_ids = np.concatenate([ids, np.full(B, mc.null_class)]) if guided else ids
    positions = np.arange(L)
    with T.no_grad():
        for t in range(1, T_ + 1):
            tok_in = np.concatenate([tokens, tokens]) if guided else tokens
            mask_in = np.concatenate([masked, masked]) if guided else masked
            hid = model.hidden_np(model.embed_np(tok_in, all_ids, mask=mask_in), causal=False)[:, 1:]
            logits = _guided(model, hid[:B], hid[B:] if guided else None, scales[t - 1])
            sampled = np.empty((B, L, g), dtype=np.int64)
            logp = np.zeros((B, L))
            for j in range(g):
                filt = _filtered(logits[j], cfg)
                sampled[..., j] = sample_categorical(filt, u_tok[:, t - 1, :, j])
                lp = np.take_along_axis(log_softmax(filt), sampled[..., j:j + 1], axis=-1)[..., 0]
                logp += lp / g
            noise_scale = cfg.tau * ((1.0 - t / T_) if cfg.anneal_gumbel else 1.0)
            conf = logp
            if noise_scale:
                gumbel = -np.log(-np.log(np.clip(u_gum[:, t - 1], 1e-300, 1.0 - 1e-16)))
                conf = logp + noise_scale * gumbel
            keep_masked = masked_count(train_mask_ratio(t / T_), L)
            for i in range(B):
                cand = np.flatnonzero(masked[i])
                n_commit = len(cand) - keep_masked
                if n_commit <= 0:
                    continue
                # highest confidence first, lower position first among equals
                order = np.lexsort((positions[cand], -conf[i, cand]))
                chosen = cand[order[:n_commit]]
                tokens[i, chosen] = sampled[i, chosen]
                masked[i, chosen] = False
            if trace is not None:
                trace.append(int(masked.sum(axis=1).max()))
    return tokens.reshape(B, h, w, g)


def generate(model: Transformer, class_ids, cfg: SamplerConfig, grid=None, first_index: int = 0) -> np.ndarray:
    if model.cfg.mode == "ar":
        return ar_generate(model, class_ids, cfg, grid, first_index)
    return mlm_generate(model, class_ids, cfg, grid, first_index)


def grid_to_codes(grid, spec: VocabSpec) -> np.ndarray:
    """``[..., h, w, g]`` subcodes -> ``[..., h, w]`` integer codes."""
    return subcodes_to_codes(grid, spec)


def tokens_to_image(grid, tokenizer_ckpt, spec: VocabSpec) -> np.ndarray:
    """Subcode grid(s) ``[..., h, w, g]`` -> decoded image(s) in [0, 1]."""
    from .tokenizer import decode

    grid = np.asarray(grid)
    if grid.ndim < 3 or grid.shape[-1] != spec.g:
        raise ShapeError(f"expected [..., h, w, {spec.g}] subcodes, got {grid.shape}")
    tcfg = tokenizer_ckpt.config
    codes = subcodes_to_codes(grid, spec)
    if tcfg.kind == "vq":
        return decode(codes, tokenizer_ckpt)
    if spec.D != tcfg.D:
        raise ShapeError(f"tokens carry D={spec.D} bits but the tokenizer expects D={tcfg.D}")
    return decode(codes_to_bits(codes, spec.D), tokenizer_ckpt)


MANIFEST_FIELDS = ("index", "class_id", "seed", "grid_path")


def write_generation_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)


def read_generation_manifest(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != MANIFEST_FIELDS:
            raise ConfigError(f"{path}: unexpected manifest header {header}")
        return [(int(i), int(c), int(s), p) for i, c, s, p in reader]
