"""Class-conditional transformer over decomposed image tokens.

One backbone serves both objectives:

* ``ar``: causal attention, input ``[class, t_0 .. t_{L-2}]``, output at
  position ``l`` predicts token ``t_l``.
* ``mlm``: bidirectional attention over ``[class, t_0 .. t_{L-1}]`` where
  masked tokens are replaced by a learned mask vector at the embedding
  level; only masked positions are scored.

Blocks are pre-norm (RMS norm with a learned gain), multi-head attention and
a 4x GELU MLP, with learned absolute positions and no biases in the
backbone linears. The class token occupies position 0; class index
``num_classes`` is the null class used for guidance.

Two forward paths exist: the graph path (``Tensor`` ops, used for training
and gradient probes) and a numpy path (KV cache, attention capture, sliding
windows) for inference. Tests check they agree.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, FormatError, NumericalError, ShapeError, TrainingDiverged
from .formats import read_container, write_container
from .tensor import Tensor
from .vocab import DecomposedEmbedding, MultiHead, VocabSpec, multi_head_loss

MODES = ("ar", "mlm")

# (depth, dim, heads)
PRESETS = {
    "s": (4, 128, 4),
    "m": (8, 256, 8),
    "l": (24, 1024, 16),
    "xl": (36, 1280, 20),
    "xxl": (48, 1536, 24),
    "2b": (48, 1792, 28),
}


@dataclass(frozen=True)
class LmConfig:
    depth: int = 4
    dim: int = 128
    heads: int = 4
    vocab: VocabSpec = field(default_factory=lambda: VocabSpec(8, 2, 4))
    seq_len: int = 64
    num_classes: int = 10
    mode: str = "ar"
    class_drop_prob: float = 0.1
    full_width: bool = False
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be ar or mlm, got {self.mode!r}")
        if self.depth < 1 or self.dim < 1 or self.heads < 1 or self.seq_len < 1 or self.num_classes < 1:
            raise ConfigError("depth, dim, heads, seq_len and num_classes must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if not 0.0 <= self.class_drop_prob <= 1.0:
            raise ConfigError(f"class_drop_prob {self.class_drop_prob} outside [0, 1]")
        if not self.full_width and self.dim % self.vocab.g:
            raise ConfigError(f"dim {self.dim} not divisible by g={self.vocab.g}; set full_width")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def null_class(self) -> int:
        return self.num_classes

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["vocab"] = str(self.vocab)
        out["D"] = self.vocab.D
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "LmConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            value = raw[f.name]
            if f.name == "vocab":
                kw[f.name] = VocabSpec.parse(value, int(raw["D"]) if "D" in raw else None)
            elif isinstance(getattr(cls(), f.name), bool):
                kw[f.name] = value in (True, "True", "true", "1")
            else:
                kw[f.name] = type(getattr(cls(), f.name))(value)
        return cls(**kw)


def preset(name: str, **overrides) -> LmConfig:
    try:
        depth, dim, heads = PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown size preset {name!r}; choose from {sorted(PRESETS)}") from None
    return LmConfig(depth=depth, dim=dim, heads=heads, **overrides)


def param_shapes(cfg: LmConfig) -> list:
    """``(name, shape)`` for every parameter in declaration (file) order."""
    v, d = cfg.vocab, cfg.dim
    width = d if cfg.full_width else d // v.g
    out = [(f"tok_emb.table{j}", (v.sub_size, width)) for j in range(v.g)]
    out += [("tok_emb.proj", (width * v.g, d)), ("cls_emb", (cfg.num_classes + 1, d)),
            ("pos_emb", (cfg.seq_len + 1, d))]
    if cfg.mode == "mlm":
        out.append(("mask_emb", (d,)))
    for i in range(cfg.depth):
        out += [(f"blk{i}.norm1", (d,)), (f"blk{i}.wq", (d, d)), (f"blk{i}.wk", (d, d)),
                (f"blk{i}.wv", (d, d)), (f"blk{i}.wo", (d, d)), (f"blk{i}.norm2", (d,)),
                (f"blk{i}.w1", (d, 4 * d)), (f"blk{i}.w2", (4 * d, d))]
    out.append(("norm_f", (d,)))
    for j in range(v.g):
        out += [(f"head{j}.weight", (d, v.sub_size)), (f"head{j}.bias", (v.sub_size,))]
    return out


def param_count(cfg: LmConfig) -> int:
    """Parameter count from the config alone (no allocation)."""
    return int(sum(math.prod(s) for _, s in param_shapes(cfg)))


def train_mask_ratio(r: float) -> float:
    """Cosine mask-ratio schedule: 1 at r=0, 0 at r=1, strictly decreasing."""
    if not 0.0 <= r <= 1.0:
        raise ContractError(f"schedule position {r} outside [0, 1]")
    return 0.0 if r == 1.0 else math.cos(math.pi * r / 2.0)


def masked_count(ratio: float, L: int) -> int:
    """``ceil(ratio * L)``, robust to one-ulp noise (cos(pi/3)*64 is 32, not 33)."""
    x = ratio * L
    n = math.floor(x)
    return n if x - n <= 1e-9 * max(1.0, x) else n + 1


def sample_mask(rng, batch: int, L: int, ratio: float | None = None) -> np.ndarray:
    """Per-sample masks: ``r ~ U[0,1]`` unless ``ratio`` is forced; at least one
    position masked; positions chosen uniformly without replacement."""
    mask = np.zeros((batch, L), dtype=bool)
    for i in range(batch):
        gamma = ratio if ratio is not None else train_mask_ratio(rng.random())
        n = max(1, masked_count(gamma, L))
        mask[i, rng.permutation(L)[:n]] = True
    return mask


class Transformer:
    def __init__(self, cfg: LmConfig, rng=None, zero_head: bool = False, dtype=None, init_std: float = 0.02):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        dtype = dtype or T.get_default_dtype()
        d = cfg.dim
        self.tok_emb = DecomposedEmbedding(cfg.vocab, d, rng, full_width=cfg.full_width, init_std=init_std,
                                           dtype=dtype)
        p = {name: t for name, t in self.tok_emb.named_parameters()}

        def normal(*shape, std=init_std):
            return Tensor(rng.normal(0.0, std, shape).astype(dtype), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

        p["cls_emb"] = normal(cfg.num_classes + 1, d)
        p["pos_emb"] = normal(cfg.seq_len + 1, d)
        if cfg.mode == "mlm":
            p["mask_emb"] = normal(d)
        out_std = init_std / math.sqrt(2 * cfg.depth)
        for i in range(cfg.depth):
            p[f"blk{i}.norm1"] = ones(d)
            for w in ("wq", "wk", "wv"):
                p[f"blk{i}.{w}"] = normal(d, d)
            p[f"blk{i}.wo"] = normal(d, d, std=out_std)
            p[f"blk{i}.norm2"] = ones(d)
            p[f"blk{i}.w1"] = normal(d, 4 * d)
            p[f"blk{i}.w2"] = normal(4 * d, d, std=out_std)
        p["norm_f"] = ones(d)
        self.heads = MultiHead(cfg.vocab, d, rng, zero_init=zero_head, init_std=init_std, dtype=dtype)
        p.update(self.heads.named_parameters())
        order = [n for n, _ in param_shapes(cfg)]
        self.params = {n: p[n] for n in order}

    # -- parameters -------------------------------------------------------

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self) -> list:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def load_arrays(self, arrays: dict) -> None:
        for name, t in self.params.items():
            src = np.asarray(arrays[name])
            if src.shape != t.shape:
                raise ShapeError(f"parameter {name}: shape {src.shape} != {t.shape}")
            t.data[...] = src

    @property
    def dtype(self):
        return self.params["pos_emb"].data.dtype

    # -- graph path -------------------------------------------------------

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        g = self.cfg.vocab.g
        if tokens.ndim != 3 or tokens.shape[-1] != g:
            raise ShapeError(f"tokens must be [batch, n, {g}] subcode indices, got {tokens.shape}")
        return tokens

    def _embed(self, tokens: np.ndarray, class_ids, mask=None) -> Tensor:
        B, n, _ = tokens.shape
        cls = T.embedding(self.params["cls_emb"], np.asarray(class_ids, dtype=np.int64).reshape(B, 1))
        if n:
            tok = self.tok_emb(tokens)
            if mask is not None:
                tok = T.where_rows(mask, tok, self.params["mask_emb"])
            x = T.concat([cls, tok], axis=1)
        else:
            x = cls
        pos = T.embedding(self.params["pos_emb"], np.broadcast_to(np.arange(n + 1), (B, n + 1)))
        return x + pos

    def _block(self, x: Tensor, i: int, causal: bool) -> Tensor:
        p, cfg = self.params, self.cfg
        B, n, d = x.shape
        H, dh = cfg.heads, cfg.head_dim
        h = T.rms_norm(x, cfg.norm_eps) * p[f"blk{i}.norm1"]

        def split(w):
            return (h @ p[f"blk{i}.{w}"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)

        q, k, v = split("wq"), split("wk"), split("wv")
        att = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if causal:
            att = T.mask_fill(att, T.causal_keep(n))
        o = (T.softmax(att) @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
        x = x + o @ p[f"blk{i}.wo"]
        h = T.rms_norm(x, cfg.norm_eps) * p[f"blk{i}.norm2"]
        return x + T.gelu(h @ p[f"blk{i}.w1"]) @ p[f"blk{i}.w2"]

    def hidden(self, x: Tensor, causal: bool) -> Tensor:
        for i in range(self.cfg.depth):
            x = self._block(x, i, causal)
        return T.rms_norm(x, self.cfg.norm_eps) * self.params["norm_f"]

    def ar_forward(self, tokens, class_ids) -> list:
        """Causal logits. ``tokens`` is ``[B, n, g]`` with ``n <= seq_len``; returns g
        tensors of shape ``[B, n+1, 2^b]``, position ``l`` predicting token ``l``."""
        tokens = self._check_tokens(tokens)
        B, n, _ = tokens.shape
        if n > self.cfg.seq_len:
            raise ContractError(f"sequence of {n} tokens exceeds the context window of {self.cfg.seq_len}")
        h = self.hidden(self._embed(tokens, class_ids), causal=True)
        return self.heads(h)

    def mlm_forward(self, tokens, mask, class_ids) -> list:
        """Bidirectional logits at masked positions, in row-major order of ``mask``.

        Returns g tensors of shape ``[num_masked, 2^b]``.
        """
        tokens = self._check_tokens(tokens)
        mask = np.asarray(mask, dtype=bool)
        B, n, _ = tokens.shape
        if mask.shape != (B, n):
            raise ShapeError(f"mask shape {mask.shape} != {(B, n)}")
        if not mask.any():
            raise ContractError("MLM forward needs at least one masked position")
        if n != self.cfg.seq_len:
            raise ContractError(f"MLM expects exactly {self.cfg.seq_len} tokens, got {n}")
        h = self.hidden(self._embed(tokens, class_ids, mask), causal=False)
        rows = (np.arange(B)[:, None] * (n + 1) + 1 + np.arange(n)[None, :])[mask]
        picked = T.embedding(h.reshape(B * (n + 1), self.cfg.dim), rows)
        return self.heads(picked)

    def ar_loss(self, tokens, class_ids) -> Tensor:
        tokens = self._check_tokens(tokens)
        B, L, g = tokens.shape
        logits = self.ar_forward(tokens[:, :-1], class_ids)
        flat = [lg.reshape(B * L, lg.shape[-1]) for lg in logits]
        return multi_head_loss(flat, tokens.reshape(B * L, g))

    def mlm_loss(self, tokens, mask, class_ids) -> Tensor:
        tokens = self._check_tokens(tokens)
        logits = self.mlm_forward(tokens, mask, class_ids)
        return multi_head_loss(logits, tokens[np.asarray(mask, dtype=bool)])

    # -- numpy inference path ---------------------------------------------

    def arrays(self) -> dict:
        return {n: t.data for n, t in self.params.items()}

    def embed_np(self, tokens, class_ids, positions=None, mask=None) -> np.ndarray:
        """``[B, 1+n, dim]`` input features: class token then tokens.

        ``positions`` defaults to ``0..n``; the sliding window passes
        window-relative positions explicitly.
        """
        p = self.arrays()
        tokens = np.asarray(tokens)
        B, n = tokens.shape[:2]
        cls = p["cls_emb"][np.asarray(class_ids, dtype=np.int64)][:, None, :]
        if n:
            tok = self.tok_emb.embed_np(tokens)
            if mask is not None:
                tok = np.where(np.asarray(mask)[..., None], p["mask_emb"], tok)
            x = np.concatenate([cls, tok], axis=1)
        else:
            x = cls
        pos = np.arange(n + 1) if positions is None else np.asarray(positions)
        return x + p["pos_emb"][pos]

    def hidden_np(self, x: np.ndarray, causal: bool, capture: list | None = None, cache=None) -> np.ndarray:
        """Run the blocks on ``x [B, n, dim]``.

        With a :class:`KVCache`, ``x`` holds only new positions that attend to
        everything cached before them; ``capture`` collects per-layer
        ``[B, H, n, n]`` attention probabilities.
        """
        p, cfg = self.arrays(), self.cfg
        B, n, d = x.shape
        H, dh = cfg.heads, cfg.head_dim
        for i in range(cfg.depth):
            h = T.rms_norm_np(x, cfg.norm_eps) * p[f"blk{i}.norm1"]
            q, k, v = ((h @ p[f"blk{i}.{w}"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
                       for w in ("wq", "wk", "wv"))
            past = 0
            if cache is not None:
                past = cache.length
                k, v = cache.extend(i, k, v)
            att = (q @ np.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
            if causal:
                keep = np.tril(np.ones((n, past + n), dtype=bool), k=past)
                att = np.where(keep, att, att.dtype.type(T.MASK_FILL))
            probs = T.softmax_np(att)
            if capture is not None:
                capture.append(probs)
            o = (probs @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
            x = x + o @ p[f"blk{i}.wo"]
            h = T.rms_norm_np(x, cfg.norm_eps) * p[f"blk{i}.norm2"]
            x = x + T.gelu_np(h @ p[f"blk{i}.w1"]) @ p[f"blk{i}.w2"]
        if cache is not None:
            cache.length += n
        return T.rms_norm_np(x, cfg.norm_eps) * p["norm_f"]

    def logits_np(self, hidden: np.ndarray) -> list:
        return self.heads.logits_np(hidden)


class KVCache:
    """Per-layer keys and values for incremental causal decoding."""

    def __init__(self, model: Transformer, batch: int, capacity: int):
        cfg = model.cfg
        shape = (batch, cfg.heads, capacity, cfg.head_dim)
        self.k = [np.zeros(shape, dtype=model.dtype) for _ in range(cfg.depth)]
        self.v = [np.zeros(shape, dtype=model.dtype) for _ in range(cfg.depth)]
        self.length = 0

    def extend(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple:
        s, e = self.length, self.length + k.shape[2]
        if e > self.k[layer].shape[2]:
            raise ContractError(f"KV cache capacity {self.k[layer].shape[2]} exceeded")
        self.k[layer][:, :, s:e] = k
        self.v[layer][:, :, s:e] = v
        return self.k[layer][:, :, :e], self.v[layer][:, :, :e]


def attention_capture(model: Transformer, tokens, class_ids) -> list:
    """Per-layer ``[B, heads, n+1, n+1]`` post-softmax attention for ``tokens [B, n, g]``.

    AR models use the causal mask, MLM models attend bidirectionally (no mask
    applied to the tokens).
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 2:
        tokens = tokens[None]
    class_ids = np.atleast_1d(class_ids)
    if tokens.shape[1] > model.cfg.seq_len:
        raise ContractError(f"{tokens.shape[1]} tokens exceed the context window")
    captured = []
    with T.no_grad():
        model.hidden_np(model.embed_np(tokens, class_ids), causal=model.cfg.mode == "ar", capture=captured)
    return captured


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def drop_classes(class_ids, prob: float, null_class: int, rng) -> np.ndarray:
    ids = np.array(class_ids, dtype=np.int64, copy=True)
    ids[rng.random(len(ids)) < prob] = null_class
    return ids


class LmTrainer:
    """Owns a model, its AdamW state, the data RNG and the training log."""

    def __init__(self, model: Transformer, lr: float = 1e-4, weight_decay: float = 0.05,
                 betas=(0.9, 0.95), seed: int = 0):
        self.model = model
        self.opt = T.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay, betas=betas)
        self.rng = np.random.default_rng(seed)
        self.step = 0
        self.log = []  # (step, loss, lr, wall_ms)

    def loss(self, tokens, class_ids, mask=None) -> Tensor:
        cfg = self.model.cfg
        ids = drop_classes(class_ids, cfg.class_drop_prob, cfg.null_class, self.rng)
        if cfg.mode == "ar":
            return self.model.ar_loss(tokens, ids)
        if mask is None:
            mask = sample_mask(self.rng, len(tokens), cfg.seq_len)
        return self.model.mlm_loss(tokens, mask, ids)

    def train_step(self, tokens, class_ids, mask=None) -> float:
        t0 = time.perf_counter()
        loss = self.loss(tokens, class_ids, mask)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {self.step}",
                                   diagnostics={"step": self.step, "loss": value})
        self.opt.zero_grad()
        loss.backward()
        try:
            self.opt.step()
        except NumericalError as exc:
            raise TrainingDiverged(f"{exc} at step {self.step}", diagnostics={"step": self.step}) from exc
        self.step += 1
        self.log.append((self.step, value, self.opt.lr, (time.perf_counter() - t0) * 1000.0))
        return value

    def fit(self, subcodes: np.ndarray, labels: np.ndarray, steps: int, batch: int = 64,
            on_step=None) -> list:
        """Minibatch training on ``subcodes [N, L, g]``; batches drawn by epoch permutation."""
        N = len(subcodes)
        if N == 0:
            raise ConfigError("cannot train on an empty token dataset")
        order, cursor = self.rng.permutation(N), 0
        losses = []
        for _ in range(steps):
            if cursor + min(batch, N) > N:
                order, cursor = self.rng.permutation(N), 0
            idx = order[cursor:cursor + batch]
            cursor += batch
            losses.append(self.train_step(subcodes[idx], labels[idx]))
            if on_step is not None:
                on_step(self.step, losses[-1])
        return losses

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr", "wall_ms"])
            for step, loss, lr, ms in self.log:
                w.writerow([step, repr(loss), lr, f"{ms:.3f}"])

    def checkpoint(self) -> "LmCheckpoint":
        return LmCheckpoint(self.model, self.step, self.rng.bit_generator.state)


def ar_train_step(batch, model_or_trainer, opt=None) -> float:
    """One teacher-forced AR step on ``(subcodes [B, L, g], class_ids)``."""
    trainer = _trainer(model_or_trainer, opt, "ar")
    return trainer.train_step(*batch)


def mlm_train_step(batch, model_or_trainer, opt=None, mask=None) -> float:
    trainer = _trainer(model_or_trainer, opt, "mlm")
    return trainer.train_step(batch[0], batch[1], mask)


def _trainer(obj, opt, mode) -> LmTrainer:
    trainer = obj if isinstance(obj, LmTrainer) else LmTrainer(obj)
    if opt is not None:
        trainer.opt = opt
    if trainer.model.cfg.mode != mode:
        raise ContractError(f"{mode} step on a {trainer.model.cfg.mode} model")
    return trainer


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

@dataclass
class LmCheckpoint:
    model: Transformer
    step: int = 0
    rng_state: dict | None = None

    MAGIC = b"ELML"

    @property
    def config(self) -> LmConfig:
        return self.model.cfg

    def save(self, path) -> None:
        meta = self.model.cfg.to_dict()
        meta["step"] = self.step
        meta["rng_state"] = json.dumps(self.rng_state, sort_keys=True)
        write_container(path, self.MAGIC, meta, [t.data for t in self.model.params.values()])

    @classmethod
    def load(cls, path, dtype=np.float64) -> "LmCheckpoint":
        box = {}

        def shapes_for(raw):
            try:
                box["cfg"] = cfg = LmConfig.from_dict(raw)
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path}: bad model config: {exc}") from exc
            return [s for _, s in param_shapes(cfg)]

        raw_cfg, arrays = read_container(path, cls.MAGIC, shapes_for)
        cfg = box["cfg"]
        model = Transformer(cfg, dtype=dtype)
        model.load_arrays({n: a for (n, _), a in zip(param_shapes(cfg), arrays)})
        state = json.loads(raw_cfg.get("rng_state", "null"))
        return cls(model, int(raw_cfg.get("step", 0)), state)


def with_mode(cfg: LmConfig, mode: str) -> LmConfig:
    return replace(cfg, mode=mode)


def write_loss_csv(path, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
