"""Patch autoencoder tokenizers: binary (BAE) and vector-quantized (VQ).

The encoder maps every non-overlapping f x f patch independently to a
D-dim latent (linear projection, residual MLP blocks, linear head); the
decoder mirrors it. Because nothing mixes positions, any h x w grid of
codes decodes to an (h*f) x (w*f) image.

BAE latents pass through a sigmoid and are quantized per channel to
{0, 1}, either by thresholding at 0.5 or by Bernoulli sampling. Training
sends gradients through the quantizer with a straight-through estimator.
VQ latents are raw and snap to the nearest row of a learned K x D codebook.

Defaults: the BAE trains through the deterministic threshold and datasets
are tokenized by Bernoulli sampling. Training through Bernoulli noise pushes
latents into the saturated tails of the sigmoid, where the straight-through
gradient vanishes and many codes are never reached.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged
from .formats import read_container, write_container
from .tensor import Tensor
from .vocab import VocabSpec, bits_to_codes, codes_to_bits, codes_to_subcodes, subcodes_to_codes

KINDS = ("bae", "vq")
MODES = ("sign", "bernoulli", "vq")


@dataclass
class TokenizerConfig:
    f: int = 4
    D: int = 8
    C: int = 1
    hidden: int = 64
    blocks: int = 2
    kind: str = "bae"
    K: int = 256
    beta: float = 0.25
    train_quantizer: str = "sign"
    steps: int = 1500
    batch: int = 32
    lr: float = 2e-3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"tokenizer kind must be one of {KINDS}, got {self.kind!r}")
        if self.train_quantizer not in ("sign", "bernoulli"):
            raise ConfigError(f"train_quantizer must be sign or bernoulli, got {self.train_quantizer!r}")
        if self.kind == "vq" and self.K < 1:
            raise ConfigError("VQ codebook needs K >= 1")
        for name in ("f", "D", "C", "hidden", "blocks", "steps", "batch"):
            if getattr(self, name) < (0 if name in ("blocks", "steps") else 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.D > 16:
            raise ConfigError(f"D={self.D} codes do not fit the u16 token format")

    @property
    def patch_dim(self) -> int:
        return self.f * self.f * self.C

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TokenizerConfig":
        kw = {}
        for fl in fields(cls):
            if fl.name in raw:
                kw[fl.name] = type(getattr(cls, fl.name))(raw[fl.name])
        return cls(**kw)


def param_shapes(cfg: TokenizerConfig) -> list:
    """Declaration order of every parameter array; the checkpoint layout."""
    h, shapes = cfg.hidden, []
    for side, d_in, d_out in (("enc", cfg.patch_dim, cfg.D), ("dec", cfg.D, cfg.patch_dim)):
        shapes += [(f"{side}.in.w", (d_in, h)), (f"{side}.in.b", (h,))]
        for i in range(cfg.blocks):
            shapes += [(f"{side}.blk{i}.w1", (h, 2 * h)), (f"{side}.blk{i}.b1", (2 * h,)),
                       (f"{side}.blk{i}.w2", (2 * h, h)), (f"{side}.blk{i}.b2", (h,))]
        shapes += [(f"{side}.out.w", (h, d_out)), (f"{side}.out.b", (d_out,))]
    return shapes


def init_params(cfg: TokenizerConfig, rng) -> dict:
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".w2"):
            params[name] = np.zeros(shape)  # residual branches start as identity
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, shape[0] ** -0.5, shape)
    return params


class VqCodebook:
    """K x D code matrix with per-code usage counters."""

    def __init__(self, codes, usage=None):
        self.codes = np.asarray(codes, dtype=np.float64)
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ConfigError(f"codebook must be a nonempty K x D matrix, got shape {self.codes.shape}")
        self.usage = np.zeros(len(self.codes), np.int64) if usage is None else np.asarray(usage, np.int64).copy()

    @property
    def K(self) -> int:
        return self.codes.shape[0]


def nearest_code(flat: np.ndarray, codes: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Row-wise argmin of squared Euclidean distance; ties go to the lowest index."""
    out = np.empty(len(flat), np.int64)
    for s in range(0, len(flat), chunk):
        diff = flat[s:s + chunk, None, :] - codes[None, :, :]
        out[s:s + chunk] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return out


def vq_lookup(latent_raw, codebook: VqCodebook, count: bool = True) -> tuple:
    """Return ``(indices [...], quantized [..., D])`` and bump usage counters."""
    if codebook is None or codebook.codes.size == 0:
        raise ConfigError("VQ lookup needs a nonempty codebook")
    z = np.asarray(latent_raw, dtype=np.float64)
    if z.shape[-1] != codebook.codes.shape[1]:
        raise ShapeError(f"latent width {z.shape[-1]} != codebook width {codebook.codes.shape[1]}")
    idx = nearest_code(z.reshape(-1, z.shape[-1]), codebook.codes).reshape(z.shape[:-1])
    if count:
        codebook.usage += np.bincount(idx.ravel(), minlength=codebook.K)
    return idx, codebook.codes[idx]


def quantize_sign(latent) -> np.ndarray:
    """Threshold at 0.5; exactly 0.5 maps to 1."""
    return (np.asarray(latent) >= 0.5).astype(np.uint8)


def quantize_bernoulli(latent, rng) -> np.ndarray:
    """Each bit is 1 with probability equal to its latent value."""
    z = np.asarray(latent)
    return (rng.random(z.shape) < z).astype(np.uint8)


def patchify(images: np.ndarray, f: int) -> np.ndarray:
    """``[N, H, W, C]`` -> ``[N, H/f, W/f, f*f*C]``."""
    N, H, W, C = images.shape
    if H % f or W % f:
        raise ShapeError(f"image {H}x{W} is not divisible by patch size f={f}")
    x = images.reshape(N, H // f, f, W // f, f, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(N, H // f, W // f, f * f * C)


def unpatchify(patches: np.ndarray, f: int, C: int) -> np.ndarray:
    N, h, w, _ = patches.shape
    x = patches.reshape(N, h, w, f, f, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(N, h * f, w * f, C)


def _mlp_stack(x: Tensor, p: dict, side: str, blocks: int) -> Tensor:
    x = x @ p[f"{side}.in.w"] + p[f"{side}.in.b"]
    for i in range(blocks):
        hdn = T.gelu(T.rms_norm(x, 1e-6) @ p[f"{side}.blk{i}.w1"] + p[f"{side}.blk{i}.b1"])
        x = x + (hdn @ p[f"{side}.blk{i}.w2"] + p[f"{side}.blk{i}.b2"])
    return T.gelu(x) @ p[f"{side}.out.w"] + p[f"{side}.out.b"]


def encoder_forward(patches: Tensor, p: dict, cfg: TokenizerConfig) -> Tensor:
    raw = _mlp_stack(patches, p, "enc", cfg.blocks)
    return T.sigmoid(raw) if cfg.kind == "bae" else raw


def decoder_forward(z: Tensor, p: dict, cfg: TokenizerConfig) -> Tensor:
    return T.sigmoid(_mlp_stack(z, p, "dec", cfg.blocks))


@dataclass
class TokenizerCheckpoint:
    config: TokenizerConfig
    params: dict
    codebook: VqCodebook | None = None
    log: list = field(default_factory=list)  # (epoch, mean loss) pairs

    MAGIC = b"ELMC"

    def tensors(self, dtype=None, requires_grad: bool = False) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad, dtype=dtype) for k, v in self.params.items()}

    def save(self, path) -> None:
        arrays = [self.params[name] for name, _ in param_shapes(self.config)]
        if self.config.kind == "vq":
            arrays += [self.codebook.codes, self.codebook.usage.astype(np.float64)]
        write_container(path, self.MAGIC, self.config.to_dict(), arrays)

    @classmethod
    def load(cls, path) -> "TokenizerCheckpoint":
        box = {}

        def shapes_for(raw):
            try:
                box["cfg"] = cfg = TokenizerConfig.from_dict(raw)
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path}: bad tokenizer config: {exc}") from exc
            out = [s for _, s in param_shapes(cfg)]
            return out + ([(cfg.K, cfg.D), (cfg.K,)] if cfg.kind == "vq" else [])

        _, arrays = read_container(path, cls.MAGIC, shapes_for)
        cfg = box["cfg"]
        names = [n for n, _ in param_shapes(cfg)]
        params = {n: a.astype(np.float64) for n, a in zip(names, arrays)}
        book = VqCodebook(arrays[-2], arrays[-1].astype(np.int64)) if cfg.kind == "vq" else None
        return cls(cfg, params, book)


def _as_images(images, cfg: TokenizerConfig) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != cfg.C:
        raise ShapeError(f"expected images [N, H, W, {cfg.C}], got shape {np.shape(images)}")
    return x, squeeze


def encode(images, ckpt: TokenizerCheckpoint) -> np.ndarray:
    """Images ``[N, H, W, C]`` (or one ``[H, W, C]``) -> latents ``[N, H/f, W/f, D]``.

    BAE latents lie in (0, 1); VQ latents are the raw pre-quantization values.
    """
    x, squeeze = _as_images(images, ckpt.config)
    patches = patchify(x, ckpt.config.f)
    with T.no_grad():
        z = encoder_forward(Tensor(patches), ckpt.tensors(), ckpt.config).data
    return z[0] if squeeze else z


def decode(bits_or_codes, ckpt: TokenizerCheckpoint) -> np.ndarray:
    """BAE: bits ``[N, h, w, D]``; VQ: indices ``[N, h, w]``. Returns images in [0, 1]."""
    cfg = ckpt.config
    arr = np.asarray(bits_or_codes)
    if cfg.kind == "vq":
        if not np.issubdtype(arr.dtype, np.integer):
            raise ShapeError("VQ decode expects integer code indices")
        squeeze = arr.ndim == 2
        arr = arr[None] if squeeze else arr
        if arr.ndim != 3:
            raise ShapeError(f"VQ decode expects [N, h, w] indices, got shape {np.shape(bits_or_codes)}")
        z = ckpt.codebook.codes[arr]
    else:
        squeeze = arr.ndim == 3
        arr = arr[None] if squeeze else arr
        if arr.ndim != 4 or arr.shape[-1] != cfg.D:
            raise ShapeError(f"BAE decode expects [N, h, w, {cfg.D}] bits, got shape {np.shape(bits_or_codes)}")
        z = arr.astype(np.float64)
    with T.no_grad():
        patches = decoder_forward(Tensor(z), ckpt.tensors(), cfg).data
    img = unpatchify(patches, cfg.f, cfg.C)
    return img[0] if squeeze else img


def reconstruct(images, ckpt: TokenizerCheckpoint) -> np.ndarray:
    """Encode, quantize deterministically, decode."""
    z = encode(images, ckpt)
    if ckpt.config.kind == "vq":
        idx, _ = vq_lookup(z, ckpt.codebook, count=False)
        return decode(idx, ckpt)
    return decode(quantize_sign(z), ckpt)


def _sq_mean(a: Tensor, b) -> Tensor:
    d = a - b
    return (d * d).mean()


def train_tokenizer(images, config: TokenizerConfig, dtype=np.float32, on_step=None) -> TokenizerCheckpoint:
    """Fit the autoencoder by minibatch AdamW on reconstruction MSE.

    VQ adds the codebook term ``|sg(z) - q|^2`` and ``beta * |z - sg(q)|^2``.
    A non-finite loss raises :class:`TrainingDiverged` carrying the last
    finite checkpoint.
    """
    cfg = config
    x, _ = _as_images(images, cfg)
    if len(x) == 0:
        raise ConfigError("cannot train a tokenizer on an empty corpus")
    patches_all = patchify(x, cfg.f)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, rng)
    book = None
    if cfg.kind == "vq":
        book = VqCodebook(rng.uniform(-1.0 / cfg.K, 1.0 / cfg.K, (cfg.K, cfg.D)))
    with T.default_dtype(dtype):
        tp = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        cb = Tensor(book.codes, requires_grad=True) if book is not None else None
    trainable = list(tp.values()) + ([cb] if cb is not None else [])
    opt = T.AdamW(trainable, lr=cfg.lr, weight_decay=0.0)
    steps_per_epoch = max(1, math.ceil(len(x) / cfg.batch))
    log, epoch_losses = [], []
    order = rng.permutation(len(x))
    cursor = 0

    def snapshot():
        snap = {k: t.data.astype(np.float64) for k, t in tp.items()}
        return TokenizerCheckpoint(cfg, snap, VqCodebook(cb.data) if cb is not None else None, list(log))

    last_good = snapshot()
    for step in range(cfg.steps):
        if cursor + cfg.batch > len(order):
            order, cursor = rng.permutation(len(x)), 0
        idx = order[cursor:cursor + cfg.batch]
        cursor += cfg.batch
        batch = Tensor(patches_all[idx].reshape(-1, cfg.patch_dim), dtype=dtype)
        z = encoder_forward(batch, tp, cfg)
        if cfg.kind == "bae":
            q = quantize_bernoulli(z.data, rng) if cfg.train_quantizer == "bernoulli" else quantize_sign(z.data)
            recon = decoder_forward(T.straight_through(z, q.astype(z.dtype)), tp, cfg)
            loss = _sq_mean(recon, batch)
        else:
            codes = nearest_code(z.data.astype(np.float64), cb.data.astype(np.float64))
            q = T.embedding(cb, codes)
            recon = decoder_forward(T.straight_through(z, q.data), tp, cfg)
            loss = (_sq_mean(recon, batch) + _sq_mean(q, T.detach(z))
                    + _sq_mean(z, T.detach(q)) * cfg.beta)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"tokenizer loss became {value} at step {step}", last_good=last_good,
                                   diagnostics={"step": step})
        opt.zero_grad()
        loss.backward()
        opt.step()
        epoch_losses.append(value)
        if (step + 1) % steps_per_epoch == 0 or step + 1 == cfg.steps:
            log.append((len(log), float(np.mean(epoch_losses))))
            epoch_losses = []
        if on_step is not None:
            on_step(step, value)
        if (step + 1) % 100 == 0:
            last_good = snapshot()
    return snapshot()


@dataclass
class TokenDataset:
    """Tokenized images: one raster-order row of integer codes per image."""

    codes: np.ndarray  # [N, L] int64, codes in [0, 2^D)
    labels: np.ndarray  # [N]
    h: int
    w: int
    D: int
    mode: str = "sign"
    seed: int = 0
    num_classes: int = 10
    g: int = 1

    MAGIC = b"ELMT"
    VERSION = 1
    _HEADER = struct.Struct("<IHHBBBBQH")

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(len(self.codes), -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.mode not in MODES:
            raise ConfigError(f"quantizer mode must be one of {MODES}")
        if self.codes.shape[1] != self.h * self.w and len(self.codes):
            raise ShapeError(f"rows of length {self.codes.shape[1]} do not match {self.h}x{self.w} grid")
        if len(self.labels) != len(self.codes):
            raise ShapeError("one label per tokenized image required")

    @property
    def L(self) -> int:
        return self.h * self.w

    @property
    def vocab(self) -> VocabSpec:
        return VocabSpec(self.D, self.g, self.D // self.g)

    def __len__(self) -> int:
        return len(self.codes)

    def subcodes(self, spec: VocabSpec | None = None) -> np.ndarray:
        """``[N, L, g]`` subcode indices under ``spec`` (default: the stored one)."""
        spec = spec or self.vocab
        if spec.D != self.D:
            raise ConfigError(f"vocabulary {spec} has D={spec.D} but tokens have D={self.D}")
        return codes_to_subcodes(self.codes, spec)

    def grids(self) -> np.ndarray:
        return self.codes.reshape(-1, self.h, self.w)

    def save(self, path) -> None:
        spec = self.vocab
        header = self._HEADER.pack(len(self), self.h, self.w, self.D, spec.g, spec.b,
                                   MODES.index(self.mode), self.seed, self.num_classes)
        body = np.empty((len(self), 1 + self.L * spec.g), dtype="<u2")
        body[:, 0] = self.labels
        body[:, 1:] = self.subcodes(spec).reshape(len(self), -1)
        with open(path, "wb") as fh:
            fh.write(self.MAGIC + struct.pack("<I", self.VERSION) + header + body.tobytes())

    @classmethod
    def load(cls, path) -> "TokenDataset":
        raw = Path(path).read_bytes()
        if raw[:4] != cls.MAGIC:
            raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte 0, expected {cls.MAGIC!r}")
        end = 8 + cls._HEADER.size
        if len(raw) < end:
            raise FormatError(f"{path}: truncated header at byte {len(raw)}")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != cls.VERSION:
            raise FormatError(f"{path}: unsupported version {version} at byte 4, expected {cls.VERSION}")
        n, h, w, D, g, b, mode, seed, ncls = cls._HEADER.unpack_from(raw, 8)
        if mode >= len(MODES):
            raise FormatError(f"{path}: unknown quantizer mode {mode} at byte 19")
        try:
            spec = VocabSpec(D, g, b)
        except ConfigError as exc:
            raise FormatError(f"{path}: inconsistent vocabulary header at byte 16: {exc}") from exc
        row = 1 + h * w * g
        if len(raw) != end + 2 * n * row:
            raise FormatError(f"{path}: body is {len(raw) - end} bytes at byte {end}, expected {2 * n * row}")
        body = np.frombuffer(raw, dtype="<u2", offset=end).reshape(n, row).astype(np.int64)
        codes = subcodes_to_codes(body[:, 1:].reshape(n, h * w, g), spec) if n else np.zeros((0, h * w))
        return cls(codes, body[:, 0], h, w, D, MODES[mode], seed, ncls, g)


def tokenize_images(images, ckpt: TokenizerCheckpoint, mode: str = "sign", seed: int = 0,
                    offset: int = 0, batch: int = 256) -> np.ndarray:
    """Images -> ``[N, h*w]`` raster-order integer codes.

    Bernoulli draws for image ``i`` come from the stream ``(seed, offset + i)``.
    """
    cfg = ckpt.config
    if (mode == "vq") != (cfg.kind == "vq"):
        raise ConfigError(f"mode {mode!r} does not fit a {cfg.kind} tokenizer")
    x, _ = _as_images(images, cfg)
    out = []
    for s in range(0, len(x), batch):
        z = encode(x[s:s + batch], ckpt)
        if mode == "vq":
            idx, _ = vq_lookup(z, ckpt.codebook)
            out.append(idx.reshape(len(z), -1))
            continue
        if mode == "sign":
            bits = quantize_sign(z)
        else:
            bits = np.stack([quantize_bernoulli(zi, np.random.default_rng([seed, offset + s + i]))
                             for i, zi in enumerate(z)])
        out.append(bits_to_codes(bits).reshape(len(z), -1))
    if not out:
        return np.zeros((0, 0), np.int64)
    return np.concatenate(out)


def vq_code_bits(K: int) -> int:
    return max(1, math.ceil(math.log2(K)))


def tokenize_dataset(corpus, ckpt: TokenizerCheckpoint, mode: str | None = None, seed: int = 0,
                     num_classes: int | None = None, g: int = 1) -> TokenDataset:
    """Tokenize a list of :class:`~elmlab.data.ImageSample` (or ``(images, labels)``)."""
    if isinstance(corpus, tuple):
        images, labels = corpus
    else:
        images = np.stack([s.pixels for s in corpus]) if corpus else np.zeros((0, 1, 1, ckpt.config.C))
        labels = np.array([s.class_id for s in corpus], np.int64)
    cfg = ckpt.config
    mode = mode or ("vq" if cfg.kind == "vq" else "bernoulli")
    images = np.asarray(images)
    if len(images) == 0:
        raise ConfigError("cannot tokenize an empty corpus")
    codes = tokenize_images(images, ckpt, mode, seed)
    h, w = images.shape[1] // cfg.f, images.shape[2] // cfg.f
    D = vq_code_bits(cfg.K) if mode == "vq" else cfg.D
    if num_classes is None:
        num_classes = int(np.max(labels)) + 1
    return TokenDataset(codes, labels, h, w, D, mode, seed if mode == "bernoulli" else 0, num_classes,
                        g if D % g == 0 else 1)


def detokenize(codes, h: int, w: int, ckpt: TokenizerCheckpoint) -> np.ndarray:
    """``[N, h*w]`` codes -> images."""
    codes = np.asarray(codes, dtype=np.int64).reshape(-1, h, w)
    if ckpt.config.kind == "vq":
        return decode(codes, ckpt)
    return decode(codes_to_bits(codes, ckpt.config.D), ckpt)


@dataclass
class UtilizationReport:
    counts: np.ndarray  # occurrences of every code, length = vocabulary size
    fraction: float
    sorted_log_counts: np.ndarray  # log(count) of used codes, most frequent first
    distinct: int
    total: int


def code_utilization(dataset, vocab_size: int | None = None) -> UtilizationReport:
    codes = dataset.codes if isinstance(dataset, TokenDataset) else np.asarray(dataset)
    if codes.size == 0:
        raise ConfigError("utilization of an empty dataset is undefined")
    if vocab_size is None:
        vocab_size = 1 << dataset.D if isinstance(dataset, TokenDataset) else int(codes.max()) + 1
    counts = np.bincount(codes.ravel(), minlength=vocab_size)
    used = counts[counts > 0]
    distinct = len(used)
    return UtilizationReport(counts, distinct / vocab_size, np.log(np.sort(used)[::-1]), distinct, int(codes.size))
