"""Procedural class-labeled image corpora and PGM/PPM image IO.

Two generator kinds:

``shapes``
    One geometric shape per image on a class-specific background, filled
    with a class-specific stripe texture. Position, size, stripe phase and
    pixel noise are per-sample random.
``grammar``
    Images assembled from fixed f x f tiles where the tile at (row, col) is
    a deterministic function of (class_id, row, col). Every image of a class
    is identical, so after freezing a tokenizer the token sequence depends
    on the class alone.

Per-sample RNG streams are seeded from ``(master_seed, sample_index)`` so
generation order never changes content.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

KINDS = ("shapes", "grammar")


@dataclass
class ImageSample:
    pixels: np.ndarray  # H x W x C, float64 in [0, 1]
    class_id: int
    seed: int


@dataclass(frozen=True)
class CorpusSpec:
    num_classes: int = 10
    samples_per_class: int = 600
    H: int = 32
    W: int = 32
    C: int = 1
    kind: str = "shapes"
    master_seed: int = 0
    f: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown corpus kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 1 or self.samples_per_class < 0 or min(self.H, self.W) < 1:
            raise ConfigError("corpus counts and sizes must be positive")
        if self.C not in (1, 3):
            raise ConfigError("C must be 1 (PGM) or 3 (PPM)")


def generate_corpus(spec: CorpusSpec) -> list:
    if spec.H % spec.f or spec.W % spec.f:
        warnings.warn(f"image size {spec.H}x{spec.W} is not divisible by f={spec.f}; tokenization will fail",
                      stacklevel=2)
    corpus = []
    for c in range(spec.num_classes):
        for j in range(spec.samples_per_class):
            index = c * spec.samples_per_class + j
            corpus.append(generate_sample(spec, c, index))
    return corpus


def sample_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(2, np.uint32).view(np.uint64)[0])


def generate_sample(spec: CorpusSpec, class_id: int, index: int) -> ImageSample:
    seed = sample_seed(spec.master_seed, index)
    if spec.kind == "shapes":
        pixels = _shapes_image(spec, class_id, np.random.default_rng(seed))
    else:
        pixels = _grammar_image(spec, class_id)
    return ImageSample(pixels, class_id, seed)


_SHAPES = ("disk", "square", "triangle", "ring", "cross", "diamond", "hbar", "vbar", "ellipse", "frame")


def _class_palette(c: int, num_classes: int):
    bg = 0.12 + 0.7 * (c / max(num_classes - 1, 1))
    fg = bg + 0.45 if bg < 0.5 else bg - 0.45
    return bg, fg


def _shape_mask(kind: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "triangle":
        return (dy <= r * 0.7) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "ring":
        d = dy ** 2 + dx ** 2
        return (d <= r ** 2) & (d >= (0.55 * r) ** 2)
    if kind == "cross":
        return ((np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r))
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "hbar":
        return (np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r * 1.2)
    if kind == "vbar":
        return (np.abs(dx) <= r * 0.35) & (np.abs(dy) <= r * 1.2)
    if kind == "ellipse":
        return (dy / (0.55 * r)) ** 2 + (dx / r) ** 2 <= 1.0
    # frame
    inner = (np.abs(dy) <= r * 0.5) & (np.abs(dx) <= r * 0.5)
    return (np.abs(dy) <= r * 0.9) & (np.abs(dx) <= r * 0.9) & ~inner


def _shapes_image(spec: CorpusSpec, c: int, rng) -> np.ndarray:
    H, W = spec.H, spec.W
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    kind = _SHAPES[c % len(_SHAPES)]
    bg, fg = _class_palette(c, spec.num_classes)
    scale = min(H, W) / 32.0
    cy = H / 2 + rng.uniform(-4, 4) * scale
    cx = W / 2 + rng.uniform(-4, 4) * scale
    r = rng.uniform(7, 11) * scale
    freq = (1 + c % 4) * np.pi / (4.0 * scale)
    angle = np.pi * c / spec.num_classes
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.12 * np.sin(freq * (np.cos(angle) * yy + np.sin(angle) * xx) + phase)
    img = np.where(_shape_mask(kind, yy, xx, cy, cx, r), fg + stripes, bg)
    # smooth per-sample illumination so flat regions still vary patch to patch
    gy, gx = rng.uniform(-0.2, 0.2, 2)
    img = img + gy * (yy / H - 0.5) + gx * (xx / W - 0.5)
    for _ in range(2):  # background texture: two random gratings
        theta, k, ph = rng.uniform(0, np.pi), rng.uniform(0.3, 1.6) / scale, rng.uniform(0, 2 * np.pi)
        img = img + 0.06 * np.sin(k * (np.cos(theta) * yy + np.sin(theta) * xx) + ph)
    img = img + rng.normal(0.0, 0.03, img.shape)
    img = np.clip(img, 0.0, 1.0)
    if spec.C == 1:
        return img[..., None]
    tint = np.array([1.0, 0.75 + 0.5 * ((c * 3) % 5) / 4, 0.75 + 0.5 * ((c * 7) % 5) / 4])
    return np.clip(img[..., None] * tint, 0.0, 1.0)


_TILE_COUNT = 16


def grammar_tiles(f: int) -> np.ndarray:
    """The fixed tile alphabet of the grammar corpus (independent of seeds)."""
    rng = np.random.default_rng(20240607)
    tiles = np.where(rng.random((_TILE_COUNT, f, f)) < 0.5, 0.1, 0.9)
    tiles[0] = 0.1
    tiles[1] = 0.9
    return tiles


def grammar_tile_index(class_id: int, row: int, col: int) -> int:
    a = 1 + class_id % 3
    b = 2 + class_id % 5
    return (a * row + b * col + class_id) % _TILE_COUNT


def _grammar_image(spec: CorpusSpec, c: int) -> np.ndarray:
    f = spec.f
    h, w = spec.H // f, spec.W // f
    tiles = grammar_tiles(f)
    img = np.zeros((spec.H, spec.W))
    for r in range(h):
        for q in range(w):
            img[r * f:(r + 1) * f, q * f:(q + 1) * f] = tiles[grammar_tile_index(c, r, q)]
    return np.repeat(img[..., None], spec.C, axis=2)


def stack(corpus) -> tuple:
    """Corpus -> (pixels [N, H, W, C], class ids [N])."""
    if not corpus:
        return np.zeros((0, 0, 0, 0)), np.zeros(0, dtype=np.int64)
    return (np.stack([s.pixels for s in corpus]),
            np.array([s.class_id for s in corpus], dtype=np.int64))


def split(corpus, val_fraction: float, seed: int = 0) -> tuple:
    """Stratified, disjoint train/val split preserving corpus order."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    by_class = {}
    for i, s in enumerate(corpus):
        by_class.setdefault(s.class_id, []).append(i)
    val_idx = set()
    for c in sorted(by_class):
        members = by_class[c]
        n_val = int(round(val_fraction * len(members)))
        val_idx.update(rng.permutation(members)[:n_val].tolist())
    train = [s for i, s in enumerate(corpus) if i not in val_idx]
    val = [s for i, s in enumerate(corpus) if i in val_idx]
    return train, val


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

def quantize_pixels(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, sample) -> None:
    """Binary PGM (C=1) or PPM (C=3), maxval 255."""
    pixels = sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    H, W, C = pixels.shape
    if C not in (1, 3):
        raise FormatError(f"cannot write {C}-channel image as PGM/PPM")
    header = f"{'P5' if C == 1 else 'P6'}\n{W} {H}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quantize_pixels(pixels).tobytes())


def read_image(path, class_id: int = 0, seed: int = 0) -> ImageSample:
    raw = Path(path).read_bytes()
    return ImageSample(parse_image(raw), class_id, seed)


def parse_image(raw: bytes) -> np.ndarray:
    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            ch = raw[pos:pos + 1]
            if ch == b"#":
                while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"unexpected end of header at byte {pos}")
        return raw[start:pos], start

    magic, off = token()
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {magic!r} at byte {off}; expected P5 or P6")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, off = token()
        if not tok.isdigit():
            raise FormatError(f"bad {name} {tok!r} at byte {off}")
        fields.append(int(tok))
    W, H, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} at byte {off}; expected 255")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after header at byte {pos}")
    pos += 1
    C = 1 if magic == b"P5" else 3
    n = W * H * C
    body = raw[pos:pos + n]
    if len(body) != n:
        raise FormatError(f"truncated pixel data at byte {pos + len(body)}: expected {n} bytes")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W, C).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# corpus on disk
# ---------------------------------------------------------------------------

MANIFEST_HEADER = "# elmlab manifest v1: path class_id seed"


def write_manifest(path, records) -> None:
    """``records``: iterable of (relative path, class_id, seed)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for rel, c, seed in records:
            fh.write(f"{rel}\t{int(c)}\t{int(seed)}\n")


def read_manifest(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            records.append((parts[0], int(parts[1]), int(parts[2])))
    return records


def write_corpus(corpus, directory, name: str = "manifest.txt", subdir: str = "images") -> Path:
    directory = Path(directory)
    (directory / subdir).mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(corpus):
        ext = "pgm" if s.pixels.shape[-1] == 1 else "ppm"
        rel = f"{subdir}/{i:05d}_c{s.class_id}.{ext}"
        write_image(directory / rel, s)
        records.append((rel, s.class_id, s.seed))
    manifest = directory / name
    write_manifest(manifest, records)
    return manifest


def read_corpus(manifest) -> list:
    manifest = Path(manifest)
    base = manifest.parent
    return [read_image(base / rel, c, seed) for rel, c, seed in read_manifest(manifest)]


def nearest_mean_accuracy(train, test) -> float:
    """Accuracy of a nearest-class-mean classifier on raw pixels."""
    xtr, ytr = stack(train)
    xte, yte = stack(test)
    classes = np.unique(ytr)
    means = np.stack([xtr[ytr == c].reshape(-1, xtr[0].size).mean(axis=0) for c in classes])
    d = ((xte.reshape(len(xte), -1)[:, None, :] - means[None]) ** 2).sum(axis=2)
    return float(np.mean(classes[d.argmin(axis=1)] == yte))


__all__ = ["CorpusSpec", "ImageSample", "generate_corpus", "split", "write_image", "read_image",
           "write_manifest", "read_manifest", "write_corpus", "read_corpus", "stack"]
