"""``elmlab`` command line: data -> tokenizer -> tokens -> LM -> samples -> reports.

Every invocation resolves a flat ``key=value`` configuration (built-in
defaults, then ``--config`` files, then ``--set`` pairs, then dedicated
flags), writes it to ``<out>/<command>-<hash>/config.txt`` and puts all
outputs next to it. The last line on stdout is the run directory, so shell
pipelines can chain commands. Failures print one line to stderr::

    elmlab: error code=2 kind=ConfigError: unknown config key 'lm.dpeth'
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis
from .data import CorpusSpec, generate_corpus, read_corpus, stack, write_corpus, write_image, write_manifest
from .errors import ConfigError, ElmError, FormatError, TrainingDiverged
from .model import LmCheckpoint, LmTrainer, Transformer, preset
from .sampling import (CfgSchedule, SamplerConfig, extend_generate, generate, tokens_to_image,
                       write_generation_manifest)
from .tokenizer import (TokenDataset, TokenizerCheckpoint, TokenizerConfig, code_utilization, reconstruct,
                        tokenize_dataset, train_tokenizer)
from .vocab import VocabSpec, subcodes_to_codes

log = logging.getLogger("elmlab")

DEFAULTS = {
    "seed": 0,
    "data.kind": "shapes",
    "data.num_classes": 10,
    "data.samples_per_class": 600,
    "data.H": 32,
    "data.W": 32,
    "data.C": 1,
    "tokenizer.kind": "bae",
    "tokenizer.D": 8,
    "tokenizer.f": 4,
    "tokenizer.hidden": 64,
    "tokenizer.blocks": 2,
    "tokenizer.K": 256,
    "tokenizer.beta": 0.25,
    "tokenizer.train_quantizer": "sign",
    "tokenizer.steps": 1500,
    "tokenizer.batch": 32,
    "tokenizer.lr": 2e-3,
    "tokenize.mode": "auto",
    "stats.order": 1,
    "lm.size": "s",
    "lm.depth": 0,
    "lm.dim": 0,
    "lm.heads": 0,
    "lm.mode": "ar",
    "lm.vocab": "2-4",
    "lm.class_drop_prob": 0.1,
    "lm.lr": 1e-4,
    "lm.weight_decay": 0.05,
    "lm.steps": 2000,
    "lm.batch": 64,
    "sample.cfg": "linear:1:3",
    "sample.top_k": 0,
    "sample.temperature": 1.0,
    "sample.tau": 0.0,
    "sample.iters": 10,
    "sample.n": 8,
    "sample.class": "cycle",
    "sample.batch": 50,
    "extend.class": 0,
    "extend.height": 8,
    "extend.width": 12,
    "attn.n": 100,
    "attn.head": 0,
    "eval.pool": 2,
    "in.data": "",
    "in.ckpt": "",
    "in.tokenizer": "",
    "in.tokens": "",
    "in.real": "",
    "in.gen": "",
}

# config sections each command reads (the run hash covers only these)
SECTIONS = {
    "gen-data": ("data",),
    "train-tokenizer": ("tokenizer", "in.data"),
    "tokenize": ("tokenize", "in.data", "in.ckpt"),
    "stats": ("stats", "in.tokens"),
    "train-lm": ("lm", "in.tokens"),
    "sample": ("sample", "in.ckpt", "in.tokenizer"),
    "extend": ("sample", "extend", "in.ckpt", "in.tokenizer"),
    "attn": ("attn", "in.ckpt", "in.tokens"),
    "eval": ("eval", "in.real", "in.gen", "in.tokenizer"),
}

SUMMARIES = {
    "gen-data": "write a synthetic image corpus",
    "train-tokenizer": "train a BAE or VQ patch tokenizer",
    "tokenize": "turn a corpus into token grids",
    "stats": "code utilization and n-gram KL to uniform",
    "train-lm": "train an AR or MLM transformer on token grids",
    "sample": "generate class-conditional images",
    "extend": "generate a grid larger than the training size",
    "attn": "average attention maps and locality per head",
    "eval": "latent Frechet distance between two image sets",
}

# command -> [(flag, key, help)]
FLAGS = {
    "gen-data": [("--spec", None, "key=value corpus file, or a corpus kind (shapes|grammar)"),
                 ("--kind", "data.kind", "shapes or grammar"),
                 ("--num-classes", "data.num_classes", None),
                 ("--per-class", "data.samples_per_class", "images per class")],
    "train-tokenizer": [("--data", "in.data", "corpus run directory or manifest"),
                        ("--quantizer", "tokenizer.kind", "bae or vq"),
                        ("--D", "tokenizer.D", "latent channels (bits per token)"),
                        ("--f", "tokenizer.f", "patch size"),
                        ("--K", "tokenizer.K", "VQ codebook size"),
                        ("--steps", "tokenizer.steps", None),
                        ("--train-quantizer", "tokenizer.train_quantizer", "sign or bernoulli")],
    "tokenize": [("--data", "in.data", None), ("--ckpt", "in.ckpt", "tokenizer checkpoint"),
                 ("--mode", "tokenize.mode", "sign, bernoulli, vq or auto")],
    "stats": [("--tokens", "in.tokens", None), ("--order", "stats.order", "1 or 2")],
    "train-lm": [("--tokens", "in.tokens", None), ("--mode", "lm.mode", "ar or mlm"),
                 ("--vocab", "lm.vocab", "code decomposition g-b"), ("--size", "lm.size", "size preset"),
                 ("--steps", "lm.steps", None), ("--lr", "lm.lr", None), ("--batch", "lm.batch", None)],
    "sample": [("--ckpt", "in.ckpt", "LM checkpoint"), ("--tokenizer", "in.tokenizer", None),
               ("--class", "sample.class", "class id, 'cycle', or 'null'"), ("--n", "sample.n", None),
               ("--cfg", "sample.cfg", "guidance schedule kind:s_min:s_max"), ("--topk", "sample.top_k", "0 = off"),
               ("--tau", "sample.tau", "Gumbel temperature (MLM)"), ("--iters", "sample.iters", "MLM rounds"),
               ("--temperature", "sample.temperature", None)],
    "extend": [("--ckpt", "in.ckpt", None), ("--tokenizer", "in.tokenizer", None),
               ("--class", "extend.class", None), ("--height", "extend.height", "grid rows"),
               ("--width", "extend.width", "grid columns"), ("--cfg", "sample.cfg", None),
               ("--topk", "sample.top_k", None)],
    "attn": [("--ckpt", "in.ckpt", None), ("--tokens", "in.tokens", None), ("--n", "attn.n", "samples"),
             ("--head", "attn.head", "head for the locality report")],
    "eval": [("--real", "in.real", "corpus directory"), ("--gen", "in.gen", "sample run directory"),
             ("--tokenizer", "in.tokenizer", None)],
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(value, type(default)):
        return value
    text = str(value).strip()
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {type(default).__name__}, got {text!r}") from None
    return text


def parse_config_text(text: str, origin: str = "<config>", prefix: str = "") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{n}: expected key=value, got {line!r}")
        key = key.strip()
        if prefix and "." not in key and key != "seed":
            key = prefix + key
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r} ({origin}:{n})")
        out[key] = _coerce(key, value)
    return out


def resolve_config(files=(), sets=(), flags=None) -> dict:
    cfg = dict(DEFAULTS)
    for path in files:
        cfg.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    for item in sets:
        cfg.update(parse_config_text(item, "--set"))
    for key, value in (flags or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value)
    return cfg


def config_text(cfg: dict, command: str | None = None) -> str:
    keys = [k for k in DEFAULTS if command is None or k == "seed" or k.startswith(SECTIONS[command])]
    return "".join(f"{k}={cfg[k]}\n" for k in keys)


def run_dir(out: str, command: str, cfg: dict) -> Path:
    digest = hashlib.sha256(config_text(cfg, command).encode()).hexdigest()[:12]
    path = Path(out) / f"{command}-{digest}"
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.txt").write_text(config_text(cfg, command), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# input resolution
# ---------------------------------------------------------------------------

def _need(cfg: dict, key: str) -> Path:
    if not cfg[key]:
        raise ConfigError(f"missing input {key} (pass the matching flag)")
    path = Path(cfg[key])
    if not path.exists():
        raise FormatError(f"{path}: no such file or directory")
    return path


def _find(path: Path, name: str) -> Path:
    target = path / name if path.is_dir() else path
    if not target.exists():
        raise FormatError(f"{path}: expected {name}")
    return target


def load_corpus(path: Path) -> list:
    return read_corpus(_find(path, "manifest.txt"))


def load_tokenizer(path: Path) -> TokenizerCheckpoint:
    return TokenizerCheckpoint.load(_find(path, "tokenizer.elmc"))


def load_tokens(path: Path) -> TokenDataset:
    return TokenDataset.load(_find(path, "tokens.elmt"))


def load_lm(path: Path) -> LmCheckpoint:
    return LmCheckpoint.load(_find(path, "lm.elml"))


def _emit(lines: list, path: Path) -> None:
    for line in lines:
        print(line)
    print(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict, out: Path) -> list:
    spec = CorpusSpec(num_classes=cfg["data.num_classes"], samples_per_class=cfg["data.samples_per_class"],
                      H=cfg["data.H"], W=cfg["data.W"], C=cfg["data.C"], kind=cfg["data.kind"],
                      master_seed=cfg["seed"])
    corpus = generate_corpus(spec)
    write_corpus(corpus, out)
    return [f"images {len(corpus)}", f"classes {spec.num_classes}"]


def tokenizer_config(cfg: dict, C: int = 1) -> TokenizerConfig:
    return TokenizerConfig(f=cfg["tokenizer.f"], D=cfg["tokenizer.D"], C=C, hidden=cfg["tokenizer.hidden"],
                           blocks=cfg["tokenizer.blocks"], kind=cfg["tokenizer.kind"], K=cfg["tokenizer.K"],
                           beta=cfg["tokenizer.beta"], train_quantizer=cfg["tokenizer.train_quantizer"],
                           steps=cfg["tokenizer.steps"], batch=cfg["tokenizer.batch"], lr=cfg["tokenizer.lr"],
                           seed=cfg["seed"])


def cmd_train_tokenizer(cfg: dict, out: Path) -> list:
    images, _ = stack(load_corpus(_need(cfg, "in.data")))
    tcfg = tokenizer_config(cfg, C=images.shape[-1])

    def progress(step, loss):
        if step % 100 == 0:
            log.info("tokenizer step %d loss %.6f", step, loss)

    try:
        ckpt = train_tokenizer(images, tcfg, on_step=progress)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            exc.last_good.save(out / "tokenizer.last_good.elmc")
        raise
    ckpt.save(out / "tokenizer.elmc")
    with open(out / "loss.csv", "w") as fh:
        fh.write("epoch,loss\n")
        fh.writelines(f"{e},{v!r}\n" for e, v in ckpt.log)
    probe = images[:500]
    mse = float(np.mean((reconstruct(probe, ckpt) - probe) ** 2))
    analysis.write_report(out / "report.csv", [("recon_mse", "probe500", mse)])
    return [f"recon_mse {mse:.6f}"]


def cmd_tokenize(cfg: dict, out: Path) -> list:
    corpus = load_corpus(_need(cfg, "in.data"))
    ckpt = load_tokenizer(_need(cfg, "in.ckpt"))
    mode = None if cfg["tokenize.mode"] == "auto" else cfg["tokenize.mode"]
    num_classes = max(s.class_id for s in corpus) + 1 if corpus else 1
    ds = tokenize_dataset(corpus, ckpt, mode, seed=cfg["seed"], num_classes=num_classes)
    ds.save(out / "tokens.elmt")
    rows = _token_stats(ds)
    analysis.write_report(out / "report.csv", rows)
    return [f"{m} {v:.4f}" if isinstance(v, float) else f"{m} {v}" for m, _, v in rows]


def _token_stats(ds: TokenDataset, orders=(1, 2)) -> list:
    rep = code_utilization(ds)
    rows = analysis.utilization_rows(rep, ds.mode)
    names = {1: "unigram_kl", 2: "bigram_kl"}
    rows += [(names[o], ds.mode, analysis.ngram_kl(ds, o)) for o in orders]
    return rows


def cmd_stats(cfg: dict, out: Path) -> list:
    ds = load_tokens(_need(cfg, "in.tokens"))
    order = cfg["stats.order"]
    if order not in (1, 2):
        raise ConfigError(f"stats.order must be 1 or 2, got {order}")
    rows = _token_stats(ds, (order,))
    analysis.write_report(out / "report.csv", rows)
    kl = rows[-1][2]
    rep = code_utilization(ds)
    return [f"{'unigram' if order == 1 else 'bigram'} KL {kl:.4f}",
            f"codes used {rep.distinct}/{len(rep.counts)} ({rep.fraction:.4f})"]


def lm_config(cfg: dict, ds: TokenDataset):
    spec = VocabSpec.parse(cfg["lm.vocab"])
    if spec.D != ds.D:
        raise ConfigError(f"vocabulary {spec} has D={spec.D} but tokens have D={ds.D}")
    overrides = {k: cfg[f"lm.{k}"] for k in ("depth", "dim", "heads") if cfg[f"lm.{k}"]}
    base = preset(cfg["lm.size"], vocab=spec, seq_len=ds.L, num_classes=ds.num_classes, mode=cfg["lm.mode"],
                  class_drop_prob=cfg["lm.class_drop_prob"])
    return replace(base, **overrides)


def cmd_train_lm(cfg: dict, out: Path) -> list:
    ds = load_tokens(_need(cfg, "in.tokens"))
    lcfg = lm_config(cfg, ds)
    model = Transformer(lcfg, np.random.default_rng(cfg["seed"]), dtype=np.float32)
    trainer = LmTrainer(model, lr=cfg["lm.lr"], weight_decay=cfg["lm.weight_decay"], seed=cfg["seed"])

    def progress(step, loss):
        if step % 100 == 0:
            log.info("lm step %d loss %.6f", step, loss)

    losses = trainer.fit(ds.subcodes(lcfg.vocab), ds.labels, cfg["lm.steps"], cfg["lm.batch"], on_step=progress)
    trainer.checkpoint().save(out / "lm.elml")
    trainer.write_log(out / "train_log.csv")
    final = float(np.mean(losses[-50:])) if losses else float("nan")
    analysis.write_report(out / "report.csv", [("final_loss", "last50", final),
                                               ("parameters", lcfg.mode, model.num_parameters())])
    return [f"parameters {model.num_parameters()}", f"final_loss {final:.6f}"]


def sampler_config(cfg: dict) -> SamplerConfig:
    return SamplerConfig(cfg=CfgSchedule.parse(cfg["sample.cfg"]), top_k=cfg["sample.top_k"] or None,
                         temperature=cfg["sample.temperature"], tau=cfg["sample.tau"], iters=cfg["sample.iters"],
                         seed=cfg["seed"])


def _class_ids(choice: str, n: int, num_classes: int) -> np.ndarray:
    if choice == "cycle":
        return np.arange(n) % num_classes
    if choice == "null":
        return np.full(n, num_classes)
    try:
        c = int(choice)
    except ValueError:
        raise ConfigError(f"sample.class must be an integer, 'cycle' or 'null', got {choice!r}") from None
    if not 0 <= c <= num_classes:
        raise ConfigError(f"class {c} outside [0, {num_classes}]")
    return np.full(n, c)


def _check_pair(lm: LmCheckpoint, tok: TokenizerCheckpoint) -> None:
    D = tok.config.D if tok.config.kind == "bae" else max(1, (tok.config.K - 1).bit_length())
    if lm.config.vocab.D != D:
        raise ConfigError(f"LM vocabulary {lm.config.vocab} (D={lm.config.vocab.D}) does not match "
                          f"tokenizer D={D}")


def _save_samples(out: Path, grids, classes, seed, spec, tok, first_index=0) -> None:
    n, h, w, _ = grids.shape
    codes = subcodes_to_codes(grids, spec).reshape(n, h * w)
    TokenDataset(codes, classes, h, w, spec.D, "sign", seed, int(max(classes, default=0)) + 1, spec.g).save(
        out / "grids.elmt")
    images = tokens_to_image(grids, tok, spec)
    (out / "images").mkdir(exist_ok=True)
    records, rows = [], []
    for i, (img, c) in enumerate(zip(images, classes)):
        rel = f"images/{first_index + i:05d}_c{int(c)}.{'pgm' if img.shape[-1] == 1 else 'ppm'}"
        write_image(out / rel, img)
        records.append((rel, int(c), seed))
        rows.append((first_index + i, int(c), seed, f"grids.elmt#{i}"))
    write_manifest(out / "manifest.txt", records)
    write_generation_manifest(out / "generation.csv", rows)


def cmd_sample(cfg: dict, out: Path) -> list:
    lm = load_lm(_need(cfg, "in.ckpt"))
    tok = load_tokenizer(_need(cfg, "in.tokenizer"))
    _check_pair(lm, tok)
    model, scfg = lm.model, sampler_config(cfg)
    classes = _class_ids(cfg["sample.class"], cfg["sample.n"], model.cfg.num_classes)
    parts = []
    for s in range(0, len(classes), cfg["sample.batch"]):
        parts.append(generate(model, classes[s:s + cfg["sample.batch"]], scfg, first_index=s))
        log.info("sampled %d/%d", s + len(parts[-1]), len(classes))
    grids = np.concatenate(parts) if parts else np.zeros((0, 1, 1, model.cfg.vocab.g), np.int64)
    _save_samples(out, grids, classes, cfg["seed"], model.cfg.vocab, tok)
    return [f"samples {len(grids)}", f"grid {grids.shape[1]}x{grids.shape[2]}"]


def cmd_extend(cfg: dict, out: Path) -> list:
    lm = load_lm(_need(cfg, "in.ckpt"))
    tok = load_tokenizer(_need(cfg, "in.tokenizer"))
    _check_pair(lm, tok)
    classes = _class_ids(str(cfg["extend.class"]), 1, lm.config.num_classes)
    grid = extend_generate(lm.model, classes, cfg["extend.height"], cfg["extend.width"], sampler_config(cfg))
    _save_samples(out, grid, classes, cfg["seed"], lm.config.vocab, tok)
    img = tokens_to_image(grid[0], tok, lm.config.vocab)
    return [f"grid {grid.shape[1]}x{grid.shape[2]}", f"image {img.shape[0]}x{img.shape[1]}"]


def cmd_attn(cfg: dict, out: Path) -> list:
    lm = load_lm(_need(cfg, "in.ckpt"))
    ds = load_tokens(_need(cfg, "in.tokens"))
    n = min(cfg["attn.n"], len(ds))
    summary = analysis.attention_average(lm.model, ds.subcodes(lm.config.vocab)[:n], ds.labels[:n])
    summary.save(out / "attention.att")
    loc = analysis.locality_index(summary, cfg["attn.head"])
    rows = [("locality", f"layer{i}.head{cfg['attn.head']}", float(v)) for i, v in enumerate(loc)]
    analysis.write_report(out / "report.csv", rows)
    return [f"{scope} {v:.4f}" for _, scope, v in rows]


def cmd_eval(cfg: dict, out: Path) -> list:
    tok = load_tokenizer(_need(cfg, "in.tokenizer"))
    real, _ = stack(load_corpus(_need(cfg, "in.real")))
    gen, _ = stack(load_corpus(_need(cfg, "in.gen")))
    d = analysis.latent_frechet(real, gen, tok, cfg["eval.pool"])
    analysis.write_report(out / "report.csv", [("latent_frechet", f"{len(real)}v{len(gen)}", d)])
    return [f"latent_frechet {d:.6f}"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-tokenizer": cmd_train_tokenizer,
    "tokenize": cmd_tokenize,
    "stats": cmd_stats,
    "train-lm": cmd_train_lm,
    "sample": cmd_sample,
    "extend": cmd_extend,
    "attn": cmd_attn,
    "eval": cmd_eval,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="elmlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, flags in FLAGS.items():
        p = sub.add_parser(name, help=SUMMARIES[name], description=SUMMARIES[name])
        p.add_argument("--config", action="append", default=[], help="key=value config file (repeatable)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        p.add_argument("--seed", help="master seed")
        p.add_argument("--out", default="runs", help="parent directory for run directories")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag, key, help_text in flags:
            p.add_argument(flag, dest="flag_" + flag.lstrip("-").replace("-", "_"),
                           metavar=flag.lstrip("-").replace("-", "_").upper(), help=help_text or f"sets {key}")
    return parser


def _flag_overrides(args) -> dict:
    flags = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    for flag, key, _ in FLAGS[args.command]:
        value = getattr(args, "flag_" + flag.lstrip("-").replace("-", "_"))
        if value is None:
            continue
        if key is None:  # gen-data --spec: file of data.* keys or a corpus kind
            path = Path(value)
            if path.is_file():
                flags.update(parse_config_text(path.read_text(encoding="utf-8"), str(path), prefix="data."))
            else:
                flags["data.kind"] = value
            continue
        flags[key] = value
    return flags


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args.config, args.set, _flag_overrides(args))
        out = run_dir(args.out, args.command, cfg)
        handler = logging.FileHandler(out / "log.txt", mode="w")
        handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
        if args.verbose:
            log.addHandler(logging.StreamHandler(sys.stderr))
        try:
            log.info("command %s", args.command)
            _emit(COMMANDS[args.command](cfg, out), out)
        finally:
            for h in list(log.handlers):
                log.removeHandler(h)
                h.close()
        return 0
    except ElmError as exc:
        code = exc.exit_code
        kind = type(exc).__name__
        message = str(exc)
    except OSError as exc:
        code, kind, message = 3, type(exc).__name__, str(exc)
    print(f"elmlab: error code={code} kind={kind}: {' '.join(message.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
