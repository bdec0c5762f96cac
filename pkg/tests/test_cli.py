import contextlib
import io
from pathlib import Path

import numpy as np
import pytest

from elmlab import cli
from elmlab.errors import ConfigError, TrainingDiverged
from elmlab.tokenizer import TokenDataset

TINY_LM = ["--set", "lm.dim=16", "--set", "lm.depth=1", "--set", "lm.heads=2", "--batch", "4"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out.strip().splitlines(), err.strip()


def run_ok(capsys, *argv) -> Path:
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    return Path(out[-1])


def quiet(*argv) -> Path:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        assert cli.main([str(a) for a in argv]) == 0
    return Path(buf.getvalue().strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    data = quiet("gen-data", "--num-classes", 3, "--per-class", 4, "--seed", 7, "--out", root)
    tok = quiet("train-tokenizer", "--data", data, "--steps", 5, "--set", "tokenizer.hidden=8", "--seed", 7,
                "--out", root)
    tokens = quiet("tokenize", "--data", data, "--ckpt", tok, "--seed", 7, "--out", root)
    lm = quiet("train-lm", "--tokens", tokens, "--steps", 3, *TINY_LM, "--seed", 7, "--out", root)
    return {"root": root, "data": data, "tok": tok, "tokens": tokens, "lm": lm}


def test_pipeline_artifacts(pipeline):
    assert (pipeline["data"] / "manifest.txt").exists()
    assert (pipeline["tok"] / "tokenizer.elmc").exists()
    ds = TokenDataset.load(pipeline["tokens"] / "tokens.elmt")
    assert ds.codes.shape == (12, 64) and ds.mode == "bernoulli" and ds.seed == 7
    assert (pipeline["lm"] / "lm.elml").exists()
    log = (pipeline["lm"] / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,loss,lr,wall_ms" and len(log) == 4
    for key in ("data", "tok", "tokens", "lm"):
        assert (pipeline[key] / "config.txt").exists() and (pipeline[key] / "log.txt").exists()


def test_run_dir_named_by_config_hash(pipeline, capsys):
    again = run_ok(capsys, "gen-data", "--num-classes", 3, "--per-class", 4, "--seed", 7, "--out", pipeline["root"])
    assert again == pipeline["data"]
    other = run_ok(capsys, "gen-data", "--num-classes", 3, "--per-class", 4, "--seed", 8, "--out", pipeline["root"])
    assert other != pipeline["data"] and other.name.startswith("gen-data-")


def test_echoed_config_reproduces(pipeline, capsys, tmp_path):
    cfg = pipeline["tokens"] / "config.txt"
    assert "tokenize.mode=auto" in cfg.read_text() and "seed=7" in cfg.read_text()
    again = run_ok(capsys, "tokenize", "--config", cfg, "--out", tmp_path)
    assert (again / "tokens.elmt").read_bytes() == (pipeline["tokens"] / "tokens.elmt").read_bytes()


def test_sample_twice_byte_identical(pipeline, capsys, tmp_path):
    outs = []
    for sub in ("a", "b"):
        outs.append(run_ok(capsys, "sample", "--ckpt", pipeline["lm"], "--tokenizer", pipeline["tok"], "--cfg",
                           "linear:1:3", "--n", 1, "--seed", 7, "--out", tmp_path / sub))
    a, b = outs
    assert (a / "grids.elmt").read_bytes() == (b / "grids.elmt").read_bytes()
    imgs = sorted(p.name for p in (a / "images").iterdir())
    assert imgs and all((a / "images" / n).read_bytes() == (b / "images" / n).read_bytes() for n in imgs)
    assert (a / "generation.csv").read_text().splitlines() == ["index,class_id,seed,grid_path",
                                                               "0,0,7,grids.elmt#0"]


def test_stats_uniform_prints_zero(tmp_path, capsys):
    codes = np.tile(np.arange(256), 2).reshape(8, 64)
    TokenDataset(codes, np.zeros(8, int), 8, 8, 8).save(tmp_path / "tokens.elmt")
    code, out, _ = run(capsys, "stats", "--tokens", tmp_path / "tokens.elmt", "--out", tmp_path / "runs")
    assert code == 0 and out[0] == "unigram KL 0.0000"
    assert "codes used 256/256" in out[1]


def test_stats_bigram_and_bad_order(pipeline, capsys):
    code, out, _ = run(capsys, "stats", "--tokens", pipeline["tokens"], "--order", 2, "--out", pipeline["root"])
    assert code == 0 and out[0].startswith("bigram KL ")
    code, _, err = run(capsys, "stats", "--tokens", pipeline["tokens"], "--order", 3, "--out", pipeline["root"])
    assert code == 2 and "stats.order" in err


def test_vocab_must_factor_code_width(pipeline, capsys):
    ok = run_ok(capsys, "train-lm", "--tokens", pipeline["tokens"], "--vocab", "2-4", "--steps", 1, *TINY_LM,
                "--out", pipeline["root"])
    assert (ok / "lm.elml").exists()
    code, out, err = run(capsys, "train-lm", "--tokens", pipeline["tokens"], "--vocab", "2-5", "--steps", 1,
                         *TINY_LM, "--out", pipeline["root"])
    assert code == 2 and out == [] and len(err.splitlines()) == 1
    assert err.startswith("elmlab: error code=2 kind=ConfigError") and "D=10" in err and "D=8" in err


def test_extend_attn_eval(pipeline, capsys):
    ext = run_ok(capsys, "extend", "--ckpt", pipeline["lm"], "--tokenizer", pipeline["tok"], "--height", 8,
                 "--width", 12, "--out", pipeline["root"])
    assert TokenDataset.load(ext / "grids.elmt").codes.shape == (1, 96)
    img = next((ext / "images").iterdir()).read_bytes()
    assert img.startswith(b"P5\n48 32\n255\n")
    att = run_ok(capsys, "attn", "--ckpt", pipeline["lm"], "--tokens", pipeline["tokens"], "--n", 5, "--out",
                 pipeline["root"])
    assert (att / "attention.att").exists()
    assert (att / "report.csv").read_text().startswith("metric,scope,value\nlocality,layer0.head0,")
    code, out, _ = run(capsys, "eval", "--real", pipeline["data"], "--gen", pipeline["data"], "--tokenizer",
                       pipeline["tok"], "--out", pipeline["root"])
    assert code == 0 and out[0].startswith("latent_frechet ") and float(out[0].split()[1]) < 1e-6


@pytest.mark.parametrize("argv, fragment", [
    (["stats", "--set", "lm.dpeth=3"], "unknown config key 'lm.dpeth'"),
    (["stats", "--set", "lm.steps=many"], "expects int"),
    (["stats", "--set", "novalue"], "expected key=value"),
    (["nonsense"], "invalid choice"),
    (["stats"], "missing input in.tokens"),
])
def test_config_errors_exit_2(argv, fragment, capsys, tmp_path):
    code, out, err = run(capsys, *argv, *(["--out", tmp_path] if argv[0] != "nonsense" else []))
    assert code == 2 and fragment in err and len(err.splitlines()) == 1


def test_config_file_and_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nlm.steps = 50\nlm.lr=0.01\nseed=3\n")
    cfg = cli.resolve_config([path], ["lm.steps=60"], {"lm.lr": "0.02"})
    assert (cfg["lm.steps"], cfg["lm.lr"], cfg["seed"], cfg["lm.batch"]) == (60, 0.02, 3, 64)
    path.write_text("lm.stepz=1\n")
    with pytest.raises(ConfigError, match="run.cfg:1"):
        cli.resolve_config([path])


def test_gen_data_spec_file(tmp_path, capsys):
    spec = tmp_path / "corpus.spec"
    spec.write_text("kind=grammar\nnum_classes=2\nsamples_per_class=3\n")
    out = run_ok(capsys, "gen-data", "--spec", spec, "--out", tmp_path)
    assert "data.kind=grammar" in (out / "config.txt").read_text()
    assert len((out / "manifest.txt").read_text().splitlines()) == 1 + 6


def test_format_error_exit_3(tmp_path, capsys):
    (tmp_path / "tokens.elmt").write_bytes(b"JUNKJUNKJUNK")
    code, _, err = run(capsys, "stats", "--tokens", tmp_path / "tokens.elmt", "--out", tmp_path)
    assert code == 3 and "kind=FormatError" in err and "byte 0" in err
    code, _, err = run(capsys, "stats", "--tokens", tmp_path / "absent.elmt", "--out", tmp_path)
    assert code == 3


def test_version_mismatch_names_both_versions(pipeline, tmp_path, capsys):
    raw = bytearray((pipeline["tokens"] / "tokens.elmt").read_bytes())
    raw[4] = 9
    (tmp_path / "tokens.elmt").write_bytes(bytes(raw))
    code, _, err = run(capsys, "stats", "--tokens", tmp_path / "tokens.elmt", "--out", tmp_path)
    assert code == 3 and "version 9" in err and "expected 1" in err


def test_numerical_failure_exit_4(monkeypatch, tmp_path, capsys):
    def diverge(cfg, out):
        raise TrainingDiverged("loss became nan at step 3")

    monkeypatch.setitem(cli.COMMANDS, "stats", diverge)
    code, _, err = run(capsys, "stats", "--out", tmp_path)
    assert code == 4 and err == "elmlab: error code=4 kind=TrainingDiverged: loss became nan at step 3"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_lm_divergence_from_huge_learning_rate(pipeline, capsys):
    code, _, err = run(capsys, "train-lm", "--tokens", pipeline["tokens"], "--steps", 20, "--lr", "1e30", *TINY_LM,
                       "--out", pipeline["root"])
    assert code == 4 and "kind=TrainingDiverged" in err
