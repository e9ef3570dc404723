import json

import pytest

from helpers import write_toy_csv
from crerank.cli import EXIT_CODES, main

SMALL = ["--set", "generator.d=8", "--set", "generator.epochs=1", "--set", "generator.batch=64",
         "--set", "reranker.k=5", "--set", "reranker.d=8", "--set", "reranker.epochs=1",
         "--set", "reranker.batch=64"]


def _pipeline(tmp_path, out, kind="stamp"):
    csv = tmp_path / "toy.csv"
    if not csv.exists():
        write_toy_csv(csv)
    o = str(out)
    opts = SMALL + ["--set", f"generator.kind={kind}", "--out", o]
    assert main(["ingest", "--input", str(csv), "--format", "generic", "--out", o]) == 0
    assert main(["train-generator", "--corpus", f"{o}/corpus.bin", *opts]) == 0
    assert main(["train-reranker", "--corpus", f"{o}/corpus.bin", "--generator", f"{o}/generator.ckpt",
                 *opts]) == 0
    assert main(["evaluate", "--corpus", f"{o}/corpus.bin", "--generator", f"{o}/generator.ckpt",
                 "--reranker", f"{o}/reranker.ckpt", "--baseline", *opts]) == 0
    return out


@pytest.mark.parametrize("kind", ["cf", "stamp"])
def test_end_to_end(tmp_path, capsys, kind):
    out = _pipeline(tmp_path, tmp_path / "o", kind)
    reports = json.loads((out / "report.json").read_text())
    label = {"cf": "I2I-CF", "stamp": "STAMP"}[kind]
    assert [r["model"] for r in reports] == [label, f"RRCRE-{label}"]
    for r in reports:
        assert 0 <= r["mrr"] <= r["recall"] <= 1
    printed = capsys.readouterr().out.splitlines()
    assert len(printed) == 2 and printed[1].startswith(f"RRCRE-{label}")
    for cmd in ("ingest", "train-generator", "train-reranker", "evaluate"):
        assert (out / f"{cmd}.config.ini").exists()


def test_runs_are_byte_identical(tmp_path):
    a = _pipeline(tmp_path, tmp_path / "a")
    b = _pipeline(tmp_path, tmp_path / "b")
    for name in ("corpus.bin", "generator.ckpt", "reranker.ckpt", "report.json", "report.csv",
                 "reranker.trainlog.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_cached_candidates_match(tmp_path):
    out = _pipeline(tmp_path, tmp_path / "o", "cf")
    o = str(out)
    opts = SMALL + ["--set", "generator.kind=cf"]
    args = ["--corpus", f"{o}/corpus.bin", "--generator", f"{o}/generator.ckpt", *opts]
    assert main(["cache-candidates", *args, "--out", o]) == 0
    assert main(["train-reranker", *args, "--candidates", f"{o}/candidates.bin", "--out", f"{o}/c"]) == 0
    assert (out / "reranker.ckpt").read_bytes() == (out / "c" / "reranker.ckpt").read_bytes()


def test_sweep_and_ablation(tmp_path):
    out = _pipeline(tmp_path, tmp_path / "o", "cf")
    o = str(out)
    args = ["--corpus", f"{o}/corpus.bin", "--generator", f"{o}/generator.ckpt", *SMALL,
            "--set", "generator.kind=cf", "--out", o]
    assert main(["sweep-k", *args, "--set", "eval.ks=1,3,5"]) == 0
    assert "plateau_k" in json.loads((out / "sweep_k.json").read_text())
    assert (out / "sweep_k.csv").read_text().count("\n") == 4
    assert main(["ablate-cre", *args]) == 0
    models = [r["model"] for r in json.loads((out / "ablation.json").read_text())]
    assert models == ["RR-I2I-CF", "RRCRE-I2I-CF"]


def test_error_classes(tmp_path, capsys):
    out = _pipeline(tmp_path, tmp_path / "o", "cf")
    o = str(out)
    base = ["--corpus", f"{o}/corpus.bin", "--out", o]
    assert main(["train-generator", *base, "--set", "generator.d=zero"]) == EXIT_CODES["config"]
    assert main(["train-generator", "--corpus", f"{o}/missing.bin", "--out", o]) == EXIT_CODES["io"]
    (tmp_path / "bad.ckpt").write_bytes(b"garbage" * 10)
    assert main(["evaluate", *base, "--generator", str(tmp_path / "bad.ckpt")]) == EXIT_CODES["format"]
    # the generator was built with alpha 0.5; asking for another alpha is a config mismatch
    mismatch = ["evaluate", *base, "--generator", f"{o}/generator.ckpt", "--set", "generator.kind=cf",
                "--set", "generator.alpha=0.2"]
    assert main(mismatch) == EXIT_CODES["config"]
    assert main(mismatch + ["--force"]) == 0
    err = capsys.readouterr().err.splitlines()
    assert err[0].startswith("error[config]:") and err[1].startswith("error[io]:")
    assert err[2].startswith("error[format]:") and err[3].startswith("error[config]:")
