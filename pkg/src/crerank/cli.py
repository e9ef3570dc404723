"""Command-line entry point: ``crerank <command> [options]``.

Every command writes ``<command>.config.ini`` (the fully resolved config)
next to its outputs. On failure a single ``error[<class>]: <message>`` line
goes to stderr and the exit status is nonzero.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

from crerank import checkpoint as ckpt
from crerank import kernels
from crerank.cfgen import CFGenerator
from crerank.config import RunConfig
from crerank.corpus import PARSERS, preprocess, read_corpus, write_corpus, write_stats
from crerank.errors import ConfigError, CrerankError
from crerank.evalkit import (ablate_cre, evaluate, plateau_start, plot_curve, sweep_k,
                             write_curve, write_reports)
from crerank.reranker import (TwoStagePipeline, candidate_matrix, read_candidate_cache,
                              train_reranker, write_candidate_cache)
from crerank.stampgen import StampGenerator, train_generator

log = logging.getLogger("crerank")

EXIT_CODES = {"config": 2, "io": 3, "format": 4, "training": 5, "internal": 1}
GENERATOR_LABELS = {"cf": "I2I-CF", "stamp": "STAMP", "stmo": "STMO"}


def _threads(cfg: RunConfig):
    n = cfg.run.threads or int(os.environ.get("CRERANK_THREADS", "0") or 0)
    if n <= 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(n)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _generator_config(cfg: RunConfig) -> dict:
    return {**cfg.section_dict("generator"), "seed": cfg.run.seed}


def _reranker_config(cfg: RunConfig) -> dict:
    return {**cfg.section_dict("reranker"), "seed": cfg.run.seed}


def _load_generator(cfg: RunConfig, path, force: bool):
    # only enforce the hash when the caller actually described the generator
    expect = _generator_config(cfg) if "generator" in cfg.explicit else None
    c = ckpt.read(path, expect, force)
    return ckpt.generator_from_container(c), ckpt.container_digest(c)


def _label(generator) -> str:
    return GENERATOR_LABELS[generator.kind]


def _load_reranker(cfg: RunConfig, path, force: bool):
    expect = _reranker_config(cfg) if "reranker" in cfg.explicit else None
    c = ckpt.read(path, expect, force)
    return ckpt.reranker_from_container(c), c.config


def cmd_ingest(cfg: RunConfig, args) -> None:
    path = args.input or cfg.data.path
    if not path:
        raise ConfigError("ingest needs --input or data.path")
    fmt = args.format or cfg.data.recipe
    if fmt not in PARSERS:
        raise ConfigError(f"unknown input format {fmt!r}")
    events, report = PARSERS[fmt](path)
    for w in report.warnings[:20]:
        log.warning("%s", w)
    corpus = preprocess(events, cfg.preprocess_config(), cfg.data.recipe)
    out = _out(cfg)
    write_corpus(corpus, out / "corpus.bin")
    write_stats(corpus, out / "corpus.stats.json", report)
    log.info("corpus: %s", corpus.stats())


def cmd_train_generator(cfg: RunConfig, args) -> None:
    corpus = read_corpus(args.corpus)
    g = cfg.generator
    out = _out(cfg)
    if g.kind == "cf":
        gen = CFGenerator.fit(corpus.train, corpus.n_items, g.alpha, g.table_width)
    else:
        params, tlog = train_generator(corpus.train, corpus.n_items, cfg.stamp_config())
        gen = StampGenerator(params, g.kind, g.attention_normalized)
        write_curve(out / "generator.trainlog.csv", ["step", "epoch", "val_recall5", "loss"], tlog.rows())
    ckpt.write(out / "generator.ckpt", ckpt.generator_container(gen, _generator_config(cfg)))


def _candidates(cfg: RunConfig, args, generator, gen_digest: str, corpus):
    k = cfg.reranker.k
    if getattr(args, "candidates", None):
        return read_candidate_cache(args.candidates, gen_digest, corpus.digest())
    return candidate_matrix(generator.rank_batch(corpus.train, k), k)


def cmd_cache_candidates(cfg: RunConfig, args) -> None:
    corpus = read_corpus(args.corpus)
    generator, digest = _load_generator(cfg, args.generator, args.force)
    k = cfg.reranker.k
    cand = candidate_matrix(generator.rank_batch(corpus.train, k), k)
    write_candidate_cache(_out(cfg) / "candidates.bin", cand, digest, corpus.digest())


def cmd_train_reranker(cfg: RunConfig, args) -> None:
    corpus = read_corpus(args.corpus)
    generator, digest = _load_generator(cfg, args.generator, args.force)
    cand = _candidates(cfg, args, generator, digest, corpus)
    params, tlog, info = train_reranker(generator, corpus.train, corpus.n_items,
                                        cfg.reranker_config(), cand)
    out = _out(cfg)
    ckpt.write(out / "reranker.ckpt", ckpt.Container("reranker", _reranker_config(cfg), params.tensors()))
    write_curve(out / "reranker.trainlog.csv", ["step", "epoch", "val_recall5", "loss"], tlog.rows())
    (out / "reranker.info.json").write_text(json.dumps(
        {**info, "best_step": tlog.best_step, "steps": tlog.steps}, indent=2, sort_keys=True) + "\n")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    corpus = read_corpus(args.corpus)
    generator, _ = _load_generator(cfg, args.generator, args.force)
    dataset = corpus.meta.get("dataset", "dataset")
    name = _label(generator)
    N = cfg.eval.N
    reports = []
    if args.reranker is None or args.baseline:
        reports.append(evaluate(generator, corpus.test, N, name, dataset))
    if args.reranker is not None:
        params, rcfg = _load_reranker(cfg, args.reranker, args.force)
        enabled = bool(rcfg.get("cre_enabled", True))
        pipe = TwoStagePipeline(generator, params, params.k, enabled,
                                bool(rcfg.get("attention_normalized", False)))
        label = f"RRCRE-{name}" if enabled else f"RR-{name}"
        reports.append(evaluate(pipe, corpus.test, N, label, dataset))
    write_reports(reports, _out(cfg), "report")
    for r in reports:
        print(f"{r.model}\t{r.dataset}\trecall@{r.N}={r.recall:.4f}\tmrr@{r.N}={r.mrr:.4f}")


def cmd_sweep_k(cfg: RunConfig, args) -> None:
    corpus = read_corpus(args.corpus)
    generator, _ = _load_generator(cfg, args.generator, args.force)
    points = sweep_k(generator, corpus.train, corpus.test, corpus.n_items, cfg.ks(),
                     cfg.reranker_config(), corpus.meta.get("dataset", "dataset"))
    out = _out(cfg)
    write_curve(out / "sweep_k.csv", ["k", "recall5", "kept_examples", "coverage"],
                [(p.k, p.recall5, p.kept_examples, p.coverage) for p in points])
    (out / "sweep_k.json").write_text(json.dumps({"plateau_k": plateau_start(points)}) + "\n")
    if args.plot:
        plot_curve(out / "sweep_k.svg", [p.k for p in points], {"RRCRE": [p.recall5 for p in points]},
                   "k", "Recall@5")


def cmd_ablate_cre(cfg: RunConfig, args) -> None:
    corpus = read_corpus(args.corpus)
    generator, _ = _load_generator(cfg, args.generator, args.force)
    res = ablate_cre(generator, corpus.train, corpus.test, corpus.n_items, cfg.reranker_config(),
                     cfg.eval.N, _label(generator), corpus.meta.get("dataset", "dataset"))
    out = _out(cfg)
    write_reports([res.without_cre, res.with_cre], out, "ablation")
    rows = []
    for label, curve in (("RRCRE", res.curve_with), ("RR", res.curve_without)):
        rows += [(label, *row) for row in curve]
    write_curve(out / "ablation_curve.csv", ["model", "step", "epoch", "val_recall5", "loss"], rows)
    if args.plot:
        steps = [r[0] for r in res.curve_with]
        plot_curve(out / "ablation_curve.svg", steps,
                   {"RRCRE": [r[2] for r in res.curve_with], "RR": [r[2] for r in res.curve_without]},
                   "step", "validation Recall@5")


COMMANDS = {
    "ingest": cmd_ingest,
    "train-generator": cmd_train_generator,
    "cache-candidates": cmd_cache_candidates,
    "train-reranker": cmd_train_reranker,
    "evaluate": cmd_evaluate,
    "sweep-k": cmd_sweep_k,
    "ablate-cre": cmd_ablate_cre,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    common.add_argument("--threads", type=int, help="cap BLAS threads (also CRERANK_THREADS)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="load checkpoints despite a config mismatch")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="crerank", description="Two-stage session recommender.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="parse and preprocess a click log")
    p.add_argument("--input", help="raw log path (default: data.path)")
    p.add_argument("--format", choices=sorted(PARSERS), help="input format (default: data.recipe)")

    for name, help_ in (("train-generator", "fit I2I-CF or train STAMP/STMO"),
                        ("cache-candidates", "store the generator's top-k for every training example"),
                        ("train-reranker", "train the re-ranker on a frozen generator"),
                        ("evaluate", "Recall@N / MRR@N on the test split"),
                        ("sweep-k", "pipeline Recall@5 for each candidate-set size"),
                        ("ablate-cre", "train with and without the rank embedding")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--corpus", required=True)
        if name != "train-generator":
            p.add_argument("--generator", required=True, help="generator checkpoint")
        if name == "train-reranker":
            p.add_argument("--candidates", help="candidate cache from cache-candidates")
        if name == "evaluate":
            p.add_argument("--reranker", help="re-ranker checkpoint; omit for generator-only")
            p.add_argument("--baseline", action="store_true",
                           help="also report the generator alone")
        if name in ("sweep-k", "ablate-cre"):
            p.add_argument("--plot", action="store_true", help="write an SVG chart")
    return parser


def _resolve(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    if args.out is not None:
        overrides.append(f"run.out={args.out}")
    return RunConfig.load(args.config, overrides)


def run(argv=None) -> None:
    """Parse ``argv`` and execute; raises instead of exiting."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _resolve(args)
    out = _out(cfg)
    (out / f"{args.command}.config.ini").write_text(cfg.to_ini())
    log.info("kernel backend: %s", kernels.BACKEND)
    with _threads(cfg):
        COMMANDS[args.command](cfg, args)


def main(argv=None) -> int:
    try:
        run(argv)
        return 0
    except CrerankError as e:
        exc, kind = e, e.kind
    except OSError as e:
        exc, kind = e, "io"
    except Exception as e:  # noqa: BLE001 - last-resort classification
        exc, kind = e, "internal"
    msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
    print(f"error[{kind}]: {msg}", file=sys.stderr)
    return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
