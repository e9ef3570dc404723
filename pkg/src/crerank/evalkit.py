"""Recall@N / MRR@N evaluation, the k sweep and the CRE ablation."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from crerank.corpus import ExampleSet
from crerank.errors import ConsistencyError
from crerank.reranker import RerankerConfig, TwoStagePipeline, candidate_matrix, train_reranker

log = logging.getLogger(__name__)


def rank_of_target(L_Y, target) -> int | None:
    """1-based position of ``target`` in ``L_Y``, or ``None`` for a miss."""
    hits = np.flatnonzero(np.asarray(L_Y) == target)
    return int(hits[0]) + 1 if len(hits) else None


@dataclass
class EvalReport:
    model: str
    dataset: str
    N: int
    recall: float
    mrr: float
    examples: int
    histogram: dict = field(default_factory=dict)  # rank (<= N) -> count, plus "beyond" and "miss"
    seconds: float = 0.0

    @property
    def coverage(self) -> float:
        """Fraction of targets present anywhere in the recommended list."""
        if not self.examples:
            return 0.0
        return 1 - self.histogram.get("miss", 0) / self.examples

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("seconds")
        out["coverage"] = self.coverage
        return out


def metrics_from_ranks(ranks, N: int = 20):
    """``(recall@N, mrr@N, histogram)`` from 1-based ranks (``None`` = miss).

    Sums are exact rationals, so results are the correctly rounded means.
    """
    hist: dict = {}
    n = 0
    for r in ranks:
        n += 1
        key = "miss" if r is None else (int(r) if r <= N else "beyond")
        hist[key] = hist.get(key, 0) + 1
    if n == 0:
        raise ValueError("cannot evaluate an empty test set")
    hits = sum(c for r, c in hist.items() if isinstance(r, int))
    rr = sum((Fraction(c, r) for r, c in hist.items() if isinstance(r, int)), Fraction(0))
    ordered = {str(r): hist[r] for r in sorted(k for k in hist if isinstance(k, int))}
    for key in ("beyond", "miss"):
        if key in hist:
            ordered[key] = hist[key]
    return float(Fraction(hits, n)), float(rr / n), ordered


def evaluate(model, test: ExampleSet, N: int = 20, model_id: str = "model",
             dataset_id: str = "dataset") -> EvalReport:
    """Evaluate anything exposing ``rank_batch(examples, depth)``."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    t0 = time.perf_counter()
    lists = model.rank_batch(test, N)
    ranks = [rank_of_target(lst, t) for lst, t in zip(lists, test.targets.tolist())]
    recall, mrr, hist = metrics_from_ranks(ranks, N)
    return EvalReport(model_id, dataset_id, N, recall, mrr, len(test), hist, time.perf_counter() - t0)


REPORT_COLUMNS = ["model", "dataset", "N", "recall", "mrr", "examples"]


def write_reports(reports, out_dir, stem: str = "report") -> None:
    """``<stem>.json`` and ``<stem>.csv``; wall-clock times go to ``<stem>.timing.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = list(reports)
    (out / f"{stem}.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow([r.model, r.dataset, r.N, repr(r.recall), repr(r.mrr), r.examples])
    (out / f"{stem}.csv").write_text(buf.getvalue())
    (out / f"{stem}.timing.json").write_text(
        json.dumps({r.model: r.seconds for r in reports}, indent=2, sort_keys=True) + "\n")


def write_curve(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    Path(path).write_text(buf.getvalue())


def plot_curve(path, x, series: dict, xlabel: str, ylabel: str) -> None:
    """Line chart as SVG; needs matplotlib."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "crerank"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ys in series.items():
        ax.plot(x[:len(ys)], ys, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


@dataclass
class SweepPoint:
    k: int
    recall5: float
    kept_examples: int
    coverage: float


def plateau_start(points: list[SweepPoint], tol: float = 0.0) -> int | None:
    """First k after which Recall@5 stops increasing (by more than ``tol``)."""
    for a, b in zip(points, points[1:]):
        if b.recall5 <= a.recall5 + tol:
            return a.k
    return None


def sweep_k(generator, train: ExampleSet, test: ExampleSet, n_items: int, ks,
            cfg: RerankerConfig | None = None, dataset_id: str = "dataset"):
    """Train one re-ranker per ``k`` and report pipeline Recall@5 on ``test``."""
    cfg = cfg or RerankerConfig()
    ks = sorted(set(int(k) for k in ks))
    # top-k lists are prefixes of the top-max(k) list
    full = candidate_matrix(generator.rank_batch(train, ks[-1]), ks[-1])
    points = []
    for k in ks:
        kc = replace(cfg, k=k)
        params, _, info = train_reranker(generator, train, n_items, kc, np.ascontiguousarray(full[:, :k]))
        pipe = TwoStagePipeline(generator, params, k, kc.cre_enabled, kc.attention_normalized)
        rep = evaluate(pipe, test, 5, f"RRCRE-k{k}", dataset_id)
        points.append(SweepPoint(k, rep.recall, info["kept_examples"], info["coverage"]))
        log.info("k=%d recall@5=%.4f kept=%d", k, rep.recall, info["kept_examples"])
    return points


@dataclass
class AblationResult:
    with_cre: EvalReport
    without_cre: EvalReport
    curve_with: list  # (step, epoch, val_recall5, loss)
    curve_without: list
    kept_examples: int


def ablate_cre(generator, train: ExampleSet, test: ExampleSet, n_items: int,
               cfg: RerankerConfig | None = None, N: int = 20, name: str = "G",
               dataset_id: str = "dataset") -> AblationResult:
    """RR-X vs RRCRE-X: two trainings identical except for the rank term."""
    cfg = cfg or RerankerConfig()
    cand = candidate_matrix(generator.rank_batch(train, cfg.k), cfg.k)
    runs = {}
    for enabled in (True, False):
        c = replace(cfg, cre_enabled=enabled)
        params, tlog, info = train_reranker(generator, train, n_items, c, cand)
        pipe = TwoStagePipeline(generator, params, c.k, enabled, c.attention_normalized)
        label = f"RRCRE-{name}" if enabled else f"RR-{name}"
        runs[enabled] = (evaluate(pipe, test, N, label, dataset_id), tlog.rows(), info)
    if runs[True][2]["kept_examples"] != runs[False][2]["kept_examples"]:
        raise ConsistencyError("ablation runs filtered different training examples")
    return AblationResult(runs[True][0], runs[False][0], runs[True][1], runs[False][1],
                          runs[True][2]["kept_examples"])
