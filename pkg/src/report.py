# Copyright (c) 2026 Mark Ferrell. MIT License.
"""CSV and plain-text rendering of evaluation results, sweeps and training traces."""

from __future__ import annotations

import csv
import io
import logging
from collections.abc import Sequence
from pathlib import Path

from src.evaluation import EvalRow, RetrievalRow
from src.sweep import Claim, SweepRow, seed_means
from src.train import TrainTrace

logger = logging.getLogger(__name__)

EVAL_FIELDS = ("dataset", "regime", "classifier", "episodes", "mean", "ci")
TRACE_FIELDS = ("iteration", "domain", "ce", "kl", "feature", "lambda_p", "lambda_f", "lr")
SWEEP_FIELDS = ("seed", "method", "dataset", "metric", "value", "ci")
CLAIM_FIELDS = ("claim", "left", "right", "margin", "result", "detail")


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def eval_csv(rows: Sequence[EvalRow]) -> str:
    """Render rows as CSV; ``ci`` is empty when undefined."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EVAL_FIELDS)
    for r in rows:
        writer.writerow([r.dataset, r.regime, r.classifier, r.episodes, _fmt(r.mean), _fmt(r.ci)])
    return buf.getvalue()


def format_cell(mean: float, ci: float | None) -> str:
    """Accuracy as ``"mean ± ci"`` in percent.

    Examples:
        >>> format_cell(0.5, 0.0123)
        '50.00 ± 1.23'
        >>> format_cell(0.5, None)
        '50.00'
    """
    text = f"{100 * mean:.2f}"
    return text if ci is None else f"{text} ± {100 * ci:.2f}"


def _table(header: Sequence[str], body: Sequence[Sequence[str]]) -> str:
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths, strict=True)).rstrip() for row in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def eval_table(rows: Sequence[EvalRow]) -> str:
    """Aligned table of datasets against classifiers; unseen domains are marked ``*``."""
    columns = list(dict.fromkeys(f"{r.classifier} ({r.regime})" for r in rows))
    datasets = list(dict.fromkeys(r.dataset for r in rows))
    cells = {(r.dataset, f"{r.classifier} ({r.regime})"): format_cell(r.mean, r.ci) for r in rows}
    unseen = {r.dataset for r in rows if not r.seen}
    body = [
        [name + ("*" if name in unseen else ""), *(cells.get((name, col), "-") for col in columns)]
        for name in datasets
    ]
    return _table(["dataset", *columns], body)


def retrieval_csv(rows: Sequence[RetrievalRow]) -> str:
    """One ``(dataset, k, recall)`` row per dataset and k."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dataset", "k", "recall"])
    for r in rows:
        for k in sorted(r.recalls):
            writer.writerow([r.dataset, k, _fmt(r.recalls[k])])
    return buf.getvalue()


def retrieval_table(rows: Sequence[RetrievalRow]) -> str:
    ks = sorted({k for r in rows for k in r.recalls})
    body = [[r.dataset, *(f"{100 * r.recalls[k]:.2f}" if k in r.recalls else "-" for k in ks)] for r in rows]
    return _table(["dataset", *(f"R@{k}" for k in ks)], body)


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    """One row per seed, method, domain and metric."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_FIELDS)
    for r in rows:
        writer.writerow([r.seed, r.method, r.dataset, r.metric, _fmt(r.value), _fmt(r.ci)])
    return buf.getvalue()


def sweep_table(rows: Sequence[SweepRow]) -> str:
    """Methods against metrics, averaged over seeds and domains, in percent."""
    methods = list(dict.fromkeys(r.method for r in rows))
    metrics = list(dict.fromkeys(r.metric for r in rows))
    body: list[list[str]] = []
    for method in methods:
        cells: list[str] = []
        for metric in metrics:
            means = seed_means(rows, method, metric)
            cells.append(format_cell(sum(means.values()) / len(means), None) if means else "-")
        body.append([method, *cells])
    return _table(["method", *metrics], body)


def claims_csv(claims: Sequence[Claim]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CLAIM_FIELDS)
    for c in claims:
        writer.writerow([c.name, _fmt(c.left), _fmt(c.right), _fmt(c.margin), "pass" if c.passed else "fail", c.detail])
    return buf.getvalue()


def claims_table(claims: Sequence[Claim]) -> str:
    body = [
        [c.name, *(f"{100 * v:.2f}" for v in (c.left, c.right, c.margin)), "pass" if c.passed else "FAIL", c.detail]
        for c in claims
    ]
    return _table(["claim", "left", "right", "margin", "result", "detail"], body)


def trace_csv(trace: TrainTrace) -> str:
    """One row per domain per step."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_FIELDS)
    for r in trace.records:
        values = [r.ce, r.kl, r.feature, r.lambda_p, r.lambda_f, r.lr]
        writer.writerow([r.iteration, r.domain, *(_fmt(v) for v in values)])
    return buf.getvalue()


def write_text(text: str, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    logger.info("Wrote %s", path)
    return path
