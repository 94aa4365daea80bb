"""Fraud scores, ranking metrics and the local-affinity diagnostic."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, FormatError, UndefinedMetricError
from .graph import Graph
from .model import ForwardTrace

log = logging.getLogger(__name__)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def score_nodes(trace_or_output) -> np.ndarray:
    """sigmoid of the L2 norm of each final embedding row; always >= 0.5."""
    h = trace_or_output.output if isinstance(trace_or_output, ForwardTrace) else trace_or_output
    return sigmoid(np.linalg.norm(np.asarray(h, dtype=np.float64), axis=1))


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError(f"scores {s.shape} and labels {y.shape} must be 1-D of equal length")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0/1")
    if not np.all(np.isfinite(s)):
        raise DataError("scores must be finite")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via average ranks."""
    s, y = _check_binary(scores, labels)
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = rankdata(s)  # average ranks resolve ties as half-credit
    return float((ranks[y].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def auprc(scores, labels) -> float:
    """Step-wise average precision; at equal scores negatives are ranked first."""
    s, y = _check_binary(scores, labels)
    pos = int(y.sum())
    if pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    order = np.lexsort((y, -s))
    hits = y[order]
    tp = np.cumsum(hits)
    rank = np.arange(1, len(s) + 1)
    return float((tp[hits] / rank[hits]).sum() / pos)


@dataclass(frozen=True)
class MetricResult:
    auroc: float
    auprc: float
    positives: int
    negatives: int

    @property
    def positive_rate(self) -> float:
        return self.positives / (self.positives + self.negatives)

    def to_text(self) -> str:
        return (
            f"auroc={self.auroc:.6f} auprc={self.auprc:.6f} "
            f"positives={self.positives} negatives={self.negatives}"
        )


def evaluate(scores, labels) -> MetricResult:
    y = np.asarray(labels)
    return MetricResult(auroc(scores, labels), auprc(scores, labels), int((y == 1).sum()), int((y == 0).sum()))


@dataclass(frozen=True)
class AffinityResult:
    values: np.ndarray  # NaN for isolated nodes
    mean: float
    zero_norm_pairs: int


def local_affinity(graph: Graph, features: np.ndarray) -> AffinityResult:
    """Mean cosine similarity between each node and its neighbors."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] != graph.num_nodes:
        raise DataError("features are not row-aligned with the graph")
    norms = np.linalg.norm(x, axis=1)
    rows = np.repeat(np.arange(graph.num_nodes), graph.degrees)
    cols = graph.col_indices
    denom = norms[rows] * norms[cols]
    zero = denom == 0
    cos = np.zeros(len(cols))
    ok = ~zero
    cos[ok] = np.einsum("ij,ij->i", x[rows[ok]], x[cols[ok]]) / denom[ok]
    zero_pairs = int(zero.sum())
    if zero_pairs:
        log.warning("%d neighbor pairs involve a zero-norm feature row", zero_pairs)
    sums = np.bincount(rows, weights=cos, minlength=graph.num_nodes)
    values = np.full(graph.num_nodes, np.nan)
    has = graph.degrees > 0
    values[has] = sums[has] / graph.degrees[has]
    mean = float(values[has].mean()) if has.any() else float("nan")
    return AffinityResult(values, mean, zero_pairs)


def write_scores(scores, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{float(s)!r}\n" for s in scores)


def read_scores(path: str | Path) -> np.ndarray:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(float(line))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: not a number: {line!r}") from None
    return np.asarray(out)
