"""Immutable CSR graph and dataset containers, plus the plain-text edge/label formats."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataError, FormatError

INDEX_DTYPE = np.int64


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph in canonical CSR form.

    Every undirected edge is stored in both directions, rows are sorted,
    and self-loops are never stored.
    """

    num_nodes: int
    num_edges: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    degrees: np.ndarray

    def __post_init__(self):
        for arr in (self.row_offsets, self.col_indices, self.degrees):
            arr.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and self.num_edges == other.num_edges
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
        )

    __hash__ = None

    def neighbors(self, i: int) -> np.ndarray:
        if not 0 <= i < self.num_nodes:
            raise DataError(f"node index {i} out of range for graph with {self.num_nodes} nodes")
        return self.col_indices[self.row_offsets[i] : self.row_offsets[i + 1]]

    def edge_dump(self) -> np.ndarray:
        """Unique undirected edges as (i, j) rows with i < j."""
        rows = np.repeat(np.arange(self.num_nodes, dtype=INDEX_DTYPE), self.degrees)
        keep = rows < self.col_indices
        return np.stack([rows[keep], self.col_indices[keep]], axis=1)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.col_indices))
        return sp.csr_matrix(
            (data, self.col_indices, self.row_offsets), shape=(self.num_nodes, self.num_nodes)
        )

    @cached_property
    def gcn_norm(self) -> sp.csr_matrix:
        """D~^{-1/2} (A + I) D~^{-1/2} with D~ the degree matrix of A + I."""
        a_hat = self.adjacency + sp.identity(self.num_nodes, format="csr")
        inv_sqrt = 1.0 / np.sqrt(self.degrees + 1.0)
        d = sp.diags(inv_sqrt)
        return (d @ a_hat @ d).tocsr()

    @cached_property
    def mean_aggregator(self) -> sp.csr_matrix:
        """Row-normalized adjacency; rows of isolated nodes are all zero."""
        inv = np.zeros(self.num_nodes)
        nz = self.degrees > 0
        inv[nz] = 1.0 / self.degrees[nz]
        return (sp.diags(inv) @ self.adjacency).tocsr()

    def check_canonical(self) -> None:
        """Raise DataError if any canonical-form invariant is violated."""
        n = self.num_nodes
        ro, ci = self.row_offsets, self.col_indices
        if len(ro) != n + 1 or ro[0] != 0 or np.any(np.diff(ro) < 0):
            raise DataError("row_offsets is not a valid offset array")
        if ro[-1] != 2 * self.num_edges or len(ci) != 2 * self.num_edges:
            raise DataError("row_offsets[n] must equal 2m")
        if len(ci) and (ci.min() < 0 or ci.max() >= n):
            raise DataError("column index out of range")
        if not np.array_equal(self.degrees, np.diff(ro)):
            raise DataError("degrees disagree with row_offsets")
        rows = np.repeat(np.arange(n), self.degrees)
        if np.any(rows == ci):
            raise DataError("self-loop stored")
        same_row = rows[1:] == rows[:-1]
        if np.any(ci[1:][same_row] <= ci[:-1][same_row]):
            raise DataError("row indices not strictly increasing")
        fwd = rows * n + ci
        bwd = np.sort(ci * n + rows)
        if not np.array_equal(fwd, bwd):
            raise DataError("adjacency is not symmetric")


def build_graph(edges: Iterable[Sequence[int]] | np.ndarray, num_nodes: int) -> Graph:
    """Canonicalize an edge list: drop self-loops, symmetrize, deduplicate."""
    if num_nodes <= 0:
        raise DataError("graph must have at least one node")
    e = np.asarray(edges, dtype=INDEX_DTYPE)
    if e.size == 0:
        e = e.reshape(0, 2)
    if e.ndim != 2 or e.shape[1] != 2:
        raise DataError(f"edge list must have shape (k, 2), got {e.shape}")
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        bad = e[(e < 0).any(axis=1) | (e >= num_nodes).any(axis=1)][0]
        raise DataError(f"edge ({bad[0]}, {bad[1]}) out of range for {num_nodes} nodes")
    e = e[e[:, 0] != e[:, 1]]
    both = np.concatenate([e, e[:, ::-1]])
    keys = np.unique(both[:, 0] * num_nodes + both[:, 1])
    rows, cols = np.divmod(keys, num_nodes)
    degrees = np.bincount(rows, minlength=num_nodes).astype(INDEX_DTYPE)
    row_offsets = np.zeros(num_nodes + 1, dtype=INDEX_DTYPE)
    np.cumsum(degrees, out=row_offsets[1:])
    return Graph(
        num_nodes=num_nodes,
        num_edges=len(keys) // 2,
        row_offsets=row_offsets,
        col_indices=cols.astype(INDEX_DTYPE),
        degrees=degrees,
    )


@dataclass(frozen=True, eq=False)
class Dataset:
    graph: Graph
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    node_ids: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = self.features
        if x.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        if x.shape[0] != self.graph.num_nodes:
            raise DataError(
                f"feature rows ({x.shape[0]}) do not match graph nodes ({self.graph.num_nodes})"
            )
        if not np.all(np.isfinite(x)):
            raise DataError("features contain non-finite values")
        if self.labels is not None:
            check_labels(self.labels, self.graph.num_nodes)
        if self.node_ids is not None and len(self.node_ids) != self.graph.num_nodes:
            raise DataError("node_ids length does not match graph nodes")

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def check_labels(labels: np.ndarray, n: int) -> None:
    if len(labels) != n:
        raise DataError(f"label vector has length {len(labels)}, expected {n}")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 (benign) or 1 (fraud)")


def read_edge_list(path: str | Path) -> np.ndarray:
    """Whitespace-separated integer pairs, '#' comment lines ignored."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected two node indices, got {line!r}")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer node index in {line!r}") from None
    return np.asarray(pairs, dtype=INDEX_DTYPE).reshape(-1, 2)


def write_edge_list(graph: Graph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# nodes {graph.num_nodes} edges {graph.num_edges}\n")
        for i, j in graph.edge_dump():
            fh.write(f"{i} {j}\n")


def read_labels(path: str | Path) -> np.ndarray:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line not in ("0", "1"):
                raise FormatError(f"{path}:{lineno}: label must be 0 or 1, got {line!r}")
            out.append(int(line))
    return np.asarray(out, dtype=np.int8)


def write_labels(labels: np.ndarray, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(y)}\n" for y in labels)
