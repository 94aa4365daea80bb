"""Synthetic text-attributed-graph benchmarks with camouflaged fraudsters.

Benign nodes live in a planted-partition graph with Gaussian features around
per-community means. Fraudsters are a rare group that

* send a ``structural_camouflage`` fraction of their edges into their home
  community and the rest to nodes outside it (heterophilic edges), and
* carry features ``community mean + (1 - semantic_camouflage) * offset_scale * u
  + noise`` where ``u`` is a per-run malicious direction orthogonal to all
  community means.

This generator is an original construction for testing; it does not model
any real fraud campaign.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .graph import Dataset, build_graph, Graph
from .metrics import local_affinity


@dataclass(frozen=True)
class SynthConfig:
    num_nodes: int = 2000
    num_communities: int = 8
    fraud_rate: float = 0.05
    dim: int = 32
    intra_edge_prob: float = 0.03
    inter_edge_prob: float = 0.0016
    structural_camouflage: float = 0.7
    semantic_camouflage: float = 0.7
    noise_sigma: float = 0.075
    offset_scale: float = 1.25
    mean_scale_min: float = 0.25
    mean_scale_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_nodes < 2:
            raise ConfigError("num_nodes must be >= 2")
        if not 1 <= self.num_communities <= self.num_nodes:
            raise ConfigError("num_communities must be in [1, num_nodes]")
        if not 0 < self.fraud_rate < 0.5:
            raise ConfigError("fraud_rate must lie in (0, 0.5): fraudsters are a minority")
        if self.dim <= self.num_communities:
            raise ConfigError("dim must exceed num_communities so the malicious direction is orthogonal")
        for name in ("intra_edge_prob", "inter_edge_prob", "structural_camouflage", "semantic_camouflage"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.noise_sigma < 0 or self.offset_scale < 0:
            raise ConfigError("noise_sigma and offset_scale must be non-negative")
        if not 0 <= self.mean_scale_min <= self.mean_scale_max:
            raise ConfigError("need 0 <= mean_scale_min <= mean_scale_max")

    @property
    def num_fraud(self) -> int:
        return int(round(self.fraud_rate * self.num_nodes))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "SynthConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _sample_pairs(rng, members: np.ndarray, count: int) -> np.ndarray:
    i = rng.choice(members, size=count)
    j = rng.choice(members, size=count)
    return np.stack([i, j], axis=1)


def _benign_edges(rng, cfg: SynthConfig, benign: np.ndarray, community: np.ndarray) -> list[np.ndarray]:
    out = []
    total_pairs = len(benign) * (len(benign) - 1) // 2
    intra_pairs = 0
    for c in range(cfg.num_communities):
        members = benign[community[benign] == c]
        pairs = len(members) * (len(members) - 1) // 2
        intra_pairs += pairs
        if pairs == 0:
            continue
        k = rng.binomial(pairs, cfg.intra_edge_prob)
        out.append(_sample_pairs(rng, members, k))
    inter_pairs = total_pairs - intra_pairs
    k = rng.binomial(inter_pairs, cfg.inter_edge_prob) if inter_pairs > 0 else 0
    if k:
        cand = _sample_pairs(rng, benign, 2 * k + 16)
        cand = cand[community[cand[:, 0]] != community[cand[:, 1]]][:k]
        out.append(cand)
    return out


def generate(cfg: SynthConfig) -> Dataset:
    """Deterministic labelled benchmark for ``cfg``."""
    n, k_comm = cfg.num_nodes, cfg.num_communities
    expected_intra = k_comm * (n / k_comm) ** 2 / 2 * cfg.intra_edge_prob
    expected_inter = n * n / 2 * (1 - 1 / k_comm) * cfg.inter_edge_prob
    if expected_intra + expected_inter < 1:
        raise ConfigError("configuration is infeasible: fewer than one expected edge")

    rng = np.random.default_rng(cfg.seed)
    community = rng.integers(0, k_comm, size=n)
    labels = np.zeros(n, dtype=np.int8)
    fraud = np.sort(rng.choice(n, size=cfg.num_fraud, replace=False))
    labels[fraud] = 1
    benign = np.flatnonzero(labels == 0)

    edges = _benign_edges(rng, cfg, benign, community)

    # fraudsters get the mean benign degree
    benign_edge_count = sum(len(e) for e in edges)
    mean_degree = max(1.0, 2.0 * benign_edge_count / max(len(benign), 1))
    benign_by_comm = [benign[community[benign] == c] for c in range(k_comm)]
    fraud_edges = []
    for f in fraud:
        deg = max(1, rng.poisson(mean_degree))
        home = benign_by_comm[community[f]]
        n_camo = rng.binomial(deg, cfg.structural_camouflage) if len(home) else 0
        if n_camo:
            fraud_edges.append(np.stack([np.full(n_camo, f), rng.choice(home, size=n_camo)], axis=1))
        outside = np.flatnonzero(community != community[f])
        n_out = deg - n_camo
        if n_out and len(outside):
            fraud_edges.append(np.stack([np.full(n_out, f), rng.choice(outside, size=n_out)], axis=1))
    all_edges = np.concatenate(edges + fraud_edges) if (edges or fraud_edges) else np.empty((0, 2), int)
    graph = build_graph(all_edges, n)

    # community means: random directions, norms spread over [min, max]
    dirs = rng.standard_normal((k_comm, cfg.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = rng.uniform(cfg.mean_scale_min, cfg.mean_scale_max, size=k_comm)
    means = dirs * radii[:, None]
    u = rng.standard_normal(cfg.dim)
    q, _ = np.linalg.qr(means.T)
    u -= q @ (q.T @ u)
    u /= np.linalg.norm(u)

    x = means[community] + cfg.noise_sigma * rng.standard_normal((n, cfg.dim))
    x[fraud] += (1.0 - cfg.semantic_camouflage) * cfg.offset_scale * u

    meta = {
        "config": cfg.to_dict(),
        "communities": community,
        "community_means": means,
        "malicious_direction": u,
    }
    return Dataset(graph=graph, features=x.astype(np.float32), labels=labels, meta=meta)


def affinity_gap(dataset: Dataset) -> tuple[float, float]:
    """(benign mean, fraud mean) of local affinity over non-isolated nodes."""
    if dataset.labels is None:
        raise DataError("affinity_gap needs labels")
    y = np.asarray(dataset.labels)
    aff = local_affinity(dataset.graph, dataset.features).values
    has = ~np.isnan(aff)
    fraud, benign = has & (y == 1), has & (y == 0)
    if not fraud.any() or not benign.any():
        raise DataError("affinity_gap needs non-isolated nodes of both classes")
    return float(aff[benign].mean()), float(aff[fraud].mean())


def random_graph(num_nodes: int, num_edges: int, seed: int = 0) -> Graph:
    """Uniform random multigraph sample, canonicalized (used for scaling runs)."""
    rng = np.random.default_rng(seed)
    e = rng.integers(0, num_nodes, size=(num_edges, 2))
    return build_graph(e, num_nodes)
