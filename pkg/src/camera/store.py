"""On-disk dataset directories and run manifests."""

from __future__ import annotations

import hashlib
import json
import platform
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from .embeddings import read_embeddings, write_embeddings
from .errors import DataError, FormatError
from .graph import Dataset, build_graph, read_edge_list, read_labels, write_edge_list, write_labels

EDGES_FILE = "edges.txt"
FEATURES_FILE = "features.bin"
LABELS_FILE = "labels.txt"
MANIFEST_FILE = "manifest.json"


def save_dataset(dataset: Dataset, directory: str | Path) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"edges": d / EDGES_FILE, "features": d / FEATURES_FILE}
    write_edge_list(dataset.graph, paths["edges"])
    write_embeddings(dataset.features, paths["features"])
    if dataset.labels is not None:
        paths["labels"] = d / LABELS_FILE
        write_labels(dataset.labels, paths["labels"])
    return paths


def load_dataset(directory: str | Path, require_labels: bool = False) -> Dataset:
    """Load edges.txt + features.bin (+ labels.txt when present)."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"data directory not found: {d}")
    feat_path = d / FEATURES_FILE
    if not feat_path.exists():
        raise DataError(f"embeddings file not found: {feat_path}")
    edge_path = d / EDGES_FILE
    if not edge_path.exists():
        raise DataError(f"edge list not found: {edge_path}")
    x = read_embeddings(feat_path)
    graph = build_graph(read_edge_list(edge_path), x.shape[0])
    labels = None
    lab_path = d / LABELS_FILE
    if lab_path.exists():
        labels = read_labels(lab_path)
    elif require_labels:
        raise DataError(f"labels file not found: {lab_path}")
    return Dataset(graph=graph, features=x, labels=labels)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _relative(path, directory: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(directory.resolve()))
    except ValueError:
        raise DataError(f"run output {path} lies outside the run directory {directory}") from None


def write_manifest(
    directory: str | Path,
    command: str,
    config: dict,
    inputs: dict[str, str],
    outputs: dict[str, str | Path],
    seed: Optional[int],
    started: Optional[datetime] = None,
    extra: Optional[dict] = None,
) -> Path:
    """One manifest.json per run directory; output checksums are relative to it."""
    d = Path(directory)
    now = datetime.now(timezone.utc)
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: _relative(v, d) for k, v in outputs.items()},
        "seed": seed,
        "checksums": {},
        "started": (started or now).isoformat(),
        "finished": now.isoformat(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    for key, rel in manifest["outputs"].items():
        manifest["checksums"][rel] = sha256_file(d / rel)
    if extra:
        manifest.update(extra)
    path = d / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST_FILE
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError:
        raise FormatError(f"corrupt manifest: {path}") from None


def verify_manifest(directory: str | Path) -> list[str]:
    """Names of outputs whose checksum no longer matches; empty when all verify."""
    d = Path(directory)
    manifest = read_manifest(d)
    bad = []
    for rel, digest in manifest["checksums"].items():
        p = d / rel
        if not p.exists() or sha256_file(p) != digest:
            bad.append(rel)
    return bad
