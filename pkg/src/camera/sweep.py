"""Resumable (alpha, beta) grid search over a labelled dataset directory."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Optional

import yaml

from .errors import ConfigError
from .metrics import evaluate, score_nodes, write_scores
from .model import model_forward, save_model
from .store import MANIFEST_FILE, load_dataset, read_manifest, write_manifest
from .training import TrainConfig, build_model, train

log = logging.getLogger(__name__)


def load_grid(path: str | Path) -> dict:
    try:
        grid = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read grid {path}: {exc}") from None
    if not isinstance(grid, dict) or "alpha" not in grid or "beta" not in grid:
        raise ConfigError("grid file needs 'alpha' and 'beta' lists")
    unknown = set(grid) - {"alpha", "beta", "base"}
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    return grid


def expand_grid(alphas, betas) -> list[tuple[float, float]]:
    """Cartesian product in file order, duplicates removed."""
    cells = []
    for a, b in itertools.product(alphas, betas):
        cell = (float(a), float(b))
        if cell not in cells:
            cells.append(cell)
    return cells


def cell_key(alpha: float, beta: float) -> str:
    return f"alpha={alpha!r},beta={beta!r}"


def run_cell(data_dir: str, base: dict, alpha: float, beta: float, cell_dir: str) -> dict:
    dataset = load_dataset(data_dir, require_labels=True)
    cfg = TrainConfig.from_dict({**base, "alpha": alpha, "beta": beta})
    model = build_model(cfg, dataset.dim)
    model, _ = train(dataset, model, cfg)
    scores = score_nodes(model_forward(model, dataset.graph, dataset.features))
    d = Path(cell_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_model(model, d / "model.ckpt")
    write_scores(scores, d / "scores.txt")
    result = evaluate(scores, dataset.labels)
    write_manifest(
        d, "sweep-cell", cfg.to_dict(), {"data": data_dir},
        {"checkpoint": d / "model.ckpt", "scores": d / "scores.txt"}, cfg.seed,
    )
    return {"alpha": alpha, "beta": beta, "auroc": result.auroc, "auprc": result.auprc}


def run_sweep(
    grid_path: str | Path,
    data_dir: str | Path,
    out_dir: str | Path,
    jobs: int = 1,
    on_cell: Optional[Callable[[dict], None]] = None,
) -> list[dict]:
    """Train every grid cell not already recorded in out_dir/manifest.json."""
    grid = load_grid(grid_path)
    base = dict(grid.get("base") or {})
    TrainConfig.from_dict(base)  # validate before any work
    cells = expand_grid(grid["alpha"], grid["beta"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    done: dict[str, dict] = {}
    if (out / MANIFEST_FILE).exists():
        done = dict(read_manifest(out).get("cells", {}))
    pending = [c for c in cells if cell_key(*c) not in done]
    if done:
        log.info("resuming sweep: %d of %d cells already complete", len(cells) - len(pending), len(cells))

    def record(res: dict) -> None:
        done[cell_key(res["alpha"], res["beta"])] = res
        _write_results(out, cells, done)
        write_manifest(
            out, "sweep", {"grid": {"alpha": grid["alpha"], "beta": grid["beta"]}, "base": base},
            {"data": str(data_dir), "grid": str(grid_path)},
            {"results": out / "results.tsv"}, base.get("seed"),
            extra={"cells": done},
        )
        if on_cell is not None:
            on_cell(res)

    def cell_dir(a, b):
        return str(out / f"cell_a{a:g}_b{b:g}")

    if jobs <= 1:
        for a, b in pending:
            record(run_cell(str(data_dir), base, a, b, cell_dir(a, b)))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, str(data_dir), base, a, b, cell_dir(a, b)) for a, b in pending]
            for fut in futures:
                record(fut.result())
    return [done[cell_key(*c)] for c in cells]


def _write_results(out: Path, cells, done: dict) -> None:
    lines = ["alpha\tbeta\tauroc\tauprc"]
    for a, b in cells:
        r = done.get(cell_key(a, b))
        if r is not None:
            lines.append(f"{a:g}\t{b:g}\t{r['auroc']:.6f}\t{r['auprc']:.6f}")
    (out / "results.tsv").write_text("\n".join(lines) + "\n")
