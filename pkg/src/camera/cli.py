"""``camera`` command line: generate, embed, train, score, eval, inspect-gating, sweep.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np
import yaml

from .embeddings import EmbeddingServiceConfig, fetch_embeddings, read_jsonl_texts, write_embeddings
from .errors import CameraError, ConfigError, DataError
from .graph import read_labels
from .metrics import evaluate, read_scores, score_nodes, write_scores
from .model import EXPERTS, load_model, model_forward, save_model
from .store import load_dataset, save_dataset, write_manifest
from .synth import SynthConfig, generate
from .sweep import run_sweep
from .training import PRESETS, TrainConfig, build_model, load_train_config, train

log = logging.getLogger("camera")


def _now():
    return datetime.now(timezone.utc)


def _read_yaml(path) -> dict:
    if path is None:
        return {}
    try:
        values = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"config {path} must be a key/value mapping")
    return values


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def cli(verbose):
    """Unsupervised fraud detection on text-attributed graphs."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(levelname)s %(message)s")


@cli.command("generate")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML synth config.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, help="Overrides the config seed.")
def cmd_generate(config_path, out_dir, seed):
    """Write a synthetic labelled benchmark (edges, features, labels, manifest)."""
    started = _now()
    values = _read_yaml(config_path)
    if seed is not None:
        values["seed"] = seed
    cfg = SynthConfig.from_dict(values)
    dataset = generate(cfg)
    paths = save_dataset(dataset, out_dir)
    write_manifest(out_dir, "generate", cfg.to_dict(), {"config": str(config_path)}, paths, cfg.seed, started)
    click.echo(f"wrote {dataset.graph.num_nodes} nodes, {dataset.graph.num_edges} edges, "
               f"{int(dataset.labels.sum())} fraudsters to {out_dir}")


@cli.command("embed")
@click.option("--texts", required=True, type=click.Path(exists=True, dir_okay=False), help="JSONL corpus.")
@click.option("--endpoint", required=True, help="Embeddings endpoint URL.")
@click.option("--model", "model_name", default="text-embedding-3-small", show_default=True)
@click.option("--batch-size", default=100, show_default=True)
@click.option("--timeout", default=30.0, show_default=True)
@click.option("--auth-env", default=None, help="Environment variable holding the bearer token.")
@click.option("--retries", default=3, show_default=True)
@click.option("--concurrency", default=1, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cmd_embed(texts, endpoint, model_name, batch_size, timeout, auth_env, retries, concurrency, out_path):
    """Embed a text corpus through a remote service into features.bin format.

    Node ids must be exactly 0..n-1; rows are written in node-id order.
    """
    records = read_jsonl_texts(texts)
    ids = sorted(r.node_id for r in records)
    if ids != list(range(len(records))):
        raise DataError("node_id values must be exactly 0..n-1")
    records.sort(key=lambda r: r.node_id)
    cfg = EmbeddingServiceConfig(endpoint, model_name, batch_size, timeout, auth_env, retries,
                                 max_concurrency=concurrency)
    x = fetch_embeddings(records, cfg)
    write_embeddings(x, out_path)
    click.echo(f"wrote {x.shape[0]}x{x.shape[1]} embeddings to {out_path}")


@cli.command("train")
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML train config.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--preset", type=click.Choice(sorted(PRESETS)), help="Published per-dataset settings.")
@click.option("--experts", help=f"Comma-separated subset of {','.join(EXPERTS)}.")
@click.option("--gating", type=click.Choice(["context", "ego", "uniform"]))
@click.option("--moe", type=click.Choice(["ego-decoupled", "standard"]))
@click.option("--epochs", type=int)
@click.option("--lr", "learning_rate", type=float)
@click.option("--alpha", type=float)
@click.option("--beta", type=float)
@click.option("--seed", type=int)
@click.option("--layers", "num_layers", type=int)
@click.option("--hidden", type=int)
def cmd_train(data_dir, config_path, out_dir, preset, experts, gating, moe, **overrides):
    """Train on a dataset directory; writes model.ckpt, train_report.jsonl, manifest.json."""
    started = _now()
    overrides.update(preset=preset, experts=experts, gating_mode=gating, mode=moe)
    cfg = load_train_config(config_path, overrides)
    dataset = load_dataset(data_dir)
    model = build_model(cfg, dataset.dim)

    def progress(epoch, losses):
        if epoch == 1 or epoch % 50 == 0 or epoch == cfg.epochs:
            log.info("epoch %d/%d loss=%.5f expert=%.5f gating=%.5f oc=%.5f", epoch, cfg.epochs,
                     losses.l_total, losses.l_expert, losses.l_gating, losses.l_oc)

    model, report = train(dataset, model, cfg, callback=progress)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.ckpt")
    report.write(out / "train_report.jsonl")
    write_manifest(out, "train", cfg.to_dict(), {"data": str(data_dir), "config": str(config_path)},
                   {"checkpoint": out / "model.ckpt"}, cfg.seed, started,
                   extra={"model_checksum": report.checksum})
    click.echo(f"trained {cfg.epochs} epochs, final loss {report.epochs[-1].losses.l_total:.6f}; "
               f"checkpoint {out / 'model.ckpt'}")


@cli.command("score")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cmd_score(checkpoint, data_dir, out_path):
    """Write one fraud score per line, line i = node i."""
    model = load_model(checkpoint)
    dataset = load_dataset(data_dir)
    if dataset.dim != model.dim:
        raise DataError(f"checkpoint expects dim {model.dim}, dataset has dim {dataset.dim}")
    scores = score_nodes(model_forward(model, dataset.graph, dataset.features))
    write_scores(scores, out_path)
    click.echo(f"wrote {len(scores)} scores to {out_path}")


@cli.command("eval")
@click.argument("scores", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--labels", "labels_path", required=True, type=click.Path(exists=True, dir_okay=False))
def cmd_eval(scores, labels_path):
    """AUROC/AUPRC per scores file; with several files also mean and std."""
    labels = read_labels(labels_path)
    results = []
    for path in scores:
        s = read_scores(path)
        if len(s) != len(labels):
            raise DataError(f"{path} has {len(s)} scores but there are {len(labels)} labels")
        r = evaluate(s, labels)
        results.append(r)
        click.echo(f"file={path} {r.to_text()}")
    if len(results) > 1:
        a = np.array([r.auroc for r in results])
        p = np.array([r.auprc for r in results])
        click.echo(f"runs={len(results)} auroc_mean={a.mean():.6f} auroc_std={a.std():.6f} "
                   f"auprc_mean={p.mean():.6f} auprc_std={p.std():.6f}")


@cli.command("inspect-gating")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--per-node", "per_node", type=click.Path(dir_okay=False),
              help="Also write a per-node table (TSV) to this path.")
def cmd_inspect_gating(checkpoint, data_dir, per_node):
    """Mean gating weight per expert and layer; optional per-node table."""
    model = load_model(checkpoint)
    dataset = load_dataset(data_dir)
    if dataset.dim != model.dim:
        raise DataError(f"checkpoint expects dim {model.dim}, dataset has dim {dataset.dim}")
    trace = model_forward(model, dataset.graph, dataset.features)
    click.echo("layer\t" + "\t".join(EXPERTS))
    for l, g in enumerate(trace.gates, 1):
        click.echo(f"{l}\t" + "\t".join(f"{v:.6f}" for v in g.astype(np.float64).mean(axis=0)))
    if per_node:
        header = ["node"] + [f"l{l}_{e}" for l in range(1, model.num_layers + 1) for e in EXPERTS]
        table = np.concatenate([g.astype(np.float64) for g in trace.gates], axis=1)
        with open(per_node, "w", encoding="utf-8") as fh:
            fh.write("\t".join(header) + "\n")
            for i, row in enumerate(table):
                fh.write(f"{i}\t" + "\t".join(f"{v:.6f}" for v in row) + "\n")


@cli.command("sweep")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--jobs", default=1, show_default=True, help="Cells trained concurrently.")
def cmd_sweep(grid_path, data_dir, out_dir, jobs):
    """Train over an (alpha, beta) grid and tabulate AUROC; resumes from the manifest."""
    rows = run_sweep(grid_path, data_dir, out_dir, jobs=jobs)
    click.echo("alpha\tbeta\tauroc\tauprc")
    for r in rows:
        click.echo(f"{r['alpha']:g}\t{r['beta']:g}\t{r['auroc']:.6f}\t{r['auprc']:.6f}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="camera", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except CameraError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
