"""Losses, routed reverse-mode gradients, optimizers and the full-batch training loop.

Gradient routing:

* gating entropy at layer l reaches only that layer's gate tensors; the layer
  input and the residuals are treated as constants.
* the expert term for expert k at layer l reaches only that expert's tensors
  at layer l; the layer input is a constant.
* the one-class term back-propagates through the whole stack (optionally
  skipping the gates, see ``TrainConfig.oc_through_gating``).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .errors import ConfigError, DataError, NumericalError
from .graph import Dataset, Graph
from .model import (
    PARAM_GROUPS,
    EXPERTS,
    ForwardTrace,
    GatingMode,
    LayerTrace,
    MoeLayer,
    MoeMode,
    MoeModel,
    init_model,
    model_forward,
)

log = logging.getLogger(__name__)

GATING_EPS = 1e-8

# Per-dataset settings reported for the four public benchmarks.
PRESETS = {
    "reddit": dict(epochs=1200, alpha=5.0, beta=0.1, learning_rate=1e-3),
    "instagram": dict(epochs=15, alpha=10.0, beta=10.0, learning_rate=5e-5),
    "amazonvideo": dict(epochs=15, alpha=0.1, beta=1.0, learning_rate=5e-5),
    "yelpchi": dict(epochs=450, alpha=0.1, beta=10.0, learning_rate=1e-3),
}


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    alpha: float = 0.1
    beta: float = 1.0
    seed: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gating_eps: float = GATING_EPS
    oc_through_gating: bool = True
    num_layers: int = 2
    hidden: Optional[int] = None
    mode: str = MoeMode.EGO_DECOUPLED.value
    gating_mode: str = GatingMode.CONTEXT.value
    experts: tuple[str, ...] = EXPERTS
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.experts, str):
            self.experts = tuple(e.strip() for e in self.experts.split(",") if e.strip())
        self.experts = tuple(self.experts)
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError("epochs must be an integer >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        unknown = set(self.experts) - set(EXPERTS)
        if unknown or not self.experts:
            raise ConfigError(f"experts must be a non-empty subset of {EXPERTS}, got {self.experts}")
        try:
            MoeMode(self.mode)
            GatingMode(self.gating_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def expert_mask(self) -> tuple[bool, bool, bool]:
        return tuple(e in self.experts for e in EXPERTS)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["experts"] = list(self.experts)
        return d

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        values = dict(values)
        preset = values.pop("preset", None)
        base = {}
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            base.update(PRESETS[preset])
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base.update(values)
        try:
            return cls(**base)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_train_config(path: str | Path | None, overrides: Optional[dict] = None) -> TrainConfig:
    """Read a YAML key/value file (keys = TrainConfig fields, plus ``preset``)."""
    values = {}
    if path is not None:
        try:
            values = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"config {path} must be a key/value mapping")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(values)


def build_model(config: TrainConfig, dim: int) -> MoeModel:
    return init_model(
        dim,
        hidden=config.hidden,
        num_layers=config.num_layers,
        seed=config.seed,
        mode=config.mode,
        gating_mode=config.gating_mode,
        expert_mask=config.expert_mask,
        dtype=np.dtype(config.dtype),
    )


# ---------------------------------------------------------------------------
# losses


def loss_expert(trace: ForwardTrace) -> float:
    total = 0.0
    for lt in trace.layers:
        n = lt.inputs.shape[0]
        for e in lt.residuals:
            if e is not None:
                total += float(np.einsum("ij,ij->", e, e, dtype=np.float64)) / n
    return total


def loss_gating(trace: ForwardTrace, eps: float = GATING_EPS) -> float:
    total = 0.0
    for lt in trace.layers:
        g = lt.gates.astype(np.float64)
        total += float(-(g * np.log(g + eps)).sum()) / g.shape[0]
    return total


def _softplus(x):
    return np.logaddexp(0.0, x)


def loss_oc(scores: np.ndarray) -> float:
    """Mean BCE of the scores against the all-benign target."""
    s = np.asarray(scores, dtype=np.float64)
    return float(-np.log1p(-s).mean())


def loss_oc_from_output(h_final: np.ndarray) -> float:
    """Same as ``loss_oc(sigmoid(norms))`` without the 1 - s cancellation."""
    norms = np.linalg.norm(h_final.astype(np.float64), axis=1)
    return float(_softplus(norms).mean())


@dataclass(frozen=True)
class LossBreakdown:
    l_expert: float
    l_gating: float
    l_oc: float
    l_total: float
    alpha: float
    beta: float


def compute_losses(trace: ForwardTrace, alpha: float, beta: float, eps: float = GATING_EPS) -> LossBreakdown:
    le = loss_expert(trace)
    lg = loss_gating(trace, eps)
    lo = loss_oc_from_output(trace.output)
    return LossBreakdown(le, lg, lo, le + alpha * lg + beta * lo, alpha, beta)


# ---------------------------------------------------------------------------
# gradients


@dataclass
class GradientSet:
    grads: dict[str, np.ndarray]
    provenance: dict[str, set[str]] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.grads[name]

    def add(self, name: str, value: np.ndarray, term: str) -> None:
        self.grads[name] += value
        self.provenance.setdefault(name, set()).add(term)


def _expert_backward(k: int, layer: MoeLayer, lt: LayerTrace, graph: Graph, de: np.ndarray,
                     need_input: bool):
    """Parameter gradients of expert k given dL/d(residual); optionally dL/dH too."""
    h = lt.inputs
    dh = None
    if k == 0:
        grads = {"graph_w": -(lt.gcn_agg.T @ de)}
        if need_input:
            dh = de - np.asarray(graph.gcn_norm @ (de @ layer.graph_w.T), dtype=h.dtype)
    elif k == 1:
        d_recon = -de
        d_act = d_recon @ layer.sem_dec_w.T
        d_pre = d_act * (lt.sem_pre > 0)
        grads = {
            "sem_dec_w": lt.sem_act.T @ d_recon,
            "sem_dec_b": d_recon.sum(axis=0),
            "sem_enc_w": h.T @ d_pre,
            "sem_enc_b": d_pre.sum(axis=0),
        }
        if need_input:
            dh = de + d_pre @ layer.sem_enc_w.T
    else:
        d_proto = -de.sum(axis=0)
        grads = {"glob_w": np.outer(lt.glob_mean, d_proto), "glob_b": d_proto}
        if need_input:
            dh = de + (layer.glob_w @ d_proto) / h.shape[0]
    return grads, dh


def _gating_backward(layer: MoeLayer, lt: LayerTrace, graph: Graph, d_gates: np.ndarray,
                     gating_mode: GatingMode, need_input: bool):
    if gating_mode is GatingMode.UNIFORM:
        return {}, None
    g = lt.gates
    d_logits = g * (d_gates - (d_gates * g).sum(axis=1, keepdims=True))
    ctx = lt.context if gating_mode is GatingMode.CONTEXT else np.zeros_like(lt.inputs)
    x = np.concatenate([lt.inputs, ctx], axis=1)
    grads = {"gate_w": x.T @ d_logits, "gate_b": d_logits.sum(axis=0)}
    dh = None
    if need_input:
        d = lt.inputs.shape[1]
        dx = d_logits @ layer.gate_w.T
        dh = dx[:, :d]
        if gating_mode is GatingMode.CONTEXT:
            dh = dh + np.asarray(graph.mean_aggregator.T @ dx[:, d:], dtype=dh.dtype)
    return grads, dh


def backward(model: MoeModel, graph: Graph, trace: ForwardTrace, config: TrainConfig) -> GradientSet:
    """Gradient of expert + alpha*gating + beta*OC, each term under its own routing rule."""
    params = model.parameters()
    gs = GradientSet({name: np.zeros_like(p) for name, p in params.items()})
    alpha, beta = config.alpha, config.beta

    for l, (layer, lt) in enumerate(zip(model.layers, trace.layers)):
        n = lt.inputs.shape[0]
        # expert terms: local to expert k at layer l
        for k, e in enumerate(lt.residuals):
            if e is None:
                continue
            grads, _ = _expert_backward(k, layer, lt, graph, (2.0 / n) * e, need_input=False)
            for name, g in grads.items():
                gs.add(f"layers.{l}.{name}", g, "expert")
        # gating entropy: local to the gate at layer l
        if alpha and model.gating_mode is not GatingMode.UNIFORM:
            g = lt.gates
            d_gates = -(np.log(g + config.gating_eps) + g / (g + config.gating_eps)) / n
            grads, _ = _gating_backward(layer, lt, graph, alpha * d_gates, model.gating_mode, False)
            for name, v in grads.items():
                gs.add(f"layers.{l}.{name}", v, "gating")

    if beta:
        h = trace.output
        norms = np.linalg.norm(h, axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1)
        sig = 1.0 / (1.0 + np.exp(-norms))
        d_out = beta * (sig / h.shape[0]) * np.where(norms > 0, h / safe, 0)
        d_out = d_out.astype(h.dtype)
        for l in range(model.num_layers - 1, -1, -1):
            layer, lt = model.layers[l], trace.layers[l]
            need_input = l > 0
            d_in = d_out.copy() if model.mode is MoeMode.EGO_DECOUPLED else np.zeros_like(d_out)
            d_gates = np.zeros_like(lt.gates)
            for k, e in enumerate(lt.residuals):
                if e is None:
                    continue
                d_gates[:, k] = (d_out * e).sum(axis=1)
                grads, dh = _expert_backward(k, layer, lt, graph, lt.gates[:, k : k + 1] * d_out, need_input)
                for name, v in grads.items():
                    gs.add(f"layers.{l}.{name}", v, "oc")
                if dh is not None:
                    d_in += dh
            if config.oc_through_gating:
                grads, dh = _gating_backward(layer, lt, graph, d_gates, model.gating_mode, need_input)
                for name, v in grads.items():
                    gs.add(f"layers.{l}.{name}", v, "oc")
                if dh is not None:
                    d_in += dh
            d_out = d_in

    for name, g in gs.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    return gs


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
    for name, p in params.items():
        p -= (lr * grads[name]).astype(p.dtype)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    losses: LossBreakdown
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    checksum: str = ""

    def to_lines(self) -> list[str]:
        lines = []
        for r in self.epochs:
            lb = r.losses
            lines.append(json.dumps({
                "epoch": r.epoch,
                "l_expert": lb.l_expert,
                "l_gating": lb.l_gating,
                "l_oc": lb.l_oc,
                "l_total": lb.l_total,
                "seconds": round(r.seconds, 6),
            }))
        return lines

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def train(dataset: Dataset, model: MoeModel, config: TrainConfig,
          callback=None) -> tuple[MoeModel, TrainReport]:
    """Full-batch training for ``config.epochs`` epochs. The model is updated in place."""
    if dataset.dim != model.dim:
        raise DataError(f"features have dim {dataset.dim}, model expects {model.dim}")
    graph = dataset.graph
    h0 = dataset.features.astype(model.dtype)
    params = model.parameters()
    state = AdamState()
    report = TrainReport()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        trace = model_forward(model, graph, h0)
        losses = compute_losses(trace, config.alpha, config.beta, config.gating_eps)
        if not np.isfinite(losses.l_total):
            raise NumericalError(f"training diverged at epoch {epoch}: non-finite loss")
        try:
            grads = backward(model, graph, trace, config)
        except NumericalError as exc:
            raise NumericalError(f"training diverged at epoch {epoch}: {exc}") from None
        if config.optimizer == "adam":
            adam_step(params, grads.grads, state, config.learning_rate,
                      (config.adam_beta1, config.adam_beta2), config.adam_eps)
        else:
            sgd_step(params, grads.grads, config.learning_rate)
        report.epochs.append(EpochRecord(epoch, losses, time.perf_counter() - t0))
        if callback is not None:
            callback(epoch, losses)
        log.debug("epoch %d loss %.6f", epoch, losses.l_total)
    report.checksum = model.checksum()
    return model, report
