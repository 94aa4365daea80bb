"""Ego-decoupled mixture-of-experts stack: experts, context-informed gating and forward pass.

A layer maps node embeddings H (n x d) to

    H + sum_k g_k * e_k(H)          (ego-decoupled, default)
    sum_k g_k * e_k(H)              (standard MoE ablation)

where the three experts return residuals ``H - reconstruction``:

* graph:    H - Ahat H W, Ahat the self-loop symmetric GCN normalization
* semantic: H - (relu(H We + be) Wd + bd)
* global:   H - (mean(H) Wm + bm), one row subtracted from every node

and the gate is ``softmax([H || C] Wg + bg)`` with C the neighbor mean.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .graph import Graph

EXPERTS = ("graph", "semantic", "global")

# parameter name -> owning group; groups are expert names or "gating"
PARAM_GROUPS = {
    "graph_w": "graph",
    "sem_enc_w": "semantic",
    "sem_enc_b": "semantic",
    "sem_dec_w": "semantic",
    "sem_dec_b": "semantic",
    "glob_w": "global",
    "glob_b": "global",
    "gate_w": "gating",
    "gate_b": "gating",
}


class MoeMode(str, enum.Enum):
    EGO_DECOUPLED = "ego-decoupled"
    STANDARD = "standard"


class GatingMode(str, enum.Enum):
    CONTEXT = "context"
    EGO = "ego"
    UNIFORM = "uniform"


@dataclass
class MoeLayer:
    graph_w: np.ndarray
    sem_enc_w: np.ndarray
    sem_enc_b: np.ndarray
    sem_dec_w: np.ndarray
    sem_dec_b: np.ndarray
    glob_w: np.ndarray
    glob_b: np.ndarray
    gate_w: np.ndarray
    gate_b: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}


@dataclass
class MoeModel:
    layers: list[MoeLayer]
    dim: int
    hidden: int
    mode: MoeMode = MoeMode.EGO_DECOUPLED
    gating_mode: GatingMode = GatingMode.CONTEXT
    expert_mask: tuple[bool, bool, bool] = (True, True, True)

    def __post_init__(self):
        self.mode = MoeMode(self.mode)
        self.gating_mode = GatingMode(self.gating_mode)
        self.expert_mask = tuple(bool(b) for b in self.expert_mask)
        if len(self.layers) < 1:
            raise ConfigError("model needs at least one layer")
        if len(self.expert_mask) != 3 or not any(self.expert_mask):
            raise ConfigError("expert_mask must enable at least one of the three experts")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].graph_w.dtype

    @property
    def enabled(self) -> list[int]:
        return [k for k in range(3) if self.expert_mask[k]]

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat name -> array mapping; arrays are the live parameter storage."""
        out = {}
        for l, layer in enumerate(self.layers):
            for name, arr in layer.tensors().items():
                out[f"layers.{l}.{name}"] = arr
        return out

    def num_parameters(self) -> int:
        return sum(a.size for a in self.parameters().values())

    def copy(self) -> "MoeModel":
        layers = [MoeLayer(**{k: v.copy() for k, v in layer.tensors().items()}) for layer in self.layers]
        return MoeModel(layers, self.dim, self.hidden, self.mode, self.gating_mode, self.expert_mask)

    def astype(self, dtype) -> "MoeModel":
        m = self.copy()
        for layer in m.layers:
            for name, arr in layer.tensors().items():
                setattr(layer, name, arr.astype(dtype))
        return m

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def init_model(
    dim: int,
    hidden: Optional[int] = None,
    num_layers: int = 2,
    seed: int = 0,
    mode: MoeMode | str = MoeMode.EGO_DECOUPLED,
    gating_mode: GatingMode | str = GatingMode.CONTEXT,
    expert_mask=(True, True, True),
    dtype=np.float32,
    allow_overcomplete: bool = False,
) -> MoeModel:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from PCG64(seed); biases zero."""
    if hidden is None:
        hidden = max(1, dim // 4)
    if dim < 1 or hidden < 1:
        raise ConfigError("dim and hidden must be positive")
    if hidden >= dim and not allow_overcomplete:
        raise ConfigError(
            f"semantic hidden dim {hidden} must be < dim {dim} unless allow_overcomplete is set"
        )
    if num_layers < 1:
        raise ConfigError("num_layers must be >= 1")
    rng = np.random.default_rng(seed)

    def weight(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)

    def zeros(k):
        return np.zeros(k, dtype=dtype)

    layers = []
    for _ in range(num_layers):
        layers.append(
            MoeLayer(
                graph_w=weight(dim, dim),
                sem_enc_w=weight(dim, hidden),
                sem_enc_b=zeros(hidden),
                sem_dec_w=weight(hidden, dim),
                sem_dec_b=zeros(dim),
                glob_w=weight(dim, dim),
                glob_b=zeros(dim),
                gate_w=weight(2 * dim, 3),
                gate_b=zeros(3),
            )
        )
    return MoeModel(layers, dim, hidden, MoeMode(mode), GatingMode(gating_mode), tuple(expert_mask))


# ---------------------------------------------------------------------------
# forward pieces


def gcn_propagate(graph: Graph, h: np.ndarray, w: np.ndarray) -> np.ndarray:
    if h.shape[0] != graph.num_nodes:
        raise DataError(f"feature rows {h.shape[0]} != graph nodes {graph.num_nodes}")
    if w.shape[0] != h.shape[1]:
        raise DataError(f"weight shape {w.shape} incompatible with feature dim {h.shape[1]}")
    return np.asarray(graph.gcn_norm @ h, dtype=h.dtype) @ w


def expert_graph(layer: MoeLayer, graph: Graph, h: np.ndarray) -> np.ndarray:
    return h - gcn_propagate(graph, h, layer.graph_w)


def _semantic_parts(layer: MoeLayer, h: np.ndarray):
    pre = h @ layer.sem_enc_w + layer.sem_enc_b
    act = np.maximum(pre, 0)
    recon = act @ layer.sem_dec_w + layer.sem_dec_b
    return pre, act, recon


def expert_semantic(layer: MoeLayer, h: np.ndarray) -> np.ndarray:
    return h - _semantic_parts(layer, h)[2]


def expert_global(layer: MoeLayer, h: np.ndarray) -> np.ndarray:
    mu = h.mean(axis=0)
    return h - (mu @ layer.glob_w + layer.glob_b)


def compute_context(graph: Graph, h: np.ndarray) -> np.ndarray:
    """Mean of neighbor rows; zero vector for isolated nodes."""
    return np.asarray(graph.mean_aggregator @ h, dtype=h.dtype)


def masked_softmax(logits: np.ndarray, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def gating_forward(
    layer: MoeLayer,
    h: np.ndarray,
    context: Optional[np.ndarray],
    gating_mode: GatingMode | str = GatingMode.CONTEXT,
    expert_mask=(True, True, True),
) -> np.ndarray:
    gating_mode = GatingMode(gating_mode)
    mask = np.asarray(expert_mask, dtype=bool)
    n = h.shape[0]
    if gating_mode is GatingMode.UNIFORM:
        return np.tile(mask / mask.sum(), (n, 1)).astype(h.dtype)
    if gating_mode is GatingMode.EGO or context is None:
        context = np.zeros_like(h)
    x = np.concatenate([h, context], axis=1)
    return masked_softmax(x @ layer.gate_w + layer.gate_b, mask).astype(h.dtype)


@dataclass
class LayerTrace:
    """Everything one layer computed; the backward pass reads from here."""

    inputs: np.ndarray
    context: np.ndarray
    gates: np.ndarray
    residuals: list[Optional[np.ndarray]]
    output: np.ndarray
    gcn_agg: Optional[np.ndarray] = None  # Ahat H, before the weight
    sem_pre: Optional[np.ndarray] = None
    sem_act: Optional[np.ndarray] = None
    glob_mean: Optional[np.ndarray] = None


@dataclass
class ForwardTrace:
    layers: list[LayerTrace] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.layers[-1].output

    @property
    def gates(self) -> list[np.ndarray]:
        return [lt.gates for lt in self.layers]


def moe_layer_forward(
    layer: MoeLayer,
    graph: Graph,
    h: np.ndarray,
    mode: MoeMode | str = MoeMode.EGO_DECOUPLED,
    gating_mode: GatingMode | str = GatingMode.CONTEXT,
    expert_mask=(True, True, True),
) -> tuple[np.ndarray, LayerTrace]:
    mode = MoeMode(mode)
    if h.shape[0] != graph.num_nodes:
        raise DataError(f"feature rows {h.shape[0]} != graph nodes {graph.num_nodes}")
    if h.shape[1] != layer.graph_w.shape[0]:
        raise DataError(f"feature dim {h.shape[1]} != model dim {layer.graph_w.shape[0]}")
    trace = LayerTrace(inputs=h, context=None, gates=None, residuals=[None, None, None], output=None)

    if expert_mask[0]:
        trace.gcn_agg = np.asarray(graph.gcn_norm @ h, dtype=h.dtype)
        trace.residuals[0] = h - trace.gcn_agg @ layer.graph_w
    if expert_mask[1]:
        trace.sem_pre, trace.sem_act, recon = _semantic_parts(layer, h)
        trace.residuals[1] = h - recon
    if expert_mask[2]:
        trace.glob_mean = h.mean(axis=0)
        trace.residuals[2] = h - (trace.glob_mean @ layer.glob_w + layer.glob_b)

    trace.context = compute_context(graph, h)
    trace.gates = gating_forward(layer, h, trace.context, gating_mode, expert_mask)

    out = h.copy() if mode is MoeMode.EGO_DECOUPLED else np.zeros_like(h)
    for k, e in enumerate(trace.residuals):
        if e is not None:
            out += trace.gates[:, k : k + 1] * e
    trace.output = out
    return out, trace


def model_forward(model: MoeModel, graph: Graph, h0: np.ndarray) -> ForwardTrace:
    h = np.asarray(h0, dtype=model.dtype)
    trace = ForwardTrace()
    for layer in model.layers:
        h, lt = moe_layer_forward(layer, graph, h, model.mode, model.gating_mode, model.expert_mask)
        trace.layers.append(lt)
    return trace


# ---------------------------------------------------------------------------
# checkpoint container: magic | u32 version | u32 header length | JSON header | tensors

CKPT_MAGIC = b"CAMCKPT0"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<8sII")


def save_model(model: MoeModel, path: str | Path) -> None:
    params = model.parameters()
    dtype = np.dtype(model.dtype)
    header = {
        "dim": model.dim,
        "hidden": model.hidden,
        "num_layers": model.num_layers,
        "mode": model.mode.value,
        "gating_mode": model.gating_mode.value,
        "expert_mask": list(model.expert_mask),
        "dtype": dtype.str.lstrip("<>|="),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tobytes())


def load_model(path: str | Path) -> MoeModel:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_PREFIX.size:
        raise FormatError(f"{path}: not a checkpoint (too short)")
    magic, version, hlen = _CKPT_PREFIX.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = _CKPT_PREFIX.size
    try:
        header = json.loads(raw[off : off + hlen])
    except json.JSONDecodeError:
        raise FormatError(f"{path}: corrupt checkpoint header") from None
    off += hlen
    dtype = np.dtype("<" + header["dtype"])
    tensors = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated tensor {spec['name']}")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(spec["shape"])
        tensors[spec["name"]] = arr.astype(dtype.newbyteorder("="))
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    layers = []
    for l in range(header["num_layers"]):
        layers.append(MoeLayer(**{name: tensors[f"layers.{l}.{name}"] for name in PARAM_GROUPS}))
    return MoeModel(
        layers,
        header["dim"],
        header["hidden"],
        MoeMode(header["mode"]),
        GatingMode(header["gating_mode"]),
        tuple(header["expert_mask"]),
    )
