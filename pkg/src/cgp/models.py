"""Two-layer GCN and K-hop SGC with weight, edge and feature masks applied.

Backward passes return gradients with respect to the *effective* weights
(``mask * W``), so pruned positions still receive a score usable for
regrowth; the optimizer decides which positions actually move.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .graph_io import Graph, NormAdj
from .sparsifier import MaskedTensor, SoftMask
from .tensor_ops import (
    ShapeError,
    SparseMatrix,
    dropout_bwd,
    dropout_fwd,
    matmul,
    relu_bwd,
    relu_fwd,
    spmm,
    spmm_backward,
)

CHECKPOINT_FORMAT = "cgp-checkpoint/1"


class StaleCacheError(RuntimeError):
    pass


def glorot_uniform(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape).astype(dtype, copy=False)


@dataclass(eq=False)
class GcnModel:
    W0: MaskedTensor
    W1: MaskedTensor
    dropout_rate: float = 0.5
    version: int = 0
    kind = "gcn"

    @classmethod
    def init(cls, d: int, hidden: int, n_classes: int, rng: np.random.Generator,
             dropout_rate: float = 0.5, dtype=np.float64) -> "GcnModel":
        return cls(MaskedTensor.dense(glorot_uniform((d, hidden), rng, dtype), "W0"),
                   MaskedTensor.dense(glorot_uniform((hidden, n_classes), rng, dtype), "W1"),
                   dropout_rate)

    @property
    def hidden(self) -> int:
        return self.W0.values.shape[1]

    @property
    def weights(self) -> list[MaskedTensor]:
        return [self.W0, self.W1]

    def touch(self):
        self.version += 1


@dataclass(eq=False)
class SgcModel:
    W: MaskedTensor
    K: int = 2
    dropout_rate: float = 0.5
    version: int = 0
    kind = "sgc"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("SGC needs K >= 1")

    @classmethod
    def init(cls, d: int, n_classes: int, rng: np.random.Generator, K: int = 2,
             dropout_rate: float = 0.5, dtype=np.float64) -> "SgcModel":
        return cls(MaskedTensor.dense(glorot_uniform((d, n_classes), rng, dtype), "W"), K,
                   dropout_rate)

    @property
    def weights(self) -> list[MaskedTensor]:
        return [self.W]

    def touch(self):
        self.version += 1


@dataclass(eq=False)
class ForwardCache:
    model: object
    version: int
    adj: SparseMatrix
    arc_pos: np.ndarray
    base_values: np.ndarray  # fixed normalized values before edge masking
    features: np.ndarray
    feature_mask: np.ndarray
    in_drop: np.ndarray
    x_in: np.ndarray  # dropout(X * m_x)
    effective: list  # effective weights used in the forward pass
    acts: dict = field(default_factory=dict)


@dataclass
class GradBundle:
    dW: list
    dMa: np.ndarray
    dMx: np.ndarray


def masked_adjacency(na: NormAdj, m_a) -> SparseMatrix:
    """Scale each arc's fixed normalized value by its soft-mask entry; the
    self-loop entries are left untouched."""
    vals = np.asarray(getattr(m_a, "values", m_a))
    if vals.shape != na.arc_pos.shape:
        raise ShapeError(f"edge mask has {vals.size} entries, graph has {na.arc_pos.size} arcs")
    out = na.values.astype(vals.dtype if vals.dtype.kind == "f" else np.float64)
    out[na.arc_pos] = out[na.arc_pos] * vals
    return SparseMatrix(na.n_nodes, na.n_nodes, na.row_ptr, na.col_idx, out)


def _prepare_input(na, g, model, m_a, m_x, mode, rng):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    mx = np.asarray(getattr(m_x, "values", m_x))
    if mx.shape != (g.d,):
        raise ShapeError(f"feature mask has {mx.size} entries, graph has d={g.d}")
    first = model.weights[0].values
    if first.shape[0] != g.d:
        raise ShapeError(f"model expects d={first.shape[0]}, graph has d={g.d}")
    dtype = first.dtype
    adj = masked_adjacency(na, m_a)
    if adj.values.dtype != dtype:
        adj = adj.with_values(adj.values.astype(dtype))
    X = g.features.astype(dtype, copy=False)
    xm = X * mx.astype(dtype, copy=False)
    if mode == "train" and model.dropout_rate > 0:
        x_in, in_drop = dropout_fwd(xm, model.dropout_rate, rng)
    else:
        x_in, in_drop = xm, None
    return adj, X, mx, x_in, in_drop


def gcn_forward(na: NormAdj, g: Graph, model: GcnModel, m_a, m_x, mode: str = "eval",
                rng: Optional[np.random.Generator] = None):
    """Pre-softmax logits ``A' relu(A' (X*m_x) W0') W1'``.

    Each layer transforms before aggregating. In train mode, dropout hits the
    masked input features and the hidden activation.
    """
    adj, X, mx, x_in, in_drop = _prepare_input(na, g, model, m_a, m_x, mode, rng)
    W0e, W1e = model.W0.effective, model.W1.effective
    t0 = matmul(x_in, W0e)
    h0 = spmm(adj, t0)
    r = relu_fwd(h0)
    if mode == "train" and model.dropout_rate > 0:
        r_in, hid_drop = dropout_fwd(r, model.dropout_rate, rng)
    else:
        r_in, hid_drop = r, None
    t1 = matmul(r_in, W1e)
    logits = spmm(adj, t1)
    cache = ForwardCache(model, model.version, adj, na.arc_pos, na.values, X, mx, in_drop, x_in,
                         [W0e, W1e], dict(t0=t0, h0=h0, r_in=r_in, hid_drop=hid_drop, t1=t1))
    return logits, cache


def _check_cache(cache: ForwardCache, glogits: np.ndarray):
    if cache.version != cache.model.version:
        raise StaleCacheError("model changed since this forward pass")
    if glogits.shape[0] != cache.adj.n_rows:
        raise ShapeError("glogits rows do not match the graph")


def _input_grads(cache: ForwardCache, g_xin: np.ndarray) -> np.ndarray:
    g_xm = dropout_bwd(cache.in_drop, g_xin) if cache.in_drop is not None else g_xin
    return np.einsum("ij,ij->j", cache.features, g_xm)


def _edge_grads(cache: ForwardCache, gvals: np.ndarray) -> np.ndarray:
    # d(value_k)/d(m_a[arc]) is the fixed normalized value of position k
    pos = cache.arc_pos
    return cache.base_values[pos] * gvals[pos]


def gcn_backward(cache: ForwardCache, glogits: np.ndarray) -> GradBundle:
    _check_cache(cache, glogits)
    a = cache.acts
    W0e, W1e = cache.effective
    gv1, g_t1 = spmm_backward(cache.adj, a["t1"], glogits)
    dW1 = matmul(a["r_in"].T, g_t1)
    g_rin = matmul(g_t1, W1e.T)
    g_r = dropout_bwd(a["hid_drop"], g_rin) if a["hid_drop"] is not None else g_rin
    g_h0 = relu_bwd(a["h0"], g_r)
    gv0, g_t0 = spmm_backward(cache.adj, a["t0"], g_h0)
    dW0 = matmul(cache.x_in.T, g_t0)
    g_xin = matmul(g_t0, W0e.T)
    dMx = _input_grads(cache, g_xin)
    dMa = _edge_grads(cache, gv0 + gv1)
    return GradBundle([dW0, dW1], dMa, dMx)


def sgc_forward(na: NormAdj, g: Graph, model: SgcModel, m_a, m_x, mode: str = "eval",
                rng: Optional[np.random.Generator] = None):
    """Logits ``A'^K (X*m_x) W'`` with the edge mask applied at every hop."""
    adj, X, mx, x_in, in_drop = _prepare_input(na, g, model, m_a, m_x, mode, rng)
    We = model.W.effective
    hops = [matmul(x_in, We)]
    for _ in range(model.K):
        hops.append(spmm(adj, hops[-1]))
    cache = ForwardCache(model, model.version, adj, na.arc_pos, na.values, X, mx, in_drop, x_in, [We],
                         dict(hops=hops))
    return hops[-1], cache


def sgc_backward(cache: ForwardCache, glogits: np.ndarray) -> GradBundle:
    _check_cache(cache, glogits)
    hops = cache.acts["hops"]
    g = glogits
    gvals = np.zeros(cache.adj.nnz, dtype=glogits.dtype)
    for k in range(len(hops) - 1, 0, -1):
        gv, g = spmm_backward(cache.adj, hops[k - 1], g)
        gvals += gv
    dW = matmul(cache.x_in.T, g)
    g_xin = matmul(g, cache.effective[0].T)
    return GradBundle([dW], _edge_grads(cache, gvals), _input_grads(cache, g_xin))


def forward(na, g, model, m_a, m_x, mode="eval", rng=None):
    if isinstance(model, SgcModel):
        return sgc_forward(na, g, model, m_a, m_x, mode, rng)
    return gcn_forward(na, g, model, m_a, m_x, mode, rng)


def backward(cache: ForwardCache, glogits: np.ndarray) -> GradBundle:
    if isinstance(cache.model, SgcModel):
        return sgc_backward(cache, glogits)
    return gcn_backward(cache, glogits)


def accuracy(logits: np.ndarray, labels: np.ndarray, idx) -> float:
    idx = np.asarray(idx)
    if idx.size == 0:
        raise ValueError("accuracy: empty index set")
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    pred = np.argmax(logits[idx], axis=1)
    return float(np.mean(pred == np.asarray(labels)[idx]))


# ----------------------------------------------------------------- checkpoints

def _bits(mask: np.ndarray) -> str:
    return "".join("1" if b else "0" for b in np.ravel(mask).tolist())


def _unbits(s: str, shape) -> np.ndarray:
    return np.frombuffer(s.encode("ascii"), dtype=np.uint8).reshape(shape) == ord("1")


def save_checkpoint(path, model, edge_mask: SoftMask, feature_mask: SoftMask,
                    rng_state: Optional[dict] = None, meta: Optional[dict] = None) -> Path:
    """Write model weights and all masks as JSON.

    Floats are written with ``repr`` precision, so double-precision values
    survive the round trip bit for bit.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "model_kind": model.kind,
        "dropout_rate": model.dropout_rate,
        "K": getattr(model, "K", None),
        "dtype": str(model.weights[0].values.dtype),
        "weights": [
            {
                "name": w.name,
                "shape": list(w.values.shape),
                "values": w.values.ravel().tolist(),
                "mask": _bits(w.mask),
                "momentum": w.momentum.ravel().tolist(),
            }
            for w in model.weights
        ],
        "edge_mask": _soft_doc(edge_mask),
        "feature_mask": _soft_doc(feature_mask),
        "rng_state": rng_state,
        "meta": meta or {},
    }
    path = Path(path)
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def _soft_doc(m: SoftMask) -> dict:
    return {"kind": m.kind, "values": m.values.tolist(), "active": _bits(m.active),
            "momentum": m.momentum.tolist()}


def _soft_from(doc: dict, dtype) -> SoftMask:
    n = len(doc["values"])
    return SoftMask(np.array(doc["values"], dtype=dtype), _unbits(doc["active"], (n,)),
                    np.array(doc["momentum"], dtype=dtype), doc["kind"])


def load_checkpoint(path):
    """Inverse of save_checkpoint: returns ``(model, edge_mask, feature_mask, doc)``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    dtype = np.dtype(doc["dtype"])
    ws = []
    for w in doc["weights"]:
        shape = tuple(w["shape"])
        ws.append(MaskedTensor(np.array(w["values"], dtype=dtype).reshape(shape),
                               _unbits(w["mask"], shape),
                               np.array(w["momentum"], dtype=dtype).reshape(shape), w["name"]))
    if doc["model_kind"] == "sgc":
        model = SgcModel(ws[0], doc["K"], doc["dropout_rate"])
    else:
        model = GcnModel(ws[0], ws[1], doc["dropout_rate"])
    return model, _soft_from(doc["edge_mask"], dtype), _soft_from(doc["feature_mask"], dtype), doc
