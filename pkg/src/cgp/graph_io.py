"""Graph datasets: on-disk loading, SBM synthesis and GCN normalization.

A dataset directory holds four files::

    edges.tsv      one arc per line, "src dst" (0-based, whitespace separated)
    features.tsv   n rows of d whitespace-separated decimals
    labels.tsv     n integer class ids, one per line
    splits.json    {"train": [...], "val": [...], "test": [...], "undirected": true}

Arcs are directed. Undirected graphs store both directions, and every mask
downstream is per arc.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EDGES_FILE = "edges.tsv"
FEATURES_FILE = "features.tsv"
LABELS_FILE = "labels.tsv"
SPLITS_FILE = "splits.json"


class DatasetError(ValueError):
    """Malformed dataset; the message names the offending file and line."""


@dataclass(frozen=True, eq=False)
class Graph:
    n_nodes: int
    arcs: np.ndarray  # (m, 2) int64, rows are (src, dst)
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        arcs = np.asarray(self.arcs, dtype=np.int64).reshape(-1, 2)
        feats = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        object.__setattr__(self, "arcs", arcs)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        n = self.n_nodes
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ValueError(f"features must be {n} x d, got {feats.shape}")
        if labels.shape != (n,):
            raise ValueError(f"labels must have length {n}, got {labels.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        if n and labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        if arcs.size:
            if arcs.min() < 0 or arcs.max() >= n:
                raise ValueError("arc endpoint out of range")
            if np.any(arcs[:, 0] == arcs[:, 1]):
                raise ValueError("self-loop arcs are not stored")
            keys = arcs[:, 0] * n + arcs[:, 1]
            uniq = np.unique(keys)
            if uniq.size != keys.size:
                raise ValueError("duplicate arc")
            # Arcs are kept sorted by (src, dst); per-arc masks index this order.
            arcs = np.stack([uniq // n, uniq % n], axis=1)
            object.__setattr__(self, "arcs", arcs)
        for arr in (arcs, feats, labels):
            arr.flags.writeable = False

    @property
    def n_arcs(self) -> int:
        return int(self.arcs.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.n_nodes else 0

    def is_symmetric(self) -> bool:
        n = self.n_nodes
        fwd = np.sort(self.arcs[:, 0] * n + self.arcs[:, 1])
        rev = np.sort(self.arcs[:, 1] * n + self.arcs[:, 0])
        return bool(np.array_equal(fwd, rev))

    def same_as(self, other: "Graph") -> bool:
        return (
            self.n_nodes == other.n_nodes
            and np.array_equal(self.arcs, other.arcs)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True, eq=False)
class SplitSet:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        for name in ("train_idx", "val_idx", "test_idx"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            if arr.size == 0:
                raise ValueError(f"{name} is empty")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        allidx = np.concatenate([self.train_idx, self.val_idx, self.test_idx])
        if np.unique(allidx).size != allidx.size:
            raise ValueError("splits overlap")

    def validate_against(self, n_nodes: int):
        for name in ("train_idx", "val_idx", "test_idx"):
            arr = getattr(self, name)
            if arr.min() < 0 or arr.max() >= n_nodes:
                raise ValueError(f"{name} has an index outside [0, {n_nodes})")


@dataclass(frozen=True, eq=False)
class NormAdj:
    """Symmetric-normalized A + I in CSR form (row = destination node).

    ``arc_map[k]`` is the arc feeding CSR position ``k`` (-1 for the diagonal);
    ``arc_pos`` is its inverse, one CSR position per arc.
    """

    n_nodes: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    arc_map: np.ndarray
    arc_pos: np.ndarray
    self_loop_positions: np.ndarray


@dataclass(frozen=True)
class SbmConfig:
    n_nodes: int
    n_classes: int
    d: int
    intra_p: float
    inter_p: float
    feature_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("intra_p", "inter_p"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name}={p}: probability out of range")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_nodes < max(self.n_classes, 3):
            raise ValueError("n_nodes must be >= n_classes and >= 3")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be >= 0")


def symmetrize(arcs: np.ndarray, n_nodes: int) -> np.ndarray:
    arcs = np.asarray(arcs, dtype=np.int64).reshape(-1, 2)
    both = np.concatenate([arcs, arcs[:, ::-1]])
    return canonical_arcs(both, n_nodes)


def canonical_arcs(arcs: np.ndarray, n_nodes: int) -> np.ndarray:
    """Deduplicate and sort arcs by (src, dst)."""
    arcs = np.asarray(arcs, dtype=np.int64).reshape(-1, 2)
    keys = np.unique(arcs[:, 0] * n_nodes + arcs[:, 1])
    return np.stack([keys // n_nodes, keys % n_nodes], axis=1)


def normalize_adjacency(g: Graph) -> NormAdj:
    n = g.n_nodes
    m = g.n_arcs
    # CSR entry (row=dst, col=src) so that row i aggregates messages arriving at i.
    rows = np.concatenate([g.arcs[:, 1], np.arange(n, dtype=np.int64)])
    cols = np.concatenate([g.arcs[:, 0], np.arange(n, dtype=np.int64)])
    source = np.concatenate([np.arange(m, dtype=np.int64), np.full(n, -1, dtype=np.int64)])
    order = np.lexsort((cols, rows))
    rows, cols, source = rows[order], cols[order], source[order]

    counts = np.bincount(rows, minlength=n)
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=row_ptr[1:])
    deg = counts.astype(np.float64)
    values = 1.0 / np.sqrt(deg[rows] * deg[cols])

    arc_pos = np.empty(m, dtype=np.int64)
    off = source >= 0
    arc_pos[source[off]] = np.nonzero(off)[0]
    diag = np.nonzero(~off)[0]
    for arr in (row_ptr, cols, values, source, arc_pos, diag):
        arr.flags.writeable = False
    return NormAdj(n, row_ptr, cols, values, source, arc_pos, diag)


def edge_homophily(g: Graph) -> float:
    """Fraction of arcs whose two endpoints carry the same label."""
    if g.n_arcs == 0:
        raise ValueError("edge homophily is undefined on empty edge set")
    same = g.labels[g.arcs[:, 0]] == g.labels[g.arcs[:, 1]]
    return float(same.mean())


def stratified_split(labels: np.ndarray, rng: np.random.Generator,
                     fractions=(0.6, 0.2)) -> SplitSet:
    """60/20/20 split that interleaves classes so every prefix is class-balanced."""
    labels = np.asarray(labels)
    n = labels.size
    ranked = []
    for c in np.unique(labels):
        members = rng.permutation(np.nonzero(labels == c)[0])
        ranked.extend((rank, int(c), int(node)) for rank, node in enumerate(members))
    ranked.sort()
    order = np.array([node for _, _, node in ranked], dtype=np.int64)
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = max(1, int(round(fractions[1] * n)))
    if n_train + n_val >= n:
        raise ValueError(f"{n} nodes are too few for a train/val/test split")
    return SplitSet(
        np.sort(order[:n_train]),
        np.sort(order[n_train:n_train + n_val]),
        np.sort(order[n_train + n_val:]),
    )


def generate_sbm(cfg: SbmConfig) -> tuple[Graph, SplitSet]:
    """Sample a planted-partition graph with class-centroid features.

    Node ``i`` of class ``c`` gets feature ``e_{c mod d} + noise * N(0, I)``.
    Each unordered pair is linked independently with ``intra_p`` (same class)
    or ``inter_p`` (different classes); both arc directions are stored.
    """
    rng = np.random.default_rng(cfg.seed)
    n, C = cfg.n_nodes, cfg.n_classes
    labels = rng.permutation(np.arange(n) % C).astype(np.int64)

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], cfg.intra_p, cfg.inter_p)
    keep = rng.random(iu.size) < prob
    arcs = symmetrize(np.stack([iu[keep], ju[keep]], axis=1), n)
    if arcs.shape[0] == 0:
        warnings.warn("SBM configuration produced a graph with zero arcs", stacklevel=2)

    centroids = np.zeros((n, cfg.d))
    centroids[np.arange(n), labels % cfg.d] = 1.0
    features = centroids + cfg.feature_noise * rng.standard_normal((n, cfg.d))
    splits = stratified_split(labels, rng)
    return Graph(n, arcs, features, labels), splits


# ---------------------------------------------------------------- disk format

def _parse_int(tok: str, fname: str, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise DatasetError(f"{fname}:{lineno}: expected an integer, got {tok!r}") from None


def _read_lines(path: Path):
    if not path.is_file():
        raise DatasetError(f"{path.name}: missing file in {path.parent}")
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield lineno, line.split()


def _read_labels(path: Path) -> np.ndarray:
    labels = []
    for lineno, toks in _read_lines(path):
        if len(toks) != 1:
            raise DatasetError(f"{path.name}:{lineno}: expected one label per line")
        v = _parse_int(toks[0], path.name, lineno)
        if v < 0:
            raise DatasetError(f"{path.name}:{lineno}: negative class id {v}")
        labels.append(v)
    if not labels:
        raise DatasetError(f"{path.name}: no labels")
    return np.array(labels, dtype=np.int64)


def _read_features(path: Path, n: int) -> np.ndarray:
    rows = []
    width = None
    for lineno, toks in _read_lines(path):
        try:
            row = [float(t) for t in toks]
        except ValueError:
            bad = next(t for t in toks if not _is_float(t))
            raise DatasetError(f"{path.name}:{lineno}: non-numeric feature {bad!r}") from None
        if not all(math.isfinite(v) for v in row):
            raise DatasetError(f"{path.name}:{lineno}: non-finite feature")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DatasetError(f"{path.name}:{lineno}: expected {width} columns, got {len(row)}")
        rows.append(row)
    if len(rows) != n:
        raise DatasetError(f"{path.name}: {len(rows)} rows but {n} labels")
    return np.array(rows, dtype=np.float64)


def _is_float(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def _read_arcs(path: Path, n: int) -> np.ndarray:
    arcs = []
    seen = {}
    for lineno, toks in _read_lines(path):
        if len(toks) != 2:
            raise DatasetError(f"{path.name}:{lineno}: expected 'src dst'")
        s = _parse_int(toks[0], path.name, lineno)
        t = _parse_int(toks[1], path.name, lineno)
        for v in (s, t):
            if not 0 <= v < n:
                raise DatasetError(f"{path.name}:{lineno}: node index {v} out of range [0, {n})")
        if s == t:
            raise DatasetError(f"{path.name}:{lineno}: self-loop arc rejected ({s} {t})")
        if (s, t) in seen:
            raise DatasetError(
                f"{path.name}:{lineno}: duplicate arc ({s} {t}), first seen on line {seen[s, t]}")
        seen[s, t] = lineno
        arcs.append((s, t))
    return np.array(arcs, dtype=np.int64).reshape(-1, 2)


def _read_splits(path: Path, n: int) -> tuple[SplitSet, bool]:
    if not path.is_file():
        raise DatasetError(f"{path.name}: missing file in {path.parent}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path.name}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    parts = {}
    for key in ("train", "val", "test"):
        if key not in doc:
            raise DatasetError(f"{path.name}: missing key {key!r}")
        idx = doc[key]
        if not isinstance(idx, list) or not idx or not all(isinstance(i, int) for i in idx):
            raise DatasetError(f"{path.name}: {key!r} must be a nonempty integer array")
        bad = [i for i in idx if not 0 <= i < n]
        if bad:
            raise DatasetError(f"{path.name}: {key!r} index {bad[0]} out of range [0, {n})")
        if len(set(idx)) != len(idx):
            raise DatasetError(f"{path.name}: {key!r} contains repeated indices")
        parts[key] = idx
    for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
        common = set(parts[a]) & set(parts[b])
        if common:
            raise DatasetError(
                f"{path.name}: overlapping splits {a!r} and {b!r} share node {min(common)}")
    undirected = doc.get("undirected", True)
    if not isinstance(undirected, bool):
        raise DatasetError(f"{path.name}: 'undirected' must be a boolean")
    return SplitSet(parts["train"], parts["val"], parts["test"]), undirected


def load_dataset(directory) -> tuple[Graph, SplitSet]:
    """Read and validate a dataset directory.

    Raises:
        DatasetError: on any malformed or missing input, naming file and line.
    """
    d = Path(directory)
    labels = _read_labels(d / LABELS_FILE)
    n = labels.size
    features = _read_features(d / FEATURES_FILE, n)
    arcs = _read_arcs(d / EDGES_FILE, n)
    splits, undirected = _read_splits(d / SPLITS_FILE, n)
    arcs = symmetrize(arcs, n) if undirected else canonical_arcs(arcs, n)
    return Graph(n, arcs, features, labels), splits


def save_dataset(directory, g: Graph, splits: SplitSet) -> Path:
    """Write ``g`` and ``splits`` in the directory format read by load_dataset."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with (d / EDGES_FILE).open("w", encoding="utf-8") as fh:
        for s, t in g.arcs.tolist():
            fh.write(f"{s}\t{t}\n")
    with (d / FEATURES_FILE).open("w", encoding="utf-8") as fh:
        for row in g.features.tolist():
            fh.write("\t".join(repr(v) for v in row) + "\n")
    with (d / LABELS_FILE).open("w", encoding="utf-8") as fh:
        fh.writelines(f"{v}\n" for v in g.labels.tolist())
    doc = {
        "train": splits.train_idx.tolist(),
        "val": splits.val_idx.tolist(),
        "test": splits.test_idx.tolist(),
        "undirected": g.is_symmetric(),
    }
    (d / SPLITS_FILE).write_text(json.dumps(doc) + "\n", encoding="utf-8")
    return d
