"""Masks, the cubic gradual-pruning schedule, magnitude pruning and regrowth.

Three element kinds are sparsified independently:

* ``weight``  - binary masks over every GNN weight entry (``MaskedTensor``)
* ``edge``    - a trainable soft mask with one value per arc (``SoftMask``)
* ``feature`` - a trainable soft mask with one value per input channel

Sparsity targets are cumulative: at an event with rate ``p`` exactly
``ceil(p * N)`` elements of the original universe are inactive afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SCHEMES = ("none", "random", "gradient", "momentum")
SCOPES = ("global", "layerwise")
KINDS = ("weight", "edge", "feature")


@dataclass(eq=False)
class MaskedTensor:
    values: np.ndarray
    mask: np.ndarray
    momentum: np.ndarray
    name: str = "W"
    kind: str = "weight"

    @classmethod
    def dense(cls, values: np.ndarray, name: str = "W") -> "MaskedTensor":
        values = np.array(values)
        return cls(values, np.ones(values.shape, dtype=bool), np.zeros_like(values), name)

    @property
    def effective(self) -> np.ndarray:
        return self.values * self.mask

    @property
    def size(self) -> int:
        return int(self.values.size)

    def check(self):
        assert self.mask.shape == self.values.shape
        assert not np.any(self.values[~self.mask]), f"{self.name}: pruned entry is nonzero"


@dataclass(eq=False)
class SoftMask:
    values: np.ndarray
    active: np.ndarray
    momentum: np.ndarray
    kind: str = "edge"

    @classmethod
    def ones(cls, n: int, kind: str, dtype=np.float64) -> "SoftMask":
        return cls(np.ones(n, dtype=dtype), np.ones(n, dtype=bool), np.zeros(n, dtype=dtype), kind)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def clamp(self):
        self.values[~self.active] = 0.0

    def check(self):
        assert not np.any(self.values[~self.active]), f"{self.kind} mask: pruned entry is nonzero"


@dataclass(frozen=True)
class PruneSchedule:
    p_i: float
    p_f: float
    t0: int
    dt: int
    n: int

    def __post_init__(self):
        if not (0.0 <= self.p_i <= self.p_f < 1.0):
            raise ValueError(f"schedule needs 0 <= p_i <= p_f < 1 (p_i={self.p_i}, p_f={self.p_f})")
        if self.t0 < 0 or self.dt < 1 or self.n < 1:
            raise ValueError("schedule needs t0 >= 0, dt >= 1, n >= 1")

    @property
    def end(self) -> int:
        return self.t0 + self.n * self.dt

    def is_event(self, t: int) -> bool:
        return self.t0 <= t <= self.end and (t - self.t0) % self.dt == 0

    def events(self) -> list[int]:
        return [self.t0 + k * self.dt for k in range(self.n + 1)]


@dataclass(frozen=True)
class RegrowthPolicy:
    scheme: str = "momentum"
    rate: float = 0.2
    momentum_decay: float = 0.9

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown regrowth scheme {self.scheme!r}; choose from {SCHEMES}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"regrowth rate must be in [0, 1), got {self.rate}")
        if not 0.0 < self.momentum_decay < 1.0:
            raise ValueError("momentum_decay must be in (0, 1)")


def schedule_rate(s: PruneSchedule, t: int) -> float:
    """Cumulative sparsity target at event epoch ``t`` (cubic ramp p_i -> p_f)."""
    if not s.is_event(t):
        raise ValueError(f"epoch {t} is not a pruning event of {s}")
    if t == s.t0:
        return s.p_i
    if t == s.end:
        return s.p_f
    frac = 1.0 - (t - s.t0) / (s.n * s.dt)
    return s.p_f + (s.p_i - s.p_f) * frac ** 3


def prune_quota(p: float, n: int) -> int:
    """``ceil(p * n)``, insensitive to float noise such as 0.07 * 100 = 7.000000000000001."""
    return int(math.ceil(round(p * n, 9)))


def magnitude_prune(scores, active, target_sparsity: float, scope: str = "global",
                    layer_boundaries: Optional[Sequence[int]] = None) -> np.ndarray:
    """Deactivate the ``ceil(p*N)`` smallest-magnitude elements.

    Already-inactive elements sort first, so the inactive set only grows when
    the target grows. Ties break by ascending index. ``layer_boundaries``
    (offsets of each segment start, excluding 0) enable per-segment quotas
    under ``scope="layerwise"``.
    """
    scores = np.abs(np.asarray(scores, dtype=np.float64))
    active = np.asarray(active, dtype=bool)
    if scores.shape != active.shape or scores.ndim != 1:
        raise ValueError("scores and active must be 1-D arrays of equal length")
    if not 0.0 <= target_sparsity < 1.0:
        raise ValueError(f"target sparsity must be in [0, 1), got {target_sparsity}")
    if scope not in SCOPES:
        raise ValueError(f"unknown pruning scope {scope!r}")
    N = scores.size
    if scope == "layerwise" and layer_boundaries:
        edges = [0, *layer_boundaries, N]
    else:
        edges = [0, N]
    out = np.ones(N, dtype=bool)
    for lo, hi in zip(edges[:-1], edges[1:]):
        seg = hi - lo
        quota = prune_quota(target_sparsity, seg)
        if quota > seg:
            raise ValueError(f"pruning quota {quota} exceeds {seg} elements")
        order = np.lexsort((np.arange(seg), scores[lo:hi], active[lo:hi]))
        out[lo + order[:quota]] = False
    return out


def regrow(active, keep_scores, add_scores, r: float) -> np.ndarray:
    """Swap the ``k = floor(r * active_count)`` weakest active elements for the
    ``k`` inactive elements with the largest ``add_scores``.

    ``k`` is capped by the number of elements inactive beforehand, and only
    those are candidates for regrowth, so the active count never changes.
    """
    active = np.asarray(active, dtype=bool)
    keep = np.abs(np.asarray(keep_scores, dtype=np.float64))
    add = np.asarray(add_scores, dtype=np.float64)
    if not 0.0 <= r < 1.0:
        raise ValueError(f"regrowth rate must be in [0, 1), got {r}")
    act_idx = np.nonzero(active)[0]
    ina_idx = np.nonzero(~active)[0]
    k = min(int(math.floor(round(r * act_idx.size, 9))), ina_idx.size)
    out = active.copy()
    if k == 0:
        return out
    drop = act_idx[np.lexsort((act_idx, keep[act_idx]))[:k]]
    grow = ina_idx[np.lexsort((ina_idx, -add[ina_idx]))[:k]]
    out[drop] = False
    out[grow] = True
    return out


def update_momentum(momentum: np.ndarray, grad: np.ndarray, beta: float) -> None:
    """In place ``m <- beta * m + (1 - beta) * g`` (no bias correction)."""
    momentum *= beta
    momentum += (1.0 - beta) * grad


def add_score(policy: RegrowthPolicy, grads: np.ndarray, momentum: np.ndarray,
              rng: np.random.Generator) -> np.ndarray:
    if policy.scheme == "gradient":
        return np.abs(grads)
    if policy.scheme == "momentum":
        return np.abs(momentum)
    if policy.scheme == "random":
        return rng.random(np.shape(grads))
    raise ValueError("add_score is undefined for regrowth scheme 'none'")


@dataclass
class EventRecord:
    epoch: int
    rates: dict = field(default_factory=dict)  # kind -> p_t
    inactive: dict = field(default_factory=dict)  # kind -> inactive count after prune+regrow
    totals: dict = field(default_factory=dict)
    pruned_only: dict = field(default_factory=dict)  # kind -> inactive count before regrowth
    regrown: dict = field(default_factory=dict)  # kind -> number swapped


def _prune_and_regrow(values, active, grads, momentum, p_t, policy, scope, boundaries, rng):
    scores = np.where(active, np.abs(values), 0.0)
    pruned = magnitude_prune(scores, active, p_t, scope, boundaries)
    if policy.scheme == "none" or policy.rate == 0.0:
        return pruned, pruned
    adds = add_score(policy, grads, momentum, rng)
    keep = np.where(pruned, np.abs(values), 0.0)
    return pruned, regrow(pruned, keep, adds, policy.rate)


def prune_event(weights: Sequence[MaskedTensor], edge_mask: SoftMask, feature_mask: SoftMask,
                t: int, schedules: dict, policy: RegrowthPolicy, scope: str, grads,
                rng: np.random.Generator) -> EventRecord:
    """One prune-then-regrow step for every kind whose schedule fires at ``t``.

    ``schedules`` maps kind -> PruneSchedule (absent or None disables a kind).
    ``grads`` carries ``dW`` (list aligned with ``weights``), ``dMa`` and ``dMx``.
    Masks and values are updated in place: deactivated weights and soft-mask
    entries become 0, regrown soft-mask entries restart at 1 and regrown
    weights at 0.
    """
    rec = EventRecord(t)

    s = schedules.get("weight")
    if s is not None and s.is_event(t):
        p_t = schedule_rate(s, t)
        vals = np.concatenate([w.values.ravel() for w in weights])
        act = np.concatenate([w.mask.ravel() for w in weights])
        grad = np.concatenate([np.asarray(g).ravel() for g in grads.dW])
        mom = np.concatenate([w.momentum.ravel() for w in weights])
        bounds = list(np.cumsum([w.size for w in weights])[:-1])
        pruned, new = _prune_and_regrow(vals, act, grad, mom, p_t, policy, scope, bounds, rng)
        off = 0
        for w in weights:
            m = new[off:off + w.size].reshape(w.values.shape)
            kept = pruned[off:off + w.size].reshape(w.values.shape)
            # deactivated and freshly regrown entries both start from zero
            w.values[~m | ~kept] = 0.0
            w.mask[...] = m
            off += w.size
        _record(rec, "weight", p_t, pruned, new)

    for kind, mask, g in (("edge", edge_mask, grads.dMa), ("feature", feature_mask, grads.dMx)):
        s = schedules.get(kind)
        if s is None or not s.is_event(t):
            continue
        p_t = schedule_rate(s, t)
        pruned, new = _prune_and_regrow(mask.values, mask.active, np.asarray(g), mask.momentum,
                                        p_t, policy, "global", None, rng)
        grown = new & ~pruned
        mask.active[...] = new
        mask.values[~new] = 0.0
        mask.values[grown] = 1.0
        _record(rec, kind, p_t, pruned, new)
    return rec


def _record(rec: EventRecord, kind, p_t, pruned, new):
    rec.rates[kind] = p_t
    rec.totals[kind] = int(new.size)
    rec.pruned_only[kind] = int((~pruned).sum())
    rec.inactive[kind] = int((~new).sum())
    rec.regrown[kind] = int((new & ~pruned).sum())


def sparsity(active: np.ndarray) -> float:
    active = np.asarray(active)
    return float(1.0 - active.sum() / active.size) if active.size else 0.0


def write_mask_tsv(path, active: np.ndarray, values: np.ndarray) -> Path:
    """Dump one mask as ``index<TAB>active<TAB>value`` lines."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for i, (a, v) in enumerate(zip(np.ravel(active).tolist(), np.ravel(values).tolist())):
            fh.write(f"{i}\t{int(a)}\t{v!r}\n")
    return path


def read_mask_tsv(path) -> tuple[np.ndarray, np.ndarray]:
    idx, act, val = [], [], []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            i, a, v = line.rstrip("\n").split("\t")
            idx.append(int(i))
            act.append(a == "1")
            val.append(float(v))
    if idx != list(range(len(idx))):
        raise ValueError(f"{path}: indices are not 0..n-1 in order")
    return np.array(act, dtype=bool), np.array(val)
