"""Full-batch training loop with gradual co-pruning and regrowth.

Per epoch: forward on the masked graph, backward, Adam on the active weights
and on the trainable soft masks, then (at event epochs) prune each element
kind to its scheduled sparsity and regrow a fraction of it.
"""

from __future__ import annotations

import copy
import dataclasses
import itertools
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import cost_model
from .graph_io import Graph, SplitSet, normalize_adjacency
from .models import GcnModel, SgcModel, accuracy, backward, forward
from .sparsifier import (
    SCOPES,
    EventRecord,
    MaskedTensor,
    PruneSchedule,
    RegrowthPolicy,
    SoftMask,
    prune_event,
    sparsity,
    update_momentum,
)
from .tensor_ops import softmax_xent

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class TrainConfig:
    model_kind: str = "gcn"
    epochs: int = 200
    lr: float = 0.01
    weight_decay: float = 5e-4
    hidden: int = 512
    dropout: float = 0.5
    seed: int = 0
    sgc_hops: int = 2
    # final sparsity per element kind
    target_w: float = 0.0
    target_a: float = 0.0
    target_x: float = 0.0
    # shared schedule: events at t0, t0+dt, ..., t0+n_events*dt
    t0: int = 0
    dt: int = 10
    n_events: int = 10
    # optional per-kind overrides, e.g. {"edge": {"dt": 20, "n_events": 5}}
    schedule_overrides: dict = field(default_factory=dict)
    regrowth: str = "momentum"
    regrowth_rate: float = 0.2
    momentum_decay: float = 0.9
    scope: str = "global"
    init_weight_density: float = 1.0
    precision: str = "double"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def targets(self) -> dict:
        return {"weight": self.target_w, "edge": self.target_a, "feature": self.target_x}

    @property
    def policy(self) -> RegrowthPolicy:
        return RegrowthPolicy(self.regrowth, self.regrowth_rate, self.momentum_decay)

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def schedule_for(self, kind: str, p_i: float = 0.0) -> Optional[PruneSchedule]:
        """The schedule driving ``kind``, or None when that kind is never pruned."""
        p_f = self.targets[kind]
        if p_f == 0.0 and p_i == 0.0:
            return None
        o = self.schedule_overrides.get(kind, {})
        return PruneSchedule(p_i, p_f, o.get("t0", self.t0), o.get("dt", self.dt),
                             o.get("n_events", self.n_events))

    def validate(self):
        if self.model_kind not in ("gcn", "sgc"):
            raise ConfigError(f"model_kind must be 'gcn' or 'sgc', got {self.model_kind!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.hidden < 1:
            raise ConfigError("hidden must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.sgc_hops < 1:
            raise ConfigError("sgc_hops must be >= 1")
        for kind, p in self.targets.items():
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"target sparsity for {kind} must be in [0, 1), got {p}")
        if self.scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}")
        if self.precision not in ("double", "single"):
            raise ConfigError("precision must be 'double' or 'single'")
        if not 0.0 < self.init_weight_density <= 1.0:
            raise ConfigError("init_weight_density must be in (0, 1]")
        bad = set(self.schedule_overrides) - {"weight", "edge", "feature"}
        if bad:
            raise ConfigError(f"schedule_overrides has unknown kinds {sorted(bad)}")
        try:
            self.policy
            for kind in self.targets:
                s = self.schedule_for(kind, self.initial_sparsity_hint(kind))
                if s is not None and s.end >= self.epochs:
                    raise ConfigError(
                        f"schedule exceeds training length: {kind} pruning ends at epoch "
                        f"{s.end} but training runs epochs 0..{self.epochs - 1}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def initial_sparsity_hint(self, kind: str) -> float:
        if kind == "weight" and self.init_weight_density < 1.0:
            return min(1.0 - self.init_weight_density, self.target_w)
        return 0.0


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, beta1, beta2, eps)

    def reset(self, i: int, where: np.ndarray):
        self.m[i][where] = 0.0
        self.v[i][where] = 0.0


def adam_step(state: AdamState, params, grads, lr: float, weight_decay: float, active=None):
    """Bias-corrected Adam, in place, touching only ``active`` positions.

    ``weight_decay`` is added to the gradient (L2). Moments at inactive
    positions are left as they are.
    """
    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if weight_decay:
            g = g + weight_decay * p
        m = b1 * state.m[i] + (1.0 - b1) * g
        v = b2 * state.v[i] + (1.0 - b2) * (g * g)
        new = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if active is None or active[i] is None:
            state.m[i][...] = m
            state.v[i][...] = v
            p[...] = new
        else:
            a = active[i]
            state.m[i][a] = m[a]
            state.v[i][a] = v[a]
            p[a] = new[a]
    return params


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    test_acc: float
    sparsity_w: float
    sparsity_a: float
    sparsity_x: float
    event: bool


@dataclass
class TrainReport:
    records: list
    best_epoch: int
    best_val_acc: float
    test_acc_at_best: float
    inference_cost: cost_model.CostBreakdown
    training_flops: float
    config: dict
    seed: int
    events: list = field(default_factory=list)
    first_eligible_epoch: int = 0
    best_state: Optional[dict] = field(default=None, repr=False)

    @property
    def final_sparsity(self) -> dict:
        r = self.records[-1]
        return {"weight": r.sparsity_w, "edge": r.sparsity_a, "feature": r.sparsity_x}

    @property
    def losses(self) -> list:
        return [r.train_loss for r in self.records]

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
            "test_acc_at_best": self.test_acc_at_best,
            "first_eligible_epoch": self.first_eligible_epoch,
            "final_sparsity": self.final_sparsity,
            "inference_cost": self.inference_cost.to_dict(),
            "inference_macs": self.inference_cost.total_macs,
            "training_flops": self.training_flops,
            "training_flops_assumption": "3 x inference FLOPs per epoch at that epoch's sparsity",
            "seed": self.seed,
            "config": self.config,
            "events": [dataclasses.asdict(e) for e in self.events],
            "records": [dataclasses.asdict(r) for r in self.records],
        }


def select_best(records, first_eligible: int = 0) -> int:
    """Epoch with the highest validation accuracy among epochs >= first_eligible;
    ties go to the earliest epoch."""
    best, best_val = None, -math.inf
    for r in records:
        if r.epoch >= first_eligible and r.val_acc > best_val:
            best, best_val = r.epoch, r.val_acc
    if best is None:
        raise ConfigError(f"no epoch >= {first_eligible} to select from")
    return best


def grid_search(g: Graph, splits: SplitSet, cfg: TrainConfig, grid: dict):
    """Train every combination of ``grid`` (config key -> list of values) and
    keep the one with the best validation accuracy; ties go to the
    combination listed first. Test accuracy plays no part in the choice.

    Returns ``(best_cfg, best_report, results)`` where ``results`` holds
    ``(cfg, report)`` for every combination in grid order.
    """
    if not grid or any(not vals for vals in grid.values()):
        raise ConfigError("grid_search needs a nonempty grid")
    keys = list(grid)
    results = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        c = dataclasses.replace(cfg, **dict(zip(keys, combo)))
        results.append((c, train(g, splits, c)))
    best = max(range(len(results)), key=lambda i: (results[i][1].best_val_acc, -i))
    return results[best][0], results[best][1], results


def sparse_init(weights, density: float, rng: np.random.Generator) -> int:
    """Deactivate a uniformly random ``floor((1 - density) * N)`` of all weight
    entries (zeroing them). Returns the number deactivated."""
    if not 0.0 < density <= 1.0:
        raise ValueError(f"initial density must be in (0, 1], got {density}")
    sizes = [w.size for w in weights]
    total = sum(sizes)
    k = int(math.floor(round((1.0 - density) * total, 9)))
    if k == 0:
        return 0
    flat = np.ones(total, dtype=bool)
    flat[rng.choice(total, size=k, replace=False)] = False
    off = 0
    for w, s in zip(weights, sizes):
        m = flat[off:off + s].reshape(w.values.shape)
        w.mask[...] = m
        w.values[~m] = 0.0
        off += s
    return k


def make_rngs(seed: int) -> dict:
    """Independent streams for init, dropout, regrowth and sparse init."""
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("init", "dropout", "regrow", "sparse_init")
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def build_model(cfg: TrainConfig, g: Graph, rng: np.random.Generator):
    if cfg.model_kind == "sgc":
        return SgcModel.init(g.d, g.n_classes, rng, cfg.sgc_hops, cfg.dropout, cfg.dtype)
    return GcnModel.init(g.d, cfg.hidden, g.n_classes, rng, cfg.dropout, cfg.dtype)


def current_cost(model, g: Graph, edge_mask: SoftMask, feature_mask: SoftMask
                 ) -> cost_model.CostBreakdown:
    feats = feature_mask.active
    dens = []
    for i, w in enumerate(model.weights):
        m = w.mask[feats] if i == 0 else w.mask
        dens.append(float(m.mean()) if m.size else 0.0)
    hidden = model.hidden if isinstance(model, GcnModel) else 0
    return cost_model.inference_cost(model.kind, g.n_nodes, int(edge_mask.active.sum()),
                                     int(feats.sum()), hidden, g.n_classes, dens,
                                     hops=getattr(model, "K", 2))


def _snapshot(model, edge_mask, feature_mask) -> dict:
    return {"model": copy.deepcopy(model), "edge_mask": copy.deepcopy(edge_mask),
            "feature_mask": copy.deepcopy(feature_mask)}


def train(g: Graph, splits: SplitSet, cfg: TrainConfig,
          on_event: Optional[Callable] = None,
          on_epoch: Optional[Callable] = None) -> TrainReport:
    """Run one full CGP training.

    ``on_event(record, model, edge_mask, feature_mask)`` fires after every
    prune/regrow event; ``on_epoch(epoch_record, model, edge_mask,
    feature_mask)`` after every epoch. Both are for instrumentation only.

    Raises:
        ConfigError: invalid configuration or schedule longer than training.
        TrainingDiverged: the training loss became non-finite.
    """
    env_precision = os.environ.get("CGP_PRECISION")
    if env_precision:
        cfg = dataclasses.replace(cfg, precision=env_precision)
    cfg.validate()
    splits.validate_against(g.n_nodes)
    dtype = cfg.dtype
    rngs = make_rngs(cfg.seed)

    model = build_model(cfg, g, rngs["init"])
    if cfg.init_weight_density < 1.0:
        k = sparse_init(model.weights, cfg.init_weight_density, rngs["sparse_init"])
        p_init = k / sum(w.size for w in model.weights)
    else:
        p_init = 0.0
    if p_init > cfg.target_w:
        raise ConfigError(f"initial weight sparsity {p_init:.4f} exceeds target_w {cfg.target_w}")

    schedules = {"weight": cfg.schedule_for("weight", p_init),
                 "edge": cfg.schedule_for("edge"),
                 "feature": cfg.schedule_for("feature")}
    pruning = any(s is not None for s in schedules.values())
    first_eligible = max((s.end for s in schedules.values() if s is not None), default=0)

    na = normalize_adjacency(g)
    edge_mask = SoftMask.ones(g.n_arcs, "edge", dtype)
    feature_mask = SoftMask.ones(g.d, "feature", dtype)
    policy = cfg.policy
    # Soft masks of kinds that are never pruned stay fixed at 1.
    soft = [m for m, kind in ((edge_mask, "edge"), (feature_mask, "feature"))
            if schedules[kind] is not None]

    w_opt = AdamState.like([w.values for w in model.weights],
                           cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    m_opt = AdamState.like([m.values for m in soft], cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    labels = g.labels
    records, events, per_epoch_cost = [], [], []
    best_val, best_epoch, best_state = -math.inf, None, None

    for epoch in range(cfg.epochs):
        per_epoch_cost.append(current_cost(model, g, edge_mask, feature_mask))

        logits, cache = forward(na, g, model, edge_mask, feature_mask, "train", rngs["dropout"])
        loss, glogits = softmax_xent(logits, labels, splits.train_idx)
        if not math.isfinite(loss):
            raise TrainingDiverged(epoch, loss)
        grads = backward(cache, glogits)

        beta = policy.momentum_decay
        for w, gw in zip(model.weights, grads.dW):
            update_momentum(w.momentum, gw, beta)
        if schedules["edge"] is not None:
            update_momentum(edge_mask.momentum, grads.dMa, beta)
        if schedules["feature"] is not None:
            update_momentum(feature_mask.momentum, grads.dMx, beta)

        adam_step(w_opt, [w.values for w in model.weights], grads.dW, cfg.lr, cfg.weight_decay,
                  [w.mask for w in model.weights])
        if soft:
            soft_grads = [grads.dMa if m is edge_mask else grads.dMx for m in soft]
            adam_step(m_opt, [m.values for m in soft], soft_grads, cfg.lr, 0.0,
                      [m.active for m in soft])
            for m in soft:
                m.clamp()
        model.touch()

        is_event = any(s is not None and s.is_event(epoch) for s in schedules.values())
        if is_event:
            before_w = [w.mask.copy() for w in model.weights]
            before_s = [m.active.copy() for m in soft]
            rec = prune_event(model.weights, edge_mask, feature_mask, epoch, schedules, policy,
                              cfg.scope, grads, rngs["regrow"])
            for i, (w, b) in enumerate(zip(model.weights, before_w)):
                w_opt.reset(i, w.mask != b)
            for i, (m, b) in enumerate(zip(soft, before_s)):
                m_opt.reset(i, m.active != b)
            model.touch()
            events.append(rec)
            if on_event is not None:
                on_event(rec, model, edge_mask, feature_mask)

        eval_logits, _ = forward(na, g, model, edge_mask, feature_mask, "eval")
        er = EpochRecord(
            epoch, loss,
            accuracy(eval_logits, labels, splits.train_idx),
            accuracy(eval_logits, labels, splits.val_idx),
            accuracy(eval_logits, labels, splits.test_idx),
            sparsity(np.concatenate([w.mask.ravel() for w in model.weights])),
            sparsity(edge_mask.active), sparsity(feature_mask.active), is_event)
        records.append(er)
        if on_epoch is not None:
            on_epoch(er, model, edge_mask, feature_mask)
        if epoch >= first_eligible and er.val_acc > best_val:
            best_val, best_epoch = er.val_acc, epoch
            best_state = _snapshot(model, edge_mask, feature_mask)
        log.debug("epoch %d loss %.4f val %.4f", epoch, loss, er.val_acc)

    assert best_epoch == select_best(records, first_eligible)
    best_rec = records[best_epoch]
    final_cost = current_cost(best_state["model"], g, best_state["edge_mask"],
                              best_state["feature_mask"])
    return TrainReport(
        records=records,
        best_epoch=best_epoch,
        best_val_acc=best_rec.val_acc,
        test_acc_at_best=best_rec.test_acc,
        inference_cost=final_cost,
        training_flops=cost_model.training_cost(per_epoch_cost),
        config=cfg.to_dict(),
        seed=cfg.seed,
        events=events,
        first_eligible_epoch=first_eligible if pruning else 0,
        best_state=best_state,
    )
