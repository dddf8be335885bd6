"""Analytic MAC / FLOP accounting for dense and co-sparsified GCN/SGC.

Every layer transforms first and aggregates second::

    transform   = n * d_in_active * d_out * weight_density
    aggregation = (active_arcs + n) * d_out        # self-loops included

Only the input layer's ``d_in`` shrinks with feature pruning. Nonlinearities
and softmax are not counted. One MAC is two FLOPs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

FLOPS_PER_MAC = 2
# forward + backward ~ 3x forward
TRAIN_FLOPS_FACTOR = 3


@dataclass(frozen=True)
class CostBreakdown:
    aggregation_macs: tuple
    transform_macs: tuple
    memory_elements: float
    notes: dict = field(default_factory=dict, compare=False)

    @property
    def layer_macs(self) -> tuple:
        return tuple(a + t for a, t in zip(self.aggregation_macs, self.transform_macs))

    @property
    def total_macs(self) -> float:
        return float(sum(self.aggregation_macs) + sum(self.transform_macs))

    @property
    def total_flops(self) -> float:
        return FLOPS_PER_MAC * self.total_macs

    def to_dict(self) -> dict:
        return {
            "aggregation_macs": list(self.aggregation_macs),
            "transform_macs": list(self.transform_macs),
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "memory_elements": self.memory_elements,
        }


def inference_cost(model_kind: str, n: int, active_arcs: int, active_features: int,
                   hidden: int, classes: int, weight_density_per_layer, hops: int = 2
                   ) -> CostBreakdown:
    """MACs of one full-graph forward pass.

    ``weight_density_per_layer`` is the active fraction of each weight matrix
    restricted to its active input rows (one entry for SGC, two for GCN).
    ``hops`` is only used for SGC.
    """
    for name, v in (("n", n), ("active_arcs", active_arcs), ("active_features", active_features),
                    ("hidden", hidden), ("classes", classes)):
        if v < 0:
            raise ValueError(f"{name} must be nonnegative")
    dens = list(weight_density_per_layer)
    edges = active_arcs + n
    if model_kind == "gcn":
        if len(dens) != 2:
            raise ValueError("GCN needs two layer densities")
        dims = [(active_features, hidden), (hidden, classes)]
        agg = tuple(float(edges * d_out) for _, d_out in dims)
        tr = tuple(float(n * d_in * d_out * rho) for (d_in, d_out), rho in zip(dims, dens))
        weights = sum(d_in * d_out * rho for (d_in, d_out), rho in zip(dims, dens))
        acts = n * (hidden + classes)
    elif model_kind == "sgc":
        if len(dens) != 1:
            raise ValueError("SGC needs one layer density")
        agg = (float(hops * edges * classes),)
        tr = (float(n * active_features * classes * dens[0]),)
        weights = active_features * classes * dens[0]
        acts = n * classes * (hops + 1)
    else:
        raise ValueError(f"unknown model kind {model_kind!r}")
    memory = float(n * active_features + edges + weights + acts)
    return CostBreakdown(agg, tr, memory)


def training_cost(cost, epochs: int = 1) -> float:
    """Training FLOPs: ``3 x`` inference FLOPs per epoch.

    ``cost`` is either a single CostBreakdown charged for ``epochs`` epochs or
    a sequence with one breakdown per epoch (sparsity changing over time).
    """
    if isinstance(cost, CostBreakdown):
        if epochs < 1:
            raise ValueError("epochs must be >= 1")
        return TRAIN_FLOPS_FACTOR * cost.total_flops * epochs
    return float(sum(TRAIN_FLOPS_FACTOR * c.total_flops for c in cost))
