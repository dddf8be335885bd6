import itertools

import numpy as np
import pytest

from cgp.cost_model import CostBreakdown, inference_cost, training_cost
from cgp.graph_io import Graph, normalize_adjacency
from cgp.models import GcnModel, gcn_forward
from cgp.sparsifier import SoftMask


class Counter:
    def __init__(self):
        self.macs = 0


def counted_gcn(na, X, W0, W1, m0, m1, arc_active, feat_active, counter):
    """Loop-level GCN forward that counts every multiply-accumulate it does.

    Skips inactive weights, arcs and feature channels, i.e. it performs
    exactly the work an ideal sparse kernel would.
    """
    n = X.shape[0]

    def transform(H, W, m, rows):
        out = np.zeros((n, W.shape[1]))
        for i in range(n):
            for a in rows:
                for b in range(W.shape[1]):
                    if m[a, b]:
                        out[i, b] += H[i, a] * W[a, b]
                        counter.macs += 1
        return out

    def aggregate(T):
        out = np.zeros_like(T)
        for i in range(n):
            for k in range(na.row_ptr[i], na.row_ptr[i + 1]):
                arc = na.arc_map[k]
                if arc >= 0 and not arc_active[arc]:
                    continue
                for b in range(T.shape[1]):
                    out[i, b] += na.values[k] * T[na.col_idx[k], b]
                    counter.macs += 1
        return out

    feats = [j for j in range(X.shape[1]) if feat_active[j]]
    h = np.maximum(aggregate(transform(X, W0, m0, feats)), 0.0)
    return aggregate(transform(h, W1, m1, range(W1.shape[0])))


def toy():
    arcs = [(0, 1), (1, 0), (2, 3), (3, 2)]
    rng = np.random.default_rng(0)
    return Graph(4, arcs, rng.normal(size=(4, 3)), [0, 1, 0, 1])


def test_toy_72_macs_matches_counting_oracle():
    g = toy()
    na = normalize_adjacency(g)
    model = GcnModel.init(3, 2, 2, np.random.default_rng(1), 0.0)
    c = Counter()
    z = counted_gcn(na, g.features, model.W0.values, model.W1.values, model.W0.mask,
                    model.W1.mask, np.ones(4, bool), np.ones(3, bool), c)
    ref, _ = gcn_forward(na, g, model, SoftMask.ones(4, "edge"), SoftMask.ones(3, "feature"))
    assert np.allclose(z, ref, atol=1e-12)
    cost = inference_cost("gcn", 4, 4, 3, 2, 2, [1.0, 1.0])
    assert c.macs == 72
    assert cost.total_macs == 72 and cost.total_flops == 144
    assert cost.layer_macs == (40.0, 32.0)


def test_sparse_toy_matches_counting_oracle():
    g = toy()
    na = normalize_adjacency(g)
    rng = np.random.default_rng(2)
    for trial in range(10):
        model = GcnModel.init(3, 2, 2, rng, 0.0)
        for w in model.weights:
            w.mask[...] = rng.random(w.values.shape) < 0.6
        arcs = rng.random(4) < 0.5
        feats = rng.random(3) < 0.7
        c = Counter()
        counted_gcn(na, g.features, model.W0.values, model.W1.values, model.W0.mask,
                    model.W1.mask, arcs, feats, c)
        dens0 = model.W0.mask[feats].mean() if feats.any() else 0.0
        cost = inference_cost("gcn", 4, int(arcs.sum()), int(feats.sum()), 2, 2,
                              [dens0, model.W1.mask.mean()])
        assert cost.total_macs == pytest.approx(c.macs, abs=1e-9)


def test_zero_density_and_edge_scaling():
    cost = inference_cost("gcn", 10, 40, 8, 4, 3, [0.0, 0.0])
    assert cost.transform_macs == (0.0, 0.0)
    full = inference_cost("gcn", 10, 40, 8, 4, 3, [1.0, 1.0])
    half = inference_cost("gcn", 10, 20, 8, 4, 3, [1.0, 1.0])
    assert full.transform_macs == half.transform_macs
    assert [f - h for f, h in zip(full.aggregation_macs, half.aggregation_macs)] == [80.0, 60.0]


def test_dense_shape_properties():
    a = inference_cost("gcn", 10, 40, 8, 4, 3, [1.0, 1.0])
    b = inference_cost("gcn", 20, 40, 8, 4, 3, [1.0, 1.0])
    assert [2 * t for t in a.transform_macs] == list(b.transform_macs)
    c = inference_cost("gcn", 10, 41, 8, 4, 3, [1.0, 1.0])
    assert [y - x for x, y in zip(a.aggregation_macs, c.aggregation_macs)] == [4.0, 3.0]


def test_sgc_cost():
    cost = inference_cost("sgc", 5, 6, 4, 0, 3, [0.5], hops=2)
    assert cost.transform_macs == (5 * 4 * 3 * 0.5,)
    assert cost.aggregation_macs == (2 * 11 * 3,)


def test_monotone_over_grid():
    n, d, h, C, arcs = 50, 20, 16, 4, 300
    grid = [0.0, 0.25, 0.5, 0.9]

    def cost(pw, pa, px):
        return inference_cost("gcn", n, round((1 - pa) * arcs), round((1 - px) * d), h, C,
                              [1 - pw, 1 - pw]).total_macs

    for pw, pa, px in itertools.product(grid, repeat=3):
        base = cost(pw, pa, px)
        for dim in range(3):
            for bigger in grid:
                args = [pw, pa, px]
                if bigger <= args[dim]:
                    continue
                args[dim] = bigger
                assert cost(*args) <= base


def test_training_cost():
    c = inference_cost("gcn", 4, 4, 3, 2, 2, [1.0, 1.0])
    assert training_cost(c) == 3 * 144
    assert training_cost(c, epochs=10) == 4320
    sparse = inference_cost("gcn", 4, 2, 3, 2, 2, [0.5, 0.5])
    assert training_cost([c, sparse, sparse]) == 3 * (c.total_flops + 2 * sparse.total_flops)
    with pytest.raises(ValueError):
        training_cost(c, epochs=0)


def test_bad_arguments():
    with pytest.raises(ValueError):
        inference_cost("gat", 4, 4, 3, 2, 2, [1.0, 1.0])
    with pytest.raises(ValueError):
        inference_cost("gcn", 4, -1, 3, 2, 2, [1.0, 1.0])
    with pytest.raises(ValueError):
        inference_cost("gcn", 4, 4, 3, 2, 2, [1.0])
    assert isinstance(inference_cost("sgc", 1, 0, 1, 0, 1, [1.0]), CostBreakdown)
