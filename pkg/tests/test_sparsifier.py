import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgp.sparsifier import (
    MaskedTensor,
    PruneSchedule,
    RegrowthPolicy,
    SoftMask,
    add_score,
    magnitude_prune,
    prune_event,
    prune_quota,
    read_mask_tsv,
    regrow,
    schedule_rate,
    sparsity,
    update_momentum,
    write_mask_tsv,
)


# ------------------------------------------------------------------ oracles

def prune_oracle(scores, active, p):
    """Full sort: already-inactive first, then |score|, then index."""
    n = len(scores)
    quota = math.ceil(round(p * n, 9))
    order = sorted(range(n), key=lambda i: (bool(active[i]), abs(scores[i]), i))
    out = [True] * n
    for i in order[:quota]:
        out[i] = False
    return out


def regrow_oracle(active, keep, add, r):
    act = [i for i in range(len(active)) if active[i]]
    ina = [i for i in range(len(active)) if not active[i]]
    k = min(math.floor(round(r * len(act), 9)), len(ina))
    out = list(active)
    for i in sorted(act, key=lambda i: (abs(keep[i]), i))[:k]:
        out[i] = False
    for i in sorted(ina, key=lambda i: (-add[i], i))[:k]:
        out[i] = True
    return out


# ----------------------------------------------------------------- schedule

def test_schedule_examples():
    s = PruneSchedule(0.0, 0.8, 0, 10, 5)
    assert schedule_rate(s, 0) == 0.0
    assert schedule_rate(s, 50) == 0.8
    assert schedule_rate(s, 10) == pytest.approx(0.3904, abs=1e-12)
    assert schedule_rate(s, 20) == pytest.approx(0.6272, abs=1e-12)


def test_schedule_rejects_non_event():
    s = PruneSchedule(0.0, 0.8, 0, 10, 5)
    for t in (5, 60, -10):
        with pytest.raises(ValueError):
            schedule_rate(s, t)


def test_schedule_validation():
    with pytest.raises(ValueError):
        PruneSchedule(0.5, 0.2, 0, 10, 5)
    with pytest.raises(ValueError):
        PruneSchedule(0.0, 0.5, 0, 0, 5)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 0.9), st.floats(0.01, 0.09), st.integers(0, 20), st.integers(1, 30),
       st.integers(2, 15))
def test_schedule_monotone_with_shrinking_steps(p_i, gap, t0, dt, n):
    s = PruneSchedule(p_i, p_i + gap, t0, dt, n)
    rates = [schedule_rate(s, t) for t in s.events()]
    assert rates[0] == p_i and rates[-1] == p_i + gap
    inc = np.diff(rates)
    assert np.all(inc > 0)
    assert np.all(np.diff(inc) < 0)


def test_prune_quota_float_noise():
    assert 0.07 * 100 != 7.0
    assert prune_quota(0.07, 100) == 7
    assert prune_quota(0.25, 10) == 3
    assert prune_quota(0.0, 10) == 0


# --------------------------------------------------------- magnitude_prune

def test_magnitude_prune_example():
    v = np.array([0.5, -0.1, 0.3, -0.9, 0.0, 0.7])
    out = magnitude_prune(v, np.ones(6, bool), 0.5)
    assert out.astype(int).tolist() == [1, 0, 0, 1, 0, 1]


def test_magnitude_prune_target_zero():
    act = np.array([True, False, True])
    assert magnitude_prune([1.0, 0.0, 2.0], act, 0.0).tolist() == [True, True, True]


def test_magnitude_prune_quota_check():
    with pytest.raises(ValueError):
        magnitude_prune([1.0, 2.0], np.ones(2, bool), 1.0)


def test_magnitude_prune_layerwise():
    scores = np.array([0.1, 0.2, 0.3, 0.4, 5.0, 6.0, 7.0, 8.0])
    act = np.ones(8, bool)
    glob = magnitude_prune(scores, act, 0.5, "global")
    assert glob.astype(int).tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    lw = magnitude_prune(scores, act, 0.5, "layerwise", [4])
    assert lw.astype(int).tolist() == [0, 0, 1, 1, 0, 0, 1, 1]


@settings(max_examples=1000, deadline=None)
@given(st.data())
def test_magnitude_prune_matches_oracle(data):
    n = data.draw(st.integers(1, 64))
    # a small value pool forces plenty of ties
    scores = data.draw(st.lists(st.sampled_from([0.0, 0.5, -0.5, 1.0, 2.0, -3.0]),
                                min_size=n, max_size=n))
    active = data.draw(st.lists(st.booleans(), min_size=n, max_size=n))
    scores = [s if a else 0.0 for s, a in zip(scores, active)]
    p = data.draw(st.floats(0, 0.99))
    out = magnitude_prune(np.array(scores), np.array(active), p)
    assert out.tolist() == prune_oracle(scores, active, p)


def test_magnitude_prune_idempotent():
    rng = np.random.default_rng(0)
    s = rng.normal(size=40)
    a = magnitude_prune(s, np.ones(40, bool), 0.4)
    s2 = np.where(a, s, 0.0)
    assert np.array_equal(magnitude_prune(s2, a, 0.4), a)


def test_magnitude_prune_cumulative_only_grows():
    rng = np.random.default_rng(1)
    s = rng.normal(size=30)
    a = np.ones(30, bool)
    for p in (0.1, 0.3, 0.5, 0.7):
        new = magnitude_prune(np.where(a, s, 0.0), a, p)
        assert not np.any(new & ~a)
        assert (~new).sum() == math.ceil(p * 30 - 1e-9)
        a = new


# ------------------------------------------------------------------ regrow

def test_regrow_example():
    active = np.array([True, True, True, True, False, False])
    keep = np.array([0.9, 0.05, 0.4, 0.01, 0.0, 0.0])
    add = np.array([0.0, 0.0, 0.0, 0.0, 0.3, 0.7])
    out = regrow(active, keep, add, 0.5)
    assert out.astype(int).tolist() == [1, 0, 1, 0, 1, 1]
    assert out.sum() == 4


def test_regrow_r_zero_and_no_candidates():
    act = np.array([True, False, True])
    assert np.array_equal(regrow(act, [1, 0, 2], [0, 5, 0], 0.0), act)
    full = np.ones(4, bool)
    assert np.array_equal(regrow(full, [1, 2, 3, 4], [0, 0, 0, 0], 0.5), full)


@settings(max_examples=1000, deadline=None)
@given(st.data())
def test_regrow_matches_oracle(data):
    n = data.draw(st.integers(1, 64))
    pool = st.sampled_from([0.0, 0.1, 0.1, 0.5, 1.0, 2.0])
    active = data.draw(st.lists(st.booleans(), min_size=n, max_size=n))
    keep = data.draw(st.lists(pool, min_size=n, max_size=n))
    add = data.draw(st.lists(pool, min_size=n, max_size=n))
    r = data.draw(st.sampled_from([0.0, 0.1, 0.2, 0.3, 0.5, 0.9]))
    out = regrow(np.array(active), np.array(keep), np.array(add), r)
    assert out.tolist() == regrow_oracle(active, keep, add, r)
    assert out.sum() == sum(active)


# ------------------------------------------------------ scores and momentum

def test_momentum_two_updates():
    m = np.zeros(1)
    update_momentum(m, np.ones(1), 0.9)
    update_momentum(m, np.ones(1), 0.9)
    assert m[0] == pytest.approx(0.19, abs=1e-15)


def test_add_score_schemes():
    g = np.array([-3.0, 1.0])
    assert add_score(RegrowthPolicy("gradient"), g, None, None).tolist() == [3.0, 1.0]
    assert add_score(RegrowthPolicy("momentum"), g, np.array([-0.2, 0.1]), None).tolist() == [0.2, 0.1]
    a = add_score(RegrowthPolicy("random"), g, None, np.random.default_rng(3))
    b = add_score(RegrowthPolicy("random"), g, None, np.random.default_rng(3))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        add_score(RegrowthPolicy("none"), g, None, None)


def test_policy_validation():
    with pytest.raises(ValueError, match="unknown regrowth scheme"):
        RegrowthPolicy("magic")
    with pytest.raises(ValueError):
        RegrowthPolicy("random", 1.0)


# -------------------------------------------------------------- prune_event

def toy_state():
    w = MaskedTensor.dense(np.array([[0.5, -0.1], [0.3, -0.9]]), "W")
    em = SoftMask(np.array([0.9, 0.2, 0.6, 0.4]), np.ones(4, bool), np.zeros(4), "edge")
    fm = SoftMask(np.array([0.7, 0.1, 0.5]), np.ones(3, bool), np.zeros(3), "feature")
    return w, em, fm


def test_prune_event_noop():
    w, em, fm = toy_state()
    before = (w.values.copy(), em.values.copy(), fm.values.copy())
    grads = SimpleNamespace(dW=[np.ones((2, 2))], dMa=np.ones(4), dMx=np.ones(3))
    prune_event([w], em, fm, 0, {}, RegrowthPolicy("none", 0.0), "global", grads, None)
    assert np.array_equal(w.values, before[0]) and np.array_equal(em.values, before[1])
    assert np.array_equal(fm.values, before[2]) and w.mask.all() and em.active.all()


def test_prune_event_scripted_trace():
    """Two events worked out by hand.

    p(1) = 0.5 - 0.5 * (1/2)^3 = 0.4375, so the quotas are ceil(1.75) = 2 of
    4 and ceil(1.3125) = 2 of 3; p(2) = 0.5. Gradient regrowth with r = 0.5.
    """
    w, em, fm = toy_state()
    s = PruneSchedule(0.0, 0.5, 0, 1, 2)
    sched = {"weight": s, "edge": s, "feature": s}
    pol = RegrowthPolicy("gradient", 0.5)

    g0 = SimpleNamespace(dW=[np.zeros((2, 2))], dMa=np.zeros(4), dMx=np.zeros(3))
    rec = prune_event([w], em, fm, 0, sched, pol, "global", g0, None)
    assert rec.rates == {"weight": 0.0, "edge": 0.0, "feature": 0.0}
    assert w.mask.all() and em.active.all() and fm.active.all()

    # t=1. W: prune |-0.1|,|0.3| -> [1,0,0,1]; k=1: drop 0.5, grow idx 2 (|g|=0.8)
    g1 = SimpleNamespace(dW=[np.array([[0.0, 0.2], [0.8, 0.1]])],
                         dMa=np.array([0.0, -0.5, 0.0, 0.3]), dMx=np.array([9.0, 9.0, 9.0]))
    rec = prune_event([w], em, fm, 1, sched, pol, "global", g1, None)
    assert rec.rates["weight"] == 0.4375
    assert w.mask.astype(int).ravel().tolist() == [0, 0, 1, 1]
    assert w.values.ravel().tolist() == [0.0, 0.0, 0.0, -0.9]
    # A: prune 0.2, 0.4 -> [1,0,1,0]; drop 0.6, grow idx 1 (|g|=0.5) at 1.0
    assert em.active.astype(int).tolist() == [1, 1, 0, 0]
    assert em.values.tolist() == [0.9, 1.0, 0.0, 0.0]
    # X: prune 0.1, 0.5 -> [1,0,0]; k = floor(0.5 * 1) = 0
    assert fm.active.astype(int).tolist() == [1, 0, 0]
    assert fm.values.tolist() == [0.7, 0.0, 0.0]
    assert rec.pruned_only == {"weight": 2, "edge": 2, "feature": 2}
    assert rec.regrown == {"weight": 1, "edge": 1, "feature": 0}

    # t=2: quotas already met; W drops the regrown 0.0, grows idx 0 (|g|=0.3)
    g2 = SimpleNamespace(dW=[np.array([[0.3, 0.1], [0.0, 0.0]])],
                         dMa=np.array([0.0, 0.0, 0.05, 0.5]), dMx=np.zeros(3))
    rec = prune_event([w], em, fm, 2, sched, pol, "global", g2, None)
    assert rec.rates["edge"] == 0.5
    assert w.mask.astype(int).ravel().tolist() == [1, 0, 0, 1]
    assert w.values.ravel().tolist() == [0.0, 0.0, 0.0, -0.9]
    # A: drop 0.9 (weaker than the regrown 1.0), grow idx 3
    assert em.active.astype(int).tolist() == [0, 1, 0, 1]
    assert em.values.tolist() == [0.0, 1.0, 0.0, 1.0]
    assert fm.active.astype(int).tolist() == [1, 0, 0]
    assert rec.inactive == {"weight": 2, "edge": 2, "feature": 2}
    w.check()
    em.check()
    fm.check()


def test_prune_event_final_sparsity_exact():
    rng = np.random.default_rng(4)
    ws = [MaskedTensor.dense(rng.normal(size=(7, 5)), "W0"),
          MaskedTensor.dense(rng.normal(size=(5, 3)), "W1")]
    em = SoftMask(rng.random(23), np.ones(23, bool), np.zeros(23), "edge")
    fm = SoftMask(rng.random(7), np.ones(7, bool), np.zeros(7), "feature")
    sched = {"weight": PruneSchedule(0, 0.9, 0, 2, 3), "edge": PruneSchedule(0, 0.5, 0, 2, 3),
             "feature": PruneSchedule(0, 0.3, 0, 2, 3)}
    pol = RegrowthPolicy("random", 0.3)
    for t in sched["weight"].events():
        grads = SimpleNamespace(dW=[rng.normal(size=w.values.shape) for w in ws],
                                dMa=rng.normal(size=23), dMx=rng.normal(size=7))
        rec = prune_event(ws, em, fm, t, sched, pol, "global", grads, rng)
        for kind, total in (("weight", 50), ("edge", 23), ("feature", 7)):
            assert rec.inactive[kind] == math.ceil(round(rec.rates[kind] * total, 9))
            assert rec.pruned_only[kind] == rec.inactive[kind]
    assert sum((~w.mask).sum() for w in ws) == 45
    assert (~em.active).sum() == 12 and (~fm.active).sum() == 3


def test_mask_tsv_round_trip(tmp_path):
    act = np.array([True, False, True])
    vals = np.array([0.1, 0.0, 1 / 3])
    p = write_mask_tsv(tmp_path / "m.tsv", act, vals)
    assert p.read_text().splitlines()[0] == "0\t1\t0.1"
    a2, v2 = read_mask_tsv(p)
    assert np.array_equal(a2, act) and v2.tobytes() == vals.tobytes()


def test_sparsity():
    assert sparsity(np.array([True, False, False, True])) == 0.5
    assert sparsity(np.zeros(0, bool)) == 0.0
