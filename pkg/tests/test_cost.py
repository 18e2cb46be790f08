import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from conftest import proc
from tracehunt.cost import (
    INF,
    Baselines,
    CostWeights,
    LogNormalModel,
    ZScore,
    c_dev,
    combine,
    d_sem,
    d_sem_vec,
    hypothesis_text,
    phi_temporal,
)
from tracehunt.generator import Hypothesis
from tracehunt.knowledge import embed
from tracehunt.ontology import Action, NodeClass, ProvenanceNode

NS = 1_000_000_000
MODEL = LogNormalModel(-2.61, 1.43)


def _hyp(dst_attr=None):
    dst = ProvenanceNode(NodeClass.NET, None, dst_attr or {"dst_port": "443", "proto": "TCP"})
    return Hypothesis(proc(1), dst, Action.NET_CONNECT, 0, "g", 0)


def _density(x, mu, sigma):
    return math.exp(-((math.log(x) - mu) ** 2) / (2 * sigma * sigma)) / (x * sigma * math.sqrt(2 * math.pi))


def test_cdf_matches_numeric_integration():
    for x in np.geomspace(1e-4, 50.0, 100):
        val, _ = integrate.quad(_density, 0, x, args=(MODEL.mu, MODEL.sigma), points=[math.exp(MODEL.mu)] if x > math.exp(MODEL.mu) else None, epsabs=1e-12, limit=200)
        assert abs(val - MODEL.cdf(x)) <= 1e-6


def test_phi_examples():
    assert phi_temporal(-1, MODEL) == INF
    assert phi_temporal(0, MODEL) == 0.0
    median_ns = int(round(math.exp(-2.61) * NS))
    assert phi_temporal(median_ns, MODEL) == pytest.approx(-math.log(0.5), abs=1e-6)


def test_phi_far_tail_finite_and_large():
    assert 50 < phi_temporal(10**15, MODEL) < INF
    assert phi_temporal(10**15, MODEL) < phi_temporal(10**18, MODEL) < INF


@given(st.integers(0, 10**13), st.integers(0, 10**13))
def test_phi_monotone(a, b):
    a, b = min(a, b), max(a, b)
    assert phi_temporal(a, MODEL) <= phi_temporal(b, MODEL)


def test_d_sem_bounds():
    h = _hyp()
    assert d_sem(h, embed(hypothesis_text(h))) == pytest.approx(0.0, abs=1e-12)
    e1, e2 = np.zeros(4), np.zeros(4)
    e1[0], e2[1] = 1, 1
    assert d_sem_vec(e1, e2) == pytest.approx(1.0)
    assert d_sem_vec(e1, -e1) == pytest.approx(2.0)


def test_c_dev_arithmetic():
    w = CostWeights(0.6, 0.9)
    base = Baselines(ZScore(0.0, 1.0), ZScore(0.0, 1.0))
    assert combine(1.0, 2.0, w, base) == pytest.approx(2.4)
    centred = Baselines(ZScore(0.3, 0.1), ZScore(0.7, 0.2))
    assert combine(0.3, 0.7, w, centred) == 0.0
    assert c_dev(_hyp(), embed("x"), -5, w, base, MODEL) == INF


def test_zscore_clamp():
    z = ZScore(1.0, 0.5)
    assert z(0.0) == 0.0
    assert z(100.0) == 8.0
    with pytest.raises(ValueError):
        ZScore(0.0, 0.0)


def test_c_dev_field_order_invariant():
    a = _hyp({"dst_port": "443", "proto": "TCP"})
    b = _hyp({"proto": "TCP", "dst_port": "443"})
    v = embed("Net dst_port 443")
    w, base = CostWeights(), Baselines.identity()
    assert c_dev(a, v, NS, w, base, MODEL) == c_dev(b, v, NS, w, base, MODEL)


@given(st.integers(-10**12, 10**12))
def test_c_dev_nonnegative_and_inf_iff_negative(dt):
    c = c_dev(_hyp(), embed("Net dst_port 80"), dt, CostWeights(), Baselines.identity(), MODEL)
    assert c >= 0
    assert (c == INF) == (dt < 0)
