import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from logits_replay.errors import ContractViolation, ValidationError
from logits_replay.loss import (
    full_ce,
    full_ce_batch,
    gradient_bias,
    param_bias_bound,
    restricted_ce,
    restricted_ce_batch,
)
from logits_replay.numerics import Rng, softmax
from logits_replay.topk import SelectorConfig, select


def test_full_ce_examples():
    r = full_ce([0.0, 0.0], 0)
    assert r.value == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_allclose(r.grad_logits, [-0.5, 0.5], atol=1e-15)
    with mpmath.workdps(40):
        ref = float(mpmath.log(1 + mpmath.exp(-10)))
    assert full_ce([10.0, 0.0], 0).value == pytest.approx(ref, rel=1e-10)
    with pytest.raises(IndexError):
        full_ce([0.0, 1.0], 5)


def test_restricted_ce_examples():
    z = [2.0, 1.0, 0.0, -1.0]
    assert restricted_ce(z, [0, 1], 1).value == pytest.approx(math.log(1 + math.e), abs=1e-12)
    r = restricted_ce([0.0, 0.0, 0.0], [0, 1], 0)
    assert r.value == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_allclose(r.grad_logits, [-0.5, 0.5, 0.0], atol=1e-15)
    assert r.grad_logits[2] == 0.0


def test_restricted_ce_rejects_missing_gold_and_duplicates():
    with pytest.raises(ContractViolation):
        restricted_ce([1.0, 2.0, 3.0], [0, 1], 2)
    with pytest.raises(ValidationError):
        restricted_ce([1.0, 2.0, 3.0], [0, 0, 1], 0)
    with pytest.raises(ContractViolation):
        gradient_bias([1.0, 2.0, 3.0], [0, 1], 2)


def test_restricted_accepts_candidate_set():
    z = np.array([0.3, 2.0, -1.0, 0.5])
    s = select(z, 2, SelectorConfig(tau=0.6))
    assert restricted_ce(z, s, 2).value == restricted_ce(z, list(s.token_ids), 2).value


def test_full_vocabulary_restriction_is_identity():
    rng = Rng(31)
    for _ in range(200):
        v = 2 + rng.integer(60)
        z = rng.normal(v) * 4
        gold = rng.integer(v)
        a, b = full_ce(z, gold), restricted_ce(z, np.arange(v), gold)
        assert abs(a.value - b.value) <= 1e-12
        np.testing.assert_allclose(a.grad_logits, b.grad_logits, rtol=0, atol=1e-12)


def test_gradient_bias_examples():
    rep = gradient_bias([0.5, -1.0, 2.0], [0, 1, 2], 1)
    assert rep.rho == 0.0 and rep.l1_bias == 0.0
    rep = gradient_bias(np.zeros(4), [2, 0], 2)
    assert rep.rho == pytest.approx(0.5, abs=1e-15)
    assert rep.l1_bias == pytest.approx(1.0, abs=1e-12)
    assert rep.tv_distance == pytest.approx(0.5, abs=1e-12)


def _elementwise_delta(z, s, gold):
    # independent oracle: the case split of the two gradient forms, per coordinate
    p = softmax(z)
    s = set(int(i) for i in s)
    rho = sum(p[j] for j in range(len(z)) if j not in s)
    delta = [rho / (1 - rho) * p[j] if j in s else -p[j] for j in range(len(z))]
    return np.array(delta), rho


def test_bias_identities_random_draws():
    rng = Rng(77)
    for _ in range(1000):
        v = 2 + rng.integer(80)
        z = rng.normal(v) * (0.3 + 4 * rng.random())
        gold = rng.integer(v)
        size = 1 + rng.integer(v)
        s = sorted(set(rng.sample(v, size).tolist()) | {gold})
        rep = gradient_bias(z, s, gold)
        delta, rho = _elementwise_delta(z, s, gold)
        assert abs(rep.l1_bias - 2 * rep.rho) <= 1e-10
        assert abs(rep.rho - rho) <= 1e-12
        assert abs(rep.l2_bias - np.linalg.norm(delta)) <= 1e-10
        assert rep.l2_bias <= rep.l1_bias + 1e-15
        assert abs(rep.tv_distance - rep.rho) <= 1e-12


def _central_difference(f, z, h=1e-6):
    g = np.empty_like(z)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        g[i] = (f(zp) - f(zm)) / (2 * h)
    return g


def test_restricted_gradient_matches_finite_differences():
    rng = Rng(5)
    for _ in range(120):
        v = 2 + rng.integer(30)
        z = rng.normal(v) * 2
        gold = rng.integer(v)
        s = sorted(set(rng.sample(v, 1 + rng.integer(v)).tolist()) | {gold})
        analytic = restricted_ce(z, s, gold).grad_logits
        numeric = _central_difference(lambda x: restricted_ce(x, s, gold).value, z)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-12)
        assert err < 1e-6


def test_param_bias_bound():
    assert param_bias_bound(3.0, 0.9) == pytest.approx(0.6, abs=1e-15)
    assert param_bias_bound(0.0, 0.5) == 0.0
    assert param_bias_bound(1.0, 1 - 1e-12) < 1e-11
    with pytest.raises(ValidationError):
        param_bias_bound(-1.0, 0.5)
    with pytest.raises(ValidationError):
        param_bias_bound(1.0, 1.0)


def test_batch_losses_match_scalar_versions():
    rng = Rng(3)
    logits = rng.normal((6, 9)) * 3
    golds = rng.integers(9, 6)
    mask = rng.random((6, 9)) < 0.5
    mask[np.arange(6), golds] = True
    lf, gf = full_ce_batch(logits, golds)
    lr, gr = restricted_ce_batch(logits, mask, golds)
    for i in range(6):
        ref = full_ce(logits[i], golds[i])
        assert lf[i] == pytest.approx(ref.value, abs=1e-12)
        np.testing.assert_allclose(gf[i], ref.grad_logits, atol=1e-14)
        ref = restricted_ce(logits[i], np.flatnonzero(mask[i]), golds[i])
        assert lr[i] == pytest.approx(ref.value, abs=1e-12)
        np.testing.assert_allclose(gr[i], ref.grad_logits, atol=1e-14)
    all_true = np.ones_like(mask)
    lr, gr = restricted_ce_batch(logits, all_true, golds)
    assert np.array_equal(lr, lf) and np.array_equal(gr, gf)
    mask[0, golds[0]] = False
    with pytest.raises(ContractViolation):
        restricted_ce_batch(logits, mask, golds)


finite = st.floats(-25, 25, allow_nan=False, allow_infinity=False)


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(2, 40), elements=finite), st.data())
def test_loss_invariants(z, data):
    v = z.size
    gold = data.draw(st.integers(0, v - 1))
    others = data.draw(st.sets(st.integers(0, v - 1), max_size=v))
    s = sorted(others | {gold})
    for r in (full_ce(z, gold), restricted_ce(z, s, gold)):
        assert r.value >= 0
        assert abs(r.grad_logits.sum()) <= 1e-12
    r = restricted_ce(z, s, gold)
    outside = np.setdiff1d(np.arange(v), s)
    assert np.all(r.grad_logits[outside] == 0.0)
