import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from logits_replay.errors import DimensionError, NumericError, ValidationError
from logits_replay.numerics import Rng
from logits_replay.optim import (
    AdamWConfig,
    MoClipConfig,
    MoFOConfig,
    OptimizerState,
    TAMConfig,
    adamw_apply,
    angle_clip,
    apply_update,
    atan2_step,
    make_config,
    mofo_apply,
    moclip_apply,
    tam_apply,
    vector_angle,
)

DEG45 = math.pi / 4


def _scalar(x):
    return {"w": np.array([x], dtype=float)}


def test_angle_clip_examples():
    g, d = angle_clip([1.0, 0.5], [1.0, 0.0], DEG45)
    np.testing.assert_array_equal(g, [1.0, 0.5])
    assert not d.clipped and d.angle_before == pytest.approx(math.atan(0.5))

    g, d = angle_clip([0.0, 1.0], [1.0, 0.0], DEG45)
    np.testing.assert_allclose(g, [math.sqrt(0.5), math.sqrt(0.5)], atol=1e-15)
    assert np.linalg.norm(g) == pytest.approx(1.0, abs=1e-15)
    assert d.clipped and d.angle_after == pytest.approx(DEG45, abs=1e-12)

    g, d = angle_clip([3.0, -2.0], [0.0, 0.0], DEG45)
    np.testing.assert_array_equal(g, [3.0, -2.0])
    assert d.degenerate == "zero_momentum" and not d.clipped


def test_angle_clip_antiparallel_and_zero_gradient():
    g, d = angle_clip([-2.0, 0.0, 0.0], [1.0, 0.0, 0.0], DEG45)
    np.testing.assert_array_equal(g, [-2.0, 0.0, 0.0])
    assert d.degenerate == "antiparallel" and not d.clipped
    g, d = angle_clip([0.0, 0.0], [1.0, 1.0], DEG45)
    assert d.degenerate == "none" and not d.clipped
    with pytest.raises(DimensionError):
        angle_clip([1.0, 2.0], [1.0, 2.0, 3.0], DEG45)
    with pytest.raises(ValidationError):
        angle_clip([1.0], [1.0], DEG45, mode="bogus")


def test_shrink_mode_keeps_parallel_component():
    g, d = angle_clip([1.0, 3.0], [2.0, 0.0], DEG45, mode="shrink_perpendicular")
    np.testing.assert_allclose(g, [1.0, 1.0], atol=1e-15)
    assert d.clipped and d.angle_after == pytest.approx(DEG45, abs=1e-12)
    # obtuse: nothing to shrink toward, passes through flagged
    g, d = angle_clip([-1.0, 3.0], [2.0, 0.0], DEG45, mode="shrink_perpendicular")
    np.testing.assert_array_equal(g, [-1.0, 3.0])
    assert d.degenerate == "antiparallel"


def test_atan2_step_examples():
    np.testing.assert_array_equal(atan2_step([0.0, 0.0], [0.0, 4.0], 0.1), [0.0, 0.0])
    assert atan2_step([1.0], [0.0], 0.01)[0] == pytest.approx(-0.01 * math.pi / 2, abs=1e-15)
    assert atan2_step([1.0], [1.0], 0.01)[0] == pytest.approx(-0.01 * math.pi / 4, abs=1e-15)
    assert atan2_step([-1.0], [1.0], 0.01)[0] == pytest.approx(0.01 * math.pi / 4, abs=1e-15)
    with pytest.raises(NumericError):
        atan2_step([1.0], [-1e-20], 0.1)
    with pytest.raises(DimensionError):
        atan2_step([1.0, 2.0], [1.0], 0.1)


def test_moclip_examples():
    cfg = MoClipConfig(alpha=0.1, weight_decay=0.0)
    p = {"w": np.array([1.0, -2.0])}
    new, st_, _ = moclip_apply(p, {"w": np.zeros(2)}, OptimizerState.zeros(p), cfg)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert st_.step == 1

    cfg = MoClipConfig(alpha=0.1, beta1=0.0, beta2=0.0, weight_decay=0.0)
    new, st_, info = moclip_apply(_scalar(0.0), _scalar(1.0), OptimizerState.zeros(_scalar(0.0)), cfg)
    assert new["w"][0] == pytest.approx(-0.1 * math.pi / 4, abs=1e-15)
    assert st_.m["w"][0] == 1.0 and st_.v["w"][0] == 1.0
    assert info.max_abs_step == pytest.approx(0.1 * math.pi / 4)


def test_moclip_decoupled_decay():
    cfg = MoClipConfig(alpha=0.1, weight_decay=0.5)
    new, _, _ = moclip_apply(_scalar(2.0), _scalar(0.0), OptimizerState.zeros(_scalar(2.0)), cfg)
    assert new["w"][0] == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)


def test_moclip_rejects_bad_inputs():
    p = {"w": np.zeros(3)}
    st0 = OptimizerState.zeros(p)
    with pytest.raises(NumericError, match="w"):
        moclip_apply(p, {"w": np.array([0.0, np.nan, 0.0])}, st0, MoClipConfig())
    with pytest.raises(DimensionError):
        moclip_apply(p, {"w": np.zeros(4)}, st0, MoClipConfig())
    with pytest.raises(ValidationError):
        MoClipConfig(delta_max=math.pi / 2)
    with pytest.raises(ValidationError):
        MoClipConfig(clip_scope="layer")


def test_adamw_examples():
    cfg = AdamWConfig(alpha=0.1, weight_decay=0.0)
    p = {"w": np.array([1.0, 2.0])}
    new, _, _ = adamw_apply(p, {"w": np.zeros(2)}, OptimizerState.zeros(p), cfg)
    np.testing.assert_array_equal(new["w"], p["w"])

    cfg = AdamWConfig(alpha=0.1, beta1=0.0, beta2=0.0, eps=0.0, weight_decay=0.0)
    new, _, _ = adamw_apply(_scalar(0.0), _scalar(1.0), OptimizerState.zeros(_scalar(0.0)), cfg)
    assert new["w"][0] == pytest.approx(-0.1, abs=1e-15)

    cfg = AdamWConfig(alpha=0.1, weight_decay=0.2)
    new, _, _ = adamw_apply(_scalar(3.0), _scalar(0.0), OptimizerState.zeros(_scalar(3.0)), cfg)
    assert new["w"][0] == pytest.approx(3.0 * (1 - 0.02), abs=1e-15)


def _prev_state(m_prev, g_like):
    st0 = OptimizerState.zeros(g_like)
    st0.m = {k: np.asarray(v, dtype=float) for k, v in m_prev.items()}
    st0.v = {k: np.ones_like(v, dtype=float) for k, v in m_prev.items()}
    st0.step = 3
    return st0


def test_tam_damping():
    p = {"w": np.zeros(2)}
    cfg = TAMConfig(alpha=0.1, weight_decay=0.0)
    adam_cfg = AdamWConfig(alpha=0.1, weight_decay=0.0)
    for angle, factor in ((0.0, 1.0), (math.pi / 3, 0.5), (math.pi / 2, 0.0), (2.5, 0.0)):
        g = {"w": np.array([math.cos(angle), math.sin(angle)])}
        state = _prev_state({"w": [1.0, 0.0]}, p)
        ref, _, _ = adamw_apply(p, g, state, adam_cfg)
        got, _, info = tam_apply(p, g, state, cfg)
        np.testing.assert_allclose(got["w"], factor * ref["w"], rtol=1e-12, atol=1e-15)
        if angle:
            assert info.diagnostics[0].angle_before == pytest.approx(angle, abs=1e-12)


def test_mofo_counts():
    rng = Rng(8)
    p = {"w": np.zeros(10), "b": np.zeros(7)}
    g = {"w": rng.normal(10), "b": rng.normal(7)}
    state = OptimizerState.zeros(p)
    new, _, _ = mofo_apply(p, g, state, MoFOConfig(alpha=0.1, fraction=0.2, weight_decay=0.0))
    assert np.count_nonzero(new["w"]) == 2
    assert np.count_nonzero(new["b"]) == 1
    moved = np.flatnonzero(new["w"])
    assert set(moved) == set(np.argsort(-np.abs(g["w"]))[:2])

    ref, _, _ = adamw_apply(p, g, state, AdamWConfig(alpha=0.1, weight_decay=0.0))
    full, _, _ = mofo_apply(p, g, state, MoFOConfig(alpha=0.1, fraction=1.0, weight_decay=0.0))
    for k in p:
        np.testing.assert_array_equal(full[k], ref[k])
    none, _, _ = mofo_apply({"w": np.ones(5)}, {"w": np.ones(5)}, OptimizerState.zeros({"w": np.ones(5)}),
                            MoFOConfig(alpha=0.1, fraction=0.0, weight_decay=0.5))
    np.testing.assert_allclose(none["w"], np.full(5, 0.95), atol=1e-15)


def test_mofo_ties_by_index():
    p = {"w": np.zeros(10)}
    new, _, _ = mofo_apply(p, {"w": np.ones(10)}, OptimizerState.zeros(p),
                           MoFOConfig(alpha=0.1, fraction=0.2, weight_decay=0.0))
    assert np.flatnonzero(new["w"]).tolist() == [0, 1]


def test_small_argument_regime_matches_adam():
    rng = Rng(12)
    alpha = 1e-2
    for _ in range(200):
        m_hat = rng.normal() * 1e-4
        v_hat = (1 + rng.random()) * 10 ** (2 * rng.random())
        if abs(m_hat) / math.sqrt(v_hat) > 1e-3:
            continue
        a = atan2_step(np.array([m_hat]), np.array([v_hat]), alpha)[0]
        b = -alpha * m_hat / math.sqrt(v_hat)
        assert a == pytest.approx(b, rel=1e-3)


def test_small_argument_regime_full_step():
    # a large second-moment history keeps |m_hat| / sqrt(v_hat) tiny, where
    # arctan(x) ~ x and one MoClip step is one epsilon-free AdamW step
    rng = Rng(4)
    for _ in range(50):
        g = {"w": 1e-3 * rng.normal(6)}
        p = {"w": rng.normal(6)}
        state = OptimizerState.zeros(p)
        state.m = {"w": g["w"].copy()}
        state.v = {"w": np.full(6, 10.0)}
        state.step = 20
        mo = MoClipConfig(alpha=1e-3, delta_max=math.pi / 2 - 1e-9, weight_decay=0.0)
        ad = AdamWConfig(alpha=1e-3, eps=0.0, weight_decay=0.0)
        a, _, _ = moclip_apply(p, g, state, mo)
        b, _, _ = adamw_apply(p, g, state, ad)
        np.testing.assert_allclose(a["w"] - p["w"], b["w"] - p["w"], rtol=1e-3)


def test_global_scope_clips_concatenation():
    p = {"a": np.zeros(1), "b": np.zeros(1)}
    state = _prev_state({"a": [1.0], "b": [0.0]}, p)
    g = {"a": np.array([0.0]), "b": np.array([1.0])}
    cfg = MoClipConfig(alpha=0.1, beta1=0.0, beta2=0.0, weight_decay=0.0, clip_scope="global")
    _, s, info = moclip_apply(p, g, state, cfg)
    assert len(info.diagnostics) == 1 and info.diagnostics[0].clipped
    assert s.m["a"][0] == pytest.approx(math.sqrt(0.5)) and s.m["b"][0] == pytest.approx(math.sqrt(0.5))
    cfg = MoClipConfig(alpha=0.1, beta1=0.0, beta2=0.0, weight_decay=0.0, clip_scope="per_tensor")
    _, s, info = moclip_apply(p, g, state, cfg)
    # per tensor, "b" has zero momentum so it is not clipped at all
    assert [d.degenerate for d in info.diagnostics] == ["none", "zero_momentum"]
    assert s.m["b"][0] == 1.0


def test_moment_source_raw_uses_unclipped_second_moment():
    p = {"w": np.zeros(2)}
    state = _prev_state({"w": [1.0, 0.0]}, p)
    g = {"w": np.array([0.0, 2.0])}
    base = dict(alpha=0.1, beta1=0.0, beta2=0.0, weight_decay=0.0)
    _, s_c, _ = moclip_apply(p, g, state, MoClipConfig(**base))
    _, s_r, _ = moclip_apply(p, g, state, MoClipConfig(**base, moment_source="raw"))
    np.testing.assert_allclose(s_c.v["w"], [2.0, 2.0], atol=1e-14)
    np.testing.assert_allclose(s_r.v["w"], [0.0, 4.0], atol=1e-14)
    np.testing.assert_array_equal(s_c.m["w"], s_r.m["w"])


def test_registry():
    cfg = make_config("moclip", alpha=0.5, delta_max=None)
    assert cfg.alpha == 0.5 and cfg.delta_max == DEG45
    with pytest.raises(ValidationError):
        make_config("sgd")
    with pytest.raises(ValidationError):
        make_config("adamw", delta_max=0.3)
    p = {"w": np.ones(3)}
    out, _, _ = apply_update("adamw", p, {"w": np.ones(3)}, OptimizerState.zeros(p), AdamWConfig())
    assert out["w"].shape == (3,)


def test_apply_does_not_mutate_inputs():
    p = {"w": np.array([1.0, 2.0])}
    g = {"w": np.array([0.5, -0.5])}
    state = _prev_state({"w": [1.0, 1.0]}, p)
    before = (p["w"].copy(), g["w"].copy(), state.m["w"].copy(), state.v["w"].copy(), state.step)
    for name in ("moclip", "adamw", "tam", "mofo"):
        apply_update(name, p, g, state, make_config(name))
    after = (p["w"], g["w"], state.m["w"], state.v["w"], state.step)
    for a, b in zip(before[:4], after[:4]):
        np.testing.assert_array_equal(a, b)
    assert before[4] == after[4]


def test_determinism_bitwise():
    rng = Rng(1)
    p = {"w": rng.normal((4, 5)), "b": rng.normal(5)}
    g = {"w": rng.normal((4, 5)), "b": rng.normal(5)}
    state = _prev_state({"w": rng.normal((4, 5)), "b": rng.normal(5)}, p)
    a, sa, _ = moclip_apply(p, g, state, MoClipConfig())
    b, sb, _ = moclip_apply(p, g, state, MoClipConfig())
    for k in p:
        assert a[k].tobytes() == b[k].tobytes()
        assert sa.m[k].tobytes() == sb.m[k].tobytes()


vec = st.integers(2, 30).flatmap(
    lambda n: st.tuples(
        arrays(np.float64, n, elements=st.floats(-1e3, 1e3)),
        arrays(np.float64, n, elements=st.floats(-1e3, 1e3)),
    )
)


@settings(max_examples=300)
@given(vec, st.floats(0.01, math.pi / 2 - 0.01), st.sampled_from(["rotate_preserve_norm", "shrink_perpendicular"]))
def test_angle_clip_properties(gm, delta, mode):
    g, m = gm
    out, d = angle_clip(g, m, delta, mode)
    if not d.clipped:
        if d.degenerate == "none" and not math.isnan(d.angle_before):
            assert d.angle_before <= delta or mode == "shrink_perpendicular"
        np.testing.assert_array_equal(out, g)
        return
    assert d.angle_after <= delta + 1e-9
    cos = np.dot(out, m) / (np.linalg.norm(out) * np.linalg.norm(m))
    assert cos >= math.cos(delta) - 1e-9
    if mode == "rotate_preserve_norm":
        assert abs(np.linalg.norm(out) - np.linalg.norm(g)) <= 1e-9 * max(1.0, np.linalg.norm(g))


@settings(max_examples=300)
@given(
    st.integers(1, 40).flatmap(
        lambda n: st.tuples(
            arrays(np.float64, n, elements=st.floats(-1e6, 1e6)),
            arrays(np.float64, n, elements=st.floats(0, 1e6)),
        )
    ),
    st.floats(1e-6, 1.0),
)
def test_atan2_step_bounds(mv, alpha):
    m_hat, v_hat = mv
    step = atan2_step(m_hat, v_hat, alpha)
    assert np.max(np.abs(step)) <= alpha * math.pi / 2
    # the l2 bound is tight when every coordinate saturates, so allow rounding
    assert np.linalg.norm(step) <= alpha * math.pi * math.sqrt(m_hat.size) / 2 * (1 + 1e-12)
    assert np.all(step * m_hat <= 0)


def test_vector_angle():
    assert vector_angle([1, 0], [0, 1]) == pytest.approx(math.pi / 2)
    assert math.isnan(vector_angle([0, 0], [1, 0]))
