"""Randomised checks of the exact identities and bounds the method relies on.

Each check draws instances from a seeded :class:`~logits_replay.numerics.Rng`
and records the worst deviation. A failing check keeps the full inputs of its
first failing instance so the case can be replayed by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .harness import jacobian
from .loss import full_ce, gradient_bias, param_bias_bound, restricted_ce
from .model import TinyLMConfig, forward_logits, init_params
from .numerics import Rng, softmax
from .optim import angle_clip, atan2_step
from .topk import SelectorConfig, outside_mass, select

__all__ = ["CheckResult", "TheoryReport", "verify_theory"]


@dataclass
class CheckResult:
    name: str
    instances: int = 0
    worst: float = 0.0
    tolerance: float = 0.0
    failure: dict | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None

    def record(self, deviation: float, inputs) -> None:
        self.instances += 1
        self.worst = max(self.worst, deviation)
        if deviation > self.tolerance and self.failure is None:
            self.failure = {"deviation": deviation, "inputs": inputs() if callable(inputs) else inputs}


@dataclass
class TheoryReport:
    seed: int
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ok": self.ok,
            "checks": [
                {"name": c.name, "passed": c.passed, "instances": c.instances, "worst": c.worst,
                 "tolerance": c.tolerance, "failure": c.failure}
                for c in self.checks
            ],
        }

    def to_text(self) -> str:
        lines = [f"theory checks (seed {self.seed})"]
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            lines.append(f"  {status}  {c.name:<28} n={c.instances:<6d} worst={c.worst:.3e} tol={c.tolerance:.0e}")
            if c.failure:
                lines.append(f"        first failure: {c.failure}")
        lines.append("all checks passed" if self.ok else "SOME CHECKS FAILED")
        return "\n".join(lines)


def _logits(rng: Rng, v: int) -> np.ndarray:
    return rng.normal(v) * (0.2 + 5.0 * rng.random())


def _bias_checks(rng: Rng, n: int, report: TheoryReport) -> None:
    l1 = CheckResult("bias_l1_equals_2rho", tolerance=1e-10)
    l2 = CheckResult("bias_l2_closed_form", tolerance=1e-10)
    tv = CheckResult("tv_equals_rho", tolerance=1e-12)
    tau_bound = CheckResult("outside_mass_below_1_minus_tau", tolerance=0.0)
    for _ in range(n):
        v = 4 + rng.integer(509)
        z = _logits(rng, v)
        tau = 0.5 + 0.499 * rng.random()
        k_max = 1 + rng.integer(v + 10)
        gold = rng.integer(v)
        cs = select(z, gold, SelectorConfig(tau=tau, k_max=k_max))
        rep = gradient_bias(z, cs, gold, check=False)
        args = lambda: {"z": z.tolist(), "gold": gold, "tau": tau, "k_max": k_max}  # noqa: E731
        l1.record(abs(rep.l1_bias - 2 * rep.rho), args)
        l2.record(abs(rep.l2_bias - rep.l2_closed_form), args)
        tv.record(abs(rep.tv_distance - rep.rho), args)
        p = softmax(z)
        ranked = np.sort(p)[::-1]
        k_star = int(np.searchsorted(np.cumsum(ranked), tau)) + 1
        if k_star <= k_max:
            tau_bound.record(max(0.0, outside_mass(p, cs) - (1.0 - tau)), args)
    report.checks += [l1, l2, tv, tau_bound]


def _coverage_check(rng: Rng, n: int, report: TheoryReport) -> None:
    check = CheckResult("full_set_equals_full_ce", tolerance=1e-12)
    for _ in range(n):
        v = 2 + rng.integer(200)
        z = _logits(rng, v)
        gold = rng.integer(v)
        a, b = full_ce(z, gold), restricted_ce(z, np.arange(v), gold)
        dev = max(abs(a.value - b.value), float(np.max(np.abs(a.grad_logits - b.grad_logits))))
        check.record(dev, lambda: {"z": z.tolist(), "gold": gold})
    report.checks.append(check)


def _angle_checks(rng: Rng, n: int, report: TheoryReport) -> None:
    cap = CheckResult("angle_cap_cosine_bound", tolerance=1e-9)
    norm = CheckResult("rotation_preserves_norm", tolerance=1e-9)
    for i in range(n):
        d = (2, 10, 1000)[i % 3]
        m = rng.normal(d) * (10 ** (4 * rng.random() - 2))
        g = rng.normal(d) * (10 ** (4 * rng.random() - 2))
        delta = 0.01 + (math.pi / 2 - 0.02) * rng.random()
        out, diag = angle_clip(g, m, delta)
        if not diag.clipped:
            continue
        args = lambda: {"g": g.tolist(), "m": m.tolist(), "delta_max": delta}  # noqa: E731
        cos = float(np.dot(out, m) / (np.linalg.norm(out) * np.linalg.norm(m)))
        cap.record(max(0.0, diag.angle_after - delta, math.cos(delta) - cos), args)
        norm.record(abs(np.linalg.norm(out) - np.linalg.norm(g)) / np.linalg.norm(g), args)
    report.checks += [cap, norm]


def _step_checks(rng: Rng, n: int, report: TheoryReport) -> None:
    inf = CheckResult("step_inf_norm_bound", tolerance=0.0)
    l2 = CheckResult("step_l2_norm_bound", tolerance=1e-12)
    sat = CheckResult("step_saturates_at_zero_v", tolerance=1e-12)
    for _ in range(n):
        d = 1 + rng.integer(50)
        m_hat = rng.normal(d) * 10 ** (6 * rng.random() - 3)
        v_hat = np.abs(rng.normal(d)) * 10 ** (6 * rng.random() - 3)
        v_hat[rng.random(d) < 0.1] = 0.0
        alpha = 10 ** (-4 * rng.random())
        step = atan2_step(m_hat, v_hat, alpha)
        args = lambda: {"m_hat": m_hat.tolist(), "v_hat": v_hat.tolist(), "alpha": alpha}  # noqa: E731
        inf.record(max(0.0, float(np.max(np.abs(step))) - alpha * math.pi / 2), args)
        bound = alpha * math.pi * math.sqrt(d) / 2
        l2.record(max(0.0, float(np.linalg.norm(step)) - bound) / bound, args)
    for alpha in (1e-3, 0.1, 1.0):
        step = atan2_step(np.array([1.0, -3.0]), np.zeros(2), alpha)
        sat.record(float(np.max(np.abs(np.abs(step) - alpha * math.pi / 2))), {"alpha": alpha})
    report.checks += [inf, l2, sat]


def _param_bias_check(rng: Rng, n: int, report: TheoryReport) -> None:
    check = CheckResult("param_bias_within_tau_bound", tolerance=1e-12)
    cfg = TinyLMConfig(vocab_size=16, context_len=2, embed_dim=4, hidden_dim=8)
    for _ in range(n):
        init_seed = rng.integer(1 << 31)
        sharpen = 1.0 + 8.0 * rng.random()
        params = init_params(cfg, init_seed)
        # sharpen the output layer so candidate sets are smaller than the vocabulary
        params.w_out *= sharpen
        ctx = rng.integers(cfg.vocab_size, cfg.context_len)
        jac = jacobian(params, ctx)
        z = forward_logits(params, ctx)
        tau = 0.5 + 0.49 * rng.random()
        gold = rng.integer(cfg.vocab_size)
        cs = select(z, gold, SelectorConfig(tau=tau, k_max=cfg.vocab_size))
        dz = restricted_ce(z, cs, gold).grad_logits - full_ce(z, gold).grad_logits
        bias = float(np.linalg.norm(dz @ jac))
        bound = param_bias_bound(float(np.linalg.norm(jac, 2)), tau)
        inputs = {"init_seed": init_seed, "w_out_scale": sharpen, "context": ctx.tolist(), "tau": tau, "gold": gold}
        check.record(max(0.0, bias - bound), inputs)
    report.checks.append(check)


def verify_theory(seed: int = 0, n_trials: int = 10_000) -> TheoryReport:
    """Run every check with ``n_trials`` random instances (fewer for the costly ones)."""
    rng = Rng(seed)
    report = TheoryReport(seed)
    _bias_checks(rng.spawn(1), n_trials, report)
    _coverage_check(rng.spawn(2), max(1, n_trials // 10), report)
    _angle_checks(rng.spawn(3), n_trials, report)
    _step_checks(rng.spawn(4), n_trials, report)
    _param_bias_check(rng.spawn(5), max(1, n_trials // 100), report)
    return report
