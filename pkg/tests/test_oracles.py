import numpy as np
import pytest

from relaxctl.builtins import make, small_random
from relaxctl.dpp import backward_induction, build_transition
from relaxctl.oracles import InstanceTooLarge, enumerate_policies, reachable_nodes, riccati_lq, _dense_kernels


def linear_feedback_value(gains, x0, A, B, sigma, q, r, p, dt):
    """Exact expected reward of u = -g_i x for the Euler LQ chain via second moments."""
    a, b = 1 + A * dt, B * dt
    m2 = x0 * x0
    total = 0.0
    for g in gains:
        total -= (q + r * g * g) * m2 * dt
        m2 = (a - b * g) ** 2 * m2 + sigma ** 2 * dt
    return total - p * m2


class TestRiccati:
    ARGS = dict(A=0.3, B=1.0, sigma=0.5, q=1.0, r=0.5, p=2.0)

    def test_value_matches_moment_recursion(self):
        sol = riccati_lq(dt=0.01, n_steps=100, **self.ARGS)
        ref = linear_feedback_value(sol.gain, 1.3, dt=0.01, **self.ARGS)
        assert sol.value(1.3) == pytest.approx(ref, rel=1e-12)

    def test_gains_are_optimal(self):
        sol = riccati_lq(dt=0.05, n_steps=20, **self.ARGS)
        best = linear_feedback_value(sol.gain, 1.0, dt=0.05, **self.ARGS)
        rng = np.random.default_rng(0)
        for _ in range(20):
            other = sol.gain + 0.05 * rng.standard_normal(len(sol.gain))
            assert linear_feedback_value(other, 1.0, dt=0.05, **self.ARGS) < best

    def test_one_step_closed_form(self):
        # single step: maximize -(q x^2 + r u^2) dt - p (x + u dt)^2
        sol = riccati_lq(0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.5, 1)
        u = np.linspace(-3, 3, 600001)
        best = np.max(-(1 + u ** 2) * 0.5 - (1 + 0.5 * u) ** 2)
        assert sol.value(1.0) == pytest.approx(best, abs=1e-9)

    def test_lattice_close_to_riccati(self):
        p = make("lq", n_steps=50)
        tm = build_transition(p)
        v = backward_induction(p, tm)[0].values[0, p.x0_node]
        vstar = riccati_lq(0.0, 1.0, 0.5, 1.0, 1.0, 1.0, p.grid.dt, 50).value(1.0)
        assert abs(v - vstar) <= 0.02 * abs(vstar)


class TestEnumeration:
    def test_reachable(self):
        p = small_random(seed=0, n_states=5, with_jump=False, x0_node=0)
        P = _dense_kernels(p, build_transition(p))
        reach = reachable_nodes(P, 0, [0, 1])
        assert reach[0] == [0]
        assert all(set(a) <= set(range(5)) for a in reach)

    def test_counts(self):
        p = small_random(seed=1, n_steps=2, n_states=2, n_atoms=2, mode="control-only")
        res = enumerate_policies(p, build_transition(p))
        assert res["n_policies"] == 2 ** res["n_decision_nodes"]

    def test_stop_pattern_count(self):
        p = make("put-stop")
        res = enumerate_policies(p, build_transition(p))
        assert res["n_policies"] == 2 ** res["n_decision_nodes"]

    def test_policy_is_valid(self):
        p = small_random(seed=2)
        res = enumerate_policies(p, build_transition(p))
        assert set(res["policy"].values()) <= {0, 1, "stop"}

    def test_too_large(self):
        p = make("drift-bang")
        with pytest.raises(InstanceTooLarge):
            enumerate_policies(p, build_transition(p))
