import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from relaxctl.builtins import make
from relaxctl.core import ControlSet, Mode
from relaxctl.dpp import backward_induction, build_transition
from relaxctl.relaxed import PiecewiseControl, YoungMeasure, chattering_approx
from relaxctl.simulate import (
    Feedback,
    Kernel,
    SimConfig,
    SimulationError,
    estimate_value,
    path_streams,
    payoffs,
    poisson_inverse,
    simulate,
    simulate_batch,
    simulate_path,
)

from .conftest import make_problem


class TestPaths:
    def test_frozen_without_noise(self):
        path = simulate_path(make_problem(x0=0.5), 0)
        assert np.all(path.states == 0.5)
        assert len(path.states) == len(path.times) and len(path.controls) == len(path.times) - 1

    def test_unit_drift_exact(self):
        path = simulate_path(make_problem(drift=1.0, x0=0.0, lower=-2.0, upper=2.0), 0)
        assert path.states[-1, 0] == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(path.states[:, 0], path.times, rtol=0, atol=1e-15)

    def test_gaussian_mean(self):
        n = 4000
        batch = simulate_batch(make_problem(var=1.0, x0=0.0), 0, paths=range(n))
        assert abs(batch.states[:, -1, 0].mean()) <= 3 * np.sqrt(1.0 / n)
        assert batch.states[:, -1, 0].var() == pytest.approx(1.0, rel=0.1)

    def test_jump_counts(self):
        p = make_problem(jumps=[(2.0, 1.0)], x0=0.0, lower=-50.0, upper=50.0, h=1.0)
        x = simulate_batch(p, 0, paths=range(4000)).states[:, -1, 0]
        # uncompensated unit jumps at rate 2 over unit time
        assert x.mean() == pytest.approx(2.0, abs=3 * np.sqrt(2.0 / 4000))
        assert np.all(x == np.round(x))

    def test_small_jumps_are_compensated(self):
        p = make_problem(jumps=[(2.0, 0.5)], x0=0.0, lower=-50.0, upper=50.0, h=0.5)
        x = simulate_batch(p, 0, paths=range(4000)).states[:, -1, 0]
        assert abs(x.mean()) <= 3 * np.sqrt(2.0 * 0.25 / 4000)

    def test_poisson_inverse(self):
        u = np.array([0.0, np.exp(-1.0) - 1e-12, np.exp(-1.0) + 1e-12, 0.999999])
        assert list(poisson_inverse(u, 1.0)) == [0, 0, 1, 9]

    def test_piecewise_control(self):
        p = make("drift-bang", sigma=0.0)
        nu = PiecewiseControl(p.grid.refine(2), p.controls, [0, 1] * p.grid.n_steps)
        path = simulate_path(p, nu, substeps=2)
        assert path.states[-1, 0] == pytest.approx(0.5, abs=1e-14)
        with pytest.raises(ValueError):
            simulate_path(p, nu, substeps=1)

    def test_feedback_and_kernel(self):
        p = make("drift-bang", sigma=0.0)
        up = simulate_path(p, Feedback(lambda t, x: np.ones(len(x), dtype=int)))
        assert up.states[-1, 0] == pytest.approx(1.5)
        half = simulate_batch(p, Kernel(lambda t, x: np.tile([0.5, 0.5], (len(x), 1))), paths=range(2000))
        frac = (half.controls == 1).mean()
        assert frac == pytest.approx(0.5, abs=3 * np.sqrt(0.25 / half.controls.size))

    def test_stop_rule(self):
        p = make("put-stop")
        path = simulate_path(p, 0, lambda t, x: np.full(len(x), t >= 0.5))
        assert path.stop_index == 2 and not path.terminal
        assert np.all(path.states[2:] == path.states[2])

    def test_nonfinite_state(self):
        p = make_problem(drift=np.inf)
        with pytest.raises(SimulationError) as exc:
            simulate_path(p, 0)
        assert exc.value.step == 0 and exc.value.path == 0

    def test_bad_policy(self):
        with pytest.raises(TypeError):
            simulate_path(make_problem(), "up")
        with pytest.raises(ValueError):
            simulate_path(make_problem(), 3)


class TestEstimates:
    def test_constant_terminal(self):
        est = estimate_value(make_problem(var=0.3, terminal=2.0), 0, config=SimConfig(50))
        assert (est.mean, est.stderr) == (2.0, 0.0)

    def test_unit_running(self):
        est = estimate_value(make_problem(running=1.0, n_steps=8), 0, config=SimConfig(20))
        assert est.mean == pytest.approx(1.0, abs=1e-15) and est.stderr == pytest.approx(0.0, abs=1e-15)
        assert est.as_dict()["n_paths"] == 20

    def test_stopping_reward_collected(self):
        p = make("put-stop")
        est = estimate_value(p, 0, lambda t, x: np.ones(len(x), dtype=bool), SimConfig(10))
        assert est.mean == pytest.approx(0.5)

    def test_lq_optimal_feedback_matches_riccati(self):
        from relaxctl.oracles import riccati_lq
        p = make("lq", n_steps=50, n_atoms=601)
        sol = riccati_lq(0.0, 1.0, 0.5, 1.0, 1.0, 1.0, p.grid.dt, 50)
        atoms = p.controls.atoms[:, 0]

        def fb(t, x):
            i = min(int(round(t / p.grid.dt)), 49)
            return np.abs(atoms[None, :] - sol.control(i, x[:, :1])).argmin(axis=1)

        est = estimate_value(p, Feedback(fb), config=SimConfig(20000, seed=3))
        assert abs(est.mean - sol.value(1.0)) <= 3 * est.stderr + 1e-4

    def test_solved_policy_table(self):
        p = make("drift-bang")
        tm = build_transition(p)
        v, pol = backward_induction(p, tm)
        est = estimate_value(p, pol, config=SimConfig(4000, seed=1))
        assert abs(est.mean - v.values[0, p.x0_node]) <= 4 * est.stderr + 0.02


class TestReproducibility:
    @given(st.integers(0, 2 ** 63), st.integers(1, 40))
    def test_bit_identical(self, seed, n):
        p = make("jump-lq", n_steps=20)
        a = payoffs(p, 5, config=SimConfig(n, seed))
        b = payoffs(p, 5, config=SimConfig(n, seed))
        assert np.array_equal(a, b)

    def test_batching_invariant(self):
        p = make("jump-lq", n_steps=20)
        whole = simulate_batch(p, 5, seed=9, paths=range(10))
        parts = [simulate_batch(p, 5, seed=9, paths=[j]) for j in range(10)]
        assert np.array_equal(whole.states, np.concatenate([q.states for q in parts]))

    def test_streams_differ(self):
        a, _ = path_streams(0, 0)
        b, _ = path_streams(0, 1)
        assert a.random() != b.random()

    def test_generator_chunks(self):
        p = make("drift-bang")
        batches = list(simulate(p, 0, config=SimConfig(10), chunk=4))
        assert [len(b) for b in batches] == [4, 4, 2]
        assert [b.first_path for b in batches] == [0, 4, 8]


def test_chattering_value_converges():
    p = make("drift-bang")
    w = np.tile([0.35, 0.65], (p.grid.n_steps, 1))
    m = YoungMeasure(p.grid, p.controls, w)
    cfg = SimConfig(3000, seed=4, substeps=16)
    ref = payoffs(p, m, config=cfg)
    diffs = [abs(np.mean(payoffs(p, chattering_approx(m, n), config=cfg)) - ref.mean()) for n in (2, 16)]
    assert diffs[1] < diffs[0]
