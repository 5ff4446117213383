"""Euler simulation of controlled jump-diffusions under ordinary, feedback and relaxed controls.

Every path owns a Philox stream keyed by (seed, path index), so a path's
draws do not depend on how paths are batched.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import Problem
from .dpp import PolicyTable
from .relaxed import PiecewiseControl, YoungMeasure

log = logging.getLogger(__name__)

CHUNK = 4096
PSD_WARN = 1e-10


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int, path: Optional[int] = None):
        super().__init__(message)
        self.step = step
        self.path = path


@dataclass(frozen=True)
class Feedback:
    """Markov feedback control ``fn(t, x[N, d]) -> atom indices [N]``."""

    fn: Callable


@dataclass(frozen=True)
class Kernel:
    """Relaxed feedback ``fn(t, x[N, d]) -> atom probabilities [N, K]``; an atom is drawn each step."""

    fn: Callable


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 1000
    seed: int = 0
    substeps: int = 1

    def __post_init__(self):
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise ValueError(f"n_paths must be a positive integer, got {self.n_paths}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError(f"substeps must be a positive integer, got {self.substeps}")


@dataclass
class PathSample:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    stop_index: Optional[int] = None
    terminal: bool = True


@dataclass
class PathBatch:
    times: np.ndarray
    states: Optional[np.ndarray]
    controls: Optional[np.ndarray]
    stop_index: np.ndarray
    payoff: np.ndarray
    first_path: int = 0

    def sample(self, j: int) -> PathSample:
        s = int(self.stop_index[j])
        return PathSample(self.times, self.states[j], self.controls[j], None if s < 0 else s, s < 0)

    def __len__(self):
        return len(self.payoff)


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n_paths: int
    seed: int

    def __iter__(self):
        yield self.mean
        yield self.stderr

    def as_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n_paths": self.n_paths, "seed": self.seed}


def path_streams(seed: int, path: int):
    """Independent (noise, control) generators for one path."""
    ss = np.random.SeedSequence(int(seed) & (2 ** 64 - 1), spawn_key=(int(path),))
    noise, control = ss.spawn(2)
    return np.random.Generator(np.random.Philox(noise)), np.random.Generator(np.random.Philox(control))


def poisson_inverse(u: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Poisson(mu) counts by inverse CDF of uniforms ``u``."""
    u = np.asarray(u, dtype=float)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), u.shape)
    k = np.zeros(u.shape, dtype=np.int64)
    p = np.exp(-mu)
    cdf = p.copy()
    todo = u > cdf
    n = 0
    while np.any(todo):
        n += 1
        p = np.where(todo, p * mu / n, p)
        cdf = np.where(todo, cdf + p, cdf)
        k = np.where(todo, n, k)
        todo = todo & (u > cdf) & (p > 0)
    return k


def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    d = a.shape[-1]
    if d == 1:
        if np.any(a < -PSD_WARN):
            log.warning("diffusion coefficient negative by %.3g; clamped to 0", -a.min())
        return np.sqrt(np.maximum(a, 0.0))
    w, V = np.linalg.eigh(0.5 * (a + np.swapaxes(a, 1, 2)))
    if np.any(w < -PSD_WARN):
        log.warning("diffusion matrix has eigenvalue %.3g; clamped to 0", w.min())
    w = np.maximum(w, 0.0)
    return np.einsum("nij,nj,nkj->nik", V, np.sqrt(w), V)


def _sample(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = np.inf
    return np.argmax(u[:, None] < cdf, axis=1)


def _controller(policy, problem: Problem, substeps: int):
    """Map a policy to ``f(j, t, x, uniforms) -> atom indices`` on the fine grid."""
    grid = problem.grid
    K = problem.controls.K
    if isinstance(policy, (int, np.integer)):
        k = int(policy)
        if not 0 <= k < K:
            raise ValueError(f"atom {k} outside control set")
        return lambda j, t, x, u: np.full(len(x), k, dtype=np.int64)
    if isinstance(policy, PiecewiseControl):
        r = policy.refinement_of(grid)
        if substeps % r:
            raise ValueError(f"simulation substeps {substeps} do not resolve the control's {r} subcells")
        per = substeps // r
        return lambda j, t, x, u: np.full(len(x), policy.atoms[j // per], dtype=np.int64)
    if isinstance(policy, YoungMeasure):
        if policy.grid != grid:
            raise ValueError("Young measure grid differs from the problem grid")
        return lambda j, t, x, u: _sample(np.broadcast_to(policy.weights[j // substeps], (len(x), K)), u)
    if isinstance(policy, PolicyTable):
        lat = problem.lattice
        return lambda j, t, x, u: policy.atoms[j // substeps, lat.nearest(x)]
    if isinstance(policy, Feedback):
        return lambda j, t, x, u: np.asarray(policy.fn(t, x), dtype=np.int64)
    if isinstance(policy, Kernel):
        return lambda j, t, x, u: _sample(np.asarray(policy.fn(t, x), dtype=float), u)
    if hasattr(policy, "kernels"):  # per-node relaxed rule
        lat = problem.lattice
        ker = policy.kernels
        return lambda j, t, x, u: _sample(ker[j // substeps, lat.nearest(x)], u)
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


def _stopper(stop_rule, problem: Problem, substeps: int):
    if stop_rule is None:
        return None
    if isinstance(stop_rule, PolicyTable):
        if stop_rule.stop is None:
            return None
        lat = problem.lattice
        table = stop_rule.stop

        def fn(j, t, x):
            if j % substeps:
                return np.zeros(len(x), dtype=bool)
            return table[j // substeps, lat.nearest(x)]

        return fn
    return lambda j, t, x: np.asarray(stop_rule(t, x), dtype=bool)


def simulate_batch(problem: Problem, policy, stop_rule=None, seed: int = 0, paths=range(1),
                   substeps: int = 1, record: bool = True) -> PathBatch:
    """Simulate the paths with the given indices; path p uses stream (seed, p)."""
    paths = np.asarray(list(paths), dtype=np.int64)
    B = len(paths)
    grid = problem.grid.refine(substeps)
    n, dt = grid.n_steps, grid.dt
    times = grid.times
    d = problem.dim
    coeffs = problem.model_coeffs()
    zs = coeffs.jump_offsets()
    J = len(zs)
    atoms = problem.controls.atoms
    control = _controller(policy, problem, substeps)
    stopper = _stopper(stop_rule, problem, substeps)

    xi = np.empty((B, n, d))
    uj = np.empty((B, n, J))
    uc = np.empty((B, n))
    for b, p in enumerate(paths):
        g_noise, g_ctrl = path_streams(seed, p)
        xi[b] = g_noise.standard_normal((n, d))
        if J:
            uj[b] = g_noise.random((n, J))
        uc[b] = g_ctrl.random(n)

    X = np.broadcast_to(np.asarray(problem.x0, dtype=float), (B, d)).copy()
    states = np.empty((B, n + 1, d)) if record else None
    ctrls = np.full((B, n), -1, dtype=np.int64) if record else None
    if record:
        states[:, 0] = X
    alive = np.ones(B, dtype=bool)
    stop_index = np.full(B, -1, dtype=np.int64)
    payoff = np.zeros(B)
    sq = np.sqrt(dt)
    for j in range(n):
        t = times[j]
        if stopper is not None:
            hit = alive & stopper(j, t, X)
            if np.any(hit):
                payoff[hit] += problem.rewards.stopping(t, X[hit])
                stop_index[hit] = j
                alive &= ~hit
        k = control(j, t, X, uc[:, j])
        U = atoms[k]
        payoff += np.where(alive, problem.rewards.running(t, X, U) * dt, 0.0)
        drift = coeffs.effective_drift(t, X, U)
        a = np.broadcast_to(np.asarray(coeffs.diffusion(t, X, U), dtype=float), (B, d, d))
        root = _sqrt_psd(a)
        noise = root[:, :, 0] * xi[:, j] if d == 1 else np.einsum("nij,nj->ni", root, xi[:, j])
        step = drift * dt + noise * sq
        if J:
            lam = coeffs.jump_rates(t, X, U)
            step = step + poisson_inverse(uj[:, j], lam * dt) @ zs
        Xn = np.where(alive[:, None], X + step, X)
        if not np.all(np.isfinite(Xn)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(Xn), axis=1))[0])
            raise SimulationError(f"non-finite state at step {j} on path {paths[bad]}", j, int(paths[bad]))
        X = Xn
        if record:
            states[:, j + 1] = X
            ctrls[:, j] = np.where(alive, k, ctrls[:, j - 1] if j else k)
    payoff += np.where(alive, problem.rewards.terminal(X), 0.0)
    if not np.all(np.isfinite(payoff)):
        bad = int(np.flatnonzero(~np.isfinite(payoff))[0])
        raise SimulationError(f"non-finite payoff on path {paths[bad]}", n, int(paths[bad]))
    return PathBatch(times, states, ctrls, stop_index, payoff, int(paths[0]) if B else 0)


def simulate_path(problem: Problem, policy, stop_rule=None, seed: int = 0, path_index: int = 0,
                  substeps: int = 1) -> PathSample:
    return simulate_batch(problem, policy, stop_rule, seed, [path_index], substeps).sample(0)


def simulate(problem: Problem, policy, stop_rule=None, config: SimConfig = SimConfig(), record: bool = True,
             chunk: int = CHUNK):
    """Yield batches covering paths 0..n_paths-1 in order."""
    for start in range(0, config.n_paths, chunk):
        idx = range(start, min(start + chunk, config.n_paths))
        yield simulate_batch(problem, policy, stop_rule, config.seed, idx, config.substeps, record)


def payoffs(problem: Problem, policy, stop_rule=None, config: SimConfig = SimConfig()) -> np.ndarray:
    return np.concatenate([b.payoff for b in simulate(problem, policy, stop_rule, config, record=False)])


def summarize(values: np.ndarray, seed: int) -> Estimate:
    n = len(values)
    mean = float(np.mean(values))
    stderr = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return Estimate(mean, stderr, n, int(seed))


def estimate_value(problem: Problem, policy, stop_rule=None, config: SimConfig = SimConfig()) -> Estimate:
    """Monte Carlo mean and standard error of running plus terminal/stopping reward."""
    return summarize(payoffs(problem, policy, stop_rule, config), config.seed)


def batch_to_csv(batch: PathBatch) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = batch.states.shape[2]
    w.writerow(["path", "step", "t"] + [f"x{i + 1}" for i in range(d)] + ["atom", "stopped"])
    for j in range(len(batch)):
        s = int(batch.stop_index[j])
        for i, t in enumerate(batch.times):
            atom = int(batch.controls[j, i]) if i < len(batch.times) - 1 else ""
            w.writerow([batch.first_path + j, i, f"{t:.17g}"] + [f"{v:.17g}" for v in batch.states[j, i]]
                       + [atom, int(0 <= s <= i)])
    return buf.getvalue()
