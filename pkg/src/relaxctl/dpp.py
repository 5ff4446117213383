"""Locally consistent Markov-chain approximation and backward induction.

The chain follows the Kushner-Dupuis construction on the state lattice: per
axis, central differencing of the drift when it keeps probabilities
nonnegative, upwind otherwise; cross-diffusion through the diagonal
neighbours; each jump atom moves mass to the nearest lattice offset.
Mass leaving the box is projected back onto the boundary node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .core import ConfigurationError, Mode, Problem

TIE_TOL = 1e-10


@dataclass(frozen=True)
class Layer:
    """Stencil transitions out of every node for each atom: ``probs[k, x, s]`` to ``targets[k, x, s]``."""

    targets: np.ndarray
    probs: np.ndarray

    def expect(self, k: int, v: np.ndarray) -> np.ndarray:
        return np.sum(self.probs[k] * v[self.targets[k]], axis=1)

    def expect_all(self, v: np.ndarray) -> np.ndarray:
        return np.sum(self.probs * v[self.targets], axis=2)

    def row(self, k: int, x: int) -> dict:
        out: dict = {}
        for y, p in zip(self.targets[k, x], self.probs[k, x]):
            if p != 0:
                out[int(y)] = out.get(int(y), 0.0) + float(p)
        return out

    def dense(self, k: int, n_nodes: int) -> np.ndarray:
        P = np.zeros((n_nodes, n_nodes))
        rows = np.repeat(np.arange(n_nodes), self.targets.shape[2])
        np.add.at(P, (rows, self.targets[k].ravel()), self.probs[k].ravel())
        return P


@dataclass(frozen=True)
class TransitionModel:
    n_steps: int
    n_nodes: int
    n_atoms: int
    layers: tuple
    homogeneous: bool
    cfl_margin: float
    jump_rounding: float
    numerical_diffusion: float = 0.0

    def layer(self, i: int) -> Layer:
        return self.layers[0] if self.homogeneous else self.layers[i]

    def expect(self, i: int, k: int, v: np.ndarray) -> np.ndarray:
        return self.layer(i).expect(k, v)

    def row(self, i: int, x: int, k: int) -> dict:
        return self.layer(i).row(k, x)

    def moments(self, problem: Problem, i: int, k: int):
        """One-step mean and covariance of the displacement out of every node."""
        lay = self.layer(i)
        pts = problem.lattice.points
        disp = pts[lay.targets[k]] - pts[:, None, :]
        p = lay.probs[k][..., None]
        mean = np.sum(p * disp, axis=1)
        cov = np.einsum("ns,nsi,nsj->nij", lay.probs[k], disp, disp) - np.einsum("ni,nj->nij", mean, mean)
        return mean, cov


class CFLError(ConfigurationError):
    def __init__(self, message: str, min_steps: int):
        super().__init__(message)
        self.min_steps = min_steps


def _layer(problem: Problem, t: float, dt: float):
    lat = problem.lattice
    pts = lat.points
    N, d = pts.shape
    h = np.asarray(lat.h)
    shape = np.asarray(lat.shape)
    base = lat.multi_index(pts)
    coeffs = problem.model_coeffs()
    zs = coeffs.jump_offsets()
    joff = np.rint(zs / h).astype(np.int64) if len(zs) else np.zeros((0, d), dtype=np.int64)
    jround = float(np.max(np.abs(joff * h - zs))) if len(zs) else 0.0

    offsets = []
    for i in range(d):
        for s in (1, -1):
            e = np.zeros(d, dtype=np.int64)
            e[i] = s
            offsets.append(e)
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    for i, j in pairs:
        for si, sj in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
            e = np.zeros(d, dtype=np.int64)
            e[i], e[j] = si, sj
            offsets.append(e)
    offsets.extend(joff)
    offsets.append(np.zeros(d, dtype=np.int64))
    offsets = np.array(offsets, dtype=np.int64).reshape(-1, d)
    S = len(offsets)

    tgt = np.clip(base[:, None, :] + offsets[None, :, :], 0, shape - 1)
    targets_one = np.ravel_multi_index(tuple(np.moveaxis(tgt, 2, 0)), tuple(shape))

    K = problem.controls.K
    targets = np.broadcast_to(targets_one, (K, N, S)).copy()
    probs = np.zeros((K, N, S))
    worst = (np.inf, None, None)
    max_rate = 0.0
    numdiff = 0.0
    for k in range(K):
        u = problem.control_block(k, N)
        b = np.broadcast_to(coeffs.effective_drift(t, pts, u), (N, d))
        a = np.broadcast_to(np.asarray(coeffs.diffusion(t, pts, u), dtype=float), (N, d, d))
        lam = coeffs.jump_rates(t, pts, u)
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(a)) and np.all(np.isfinite(lam))):
            raise ConfigurationError(f"non-finite coefficients at t={t}, atom {k}")
        if np.any(lam < 0):
            raise ConfigurationError(f"negative jump rate at t={t}, atom {k}")
        rate = np.zeros((N, S - 1))
        col = 0
        for i in range(d):
            resid = a[:, i, i].copy()
            for j in range(d):
                if j != i:
                    resid -= np.abs(a[:, i, j]) * h[i] / h[j]
            if np.any(resid < -1e-12):
                bad = int(np.argmin(resid))
                raise ConfigurationError(
                    f"diffusion matrix not diagonally dominant at x={pts[bad].tolist()}, atom {k}, axis {i}"
                )
            resid = np.maximum(resid, 0.0)
            central = resid >= np.abs(b[:, i]) * h[i]
            up = np.where(central, resid / (2 * h[i] ** 2) + b[:, i] / (2 * h[i]),
                          resid / (2 * h[i] ** 2) + np.maximum(b[:, i], 0) / h[i])
            dn = np.where(central, resid / (2 * h[i] ** 2) - b[:, i] / (2 * h[i]),
                          resid / (2 * h[i] ** 2) + np.maximum(-b[:, i], 0) / h[i])
            numdiff = max(numdiff, float(np.max(np.where(central, 0.0, np.abs(b[:, i]) * h[i]))))
            rate[:, col], rate[:, col + 1] = up, dn
            col += 2
        for i, j in pairs:
            pos = np.maximum(a[:, i, j], 0) / (2 * h[i] * h[j])
            neg = np.maximum(-a[:, i, j], 0) / (2 * h[i] * h[j])
            rate[:, col:col + 4] = np.stack([pos, pos, neg, neg], axis=1)
            col += 4
        rate[:, col:col + len(joff)] = lam
        total = rate.sum(axis=1)
        max_rate = max(max_rate, float(total.max()))
        probs[k, :, :-1] = dt * rate
        stay = 1.0 - probs[k, :, :-1].sum(axis=1)
        probs[k, :, -1] = stay
        j = int(np.argmin(stay))
        if stay[j] < worst[0]:
            worst = (float(stay[j]), j, k)
    return Layer(targets, probs), worst, max_rate, jround, numdiff


def build_transition(problem: Problem) -> TransitionModel:
    """Locally consistent transition probabilities for every (time index, node, atom)."""
    grid = problem.grid
    dt = grid.dt
    times = grid.times[:1] if problem.coeffs.time_homogeneous else grid.times[:-1]
    layers = []
    margin = np.inf
    max_rate = 0.0
    jround = 0.0
    numdiff = 0.0
    worst_at = None
    for i, t in enumerate(times):
        lay, (stay, node, k), rate, jr, nd = _layer(problem, float(t), dt)
        layers.append(lay)
        max_rate = max(max_rate, rate)
        jround = max(jround, jr)
        numdiff = max(numdiff, nd)
        if stay < margin:
            margin, worst_at = stay, (i, node, k)
    if margin < -1e-12:
        i, node, k = worst_at
        n_min = int(math.ceil((grid.T - grid.t0) * max_rate - 1e-9))
        x = problem.lattice.points[node].tolist()
        raise CFLError(
            f"CFL condition violated at time index {i}, x={x}, atom {k} (stay probability {margin:.3g}); "
            f"use n_steps >= {n_min}",
            n_min,
        )
    if margin < 0:
        for lay in layers:
            np.clip(lay.probs, 0.0, None, out=lay.probs)
    for lay in layers:
        lay.targets.setflags(write=False)
        lay.probs.setflags(write=False)
    return TransitionModel(
        n_steps=grid.n_steps,
        n_nodes=problem.lattice.n_nodes,
        n_atoms=problem.controls.K,
        layers=tuple(layers),
        homogeneous=problem.coeffs.time_homogeneous,
        cfl_margin=float(margin),
        jump_rounding=jround,
        numerical_diffusion=numdiff,
    )


@dataclass
class ValueFunction:
    values: np.ndarray

    def __getitem__(self, key):
        return self.values[key]

    @property
    def n_steps(self) -> int:
        return self.values.shape[0] - 1


@dataclass
class PolicyTable:
    atoms: np.ndarray
    stop: Optional[np.ndarray] = None
    kernel: Optional[np.ndarray] = None

    def atom(self, i: int, node: int) -> int:
        return int(self.atoms[i, node])


def _atoms_in_play(problem: Problem) -> list:
    return [0] if problem.mode == Mode.STOP else list(range(problem.controls.K))


def continuation_values(problem: Problem, tm: TransitionModel, i: int, v_next: np.ndarray) -> np.ndarray:
    """One-step values L0 dt + E[v_next] for each atom in play, shape (K', N)."""
    t = problem.grid.time(i)
    pts = problem.lattice.points
    play = _atoms_in_play(problem)
    N = len(pts)
    # one reward call over all (atom, node) rows
    x = np.tile(pts, (len(play), 1))
    u = np.repeat(problem.controls.atoms[play], N, axis=0)
    run = np.asarray(problem.rewards.running(t, x, u), dtype=float).reshape(len(play), N)
    ev = tm.layer(i).expect_all(v_next)[play]
    return run * problem.grid.dt + ev


def stopping_values(problem: Problem, i: int) -> np.ndarray:
    return np.asarray(problem.rewards.stopping(problem.grid.time(i), problem.lattice.points), dtype=float)


def _bellman(problem: Problem, tm: TransitionModel, i: int, v_next: np.ndarray):
    q = continuation_values(problem, tm, i, v_next)
    best = np.argmax(q, axis=0)
    cont = q[best, np.arange(q.shape[1])]
    if problem.stops:
        phi = stopping_values(problem, i)
        stop = phi > cont
        return np.where(stop, phi, cont), best, stop
    return cont, best, None


def terminal_values(problem: Problem) -> np.ndarray:
    return np.asarray(problem.rewards.terminal(problem.lattice.points), dtype=float)


def backward_induction(problem: Problem, tm: TransitionModel):
    """Value function and argmax policy (ties to the lowest atom; stop ties to continue)."""
    n, N = problem.grid.n_steps, problem.lattice.n_nodes
    if tm.n_steps != n or tm.n_nodes != N:
        raise ValueError("transition model does not match the problem grid")
    v = np.empty((n + 1, N))
    atoms = np.zeros((n, N), dtype=np.int64)
    stop = np.zeros((n, N), dtype=bool) if problem.stops else None
    v[n] = terminal_values(problem)
    for i in range(n - 1, -1, -1):
        v[i], atoms[i], s = _bellman(problem, tm, i, v[i + 1])
        if stop is not None:
            stop[i] = s
    if not np.all(np.isfinite(v)):
        raise ValueError("value function is not finite")
    return ValueFunction(v), PolicyTable(atoms, stop)


def check_dpp(problem: Problem, tm: TransitionModel, v: ValueFunction, tau_index: Union[int, np.ndarray]) -> float:
    """Max discrepancy between ``v`` and the induction restarted from the layers picked out by ``tau_index``.

    ``tau_index[y]`` is a grid index per node: the chain is stopped at the
    first time j with j >= tau_index[X_j], where ``v[j]`` is used as terminal
    data. A scalar applies to every node.
    """
    vals = v.values
    n, N = problem.grid.n_steps, problem.lattice.n_nodes
    if vals.shape != (n + 1, N):
        raise ValueError(f"value array shape {vals.shape} does not match ({n + 1}, {N})")
    tau = np.broadcast_to(np.asarray(tau_index, dtype=np.int64), (N,))
    if tau.shape != (N,):
        raise ValueError("tau_index must be a scalar or one index per node")
    if np.any(tau < 0) or np.any(tau > n):
        raise ValueError("tau_index outside the time grid")
    w = np.empty_like(vals)
    w[n] = vals[n]
    for j in range(n - 1, -1, -1):
        fresh, _, _ = _bellman(problem, tm, j, w[j + 1])
        w[j] = np.where(j >= tau, vals[j], fresh)
    return float(np.max(np.abs(w - vals)))


def snell_envelope(problem: Problem, tm: TransitionModel):
    """Optimal stopping value and the region where the stopping reward attains it."""
    if problem.rewards.stopping is None:
        raise ConfigurationError("optimal stopping needs a stopping reward")
    n, N = problem.grid.n_steps, problem.lattice.n_nodes
    v = np.empty((n + 1, N))
    region = np.ones((n + 1, N), dtype=bool)
    v[n] = terminal_values(problem)
    pts = problem.lattice.points
    dt = problem.grid.dt
    for i in range(n - 1, -1, -1):
        t = problem.grid.time(i)
        cont = problem.rewards.running(t, pts, problem.control_block(0, N)) * dt + tm.expect(i, 0, v[i + 1])
        phi = stopping_values(problem, i)
        v[i] = np.maximum(phi, cont)
        region[i] = phi >= cont
    return ValueFunction(v), region


def relaxed_vertex_check(problem: Problem, tm: TransitionModel, v: ValueFunction, n_mixtures: int = 100,
                         seed: int = 0) -> float:
    """Largest excess of a mixed (relaxed) one-step value over the best single atom.

    Mixtures are evaluated through the mixed transition kernel, not by mixing
    the per-atom values.
    """
    rng = np.random.default_rng(seed)
    play = _atoms_in_play(problem)
    K = len(play)
    pts = problem.lattice.points
    N = len(pts)
    dt = problem.grid.dt
    gap = -np.inf
    for i in range(problem.grid.n_steps):
        t = problem.grid.time(i)
        lay = tm.layer(i)
        q = continuation_values(problem, tm, i, v.values[i + 1])
        best = q.max(axis=0)
        run = np.array([problem.rewards.running(t, pts, problem.control_block(k, N)) for k in play]) * dt
        mix = rng.dirichlet(np.ones(K), size=n_mixtures) if K > 1 else np.ones((n_mixtures, 1))
        mix = np.vstack([mix, np.full((1, K), 1.0 / K)])
        tg = lay.targets[play].transpose(1, 0, 2).reshape(N, -1)
        vals_next = v.values[i + 1][tg]
        for w in mix:
            pr = (w[:, None, None] * lay.probs[play]).transpose(1, 0, 2).reshape(N, -1)
            val = w @ run + np.sum(pr * vals_next, axis=1)
            gap = max(gap, float(np.max(val - best)))
    return gap if np.isfinite(gap) else 0.0


def evaluate_rule(problem: Problem, tm: TransitionModel, kernels: np.ndarray, stop_probs: Optional[np.ndarray] = None):
    """Exact value of a per-node relaxed rule by backward linear evaluation.

    ``kernels[i, x, k]`` are atom probabilities; ``stop_probs[i, x]`` the
    probability of stopping at (i, x) before the control acts.
    """
    n, N = problem.grid.n_steps, problem.lattice.n_nodes
    V = np.empty((n + 1, N))
    V[n] = terminal_values(problem)
    pts = problem.lattice.points
    dt = problem.grid.dt
    for i in range(n - 1, -1, -1):
        t = problem.grid.time(i)
        cont = np.zeros(N)
        for k in range(problem.controls.K):
            w = kernels[i, :, k]
            if not np.any(w):
                continue
            run = problem.rewards.running(t, pts, problem.control_block(k, N)) * dt
            cont = cont + w * (run + tm.expect(i, k, V[i + 1]))
        if stop_probs is not None:
            sp = stop_probs[i]
            cont = np.where(sp > 0, sp * stopping_values(problem, i) + (1 - sp) * cont, cont)
        V[i] = cont
    return V


def policy_kernels(policy: PolicyTable, K: int) -> np.ndarray:
    n, N = policy.atoms.shape
    ker = np.zeros((n, N, K))
    ker[np.arange(n)[:, None], np.arange(N)[None, :], policy.atoms] = 1.0
    return ker


def local_consistency(problem: Problem, tm: TransitionModel) -> dict:
    """Worst deviation of one-step moments from the generator's characteristics."""
    pts = problem.lattice.points
    N, d = pts.shape
    coeffs = problem.model_coeffs()
    dt = problem.grid.dt
    zs = coeffs.jump_offsets()
    interior = np.ones(N, dtype=bool)
    # nodes whose stencil or jump targets leave the box are excluded
    reach = np.abs(np.rint(zs / np.asarray(problem.lattice.h))).max(axis=0) if len(zs) else np.zeros(d)
    reach = np.maximum(reach, 1)
    idx = problem.lattice.multi_index(pts)
    interior &= np.all((idx >= reach) & (idx <= np.asarray(problem.lattice.shape) - 1 - reach), axis=1)
    mean_err = cov_err = 0.0
    steps = [0] if tm.homogeneous else range(problem.grid.n_steps)
    for i in steps:
        t = problem.grid.time(i)
        for k in range(problem.controls.K):
            u = problem.control_block(k, N)
            m, c = tm.moments(problem, i, k)
            b = coeffs.effective_drift(t, pts, u)
            lam = coeffs.jump_rates(t, pts, u)
            a = np.broadcast_to(coeffs.diffusion(t, pts, u), (N, d, d))
            tm_mean = b * dt + (lam @ zs) * dt if len(zs) else b * dt
            tm_cov = a * dt + (np.einsum("nj,ji,jk->nik", lam, zs, zs) * dt if len(zs) else 0)
            mean_err = max(mean_err, float(np.max(np.abs(m - tm_mean)[interior], initial=0.0)))
            cov_err = max(cov_err, float(np.max(np.abs(c - tm_cov)[interior], initial=0.0)))
    return {"mean_error": mean_err, "cov_error": cov_err, "jump_rounding": tm.jump_rounding,
            "numerical_diffusion": tm.numerical_diffusion}
