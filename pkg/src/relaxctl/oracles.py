"""Reference values computed without the backward-induction solver.

* Exhaustive enumeration of deterministic Markov policies (and stop
  patterns), each evaluated by forward propagation of the chain's law.
* Discrete-time Riccati recursion for the Euler-discretized LQ problem.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import Mode, Problem
from .dpp import TransitionModel

MAX_POLICIES = 5_000_000
BATCH = 1 << 16


class InstanceTooLarge(ValueError):
    pass


def _dense_kernels(problem: Problem, tm: TransitionModel) -> np.ndarray:
    n, N, K = problem.grid.n_steps, problem.lattice.n_nodes, problem.controls.K
    P = np.zeros((n, K, N, N))
    for i in range(n):
        for k in range(K):
            for x in range(N):
                for y, p in tm.row(i, x, k).items():
                    P[i, k, x, y] += p
    return P


def reachable_nodes(P: np.ndarray, start: int, atoms) -> list:
    """Per time index, the sorted nodes the chain can occupy under some policy."""
    n = P.shape[0]
    out = []
    cur = {start}
    for i in range(n):
        out.append(sorted(cur))
        nxt = set()
        for x in cur:
            for k in atoms:
                nxt.update(np.flatnonzero(P[i, k, x] > 0).tolist())
        cur = nxt
    return out


def enumerate_policies(problem: Problem, tm: TransitionModel, start: int = None) -> dict:
    """Best value from ``start`` over all deterministic Markov policies, by brute force.

    Only decisions at nodes reachable from ``start`` affect the value, so the
    product runs over those. Returns the value, the number of policies
    tried and one maximizing assignment.
    """
    start = problem.x0_node if start is None else start
    n, N = problem.grid.n_steps, problem.lattice.n_nodes
    P = _dense_kernels(problem, tm)
    atoms = [0] if problem.mode == Mode.STOP else list(range(problem.controls.K))
    actions = list(atoms) + (["stop"] if problem.stops else [])
    reach = reachable_nodes(P, start, atoms)
    slots = [(i, x) for i in range(n) for x in reach[i]]
    A = len(actions)
    total = A ** len(slots)
    if total > MAX_POLICIES:
        raise InstanceTooLarge(f"{total} policies exceed the enumeration limit {MAX_POLICIES}")

    pts = problem.lattice.points
    dt = problem.grid.dt
    # per-action one-step reward and kernel; stopping collects its reward and removes the mass
    R = np.zeros((n, A, N))
    Pa = np.zeros((n, A, N, N))
    for i in range(n):
        t = problem.grid.time(i)
        for a, k in enumerate(atoms):
            R[i, a] = problem.rewards.running(t, pts, problem.control_block(k, N)) * dt
            Pa[i, a] = P[i, k]
        if problem.stops:
            R[i, A - 1] = problem.rewards.stopping(t, pts)
    term = problem.rewards.terminal(pts)

    best, best_choice, count = -np.inf, None, 0
    slot_time = np.array([i for i, _ in slots])
    slot_node = np.array([x for _, x in slots])
    nodes = np.arange(N)[None, :]
    it = itertools.product(range(A), repeat=len(slots))
    while True:
        chunk = np.array(list(itertools.islice(it, BATCH)), dtype=np.int64).reshape(-1, len(slots))
        if not len(chunk):
            break
        B = len(chunk)
        act = np.zeros((B, n, N), dtype=np.int64)
        act[:, slot_time, slot_node] = chunk
        dist = np.zeros((B, N))
        dist[:, start] = 1.0
        value = np.zeros(B)
        for i in range(n):
            a_i = act[:, i]
            value = value + np.sum(dist * R[i, a_i, nodes], axis=1)
            dist = np.einsum("bx,bxy->by", dist, Pa[i][a_i, nodes])
        value = value + dist @ term
        count += B
        j = int(np.argmax(value))
        if value[j] > best:
            best = float(value[j])
            best_choice = {slots[s]: actions[c] for s, c in enumerate(chunk[j])}
    return {"value": best, "n_policies": count, "policy": best_choice, "n_decision_nodes": len(slots)}


def enumerate_stopping(problem: Problem, tm: TransitionModel, start: int = None) -> dict:
    """Best stopping rule by brute force over stop/continue patterns on reachable nodes."""
    return enumerate_policies(problem, tm, start)


@dataclass(frozen=True)
class RiccatiSolution:
    P: np.ndarray
    c: np.ndarray
    gain: np.ndarray

    def value(self, x: float, i: int = 0) -> float:
        return float(-(self.P[i] * x * x + self.c[i]))

    def control(self, i: int, x):
        return -self.gain[i] * np.asarray(x)


def riccati_lq(A: float, B: float, sigma: float, q: float, r: float, p: float, dt: float, n_steps: int) -> RiccatiSolution:
    """Scalar discrete Riccati recursion for x' = (1 + A dt) x + B dt u + sigma sqrt(dt) xi.

    Maximizes E[-sum (q x^2 + r u^2) dt - p x_n^2]; the value at step i is
    -(P_i x^2 + c_i) and the optimal feedback is u = -gain_i x.
    """
    a, b = 1.0 + A * dt, B * dt
    P = np.empty(n_steps + 1)
    c = np.empty(n_steps + 1)
    gain = np.empty(n_steps)
    P[n_steps], c[n_steps] = p, 0.0
    for i in range(n_steps - 1, -1, -1):
        Pn = P[i + 1]
        denom = r * dt + b * b * Pn
        gain[i] = a * b * Pn / denom
        P[i] = q * dt + a * a * Pn - (a * b * Pn) ** 2 / denom
        c[i] = c[i + 1] + Pn * sigma ** 2 * dt
    return RiccatiSolution(P, c, gain)
